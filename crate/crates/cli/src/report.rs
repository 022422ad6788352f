//! MSE/MADE trade-off tables built from `results.csv`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};

/// `true` for points not dominated by any other. A point dominates another
/// when it is no worse in both coordinates and better in at least one.
pub fn pareto_flags(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&(a, b)| !points.iter().any(|&(c, d)| c <= a && d <= b && (c < a || d < b)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffRow {
    pub model: String,
    pub keep_rate: String,
    pub objective: String,
    pub lambda_f: String,
    pub gamma: String,
    pub k: String,
    pub seeds: usize,
    pub mse: f64,
    pub made: f64,
    pub pareto: bool,
}

const SETTING_COLUMNS: [&str; 6] = ["model", "keep_rate", "objective", "lambda_f", "gamma", "k"];

/// Averages seeds per setting and flags the Pareto front within each
/// (model, keep rate) panel. Panels and settings keep first-seen order.
pub fn tradeoff(results_csv: &str) -> anyhow::Result<Vec<TradeoffRow>> {
    let mut reader = csv::Reader::from_reader(results_csv.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).with_context(|| format!("results have no `{name}` column"));
    let setting_idx = SETTING_COLUMNS.iter().map(|c| col(c)).collect::<anyhow::Result<Vec<_>>>()?;
    let (mse_i, made_i) = (col("mse")?, col("made")?);

    let mut order: Vec<Vec<String>> = Vec::new();
    let mut sums: HashMap<Vec<String>, (usize, f64, f64)> = HashMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let key: Vec<String> = setting_idx.iter().map(|&i| rec[i].to_string()).collect();
        let parse = |i: usize| rec[i].parse::<f64>().with_context(|| format!("bad number {:?}", &rec[i]));
        let (mse, made) = (parse(mse_i)?, parse(made_i)?);
        let e = sums.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            (0, 0.0, 0.0)
        });
        e.0 += 1;
        e.1 += mse;
        e.2 += made;
    }
    if order.is_empty() {
        bail!("results contain no rows");
    }

    let mut rows: Vec<TradeoffRow> = order
        .iter()
        .map(|key| {
            let (n, mse, made) = sums[key];
            TradeoffRow {
                model: key[0].clone(),
                keep_rate: key[1].clone(),
                objective: key[2].clone(),
                lambda_f: key[3].clone(),
                gamma: key[4].clone(),
                k: key[5].clone(),
                seeds: n,
                mse: mse / n as f64,
                made: made / n as f64,
                pareto: false,
            }
        })
        .collect();

    let mut panels: Vec<(String, String)> = Vec::new();
    for r in &rows {
        let p = (r.model.clone(), r.keep_rate.clone());
        if !panels.contains(&p) {
            panels.push(p);
        }
    }
    let mut grouped = Vec::with_capacity(rows.len());
    for (model, keep) in panels {
        let mut panel: Vec<TradeoffRow> = rows.iter().filter(|r| r.model == model && r.keep_rate == keep).cloned().collect();
        let flags = pareto_flags(&panel.iter().map(|r| (r.mse, r.made)).collect::<Vec<_>>());
        for (r, f) in panel.iter_mut().zip(flags) {
            r.pareto = f;
        }
        grouped.extend(panel);
    }
    rows = grouped;
    Ok(rows)
}

fn status(pareto: bool) -> &'static str {
    if pareto {
        "optimal"
    } else {
        "dominated"
    }
}

pub fn tradeoff_csv(rows: &[TradeoffRow]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model", "keep_rate", "objective", "lambda_f", "gamma", "k", "seeds", "mse", "made", "mse_x100", "made_x100", "pareto",
    ])?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.keep_rate.clone(),
            r.objective.clone(),
            r.lambda_f.clone(),
            r.gamma.clone(),
            r.k.clone(),
            r.seeds.to_string(),
            r.mse.to_string(),
            r.made.to_string(),
            (r.mse * 100.0).to_string(),
            (r.made * 100.0).to_string(),
            status(r.pareto).to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Fixed-width table with values scaled by 100.
pub fn tradeoff_table(rows: &[TradeoffRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<7} {:>9} {:<13} {:>9} {:>6} {:>4} {:>12} {:>12}  pareto",
        "model", "keep_rate", "objective", "lambda_f", "gamma", "k", "mse(x1e2)", "made(x1e2)"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<7} {:>9} {:<13} {:>9} {:>6} {:>4} {:>12.4} {:>12.4}  {}",
            r.model,
            r.keep_rate,
            r.objective,
            r.lambda_f,
            r.gamma,
            r.k,
            r.mse * 100.0,
            r.made * 100.0,
            status(r.pareto)
        );
    }
    out
}

/// Reads `dir/results.csv`, writes `dir/tradeoff.csv` and returns the table.
pub fn report(dir: &Path) -> anyhow::Result<String> {
    let path = dir.join("results.csv");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let rows = tradeoff(&text)?;
    std::fs::write(dir.join("tradeoff.csv"), tradeoff_csv(&rows)?)?;
    Ok(tradeoff_table(&rows))
}
