//! Aggregate an artifact directory into a summary table and evaluate the
//! runtime-checkable pass/fail gates (drift direction, AR monotonicity,
//! planner convergence and goal reach).

use std::fmt::Write as _;
use std::path::Path;

use crate::experiment::RunError;

fn fail(e: impl std::fmt::Display) -> RunError {
    RunError(e.to_string())
}

/// Spearman rank correlation of a series against its index order. Values are
/// continuous here, so ties are broken by index.
pub fn spearman_against_index(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 1.0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("finite values")
            .then(a.cmp(&b))
    });
    let mut rank = vec![0usize; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let d2: f64 = rank
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let d = i as f64 - r as f64;
            d * d
        })
        .sum();
    1.0 - 6.0 * d2 / (n as f64 * (n as f64 * n as f64 - 1.0))
}

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_csv(dir: &Path, name: &str) -> Result<Csv, RunError> {
    let path = dir.join(name);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| RunError(format!("missing input: {name}")))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| RunError(format!("{name} is empty")))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok(Csv { header, rows })
}

impl Csv {
    fn column(&self, name: &str) -> Result<usize, RunError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| RunError(format!("column {name} not found")))
    }

    fn floats(&self, name: &str) -> Result<Vec<f64>, RunError> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .filter(|r| !r[c].is_empty())
            .map(|r| r[c].parse::<f64>().map_err(fail))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SummaryFlag {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub flags: Vec<SummaryFlag>,
    pub table: String,
    pub csv: String,
}

/// Build the summary from a completed artifact directory. Missing inputs are
/// reported by name.
pub fn summarize(dir: &Path) -> Result<Summary, RunError> {
    if !dir.join("manifest.txt").exists() {
        return Err(RunError("missing input: manifest.txt".into()));
    }
    let metrics = read_csv(dir, "metrics.csv")?;
    let drift = read_csv(dir, "drift_curve.csv")?;
    let plan_ar = read_csv(dir, "plan_ar.csv")?;
    let ablate = read_csv(dir, "ablate.csv")?;

    let ar_curve = drift.floats("ar_mse")?;
    let anchor_curve = drift.floats("anchor_mse")?;
    if ar_curve.is_empty() || ar_curve.len() != anchor_curve.len() {
        return Err(RunError("drift_curve.csv is malformed".into()));
    }
    let terminal_ar = *ar_curve.last().expect("nonempty");
    let terminal_anchor = *anchor_curve.last().expect("nonempty");
    let rho = spearman_against_index(&ar_curve);

    let best_scores = plan_ar.floats("best_score")?;
    let monotone = best_scores.windows(2).all(|w| w[1] <= w[0]);
    let fde = *plan_ar
        .floats("fde")?
        .last()
        .ok_or_else(|| RunError("plan_ar.csv carries no fde".into()))?;

    let flags = vec![
        SummaryFlag {
            name: "anchor_terminal_below_ar".into(),
            value: terminal_anchor / terminal_ar,
            threshold: "< 1".into(),
            pass: terminal_anchor < terminal_ar,
        },
        SummaryFlag {
            name: "ar_curve_spearman".into(),
            value: rho,
            threshold: "> 0.9".into(),
            pass: rho > 0.9,
        },
        SummaryFlag {
            name: "plan_best_score_monotone".into(),
            value: if monotone { 1.0 } else { 0.0 },
            threshold: "= 1".into(),
            pass: monotone,
        },
        SummaryFlag {
            name: "plan_fde_m".into(),
            value: fde,
            threshold: "< 0.5".into(),
            pass: fde < 0.5,
        },
    ];

    // Aggregations: per-horizon strategy means and per-interval ablation means.
    let strategy_col = metrics.column("strategy")?;
    let horizon_col = metrics.column("horizon")?;
    let mse_col = metrics.column("mse")?;
    let mut csv = String::from("section,key,value\n");
    for row in &metrics.rows {
        if row[mse_col].is_empty() {
            continue;
        }
        let _ = writeln!(
            csv,
            "horizon_mse,{}@{},{}",
            row[strategy_col], row[horizon_col], row[mse_col]
        );
    }
    let int_col = ablate.column("interval")?;
    let tm_col = ablate.column("mean_mse")?;
    let mut intervals: Vec<String> = Vec::new();
    for row in &ablate.rows {
        if !intervals.contains(&row[int_col]) {
            intervals.push(row[int_col].clone());
        }
    }
    for interval in intervals {
        let vals: Vec<f64> = ablate
            .rows
            .iter()
            .filter(|r| r[int_col] == interval)
            .map(|r| r[tm_col].parse::<f64>().map_err(fail))
            .collect::<Result<_, _>>()?;
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let _ = writeln!(csv, "ablate_interval_mse,{interval},{mean:.12}");
    }
    for f in &flags {
        let _ = writeln!(
            csv,
            "flag,{},{}",
            f.name,
            if f.pass { "pass" } else { "fail" }
        );
    }

    let mut table = String::new();
    let _ = writeln!(table, "{:<28} {:>14} {:>10} {:>6}", "check", "value", "bound", "ok");
    for f in &flags {
        let _ = writeln!(
            table,
            "{:<28} {:>14.6} {:>10} {:>6}",
            f.name,
            f.value,
            f.threshold,
            if f.pass { "pass" } else { "FAIL" }
        );
    }

    Ok(Summary { flags, table, csv })
}

/// Write summary.csv into the artifact directory and return the summary.
pub fn emit_report(dir: &Path) -> Result<Summary, RunError> {
    let summary = summarize(dir)?;
    std::fs::write(dir.join("summary.csv"), summary.csv.as_bytes()).map_err(fail)?;
    Ok(summary)
}
