use std::path::Path;

use anyhow::Context;
use attralign_core::alignment::{sample_probabilities, AxisEvaluation, Evaluation, Oracle};
use attralign_core::controller::RunReport;
use attralign_core::numerics::Matrix;

use crate::config::{read_input, InputError};

pub fn write_report(path: &Path, report: &RunReport) -> anyhow::Result<()> {
    std::fs::write(path, report.to_json()?).with_context(|| format!("writing {}", path.display()))
}

/// Columns: `x0..x{n-1}`, then per axis `<axis>_class` and `<axis>_p<c>`.
pub fn write_samples(path: &Path, x: &Matrix, oracle: &dyn Oracle) -> anyhow::Result<()> {
    let axes = oracle.axes();
    let probs = sample_probabilities(oracle, x)?;
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let mut header: Vec<String> = (0..x.cols()).map(|d| format!("x{d}")).collect();
    for a in &axes {
        header.push(format!("{}_class", a.name));
        header.extend((0..a.classes).map(|c| format!("{}_p{c}", a.name)));
    }
    w.write_record(&header)?;
    for (i, row) in x.iter_rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        for p in &probs[i] {
            rec.push(argmax(p).to_string());
            rec.extend(p.iter().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the coordinate columns (`x0`, `x1`, ...) of a samples CSV.
pub fn read_samples(path: &Path) -> anyhow::Result<Matrix> {
    let text = read_input(path)?;
    let bad = |msg: String| InputError(format!("invalid samples file {}: {msg}", path.display()));
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    let mut cols = Vec::new();
    while let Some(i) = header.iter().position(|h| h == format!("x{}", cols.len())) {
        cols.push(i);
    }
    if cols.is_empty() {
        return Err(bad("no x0 column".into()).into());
    }
    let mut data = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        for &c in &cols {
            let v: f64 = rec
                .get(c)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("row {} column {c} is not a number", line + 1)))?;
            data.push(v);
        }
    }
    Ok(Matrix::new(data.len() / cols.len(), cols.len(), data)?)
}

/// Columns: `scope,class,target,soft,hard`; `scope` is an axis name or `joint`.
pub fn write_histogram(path: &Path, eval: &Evaluation) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["scope", "class", "target", "soft", "hard"])?;
    let mut put = |scope: &str, a: &AxisEvaluation| -> anyhow::Result<()> {
        for c in 0..a.target.len() {
            w.write_record([
                scope.to_string(),
                c.to_string(),
                a.target[c].to_string(),
                a.soft[c].to_string(),
                a.hard[c].to_string(),
            ])?;
        }
        Ok(())
    };
    for a in &eval.axes {
        put(&a.name, a)?;
    }
    if let Some(j) = &eval.joint {
        put("joint", j)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cost_curve(path: &Path, report: &RunReport) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record([
        "batch",
        "iteration",
        "total_cost",
        "terminal_cost",
        "control_energy",
        "joint_residual",
    ])?;
    for it in &report.iterations {
        w.write_record([
            it.batch.to_string(),
            it.iteration.to_string(),
            it.total_cost.to_string(),
            it.terminal_cost.to_string(),
            it.control_energy.to_string(),
            it.joint_residual.map(|r| r.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn argmax(p: &[f64]) -> usize {
    (0..p.len()).fold(0, |best, k| if p[k] > p[best] { k } else { best })
}
