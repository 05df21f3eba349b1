//! Plain-text summary of a finished run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use seqfa_core::modelselect::{jeffreys_label, replicate_spread};
use seqfa_core::{Error, Result};

use crate::ingest::csv_err;
use crate::output::{EVIDENCE_FILE, LBF_FILE, META_FILE, TRIGGERS_FILE};

/// Final-index evidence per replicate, read back from `evidence.csv`.
#[derive(Clone, Debug)]
pub struct FinalEvidence {
    pub labels: Vec<String>,
    pub index: usize,
    /// `values[replicate][model]`
    pub values: Vec<Vec<f64>>,
}

fn parse_f64(s: &str, file: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Data(format!("{file}: bad number {s:?}")))
}

pub fn read_final_evidence(dir: &Path) -> Result<FinalEvidence> {
    let mut rdr = csv::Reader::from_path(dir.join(EVIDENCE_FILE)).map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.len() < 3 || &header[0] != "replicate" || &header[1] != "index" {
        return Err(Error::Data(format!("{EVIDENCE_FILE}: unexpected header")));
    }
    let labels: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    // last row of each replicate
    let mut last: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let rep = parse_f64(&rec[0], EVIDENCE_FILE)? as usize;
        let idx = parse_f64(&rec[1], EVIDENCE_FILE)? as usize;
        let vals = rec
            .iter()
            .skip(2)
            .map(|s| parse_f64(s, EVIDENCE_FILE))
            .collect::<Result<Vec<_>>>()?;
        last.insert(rep, (idx, vals));
    }
    let index = last.values().next().map(|(i, _)| *i).ok_or_else(|| Error::Data(format!("{EVIDENCE_FILE}: no rows")))?;
    Ok(FinalEvidence {
        labels,
        index,
        values: last.into_values().map(|(_, v)| v).collect(),
    })
}

/// Resample rounds per model label, summed over replicates.
fn trigger_counts(dir: &Path) -> Result<BTreeMap<String, usize>> {
    let mut counts = BTreeMap::new();
    let path = dir.join(TRIGGERS_FILE);
    if !path.exists() {
        return Ok(counts);
    }
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        *counts.entry(rec[1].to_string()).or_insert(0) += 1;
    }
    Ok(counts)
}

/// Largest disagreement between the stored final LBF values and the
/// differences of the stored evidence.
fn lbf_consistency(dir: &Path, ev: &FinalEvidence) -> Result<Option<f64>> {
    let path = dir.join(LBF_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    let pos = |l: &str| ev.labels.iter().position(|x| x == l);
    let pairs: Vec<Option<(usize, usize)>> = header
        .iter()
        .skip(2)
        .map(|h| {
            let (a, b) = h.split_once('/')?;
            Some((pos(a)?, pos(b)?))
        })
        .collect();
    let mut worst: f64 = 0.0;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let rep = parse_f64(&rec[0], LBF_FILE)? as usize;
        let idx = parse_f64(&rec[1], LBF_FILE)? as usize;
        if idx != ev.index || rep == 0 || rep > ev.values.len() {
            continue;
        }
        let row = &ev.values[rep - 1];
        for (c, pair) in pairs.iter().enumerate() {
            let Some((a, b)) = *pair else { continue };
            let stored = parse_f64(&rec[c + 2], LBF_FILE)?;
            worst = worst.max((stored - (row[a] - row[b])).abs());
        }
    }
    Ok(Some(worst))
}

fn absolute_flag(dir: &Path) -> Option<bool> {
    let text = std::fs::read_to_string(dir.join(META_FILE)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("absolute_evidence")?.as_bool()
}

/// Renders the summary shown by `seqfa report` and saved as `summary.txt`.
pub fn render(dir: &Path) -> Result<String> {
    let ev = read_final_evidence(dir)?;
    let triggers = trigger_counts(dir)?;
    let m = ev.labels.len();
    let reps = ev.values.len();
    let means: Vec<(f64, f64)> = (0..m)
        .map(|j| replicate_spread(&ev.values.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| means[b].0.total_cmp(&means[a].0));

    let mut s = String::new();
    let scale = match absolute_flag(dir) {
        Some(false) => " (relative to the initial block)",
        _ => "",
    };
    writeln!(s, "Log evidence after observation {}{scale}, {reps} replicate(s)", ev.index).unwrap();
    writeln!(s).unwrap();
    let width = ev.labels.iter().map(String::len).max().unwrap_or(5).max(5);
    writeln!(s, "rank  {:<width$}  {:>14}  {:>8}  {:>9}", "model", "log evidence", "sd", "resamples").unwrap();
    for (rank, &j) in order.iter().enumerate() {
        let sd = if reps > 1 { format!("{:.3}", means[j].1) } else { "-".into() };
        writeln!(
            s,
            "{:>4}  {:<width$}  {:>14.3}  {:>8}  {:>9}",
            rank + 1,
            ev.labels[j],
            means[j].0,
            sd,
            triggers.get(&ev.labels[j]).copied().unwrap_or(0)
        )
        .unwrap();
    }

    if m > 1 {
        writeln!(s).unwrap();
        writeln!(s, "Log Bayes factors, log B(column / row), replicate means").unwrap();
        write!(s, "{:<width$}", "").unwrap();
        for &c in &order[..m - 1] {
            write!(s, "  {:>10}", ev.labels[c]).unwrap();
        }
        writeln!(s).unwrap();
        for (ri, &r) in order.iter().enumerate().skip(1) {
            write!(s, "{:<width$}", ev.labels[r]).unwrap();
            for &c in &order[..ri] {
                write!(s, "  {:>10.3}", means[c].0 - means[r].0).unwrap();
            }
            writeln!(s).unwrap();
        }
        writeln!(s).unwrap();
        writeln!(s, "Adjacent comparisons (threshold: Bayes factor 4)").unwrap();
        for w in order.windows(2) {
            let lbf = means[w[0]].0 - means[w[1]].0;
            writeln!(
                s,
                "  {} vs {}: log B = {:.3}, {}",
                ev.labels[w[0]],
                ev.labels[w[1]],
                lbf,
                jeffreys_label(lbf)
            )
            .unwrap();
        }
        if let Some(worst) = lbf_consistency(dir, &ev)? {
            let status = if worst <= 1e-9 { "ok" } else { "MISMATCH" };
            writeln!(s).unwrap();
            writeln!(s, "Trajectory check (stored LBF vs evidence differences): {status}, max deviation {worst:.2e}").unwrap();
        }
    }
    Ok(s)
}
