//! Run artifacts: evidence, Bayes-factor trajectories, triggers, posterior
//! draws, checkpoints and run metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use seqfa_core::model::likelihood::fix_loading_signs_one;
use seqfa_core::model::{Dataset, FactorModel};
use seqfa_core::modelselect::ModelRun;
use seqfa_core::smc::{BlockEstimate, Checkpoint, ParticleSet};
use seqfa_core::Result;

use crate::config::RunConfig;
use crate::ingest::csv_err;

pub const EVIDENCE_FILE: &str = "evidence.csv";
pub const LBF_FILE: &str = "lbf_trajectories.csv";
pub const TRIGGERS_FILE: &str = "triggers.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const META_FILE: &str = "run_meta.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(out: &Path, label: &str, replicate: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR)
        .join(format!("{}_rep{}.json", file_safe(label), replicate + 1))
}

pub fn draws_path(out: &Path, label: &str) -> PathBuf {
    out.join(format!("posterior_draws_{}.csv", file_safe(label)))
}

fn file_safe(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Write via a temporary file so a crash never leaves a torn checkpoint.
pub fn write_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, cp.to_json()?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Option<Checkpoint>> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(Checkpoint::from_json(&fs::read_to_string(path)?)?))
}

/// First observation index reported in the per-index files.
pub fn first_index(cfg: &RunConfig) -> usize {
    cfg.engine.n_init + 1
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(csv_err)
}

/// `replicate,index,<model>...` with cumulative log evidence.
pub fn write_evidence(out: &Path, runs: &[Vec<ModelRun>], start: usize, n: usize) -> Result<()> {
    let mut w = writer(&out.join(EVIDENCE_FILE))?;
    let mut header = vec!["replicate".to_string(), "index".to_string()];
    header.extend(runs[0].iter().map(|r| r.label.clone()));
    w.write_record(&header).map_err(csv_err)?;
    for (rep, models) in runs.iter().enumerate() {
        for i in start..=n {
            let mut row = vec![(rep + 1).to_string(), i.to_string()];
            for m in models {
                row.push(m.ledger.cumulative_at(i).map_or(String::new(), |v| v.to_string()));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `replicate,index,<A/B>...` for every pair in menu order.
pub fn write_lbf(out: &Path, runs: &[Vec<ModelRun>], start: usize, n: usize) -> Result<()> {
    let mut w = writer(&out.join(LBF_FILE))?;
    let labels: Vec<&str> = runs[0].iter().map(|r| r.label.as_str()).collect();
    let pairs: Vec<(usize, usize)> = (0..labels.len())
        .flat_map(|a| (a + 1..labels.len()).map(move |b| (a, b)))
        .collect();
    let mut header = vec!["replicate".to_string(), "index".to_string()];
    header.extend(pairs.iter().map(|&(a, b)| format!("{}/{}", labels[a], labels[b])));
    w.write_record(&header).map_err(csv_err)?;
    for (rep, models) in runs.iter().enumerate() {
        for i in start..=n {
            let mut row = vec![(rep + 1).to_string(), i.to_string()];
            for &(a, b) in &pairs {
                let v = match (models[a].ledger.cumulative_at(i), models[b].ledger.cumulative_at(i)) {
                    (Some(x), Some(y)) => (x - y).to_string(),
                    _ => String::new(),
                };
                row.push(v);
            }
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_triggers(out: &Path, runs: &[Vec<ModelRun>]) -> Result<()> {
    let mut w = writer(&out.join(TRIGGERS_FILE))?;
    w.write_record([
        "replicate",
        "model",
        "index",
        "ess_before",
        "pilot_accept",
        "pilot_divergent",
        "short_accept",
        "step_size",
    ])
    .map_err(csv_err)?;
    for (rep, models) in runs.iter().enumerate() {
        for m in models {
            for t in &m.triggers {
                w.write_record([
                    (rep + 1).to_string(),
                    m.label.clone(),
                    t.index.to_string(),
                    t.ess_before.to_string(),
                    t.pilot_accept.to_string(),
                    t.pilot_divergent.to_string(),
                    t.short_accept.to_string(),
                    t.step_size.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Constrained, sign-fixed parameter values of every particle.
#[derive(Clone, Debug)]
pub struct DrawSnapshot {
    pub replicate: usize,
    pub index: usize,
    pub names: Vec<String>,
    pub rows: Vec<(f64, Vec<f64>)>,
}

pub fn snapshot(model: &FactorModel, ps: &ParticleSet, replicate: usize) -> DrawSnapshot {
    let mut names = Vec::new();
    let rows = (0..ps.len())
        .map(|m| {
            let th = fix_loading_signs_one(&model.to_theta(ps.theta_part(m)), model.spec());
            let named = th.named_values(model.spec());
            if names.is_empty() {
                names = named.iter().map(|(n, _)| n.clone()).collect();
            }
            (ps.logw[m], named.into_iter().map(|(_, v)| v).collect())
        })
        .collect();
    DrawSnapshot {
        replicate,
        index: ps.i_processed,
        names,
        rows,
    }
}

/// `replicate,index,particle,log_weight,<parameters>...`
pub fn write_draws(path: &Path, snaps: &[DrawSnapshot]) -> Result<()> {
    let Some(first) = snaps.first() else { return Ok(()) };
    let mut w = writer(path)?;
    let mut header: Vec<String> = ["replicate", "index", "particle", "log_weight"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(first.names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for s in snaps {
        for (m, (lw, vals)) in s.rows.iter().enumerate() {
            let mut row = vec![
                (s.replicate + 1).to_string(),
                s.index.to_string(),
                (m + 1).to_string(),
                lw.to_string(),
            ];
            row.extend(vals.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
pub struct DataMeta<'a> {
    pub n: usize,
    pub p: usize,
    pub kind: String,
    pub items: &'a [String],
}

#[derive(Serialize)]
pub struct ModelMeta {
    pub label: String,
    pub replicate: usize,
    pub block_estimate: Option<BlockEstimate>,
    pub proposal_fallbacks: usize,
    pub triggers: usize,
}

#[derive(Serialize)]
pub struct RunMeta<'a> {
    pub program: &'static str,
    pub version: &'static str,
    pub seed: u64,
    /// Whether evidence values include the initial block.
    pub absolute_evidence: bool,
    pub first_index: usize,
    pub data: DataMeta<'a>,
    pub models: Vec<ModelMeta>,
    pub config: &'a RunConfig,
}

pub fn write_meta(out: &Path, cfg: &RunConfig, data: &Dataset, runs: &[Vec<ModelRun>]) -> Result<()> {
    let meta = RunMeta {
        program: "seqfa",
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        absolute_evidence: runs[0].iter().all(|r| r.ledger.is_absolute()),
        first_index: first_index(cfg),
        data: DataMeta {
            n: data.n(),
            p: data.p(),
            kind: format!("{:?}", data.kind()).to_lowercase(),
            items: data.item_names(),
        },
        models: runs
            .iter()
            .enumerate()
            .flat_map(|(rep, models)| {
                models.iter().map(move |m| ModelMeta {
                    label: m.label.clone(),
                    replicate: rep + 1,
                    block_estimate: m.block.clone(),
                    proposal_fallbacks: m.fallbacks,
                    triggers: m.triggers.len(),
                })
            })
            .collect(),
        config: cfg,
    };
    fs::write(out.join(META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}
