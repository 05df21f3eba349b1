//! Running a menu of models over one data stream and comparing their
//! evidence.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::ProposalKind;
use crate::distributions::derive_stream_id;
use crate::error::{Error, Result};
use crate::hmc::JitterSettings;
use crate::model::{DataKind, Dataset, FactorModel, Link, ModelSpec};
use crate::smc::{
    BlockEstimate, Checkpoint, EvidenceLedger, FactorSequential, InitSettings, ParticleSet, Smc, SmcSettings, StepReport,
    TriggerRecord,
};

/// Named preset models.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Exact-zero confirmatory model with `k` factors.
    Ez(usize),
    /// Approximate-zero model with `k` factors.
    Az(usize),
    /// Exploratory model with `k` factors.
    Efa(usize),
    /// Saturated covariance.
    Sat,
}

impl Preset {
    /// Parses `EZ`, `AZ`, `EFA<k>` and `SAT`; `EZ`/`AZ` take `k` from
    /// `confirmatory_k`.
    pub fn parse(label: &str, confirmatory_k: usize) -> Result<Self> {
        let up = label.trim().to_ascii_uppercase();
        match up.as_str() {
            "EZ" => Ok(Preset::Ez(confirmatory_k)),
            "AZ" => Ok(Preset::Az(confirmatory_k)),
            "SAT" => Ok(Preset::Sat),
            s if s.starts_with("EFA") => s[3..]
                .parse::<usize>()
                .ok()
                .filter(|k| *k > 0)
                .map(Preset::Efa)
                .ok_or_else(|| Error::Config(format!("bad exploratory preset {label:?}"))),
            _ => Err(Error::Config(format!("unknown model preset {label:?}"))),
        }
    }

    pub fn build(&self, p: usize, link: Link) -> Result<ModelSpec> {
        match *self {
            Preset::Ez(k) => ModelSpec::exact_zero(p, k, link),
            Preset::Az(k) => ModelSpec::approx_zero(p, k, link),
            Preset::Efa(k) => ModelSpec::exploratory(p, k, link),
            Preset::Sat => {
                if link != Link::Identity {
                    return Err(Error::UnsupportedLink("the saturated model is for continuous items".into()));
                }
                ModelSpec::saturated(p)
            }
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::Ez(_) => write!(f, "EZ"),
            Preset::Az(_) => write!(f, "AZ"),
            Preset::Efa(k) => write!(f, "EFA{k}"),
            Preset::Sat => write!(f, "SAT"),
        }
    }
}

/// Labelled model specs compared on the same data.
#[derive(Clone, Debug, Default)]
pub struct ModelMenu {
    entries: Vec<(String, ModelSpec)>,
}

impl ModelMenu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, label: impl Into<String>, spec: ModelSpec) -> Result<()> {
        let label = label.into();
        if self.entries.iter().any(|(l, _)| *l == label) {
            return Err(Error::Config(format!("duplicate model label {label:?}")));
        }
        if let Some((_, first)) = self.entries.first() {
            if first.p != spec.p || first.link.is_binary() != spec.link.is_binary() {
                return Err(Error::Contract(format!(
                    "model {label:?} does not share the item count and data kind of the menu"
                )));
            }
        }
        self.entries.push((label, spec));
        Ok(())
    }

    /// Menu of presets labelled by their canonical names.
    pub fn from_presets(presets: &[Preset], p: usize, link: Link) -> Result<Self> {
        let mut menu = Self::new();
        for pr in presets {
            menu.push(pr.to_string(), pr.build(p, link)?)?;
        }
        Ok(menu)
    }

    /// EZ, AZ (with `k` factors), EFA1, EFA2 and EFA3.
    pub fn continuous_default(p: usize, k: usize) -> Result<Self> {
        Self::from_presets(
            &[Preset::Ez(k), Preset::Az(k), Preset::Efa(1), Preset::Efa(2), Preset::Efa(3)],
            p,
            Link::Identity,
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.entries.iter().map(|(l, _)| l.as_str()).collect()
    }

    pub fn entries(&self) -> &[(String, ModelSpec)] {
        &self.entries
    }
}

/// Observations in the batch-initialised block.
pub const DEFAULT_N_INIT: usize = 30;

/// Settings shared by every engine in a menu run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub n_particles: usize,
    /// `γ / N`.
    pub ess_fraction: f64,
    pub jitter: JitterSettings,
    pub proposal: ProposalKind,
    pub init: InitSettings,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n_particles: 1000,
            ess_fraction: 0.5,
            jitter: JitterSettings::default(),
            proposal: ProposalKind::Laplace,
            init: InitSettings::batch(DEFAULT_N_INIT),
        }
    }
}

impl EngineConfig {
    pub fn smc_settings(&self, seed: u64, run_tag: u64) -> SmcSettings {
        SmcSettings {
            n_particles: self.n_particles,
            ess_threshold: Some(self.ess_fraction * self.n_particles as f64),
            jitter: self.jitter.clone(),
            seed,
            run_tag,
        }
    }
}

/// Output of one engine in a menu run.
#[derive(Clone, Debug)]
pub struct ModelRun {
    pub label: String,
    pub spec: ModelSpec,
    pub ledger: EvidenceLedger,
    pub particles: ParticleSet,
    pub triggers: Vec<TriggerRecord>,
    pub fallbacks: usize,
    pub block: Option<BlockEstimate>,
}

/// Engine run tag for model `index` of replicate `replicate`.
pub fn run_tag(replicate: u64, index: u64) -> u64 {
    derive_stream_id(&[0x6d65_6e75, replicate, index])
}

/// Optional callbacks for [`run_menu`]. Model positions index the menu.
#[derive(Clone, Copy, Default)]
pub struct MenuHooks<'h> {
    /// Called after each assimilated observation of each model.
    pub on_step: Option<&'h (dyn Fn(usize, &Smc<'_, FactorSequential>, &StepReport) + Sync)>,
    /// A checkpoint to continue model `idx` from instead of starting afresh.
    pub resume_from: Option<&'h (dyn Fn(usize) -> Result<Option<Checkpoint>> + Sync)>,
}

/// Run every model of `menu` over the same observations. Models run in
/// parallel; each has its own streams derived from `seed`, `replicate` and
/// its menu position.
pub fn run_menu(
    menu: &ModelMenu,
    data: Arc<Dataset>,
    config: &EngineConfig,
    seed: u64,
    replicate: u64,
    hooks: MenuHooks<'_>,
) -> Result<Vec<ModelRun>> {
    if menu.is_empty() {
        return Err(Error::Config("empty model menu".into()));
    }
    let binary = data.kind() == DataKind::Binary;
    for (label, spec) in menu.entries() {
        if spec.link.is_binary() != binary {
            return Err(Error::Contract(format!("model {label:?} does not match the data kind")));
        }
    }
    menu.entries()
        .par_iter()
        .enumerate()
        .map(|(idx, (label, spec))| {
            let model = FactorModel::new(spec.clone(), data.clone())?;
            let seq = FactorSequential::new(model, config.proposal);
            let resumed = match hooks.resume_from {
                Some(f) => f(idx)?,
                None => None,
            };
            let mut smc = match resumed {
                Some(cp) => Smc::resume(&seq, cp)?,
                None => {
                    let settings = config.smc_settings(seed, run_tag(replicate, idx as u64));
                    Smc::initialize_with_batch(&seq, settings, &config.init)?
                }
            };
            while smc.particles().i_processed < data.n() {
                let r = smc.step()?;
                if let Some(h) = hooks.on_step {
                    h(idx, &smc, &r);
                }
            }
            log::info!(
                "{label}: log evidence {:.3}, {} resample rounds",
                smc.ledger().total(),
                smc.triggers().len()
            );
            Ok(ModelRun {
                label: label.clone(),
                spec: spec.clone(),
                ledger: smc.ledger().clone(),
                particles: smc.particles().clone(),
                triggers: smc.triggers().to_vec(),
                fallbacks: smc.fallbacks(),
                block: smc.block_estimate().cloned(),
            })
        })
        .collect()
}

/// `R` independent replicates of a menu run on the same data.
pub fn run_replicates(
    menu: &ModelMenu,
    data: Arc<Dataset>,
    config: &EngineConfig,
    seed: u64,
    replicates: usize,
) -> Result<Vec<Vec<ModelRun>>> {
    (0..replicates as u64)
        .map(|r| run_menu(menu, data.clone(), config, seed, r, MenuHooks::default()))
        .collect()
}

/// Log evidence of several models at one observation index, with their
/// pairwise log Bayes factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub labels: Vec<String>,
    pub index: usize,
    pub log_evidence: Vec<f64>,
    /// `lbf[a][b] = log E(a) − log E(b)`.
    pub lbf: Vec<Vec<f64>>,
}

impl ComparisonTable {
    /// Table at observation `index` (1-based), or at the last index shared
    /// by every ledger when `None`.
    pub fn from_ledgers(labels: &[String], ledgers: &[&EvidenceLedger], index: Option<usize>) -> Result<Self> {
        if labels.len() != ledgers.len() {
            return Err(Error::DimensionMismatch {
                what: "labels vs ledgers",
                expected: ledgers.len(),
                found: labels.len(),
            });
        }
        let index = index.unwrap_or_else(|| ledgers.iter().map(|l| l.len()).min().unwrap_or(0));
        let log_evidence = ledgers
            .iter()
            .zip(labels)
            .map(|(l, name)| {
                l.cumulative_at(index)
                    .ok_or_else(|| Error::Contract(format!("model {name:?} has no evidence at observation {index}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let lbf = log_evidence
            .iter()
            .map(|a| log_evidence.iter().map(|b| a - b).collect())
            .collect();
        Ok(Self {
            labels: labels.to_vec(),
            index,
            log_evidence,
            lbf,
        })
    }

    pub fn from_runs(runs: &[ModelRun]) -> Result<Self> {
        let labels: Vec<String> = runs.iter().map(|r| r.label.clone()).collect();
        let ledgers: Vec<&EvidenceLedger> = runs.iter().map(|r| &r.ledger).collect();
        Self::from_ledgers(&labels, &ledgers, None)
    }

    /// Model indices sorted by decreasing evidence (ties keep menu order).
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.labels.len()).collect();
        order.sort_by(|&a, &b| self.log_evidence[b].total_cmp(&self.log_evidence[a]).then(a.cmp(&b)));
        order
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn lbf_between(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.lbf[self.position(a)?][self.position(b)?])
    }
}

/// `(i, log E_A(y_{1:i}) − log E_B(y_{1:i}))` for every index both ledgers
/// cover.
pub fn lbf_trajectory(a: &EvidenceLedger, b: &EvidenceLedger) -> Vec<(usize, f64)> {
    let start = a.offset.max(b.offset) + 1;
    let end = a.len().min(b.len());
    (start..=end)
        .filter_map(|i| Some((i, a.cumulative_at(i)? - b.cumulative_at(i)?)))
        .collect()
}

/// Qualitative strength of a Bayes factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Jeffreys {
    /// `BF < 4`
    Inconclusive,
    /// `BF ≥ 4`
    Substantial,
}

/// Bayes factors of at least this size count as substantial evidence.
pub const SUBSTANTIAL_BF: f64 = 4.0;

pub fn jeffreys_label(lbf: f64) -> Jeffreys {
    if lbf >= SUBSTANTIAL_BF.ln() {
        Jeffreys::Substantial
    } else {
        Jeffreys::Inconclusive
    }
}

impl fmt::Display for Jeffreys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Jeffreys::Inconclusive => write!(f, "inconclusive"),
            Jeffreys::Substantial => write!(f, "substantial"),
        }
    }
}

/// Cumulative log predictive score `Σ_{t≤i} log p(y_t | y_{1:t−1})`.
pub fn prequential_log_score(ledger: &EvidenceLedger) -> Vec<(usize, f64)> {
    ledger.rows().map(|(i, _, cum)| (i, cum)).collect()
}

/// Mean and standard deviation (`R − 1` denominator) of replicate values.
pub fn replicate_spread(values: &[f64]) -> (f64, f64) {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    (mean, var.sqrt())
}
