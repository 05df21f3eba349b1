//! Run configuration: a TOML file describing data, models and engine
//! settings. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use seqfa_core::approx::ProposalKind;
use seqfa_core::hmc::JitterSettings;
use seqfa_core::model::{FactorCovMode, Link, LoadingCell, ModelFamily, ModelSpec, ResidualMode, Scenario};
use seqfa_core::modelselect::{EngineConfig, ModelMenu, Preset, DEFAULT_N_INIT};
use seqfa_core::smc::{InitEvidence, InitSettings};
use seqfa_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for every engine.
    pub seed: u64,
    /// Relative paths resolve against the config file's directory.
    pub output_dir: PathBuf,
    #[serde(default = "one")]
    pub replicates: usize,
    pub data: DataConfig,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindOverride {
    Binary,
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file with a header row; relative paths resolve against the
    /// config file's directory.
    pub path: Option<PathBuf>,
    /// `continuous1`, `continuous2` or `binary1`.
    pub scenario: Option<String>,
    /// Rows to simulate (scenario only).
    pub n: Option<usize>,
    /// Simulation seed (scenario only); defaults to the master seed.
    pub seed: Option<u64>,
    pub kind: Option<KindOverride>,
    #[serde(default)]
    pub standardize: bool,
}

/// A preset (`EZ`, `AZ`, `EFA<k>`, `SAT`) or an inline loading grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub label: Option<String>,
    pub preset: Option<String>,
    /// Factors for `EZ`/`AZ` presets and inline grids.
    pub k: Option<usize>,
    /// Inline grid, one string per item with `k` whitespace-separated cells:
    /// `x` free, `~0` near-zero prior, or a number fixed at that value.
    pub pattern: Option<Vec<String>>,
    /// `identity`, `covariance` (inverse-Wishart) or `correlation` (LKJ).
    pub factor_cov: Option<String>,
    /// `probit` selects the probit link for binary data; otherwise logit.
    pub link: Option<String>,
    pub loading_prior_sd: Option<f64>,
    pub approx_zero_sd: Option<f64>,
    pub intercept_prior_sd: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalName {
    Prior,
    Laplace,
    Vb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitName {
    Importance,
    Relative,
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub particles: usize,
    pub ess_fraction: f64,
    pub proposal: ProposalName,
    pub vb_iters: usize,
    pub vb_samples: usize,
    pub n_init: usize,
    pub init_evidence: InitName,
    pub batch_adapt_steps: usize,
    pub batch_thin: usize,
    pub is_samples: usize,
    pub pilot_steps: usize,
    pub short_steps: usize,
    pub n_leapfrog: usize,
    pub target_accept: f64,
}

impl Default for EngineSection {
    fn default() -> Self {
        let e = EngineConfig::default();
        let j = JitterSettings::default();
        let i = InitSettings::batch(DEFAULT_N_INIT);
        Self {
            particles: e.n_particles,
            ess_fraction: e.ess_fraction,
            proposal: ProposalName::Laplace,
            vb_iters: 200,
            vb_samples: 4,
            n_init: i.n_init,
            init_evidence: InitName::Importance,
            batch_adapt_steps: i.adapt_steps,
            batch_thin: i.thin,
            is_samples: i.is_samples,
            pilot_steps: j.pilot_steps,
            short_steps: j.short_steps,
            n_leapfrog: j.n_leapfrog,
            target_accept: j.target_accept,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Write JSON checkpoints after every resample round and at the end.
    pub checkpoints: bool,
    /// Also emit posterior draws at every resample round (not only at the
    /// final observation).
    pub draws_at_checkpoints: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            checkpoints: true,
            draws_at_checkpoints: false,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                cfg.data.path = Some(base.join(p));
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match (&d.path, &d.scenario) {
            (Some(_), Some(_)) => return Err(Error::Config("give either data.path or data.scenario, not both".into())),
            (None, None) => return Err(Error::Config("data.path or data.scenario is required".into())),
            (Some(_), None) if d.n.is_some() || d.seed.is_some() => {
                return Err(Error::Config("data.n and data.seed apply to scenarios only".into()))
            }
            (None, Some(s)) => {
                parse_scenario(s)?;
                if d.n == Some(0) {
                    return Err(Error::Config("data.n must be positive".into()));
                }
            }
            _ => {}
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("at least one [[models]] entry is required".into()));
        }
        let e = &self.engine;
        if e.particles == 0 {
            return Err(Error::Config("engine.particles must be positive".into()));
        }
        if !(e.ess_fraction >= 0.0 && e.ess_fraction <= 1.0) {
            return Err(Error::Config("engine.ess_fraction must lie in [0, 1]".into()));
        }
        if !(e.target_accept > 0.0 && e.target_accept < 1.0) {
            return Err(Error::Config("engine.target_accept must lie in (0, 1)".into()));
        }
        if e.n_leapfrog == 0 || e.pilot_steps == 0 {
            return Err(Error::Config("engine.n_leapfrog and engine.pilot_steps must be positive".into()));
        }
        if e.proposal == ProposalName::Vb && (e.vb_iters == 0 || e.vb_samples == 0) {
            return Err(Error::Config("engine.vb_iters and engine.vb_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        let e = &self.engine;
        EngineConfig {
            n_particles: e.particles,
            ess_fraction: e.ess_fraction,
            jitter: JitterSettings {
                pilot_steps: e.pilot_steps,
                short_steps: e.short_steps,
                n_leapfrog: e.n_leapfrog,
                target_accept: e.target_accept,
                ..JitterSettings::default()
            },
            proposal: match e.proposal {
                ProposalName::Prior => ProposalKind::Prior,
                ProposalName::Laplace => ProposalKind::Laplace,
                ProposalName::Vb => ProposalKind::Vb {
                    n_iters: e.vb_iters,
                    mc_samples: e.vb_samples,
                },
            },
            init: InitSettings {
                n_init: e.n_init,
                mode: match e.init_evidence {
                    InitName::Importance => InitEvidence::Importance,
                    InitName::Relative => InitEvidence::RelativeOnly,
                    InitName::Sequential => InitEvidence::Sequential,
                },
                adapt_steps: e.batch_adapt_steps,
                thin: e.batch_thin,
                is_samples: e.is_samples,
            },
        }
    }

    /// Builds the menu for data with `p` items of the given kind.
    pub fn menu(&self, p: usize, binary: bool) -> Result<ModelMenu> {
        let mut menu = ModelMenu::new();
        for entry in &self.models {
            let (label, spec) = entry.build(p, binary)?;
            menu.push(label, spec)?;
        }
        Ok(menu)
    }
}

pub fn parse_scenario(name: &str) -> Result<Scenario> {
    match name.to_ascii_lowercase().as_str() {
        "continuous1" => Ok(Scenario::Continuous1),
        "continuous2" => Ok(Scenario::Continuous2),
        "binary1" => Ok(Scenario::Binary1),
        other => Err(Error::Config(format!(
            "unknown scenario {other:?} (expected continuous1, continuous2 or binary1)"
        ))),
    }
}

fn parse_cell(tok: &str) -> Result<LoadingCell> {
    match tok {
        "x" | "X" => Ok(LoadingCell::Free),
        "~0" | "~" => Ok(LoadingCell::ApproxZero),
        t => t
            .parse::<f64>()
            .map(LoadingCell::Fixed)
            .map_err(|_| Error::Config(format!("bad loading cell {t:?} (use x, ~0 or a number)"))),
    }
}

impl ModelEntry {
    fn link(&self, binary: bool) -> Result<Link> {
        match (binary, self.link.as_deref()) {
            (false, None | Some("identity")) => Ok(Link::Identity),
            (true, None | Some("logit")) => Ok(Link::Logit),
            (true, Some("probit")) => Ok(Link::Probit),
            (_, Some(other)) => Err(Error::Config(format!(
                "link {other:?} does not fit {} data",
                if binary { "binary" } else { "continuous" }
            ))),
        }
    }

    pub fn build(&self, p: usize, binary: bool) -> Result<(String, ModelSpec)> {
        let link = self.link(binary)?;
        let (label, mut spec) = match (&self.preset, &self.pattern) {
            (Some(_), Some(_)) => return Err(Error::Config("a model has both preset and pattern".into())),
            (None, None) => return Err(Error::Config("a model needs a preset or a pattern".into())),
            (Some(name), None) => {
                if self.factor_cov.is_some() {
                    return Err(Error::Config("factor_cov applies to inline patterns only".into()));
                }
                let preset = Preset::parse(name, self.k.unwrap_or(0))?;
                if matches!(preset, Preset::Ez(0) | Preset::Az(0)) {
                    return Err(Error::Config(format!("preset {name} needs k")));
                }
                (self.label.clone().unwrap_or_else(|| preset.to_string()), preset.build(p, link)?)
            }
            (None, Some(rows)) => {
                let label = self
                    .label
                    .clone()
                    .ok_or_else(|| Error::Config("inline models need a label".into()))?;
                (label, self.inline_spec(rows, p, link)?)
            }
        };
        if let Some(v) = self.loading_prior_sd {
            spec.loading_prior_sd = v;
        }
        if let Some(v) = self.approx_zero_sd {
            spec.approx_zero_sd = v;
        }
        if let Some(v) = self.intercept_prior_sd {
            spec.intercept_prior_sd = v;
        }
        spec.validate()?;
        Ok((label, spec))
    }

    fn inline_spec(&self, rows: &[String], p: usize, link: Link) -> Result<ModelSpec> {
        if rows.len() != p {
            return Err(Error::Config(format!("pattern has {} rows for {p} items", rows.len())));
        }
        let cells: Vec<Vec<LoadingCell>> = rows
            .iter()
            .map(|r| r.split_whitespace().map(parse_cell).collect())
            .collect::<Result<_>>()?;
        let k = cells[0].len();
        if k == 0 || cells.iter().any(|r| r.len() != k) || self.k.is_some_and(|kk| kk != k) {
            return Err(Error::Config("pattern rows must all have k cells".into()));
        }
        let cov = self.factor_cov.as_deref().unwrap_or("covariance");
        let factor_cov_mode = match cov {
            "identity" => FactorCovMode::Identity,
            "covariance" => FactorCovMode::InverseWishart {
                scale: DMatrix::identity(k, k),
                df: k as f64 + 4.0,
            },
            "correlation" => FactorCovMode::LkjCorrelation { eta: 2.0 },
            other => return Err(Error::Config(format!("unknown factor_cov {other:?}"))),
        };
        let has_approx = cells.iter().flatten().any(|c| *c == LoadingCell::ApproxZero);
        let family = match (&factor_cov_mode, has_approx) {
            (FactorCovMode::Identity, _) => ModelFamily::Exploratory,
            (_, true) => ModelFamily::ApproximateZero,
            (_, false) => ModelFamily::Confirmatory,
        };
        // start from a preset of the same family for the default priors
        let mut spec = match family {
            ModelFamily::Exploratory => ModelSpec::exploratory(p, k.min(p), link)?,
            _ => ModelSpec::exact_zero(p, k.min(p), link)?,
        };
        spec.family = family;
        spec.loading_pattern = cells.into_iter().flatten().collect();
        spec.factor_cov_mode = factor_cov_mode;
        if link.is_binary() {
            spec.residual_mode = ResidualMode::FixedIdentity;
        }
        Ok(spec)
    }
}
