//! Sequential engines: IBIS over `θ` for continuous data and IBIS-LVM over
//! `(θ, z_{1:i})` for binary data.

use nalgebra::{DMatrix, DVector};
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{build_proposal, prior_proposal, ProposalKind};
use crate::distributions::{
    derive_stream_id, ln_gamma, log_mean_exp, log_sum_exp, multinomial_resample, normalized_weights, sample_mvn, weighted_log_mean_exp,
    CholeskyFactor, RngStream,
};
use crate::error::{Error, Result};
use crate::hmc::{adapt, pilot_then_short_chains, sample_chain, GradientTarget, HmcConfig, JitterSettings};
use crate::model::likelihood::{fix_loading_signs_one, latent_conditional_posterior, success_prob};
use crate::model::{FactorCovMode, FactorModel, LatentBlock, Link, LoadingCell};

const SLOT_TAG: u64 = 0x736c_6f74;
const MASTER_TAG: u64 = 0x6d61_7374;
pub const CHECKPOINT_VERSION: u32 = 1;

/// `(Σw)² / Σw²` from log-weights.
pub fn ess(logw: &[f64]) -> f64 {
    if logw.is_empty() {
        return 0.0;
    }
    if logw.iter().all(|w| *w == logw[0]) && logw[0].is_finite() {
        return logw.len() as f64;
    }
    let doubled: Vec<f64> = logw.iter().map(|w| 2.0 * w).collect();
    (2.0 * log_sum_exp(logw) - log_sum_exp(&doubled)).exp()
}

/// Running log evidence. The first `offset` observations form a block
/// whose joint log evidence is `base` (0 when only relative evidence is
/// kept); increments follow one per observation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceLedger {
    pub offset: usize,
    #[serde(default)]
    pub base: f64,
    /// Whether `base` is an estimate of the block evidence.
    #[serde(default)]
    pub base_estimated: bool,
    pub increments: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl EvidenceLedger {
    /// Ledger after an initial block with no evidence estimate.
    pub fn with_offset(offset: usize) -> Self {
        Self {
            offset,
            ..Self::default()
        }
    }

    /// Ledger after an initial block with estimated log evidence `base`.
    pub fn with_block(offset: usize, base: f64) -> Self {
        Self {
            offset,
            base,
            base_estimated: true,
            ..Self::default()
        }
    }

    pub fn push(&mut self, log_increment: f64) {
        let prev = self.total();
        self.increments.push(log_increment);
        self.cumulative.push(prev + log_increment);
    }

    /// Log evidence of everything recorded so far.
    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(self.base)
    }

    /// Number of observations accounted for, including the offset.
    pub fn len(&self) -> usize {
        self.offset + self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when the cumulative values are absolute log evidence.
    pub fn is_absolute(&self) -> bool {
        self.offset == 0 || self.base_estimated
    }

    /// `(observation index (1-based), increment, cumulative)` rows.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.increments
            .iter()
            .zip(&self.cumulative)
            .enumerate()
            .map(move |(t, (inc, cum))| (self.offset + t + 1, *inc, *cum))
    }

    /// Cumulative log evidence after observation `i` (1-based), if recorded.
    pub fn cumulative_at(&self, i: usize) -> Option<f64> {
        if i < self.offset || i == 0 {
            return None;
        }
        if i == self.offset {
            return Some(self.base);
        }
        self.cumulative.get(i - self.offset - 1).copied()
    }
}

/// ESS threshold and the observations at which resampling fired.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyPolicy {
    /// Absolute count `γ`; resample when `ESS < γ`.
    pub ess_threshold: f64,
    pub trigger_log: Vec<usize>,
}

impl DegeneracyPolicy {
    pub fn new(ess_threshold: f64) -> Self {
        Self {
            ess_threshold,
            trigger_log: Vec::new(),
        }
    }

    /// `γ = N / 2`.
    pub fn half(n_particles: usize) -> Self {
        Self::new(n_particles as f64 / 2.0)
    }

    pub fn never() -> Self {
        Self::new(0.0)
    }

    pub fn validate(&self, n_particles: usize) -> Result<()> {
        let g = self.ess_threshold;
        if g == 0.0 || (g > 1.0 && g <= n_particles as f64) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "ESS threshold {g} must lie in (1, {n_particles}] (or be 0 to disable resampling)"
            )))
        }
    }
}

/// Diagnostics for one resample-jitter round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerRecord {
    /// Observation (1-based) after which the round ran.
    pub index: usize,
    pub ess_before: f64,
    pub pilot_accept: f64,
    pub pilot_divergent: usize,
    pub short_accept: f64,
    pub step_size: f64,
}

mod logw_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum W {
        Finite(f64),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let out: Vec<W> = v
            .iter()
            .map(|x| {
                if x.is_finite() {
                    W::Finite(*x)
                } else if x.is_nan() {
                    W::Tag("nan".into())
                } else if *x > 0.0 {
                    W::Tag("inf".into())
                } else {
                    W::Tag("-inf".into())
                }
            })
            .collect();
        out.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<W>::deserialize(d)?;
        raw.into_iter()
            .map(|w| match w {
                W::Finite(x) => Ok(x),
                W::Tag(t) => match t.as_str() {
                    "nan" => Ok(f64::NAN),
                    "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    other => Err(serde::de::Error::custom(format!("bad weight tag {other}"))),
                },
            })
            .collect()
    }
}

/// Weighted particles on the unconstrained scale. For latent models each
/// vector holds `θ` followed by the rows `z_1..z_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet {
    pub particles: Vec<Vec<f64>>,
    #[serde(with = "logw_serde")]
    pub logw: Vec<f64>,
    /// One stream per slot; slots keep their stream through resampling.
    pub streams: Vec<RngStream>,
    pub i_processed: usize,
    pub theta_dim: usize,
    pub latent_k: usize,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn theta_part(&self, m: usize) -> &[f64] {
        &self.particles[m][..self.theta_dim]
    }

    pub fn latent_block(&self, m: usize) -> LatentBlock {
        LatentBlock::from_flat(self.latent_k, self.particles[m][self.theta_dim..].to_vec())
    }

    pub fn ess(&self) -> f64 {
        ess(&self.logw)
    }

    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        normalized_weights(&self.logw)
    }

    /// Checks the bookkeeping invariants.
    pub fn check(&self) -> Result<()> {
        let n = self.len();
        if self.logw.len() != n || self.streams.len() != n {
            return Err(Error::Contract("particle, weight and stream counts differ".into()));
        }
        if !self.logw.iter().any(|w| w.is_finite()) {
            return Err(Error::DegeneratePopulation { index: self.i_processed });
        }
        let expected = self.theta_dim + self.i_processed * self.latent_k;
        if self.particles.iter().any(|x| x.len() != expected) {
            return Err(Error::Contract(format!(
                "particles must have {expected} coordinates after {} observations",
                self.i_processed
            )));
        }
        Ok(())
    }
}

/// Result of adding one observation to a particle.
#[derive(Clone, Copy, Debug)]
pub struct Increment {
    pub log_u: f64,
    /// The requested proposal failed and the prior was used instead.
    pub fell_back: bool,
}

/// A model that can be assimilated one observation at a time.
pub trait SequentialModel: Sync {
    /// Unconstrained parameter dimension.
    fn theta_dim(&self) -> usize;
    /// Latent coordinates appended per observation (0 for marginal models).
    fn latent_dim(&self) -> usize {
        0
    }
    fn n_obs(&self) -> usize;
    fn sample_prior(&self, rng: &mut RngStream) -> Vec<f64>;
    /// Incremental log weight for observation `i` (0-based). Latent models
    /// append the sampled `z_i` to `x`.
    fn increment(&self, x: &mut Vec<f64>, i: usize, rng: &mut RngStream) -> Increment;
    /// Posterior over the first `n_obs` observations, on the particle space.
    /// Must include every normalising constant of prior and likelihood.
    fn target(&self, n_obs: usize) -> Box<dyn GradientTarget + '_>;
    /// Coordinate sets whose joint negation leaves `target(n_obs)`
    /// unchanged. The first coordinate of each set is its sign anchor.
    fn sign_flips(&self, _n_obs: usize) -> Vec<Vec<usize>> {
        Vec::new()
    }
}

/// A factor model with the proposal used for new latent rows.
pub struct FactorSequential {
    pub model: FactorModel,
    pub proposal: ProposalKind,
}

impl FactorSequential {
    pub fn new(model: FactorModel, proposal: ProposalKind) -> Self {
        Self { model, proposal }
    }
}

impl SequentialModel for FactorSequential {
    fn theta_dim(&self) -> usize {
        self.model.dim()
    }

    fn latent_dim(&self) -> usize {
        if self.model.is_latent() {
            self.model.spec().k
        } else {
            0
        }
    }

    fn n_obs(&self) -> usize {
        self.model.n()
    }

    fn sample_prior(&self, rng: &mut RngStream) -> Vec<f64> {
        let spec = self.model.spec();
        let theta = crate::model::prior_sample(spec, self.model.empirical_cov(), rng).expect("prior draw");
        crate::model::to_unconstrained(spec, &theta).expect("prior draw maps to unconstrained space").values
    }

    fn increment(&self, x: &mut Vec<f64>, i: usize, rng: &mut RngStream) -> Increment {
        let d = self.model.dim();
        if !self.model.is_latent() {
            let prepared = self.model.prepare(&x[..d]);
            return Increment {
                log_u: self.model.point_loglik(&prepared, i),
                fell_back: false,
            };
        }
        let spec = self.model.spec();
        let theta = self.model.to_theta(&x[..d]);
        let y: Vec<f64> = self.model.data().row(i).iter().copied().collect();
        let (proposal, kind, fell_back) = match build_proposal(self.proposal, spec, &theta, &y, rng) {
            Ok(q) => (Some(q), self.proposal, false),
            Err(e) => {
                log::debug!("proposal failed at observation {}: {e}; using the prior", i + 1);
                (prior_proposal(spec, &theta).ok(), ProposalKind::Prior, true)
            }
        };
        let Some(q) = proposal else {
            x.extend(std::iter::repeat(0.0).take(spec.k));
            return Increment {
                log_u: f64::NEG_INFINITY,
                fell_back,
            };
        };
        let z = q.sample(rng);
        let mut log_u = self.model.point_loglik_augmented(&theta, &z, i);
        if kind != ProposalKind::Prior {
            log_u += self.model.latent_prior_logpdf(&theta, &z) - q.logpdf(&z);
        }
        x.extend_from_slice(&z);
        Increment { log_u, fell_back }
    }

    fn sign_flips(&self, n_obs: usize) -> Vec<Vec<usize>> {
        let spec = self.model.spec();
        if spec.factor_cov_mode != FactorCovMode::Identity {
            return Vec::new();
        }
        let layout = self.model.layout();
        let d = layout.dim();
        let k = spec.k;
        (0..k)
            .filter(|&f| (0..spec.p).all(|j| !matches!(spec.cell(j, f), LoadingCell::Fixed(v) if v != 0.0)))
            .map(|f| {
                let mut idx: Vec<usize> = layout
                    .loading_cells
                    .iter()
                    .enumerate()
                    .filter(|(_, &(_, c))| c == f)
                    .map(|(q, _)| q)
                    .collect();
                if self.model.is_latent() {
                    idx.extend((0..n_obs).map(|i| d + i * k + f));
                }
                idx
            })
            .filter(|idx| !idx.is_empty())
            .collect()
    }

    fn target(&self, n_obs: usize) -> Box<dyn GradientTarget + '_> {
        if self.model.is_latent() {
            Box::new(self.model.augmented_target(n_obs))
        } else {
            Box::new(self.model.marginal_target(n_obs))
        }
    }
}

/// How the evidence of an initial batch block is accounted for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitEvidence {
    /// Assimilate the block with IBIS itself; no batch chain is run.
    Sequential,
    /// Batch HMC particles; block evidence by importance sampling from a
    /// Student-t fitted to the batch draws.
    Importance,
    /// Batch HMC particles; the block's evidence is not estimated.
    RelativeOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmcSettings {
    pub n_particles: usize,
    /// `γ`; `None` means `N / 2`.
    pub ess_threshold: Option<f64>,
    pub jitter: JitterSettings,
    pub seed: u64,
    /// Distinguishes runs sharing a seed (e.g. models in a menu).
    pub run_tag: u64,
}

impl SmcSettings {
    pub fn new(n_particles: usize, seed: u64) -> Self {
        Self {
            n_particles,
            ess_threshold: None,
            jitter: JitterSettings::default(),
            seed,
            run_tag: 0,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.ess_threshold.unwrap_or(self.n_particles as f64 / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSettings {
    pub n_init: usize,
    pub mode: InitEvidence,
    /// Adaptation steps of the batch chain.
    pub adapt_steps: usize,
    /// Transitions between retained batch draws.
    pub thin: usize,
    /// Importance draws for the block evidence.
    pub is_samples: usize,
}

impl InitSettings {
    /// Batch initialisation on the first `n_init` observations with an
    /// importance estimate of the block evidence.
    pub fn batch(n_init: usize) -> Self {
        Self {
            n_init,
            mode: InitEvidence::Importance,
            ..Self::default()
        }
    }
}

impl Default for InitSettings {
    fn default() -> Self {
        Self {
            n_init: 0,
            mode: InitEvidence::Sequential,
            adapt_steps: 1000,
            thin: 5,
            is_samples: 50_000,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    /// 1-based observation index.
    pub index: usize,
    pub log_increment: f64,
    pub ess: f64,
    pub triggered: bool,
}

/// Everything needed to resume a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub settings: SmcSettings,
    pub particles: ParticleSet,
    pub ledger: EvidenceLedger,
    pub policy: DegeneracyPolicy,
    pub triggers: Vec<TriggerRecord>,
    pub hmc: Option<HmcConfig>,
    pub master: RngStream,
    pub fallbacks: usize,
    #[serde(default)]
    pub block: Option<BlockEstimate>,
}

/// A running IBIS / IBIS-LVM sampler.
pub struct Smc<'a, M: SequentialModel> {
    model: &'a M,
    settings: SmcSettings,
    ps: ParticleSet,
    ledger: EvidenceLedger,
    policy: DegeneracyPolicy,
    triggers: Vec<TriggerRecord>,
    hmc: Option<HmcConfig>,
    master: RngStream,
    fallbacks: usize,
    block: Option<BlockEstimate>,
}

fn slot_streams(settings: &SmcSettings) -> Vec<RngStream> {
    (0..settings.n_particles as u64)
        .map(|m| RngStream::new(settings.seed, derive_stream_id(&[settings.run_tag, SLOT_TAG, m])))
        .collect()
}

impl<'a, M: SequentialModel> Smc<'a, M> {
    /// Equally weighted draws from the prior, nothing processed.
    pub fn from_prior(model: &'a M, settings: SmcSettings) -> Result<Self> {
        if settings.n_particles == 0 {
            return Err(Error::Config("need at least one particle".into()));
        }
        let policy = DegeneracyPolicy::new(settings.gamma());
        policy.validate(settings.n_particles)?;
        let mut streams = slot_streams(&settings);
        let particles: Vec<Vec<f64>> = streams
            .par_iter_mut()
            .map(|rng| model.sample_prior(rng))
            .collect();
        let master = RngStream::new(settings.seed, derive_stream_id(&[settings.run_tag, MASTER_TAG]));
        let n = settings.n_particles;
        Ok(Self {
            model,
            ps: ParticleSet {
                particles,
                logw: vec![0.0; n],
                streams,
                i_processed: 0,
                theta_dim: model.theta_dim(),
                latent_k: model.latent_dim(),
            },
            settings,
            ledger: EvidenceLedger::default(),
            policy,
            triggers: Vec::new(),
            hmc: None,
            master,
            fallbacks: 0,
            block: None,
        })
    }

    /// Start after `init.n_init` observations. `Sequential` assimilates the
    /// block with IBIS; the other modes draw particles from a batch HMC chain
    /// on the block.
    pub fn initialize_with_batch(model: &'a M, settings: SmcSettings, init: &InitSettings) -> Result<Self> {
        let mut smc = Self::from_prior(model, settings)?;
        if init.n_init > model.n_obs() {
            return Err(Error::Config(format!(
                "n_init = {} exceeds the {} observations",
                init.n_init,
                model.n_obs()
            )));
        }
        if init.n_init == 0 {
            return Ok(smc);
        }
        match init.mode {
            InitEvidence::Sequential => {
                for _ in 0..init.n_init {
                    smc.step()?;
                }
                return Ok(smc);
            }
            InitEvidence::Importance => {
                smc.batch_particles(init)?;
                let flips = model.sign_flips(init.n_init);
                let target = model.target(init.n_init);
                let est = importance_evidence(
                    target.as_ref(),
                    &smc.ps.particles,
                    &flips,
                    init.is_samples,
                    &smc.master,
                )?;
                log::debug!(
                    "block evidence {:.3} over {} observations (importance ESS {:.0})",
                    est.log_evidence,
                    init.n_init,
                    est.ess
                );
                smc.ledger = EvidenceLedger::with_block(init.n_init, est.log_evidence);
                smc.block = Some(est);
                return Ok(smc);
            }
            InitEvidence::RelativeOnly => {
                smc.ledger = EvidenceLedger::with_offset(init.n_init);
            }
        }
        smc.batch_particles(init)?;
        Ok(smc)
    }

    /// Replace the particles with thinned draws of a batch chain on the
    /// first `n_init` observations.
    fn batch_particles(&mut self, init: &InitSettings) -> Result<()> {
        let n_init = init.n_init;
        let target = self.model.target(n_init);
        let mut x0 = self.model.sample_prior(&mut self.master);
        // start latent rows from their prior
        let k = self.model.latent_dim();
        x0.extend((0..n_init * k).map(|_| self.master.standard_normal()));
        let mut cfg = HmcConfig::new(target.dim());
        cfg.n_leapfrog = self.settings.jitter.n_leapfrog;
        cfg.target_accept = self.settings.jitter.target_accept;
        let adapted = adapt(target.as_ref(), x0, &cfg, init.adapt_steps, &mut self.master);
        let mut config = adapted.config;
        config.adapt_steps = 0;
        let (draws, stats) = sample_chain(
            target.as_ref(),
            adapted.x,
            &config,
            0,
            self.settings.n_particles,
            init.thin.max(1),
            &mut self.master,
        );
        if stats.total > 0 && stats.n_divergent as f64 / stats.total as f64 > self.settings.jitter.max_divergence_rate {
            return Err(Error::TuningFailure {
                divergence_rate: stats.n_divergent as f64 / stats.total as f64,
                steps: stats.total,
            });
        }
        self.ps.particles = draws;
        self.ps.logw = vec![0.0; self.settings.n_particles];
        self.ps.i_processed = n_init;
        self.hmc = Some(config);
        Ok(())
    }

    /// Incremental log weights for observation `i`, extending latent rows.
    fn increments(&mut self, i: usize) -> Result<Vec<f64>> {
        let model = self.model;
        let results: Vec<Increment> = self
            .ps
            .particles
            .par_iter_mut()
            .zip(self.ps.streams.par_iter_mut())
            .map(|(x, rng)| model.increment(x, i, rng))
            .collect();
        let mut out = Vec::with_capacity(results.len());
        for r in results {
            self.fallbacks += r.fell_back as usize;
            out.push(if r.log_u.is_nan() { f64::NEG_INFINITY } else { r.log_u });
        }
        Ok(out)
    }

    /// Assimilate the next observation.
    pub fn step(&mut self) -> Result<StepReport> {
        let i = self.ps.i_processed;
        if i >= self.model.n_obs() {
            return Err(Error::Contract("all observations have been processed".into()));
        }
        let logu = self.increments(i)?;
        let log_increment = weighted_log_mean_exp(&self.ps.logw, &logu);
        if !log_increment.is_finite() {
            return Err(Error::DegeneratePopulation { index: i + 1 });
        }
        self.ledger.push(log_increment);
        for (w, u) in self.ps.logw.iter_mut().zip(&logu) {
            *w += u;
        }
        self.ps.i_processed = i + 1;
        let ess_now = self.ps.ess();
        let triggered = ess_now < self.policy.ess_threshold;
        if triggered {
            self.resample_and_jitter(ess_now)?;
        }
        Ok(StepReport {
            index: i + 1,
            log_increment,
            ess: ess_now,
            triggered,
        })
    }

    fn resample_and_jitter(&mut self, ess_before: f64) -> Result<()> {
        let n = self.ps.len();
        let idx = multinomial_resample(&self.ps.logw, n, &mut self.master)?;
        let resampled: Vec<Vec<f64>> = idx.iter().map(|&a| self.ps.particles[a].clone()).collect();
        self.ps.particles = resampled;
        let target = self.model.target(self.ps.i_processed);
        let report = pilot_then_short_chains(
            &mut self.ps.particles,
            target.as_ref(),
            &self.settings.jitter,
            self.hmc.as_ref(),
            &mut self.master,
            &mut self.ps.streams,
        )?;
        self.ps.logw = vec![0.0; n];
        let index = self.ps.i_processed;
        self.policy.trigger_log.push(index);
        self.triggers.push(TriggerRecord {
            index,
            ess_before,
            pilot_accept: report.pilot.accept_rate,
            pilot_divergent: report.pilot.n_divergent,
            short_accept: report.short.accept_rate,
            step_size: report.config.step_size,
        });
        self.hmc = Some(report.config);
        Ok(())
    }

    /// Process observations until `n` have been assimilated.
    pub fn run_to(&mut self, n: usize) -> Result<Vec<StepReport>> {
        let mut out = Vec::new();
        while self.ps.i_processed < n.min(self.model.n_obs()) {
            out.push(self.step()?);
        }
        Ok(out)
    }

    pub fn run(&mut self) -> Result<Vec<StepReport>> {
        self.run_to(self.model.n_obs())
    }

    pub fn model(&self) -> &'a M {
        self.model
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.ps
    }

    pub fn ledger(&self) -> &EvidenceLedger {
        &self.ledger
    }

    pub fn policy(&self) -> &DegeneracyPolicy {
        &self.policy
    }

    pub fn triggers(&self) -> &[TriggerRecord] {
        &self.triggers
    }

    pub fn settings(&self) -> &SmcSettings {
        &self.settings
    }

    /// Importance estimate of the initial block, when one was made.
    pub fn block_estimate(&self) -> Option<&BlockEstimate> {
        self.block.as_ref()
    }

    /// Number of particle-steps where the requested proposal failed.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            settings: self.settings.clone(),
            particles: self.ps.clone(),
            ledger: self.ledger.clone(),
            policy: self.policy.clone(),
            triggers: self.triggers.clone(),
            hmc: self.hmc.clone(),
            master: self.master.clone(),
            fallbacks: self.fallbacks,
            block: self.block.clone(),
        }
    }

    pub fn resume(model: &'a M, cp: Checkpoint) -> Result<Self> {
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", cp.version)));
        }
        if cp.particles.theta_dim != model.theta_dim() || cp.particles.latent_k != model.latent_dim() {
            return Err(Error::Config("checkpoint does not match the model".into()));
        }
        cp.particles.check()?;
        Ok(Self {
            model,
            settings: cp.settings,
            ps: cp.particles,
            ledger: cp.ledger,
            policy: cp.policy,
            triggers: cp.triggers,
            hmc: cp.hmc,
            master: cp.master,
            fallbacks: cp.fallbacks,
            block: cp.block,
        })
    }
}

/// Importance estimate of the log evidence of an initial block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEstimate {
    pub log_evidence: f64,
    /// Monte Carlo standard error of `log_evidence` (delta method).
    pub std_error: f64,
    pub ess: f64,
    pub n_samples: usize,
}

const IS_DF: f64 = 5.0;
const IS_SCALE: f64 = 1.2;
const IS_CHUNK: usize = 1000;
const MAX_FLIP_GROUPS: usize = 12;

struct StudentT {
    mean: DVector<f64>,
    chol: CholeskyFactor,
    log_norm: f64,
    df: f64,
}

impl StudentT {
    fn fit(draws: &[Vec<f64>], df: f64, scale: f64) -> Result<Self> {
        let d = draws[0].len();
        let n = draws.len() as f64;
        let mut mean = DVector::zeros(d);
        for x in draws {
            mean += DVector::from_column_slice(x);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for x in draws {
            let r = DVector::from_column_slice(x) - &mean;
            cov.ger(1.0, &r, &r, 1.0);
        }
        cov *= scale / (n - 1.0).max(1.0);
        // keep degenerate directions (e.g. too few draws) proper
        let floor = 1e-8 * (cov.trace() / d as f64).max(1e-12);
        for i in 0..d {
            cov[(i, i)] += floor;
        }
        let chol = CholeskyFactor::new(&cov)?;
        let df_d = d as f64;
        let log_norm = ln_gamma((df + df_d) / 2.0)
            - ln_gamma(df / 2.0)
            - 0.5 * df_d * (df * std::f64::consts::PI).ln()
            - 0.5 * chol.log_det();
        Ok(Self { mean, chol, log_norm, df })
    }

    fn logpdf(&self, x: &[f64]) -> f64 {
        let r: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(a, b)| a - b).collect();
        let m = self.chol.mahalanobis_sq(&r);
        self.log_norm - 0.5 * (self.df + x.len() as f64) * (m / self.df).ln_1p()
    }

    fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let z = sample_mvn(&DVector::zeros(self.mean.len()), &self.chol, rng);
        let chi: f64 = rand_distr::ChiSquared::new(self.df).expect("positive df").sample(rng);
        let s = (self.df / chi).sqrt();
        self.mean.iter().zip(z.iter()).map(|(m, z)| m + s * z).collect()
    }
}

fn flip(x: &mut [f64], group: &[usize]) {
    for &q in group {
        x[q] = -x[q];
    }
}

/// Importance estimate of the normalising constant of `target` with a
/// Student-t proposal fitted to `draws`. The proposal is averaged over the
/// sign symmetries in `flips`, so posterior draws from any one sign mode
/// suffice.
pub fn importance_evidence(
    target: &dyn GradientTarget,
    draws: &[Vec<f64>],
    flips: &[Vec<usize>],
    n_samples: usize,
    rng: &RngStream,
) -> Result<BlockEstimate> {
    if draws.len() < 2 || n_samples == 0 {
        return Err(Error::Config("importance evidence needs draws and samples".into()));
    }
    let flips: &[Vec<usize>] = if flips.len() > MAX_FLIP_GROUPS {
        log::warn!("{} sign symmetries; proposal not symmetrised", flips.len());
        &[]
    } else {
        flips
    };
    let canonical: Vec<Vec<f64>> = draws
        .iter()
        .map(|x| {
            let mut y = x.clone();
            for g in flips {
                if y[g[0]] < 0.0 {
                    flip(&mut y, g);
                }
            }
            y
        })
        .collect();
    let q = StudentT::fit(&canonical, IS_DF, IS_SCALE)?;
    let n_groups = flips.len();
    let n_patterns = 1usize << n_groups;
    let log_patterns = (n_patterns as f64).ln();
    let mixture_logpdf = |x: &[f64]| -> f64 {
        let mut terms = Vec::with_capacity(n_patterns);
        let mut y = x.to_vec();
        for s in 0..n_patterns {
            y.copy_from_slice(x);
            for (g, grp) in flips.iter().enumerate() {
                if s >> g & 1 == 1 {
                    flip(&mut y, grp);
                }
            }
            terms.push(q.logpdf(&y));
        }
        log_sum_exp(&terms) - log_patterns
    };
    let n_chunks = n_samples.div_ceil(IS_CHUNK);
    let logw: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut r = rng.substream(derive_stream_id(&[0x6973, c as u64]));
            let len = IS_CHUNK.min(n_samples - c * IS_CHUNK);
            let mut grad = vec![0.0; target.dim()];
            (0..len)
                .map(|_| {
                    let mut x = q.sample(&mut r);
                    for grp in flips {
                        if r.uniform() < 0.5 {
                            flip(&mut x, grp);
                        }
                    }
                    let lp = target.log_density_grad(&x, &mut grad);
                    if lp.is_finite() {
                        lp - mixture_logpdf(&x)
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect::<Vec<f64>>()
        })
        .collect();
    let log_evidence = log_mean_exp(&logw);
    if !log_evidence.is_finite() {
        return Err(Error::NonFinite("block evidence".into()));
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - log_evidence).exp()).collect();
    let n = w.len() as f64;
    let var = w.iter().map(|x| (x - 1.0).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let ess = ess(&logw);
    Ok(BlockEstimate {
        log_evidence,
        std_error: (var / n).sqrt(),
        ess,
        n_samples,
    })
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Self-normalised estimate of `E[g(x)]`.
pub fn weighted_mean(ps: &ParticleSet, g: impl Fn(&[f64]) -> f64) -> Result<f64> {
    let w = ps.normalized_weights()?;
    Ok(ps.particles.iter().zip(&w).map(|(x, wi)| wi * g(x)).sum())
}

/// Weighted quantile: smallest value whose cumulative weight reaches `q`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], q: f64) -> f64 {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for &i in &order {
        acc += weights[i] / total;
        if acc >= q - 1e-12 {
            return values[i];
        }
    }
    values[*order.last().expect("non-empty")]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

/// Weighted means, standard deviations and quantiles of every named
/// parameter, after sign fixing.
pub fn posterior_summary(model: &FactorModel, ps: &ParticleSet) -> Result<Vec<ParamSummary>> {
    let w = ps.normalized_weights()?;
    let named: Vec<Vec<(String, f64)>> = (0..ps.len())
        .map(|m| {
            let th = fix_loading_signs_one(&model.to_theta(ps.theta_part(m)), model.spec());
            th.named_values(model.spec())
        })
        .collect();
    let Some(first) = named.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::with_capacity(first.len());
    for (q, (name, _)) in first.iter().enumerate() {
        let vals: Vec<f64> = named.iter().map(|v| v[q].1).collect();
        let mean: f64 = vals.iter().zip(&w).map(|(v, wi)| v * wi).sum();
        let var: f64 = vals.iter().zip(&w).map(|(v, wi)| wi * (v - mean).powi(2)).sum();
        out.push(ParamSummary {
            name: name.clone(),
            mean,
            sd: var.max(0.0).sqrt(),
            q025: weighted_quantile(&vals, &w, 0.025),
            q50: weighted_quantile(&vals, &w, 0.5),
            q975: weighted_quantile(&vals, &w, 0.975),
        });
    }
    Ok(out)
}

/// One draw of the next observation per particle.
pub fn predictive_draw(model: &FactorModel, ps: &ParticleSet, rng: &mut RngStream) -> Result<Vec<DVector<f64>>> {
    let spec = model.spec();
    (0..ps.len())
        .map(|m| {
            let th = model.to_theta(ps.theta_part(m));
            if spec.link == Link::Identity {
                let chol = CholeskyFactor::new(&th.marginal_cov(spec))?;
                Ok(sample_mvn(&th.alpha, &chol, rng))
            } else {
                let chol = CholeskyFactor::new(&th.phi)?;
                let z = sample_mvn(&DVector::zeros(spec.k), &chol, rng);
                let eta = &th.alpha + &th.lambda * z;
                Ok(eta.map(|e| if rng.uniform() < success_prob(spec.link, e) { 1.0 } else { 0.0 }))
            }
        })
        .collect()
}

/// One draw of `z | y, θ` per particle; weights are those of `ps`.
pub fn latent_readout(
    model: &FactorModel,
    ps: &ParticleSet,
    y: &DVector<f64>,
    rng: &mut RngStream,
) -> Result<Vec<DVector<f64>>> {
    let spec = model.spec();
    (0..ps.len())
        .map(|m| {
            let th = model.to_theta(ps.theta_part(m));
            let (mean, chol) = latent_conditional_posterior(spec, &th, y)?;
            Ok(sample_mvn(&mean, &chol, rng))
        })
        .collect()
}
