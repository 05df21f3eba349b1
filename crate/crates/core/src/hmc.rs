//! Hamiltonian Monte Carlo with a diagonal mass matrix, dual-averaging
//! step-size adaptation and the pilot/short-chain jitter protocol.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::RngStream;
use crate::error::{Error, Result};

/// A differentiable log density on `ℝᵈ`.
pub trait GradientTarget: Sync {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the log density. Points
    /// outside the support return `−∞`.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// Wraps a closure as a [`GradientTarget`].
pub struct FnTarget<F> {
    dim: usize,
    f: F,
}

impl<F> FnTarget<F>
where
    F: Fn(&[f64], &mut [f64]) -> f64 + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> GradientTarget for FnTarget<F>
where
    F: Fn(&[f64], &mut [f64]) -> f64 + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (self.f)(x, grad)
    }
}

pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;
pub const DEFAULT_N_LEAPFROG: usize = 32;
pub const DEFAULT_TARGET_ACCEPT: f64 = 0.8;
pub const DEFAULT_PILOT_STEPS: usize = 500;
pub const DEFAULT_SHORT_STEPS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub step_size: f64,
    /// Maximum leapfrog steps per transition.
    pub n_leapfrog: usize,
    pub mass_diag: Vec<f64>,
    pub target_accept: f64,
    pub adapt_steps: usize,
    /// Draw the number of leapfrog steps uniformly from `1..=n_leapfrog`.
    pub jitter_leapfrog: bool,
}

impl HmcConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            step_size: 0.1,
            n_leapfrog: DEFAULT_N_LEAPFROG,
            mass_diag: vec![1.0; dim],
            target_accept: DEFAULT_TARGET_ACCEPT,
            adapt_steps: DEFAULT_PILOT_STEPS,
            jitter_leapfrog: true,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size {} must be positive", self.step_size)));
        }
        if self.n_leapfrog == 0 {
            return Err(Error::Config("n_leapfrog must be at least 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        if self.mass_diag.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "mass matrix",
                expected: dim,
                found: self.mass_diag.len(),
            });
        }
        if self.mass_diag.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::Config("mass entries must be positive".into()));
        }
        Ok(())
    }

    /// Copy with the mass vector padded by ones (or truncated) to `dim`.
    pub fn resized(&self, dim: usize) -> Self {
        let mut out = self.clone();
        out.mass_diag.resize(dim, 1.0);
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub accepted: usize,
    pub total: usize,
    pub accept_rate: f64,
    pub n_divergent: usize,
    pub final_step_size: f64,
}

impl ChainStats {
    fn record(&mut self, info: &StepInfo) {
        self.total += 1;
        self.accepted += info.accepted as usize;
        self.n_divergent += info.divergent as usize;
        self.accept_rate = self.accepted as f64 / self.total as f64;
    }

    /// Sum of counts; the step size is taken from `other`.
    pub fn merge(&mut self, other: &ChainStats) {
        self.accepted += other.accepted;
        self.total += other.total;
        self.n_divergent += other.n_divergent;
        self.accept_rate = if self.total == 0 {
            0.0
        } else {
            self.accepted as f64 / self.total as f64
        };
        self.final_step_size = other.final_step_size;
    }
}

/// Current point with its cached density and gradient.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub x: Vec<f64>,
    pub log_density: f64,
    pub grad: Vec<f64>,
}

impl ChainState {
    pub fn new(target: &dyn GradientTarget, x: Vec<f64>) -> Self {
        let mut grad = vec![0.0; x.len()];
        let log_density = target.log_density_grad(&x, &mut grad);
        Self { x, log_density, grad }
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub x: Vec<f64>,
    pub momentum: Vec<f64>,
    pub log_density: f64,
    pub grad: Vec<f64>,
    /// A non-finite density or gradient was met; the trajectory stopped there.
    pub divergent: bool,
}

fn kinetic(momentum: &[f64], mass: &[f64]) -> f64 {
    0.5 * momentum.iter().zip(mass).map(|(p, m)| p * p / m).sum::<f64>()
}

/// `n_steps` leapfrog steps from a state whose gradient is already known.
pub fn leapfrog_from(
    target: &dyn GradientTarget,
    state: &ChainState,
    momentum: &[f64],
    step_size: f64,
    n_steps: usize,
    mass_diag: &[f64],
) -> Trajectory {
    let mut x = state.x.clone();
    let mut p = momentum.to_vec();
    let mut grad = state.grad.clone();
    let mut logp = state.log_density;
    let mut divergent = !logp.is_finite();
    for _ in 0..n_steps {
        if divergent {
            break;
        }
        for q in 0..x.len() {
            p[q] += 0.5 * step_size * grad[q];
            x[q] += step_size * p[q] / mass_diag[q];
        }
        logp = target.log_density_grad(&x, &mut grad);
        if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            divergent = true;
            break;
        }
        for q in 0..x.len() {
            p[q] += 0.5 * step_size * grad[q];
        }
    }
    Trajectory {
        x,
        momentum: p,
        log_density: logp,
        grad,
        divergent,
    }
}

/// Leapfrog integration from `x` with the given momentum.
pub fn leapfrog(
    target: &dyn GradientTarget,
    x: &[f64],
    momentum: &[f64],
    step_size: f64,
    n_steps: usize,
    mass_diag: &[f64],
) -> Trajectory {
    let state = ChainState::new(target, x.to_vec());
    leapfrog_from(target, &state, momentum, step_size, n_steps, mass_diag)
}

/// Outcome of one transition.
#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    pub accepted: bool,
    pub divergent: bool,
    /// `min(1, exp(H_old − H_new))`, zero for divergences.
    pub accept_prob: f64,
    pub energy_error: f64,
}

/// One Metropolis-corrected HMC transition; `state` is updated in place.
pub fn hmc_step(
    state: &mut ChainState,
    target: &dyn GradientTarget,
    config: &HmcConfig,
    rng: &mut RngStream,
) -> StepInfo {
    hmc_step_with(state, target, config.step_size, config, rng)
}

fn hmc_step_with(
    state: &mut ChainState,
    target: &dyn GradientTarget,
    step_size: f64,
    config: &HmcConfig,
    rng: &mut RngStream,
) -> StepInfo {
    let d = state.x.len();
    let mass = &config.mass_diag;
    let momentum: Vec<f64> = (0..d).map(|q| rng.standard_normal() * mass[q].sqrt()).collect();
    let n_steps = if config.jitter_leapfrog && config.n_leapfrog > 1 {
        rng.random_range(1..=config.n_leapfrog)
    } else {
        config.n_leapfrog
    };
    let h_old = -state.log_density + kinetic(&momentum, mass);
    let traj = leapfrog_from(target, state, &momentum, step_size, n_steps, mass);
    let h_new = -traj.log_density + kinetic(&traj.momentum, mass);
    let energy_error = h_new - h_old;
    let u = rng.uniform();
    if traj.divergent || !energy_error.is_finite() || energy_error.abs() > DIVERGENCE_THRESHOLD {
        return StepInfo {
            accepted: false,
            divergent: true,
            accept_prob: 0.0,
            energy_error,
        };
    }
    let accept_prob = (-energy_error).exp().min(1.0);
    let accepted = u < accept_prob;
    if accepted {
        state.x = traj.x;
        state.log_density = traj.log_density;
        state.grad = traj.grad;
    }
    StepInfo {
        accepted,
        divergent: false,
        accept_prob,
        energy_error,
    }
}

/// Run a chain of `n_steps` frozen transitions, returning the final state.
pub fn run_chain(
    target: &dyn GradientTarget,
    x0: Vec<f64>,
    config: &HmcConfig,
    n_steps: usize,
    rng: &mut RngStream,
) -> (Vec<f64>, ChainStats) {
    let mut state = ChainState::new(target, x0);
    let mut stats = ChainStats {
        final_step_size: config.step_size,
        ..ChainStats::default()
    };
    for _ in 0..n_steps {
        let info = hmc_step(&mut state, target, config, rng);
        stats.record(&info);
    }
    (state.x, stats)
}

/// Run a chain and keep every draw after `n_warmup` frozen transitions.
pub fn sample_chain(
    target: &dyn GradientTarget,
    x0: Vec<f64>,
    config: &HmcConfig,
    n_warmup: usize,
    n_draws: usize,
    thin: usize,
    rng: &mut RngStream,
) -> (Vec<Vec<f64>>, ChainStats) {
    let mut state = ChainState::new(target, x0);
    let mut stats = ChainStats {
        final_step_size: config.step_size,
        ..ChainStats::default()
    };
    let thin = thin.max(1);
    let mut draws = Vec::with_capacity(n_draws);
    for t in 0..n_warmup + n_draws * thin {
        let info = hmc_step(&mut state, target, config, rng);
        stats.record(&info);
        if t >= n_warmup && (t - n_warmup + 1).is_multiple_of(thin) {
            draws.push(state.x.clone());
        }
    }
    (draws, stats)
}

/// Nesterov dual averaging of `log ε`.
struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    t: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(step_size: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * step_size).ln(),
            h_bar: 0.0,
            log_eps: step_size.ln(),
            log_eps_bar: step_size.ln(),
            t: 0.0,
            target,
        }
    }

    fn update(&mut self, accept_prob: f64) {
        self.t += 1.0;
        let w = 1.0 / (self.t + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_eps = self.mu - self.t.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.t.powf(-Self::KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
    }

    fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Running mean and variance.
#[derive(Default)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn push(&mut self, x: &[f64]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.n += 1;
        let n = self.n as f64;
        for q in 0..x.len() {
            let delta = x[q] - self.mean[q];
            self.mean[q] += delta / n;
            self.m2[q] += delta * (x[q] - self.mean[q]);
        }
    }

    /// Sample variances shrunk towards `1e-3`, as mass-matrix estimates.
    fn regularized(&self) -> Option<Vec<f64>> {
        if self.n < 3 {
            return None;
        }
        let n = self.n as f64;
        Some(
            self.m2
                .iter()
                .map(|m2| (n / (n + 5.0)) * (m2 / (n - 1.0)) + 1e-3 * (5.0 / (n + 5.0)))
                .collect(),
        )
    }
}

/// Doubles or halves the step size until a single leapfrog step's acceptance
/// probability crosses one half.
fn reasonable_step_size(target: &dyn GradientTarget, state: &ChainState, config: &HmcConfig, rng: &mut RngStream) -> f64 {
    let d = state.x.len();
    let mass = &config.mass_diag;
    let momentum: Vec<f64> = (0..d).map(|q| rng.standard_normal() * mass[q].sqrt()).collect();
    let h0 = -state.log_density + kinetic(&momentum, mass);
    let log_accept = |eps: f64| {
        let t = leapfrog_from(target, state, &momentum, eps, 1, mass);
        if t.divergent {
            f64::NEG_INFINITY
        } else {
            h0 - (-t.log_density + kinetic(&t.momentum, mass))
        }
    };
    let mut eps = config.step_size;
    let up = log_accept(eps) > 0.5f64.ln();
    for _ in 0..50 {
        let la = log_accept(eps);
        if up != (la > 0.5f64.ln()) {
            break;
        }
        eps = if up { eps * 2.0 } else { eps * 0.5 };
    }
    eps.clamp(1e-8, 1e3)
}

/// Adaptation result.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub config: HmcConfig,
    pub x: Vec<f64>,
    pub stats: ChainStats,
}

/// Adapt step size and diagonal mass over `n_steps` transitions starting
/// from `x0` and `init`.
///
/// The first half tunes the step size only. Draws from 50% to 85% of the
/// window give the mass estimate, after which the step size is re-tuned for
/// the remaining steps under the new metric. With `n_steps == 0` the
/// initial configuration is returned unchanged.
pub fn adapt(
    target: &dyn GradientTarget,
    x0: Vec<f64>,
    init: &HmcConfig,
    n_steps: usize,
    rng: &mut RngStream,
) -> Adapted {
    let mut state = ChainState::new(target, x0);
    let mut config = init.clone();
    let mut stats = ChainStats {
        final_step_size: config.step_size,
        ..ChainStats::default()
    };
    if n_steps == 0 {
        return Adapted {
            config,
            x: state.x,
            stats,
        };
    }
    if state.log_density.is_finite() {
        config.step_size = reasonable_step_size(target, &state, &config, rng);
    }
    let mass_start = n_steps / 2;
    let mass_end = (n_steps * 85) / 100;
    let mut da = DualAveraging::new(config.step_size, config.target_accept);
    let mut var = Welford::default();
    for t in 0..n_steps {
        let info = hmc_step_with(&mut state, target, da.current(), &config, rng);
        stats.record(&info);
        da.update(info.accept_prob);
        if t >= mass_start && t < mass_end {
            var.push(&state.x);
        }
        if t + 1 == mass_end && mass_end > mass_start {
            if let Some(m) = var.regularized() {
                // velocities scale with 1/m: large-variance directions get small mass
                config.mass_diag = m.iter().map(|v| 1.0 / v).collect();
                config.step_size = reasonable_step_size(target, &state, &config, rng);
                da = DualAveraging::new(config.step_size, config.target_accept);
            }
        }
    }
    config.step_size = da.final_step();
    stats.final_step_size = config.step_size;
    Adapted {
        config,
        x: state.x,
        stats,
    }
}

/// Pilot/short-chain jitter settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterSettings {
    pub pilot_steps: usize,
    pub short_steps: usize,
    pub n_leapfrog: usize,
    pub target_accept: f64,
    /// Pilot divergence rate above which tuning is declared failed.
    pub max_divergence_rate: f64,
}

impl Default for JitterSettings {
    fn default() -> Self {
        Self {
            pilot_steps: DEFAULT_PILOT_STEPS,
            short_steps: DEFAULT_SHORT_STEPS,
            n_leapfrog: DEFAULT_N_LEAPFROG,
            target_accept: DEFAULT_TARGET_ACCEPT,
            max_divergence_rate: 0.5,
        }
    }
}

/// Result of a jitter round.
#[derive(Clone, Debug)]
pub struct JitterReport {
    pub config: HmcConfig,
    pub pilot: ChainStats,
    pub short: ChainStats,
}

/// Tune on the first particle with a pilot chain, then move every particle
/// with `short_steps` frozen transitions from its own current value.
///
/// `warm_start` seeds the pilot's step size and mass (padded to the current
/// dimension). Each particle consumes only its own stream, so results do not
/// depend on the worker count.
pub fn pilot_then_short_chains(
    particles: &mut [Vec<f64>],
    target: &dyn GradientTarget,
    settings: &JitterSettings,
    warm_start: Option<&HmcConfig>,
    pilot_rng: &mut RngStream,
    particle_rngs: &mut [RngStream],
) -> Result<JitterReport> {
    assert_eq!(particles.len(), particle_rngs.len());
    let d = target.dim();
    let mut init = match warm_start {
        Some(c) => c.resized(d),
        None => HmcConfig::new(d),
    };
    init.n_leapfrog = settings.n_leapfrog;
    init.target_accept = settings.target_accept;
    init.adapt_steps = settings.pilot_steps;
    init.jitter_leapfrog = true;
    if particles.is_empty() {
        return Ok(JitterReport {
            config: init,
            pilot: ChainStats::default(),
            short: ChainStats::default(),
        });
    }
    let adapted = adapt(target, particles[0].clone(), &init, settings.pilot_steps, pilot_rng);
    let pilot = adapted.stats.clone();
    if pilot.total > 0 {
        let rate = pilot.n_divergent as f64 / pilot.total as f64;
        if rate > settings.max_divergence_rate {
            return Err(Error::TuningFailure {
                divergence_rate: rate,
                steps: pilot.total,
            });
        }
    }
    let mut config = adapted.config;
    config.adapt_steps = 0;
    let short_steps = settings.short_steps;
    let per_particle: Vec<ChainStats> = particles
        .par_iter_mut()
        .zip(particle_rngs.par_iter_mut())
        .map(|(x, rng)| {
            let (x_new, stats) = run_chain(target, std::mem::take(x), &config, short_steps, rng);
            *x = x_new;
            stats
        })
        .collect();
    let mut short = ChainStats::default();
    for s in &per_particle {
        short.merge(s);
    }
    short.final_step_size = config.step_size;
    Ok(JitterReport { config, pilot, short })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_normal(dim: usize) -> FnTarget<impl Fn(&[f64], &mut [f64]) -> f64 + Sync> {
        FnTarget::new(dim, |x: &[f64], g: &mut [f64]| {
            let mut acc = 0.0;
            for q in 0..x.len() {
                g[q] = -x[q];
                acc -= 0.5 * x[q] * x[q];
            }
            acc
        })
    }

    #[test]
    fn leapfrog_energy_and_reversibility() {
        let t = std_normal(1);
        let traj = leapfrog(&t, &[0.5], &[0.5], 0.1, 10, &[1.0]);
        let h0 = 0.25;
        let h1 = -traj.log_density + 0.5 * traj.momentum[0].powi(2);
        assert!((h1 - h0).abs() < 1e-3);
        let back = leapfrog(&t, &traj.x, &[-traj.momentum[0]], 0.1, 10, &[1.0]);
        assert!((back.x[0] - 0.5).abs() < 1e-8);
        assert!((back.momentum[0] + 0.5).abs() < 1e-8);
        let still = leapfrog(&t, &[0.0], &[0.0], 0.1, 10, &[1.0]);
        assert_eq!(still.x, vec![0.0]);
    }

    #[test]
    fn small_steps_always_accept() {
        let t = std_normal(3);
        let mut cfg = HmcConfig::new(3);
        cfg.step_size = 1e-4;
        cfg.n_leapfrog = 3;
        let mut rng = RngStream::new(1, 1);
        let mut state = ChainState::new(&t, vec![0.5, -0.2, 0.1]);
        for _ in 0..200 {
            let info = hmc_step(&mut state, &t, &cfg, &mut rng);
            assert!(info.accept_prob > 0.999);
        }
    }

    #[test]
    fn divergent_trajectories_are_rejected() {
        let t = std_normal(1);
        let mut cfg = HmcConfig::new(1);
        cfg.step_size = 50.0;
        cfg.jitter_leapfrog = false;
        cfg.n_leapfrog = 20;
        let mut rng = RngStream::new(2, 1);
        let mut state = ChainState::new(&t, vec![1.0]);
        let info = hmc_step(&mut state, &t, &cfg, &mut rng);
        assert!(info.divergent && !info.accepted);
        assert_eq!(state.x, vec![1.0]);
    }

    #[test]
    fn adapt_with_zero_steps_is_identity() {
        let t = std_normal(2);
        let cfg = HmcConfig::new(2);
        let out = adapt(&t, vec![0.1, 0.2], &cfg, 0, &mut RngStream::new(3, 0));
        assert_eq!(out.config, cfg);
        assert_eq!(out.x, vec![0.1, 0.2]);
    }

    #[test]
    fn adapted_mass_tracks_scales() {
        let t = FnTarget::new(2, |x: &[f64], g: &mut [f64]| {
            g[0] = -x[0];
            g[1] = -x[1] / 100.0;
            -0.5 * (x[0] * x[0] + x[1] * x[1] / 100.0)
        });
        let out = adapt(&t, vec![0.0, 0.0], &HmcConfig::new(2), 2000, &mut RngStream::new(4, 0));
        let ratio = out.config.mass_diag[0] / out.config.mass_diag[1];
        assert!(ratio > 50.0 && ratio < 200.0, "{ratio}");
    }

    #[test]
    fn short_steps_zero_leaves_particles() {
        let t = std_normal(2);
        let mut parts = vec![vec![0.1, 0.2], vec![-0.3, 0.4]];
        let before = parts.clone();
        let settings = JitterSettings {
            pilot_steps: 20,
            short_steps: 0,
            ..JitterSettings::default()
        };
        let mut rngs = vec![RngStream::new(5, 1), RngStream::new(5, 2)];
        pilot_then_short_chains(&mut parts, &t, &settings, None, &mut RngStream::new(5, 0), &mut rngs).unwrap();
        assert_eq!(parts, before);
    }

    #[test]
    fn tuning_failure_is_reported() {
        let t = FnTarget::new(1, |_x: &[f64], g: &mut [f64]| {
            g[0] = f64::NAN;
            0.0
        });
        let mut parts = vec![vec![0.0]];
        let mut rngs = vec![RngStream::new(6, 1)];
        let res = pilot_then_short_chains(
            &mut parts,
            &t,
            &JitterSettings {
                pilot_steps: 20,
                ..JitterSettings::default()
            },
            None,
            &mut RngStream::new(6, 0),
            &mut rngs,
        );
        assert!(matches!(res, Err(Error::TuningFailure { .. })));
    }
}
