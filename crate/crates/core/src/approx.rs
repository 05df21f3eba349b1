//! Gaussian proposals for the latent row of a new observation: the prior,
//! a Laplace approximation found by Fisher scoring, and a diagonal
//! variational fit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distributions::{mvn_logpdf_centered, CholeskyFactor, RngStream, LN_2PI};
use crate::error::{Error, Result};
use crate::model::likelihood::{augmented_loglik_unchecked, bernoulli_dloglik, sigmoid};
use crate::model::{Link, ModelSpec, Theta};

/// `N(mean, LLᵀ)`
#[derive(Clone, Debug)]
pub struct GaussianProposal {
    pub mean: DVector<f64>,
    pub cov_chol: CholeskyFactor,
}

impl GaussianProposal {
    pub fn new(mean: DVector<f64>, cov_chol: CholeskyFactor) -> Self {
        assert_eq!(mean.len(), cov_chol.dim());
        Self { mean, cov_chol }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn logpdf(&self, z: &[f64]) -> f64 {
        let r: Vec<f64> = z.iter().zip(self.mean.iter()).map(|(a, b)| a - b).collect();
        mvn_logpdf_centered(&r, &self.cov_chol)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let k = self.dim();
        let e = DVector::from_fn(k, |_, _| rng.standard_normal());
        let z = &self.mean + self.cov_chol.lower() * e;
        z.iter().copied().collect()
    }
}

/// Which proposal IBIS-LVM uses for each new latent row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProposalKind {
    Prior,
    Laplace,
    Vb { n_iters: usize, mc_samples: usize },
}

impl ProposalKind {
    pub fn vb_default() -> Self {
        ProposalKind::Vb {
            n_iters: 200,
            mc_samples: 4,
        }
    }
}

fn phi_precision(theta: &Theta) -> Result<DMatrix<f64>> {
    let k = theta.lambda.ncols();
    if theta.phi == DMatrix::identity(k, k) {
        Ok(theta.phi.clone())
    } else {
        Ok(CholeskyFactor::new(&theta.phi)?.inverse())
    }
}

fn linear_predictor(theta: &Theta, z: &[f64]) -> Vec<f64> {
    (0..theta.alpha.len())
        .map(|j| {
            let mut eta = theta.alpha[j];
            for (f, zf) in z.iter().enumerate() {
                eta += theta.lambda[(j, f)] * zf;
            }
            eta
        })
        .collect()
}

/// `ℓ(z | y, θ) = log f(y | z, θ) − ½ zᵀΦ⁻¹z` for the logit link.
pub fn log_target(z: &[f64], y: &[f64], theta: &Theta) -> f64 {
    let prec = phi_precision(theta).expect("valid factor covariance");
    log_target_with(Link::Logit, z, y, theta, &prec)
}

fn log_target_with(link: Link, z: &[f64], y: &[f64], theta: &Theta, prec: &DMatrix<f64>) -> f64 {
    let zv = DVector::from_column_slice(z);
    augmented_loglik_unchecked(link, theta, z, y) - 0.5 * zv.dot(&(prec * &zv))
}

fn grad_with(link: Link, z: &[f64], y: &[f64], theta: &Theta, prec: &DMatrix<f64>) -> DVector<f64> {
    let zv = DVector::from_column_slice(z);
    let mut g = -(prec * &zv);
    for (j, eta) in linear_predictor(theta, z).into_iter().enumerate() {
        let r = bernoulli_dloglik(link, eta, y[j]);
        for f in 0..z.len() {
            g[f] += theta.lambda[(j, f)] * r;
        }
    }
    g
}

/// Gradient of [`log_target`] in `z` (logit link).
pub fn score(z: &[f64], y: &[f64], theta: &Theta) -> DVector<f64> {
    let prec = phi_precision(theta).expect("valid factor covariance");
    grad_with(Link::Logit, z, y, theta, &prec)
}

/// Expected information `Φ⁻¹ + Σ_j π_j(1 − π_j) Λ_j Λ_jᵀ` (logit link).
pub fn fisher_information(z: &[f64], theta: &Theta) -> DMatrix<f64> {
    let prec = phi_precision(theta).expect("valid factor covariance");
    fisher_with(z, theta, &prec)
}

fn fisher_with(z: &[f64], theta: &Theta, prec: &DMatrix<f64>) -> DMatrix<f64> {
    let k = z.len();
    let mut info = prec.clone();
    for (j, eta) in linear_predictor(theta, z).into_iter().enumerate() {
        let pi = sigmoid(eta);
        let w = pi * (1.0 - pi);
        for a in 0..k {
            for b in 0..k {
                info[(a, b)] += w * theta.lambda[(j, a)] * theta.lambda[(j, b)];
            }
        }
    }
    info
}

/// Observed information `−∇²ℓ(z)` assembled from `∂π/∂z` and the second
/// derivative `∂²π/∂z_a∂z_b = Λ_ja Λ_jb π(1 − π)(1 − 2π)`. For the logit
/// link this coincides with the expected information.
pub fn observed_information(z: &[f64], y: &[f64], theta: &Theta) -> DMatrix<f64> {
    let prec = phi_precision(theta).expect("valid factor covariance");
    let k = z.len();
    let mut info = prec;
    for (j, eta) in linear_predictor(theta, z).into_iter().enumerate() {
        let pi = sigmoid(eta);
        let d1 = pi * (1.0 - pi);
        let d2 = d1 * (1.0 - 2.0 * pi);
        let yj = y[j];
        let first = yj / pi - (1.0 - yj) / (1.0 - pi);
        let second = yj / (pi * pi) + (1.0 - yj) / ((1.0 - pi) * (1.0 - pi));
        let c = -(d2 * first - d1 * d1 * second);
        for a in 0..k {
            for b in 0..k {
                info[(a, b)] += c * theta.lambda[(j, a)] * theta.lambda[(j, b)];
            }
        }
    }
    info
}

pub const DEFAULT_SCORING_TOL: f64 = 1e-8;
pub const DEFAULT_SCORING_MAX_ITER: usize = 100;

/// Mode of `ℓ(z | y, θ)` by Fisher scoring from `z0`, halving steps that
/// would decrease `ℓ`. Converged when `‖score‖∞ < tol`.
pub fn fisher_scoring_mode(y: &[f64], theta: &Theta, z0: &[f64], tol: f64, max_iter: usize) -> Result<DVector<f64>> {
    let prec = phi_precision(theta)?;
    let mut z = DVector::from_column_slice(z0);
    let mut f = log_target_with(Link::Logit, z.as_slice(), y, theta, &prec);
    let mut g = grad_with(Link::Logit, z.as_slice(), y, theta, &prec);
    for _ in 0..max_iter {
        if g.amax() < tol {
            return Ok(z);
        }
        let info = fisher_with(z.as_slice(), theta, &prec);
        let step = CholeskyFactor::new(&info)?.solve(&g);
        let mut t = 1.0;
        loop {
            let cand = &z + &step * t;
            let fc = log_target_with(Link::Logit, cand.as_slice(), y, theta, &prec);
            // near the mode `ℓ` is flat to within rounding; accept such steps
            if fc >= f - 64.0 * f64::EPSILON * f.abs().max(1.0) || t < 1e-10 {
                z = cand;
                f = fc;
                break;
            }
            t *= 0.5;
        }
        g = grad_with(Link::Logit, z.as_slice(), y, theta, &prec);
    }
    if g.amax() < tol {
        return Ok(z);
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        grad_norm: g.amax(),
        last: z.iter().copied().collect(),
    })
}

/// `N(mode, I(mode)⁻¹)` with expected information, or observed information
/// when `observed` is set.
pub fn laplace_proposal(y: &[f64], theta: &Theta, observed: bool) -> Result<GaussianProposal> {
    let k = theta.lambda.ncols();
    let mode = fisher_scoring_mode(y, theta, &vec![0.0; k], DEFAULT_SCORING_TOL, DEFAULT_SCORING_MAX_ITER)?;
    let info = if observed {
        observed_information(mode.as_slice(), y, theta)
    } else {
        fisher_information(mode.as_slice(), theta)
    };
    let cov = CholeskyFactor::new(&info)?.inverse();
    Ok(GaussianProposal::new(mode, CholeskyFactor::new(&cov)?))
}

/// Fitted diagonal Gaussian and the per-iteration ELBO estimates.
#[derive(Clone, Debug)]
pub struct VbFit {
    pub proposal: GaussianProposal,
    pub elbo_trace: Vec<f64>,
    /// `(mean, log sd)` after each iteration.
    pub iterates: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Mean-field Gaussian fit maximising the ELBO of
/// `log f(y | z, θ) + log N(z; 0, Φ)` by reparameterised stochastic
/// gradient ascent with step `0.1/√t`. The returned Gaussian averages the
/// iterates over the second half of the run.
pub fn vb_fit(
    link: Link,
    y: &[f64],
    theta: &Theta,
    rng: &mut RngStream,
    n_iters: usize,
    mc_samples: usize,
) -> Result<VbFit> {
    let k = theta.lambda.ncols();
    let prec = phi_precision(theta)?;
    let log_det_phi = CholeskyFactor::new(&theta.phi)?.log_det();
    let mut m = vec![0.0; k];
    let mut log_s = vec![0.0f64; k];
    let mut elbo_trace = Vec::with_capacity(n_iters);
    let mut iterates = Vec::with_capacity(n_iters);
    let mc = mc_samples.max(1);
    let half = n_iters / 2;
    let mut avg_m = vec![0.0; k];
    let mut avg_ls = vec![0.0; k];
    let mut n_avg = 0usize;
    for t in 1..=n_iters {
        let s: Vec<f64> = log_s.iter().map(|v| v.exp()).collect();
        let mut gm = vec![0.0; k];
        let mut gls = vec![0.0; k];
        let mut elbo = 0.0;
        for _ in 0..mc {
            let eps: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
            let z: Vec<f64> = (0..k).map(|f| m[f] + s[f] * eps[f]).collect();
            elbo += log_target_with(link, &z, y, theta, &prec);
            let g = grad_with(link, &z, y, theta, &prec);
            for f in 0..k {
                gm[f] += g[f];
                gls[f] += g[f] * eps[f] * s[f];
            }
        }
        let entropy: f64 = log_s.iter().map(|ls| ls + 0.5 * (1.0 + LN_2PI)).sum();
        elbo = elbo / mc as f64 - 0.5 * (k as f64 * LN_2PI + log_det_phi) + entropy;
        if !elbo.is_finite() {
            return Err(Error::NonFinite(format!("ELBO estimate at iteration {t}")));
        }
        elbo_trace.push(elbo);
        let rate = 0.1 / (t as f64).sqrt();
        for f in 0..k {
            m[f] += rate * gm[f] / mc as f64;
            log_s[f] += rate * (gls[f] / mc as f64 + 1.0);
        }
        iterates.push((m.clone(), log_s.clone()));
        if t > half {
            n_avg += 1;
            for f in 0..k {
                avg_m[f] += m[f];
                avg_ls[f] += log_s[f];
            }
        }
    }
    if n_avg > 0 {
        for f in 0..k {
            m[f] = avg_m[f] / n_avg as f64;
            log_s[f] = avg_ls[f] / n_avg as f64;
        }
    }
    let lower = DMatrix::from_diagonal(&DVector::from_iterator(k, log_s.iter().map(|v| v.exp())));
    let proposal = GaussianProposal::new(DVector::from_vec(m), CholeskyFactor::from_lower(lower)?);
    Ok(VbFit {
        proposal,
        elbo_trace,
        iterates,
    })
}

pub fn vb_proposal(
    link: Link,
    y: &[f64],
    theta: &Theta,
    rng: &mut RngStream,
    n_iters: usize,
    mc_samples: usize,
) -> Result<GaussianProposal> {
    Ok(vb_fit(link, y, theta, rng, n_iters, mc_samples)?.proposal)
}

/// `N(0, Φ)`; for identity `Φ` this is `N(0, I_k)`.
pub fn prior_proposal(spec: &ModelSpec, theta: &Theta) -> Result<GaussianProposal> {
    let k = spec.k;
    let chol = if theta.phi == DMatrix::identity(k, k) {
        CholeskyFactor::identity(k)
    } else {
        CholeskyFactor::new(&theta.phi)?
    };
    Ok(GaussianProposal::new(DVector::zeros(k), chol))
}

/// Build the requested proposal for one particle.
pub fn build_proposal(
    kind: ProposalKind,
    spec: &ModelSpec,
    theta: &Theta,
    y: &[f64],
    rng: &mut RngStream,
) -> Result<GaussianProposal> {
    match kind {
        ProposalKind::Prior => prior_proposal(spec, theta),
        ProposalKind::Laplace => {
            if spec.link != Link::Logit {
                return Err(Error::UnsupportedLink(
                    "the Laplace proposal is derived for the logit link; use the prior or VB proposal".into(),
                ));
            }
            laplace_proposal(y, theta, false)
        }
        ProposalKind::Vb { n_iters, mc_samples } => vb_proposal(spec.link, y, theta, rng, n_iters, mc_samples),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(alpha: f64, lambda: f64) -> Theta {
        Theta {
            alpha: DVector::from_element(1, alpha),
            lambda: DMatrix::from_element(1, 1, lambda),
            phi: DMatrix::identity(1, 1),
            psi_diag: DVector::zeros(0),
        }
    }

    #[test]
    fn score_examples() {
        let th = scalar(0.0, 1.0);
        assert!((score(&[0.0], &[1.0], &th)[0] - 0.5).abs() < 1e-15);
        assert!((score(&[0.0], &[0.0], &th)[0] + 0.5).abs() < 1e-15);
        let th0 = scalar(0.3, 0.0);
        assert!((score(&[1.7], &[1.0], &th0)[0] + 1.7).abs() < 1e-15);
    }

    #[test]
    fn fisher_examples() {
        assert!((fisher_information(&[0.0], &scalar(0.0, 1.0))[(0, 0)] - 1.25).abs() < 1e-15);
        assert!((fisher_information(&[0.4], &scalar(0.2, 0.0))[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn observed_equals_expected_for_logit() {
        let th = Theta {
            alpha: DVector::from_vec(vec![0.3, -1.0, 0.5]),
            lambda: DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.7, 0.9, 0.4, 1.3]),
            phi: DMatrix::identity(2, 2),
            psi_diag: DVector::zeros(0),
        };
        let z = [0.3, -0.8];
        let a = observed_information(&z, &[1.0, 0.0, 1.0], &th);
        let b = fisher_information(&z, &th);
        assert!((a - b).abs().max() < 1e-12);
    }

    #[test]
    fn mode_examples() {
        let z = fisher_scoring_mode(&[1.0], &scalar(0.3, 0.0), &[0.0], 1e-8, 100).unwrap();
        assert_eq!(z[0], 0.0);
        // z = 1 − σ(z) by bisection
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if 1.0 - sigmoid(mid) - mid > 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        let z = fisher_scoring_mode(&[1.0], &scalar(0.0, 1.0), &[0.0], 1e-8, 100).unwrap();
        assert!((z[0] - lo).abs() < 1e-8, "{} vs {lo}", z[0]);
        assert!(matches!(
            fisher_scoring_mode(&[1.0], &scalar(0.0, 1.0), &[0.0], 1e-8, 0),
            Err(Error::NonConvergence { .. })
        ));
    }

    #[test]
    fn laplace_examples() {
        let prop = laplace_proposal(&[1.0, 0.0], &{
            let mut t = scalar(0.0, 0.0);
            t.alpha = DVector::from_vec(vec![0.5, -0.5]);
            t.lambda = DMatrix::zeros(2, 1);
            t
        }, false)
        .unwrap();
        assert_eq!(prop.mean[0], 0.0);
        assert!((prop.cov_chol.reconstruct()[(0, 0)] - 1.0).abs() < 1e-15);

        let prop = laplace_proposal(&[1.0], &scalar(0.2, 1.3), false).unwrap();
        let at_mean = prop.logpdf(prop.mean.as_slice());
        let info = fisher_information(prop.mean.as_slice(), &scalar(0.2, 1.3));
        let expected = -0.5 * (LN_2PI - info[(0, 0)].ln());
        assert!((at_mean - expected).abs() < 1e-12);
    }

    #[test]
    fn prior_proposal_examples() {
        let spec = ModelSpec::exploratory(4, 2, Link::Logit).unwrap();
        let th = Theta {
            alpha: DVector::zeros(4),
            lambda: DMatrix::zeros(4, 2),
            phi: DMatrix::identity(2, 2),
            psi_diag: DVector::zeros(0),
        };
        let q = prior_proposal(&spec, &th).unwrap();
        assert!((q.logpdf(&[0.0, 0.0]) + LN_2PI).abs() < 1e-14);
        let mut rng = RngStream::new(1, 1);
        let n = 20_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let z = q.sample(&mut rng);
            for f in 0..2 {
                sum[f] += z[f];
                sq[f] += z[f] * z[f];
            }
        }
        for f in 0..2 {
            assert!((sum[f] / n as f64).abs() < 0.03);
            assert!((sq[f] / n as f64 - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn vb_examples() {
        let mut rng = RngStream::new(2, 2);
        let mut th = scalar(0.4, 0.0);
        th.alpha = DVector::from_vec(vec![0.4, -0.2]);
        th.lambda = DMatrix::zeros(2, 1);
        let q = vb_proposal(Link::Logit, &[1.0, 0.0], &th, &mut rng, 200, 4).unwrap();
        assert!(q.mean[0].abs() < 0.05, "{}", q.mean[0]);
        assert!((q.cov_chol.lower()[(0, 0)] - 1.0).abs() < 0.05);

        let th = scalar(-0.3, 1.2);
        let laplace = laplace_proposal(&[1.0], &th, false).unwrap();
        let vb = vb_proposal(Link::Logit, &[1.0], &th, &mut rng, 200, 4).unwrap();
        assert!((vb.mean[0] - laplace.mean[0]).abs() < 0.1);
    }

    #[test]
    fn laplace_needs_logit() {
        let spec = ModelSpec::exploratory(1, 1, Link::Probit).unwrap();
        let th = scalar(0.0, 1.0);
        let res = build_proposal(ProposalKind::Laplace, &spec, &th, &[1.0], &mut RngStream::new(0, 0));
        assert!(matches!(res, Err(Error::UnsupportedLink(_))));
        assert!(build_proposal(ProposalKind::vb_default(), &spec, &th, &[1.0], &mut RngStream::new(0, 0)).is_ok());
    }
}
