use nalgebra::{DMatrix, DVector};
use rand_distr::{ChiSquared, Distribution, Gamma};

use super::spec::{FactorCovMode, LoadingCell, Link, ModelSpec, ResidualMode, Theta};
use crate::distributions::{
    inv_gamma_logpdf, inv_wishart_logpdf_chol, lkj_logpdf, mvn_logpdf_centered, normal_logpdf,
    CholeskyFactor, RngStream, LN_2PI,
};
use crate::error::{Error, Result};

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const PROBIT_TAIL: f64 = -8.0;

/// `1 − 1/t² + 3/t⁴ − 15/t⁶ + 105/t⁸ − …`, the asymptotic Mills-ratio
/// series, truncated after the `1/t¹⁶` term.
fn mills_series(t: f64) -> f64 {
    let u = 1.0 / (t * t);
    let mut acc = 1.0;
    for n in (1..=8).rev() {
        acc = 1.0 - (2 * n - 1) as f64 * u * acc;
    }
    acc
}

/// `log Φ(x)` for the standard normal CDF, with an asymptotic expansion in
/// the far lower tail.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x < PROBIT_TAIL {
        let t = -x;
        -0.5 * x * x - 0.5 * LN_2PI - t.ln() + mills_series(t).ln()
    } else if x > 5.0 {
        (-0.5 * libm::erfc(x / std::f64::consts::SQRT_2)).ln_1p()
    } else {
        (0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)).ln()
    }
}

/// `φ(x) / Φ(x)`, the derivative of `log Φ(x)`.
pub fn inv_mills(x: f64) -> f64 {
    if x < PROBIT_TAIL {
        let t = -x;
        t / mills_series(t)
    } else {
        let log_pdf = -0.5 * x * x - 0.5 * LN_2PI;
        (log_pdf - log_norm_cdf(x)).exp()
    }
}

/// Log-probabilities `(log P(y=1), log P(y=0))` for linear predictor `eta`.
pub fn log_probs(link: Link, eta: f64) -> (f64, f64) {
    match link {
        Link::Logit => (-softplus(-eta), -softplus(eta)),
        Link::Probit => (log_norm_cdf(eta), log_norm_cdf(-eta)),
        Link::Identity => unreachable!("identity link has no Bernoulli probabilities"),
    }
}

/// `log P(y | eta)` for a binary outcome.
#[inline]
pub fn bernoulli_loglik(link: Link, eta: f64, y: f64) -> f64 {
    match link {
        Link::Logit => {
            if y > 0.5 {
                -softplus(-eta)
            } else {
                -softplus(eta)
            }
        }
        Link::Probit => {
            if y > 0.5 {
                log_norm_cdf(eta)
            } else {
                log_norm_cdf(-eta)
            }
        }
        Link::Identity => unreachable!(),
    }
}

/// `d/dη log P(y | η)`.
#[inline]
pub fn bernoulli_dloglik(link: Link, eta: f64, y: f64) -> f64 {
    match link {
        Link::Logit => y - sigmoid(eta),
        Link::Probit => {
            if y > 0.5 {
                inv_mills(eta)
            } else {
                -inv_mills(-eta)
            }
        }
        Link::Identity => unreachable!(),
    }
}

/// `(log P(y | η), d/dη log P(y | η))` with the link evaluated once.
#[inline]
pub fn bernoulli_loglik_and_d(link: Link, eta: f64, y: f64) -> (f64, f64) {
    match link {
        Link::Logit => {
            // signed margin: log P = −softplus(−s), d/ds = σ(−s)
            let s = if y > 0.5 { eta } else { -eta };
            let e = (-s.abs()).exp();
            let (lp, tail) = if s >= 0.0 {
                (-e.ln_1p(), e / (1.0 + e))
            } else {
                (s - e.ln_1p(), 1.0 / (1.0 + e))
            };
            (lp, if y > 0.5 { tail } else { -tail })
        }
        _ => (bernoulli_loglik(link, eta, y), bernoulli_dloglik(link, eta, y)),
    }
}

/// `P(y = 1 | η)`
pub fn success_prob(link: Link, eta: f64) -> f64 {
    match link {
        Link::Logit => sigmoid(eta),
        Link::Probit => 0.5 * libm::erfc(-eta / std::f64::consts::SQRT_2),
        Link::Identity => unreachable!(),
    }
}

fn check_theta_dims(spec: &ModelSpec, theta: &Theta) -> Result<()> {
    if theta.alpha.len() != spec.p {
        return Err(Error::DimensionMismatch {
            what: "alpha",
            expected: spec.p,
            found: theta.alpha.len(),
        });
    }
    if theta.lambda.nrows() != spec.p || theta.lambda.ncols() != spec.k {
        return Err(Error::DimensionMismatch {
            what: "lambda columns",
            expected: spec.k,
            found: theta.lambda.ncols(),
        });
    }
    Ok(())
}

/// `log N(y | α, ΛΦΛᵀ + Ψ)`, the IBIS incremental weight.
pub fn marginal_loglik_point(spec: &ModelSpec, theta: &Theta, y: &DVector<f64>) -> Result<f64> {
    if spec.link != Link::Identity {
        return Err(Error::UnsupportedLink(format!(
            "marginal likelihood needs the identity link, got {:?}",
            spec.link
        )));
    }
    check_theta_dims(spec, theta)?;
    if y.len() != spec.p {
        return Err(Error::DimensionMismatch {
            what: "observation",
            expected: spec.p,
            found: y.len(),
        });
    }
    let chol = CholeskyFactor::new(&theta.marginal_cov(spec))?;
    let r: Vec<f64> = y.iter().zip(theta.alpha.iter()).map(|(a, b)| a - b).collect();
    Ok(mvn_logpdf_centered(&r, &chol))
}

/// `log f(y | z, θ)` for binary items.
pub fn augmented_loglik_point(
    spec: &ModelSpec,
    theta: &Theta,
    z: &[f64],
    y: &DVector<f64>,
) -> Result<f64> {
    if !spec.link.is_binary() {
        return Err(Error::UnsupportedLink(
            "augmented likelihood needs a logit or probit link".into(),
        ));
    }
    check_theta_dims(spec, theta)?;
    if z.len() != spec.k || y.len() != spec.p {
        return Err(Error::DimensionMismatch {
            what: "latent row or observation",
            expected: spec.k,
            found: z.len(),
        });
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract("binary likelihood needs y in {0, 1}".into()));
    }
    Ok(augmented_loglik_unchecked(spec.link, theta, z, y.as_slice()))
}

pub(crate) fn augmented_loglik_unchecked(link: Link, theta: &Theta, z: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (j, &yj) in y.iter().enumerate() {
        let mut eta = theta.alpha[j];
        for (f, zf) in z.iter().enumerate() {
            eta += theta.lambda[(j, f)] * zf;
        }
        acc += bernoulli_loglik(link, eta, yj);
    }
    acc
}

/// Exact Gaussian `z | y, θ` for continuous items:
/// precision `Φ⁻¹ + ΛᵀΨ⁻¹Λ`, mean `cov · ΛᵀΨ⁻¹(y − α)`.
pub fn latent_conditional_posterior(
    spec: &ModelSpec,
    theta: &Theta,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, CholeskyFactor)> {
    if spec.link != Link::Identity || spec.is_saturated() {
        return Err(Error::UnsupportedLink(
            "latent conditional needs a factor model with the identity link".into(),
        ));
    }
    check_theta_dims(spec, theta)?;
    let k = spec.k;
    let phi_inv = CholeskyFactor::new(&theta.phi)?.inverse();
    let mut precision = phi_inv;
    let mut rhs = DVector::zeros(k);
    for j in 0..spec.p {
        let w = 1.0 / theta.psi_diag[j];
        let resid = y[j] - theta.alpha[j];
        for a in 0..k {
            rhs[a] += theta.lambda[(j, a)] * w * resid;
            for b in 0..k {
                precision[(a, b)] += theta.lambda[(j, a)] * w * theta.lambda[(j, b)];
            }
        }
    }
    let prec_chol = CholeskyFactor::new(&precision)?;
    let cov = prec_chol.inverse();
    let mean = &cov * rhs;
    Ok((mean, CholeskyFactor::new(&cov)?))
}

/// Inverse-gamma rates `(c0 − 1) / (S⁻¹)_jj`.
pub fn residual_prior_rates(c0: f64, empirical_cov: &DMatrix<f64>) -> Result<Vec<f64>> {
    let inv = CholeskyFactor::new(empirical_cov)
        .map_err(|_| Error::Data("empirical covariance is not positive definite".into()))?
        .inverse();
    Ok((0..inv.nrows()).map(|j| (c0 - 1.0) / inv[(j, j)]).collect())
}

/// Prior log density on the constrained scale.
pub fn prior_logpdf(spec: &ModelSpec, theta: &Theta, empirical_cov: Option<&DMatrix<f64>>) -> Result<f64> {
    let rates = match (spec.residual_mode, empirical_cov) {
        (ResidualMode::DiagonalInvGamma { c0 }, Some(s)) => Some(residual_prior_rates(c0, s)?),
        (ResidualMode::DiagonalInvGamma { .. }, None) => {
            return Err(Error::Contract(
                "residual prior needs the empirical covariance".into(),
            ))
        }
        (ResidualMode::FixedIdentity, _) => None,
    };
    check_theta_dims(spec, theta)?;
    let phi_chol = match spec.factor_cov_mode {
        FactorCovMode::Identity => None,
        _ => Some(CholeskyFactor::new(&theta.phi)?),
    };
    Ok(prior_logpdf_parts(spec, theta, phi_chol.as_ref(), rates.as_deref()))
}

pub(crate) fn prior_logpdf_parts(
    spec: &ModelSpec,
    theta: &Theta,
    phi_chol: Option<&CholeskyFactor>,
    rates: Option<&[f64]>,
) -> f64 {
    let mut acc = 0.0;
    for j in 0..spec.p {
        for f in 0..spec.k {
            acc += match spec.cell(j, f) {
                LoadingCell::Fixed(_) => 0.0,
                LoadingCell::Free => normal_logpdf(theta.lambda[(j, f)], 0.0, spec.loading_prior_sd),
                LoadingCell::ApproxZero => normal_logpdf(theta.lambda[(j, f)], 0.0, spec.approx_zero_sd),
            };
        }
        acc += normal_logpdf(theta.alpha[j], 0.0, spec.intercept_prior_sd);
    }
    match (&spec.factor_cov_mode, phi_chol) {
        (FactorCovMode::Identity, _) => {}
        (FactorCovMode::LkjCorrelation { eta }, Some(c)) => {
            acc += lkj_logpdf(c, *eta).unwrap_or(f64::NEG_INFINITY);
        }
        (FactorCovMode::InverseWishart { scale, df }, Some(c)) => {
            let scale_chol = CholeskyFactor::new(scale).expect("validated inverse-Wishart scale");
            acc += inv_wishart_logpdf_chol(c, &scale_chol, *df);
        }
        (_, None) => unreachable!("non-identity factor covariance needs its factor"),
    }
    if let (ResidualMode::DiagonalInvGamma { c0 }, Some(rates)) = (spec.residual_mode, rates) {
        for (j, rate) in rates.iter().enumerate() {
            acc += inv_gamma_logpdf(theta.psi_diag[j], c0, *rate);
        }
    }
    acc
}

fn sample_lkj(m: usize, eta: f64, rng: &mut RngStream) -> DMatrix<f64> {
    // C-vine partial correlations: level j draws from Beta(b, b) on (-1, 1)
    // with b = eta + (m - 2 - j) / 2, matching the factor construction in
    // `transform::corr_cholesky_from_unconstrained`.
    let mut y = vec![0.0; m * m.saturating_sub(1) / 2];
    for i in 1..m {
        for j in 0..i {
            let b = eta + (m as f64 - 2.0 - j as f64) / 2.0;
            let g1 = Gamma::new(b, 1.0).expect("positive shape").sample(rng);
            let g2 = Gamma::new(b, 1.0).expect("positive shape").sample(rng);
            let u = g1 / (g1 + g2);
            let z = (2.0 * u - 1.0).clamp(-1.0 + 1e-15, 1.0 - 1e-15);
            y[i * (i - 1) / 2 + j] = z.atanh();
        }
    }
    let (l, _) = super::transform::corr_cholesky_from_unconstrained(&y, m);
    let mut r = &l * l.transpose();
    for i in 0..m {
        r[(i, i)] = 1.0;
    }
    r
}

fn sample_inv_wishart(scale: &DMatrix<f64>, df: f64, rng: &mut RngStream) -> DMatrix<f64> {
    // Bartlett: W ~ Wishart(df, scale⁻¹), Φ = W⁻¹
    let m = scale.nrows();
    let v = CholeskyFactor::new(scale).expect("validated scale").inverse();
    let lv = CholeskyFactor::new(&v).expect("validated scale").lower().clone();
    let mut a = DMatrix::zeros(m, m);
    for i in 0..m {
        a[(i, i)] = ChiSquared::new(df - i as f64).expect("df > m - 1").sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.standard_normal();
        }
    }
    let la = lv * a;
    let w = &la * la.transpose();
    CholeskyFactor::new(&w).expect("Wishart draw is SPD").inverse()
}

/// Exact draw from the prior; fixed loadings are set to their constants.
pub fn prior_sample(spec: &ModelSpec, empirical_cov: Option<&DMatrix<f64>>, rng: &mut RngStream) -> Result<Theta> {
    let rates = match (spec.residual_mode, empirical_cov) {
        (ResidualMode::DiagonalInvGamma { c0 }, Some(s)) => Some((c0, residual_prior_rates(c0, s)?)),
        (ResidualMode::DiagonalInvGamma { .. }, None) => {
            return Err(Error::Contract("residual prior needs the empirical covariance".into()))
        }
        (ResidualMode::FixedIdentity, _) => None,
    };
    let (p, k) = (spec.p, spec.k);
    let mut lambda = DMatrix::zeros(p, k);
    for j in 0..p {
        for f in 0..k {
            lambda[(j, f)] = match spec.cell(j, f) {
                LoadingCell::Fixed(c) => c,
                LoadingCell::Free => spec.loading_prior_sd * rng.standard_normal(),
                LoadingCell::ApproxZero => spec.approx_zero_sd * rng.standard_normal(),
            };
        }
    }
    let alpha = DVector::from_fn(p, |_, _| spec.intercept_prior_sd * rng.standard_normal());
    let m = spec.phi_dim();
    let phi = match &spec.factor_cov_mode {
        FactorCovMode::Identity => DMatrix::identity(m, m),
        FactorCovMode::LkjCorrelation { eta } => sample_lkj(m, *eta, rng),
        FactorCovMode::InverseWishart { scale, df } => sample_inv_wishart(scale, *df, rng),
    };
    let psi_diag = match rates {
        Some((c0, rates)) => DVector::from_iterator(
            p,
            rates.iter().map(|&rate| {
                let g = Gamma::new(c0, 1.0 / rate).expect("positive shape").sample(rng);
                1.0 / g
            }),
        ),
        None => DVector::zeros(0),
    };
    Ok(Theta {
        alpha,
        lambda,
        phi,
        psi_diag,
    })
}

/// Flip each factor whose leading loading is negative. `ΛΦΛᵀ` is unchanged.
pub fn fix_loading_signs(draws: &[Theta], spec: &ModelSpec) -> Vec<Theta> {
    draws.iter().map(|t| fix_loading_signs_one(t, spec)).collect()
}

pub fn fix_loading_signs_one(theta: &Theta, spec: &ModelSpec) -> Theta {
    let mut out = theta.clone();
    if spec.is_saturated() {
        return out;
    }
    for f in 0..spec.k {
        let Some(lead) = spec.leading_row(f) else { continue };
        if !spec.cell(lead, f).is_estimated() || out.lambda[(lead, f)] >= 0.0 {
            continue;
        }
        for j in 0..spec.p {
            if spec.cell(j, f).is_estimated() {
                out.lambda[(j, f)] = -out.lambda[(j, f)];
            }
        }
        for g in 0..spec.k {
            if g != f {
                out.phi[(f, g)] = -out.phi[(f, g)];
                out.phi[(g, f)] = -out.phi[(g, f)];
            }
        }
    }
    out
}
