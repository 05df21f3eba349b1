//! Unconstrained posterior densities with analytic gradients.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::likelihood::{
    augmented_loglik_unchecked, bernoulli_loglik_and_d, marginal_loglik_point,
    prior_logpdf_parts, residual_prior_rates,
};
use super::spec::{Dataset, FactorCovMode, LatentBlock, LoadingCell, ModelSpec, ResidualMode, Theta};
use super::transform::{corr_cholesky_tangents, unpack, ParamLayout, PhiParam};
use crate::distributions::{
    inv_gamma_logpdf, inv_wishart_logpdf_chol, lkj_log_normalizer, mvn_logpdf_centered,
    normal_logpdf, CholeskyFactor, LN_2PI,
};
use crate::error::{Error, Result};
use crate::hmc::GradientTarget;

/// A model spec bound to a dataset. Holds everything that does not depend on
/// how many observations have been processed.
#[derive(Clone, Debug)]
pub struct FactorModel {
    spec: ModelSpec,
    layout: ParamLayout,
    data: Arc<Dataset>,
    center: Vec<f64>,
    rates: Option<Vec<f64>>,
    empirical_cov: Option<DMatrix<f64>>,
    iw_scale: Option<(DMatrix<f64>, CholeskyFactor)>,
    lkj_log_norm: f64,
}

/// Parameters unpacked once for repeated point evaluations.
pub struct PreparedTheta {
    pub theta: Theta,
    /// Factor of the marginal covariance (identity link only).
    sigma_chol: Option<CholeskyFactor>,
}

impl FactorModel {
    pub fn new(spec: ModelSpec, data: Arc<Dataset>) -> Result<Self> {
        spec.validate()?;
        if data.p() != spec.p {
            return Err(Error::DimensionMismatch {
                what: "dataset items",
                expected: spec.p,
                found: data.p(),
            });
        }
        let is_binary_data = data.kind() == super::spec::DataKind::Binary;
        if spec.link.is_binary() != is_binary_data {
            return Err(Error::Config(format!(
                "link {:?} does not match {:?} data",
                spec.link,
                data.kind()
            )));
        }
        let (rates, empirical_cov) = match spec.residual_mode {
            ResidualMode::DiagonalInvGamma { c0 } => {
                let s = data.empirical_cov_for_prior()?;
                (Some(residual_prior_rates(c0, &s)?), Some(s))
            }
            ResidualMode::FixedIdentity => (None, None),
        };
        let iw_scale = match &spec.factor_cov_mode {
            FactorCovMode::InverseWishart { scale, .. } => Some((scale.clone(), CholeskyFactor::new(scale)?)),
            _ => None,
        };
        let lkj_log_norm = match spec.factor_cov_mode {
            FactorCovMode::LkjCorrelation { eta } => lkj_log_normalizer(spec.phi_dim(), eta),
            _ => 0.0,
        };
        let center = data.mean().iter().copied().collect();
        Ok(Self {
            layout: ParamLayout::new(&spec),
            spec,
            data,
            center,
            rates,
            empirical_cov,
            iw_scale,
            lkj_log_norm,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn data(&self) -> &Arc<Dataset> {
        &self.data
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    /// Dimension of the unconstrained `θ` vector.
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn is_latent(&self) -> bool {
        self.spec.link.is_binary()
    }

    pub fn empirical_cov(&self) -> Option<&DMatrix<f64>> {
        self.empirical_cov.as_ref()
    }

    pub fn to_theta(&self, v: &[f64]) -> Theta {
        unpack(&self.spec, &self.layout, v).theta
    }

    /// Prior plus log Jacobian at an unconstrained point.
    pub fn log_prior_unconstrained(&self, v: &[f64]) -> f64 {
        let u = unpack(&self.spec, &self.layout, v);
        let chol = match self.layout.phi_param {
            PhiParam::Identity => None,
            _ => match CholeskyFactor::from_lower(u.phi_lower.clone()) {
                Ok(c) => Some(c),
                Err(_) => return f64::NEG_INFINITY,
            },
        };
        prior_logpdf_parts(&self.spec, &u.theta, chol.as_ref(), self.rates.as_deref()) + u.log_jacobian
    }

    pub fn prepare(&self, v: &[f64]) -> PreparedTheta {
        let theta = self.to_theta(v);
        let sigma_chol = if self.spec.link.is_binary() {
            None
        } else {
            CholeskyFactor::new(&theta.marginal_cov(&self.spec)).ok()
        };
        PreparedTheta { theta, sigma_chol }
    }

    /// `log f(y_i | θ)` for continuous data; `−∞` if the covariance is not
    /// positive definite.
    pub fn point_loglik(&self, prepared: &PreparedTheta, i: usize) -> f64 {
        let Some(chol) = &prepared.sigma_chol else {
            return f64::NEG_INFINITY;
        };
        let vals = self.data.values();
        let r: Vec<f64> = (0..self.spec.p).map(|j| vals[(i, j)] - prepared.theta.alpha[j]).collect();
        mvn_logpdf_centered(&r, chol)
    }

    /// `log f(y_i | z, θ)` for binary data.
    pub fn point_loglik_augmented(&self, theta: &Theta, z: &[f64], i: usize) -> f64 {
        let vals = self.data.values();
        let y: Vec<f64> = (0..self.spec.p).map(|j| vals[(i, j)]).collect();
        augmented_loglik_unchecked(self.spec.link, theta, z, &y)
    }

    /// `log N(z; 0, Φ)` for one latent row.
    pub fn latent_prior_logpdf(&self, theta: &Theta, z: &[f64]) -> f64 {
        match self.layout.phi_param {
            PhiParam::Identity => z.iter().map(|x| normal_logpdf(*x, 0.0, 1.0)).sum(),
            _ => match CholeskyFactor::new(&theta.phi) {
                Ok(c) => mvn_logpdf_centered(z, &c),
                Err(_) => f64::NEG_INFINITY,
            },
        }
    }

    /// Sum of point terms over rows `0..n_obs`, accumulated in order.
    pub fn prefix_loglik(&self, v: &[f64], n_obs: usize) -> f64 {
        let prepared = self.prepare(v);
        let mut acc = 0.0;
        for i in 0..n_obs {
            acc += self.point_loglik(&prepared, i);
        }
        acc
    }

    /// Continuous posterior target over the first `n_obs` rows.
    pub fn marginal_target(&self, n_obs: usize) -> MarginalTarget<'_> {
        assert!(!self.spec.link.is_binary(), "marginal target needs the identity link");
        assert!(n_obs <= self.n());
        let p = self.spec.p;
        let vals = self.data.values();
        let mut sum1 = DVector::zeros(p);
        let mut sum2 = DMatrix::zeros(p, p);
        for i in 0..n_obs {
            let r = DVector::from_fn(p, |j, _| vals[(i, j)] - self.center[j]);
            sum1 += &r;
            sum2.ger(1.0, &r, &r, 1.0);
        }
        MarginalTarget {
            model: self,
            n_obs,
            sum1,
            sum2,
        }
    }

    /// Joint target over `(θ, z_1..z_{n_obs})` for binary data.
    pub fn augmented_target(&self, n_obs: usize) -> AugmentedTarget<'_> {
        assert!(self.spec.link.is_binary(), "augmented target needs a binary link");
        assert!(n_obs <= self.n());
        AugmentedTarget { model: self, n_obs }
    }

    /// Prior terms and their gradient. Returns the log density and leaves
    /// `dphi` holding `∂/∂Φ` of the prior (symmetric convention), `dpsi`
    /// holding `∂/∂ψ²`.
    fn prior_with_grad(&self, ctx: &Ctx, grad: &mut [f64], dphi: &mut DMatrix<f64>, dpsi: &mut [f64]) -> f64 {
        let spec = &self.spec;
        let th = &ctx.theta;
        let mut lp = 0.0;
        for (idx, &(j, f)) in self.layout.loading_cells.iter().enumerate() {
            let sd = match spec.cell(j, f) {
                LoadingCell::ApproxZero => spec.approx_zero_sd,
                _ => spec.loading_prior_sd,
            };
            let x = th.lambda[(j, f)];
            lp += normal_logpdf(x, 0.0, sd);
            grad[idx] -= x / (sd * sd);
        }
        let ao = self.layout.alpha_offset();
        let sd = spec.intercept_prior_sd;
        for j in 0..spec.p {
            let x = th.alpha[j];
            lp += normal_logpdf(x, 0.0, sd);
            grad[ao + j] -= x / (sd * sd);
        }
        match &spec.factor_cov_mode {
            FactorCovMode::Identity => {}
            FactorCovMode::LkjCorrelation { eta } => {
                // (η − 1) log det R with det R = Π L_ii²; gradient added on L later
                let m = self.layout.phi_dim;
                let log_det: f64 = (0..m).map(|i| 2.0 * ctx.phi_lower[(i, i)].ln()).sum();
                lp += (eta - 1.0) * log_det - self.lkj_log_norm;
            }
            FactorCovMode::InverseWishart { df, .. } => {
                let (scale, scale_chol) = self.iw_scale.as_ref().expect("inverse-Wishart scale");
                let phi_chol = ctx.phi_chol.as_ref().expect("covariance factor");
                lp += inv_wishart_logpdf_chol(phi_chol, scale_chol, *df);
                let m = self.layout.phi_dim as f64;
                let inv = phi_chol.inverse();
                let t = &inv * scale * &inv;
                *dphi += inv * (-(df + m + 1.0) / 2.0) + t * 0.5;
            }
        }
        if let (ResidualMode::DiagonalInvGamma { c0 }, Some(rates)) = (spec.residual_mode, &self.rates) {
            for j in 0..spec.p {
                let x = th.psi_diag[j];
                lp += inv_gamma_logpdf(x, c0, rates[j]);
                dpsi[j] += -(c0 + 1.0) / x + rates[j] / (x * x);
            }
        }
        lp
    }

    /// Push `∂/∂Φ`, `∂/∂ψ²` through the transforms, adding the Jacobian
    /// gradient.
    fn finish_grad(&self, ctx: &Ctx, x: &[f64], grad: &mut [f64], dphi: &DMatrix<f64>, dpsi: &[f64]) {
        let layout = &self.layout;
        let m = layout.phi_dim;
        let po = layout.phi_offset();
        match layout.phi_param {
            PhiParam::Identity => {}
            PhiParam::Covariance => {
                let gl = dphi * &ctx.phi_lower * 2.0;
                for i in 0..m {
                    for j in 0..i {
                        grad[po + i * (i + 1) / 2 + j] += gl[(i, j)];
                    }
                    grad[po + i * (i + 1) / 2 + i] += gl[(i, i)] * ctx.phi_lower[(i, i)] + (m - i + 1) as f64;
                }
            }
            PhiParam::Correlation => {
                let mut gl = dphi * &ctx.phi_lower * 2.0;
                if let FactorCovMode::LkjCorrelation { eta } = self.spec.factor_cov_mode {
                    for i in 0..m {
                        gl[(i, i)] += 2.0 * (eta - 1.0) / ctx.phi_lower[(i, i)];
                    }
                }
                let y = &x[po..po + layout.n_phi];
                for (q, t) in corr_cholesky_tangents(y, m, &ctx.phi_lower).into_iter().enumerate() {
                    let mut g = t.d_logjac;
                    for (j, d) in t.d_row.iter().enumerate() {
                        g += gl[(t.row, j)] * d;
                    }
                    grad[po + q] += g;
                }
            }
        }
        if layout.has_psi {
            let so = layout.psi_offset();
            for j in 0..layout.p {
                grad[so + j] += dpsi[j] * ctx.theta.psi_diag[j] + 1.0;
            }
        }
    }

    fn context(&self, x: &[f64]) -> Option<Ctx> {
        let u = unpack(&self.spec, &self.layout, &x[..self.layout.dim()]);
        if !u.log_jacobian.is_finite() {
            return None;
        }
        let phi_chol = match self.layout.phi_param {
            PhiParam::Covariance => Some(CholeskyFactor::from_lower(u.phi_lower.clone()).ok()?),
            PhiParam::Correlation => {
                if (0..self.layout.phi_dim).any(|i| !(u.phi_lower[(i, i)] > 0.0)) {
                    return None;
                }
                Some(CholeskyFactor::from_lower(u.phi_lower.clone()).ok()?)
            }
            PhiParam::Identity => None,
        };
        Some(Ctx {
            theta: u.theta,
            phi_lower: u.phi_lower,
            phi_chol,
            log_jacobian: u.log_jacobian,
        })
    }
}

struct Ctx {
    theta: Theta,
    phi_lower: DMatrix<f64>,
    phi_chol: Option<CholeskyFactor>,
    log_jacobian: f64,
}

fn fail(grad: &mut [f64]) -> f64 {
    grad.fill(0.0);
    f64::NEG_INFINITY
}

/// Continuous-data posterior over `θ` with factors marginalised out, using
/// centred sufficient statistics of the processed prefix.
pub struct MarginalTarget<'a> {
    model: &'a FactorModel,
    n_obs: usize,
    sum1: DVector<f64>,
    sum2: DMatrix<f64>,
}

impl MarginalTarget<'_> {
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }
}

impl GradientTarget for MarginalTarget<'_> {
    fn dim(&self) -> usize {
        self.model.layout.dim()
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let model = self.model;
        let spec = &model.spec;
        let (p, k) = (spec.p, spec.k);
        grad.fill(0.0);
        let Some(ctx) = model.context(x) else { return fail(grad) };
        let m = model.layout.phi_dim;
        let mut dphi = DMatrix::zeros(m, m);
        let mut dpsi = vec![0.0; p];
        let mut lp = ctx.log_jacobian + model.prior_with_grad(&ctx, grad, &mut dphi, &mut dpsi);

        if self.n_obs > 0 {
            let th = &ctx.theta;
            let sigma = th.marginal_cov(spec);
            let Ok(chol) = CholeskyFactor::new_strict(&sigma) else { return fail(grad) };
            let sinv = chol.inverse();
            let n = self.n_obs as f64;
            let at = DVector::from_fn(p, |j, _| th.alpha[j] - model.center[j]);
            let mut s = self.sum2.clone();
            s.ger(-1.0, &at, &self.sum1, 1.0);
            s.ger(-1.0, &self.sum1, &at, 1.0);
            s.ger(n, &at, &at, 1.0);
            let sinv_s = &sinv * &s;
            lp += -0.5 * (n * (p as f64 * LN_2PI + chol.log_det()) + sinv_s.trace());
            let g = (&sinv_s * &sinv - &sinv * n) * 0.5;
            let da = &sinv * (&self.sum1 - &at * n);
            let ao = model.layout.alpha_offset();
            for j in 0..p {
                grad[ao + j] += da[j];
            }
            if spec.is_saturated() {
                let sd = th.psi_diag.map(f64::sqrt);
                for a in 0..p {
                    let mut acc = 0.0;
                    for b in 0..p {
                        dphi[(a, b)] += g[(a, b)] * sd[a] * sd[b];
                        acc += g[(a, b)] * th.phi[(a, b)] * sd[b];
                    }
                    dpsi[a] += acc / sd[a];
                }
            } else {
                let dl = &g * &th.lambda * &th.phi * 2.0;
                for (idx, &(j, f)) in model.layout.loading_cells.iter().enumerate() {
                    grad[idx] += dl[(j, f)];
                }
                if m > 0 && model.layout.phi_param != PhiParam::Identity {
                    dphi += th.lambda.transpose() * &g * &th.lambda;
                }
                for j in 0..p {
                    dpsi[j] += g[(j, j)];
                }
            }
            let _ = k;
        }
        model.finish_grad(&ctx, x, grad, &dphi, &dpsi);
        if !lp.is_finite() {
            return fail(grad);
        }
        lp
    }
}

/// Binary-data joint posterior over `(θ, z_1..z_n)`. The latent rows follow
/// the `θ` coordinates in the flat vector.
pub struct AugmentedTarget<'a> {
    model: &'a FactorModel,
    n_obs: usize,
}

impl AugmentedTarget<'_> {
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }
}

impl GradientTarget for AugmentedTarget<'_> {
    fn dim(&self) -> usize {
        self.model.layout.dim() + self.n_obs * self.model.spec.k
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let model = self.model;
        let spec = &model.spec;
        let (p, k) = (spec.p, spec.k);
        let d = model.layout.dim();
        grad.fill(0.0);
        let Some(ctx) = model.context(x) else { return fail(grad) };
        let m = model.layout.phi_dim;
        let mut dphi = DMatrix::zeros(m, m);
        let mut dpsi = vec![];
        let mut lp = ctx.log_jacobian + model.prior_with_grad(&ctx, grad, &mut dphi, &mut dpsi);
        let th = &ctx.theta;
        let z = &x[d..];
        let n = self.n_obs;

        // latent prior
        match &ctx.phi_chol {
            None => {
                for (q, zq) in z.iter().enumerate() {
                    lp += -0.5 * (zq * zq + LN_2PI);
                    grad[d + q] -= zq;
                }
            }
            Some(chol) => {
                let inv = chol.inverse();
                let mut zz = DMatrix::zeros(k, k);
                for i in 0..n {
                    let zi = DVector::from_column_slice(&z[i * k..(i + 1) * k]);
                    let w = &inv * &zi;
                    lp += -0.5 * (zi.dot(&w) + k as f64 * LN_2PI + chol.log_det());
                    for f in 0..k {
                        grad[d + i * k + f] -= w[f];
                    }
                    zz.ger(1.0, &zi, &zi, 1.0);
                }
                dphi += (&inv * zz * &inv - &inv * n as f64) * 0.5;
            }
        }

        // likelihood
        let vals = model.data.values();
        let mut dl = DMatrix::<f64>::zeros(p, k);
        let ao = model.layout.alpha_offset();
        for i in 0..n {
            let zi = &z[i * k..(i + 1) * k];
            for j in 0..p {
                let mut eta = th.alpha[j];
                for f in 0..k {
                    eta += th.lambda[(j, f)] * zi[f];
                }
                let y = vals[(i, j)];
                let (l, r) = bernoulli_loglik_and_d(spec.link, eta, y);
                lp += l;
                grad[ao + j] += r;
                for f in 0..k {
                    dl[(j, f)] += r * zi[f];
                    grad[d + i * k + f] += th.lambda[(j, f)] * r;
                }
            }
        }
        for (idx, &(j, f)) in model.layout.loading_cells.iter().enumerate() {
            grad[idx] += dl[(j, f)];
        }
        model.finish_grad(&ctx, x, grad, &dphi, &dpsi);
        if !lp.is_finite() {
            return fail(grad);
        }
        lp
    }
}

/// Unconstrained log posterior over a data prefix, summing point terms in
/// order. `latent` must be given exactly for binary links.
pub fn posterior_logpdf_unconstrained(
    spec: &ModelSpec,
    v: &[f64],
    data_prefix: &Dataset,
    latent: Option<&LatentBlock>,
    empirical_cov: Option<&DMatrix<f64>>,
) -> Result<f64> {
    let layout = ParamLayout::new(spec);
    if v.len() != layout.dim() {
        return Err(Error::DimensionMismatch {
            what: "unconstrained vector",
            expected: layout.dim(),
            found: v.len(),
        });
    }
    let u = unpack(spec, &layout, v);
    let prior = super::likelihood::prior_logpdf(spec, &u.theta, empirical_cov)?;
    let mut acc = prior + u.log_jacobian;
    match (spec.link.is_binary(), latent) {
        (false, Some(_)) => {
            return Err(Error::Contract("latent values given for a continuous model".into()))
        }
        (false, None) => {
            for i in 0..data_prefix.n() {
                acc += marginal_loglik_point(spec, &u.theta, &data_prefix.row(i))?;
            }
        }
        (true, None) if data_prefix.n() > 0 => {
            return Err(Error::Contract("binary models need the latent block".into()))
        }
        (true, None) => {}
        (true, Some(block)) => {
            if block.rows() != data_prefix.n() {
                return Err(Error::DimensionMismatch {
                    what: "latent rows",
                    expected: data_prefix.n(),
                    found: block.rows(),
                });
            }
            let phi_chol = CholeskyFactor::new(&u.theta.phi)?;
            for i in 0..data_prefix.n() {
                let y = data_prefix.row(i);
                acc += mvn_logpdf_centered(block.row(i), &phi_chol);
                acc += super::likelihood::augmented_loglik_point(spec, &u.theta, block.row(i), &y)?;
            }
        }
    }
    Ok(acc)
}
