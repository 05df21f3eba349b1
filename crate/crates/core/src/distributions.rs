//! Probability primitives shared by the model, sampler and engine modules.
//!
//! Everything here works on the log scale. Matrices are small (at most a few
//! dozen rows), so plain `nalgebra` dynamic storage is used throughout.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal jitter added once when a factorization fails.
pub const CHOLESKY_JITTER: f64 = 1e-9;

/// Lower Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
    log_det: f64,
}

impl CholeskyFactor {
    /// Factor `m`, retrying once with `1e-9 * I` added to the diagonal.
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                what: "cholesky (square matrix)",
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        if let Some(f) = Self::try_factor(m) {
            return Ok(f);
        }
        let jittered = m + DMatrix::identity(m.nrows(), m.nrows()) * CHOLESKY_JITTER;
        Self::try_factor(&jittered).ok_or(Error::NotPositiveDefinite(None))
    }

    /// Factor without the jitter retry.
    pub fn new_strict(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                what: "cholesky (square matrix)",
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        Self::try_factor(m).ok_or(Error::NotPositiveDefinite(None))
    }

    fn try_factor(m: &DMatrix<f64>) -> Option<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let chol = nalgebra::linalg::Cholesky::new(m.clone())?;
        let lower = chol.unpack();
        let log_det = 2.0 * lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        log_det.is_finite().then_some(Self { lower, log_det })
    }

    /// Wrap an existing lower-triangular factor. The strict upper triangle is
    /// ignored; the diagonal must be strictly positive.
    pub fn from_lower(lower: DMatrix<f64>) -> Result<Self> {
        if lower.nrows() != lower.ncols() {
            return Err(Error::DimensionMismatch {
                what: "cholesky factor (square matrix)",
                expected: lower.nrows(),
                found: lower.ncols(),
            });
        }
        let lower = lower.lower_triangle();
        if lower.diagonal().iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::Contract(
                "cholesky factor diagonal must be strictly positive".into(),
            ));
        }
        let log_det = 2.0 * lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self { lower, log_det })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            lower: DMatrix::identity(d, d),
            log_det: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Log-determinant of the factored matrix (not of the factor).
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }

    /// `L⁻¹ b`
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        self.solve_lower_in_place(out.as_mut_slice());
        out
    }

    pub(crate) fn solve_lower_in_place(&self, x: &mut [f64]) {
        let l = &self.lower;
        for i in 0..x.len() {
            let mut acc = x[i];
            for j in 0..i {
                acc -= l[(i, j)] * x[j];
            }
            x[i] = acc / l[(i, i)];
        }
    }

    pub(crate) fn solve_upper_in_place(&self, x: &mut [f64]) {
        let l = &self.lower;
        let n = x.len();
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in (i + 1)..n {
                acc -= l[(j, i)] * x[j];
            }
            x[i] = acc / l[(i, i)];
        }
    }

    /// `(L Lᵀ)⁻¹ b`
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        self.solve_lower_in_place(out.as_mut_slice());
        self.solve_upper_in_place(out.as_mut_slice());
        out
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut inv = DMatrix::zeros(d, d);
        let mut col = vec![0.0; d];
        for c in 0..d {
            col.iter_mut().for_each(|v| *v = 0.0);
            col[c] = 1.0;
            self.solve_lower_in_place(&mut col);
            self.solve_upper_in_place(&mut col);
            for r in 0..d {
                inv[(r, c)] = col[r];
            }
        }
        // symmetrize away rounding
        let t = inv.transpose();
        (inv + t) * 0.5
    }

    /// `‖L⁻¹ x‖²`
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let mut u = x.to_vec();
        self.solve_lower_in_place(&mut u);
        u.iter().map(|v| v * v).sum()
    }
}

/// Seeded, replayable random stream.
///
/// Backed by ChaCha8 with an explicit stream id, so `(seed, stream_id)`
/// pairs give independent sequences and `(seed, stream_id, counter)`
/// reproduces a position exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    /// Reconstruct a stream at a recorded position.
    pub fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut s = Self::new(seed, stream_id);
        s.rng.set_word_pos(counter as u128);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    /// A fresh stream sharing this seed, with an id derived from this
    /// stream's id and `tag`.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, derive_stream_id(&[self.stream_id, tag]))
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.random::<f64>()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[derive(Serialize, Deserialize)]
struct RngStreamState {
    seed: u64,
    stream_id: u64,
    counter: u64,
}

impl Serialize for RngStream {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RngStreamState {
            seed: self.seed,
            stream_id: self.stream_id,
            counter: self.counter(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RngStream {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let st = RngStreamState::deserialize(d)?;
        Ok(RngStream::at(st.seed, st.stream_id, st.counter))
    }
}

/// Mix a tuple of integers into a 64-bit stream id (SplitMix64 finalizer).
pub fn derive_stream_id(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Log of the multivariate gamma function Γ_d(a).
pub fn ln_multigamma(d: usize, a: f64) -> f64 {
    let df = d as f64;
    let mut acc = df * (df - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for j in 1..=d {
        acc += ln_gamma(a + (1.0 - j as f64) / 2.0);
    }
    acc
}

pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * (LN_2PI + z * z) - sd.ln()
}

pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov_chol: &CholeskyFactor) -> Result<f64> {
    let d = cov_chol.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            what: "mvn_logpdf x",
            expected: d,
            found: x.len(),
        });
    }
    if mean.len() != d {
        return Err(Error::DimensionMismatch {
            what: "mvn_logpdf mean",
            expected: d,
            found: mean.len(),
        });
    }
    let r: Vec<f64> = x.iter().zip(mean.iter()).map(|(a, b)| a - b).collect();
    Ok(mvn_logpdf_centered(&r, cov_chol))
}

/// Log density of `N(0, LLᵀ)` at an already-centred point.
pub(crate) fn mvn_logpdf_centered(r: &[f64], cov_chol: &CholeskyFactor) -> f64 {
    let q = cov_chol.mahalanobis_sq(r);
    -0.5 * (r.len() as f64 * LN_2PI + cov_chol.log_det() + q)
}

/// Log of the LKJ normalizing constant: `log ∫ det(R)^(η−1) dR`.
pub fn lkj_log_normalizer(d: usize, eta: f64) -> f64 {
    let mut acc = 0.0;
    let df = d as f64;
    for k in 1..d {
        let kf = k as f64;
        let m = df - kf;
        acc += (2.0 * eta - 2.0 + m) * m * std::f64::consts::LN_2;
        let b = eta + (m - 1.0) / 2.0;
        acc += m * ln_beta(b, b);
    }
    acc
}

/// LKJ(η) log density of the correlation matrix factored by `corr_chol`.
pub fn lkj_logpdf(corr_chol: &CholeskyFactor, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::Contract(format!("LKJ shape must be positive, got {eta}")));
    }
    let l = corr_chol.lower();
    for i in 0..corr_chol.dim() {
        let diag: f64 = l.row(i).iter().map(|v| v * v).sum();
        if (diag - 1.0).abs() > 1e-8 {
            return Err(Error::Contract(format!(
                "LKJ argument is not a correlation matrix (diagonal {i} = {diag})"
            )));
        }
    }
    Ok((eta - 1.0) * corr_chol.log_det() - lkj_log_normalizer(corr_chol.dim(), eta))
}

/// Inverse-Wishart log density with `E[X] = scale / (df − d − 1)`.
pub fn inv_wishart_logpdf(cov: &DMatrix<f64>, scale: &DMatrix<f64>, df: f64) -> Result<f64> {
    let d = cov.nrows();
    if scale.nrows() != d || scale.ncols() != d || cov.ncols() != d {
        return Err(Error::DimensionMismatch {
            what: "inverse Wishart scale",
            expected: d,
            found: scale.nrows(),
        });
    }
    if !(df > d as f64 - 1.0) {
        return Err(Error::Contract(format!(
            "inverse Wishart needs df > d - 1 (df = {df}, d = {d})"
        )));
    }
    let cov_chol = CholeskyFactor::new_strict(cov)
        .map_err(|_| Error::NotPositiveDefinite(Some("inverse Wishart argument".into())))?;
    let scale_chol = CholeskyFactor::new_strict(scale)
        .map_err(|_| Error::NotPositiveDefinite(Some("inverse Wishart scale".into())))?;
    Ok(inv_wishart_logpdf_chol(&cov_chol, &scale_chol, df))
}

pub(crate) fn inv_wishart_logpdf_chol(cov: &CholeskyFactor, scale: &CholeskyFactor, df: f64) -> f64 {
    let d = cov.dim();
    let dd = d as f64;
    // tr(S X⁻¹) = ‖L_X⁻¹ L_S‖²_F
    let ls = scale.lower();
    let mut trace = 0.0;
    for c in 0..d {
        let mut col: Vec<f64> = ls.column(c).iter().copied().collect();
        cov.solve_lower_in_place(&mut col);
        trace += col.iter().map(|v| v * v).sum::<f64>();
    }
    0.5 * df * scale.log_det()
        - 0.5 * df * dd * std::f64::consts::LN_2
        - ln_multigamma(d, 0.5 * df)
        - 0.5 * (df + dd + 1.0) * cov.log_det()
        - 0.5 * trace
}

/// Inverse-gamma log density (shape/rate). Returns −∞ for `x ≤ 0`.
pub fn inv_gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

pub fn sample_mvn(mean: &DVector<f64>, cov_chol: &CholeskyFactor, rng: &mut RngStream) -> DVector<f64> {
    let d = mean.len();
    let xi = DVector::from_fn(d, |_, _| rng.standard_normal());
    mean + cov_chol.lower() * xi
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let s: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

pub fn log_mean_exp(v: &[f64]) -> f64 {
    log_sum_exp(v) - (v.len() as f64).ln()
}

/// `log(Σ wᵢ uᵢ / Σ wᵢ)` from log-weights and log-values.
pub fn weighted_log_mean_exp(logw: &[f64], logu: &[f64]) -> f64 {
    debug_assert_eq!(logw.len(), logu.len());
    let joint: Vec<f64> = logw.iter().zip(logu).map(|(w, u)| w + u).collect();
    log_sum_exp(&joint) - log_sum_exp(logw)
}

/// Normalized weights `exp(logw − max)` scaled to sum to one.
pub fn normalized_weights(logw: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(logw);
    if !lse.is_finite() {
        return Err(Error::DegeneratePopulation { index: 0 });
    }
    Ok(logw.iter().map(|w| (w - lse).exp()).collect())
}

/// Draw `n` ancestor indices i.i.d. with probability proportional to
/// `exp(logw)`.
pub fn multinomial_resample(logw: &[f64], n: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    let w = normalized_weights(logw)?;
    let mut cdf = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for wi in &w {
        acc += wi;
        cdf.push(acc);
    }
    let total = acc;
    let last_positive = w.iter().rposition(|v| *v > 0.0).unwrap_or(0);
    let out = (0..n)
        .map(|_| {
            let u = rng.uniform() * total;
            let idx = cdf.partition_point(|c| *c <= u);
            // rounding can push u past the final cumulative sum
            idx.min(last_positive)
        })
        .collect::<Vec<_>>();
    Ok(out)
}
