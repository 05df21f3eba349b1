use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    /// Continuous items with Gaussian residuals.
    Identity,
    Logit,
    Probit,
}

impl Link {
    pub fn is_binary(self) -> bool {
        !matches!(self, Link::Identity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LoadingCell {
    Fixed(f64),
    Free,
    /// Free, but with a prior concentrated around zero.
    ApproxZero,
}

impl LoadingCell {
    pub fn is_estimated(self) -> bool {
        !matches!(self, LoadingCell::Fixed(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FactorCovMode {
    Identity,
    LkjCorrelation { eta: f64 },
    /// `E[Φ] = scale / (df − k − 1)`.
    InverseWishart { scale: DMatrix<f64>, df: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ResidualMode {
    /// `ψ_j² ~ InvGamma(c0, (c0 − 1) / (S_y⁻¹)_jj)`
    DiagonalInvGamma { c0: f64 },
    FixedIdentity,
}

/// Which identification scheme a spec follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelFamily {
    /// Leading loadings fixed to one, remaining zeros exact.
    Confirmatory,
    /// As `Confirmatory`, with the zeros relaxed to near-zero priors.
    ApproximateZero,
    /// Lower-triangular loadings with `Φ = I`; signs fixed at read-out.
    Exploratory,
    /// No factors: `y ~ N(α, diag(s) R diag(s))` with `R ~ LKJ`.
    Saturated,
}

pub const DEFAULT_APPROX_ZERO_SD: f64 = 0.1;
pub const DEFAULT_C0: f64 = 2.5;
pub const DEFAULT_INTERCEPT_SD: f64 = 10.0;
pub const DEFAULT_LKJ_ETA: f64 = 2.0;

/// Declarative description of one factor-model variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub p: usize,
    pub k: usize,
    pub link: Link,
    pub family: ModelFamily,
    /// Row-major `p × k` grid.
    pub loading_pattern: Vec<LoadingCell>,
    /// For saturated specs this describes the `p × p` residual correlation.
    pub factor_cov_mode: FactorCovMode,
    pub residual_mode: ResidualMode,
    pub loading_prior_sd: f64,
    pub approx_zero_sd: f64,
    pub intercept_prior_sd: f64,
}

fn default_loading_sd(link: Link) -> f64 {
    match link {
        Link::Identity => 1.0,
        _ => 2.0,
    }
}

fn default_residual(link: Link) -> ResidualMode {
    match link {
        Link::Identity => ResidualMode::DiagonalInvGamma { c0: DEFAULT_C0 },
        _ => ResidualMode::FixedIdentity,
    }
}

/// Contiguous block of items for factor `f` when `p` items are split over `k`.
fn block_of(item: usize, p: usize, k: usize) -> usize {
    (item * k) / p
}

impl ModelSpec {
    /// Exact-zero confirmatory model: items split into `k` contiguous blocks,
    /// the first item of each block loads with fixed value 1, `Φ` is a free
    /// covariance with an inverse-Wishart prior.
    pub fn exact_zero(p: usize, k: usize, link: Link) -> Result<Self> {
        Self::confirmatory(p, k, link, false)
    }

    /// Approximate-zero model: as [`ModelSpec::exact_zero`] with the
    /// cross-loadings given an `N(0, approx_zero_sd²)` prior.
    pub fn approx_zero(p: usize, k: usize, link: Link) -> Result<Self> {
        Self::confirmatory(p, k, link, true)
    }

    fn confirmatory(p: usize, k: usize, link: Link, approx: bool) -> Result<Self> {
        if k == 0 || p < k {
            return Err(Error::Config(format!(
                "confirmatory model needs 1 <= k <= p (p = {p}, k = {k})"
            )));
        }
        let mut pattern = Vec::with_capacity(p * k);
        for j in 0..p {
            let b = block_of(j, p, k);
            let leading = j == 0 || block_of(j - 1, p, k) != b;
            for f in 0..k {
                pattern.push(if f == b {
                    if leading {
                        LoadingCell::Fixed(1.0)
                    } else {
                        LoadingCell::Free
                    }
                } else if approx {
                    LoadingCell::ApproxZero
                } else {
                    LoadingCell::Fixed(0.0)
                });
            }
        }
        let spec = Self {
            p,
            k,
            link,
            family: if approx {
                ModelFamily::ApproximateZero
            } else {
                ModelFamily::Confirmatory
            },
            loading_pattern: pattern,
            factor_cov_mode: FactorCovMode::InverseWishart {
                scale: DMatrix::identity(k, k),
                df: k as f64 + 4.0,
            },
            residual_mode: default_residual(link),
            loading_prior_sd: default_loading_sd(link),
            approx_zero_sd: DEFAULT_APPROX_ZERO_SD,
            intercept_prior_sd: DEFAULT_INTERCEPT_SD,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Exploratory model with `k` factors: lower-triangular loadings with a
    /// free diagonal and `Φ = I`.
    pub fn exploratory(p: usize, k: usize, link: Link) -> Result<Self> {
        if k == 0 || p < k {
            return Err(Error::Config(format!(
                "exploratory model needs 1 <= k <= p (p = {p}, k = {k})"
            )));
        }
        let pattern = (0..p)
            .flat_map(|j| {
                (0..k).map(move |f| {
                    if f > j {
                        LoadingCell::Fixed(0.0)
                    } else {
                        LoadingCell::Free
                    }
                })
            })
            .collect();
        let spec = Self {
            p,
            k,
            link,
            family: ModelFamily::Exploratory,
            loading_pattern: pattern,
            factor_cov_mode: FactorCovMode::Identity,
            residual_mode: default_residual(link),
            loading_prior_sd: default_loading_sd(link),
            approx_zero_sd: DEFAULT_APPROX_ZERO_SD,
            intercept_prior_sd: DEFAULT_INTERCEPT_SD,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Saturated covariance model for continuous items.
    pub fn saturated(p: usize) -> Result<Self> {
        let spec = Self {
            p,
            k: 0,
            link: Link::Identity,
            family: ModelFamily::Saturated,
            loading_pattern: Vec::new(),
            factor_cov_mode: FactorCovMode::LkjCorrelation {
                eta: DEFAULT_LKJ_ETA,
            },
            residual_mode: ResidualMode::DiagonalInvGamma { c0: DEFAULT_C0 },
            loading_prior_sd: 1.0,
            approx_zero_sd: DEFAULT_APPROX_ZERO_SD,
            intercept_prior_sd: DEFAULT_INTERCEPT_SD,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn cell(&self, row: usize, col: usize) -> LoadingCell {
        self.loading_pattern[row * self.k + col]
    }

    pub fn is_saturated(&self) -> bool {
        self.family == ModelFamily::Saturated
    }

    /// Dimension of the matrix described by `factor_cov_mode`.
    pub fn phi_dim(&self) -> usize {
        if self.is_saturated() {
            self.p
        } else {
            self.k
        }
    }

    /// Row holding the sign-defining loading of factor `col`: the cell fixed
    /// to one if there is one, otherwise the first cell that is not an exact
    /// zero.
    pub fn leading_row(&self, col: usize) -> Option<usize> {
        (0..self.p)
            .find(|&j| matches!(self.cell(j, col), LoadingCell::Fixed(v) if v == 1.0))
            .or_else(|| (0..self.p).find(|&j| !matches!(self.cell(j, col), LoadingCell::Fixed(v) if v == 0.0)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.p == 0 {
            return bad("model needs at least one item".into());
        }
        if self.loading_pattern.len() != self.p * self.k {
            return bad(format!(
                "loading pattern has {} cells, expected p*k = {}",
                self.loading_pattern.len(),
                self.p * self.k
            ));
        }
        match (self.link, self.residual_mode) {
            (Link::Identity, ResidualMode::DiagonalInvGamma { c0 }) => {
                if !(c0 > 1.0) {
                    return bad(format!("inverse-gamma shape c0 must exceed 1, got {c0}"));
                }
            }
            (Link::Identity, ResidualMode::FixedIdentity) => {
                return bad("continuous items need DiagonalInvGamma residuals".into())
            }
            (_, ResidualMode::FixedIdentity) => {}
            (_, ResidualMode::DiagonalInvGamma { .. }) => {
                return bad("binary items use FixedIdentity residuals".into())
            }
        }
        for sd in [self.loading_prior_sd, self.approx_zero_sd, self.intercept_prior_sd] {
            if !(sd > 0.0) || !sd.is_finite() {
                return bad(format!("prior standard deviations must be positive, got {sd}"));
            }
        }
        match &self.factor_cov_mode {
            FactorCovMode::Identity => {}
            FactorCovMode::LkjCorrelation { eta } => {
                if !(*eta > 0.0) {
                    return bad(format!("LKJ eta must be positive, got {eta}"));
                }
            }
            FactorCovMode::InverseWishart { scale, df } => {
                let d = self.phi_dim();
                if scale.nrows() != d || scale.ncols() != d {
                    return bad(format!("inverse-Wishart scale must be {d}x{d}"));
                }
                if !(*df > d as f64 - 1.0) {
                    return bad(format!("inverse-Wishart df must exceed {}", d as f64 - 1.0));
                }
            }
        }
        let has_az = self
            .loading_pattern
            .iter()
            .any(|c| matches!(c, LoadingCell::ApproxZero));
        if has_az && self.family != ModelFamily::ApproximateZero {
            return bad("approximate-zero cells are only allowed in approximate-zero models".into());
        }
        match self.family {
            ModelFamily::Saturated => {
                if self.k != 0 || self.link != Link::Identity {
                    return bad("saturated model has k = 0 and continuous items".into());
                }
                if !matches!(self.factor_cov_mode, FactorCovMode::LkjCorrelation { .. }) {
                    return bad("saturated model uses an LKJ residual correlation".into());
                }
            }
            ModelFamily::Exploratory => {
                if self.k == 0 {
                    return bad("exploratory model needs k >= 1".into());
                }
                for j in 0..self.p {
                    for f in (j + 1)..self.k {
                        if !matches!(self.cell(j, f), LoadingCell::Fixed(v) if v == 0.0) {
                            return bad("exploratory loadings must be lower triangular".into());
                        }
                    }
                }
            }
            ModelFamily::Confirmatory | ModelFamily::ApproximateZero => {
                if self.k == 0 {
                    return bad("confirmatory model needs k >= 1".into());
                }
                for f in 0..self.k {
                    let anchored = self.leading_row(f).is_some_and(
                        |j| matches!(self.cell(j, f), LoadingCell::Fixed(v) if v == 1.0),
                    );
                    if !anchored {
                        return bad(format!("factor {} has no leading loading fixed to 1", f + 1));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One parameter point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub alpha: DVector<f64>,
    /// `p × k`
    pub lambda: DMatrix<f64>,
    /// `k × k` factor covariance or correlation; `p × p` residual correlation
    /// for saturated specs.
    pub phi: DMatrix<f64>,
    /// Residual variances `ψ_j²`; empty for binary links.
    pub psi_diag: DVector<f64>,
}

impl Theta {
    /// Model-implied marginal covariance of `y` (identity link).
    pub fn marginal_cov(&self, spec: &ModelSpec) -> DMatrix<f64> {
        if spec.is_saturated() {
            let s = self.psi_diag.map(f64::sqrt);
            DMatrix::from_fn(spec.p, spec.p, |a, b| s[a] * s[b] * self.phi[(a, b)])
        } else {
            let mut sigma = &self.lambda * &self.phi * self.lambda.transpose();
            for j in 0..spec.p {
                sigma[(j, j)] += self.psi_diag[j];
            }
            sigma
        }
    }

    /// Flat `(name, value)` pairs with stable, 1-based names.
    pub fn named_values(&self, spec: &ModelSpec) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for j in 0..spec.p {
            out.push((format!("alpha[{}]", j + 1), self.alpha[j]));
        }
        for j in 0..spec.p {
            for f in 0..spec.k {
                out.push((format!("lambda[{},{}]", j + 1, f + 1), self.lambda[(j, f)]));
            }
        }
        let m = self.phi.nrows();
        let tag = if spec.is_saturated() { "corr" } else { "phi" };
        for a in 0..m {
            for b in 0..=a {
                if matches!(spec.factor_cov_mode, FactorCovMode::Identity)
                    || (a == b && matches!(spec.factor_cov_mode, FactorCovMode::LkjCorrelation { .. }))
                {
                    continue;
                }
                out.push((format!("{tag}[{},{}]", a + 1, b + 1), self.phi[(a, b)]));
            }
        }
        for j in 0..self.psi_diag.len() {
            out.push((format!("psi[{}]", j + 1), self.psi_diag[j]));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Continuous,
    Binary,
}

/// `n × p` observations, one row per observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    values: DMatrix<f64>,
    kind: DataKind,
    item_names: Vec<String>,
}

impl Dataset {
    pub fn new(values: DMatrix<f64>, kind: DataKind, item_names: Vec<String>) -> Result<Self> {
        if item_names.len() != values.ncols() {
            return Err(Error::Data(format!(
                "{} item names for {} columns",
                item_names.len(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in dataset".into()));
        }
        if kind == DataKind::Binary && values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("binary dataset contains values outside {0, 1}".into()));
        }
        Ok(Self {
            values,
            kind,
            item_names,
        })
    }

    /// Rows of `values` with generated item names `y1..yp`.
    pub fn from_rows(rows: &[Vec<f64>], kind: DataKind) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::Data("ragged rows".into()));
        }
        let m = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        Self::new(m, kind, (1..=p).map(|j| format!("y{j}")).collect())
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn item_names(&self) -> &[String] {
        &self.item_names
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.values.row(i).transpose()
    }

    pub fn mean(&self) -> DVector<f64> {
        let n = self.n().max(1) as f64;
        DVector::from_fn(self.p(), |j, _| self.values.column(j).sum() / n)
    }

    /// Sample covariance with divisor `n − 1`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.n();
        let mean = self.mean();
        let centered = DMatrix::from_fn(n, self.p(), |i, j| self.values[(i, j)] - mean[j]);
        (centered.transpose() * &centered) / (n.saturating_sub(1).max(1) as f64)
    }

    /// Centre every column and scale it to unit (n − 1) standard deviation.
    pub fn standardized(&self) -> Result<Self> {
        let mean = self.mean();
        let cov = self.covariance();
        let mut v = self.values.clone();
        for j in 0..self.p() {
            let sd = cov[(j, j)].sqrt();
            if !(sd > 0.0) {
                return Err(Error::Data(format!(
                    "column '{}' is constant and cannot be standardized",
                    self.item_names[j]
                )));
            }
            for i in 0..self.n() {
                v[(i, j)] = (v[(i, j)] - mean[j]) / sd;
            }
        }
        Self::new(v, DataKind::Continuous, self.item_names.clone())
    }

    /// First `n` observations.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            values: self.values.rows(0, n.min(self.n())).into_owned(),
            kind: self.kind,
            item_names: self.item_names.clone(),
        }
    }

    /// Empirical covariance used by the residual-variance prior. Rejects
    /// datasets where it is unusable.
    pub fn empirical_cov_for_prior(&self) -> Result<DMatrix<f64>> {
        if self.n() < 2 {
            return Err(Error::Data("need at least two observations".into()));
        }
        let cov = self.covariance();
        for j in 0..self.p() {
            if !(cov[(j, j)] > 0.0) {
                return Err(Error::Data(format!(
                    "item '{}' has zero variance",
                    self.item_names[j]
                )));
            }
        }
        Ok(cov)
    }
}

/// Latent rows `z_1..z_i` carried by one particle (row-major `i × k`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentBlock {
    k: usize,
    z_rows: Vec<f64>,
}

impl LatentBlock {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            z_rows: Vec::new(),
        }
    }

    pub fn from_flat(k: usize, z_rows: Vec<f64>) -> Self {
        assert!(k == 0 || z_rows.len() % k == 0);
        Self { k, z_rows }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.z_rows.len() / self.k
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.z_rows[i * self.k..(i + 1) * self.k]
    }

    pub fn push(&mut self, z: &[f64]) {
        assert_eq!(z.len(), self.k);
        self.z_rows.extend_from_slice(z);
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.z_rows
    }

    pub fn set_flat(&mut self, z: &[f64]) {
        assert_eq!(z.len(), self.z_rows.len());
        self.z_rows.copy_from_slice(z);
    }
}
