//! Bijections between `Theta` and a flat unconstrained vector.
//!
//! Layout: estimated loadings (row-major over the pattern), intercepts,
//! `Φ` parameters, then `log ψ_j²`.
//!
//! * correlation `Φ`: canonical partial correlations `tanh(y)` mapped to a
//!   Cholesky factor with unit rows;
//! * covariance `Φ`: log-Cholesky (`log` on the diagonal);
//! * residual variances: `ψ_j² = exp(v)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::spec::{FactorCovMode, ModelSpec, ResidualMode, Theta};
use crate::distributions::CholeskyFactor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhiParam {
    Identity,
    Correlation,
    Covariance,
}

/// Maps slices of an unconstrained vector onto `Theta` parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub p: usize,
    pub k: usize,
    /// `(row, col)` of every estimated loading, in vector order.
    pub loading_cells: Vec<(usize, usize)>,
    pub phi_dim: usize,
    pub phi_param: PhiParam,
    pub n_phi: usize,
    pub has_psi: bool,
}

impl ParamLayout {
    pub fn new(spec: &ModelSpec) -> Self {
        let mut loading_cells = Vec::new();
        for j in 0..spec.p {
            for f in 0..spec.k {
                if spec.cell(j, f).is_estimated() {
                    loading_cells.push((j, f));
                }
            }
        }
        let phi_dim = spec.phi_dim();
        let (phi_param, n_phi) = match spec.factor_cov_mode {
            FactorCovMode::Identity => (PhiParam::Identity, 0),
            FactorCovMode::LkjCorrelation { .. } => {
                (PhiParam::Correlation, phi_dim * phi_dim.saturating_sub(1) / 2)
            }
            FactorCovMode::InverseWishart { .. } => {
                (PhiParam::Covariance, phi_dim * (phi_dim + 1) / 2)
            }
        };
        Self {
            p: spec.p,
            k: spec.k,
            loading_cells,
            phi_dim,
            phi_param,
            n_phi,
            has_psi: matches!(spec.residual_mode, ResidualMode::DiagonalInvGamma { .. }),
        }
    }

    pub fn n_loadings(&self) -> usize {
        self.loading_cells.len()
    }

    pub fn alpha_offset(&self) -> usize {
        self.n_loadings()
    }

    pub fn phi_offset(&self) -> usize {
        self.alpha_offset() + self.p
    }

    pub fn psi_offset(&self) -> usize {
        self.phi_offset() + self.n_phi
    }

    pub fn dim(&self) -> usize {
        self.psi_offset() + if self.has_psi { self.p } else { 0 }
    }

    /// Names of the unconstrained coordinates.
    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .loading_cells
            .iter()
            .map(|(j, f)| format!("lambda[{},{}]", j + 1, f + 1))
            .collect();
        out.extend((1..=self.p).map(|j| format!("alpha[{j}]")));
        for a in 0..self.phi_dim {
            for b in 0..=a {
                match self.phi_param {
                    PhiParam::Identity => {}
                    PhiParam::Correlation if a != b => out.push(format!("atanh_cpc[{},{}]", a + 1, b + 1)),
                    PhiParam::Correlation => {}
                    PhiParam::Covariance => out.push(format!("logchol_phi[{},{}]", a + 1, b + 1)),
                }
            }
        }
        if self.has_psi {
            out.extend((1..=self.p).map(|j| format!("log_psi[{j}]")));
        }
        out
    }
}

/// A flat unconstrained point together with its layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnconstrainedTheta {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

/// Index of strictly-lower entry `(i, j)`, `j < i`, in row-major order.
fn lower_strict_index(i: usize, j: usize) -> usize {
    i * (i - 1) / 2 + j
}

/// Index of lower entry `(i, j)`, `j <= i`, in row-major order.
fn lower_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Correlation Cholesky factor from unconstrained CPCs, with the log
/// Jacobian of `y ↦ strict-lower(R)`.
pub fn corr_cholesky_from_unconstrained(y: &[f64], m: usize) -> (DMatrix<f64>, f64) {
    let mut l = DMatrix::zeros(m, m);
    let mut logjac = 0.0;
    if m == 0 {
        return (l, 0.0);
    }
    l[(0, 0)] = 1.0;
    for i in 1..m {
        let mut sum_sq: f64 = 0.0;
        for j in 0..i {
            let z = y[lower_strict_index(i, j)].tanh();
            logjac += (1.0 - z * z).ln();
            let w = if j == 0 {
                z
            } else {
                logjac += 0.5 * (1.0 - sum_sq).ln();
                z * (1.0 - sum_sq).sqrt()
            };
            l[(i, j)] = w;
            sum_sq += w * w;
        }
        l[(i, i)] = (1.0 - sum_sq).max(0.0).sqrt();
    }
    for i in 0..m {
        logjac += (m - 1 - i) as f64 * l[(i, i)].ln();
    }
    (l, logjac)
}

/// Tangents of the correlation map: for each unconstrained coordinate `q`,
/// the derivative of row `i(q)` of the factor (only that row moves) and of
/// the log Jacobian.
pub(crate) struct CorrTangent {
    pub row: usize,
    pub d_row: Vec<f64>,
    pub d_logjac: f64,
}

pub(crate) fn corr_cholesky_tangents(y: &[f64], m: usize, l: &DMatrix<f64>) -> Vec<CorrTangent> {
    let mut out = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for i in 1..m {
        for q in 0..i {
            let mut d_row = vec![0.0; m];
            let mut sum_sq: f64 = 0.0;
            let mut d_sum = 0.0;
            let mut d_logjac = 0.0;
            for j in 0..i {
                let z = y[lower_strict_index(i, j)].tanh();
                let dz = if j == q { 1.0 - z * z } else { 0.0 };
                if j == q {
                    d_logjac += -2.0 * z;
                }
                let (w, dw) = if j == 0 {
                    (z, dz)
                } else {
                    let r = (1.0 - sum_sq).sqrt();
                    let dr = -0.5 * d_sum / r;
                    d_logjac += -0.5 * d_sum / (1.0 - sum_sq);
                    (z * r, dz * r + z * dr)
                };
                d_row[j] = dw;
                sum_sq += w * w;
                d_sum += 2.0 * w * dw;
            }
            let lii = l[(i, i)];
            let d_lii = -0.5 * d_sum / lii;
            d_row[i] = d_lii;
            d_logjac += (m - 1 - i) as f64 * d_lii / lii;
            out.push(CorrTangent {
                row: i,
                d_row,
                d_logjac,
            });
        }
    }
    out
}

/// Inverse of [`corr_cholesky_from_unconstrained`].
pub fn unconstrained_from_corr_cholesky(l: &DMatrix<f64>) -> Result<Vec<f64>> {
    let m = l.nrows();
    let mut y = vec![0.0; m * m.saturating_sub(1) / 2];
    for i in 1..m {
        let mut sum_sq: f64 = 0.0;
        for j in 0..i {
            let w = l[(i, j)];
            let z = if j == 0 { w } else { w / (1.0 - sum_sq).sqrt() };
            if !(z.abs() < 1.0) {
                return Err(Error::Contract(format!(
                    "correlation factor entry ({i},{j}) gives partial correlation {z}"
                )));
            }
            y[lower_strict_index(i, j)] = z.atanh();
            sum_sq += w * w;
        }
    }
    Ok(y)
}

/// Covariance Cholesky factor from log-Cholesky coordinates, with the log
/// Jacobian of `y ↦ lower(Φ)`.
pub fn cov_cholesky_from_unconstrained(y: &[f64], m: usize) -> (DMatrix<f64>, f64) {
    let mut l = DMatrix::zeros(m, m);
    let mut logjac = m as f64 * std::f64::consts::LN_2;
    for i in 0..m {
        for j in 0..i {
            l[(i, j)] = y[lower_index(i, j)];
        }
        let v = y[lower_index(i, i)];
        l[(i, i)] = v.exp();
        // (m − i) from Φ = LLᵀ (0-based row), +1 from the exp
        logjac += (m - i + 1) as f64 * v;
    }
    (l, logjac)
}

pub fn unconstrained_from_cov_cholesky(l: &DMatrix<f64>) -> Vec<f64> {
    let m = l.nrows();
    let mut y = vec![0.0; m * (m + 1) / 2];
    for i in 0..m {
        for j in 0..i {
            y[lower_index(i, j)] = l[(i, j)];
        }
        y[lower_index(i, i)] = l[(i, i)].ln();
    }
    y
}

/// Constrained pieces together with the factor of `Φ` and the log Jacobian.
pub(crate) struct Unpacked {
    pub theta: Theta,
    pub phi_lower: DMatrix<f64>,
    pub log_jacobian: f64,
}

pub(crate) fn unpack(spec: &ModelSpec, layout: &ParamLayout, v: &[f64]) -> Unpacked {
    debug_assert_eq!(v.len(), layout.dim());
    let (p, k) = (spec.p, spec.k);
    let mut lambda = DMatrix::from_fn(p, k, |j, f| match spec.cell(j, f) {
        super::spec::LoadingCell::Fixed(c) => c,
        _ => 0.0,
    });
    for (idx, &(j, f)) in layout.loading_cells.iter().enumerate() {
        lambda[(j, f)] = v[idx];
    }
    let alpha = DVector::from_column_slice(&v[layout.alpha_offset()..layout.alpha_offset() + p]);
    let m = layout.phi_dim;
    let phi_slice = &v[layout.phi_offset()..layout.psi_offset()];
    let (phi_lower, mut log_jacobian) = match layout.phi_param {
        PhiParam::Identity => (DMatrix::identity(m, m), 0.0),
        PhiParam::Correlation => corr_cholesky_from_unconstrained(phi_slice, m),
        PhiParam::Covariance => cov_cholesky_from_unconstrained(phi_slice, m),
    };
    let phi = match layout.phi_param {
        PhiParam::Identity => DMatrix::identity(m, m),
        _ => {
            let mut phi = &phi_lower * phi_lower.transpose();
            if layout.phi_param == PhiParam::Correlation {
                for i in 0..m {
                    phi[(i, i)] = 1.0;
                }
            }
            phi
        }
    };
    let psi_diag = if layout.has_psi {
        let s = &v[layout.psi_offset()..layout.psi_offset() + p];
        log_jacobian += s.iter().sum::<f64>();
        DVector::from_iterator(p, s.iter().map(|x| x.exp()))
    } else {
        DVector::zeros(0)
    };
    Unpacked {
        theta: Theta {
            alpha,
            lambda,
            phi,
            psi_diag,
        },
        phi_lower,
        log_jacobian,
    }
}

pub fn to_constrained(spec: &ModelSpec, v: &[f64]) -> Result<Theta> {
    let layout = ParamLayout::new(spec);
    if v.len() != layout.dim() {
        return Err(Error::DimensionMismatch {
            what: "unconstrained vector",
            expected: layout.dim(),
            found: v.len(),
        });
    }
    Ok(unpack(spec, &layout, v).theta)
}

/// Log absolute determinant of `d(constrained)/d(unconstrained)`.
pub fn log_jacobian(spec: &ModelSpec, v: &[f64]) -> Result<f64> {
    let layout = ParamLayout::new(spec);
    if v.len() != layout.dim() {
        return Err(Error::DimensionMismatch {
            what: "unconstrained vector",
            expected: layout.dim(),
            found: v.len(),
        });
    }
    Ok(unpack(spec, &layout, v).log_jacobian)
}

pub fn to_unconstrained(spec: &ModelSpec, theta: &Theta) -> Result<UnconstrainedTheta> {
    let layout = ParamLayout::new(spec);
    let (p, m) = (spec.p, layout.phi_dim);
    if theta.alpha.len() != p || theta.lambda.nrows() != p || theta.lambda.ncols() != spec.k {
        return Err(Error::DimensionMismatch {
            what: "theta",
            expected: p,
            found: theta.alpha.len(),
        });
    }
    if theta.phi.nrows() != m || theta.phi.ncols() != m {
        return Err(Error::DimensionMismatch {
            what: "theta.phi",
            expected: m,
            found: theta.phi.nrows(),
        });
    }
    let mut values = Vec::with_capacity(layout.dim());
    for &(j, f) in &layout.loading_cells {
        values.push(theta.lambda[(j, f)]);
    }
    values.extend(theta.alpha.iter());
    match layout.phi_param {
        PhiParam::Identity => {}
        PhiParam::Correlation => {
            let chol = CholeskyFactor::new_strict(&theta.phi)?;
            values.extend(unconstrained_from_corr_cholesky(chol.lower())?);
        }
        PhiParam::Covariance => {
            let chol = CholeskyFactor::new_strict(&theta.phi)?;
            values.extend(unconstrained_from_cov_cholesky(chol.lower()));
        }
    }
    if layout.has_psi {
        if theta.psi_diag.len() != p {
            return Err(Error::DimensionMismatch {
                what: "theta.psi_diag",
                expected: p,
                found: theta.psi_diag.len(),
            });
        }
        for &s in theta.psi_diag.iter() {
            if !(s > 0.0) {
                return Err(Error::Contract(format!("residual variance must be positive, got {s}")));
            }
            values.push(s.ln());
        }
    }
    Ok(UnconstrainedTheta { values, layout })
}
