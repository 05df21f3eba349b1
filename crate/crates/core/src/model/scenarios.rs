use nalgebra::{DMatrix, DVector};

use super::likelihood::success_prob;
use super::spec::{DataKind, Dataset, Link, ModelSpec, Theta};
use crate::distributions::{sample_mvn, CholeskyFactor, RngStream};
use crate::error::{Error, Result};

/// Data-generating processes used in the simulation studies.
#[derive(Clone, Debug)]
pub enum Scenario {
    /// Two factors, six items, simple structure.
    Continuous1,
    /// As `Continuous1` with three cross-loadings of 0.3.
    Continuous2,
    /// One factor, six binary items, logit link.
    Binary1,
    Custom(ModelSpec, Theta),
}

pub const CONTINUOUS_N: usize = 200;
pub const BINARY_N: usize = 100;

fn continuous_theta(lambda: DMatrix<f64>) -> Theta {
    Theta {
        alpha: DVector::zeros(6),
        lambda,
        phi: DMatrix::from_row_slice(2, 2, &[0.65, 0.13, 0.13, 0.65]),
        psi_diag: DVector::from_vec(vec![0.35, 0.58, 0.58, 0.35, 0.58, 0.58]),
    }
}

/// The exact-zero spec and true parameters of the first continuous scenario.
pub fn continuous1_truth() -> (ModelSpec, Theta) {
    let lambda = DMatrix::from_row_slice(
        6,
        2,
        &[1.0, 0.0, 0.8, 0.0, 0.8, 0.0, 0.0, 1.0, 0.0, 0.8, 0.0, 0.8],
    );
    let spec = ModelSpec::exact_zero(6, 2, Link::Identity).expect("valid spec");
    (spec, continuous_theta(lambda))
}

/// True parameters of the second continuous scenario, paired with the
/// approximate-zero spec (the exact-zero spec cannot hold the cross-loadings).
pub fn continuous2_truth() -> (ModelSpec, Theta) {
    let lambda = DMatrix::from_row_slice(
        6,
        2,
        &[1.0, 0.0, 0.8, 0.3, 0.8, 0.0, 0.0, 1.0, 0.3, 0.8, 0.3, 0.8],
    );
    let spec = ModelSpec::approx_zero(6, 2, Link::Identity).expect("valid spec");
    (spec, continuous_theta(lambda))
}

pub fn binary1_truth() -> (ModelSpec, Theta) {
    let spec = ModelSpec::exploratory(6, 1, Link::Logit).expect("valid spec");
    let theta = Theta {
        alpha: DVector::from_vec(vec![-0.53, 0.35, -1.4, -1.4, -0.96, -2.33]),
        lambda: DMatrix::from_element(6, 1, 1.0),
        phi: DMatrix::identity(1, 1),
        psi_diag: DVector::zeros(0),
    };
    (spec, theta)
}

impl Scenario {
    pub fn truth(&self) -> (ModelSpec, Theta) {
        match self {
            Scenario::Continuous1 => continuous1_truth(),
            Scenario::Continuous2 => continuous2_truth(),
            Scenario::Binary1 => binary1_truth(),
            Scenario::Custom(s, t) => (s.clone(), t.clone()),
        }
    }

    pub fn default_n(&self) -> usize {
        match self {
            Scenario::Binary1 => BINARY_N,
            _ => CONTINUOUS_N,
        }
    }
}

/// Simulate `n` rows: `z ~ N(0, Φ)`, then `y = α + Λz + ε` or Bernoulli
/// draws through the link.
pub fn simulate_scenario(which: &Scenario, n: usize, rng: &mut RngStream) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Data("cannot simulate an empty dataset".into()));
    }
    let (spec, theta) = which.truth();
    spec.validate()?;
    if spec.is_saturated() {
        let chol = CholeskyFactor::new(&theta.marginal_cov(&spec))?;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| sample_mvn(&theta.alpha, &chol, rng).iter().copied().collect())
            .collect();
        return Dataset::from_rows(&rows, DataKind::Continuous);
    }
    let (p, k) = (spec.p, spec.k);
    let phi_chol = CholeskyFactor::new(&theta.phi)?;
    let zero = DVector::zeros(k);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let z = sample_mvn(&zero, &phi_chol, rng);
        let eta = &theta.alpha + &theta.lambda * &z;
        let row: Vec<f64> = match spec.link {
            Link::Identity => (0..p)
                .map(|j| eta[j] + theta.psi_diag[j].sqrt() * rng.standard_normal())
                .collect(),
            link => (0..p)
                .map(|j| if rng.uniform() < success_prob(link, eta[j]) { 1.0 } else { 0.0 })
                .collect(),
        };
        rows.push(row);
    }
    let kind = if spec.link.is_binary() {
        DataKind::Binary
    } else {
        DataKind::Continuous
    };
    Dataset::from_rows(&rows, kind)
}
