use std::sync::Arc;

use proptest::prelude::*;

use seqfa_core::distributions::RngStream;
use seqfa_core::hmc::GradientTarget;
use seqfa_core::model::{
    simulate_scenario, to_constrained, to_unconstrained, FactorModel, Link, ModelSpec, ParamLayout, Scenario,
};

fn continuous_specs() -> Vec<(&'static str, ModelSpec)> {
    let mut corr = ModelSpec::exact_zero(6, 2, Link::Identity).unwrap();
    corr.factor_cov_mode = seqfa_core::model::FactorCovMode::LkjCorrelation { eta: 2.0 };
    vec![
        ("EZ", ModelSpec::exact_zero(6, 2, Link::Identity).unwrap()),
        ("AZ", ModelSpec::approx_zero(6, 2, Link::Identity).unwrap()),
        ("EFA3", ModelSpec::exploratory(6, 3, Link::Identity).unwrap()),
        ("LKJ", corr),
        ("SAT", ModelSpec::saturated(6).unwrap()),
    ]
}

/// Max relative error of the analytic gradient against central differences.
fn gradient_error(t: &dyn GradientTarget, x: &[f64]) -> f64 {
    let mut g = vec![0.0; x.len()];
    t.log_density_grad(x, &mut g);
    let mut scratch = vec![0.0; x.len()];
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for q in 0..x.len() {
        let mut up = x.to_vec();
        let mut dn = x.to_vec();
        up[q] += h;
        dn[q] -= h;
        let fd = (t.log_density_grad(&up, &mut scratch) - t.log_density_grad(&dn, &mut scratch)) / (2.0 * h);
        worst = worst.max((g[q] - fd).abs() / fd.abs().max(1.0));
    }
    worst
}

#[test]
fn marginal_gradients_match_finite_differences() {
    let data = Arc::new(simulate_scenario(&Scenario::Continuous2, 50, &mut RngStream::new(5, 0)).unwrap());
    let mut rng = RngStream::new(6, 0);
    for (name, spec) in continuous_specs() {
        let model = FactorModel::new(spec, data.clone()).unwrap();
        let t = model.marginal_target(50);
        for _ in 0..3 {
            let x: Vec<f64> = (0..model.dim()).map(|_| 0.5 * rng.standard_normal()).collect();
            let err = gradient_error(&t, &x);
            assert!(err < 1e-5, "{name}: gradient error {err:.2e}");
        }
    }
}

#[test]
fn augmented_gradients_match_finite_differences() {
    let data = Arc::new(simulate_scenario(&Scenario::Binary1, 20, &mut RngStream::new(7, 0)).unwrap());
    let mut rng = RngStream::new(8, 0);
    for link in [Link::Logit, Link::Probit] {
        for k in [1, 2] {
            let model = FactorModel::new(ModelSpec::exploratory(6, k, link).unwrap(), data.clone()).unwrap();
            let t = model.augmented_target(20);
            let x: Vec<f64> = (0..t.dim()).map(|_| 0.5 * rng.standard_normal()).collect();
            let err = gradient_error(&t, &x);
            assert!(err < 1e-5, "{link:?} k={k}: gradient error {err:.2e}");
        }
    }
}

#[test]
fn prefix_targets_grow_with_the_data() {
    let data = Arc::new(simulate_scenario(&Scenario::Continuous1, 30, &mut RngStream::new(9, 0)).unwrap());
    let model = FactorModel::new(ModelSpec::exact_zero(6, 2, Link::Identity).unwrap(), data).unwrap();
    let x = vec![0.1; model.dim()];
    let mut g = vec![0.0; model.dim()];
    let prior_only = model.marginal_target(0).log_density_grad(&x, &mut g);
    let ten = model.marginal_target(10).log_density_grad(&x, &mut g);
    let prepared = model.prepare(&x);
    let direct: f64 = (0..10).map(|i| model.point_loglik(&prepared, i)).sum();
    assert!((ten - prior_only - direct).abs() < 1e-9 * direct.abs().max(1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unconstrained_round_trip(seed in 0u64..10_000, which in 0usize..5) {
        let (_, spec) = continuous_specs().swap_remove(which);
        let dim = ParamLayout::new(&spec).dim();
        let mut rng = RngStream::new(seed, 1);
        let v: Vec<f64> = (0..dim).map(|_| 1.5 * rng.standard_normal()).collect();
        let theta = to_constrained(&spec, &v).unwrap();
        prop_assert!(theta.psi_diag.iter().all(|&s| s > 0.0));
        let back = to_unconstrained(&spec, &theta).unwrap().values;
        for (a, b) in v.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn factor_covariance_is_positive_definite(seed in 0u64..10_000) {
        let spec = ModelSpec::exact_zero(6, 3, Link::Identity).unwrap();
        let dim = ParamLayout::new(&spec).dim();
        let mut rng = RngStream::new(seed, 2);
        let v: Vec<f64> = (0..dim).map(|_| 2.0 * rng.standard_normal()).collect();
        let theta = to_constrained(&spec, &v).unwrap();
        let eig = theta.phi.clone().symmetric_eigen();
        prop_assert!(eig.eigenvalues.iter().all(|&e| e > 0.0));
        prop_assert!((&theta.phi - theta.phi.transpose()).amax() < 1e-12);
    }
}
