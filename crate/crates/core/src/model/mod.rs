//! Factor-model definitions, likelihoods, priors and transforms.

pub mod likelihood;
pub mod scenarios;
pub mod spec;
pub mod target;
pub mod transform;

pub use likelihood::{
    augmented_loglik_point, fix_loading_signs, latent_conditional_posterior, marginal_loglik_point,
    prior_logpdf, prior_sample,
};
pub use scenarios::{simulate_scenario, Scenario};
pub use spec::{
    DataKind, Dataset, FactorCovMode, LatentBlock, Link, LoadingCell, ModelFamily, ModelSpec, ResidualMode, Theta,
};
pub use target::{posterior_logpdf_unconstrained, AugmentedTarget, FactorModel, MarginalTarget};
pub use transform::{log_jacobian, to_constrained, to_unconstrained, ParamLayout, UnconstrainedTheta};
