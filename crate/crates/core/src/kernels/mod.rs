//! Numerical primitives shared by all estimators: least squares with
//! cluster-robust variance, fixed-effect absorption by alternating
//! within-group demeaning, and binary/multinomial logistic regression via
//! iteratively reweighted least squares.
//!
//! All operations are pure: inputs are immutable and callers may run many
//! fits in parallel.

mod absorb;
mod design;
mod logit;
mod ols;

pub use absorb::{absorb_fixed_effects, absorbed_df, AbsorbResult};
pub use design::{expand_covariates, DesignMatrix};
pub use logit::{binary_logit_fit, multinomial_logit_fit, GpsLink, GpsModel};
pub use ols::{least_squares_fit, least_squares_fit_opts, FitResult, OlsOptions};
