//! OLS and REML-fitted spatial linear mixed models.
//!
//! Covariance parameters are estimated by restricted maximum likelihood
//! with a multi-start Nelder–Mead search; fixed effects are the GLS
//! estimates at the optimum, tested with z statistics. Isotropic and
//! anisotropic fits are compared by AIC.

mod linear;
mod reml;

pub use linear::{
    aic, confidence_interval, fit_ols, gls_beta, wald_test, GlsEstimate, OlsFit, TREATMENT, Z_975,
};
pub use reml::{
    default_starts, fit_reml, fit_reml_default, reml_negloglik, select_model, RemlFit, RemlOptions,
    RemlProblem, StartOutcome,
};
