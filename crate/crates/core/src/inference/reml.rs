use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::linear::{aic, fit_ols, wald_test, whitened_gls, GlsEstimate, TREATMENT};
use crate::covariance::{
    cov_cholesky, CovarianceParams, IsoExpParams, ModelKind, Sites, SumMetricParams,
};
use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::par::{map_slice, Execution};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-parameters are confined to `[-LOG_BOUND, LOG_BOUND]` around their
/// scale; the objective is `+inf` outside.
const LOG_BOUND: f64 = 20.0;

/// Nugget floor relative to the sample variance.
const NUGGET_FLOOR: f64 = 1e-8;

/// A spatial linear mixed model `y = Xβ + ε`, `ε ~ N(0, V(θ))`, over fixed
/// sites.
#[derive(Debug, Clone)]
pub struct RemlProblem {
    y: DVector<f64>,
    x: DMatrix<f64>,
    sites: Sites,
}

impl RemlProblem {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, sites: Sites) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || sites.len() != n {
            return Err(Error::InvalidParameter(format!(
                "y has {n} entries, X has {} rows, {} sites",
                x.nrows(),
                sites.len()
            )));
        }
        if n <= x.ncols() {
            return Err(Error::Rank(format!(
                "{n} observations for {} fixed effects",
                x.ncols()
            )));
        }
        Ok(Self { y, x, sites })
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn sites(&self) -> &Sites {
        &self.sites
    }

    /// Negative restricted log-likelihood
    ///
    /// ```text
    /// −ℓ_R = ½[(n−p)·log 2π + log|V| + log|XᵀV⁻¹X| + yᵀPy]
    /// ```
    ///
    /// evaluated through the Cholesky factor of `V`.
    pub fn neg_loglik(&self, params: &CovarianceParams) -> Result<f64> {
        let chol = cov_cholesky(&self.sites, params)?;
        let log_det_v = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let w = whitened_gls(&chol, &self.x, &self.y)?;
        let (n, p) = self.x.shape();
        let value = 0.5 * ((n - p) as f64 * LN_2PI + log_det_v + w.log_det_xtvx + w.quad);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::IllConditioned {
                theta: params.to_vec(),
            })
        }
    }

    /// GLS fixed effects at the given covariance parameters.
    pub fn gls(&self, params: &CovarianceParams) -> Result<GlsEstimate> {
        let chol = cov_cholesky(&self.sites, params)?;
        Ok(whitened_gls(&chol, &self.x, &self.y)?.estimate)
    }

    /// `y − Xβ`
    pub fn residuals(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.y - &self.x * beta
    }

    /// OLS residual variance, floored away from zero. Used to scale the
    /// variance parameters.
    fn variance_scale(&self) -> f64 {
        let ols = fit_ols(&self.y, &self.x).map(|f| f.sigma2).unwrap_or(0.0);
        let level = self.y.iter().map(|v| v * v).sum::<f64>() / self.y.len() as f64;
        ols.max(1e-12 * (level + 1.0))
    }
}

/// Free-function form of [`RemlProblem::neg_loglik`].
pub fn reml_negloglik(
    params: &CovarianceParams,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    sites: &Sites,
) -> Result<f64> {
    RemlProblem::new(y.clone(), x.clone(), sites.clone())?.neg_loglik(params)
}

/// Maps unconstrained log-parameters onto covariance parameters.
///
/// Variances are scaled by the OLS residual variance and ranges by the site
/// extent so that all coordinates are O(1) near sensible values.
#[derive(Debug, Clone, Copy)]
struct LogScale {
    kind: ModelKind,
    var: f64,
    ext_x: f64,
    ext_y: f64,
    ext: f64,
}

impl LogScale {
    fn new(kind: ModelKind, problem: &RemlProblem) -> Self {
        let (ex, ey) = problem.sites.extent();
        let ext = ex.max(ey).max(f64::MIN_POSITIVE);
        Self {
            kind,
            var: problem.variance_scale(),
            ext_x: if ex > 0.0 { ex } else { ext },
            ext_y: if ey > 0.0 { ey } else { ext },
            ext,
        }
    }

    fn floor(&self) -> f64 {
        NUGGET_FLOOR * self.var
    }

    fn to_params(&self, t: &[f64]) -> Option<CovarianceParams> {
        if t.iter().any(|v| !(v.abs() <= LOG_BOUND)) {
            return None;
        }
        let c0 = self.floor() + self.var * t[0].exp();
        Some(match self.kind {
            ModelKind::Isotropic => IsoExpParams {
                c0,
                c1: self.var * t[1].exp(),
                a: self.ext * t[2].exp(),
            }
            .into(),
            ModelKind::Anisotropic => SumMetricParams {
                c0,
                cx1: self.var * t[1].exp(),
                ax: self.ext_x * t[2].exp(),
                cy1: self.var * t[3].exp(),
                ay: self.ext_y * t[4].exp(),
                cxy1: self.var * t[5].exp(),
                axy: self.ext * t[6].exp(),
                alpha: t[7].exp(),
            }
            .into(),
        })
    }

    fn from_params(&self, p: &CovarianceParams) -> Result<Vec<f64>> {
        if p.kind() != self.kind {
            return Err(Error::InvalidParameter(format!(
                "start for {:?} model given to {:?} fit",
                p.kind(),
                self.kind
            )));
        }
        let lv = |v: f64| (v.max(1e-300) / self.var).ln().clamp(-LOG_BOUND, LOG_BOUND);
        let lr = |v: f64, s: f64| (v / s).ln().clamp(-LOG_BOUND, LOG_BOUND);
        let nug = |c0: f64| lv((c0 - self.floor()).max(self.floor()));
        Ok(match *p {
            CovarianceParams::Isotropic(q) => vec![nug(q.c0), lv(q.c1), lr(q.a, self.ext)],
            CovarianceParams::Anisotropic(q) => vec![
                nug(q.c0),
                lv(q.cx1),
                lr(q.ax, self.ext_x),
                lv(q.cy1),
                lr(q.ay, self.ext_y),
                lv(q.cxy1),
                lr(q.axy, self.ext),
                q.alpha.ln().clamp(-LOG_BOUND, LOG_BOUND),
            ],
        })
    }
}

const START_NUGGET_FRACTIONS: [f64; 2] = [0.1, 0.5];
const START_RANGE_FRACTIONS: [f64; 4] = [0.1, 0.3, 0.6, 1.0];

/// The eight default starting points: nugget fraction {0.1, 0.5} of the
/// OLS residual variance crossed with effective range {0.1, 0.3, 0.6, 1.0}
/// of the site extent. Anisotropic starts split the sill evenly over the
/// three components and start from `alpha = 1`.
pub fn default_starts(kind: ModelKind, problem: &RemlProblem) -> Vec<CovarianceParams> {
    let scale = LogScale::new(kind, problem);
    let mut starts = Vec::with_capacity(8);
    for &rf in &START_RANGE_FRACTIONS {
        for &nf in &START_NUGGET_FRACTIONS {
            let c0 = nf * scale.var;
            let sill = (1.0 - nf) * scale.var;
            // effective range = 3a
            let a = |extent: f64| rf * extent / 3.0;
            starts.push(match kind {
                ModelKind::Isotropic => IsoExpParams {
                    c0,
                    c1: sill,
                    a: a(scale.ext),
                }
                .into(),
                ModelKind::Anisotropic => SumMetricParams {
                    c0,
                    cx1: sill / 3.0,
                    ax: a(scale.ext_x),
                    cy1: sill / 3.0,
                    ay: a(scale.ext_y),
                    cxy1: sill / 3.0,
                    axy: a(scale.ext),
                    alpha: 1.0,
                }
                .into(),
            });
        }
    }
    starts
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemlOptions {
    pub simplex: NelderMeadOptions,
    pub execution: Execution,
}

impl Default for RemlOptions {
    fn default() -> Self {
        Self {
            simplex: NelderMeadOptions::default(),
            execution: Execution::Parallel,
        }
    }
}

/// Diagnostics for a single multi-start run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartOutcome {
    pub start: CovarianceParams,
    pub objective: Option<f64>,
    pub params: Option<CovarianceParams>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemlFit {
    pub model_kind: ModelKind,
    pub params: CovarianceParams,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub cov_beta: Vec<Vec<f64>>,
    pub restricted_loglik: f64,
    /// Covariance parameters plus fixed effects.
    pub k: usize,
    pub aic: f64,
    pub n_starts: usize,
    pub converged: bool,
    pub best_start_index: usize,
    pub starts: Vec<StartOutcome>,
}

impl RemlFit {
    pub fn treatment_effect(&self) -> f64 {
        self.beta[TREATMENT.min(self.beta.len() - 1)]
    }

    pub fn treatment_se(&self) -> f64 {
        self.se[TREATMENT.min(self.se.len() - 1)]
    }

    /// `(z, two-sided p)` for the treatment coefficient.
    pub fn treatment_test(&self) -> (f64, f64) {
        wald_test(self.treatment_effect(), self.treatment_se())
    }

    pub fn neg_loglik(&self) -> f64 {
        -self.restricted_loglik
    }
}

/// Multi-start REML: minimizes [`RemlProblem::neg_loglik`] over
/// log-parameters with Nelder–Mead from each start and keeps the best
/// optimum.
pub fn fit_reml(
    problem: &RemlProblem,
    kind: ModelKind,
    starts: &[CovarianceParams],
    opts: &RemlOptions,
) -> Result<RemlFit> {
    if starts.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "multi-start REML needs at least 2 starts, got {}",
            starts.len()
        )));
    }
    let scale = LogScale::new(kind, problem);
    let thetas = starts
        .iter()
        .map(|s| scale.from_params(s))
        .collect::<Result<Vec<_>>>()?;

    let outcomes = map_slice(&thetas, opts.execution, |k, theta0| {
        let objective = |t: &[f64]| match scale.to_params(t) {
            Some(p) => problem.neg_loglik(&p).unwrap_or(f64::INFINITY),
            None => f64::INFINITY,
        };
        let r = nelder_mead(objective, theta0, &opts.simplex);
        let ok = r.fmin.is_finite();
        StartOutcome {
            start: starts[k],
            objective: ok.then_some(r.fmin),
            params: if ok { scale.to_params(&r.x) } else { None },
            iterations: r.iterations,
            evaluations: r.evaluations,
            converged: r.converged,
            error: (!ok).then(|| "objective was not finite anywhere on the simplex".to_string()),
        }
    });

    let best = outcomes
        .iter()
        .enumerate()
        .filter_map(|(k, o)| o.objective.map(|f| (k, f)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let Some((best_index, best_obj)) = best else {
        return Err(Error::FitFailure {
            diagnostics: outcomes
                .iter()
                .enumerate()
                .map(|(k, o)| format!("start {k}: {}", o.error.as_deref().unwrap_or("failed")))
                .collect(),
        });
    };
    let params = outcomes[best_index]
        .params
        .expect("finite objective has params");
    let est = problem.gls(&params)?;
    let p = problem.x.ncols();
    let k = kind.n_params() + p;
    let restricted_loglik = -best_obj;
    Ok(RemlFit {
        model_kind: kind,
        params,
        beta: est.beta.iter().copied().collect(),
        se: est.se().iter().copied().collect(),
        cov_beta: (0..p)
            .map(|r| (0..p).map(|c| est.cov_beta[(r, c)]).collect())
            .collect(),
        restricted_loglik,
        k,
        aic: aic(restricted_loglik, k),
        n_starts: starts.len(),
        converged: outcomes[best_index].converged,
        best_start_index: best_index,
        starts: outcomes,
    })
}

/// Fits with [`default_starts`].
pub fn fit_reml_default(
    problem: &RemlProblem,
    kind: ModelKind,
    opts: &RemlOptions,
) -> Result<RemlFit> {
    fit_reml(problem, kind, &default_starts(kind, problem), opts)
}

/// Minimum-AIC fit; ties go to the model with fewer parameters.
pub fn select_model(fits: &[RemlFit]) -> Result<&RemlFit> {
    if fits.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "model selection needs at least 2 fits, got {}",
            fits.len()
        )));
    }
    let tie = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
    Ok(fits
        .iter()
        .reduce(|best, f| {
            if tie(f.aic, best.aic) {
                if f.k < best.k {
                    f
                } else {
                    best
                }
            } else if f.aic < best.aic {
                f
            } else {
                best
            }
        })
        .expect("non-empty"))
}
