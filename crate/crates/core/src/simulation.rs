//! Monte-Carlo experiments on real or synthetic yield fields.
//!
//! Each replicate draws from its own ChaCha stream (root seed, stream =
//! replicate index), so replicates are independent of each other and of
//! execution order. Within a replicate, every design and model sees the
//! same field.

use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::{cov_cholesky, CovarianceParams, ModelKind, Sites};
use crate::design::{assign_design, build_design_matrix, NamedDesign, TreatmentMask};
use crate::error::{Error, Result};
use crate::field_data::YieldGrid;
use crate::inference::{
    confidence_interval, fit_ols, fit_reml_default, wald_test, RemlOptions, RemlProblem,
};
use crate::par::{map_range, Execution};

/// Largest lattice simulated by dense factorization.
pub const MAX_SIMULATION_CELLS: usize = 2500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisModel {
    Ols,
    Isotropic,
    Anisotropic,
}

impl AnalysisModel {
    pub fn name(self) -> &'static str {
        match self {
            AnalysisModel::Ols => "ols",
            AnalysisModel::Isotropic => "isotropic",
            AnalysisModel::Anisotropic => "anisotropic",
        }
    }

    fn reml_kind(self) -> Option<ModelKind> {
        match self {
            AnalysisModel::Ols => None,
            AnalysisModel::Isotropic => Some(ModelKind::Isotropic),
            AnalysisModel::Anisotropic => Some(ModelKind::Anisotropic),
        }
    }
}

/// A fully valid `nx` x `ny` lattice with origin at (0, 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    /// Mean yield added to the simulated field, t/ha.
    #[serde(default)]
    pub mean: f64,
}

impl LatticeSpec {
    fn template(&self) -> Result<YieldGrid> {
        YieldGrid::from_values(
            (0.0, 0.0),
            self.dx,
            self.dy,
            self.nx,
            self.ny,
            vec![self.mean; self.nx * self.ny],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticField {
    pub lattice: LatticeSpec,
    pub model: CovarianceParams,
}

/// Where each replicate's yield field comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldSource {
    /// The same preprocessed grid in every replicate.
    Observed(YieldGrid),
    /// A fresh Gaussian random field per replicate.
    Synthetic(SyntheticField),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    #[serde(default = "default_effect_mean")]
    pub effect_mean: f64,
    #[serde(default = "default_effect_sd")]
    pub effect_sd: f64,
    #[serde(default = "default_reps")]
    pub n_reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha_level: f64,
    pub designs: Vec<NamedDesign>,
    pub models: Vec<AnalysisModel>,
    #[serde(skip)]
    pub reml: RemlOptions,
    #[serde(default)]
    pub execution: Execution,
}

fn default_effect_mean() -> f64 {
    0.3
}
fn default_effect_sd() -> f64 {
    0.10
}
fn default_reps() -> usize {
    1
}
fn default_alpha() -> f64 {
    0.05
}

impl SimulationConfig {
    pub fn new(designs: Vec<NamedDesign>, models: Vec<AnalysisModel>) -> Self {
        Self {
            effect_mean: default_effect_mean(),
            effect_sd: default_effect_sd(),
            n_reps: default_reps(),
            seed: 0,
            alpha_level: default_alpha(),
            designs,
            models,
            reml: RemlOptions::default(),
            execution: Execution::Parallel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.effect_sd >= 0.0 && self.effect_sd.is_finite() && self.effect_mean.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "effect N({}, {}²)",
                self.effect_mean, self.effect_sd
            )));
        }
        if !(self.alpha_level > 0.0 && self.alpha_level < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha level {}",
                self.alpha_level
            )));
        }
        if self.n_reps == 0 {
            return Err(Error::InvalidParameter("n_reps must be at least 1".into()));
        }
        if self.designs.is_empty() || self.models.is_empty() {
            return Err(Error::InvalidParameter(
                "at least one design and one model are required".into(),
            ));
        }
        for d in &self.designs {
            d.layout.validate()?;
        }
        Ok(())
    }
}

/// Random stream for replicate `rep`: the root seed with the stream id set
/// to the replicate index.
pub fn replicate_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// Adds an independent `N(effect_mean, effect_sd²)` draw to every treated
/// valid cell. Also returns the draws, in canonical cell order.
pub fn inject_treatment_with_draws<R: rand::Rng + ?Sized>(
    grid: &YieldGrid,
    mask: &TreatmentMask,
    effect_mean: f64,
    effect_sd: f64,
    rng: &mut R,
) -> Result<(YieldGrid, Vec<f64>)> {
    if mask.nx() != grid.nx() || mask.ny() != grid.ny() {
        return Err(Error::InvalidParameter(
            "mask is not aligned to the grid".into(),
        ));
    }
    let dist = Normal::new(effect_mean, effect_sd)
        .map_err(|e| Error::InvalidParameter(format!("effect distribution: {e}")))?;
    let mut values = grid.valid_values();
    let mut draws = Vec::new();
    for (v, k) in values.iter_mut().zip(grid.valid_indices()) {
        let (i, j) = grid.cell_of(k);
        match mask.label(i, j) {
            Some(1) => {
                let d = dist.sample(rng);
                *v += d;
                draws.push(d);
            }
            Some(_) => {}
            None => {
                return Err(Error::InvalidParameter(format!(
                    "valid cell ({i}, {j}) has no treatment label"
                )))
            }
        }
    }
    Ok((grid.with_valid_values(&values)?, draws))
}

/// Adds an independent `N(effect_mean, effect_sd²)` draw to every treated
/// valid cell.
pub fn inject_treatment<R: rand::Rng + ?Sized>(
    grid: &YieldGrid,
    mask: &TreatmentMask,
    effect_mean: f64,
    effect_sd: f64,
    rng: &mut R,
) -> Result<YieldGrid> {
    inject_treatment_with_draws(grid, mask, effect_mean, effect_sd, rng).map(|(g, _)| g)
}

/// Draws a Gaussian random field `mean + L·z` on a lattice, where
/// `V = LLᵀ` is the model covariance over the cell centroids.
pub fn simulate_gaussian_field<R: rand::Rng + ?Sized>(
    lattice: &LatticeSpec,
    model: &CovarianceParams,
    rng: &mut R,
) -> Result<YieldGrid> {
    let n = lattice.nx * lattice.ny;
    if n > MAX_SIMULATION_CELLS {
        return Err(Error::InvalidParameter(format!(
            "{n} cells exceeds the dense simulation limit of {MAX_SIMULATION_CELLS}"
        )));
    }
    model.validate()?;
    let template = lattice.template()?;
    let sites = Sites::from_grid(&template);
    let chol = cov_cholesky(&sites, model)?;
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let field = chol.l() * z;
    let values: Vec<f64> = field.iter().map(|v| v + lattice.mean).collect();
    template.with_valid_values(&values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// No treatment effect injected.
    Null,
    /// Gaussian treatment effect injected into treated cells.
    Effect,
}

/// How to read an arm's p-values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// One fit per design and model on an observed field; the p-value is
    /// the reported "type I error" figure.
    SingleRun,
    /// Many replicates; `rejection_rate` estimates the actual error rate.
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub rep: usize,
    pub beta: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// AIC of REML fits; `None` for OLS.
    pub aic: Option<f64>,
    /// REML convergence flag; `None` for OLS.
    pub converged: Option<bool>,
    /// Mean of the injected draws in this replicate.
    pub realized_effect: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateFailure {
    pub rep: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmReport {
    pub design: String,
    pub model: AnalysisModel,
    pub n_reps: usize,
    pub n_failed: usize,
    pub rejection_rate: Option<f64>,
    pub mean_estimate: Option<f64>,
    /// Mean of `beta − effect_mean`.
    pub bias: Option<f64>,
    pub mean_se: Option<f64>,
    pub mean_ci_width: Option<f64>,
    pub ci_covers_zero_rate: Option<f64>,
    pub ci_covers_truth_rate: Option<f64>,
    pub mean_realized_effect: Option<f64>,
    pub records: Vec<ReplicateRecord>,
    pub failures: Vec<ReplicateFailure>,
}

impl ArmReport {
    fn summarize(
        design: String,
        model: AnalysisModel,
        n_reps: usize,
        truth: f64,
        alpha_level: f64,
        records: Vec<ReplicateRecord>,
        failures: Vec<ReplicateFailure>,
    ) -> Self {
        let m = records.len();
        let mean = |f: &dyn Fn(&ReplicateRecord) -> f64| {
            (m > 0).then(|| records.iter().map(f).sum::<f64>() / m as f64)
        };
        let rate = |f: &dyn Fn(&ReplicateRecord) -> bool| {
            (m > 0).then(|| records.iter().filter(|r| f(r)).count() as f64 / m as f64)
        };
        let realized: Vec<f64> = records.iter().filter_map(|r| r.realized_effect).collect();
        Self {
            design,
            model,
            n_reps,
            n_failed: failures.len(),
            rejection_rate: rate(&|r| r.p < alpha_level),
            mean_estimate: mean(&|r| r.beta),
            bias: mean(&|r| r.beta - truth),
            mean_se: mean(&|r| r.se),
            mean_ci_width: mean(&|r| r.ci_high - r.ci_low),
            ci_covers_zero_rate: rate(&|r| r.ci_low <= 0.0 && 0.0 <= r.ci_high),
            ci_covers_truth_rate: rate(&|r| r.ci_low <= truth && truth <= r.ci_high),
            mean_realized_effect: (!realized.is_empty())
                .then(|| realized.iter().sum::<f64>() / realized.len() as f64),
            records,
            failures,
        }
    }
}

/// How often AIC preferred each REML model for one design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionSummary {
    pub design: String,
    /// Replicates where both REML fits succeeded.
    pub compared: usize,
    pub isotropic_selected: usize,
    pub anisotropic_selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub experiment: Experiment,
    pub protocol: Protocol,
    pub seed: u64,
    pub n_reps: usize,
    /// Population effect the bias is measured against (0 for null runs).
    pub effect_mean: f64,
    pub effect_sd: f64,
    pub alpha_level: f64,
    pub arms: Vec<ArmReport>,
    pub model_selection: Vec<SelectionSummary>,
}

impl SimulationReport {
    pub fn arm(&self, design: &str, model: AnalysisModel) -> Option<&ArmReport> {
        self.arms
            .iter()
            .find(|a| a.design == design && a.model == model)
    }

    /// Flat table `design,model,rep,p,beta,se,ci_low,ci_high`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "design,model,rep,p,beta,se,ci_low,ci_high")?;
        for arm in &self.arms {
            for r in &arm.records {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    arm.design,
                    arm.model.name(),
                    r.rep,
                    r.p,
                    r.beta,
                    r.se,
                    r.ci_low,
                    r.ci_high
                )?;
            }
        }
        Ok(())
    }
}

struct PreparedDesign {
    mask: TreatmentMask,
    x: nalgebra::DMatrix<f64>,
}

fn fit_one(
    model: AnalysisModel,
    y: &DVector<f64>,
    design: &PreparedDesign,
    sites: &Sites,
    reml: &RemlOptions,
) -> Result<(f64, f64, Option<f64>, Option<bool>)> {
    match model.reml_kind() {
        None => {
            let f = fit_ols(y, &design.x)?;
            Ok((f.treatment_effect(), f.treatment_se(), None, None))
        }
        Some(kind) => {
            let problem = RemlProblem::new(y.clone(), design.x.clone(), sites.clone())?;
            let f = fit_reml_default(&problem, kind, reml)?;
            Ok((
                f.treatment_effect(),
                f.treatment_se(),
                Some(f.aic),
                Some(f.converged),
            ))
        }
    }
}

type ReplicateOutcome = Vec<Vec<std::result::Result<ReplicateRecord, String>>>;

fn run_experiment(
    source: &FieldSource,
    config: &SimulationConfig,
    experiment: Experiment,
) -> Result<SimulationReport> {
    config.validate()?;
    let template = match source {
        FieldSource::Observed(g) => g.clone(),
        FieldSource::Synthetic(s) => {
            s.model.validate()?;
            s.lattice.template()?
        }
    };
    let designs: Vec<PreparedDesign> = config
        .designs
        .iter()
        .map(|d| {
            let mask = assign_design(&template, &d.layout)?;
            let x = build_design_matrix(&mask)?;
            Ok(PreparedDesign { mask, x })
        })
        .collect::<Result<_>>()?;
    let sites = Sites::from_grid(&template);
    let truth = match experiment {
        Experiment::Null => 0.0,
        Experiment::Effect => config.effect_mean,
    };

    let outcomes: Vec<std::result::Result<ReplicateOutcome, String>> =
        map_range(config.n_reps, config.execution, |rep| {
            let mut rng = replicate_rng(config.seed, rep as u64);
            let field = match source {
                FieldSource::Observed(g) => g.clone(),
                FieldSource::Synthetic(s) => {
                    simulate_gaussian_field(&s.lattice, &s.model, &mut rng)
                        .map_err(|e| e.to_string())?
                }
            };
            let mut per_design = Vec::with_capacity(designs.len());
            for design in &designs {
                let (grid, realized) = match experiment {
                    Experiment::Null => (field.clone(), None),
                    Experiment::Effect => {
                        let (g, draws) = inject_treatment_with_draws(
                            &field,
                            &design.mask,
                            config.effect_mean,
                            config.effect_sd,
                            &mut rng,
                        )
                        .map_err(|e| e.to_string())?;
                        let m = draws.iter().sum::<f64>() / draws.len() as f64;
                        (g, Some(m))
                    }
                };
                let y = DVector::from_vec(grid.valid_values());
                let per_model = config
                    .models
                    .iter()
                    .map(|&model| {
                        fit_one(model, &y, design, &sites, &config.reml)
                            .map(|(beta, se, aic, converged)| {
                                let (z, p) = wald_test(beta, se);
                                let (ci_low, ci_high) = confidence_interval(beta, se);
                                ReplicateRecord {
                                    rep,
                                    beta,
                                    se,
                                    z,
                                    p,
                                    ci_low,
                                    ci_high,
                                    aic,
                                    converged,
                                    realized_effect: realized,
                                }
                            })
                            .map_err(|e| e.to_string())
                    })
                    .collect();
                per_design.push(per_model);
            }
            Ok(per_design)
        });

    let mut arms = Vec::new();
    let mut selection = Vec::new();
    for (d, design) in config.designs.iter().enumerate() {
        let mut aics: Vec<(Option<f64>, Option<f64>)> = vec![(None, None); config.n_reps];
        for (m, &model) in config.models.iter().enumerate() {
            let mut records = Vec::new();
            let mut failures = Vec::new();
            for (rep, outcome) in outcomes.iter().enumerate() {
                let result = match outcome {
                    Ok(per_design) => per_design[d][m].clone(),
                    Err(e) => Err(e.clone()),
                };
                match result {
                    Ok(r) => {
                        match model {
                            AnalysisModel::Isotropic => aics[rep].0 = r.aic,
                            AnalysisModel::Anisotropic => aics[rep].1 = r.aic,
                            AnalysisModel::Ols => {}
                        }
                        records.push(r);
                    }
                    Err(error) => failures.push(ReplicateFailure { rep, error }),
                }
            }
            arms.push(ArmReport::summarize(
                design.name.clone(),
                model,
                config.n_reps,
                truth,
                config.alpha_level,
                records,
                failures,
            ));
        }
        if config.models.contains(&AnalysisModel::Isotropic)
            && config.models.contains(&AnalysisModel::Anisotropic)
        {
            let pairs: Vec<(f64, f64)> = aics.iter().filter_map(|&(i, a)| Some((i?, a?))).collect();
            // ties go to the isotropic model
            let aniso = pairs.iter().filter(|(i, a)| a < i).count();
            selection.push(SelectionSummary {
                design: design.name.clone(),
                compared: pairs.len(),
                isotropic_selected: pairs.len() - aniso,
                anisotropic_selected: aniso,
            });
        }
    }

    let protocol = match source {
        FieldSource::Observed(_) if config.n_reps == 1 => Protocol::SingleRun,
        _ => Protocol::MonteCarlo,
    };
    Ok(SimulationReport {
        experiment,
        protocol,
        seed: config.seed,
        n_reps: config.n_reps,
        effect_mean: truth,
        effect_sd: match experiment {
            Experiment::Null => 0.0,
            Experiment::Effect => config.effect_sd,
        },
        alpha_level: config.alpha_level,
        arms,
        model_selection: selection,
    })
}

/// Fits every design x model with no injected effect and records the
/// treatment p-values.
pub fn run_null_experiment(
    source: &FieldSource,
    config: &SimulationConfig,
) -> Result<SimulationReport> {
    run_experiment(source, config, Experiment::Null)
}

/// Injects a Gaussian treatment effect per replicate and records
/// estimates, bias against `effect_mean`, and 95% interval coverage.
pub fn run_effect_experiment(
    source: &FieldSource,
    config: &SimulationConfig,
) -> Result<SimulationReport> {
    run_experiment(source, config, Experiment::Effect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::IsoExpParams;
    use crate::design::{DesignKind, DesignLayout, Phase};

    fn grid(nx: usize, ny: usize) -> YieldGrid {
        let values = (0..nx * ny)
            .map(|k| 5.0 + (k as f64 * 0.37).sin())
            .collect();
        YieldGrid::from_values((0.0, 0.0), 1.0, 1.0, nx, ny, values).unwrap()
    }

    fn strip(width: f64) -> DesignLayout {
        DesignLayout {
            kind: DesignKind::Strip,
            pass_width: width,
            n_passes: 2,
            split_length: 0.0,
            phase: Phase::Control,
        }
    }

    #[test]
    fn degenerate_effect_adds_exactly_the_mean() {
        let g = grid(6, 4);
        let mask = assign_design(&g, &strip(3.0)).unwrap();
        let mut rng = replicate_rng(1, 0);
        let out = inject_treatment(&g, &mask, 0.3, 0.0, &mut rng).unwrap();
        for k in 0..24 {
            let (i, j) = g.cell_of(k);
            let expect = g.values()[k]
                + if mask.label(i, j) == Some(1) {
                    0.3
                } else {
                    0.0
                };
            assert_eq!(out.values()[k], expect);
        }
        assert_eq!(inject_treatment(&g, &mask, 0.0, 0.0, &mut rng).unwrap(), g);
    }

    #[test]
    fn injected_draws_average_to_the_mean() {
        let g = grid(100, 200);
        let mask = assign_design(&g, &strip(50.0)).unwrap();
        assert_eq!(mask.n_treated(), 10_000);
        let (_, draws) =
            inject_treatment_with_draws(&g, &mask, 0.3, 0.1, &mut replicate_rng(9, 0)).unwrap();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.3).abs() < 3.0 * 0.1 / 100.0, "mean {mean}");
    }

    #[test]
    fn subtracting_draws_restores_the_grid() {
        let g = grid(8, 5);
        let mask = assign_design(&g, &strip(4.0)).unwrap();
        let (out, draws) =
            inject_treatment_with_draws(&g, &mask, 0.3, 0.1, &mut replicate_rng(2, 4)).unwrap();
        let mut next = draws.iter();
        for k in 0..40 {
            let (i, j) = g.cell_of(k);
            let back = if mask.label(i, j) == Some(1) {
                out.values()[k] - next.next().unwrap()
            } else {
                out.values()[k]
            };
            assert!((back - g.values()[k]).abs() <= 1e-14 * g.values()[k].abs());
        }
        assert!(next.next().is_none());
    }

    #[test]
    fn misaligned_mask_is_rejected() {
        let mask = assign_design(&grid(4, 4), &strip(2.0)).unwrap();
        assert!(inject_treatment(&grid(5, 4), &mask, 0.3, 0.1, &mut replicate_rng(0, 0)).is_err());
    }

    #[test]
    fn field_is_reproducible_by_seed() {
        let lat = LatticeSpec {
            nx: 6,
            ny: 5,
            dx: 2.0,
            dy: 2.0,
            mean: 3.0,
        };
        let m: CovarianceParams = IsoExpParams::new(0.1, 0.9, 4.0).unwrap().into();
        let a = simulate_gaussian_field(&lat, &m, &mut replicate_rng(5, 2)).unwrap();
        let b = simulate_gaussian_field(&lat, &m, &mut replicate_rng(5, 2)).unwrap();
        let c = simulate_gaussian_field(&lat, &m, &mut replicate_rng(5, 3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let too_big = LatticeSpec {
            nx: 60,
            ny: 60,
            ..lat
        };
        assert!(simulate_gaussian_field(&too_big, &m, &mut replicate_rng(0, 0)).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = SimulationConfig::new(
            vec![NamedDesign {
                name: "D1".into(),
                layout: strip(2.0),
            }],
            vec![AnalysisModel::Ols],
        );
        c.validate().unwrap();
        c.alpha_level = 1.0;
        assert!(c.validate().is_err());
        c.alpha_level = 0.05;
        c.effect_sd = -0.1;
        assert!(c.validate().is_err());
        c.effect_sd = 0.1;
        c.n_reps = 0;
        assert!(c.validate().is_err());
    }
}
