use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fieldstat::covariance::{Axis, CovarianceParams, Sites};
use fieldstat::design::{assign_design, build_design_matrix, DesignKind, NamedDesign};
use fieldstat::field_data::{
    aggregate_to_grid, align_rows, load_yield_points, rotate_coordinates, trim_edges, BadRow,
    FieldGeometry, GridMetadata, YieldGrid,
};
use fieldstat::inference::{
    confidence_interval, fit_ols, fit_reml_default, wald_test, OlsFit, RemlFit, RemlOptions,
    RemlProblem,
};
use fieldstat::simulation::{
    run_effect_experiment, run_null_experiment, AnalysisModel, FieldSource, Protocol,
    SimulationConfig, SimulationReport,
};
use fieldstat::variogram::{
    default_max_lag, empirical_variogram, fitted_curve, write_empirical_csv, write_fitted_csv,
};
use fieldstat::Execution;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::provenance::{write_csv, write_json, Provenance};

const GRID_CSV: &str = "grid.csv";
const GRID_META: &str = "grid.json";

fn out_file(config: &RunConfig, name: &str) -> PathBuf {
    config.out.join(name)
}

fn prepare_out(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out)
        .with_context(|| format!("creating output directory {}", config.out.display()))
}

fn load_grid(config: &RunConfig) -> Result<YieldGrid> {
    let meta_path = out_file(config, GRID_META);
    let meta: GridMetadata = serde_json::from_reader(BufReader::new(
        File::open(&meta_path)
            .with_context(|| format!("opening {} (run `preprocess` first)", meta_path.display()))?,
    ))
    .with_context(|| format!("parsing {}", meta_path.display()))?;
    let csv_path = out_file(config, GRID_CSV);
    let file = File::open(&csv_path).with_context(|| format!("opening {}", csv_path.display()))?;
    YieldGrid::read_csv(meta, BufReader::new(file))
        .with_context(|| format!("reading {}", csv_path.display()))
}

#[derive(Serialize)]
struct PreprocessSummary {
    input: PathBuf,
    rows_read: usize,
    bad_rows: Vec<BadRow>,
    points_used: usize,
    nx: usize,
    ny: usize,
    cells: usize,
    cells_with_data: usize,
    cells_valid: usize,
    cells_trimmed: usize,
}

pub fn preprocess(config: &RunConfig) -> Result<()> {
    let input = config
        .input
        .as_ref()
        .context("config has no [input] section")?;
    let file =
        File::open(&input.path).with_context(|| format!("opening {}", input.path.display()))?;
    let loaded = load_yield_points(BufReader::new(file))
        .with_context(|| format!("reading {}", input.path.display()))?;
    let field = &config.field;
    let rotated = rotate_coordinates(&loaded.points, field.heading)?;
    let aligned = match field.row_width {
        Some(w) => align_rows(&rotated, w)?,
        None => rotated,
    };
    let grid = aggregate_to_grid(&aligned, config.grid.dx, config.grid.dy)?;
    let geometry = FieldGeometry {
        width_x: grid.nx() as f64 * grid.dx(),
        length_y: grid.ny() as f64 * grid.dy(),
        heading: field.heading,
        headland_margin: field.headland_margin,
        side_margin: field.side_margin,
    };
    let trimmed = trim_edges(&grid, &geometry)?;

    prepare_out(config)?;
    let prov = Provenance::new("preprocess", config)?;
    write_csv(&out_file(config, GRID_CSV), &prov, |w| trimmed.write_csv(w))?;
    write_json(&out_file(config, GRID_META), &prov, &trimmed.metadata())?;
    let summary = PreprocessSummary {
        input: input.path.clone(),
        rows_read: loaded.points.len() + loaded.bad_rows.len(),
        points_used: loaded.points.len(),
        bad_rows: loaded.bad_rows,
        nx: trimmed.nx(),
        ny: trimmed.ny(),
        cells: trimmed.nx() * trimmed.ny(),
        cells_with_data: grid.n_valid(),
        cells_valid: trimmed.n_valid(),
        cells_trimmed: grid.n_valid() - trimmed.n_valid(),
    };
    write_json(
        &out_file(config, "preprocess_summary.json"),
        &prov,
        &summary,
    )?;
    eprintln!(
        "preprocess: {} points -> {} x {} grid, {} valid cells ({} trimmed)",
        summary.points_used, summary.nx, summary.ny, summary.cells_valid, summary.cells_trimmed
    );
    Ok(())
}

#[derive(Serialize)]
struct DesignSummary<'a> {
    name: &'a str,
    kind: DesignKind,
    n_valid: usize,
    n_treated: usize,
    n_control: usize,
}

#[derive(Serialize)]
struct DesignPreview<'a> {
    designs: Vec<DesignSummary<'a>>,
}

pub fn design_preview(config: &RunConfig) -> Result<()> {
    if config.designs.is_empty() {
        bail!("config has no [[designs]] entry");
    }
    let grid = load_grid(config)?;
    let prov = Provenance::new("design-preview", config)?;
    let mut designs = Vec::new();
    for d in &config.designs {
        let mask = assign_design(&grid, &d.layout).with_context(|| format!("design {}", d.name))?;
        write_csv(
            &out_file(config, &format!("design_{}.csv", d.name)),
            &prov,
            |w| mask.write_csv(w),
        )?;
        designs.push(DesignSummary {
            name: &d.name,
            kind: d.layout.kind,
            n_valid: mask.n_valid(),
            n_treated: mask.n_treated(),
            n_control: mask.n_valid() - mask.n_treated(),
        });
    }
    write_json(
        &out_file(config, "designs.json"),
        &prov,
        &DesignPreview { designs },
    )?;
    Ok(())
}

/// Treatment coefficient inference shared by every fit report.
#[derive(Serialize)]
struct Treatment {
    estimate: f64,
    se: f64,
    z: f64,
    p_value: f64,
    ci_low: f64,
    ci_high: f64,
}

impl Treatment {
    fn new(estimate: f64, se: f64) -> Self {
        let (z, p_value) = wald_test(estimate, se);
        let (ci_low, ci_high) = confidence_interval(estimate, se);
        Self {
            estimate,
            se,
            z,
            p_value,
            ci_low,
            ci_high,
        }
    }
}

#[derive(Serialize)]
#[serde(untagged)]
enum FitBody<'a> {
    Ols(&'a OlsFit),
    Reml(&'a RemlFit),
}

#[derive(Serialize)]
struct FitReport<'a> {
    model: AnalysisModel,
    design: &'a str,
    n: usize,
    treatment: Treatment,
    #[serde(flatten)]
    body: FitBody<'a>,
}

#[derive(Serialize)]
struct FitFailureReport<'a> {
    model: AnalysisModel,
    design: &'a str,
    error: String,
}

#[derive(Serialize)]
struct SelectionEntry {
    model: AnalysisModel,
    k: usize,
    restricted_loglik: f64,
    aic: f64,
    delta_aic: f64,
}

#[derive(Serialize)]
struct Selection {
    selected: Option<AnalysisModel>,
    candidates: Vec<SelectionEntry>,
    failed: Vec<AnalysisModel>,
}

struct FitInputs {
    design: NamedDesign,
    x: DMatrix<f64>,
    y: DVector<f64>,
    sites: Sites,
}

fn fit_inputs(grid: &YieldGrid, design: &NamedDesign) -> Result<FitInputs> {
    let mask =
        assign_design(grid, &design.layout).with_context(|| format!("design {}", design.name))?;
    Ok(FitInputs {
        design: design.clone(),
        x: build_design_matrix(&mask)?,
        y: DVector::from_vec(grid.valid_values()),
        sites: Sites::from_grid(grid),
    })
}

pub fn fit(config: &RunConfig) -> Result<()> {
    if config.fit.models.is_empty() {
        bail!("fit.models is empty");
    }
    let grid = load_grid(config)?;
    let inputs = fit_inputs(&grid, config.fit_design()?)?;
    let design = inputs.design.name.as_str();
    let prov = Provenance::new("fit", config)?;
    let opts = RemlOptions::default();
    let n = inputs.y.len();

    let mut reml_fits: Vec<(AnalysisModel, RemlFit)> = Vec::new();
    let mut failed = Vec::new();
    for &model in &config.fit.models {
        let path = out_file(config, &format!("fit_{}.json", model.name()));
        let outcome = match model {
            AnalysisModel::Ols => fit_ols(&inputs.y, &inputs.x).map(|f| {
                let report = FitReport {
                    model,
                    design,
                    n,
                    treatment: Treatment::new(f.treatment_effect(), f.treatment_se()),
                    body: FitBody::Ols(&f),
                };
                write_json(&path, &prov, &report)
            }),
            AnalysisModel::Isotropic | AnalysisModel::Anisotropic => {
                let kind = match model {
                    AnalysisModel::Isotropic => fieldstat::covariance::ModelKind::Isotropic,
                    _ => fieldstat::covariance::ModelKind::Anisotropic,
                };
                RemlProblem::new(inputs.y.clone(), inputs.x.clone(), inputs.sites.clone())
                    .and_then(|p| fit_reml_default(&p, kind, &opts))
                    .map(|f| {
                        let report = FitReport {
                            model,
                            design,
                            n,
                            treatment: Treatment::new(f.treatment_effect(), f.treatment_se()),
                            body: FitBody::Reml(&f),
                        };
                        let written = write_json(&path, &prov, &report);
                        reml_fits.push((model, f));
                        written
                    })
            }
        };
        match outcome {
            Ok(written) => written?,
            Err(e) => {
                eprintln!("fit: {} model failed: {e}", model.name());
                let report = FitFailureReport {
                    model,
                    design,
                    error: e.to_string(),
                };
                write_json(&path, &prov, &report)?;
                failed.push(model);
            }
        }
    }

    let reml_requested = config
        .fit
        .models
        .iter()
        .filter(|m| **m != AnalysisModel::Ols)
        .count();
    if reml_requested >= 2 {
        let best = reml_fits
            .iter()
            .map(|(_, f)| f.aic)
            .fold(f64::INFINITY, f64::min);
        let selected = fieldstat::inference::select_model(
            &reml_fits.iter().map(|(_, f)| f.clone()).collect::<Vec<_>>(),
        )
        .ok()
        .and_then(|chosen| {
            reml_fits
                .iter()
                .find(|(_, f)| f.model_kind == chosen.model_kind)
                .map(|(m, _)| *m)
        })
        .or_else(|| reml_fits.first().map(|(m, _)| *m));
        let selection = Selection {
            selected,
            candidates: reml_fits
                .iter()
                .map(|(m, f)| SelectionEntry {
                    model: *m,
                    k: f.k,
                    restricted_loglik: f.restricted_loglik,
                    aic: f.aic,
                    delta_aic: f.aic - best,
                })
                .collect(),
            failed: failed
                .iter()
                .copied()
                .filter(|m| *m != AnalysisModel::Ols)
                .collect(),
        };
        write_json(&out_file(config, "selection.json"), &prov, &selection)?;
    }
    if failed.len() == config.fit.models.len() {
        bail!("every requested model failed to fit");
    }
    Ok(())
}

/// The parts of a fit report the variogram command needs.
#[derive(Deserialize)]
struct StoredFit {
    design: String,
    beta: Option<Vec<f64>>,
    params: Option<CovarianceParams>,
}

pub fn variogram(config: &RunConfig) -> Result<()> {
    let grid = load_grid(config)?;
    let sites = Sites::from_grid(&grid);
    let prov = Provenance::new("variogram", config)?;
    let vc = &config.variogram;
    let max_x = vc
        .max_lag_x
        .unwrap_or_else(|| default_max_lag(&sites, Axis::X));
    let max_y = vc
        .max_lag_y
        .unwrap_or_else(|| default_max_lag(&sites, Axis::Y));

    let mut done = 0;
    for &model in &config.fit.models {
        let path = out_file(config, &format!("fit_{}.json", model.name()));
        let Ok(file) = File::open(&path) else {
            continue;
        };
        let stored: StoredFit = serde_json::from_reader(BufReader::new(file))
            .with_context(|| format!("parsing {}", path.display()))?;
        let Some(beta) = stored.beta else {
            eprintln!("variogram: skipping {} (fit failed)", model.name());
            continue;
        };
        let design = config
            .designs
            .iter()
            .find(|d| d.name == stored.design)
            .with_context(|| {
                format!(
                    "{} refers to unknown design {}",
                    path.display(),
                    stored.design
                )
            })?;
        let inputs = fit_inputs(&grid, design)?;
        let residuals = &inputs.y - &inputs.x * DVector::from_vec(beta);
        let residuals = residuals.as_slice();

        let empirical = [(Axis::X, max_x), (Axis::Y, max_y)]
            .into_iter()
            .map(|(axis, max_lag)| {
                empirical_variogram(residuals, &sites, axis, max_lag, vc.min_pairs)
                    .with_context(|| format!("{} residual variogram", model.name()))
            })
            .collect::<Result<Vec<_>>>()?;
        write_csv(
            &out_file(config, &format!("variogram_{}_empirical.csv", model.name())),
            &prov,
            |w| write_empirical_csv(&empirical, w),
        )?;

        if let Some(params) = stored.params {
            let top = max_x.max(max_y);
            let steps = vc.curve_points.max(1);
            let lags: Vec<f64> = (1..=steps).map(|k| top * k as f64 / steps as f64).collect();
            let curves = [Axis::X, Axis::Y]
                .into_iter()
                .map(|axis| Ok((axis, fitted_curve(&params, axis, &lags)?)))
                .collect::<fieldstat::Result<Vec<_>>>()?;
            write_csv(
                &out_file(config, &format!("variogram_{}_fitted.csv", model.name())),
                &prov,
                |w| write_fitted_csv(&curves, w),
            )?;
        }
        done += 1;
    }
    if done == 0 {
        bail!(
            "no successful fit reports found in {} (run `fit` first)",
            config.out.display()
        );
    }
    Ok(())
}

fn write_pvalue_table(path: &Path, prov: &Provenance, report: &SimulationReport) -> Result<()> {
    let mut designs: Vec<&str> = Vec::new();
    let mut models: Vec<AnalysisModel> = Vec::new();
    for arm in &report.arms {
        if !designs.contains(&arm.design.as_str()) {
            designs.push(&arm.design);
        }
        if !models.contains(&arm.model) {
            models.push(arm.model);
        }
    }
    write_csv(path, prov, |w| {
        use std::io::Write;
        let names: Vec<&str> = models.iter().map(|m| m.name()).collect();
        writeln!(w, "design,{}", names.join(","))?;
        for d in &designs {
            let cells: Vec<String> = models
                .iter()
                .map(|&m| {
                    report
                        .arm(d, m)
                        .and_then(|a| a.records.first())
                        .map(|r| r.p.to_string())
                        .unwrap_or_default()
                })
                .collect();
            writeln!(w, "{d},{}", cells.join(","))?;
        }
        Ok(())
    })
}

pub fn simulate(config: &RunConfig) -> Result<()> {
    if config.designs.is_empty() {
        bail!("config has no [[designs]] entry");
    }
    let sim = &config.simulation;
    let source = match &sim.synthetic {
        Some(s) => FieldSource::Synthetic(s.clone()),
        None => FieldSource::Observed(load_grid(config)?),
    };
    let settings = SimulationConfig {
        effect_mean: sim.effect_mean,
        effect_sd: sim.effect_sd,
        n_reps: sim.n_reps,
        seed: config.seed,
        alpha_level: sim.alpha_level,
        designs: config.designs.clone(),
        models: sim
            .models
            .clone()
            .unwrap_or_else(|| config.fit.models.clone()),
        reml: RemlOptions::default(),
        execution: Execution::Parallel,
    };
    prepare_out(config)?;
    let prov = Provenance::new("simulate", config)?;
    let null = run_null_experiment(&source, &settings)?;
    let effect = run_effect_experiment(&source, &settings)?;
    for (name, report) in [("null", &null), ("effect", &effect)] {
        write_json(
            &out_file(config, &format!("simulation_{name}.json")),
            &prov,
            report,
        )?;
        write_csv(
            &out_file(config, &format!("simulation_{name}.csv")),
            &prov,
            |w| report.write_csv(w),
        )?;
    }
    if null.protocol == Protocol::SingleRun {
        write_pvalue_table(
            &out_file(config, "simulation_null_pvalues.csv"),
            &prov,
            &null,
        )?;
    }
    let empty: Vec<String> = [&null, &effect]
        .iter()
        .flat_map(|r| r.arms.iter())
        .filter(|a| a.records.is_empty())
        .map(|a| format!("{}/{}", a.design, a.model.name()))
        .collect();
    if !empty.is_empty() {
        bail!("no replicate succeeded for {}", empty.join(", "));
    }
    Ok(())
}
