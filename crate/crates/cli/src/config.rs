//! Run configuration read from a TOML file.
//!
//! Paths in the file are resolved against the file's directory. Command-line
//! flags override `seed`, `out` and `threads`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fieldstat::design::NamedDesign;
use fieldstat::simulation::{AnalysisModel, SyntheticField};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory. Not part of the provenance hash.
    #[serde(default = "default_out", skip_serializing)]
    pub out: PathBuf,
    /// Worker threads; 0 or absent uses every core. Not part of the
    /// provenance hash.
    #[serde(default, skip_serializing)]
    pub threads: Option<usize>,
    pub input: Option<InputConfig>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub field: FieldConfig,
    #[serde(default)]
    pub designs: Vec<NamedDesign>,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub variogram: VariogramConfig,
    #[serde(default)]
    pub simulation: SimulationSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("fieldstat-out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    /// Comma-delimited `x,y,value` yield points.
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dx: f64,
    pub dy: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { dx: 2.5, dy: 2.5 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    /// Direction of travel in the raw frame, radians from +y.
    #[serde(default)]
    pub heading: f64,
    /// Harvest row width for row alignment; alignment is skipped if unset.
    pub row_width: Option<f64>,
    #[serde(default)]
    pub headland_margin: f64,
    #[serde(default)]
    pub side_margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "all_models")]
    pub models: Vec<AnalysisModel>,
    /// Design whose treatment mask defines the fixed effects; defaults to
    /// the first design.
    pub design: Option<String>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            models: all_models(),
            design: None,
        }
    }
}

fn all_models() -> Vec<AnalysisModel> {
    vec![
        AnalysisModel::Ols,
        AnalysisModel::Isotropic,
        AnalysisModel::Anisotropic,
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariogramConfig {
    #[serde(default = "default_min_pairs")]
    pub min_pairs: usize,
    /// Defaults to half the valid extent along x.
    pub max_lag_x: Option<f64>,
    /// Defaults to half the valid extent along y.
    pub max_lag_y: Option<f64>,
    /// Points per fitted curve.
    #[serde(default = "default_curve_points")]
    pub curve_points: usize,
}

impl Default for VariogramConfig {
    fn default() -> Self {
        Self {
            min_pairs: default_min_pairs(),
            max_lag_x: None,
            max_lag_y: None,
            curve_points: default_curve_points(),
        }
    }
}

fn default_min_pairs() -> usize {
    fieldstat::variogram::DEFAULT_MIN_PAIRS
}

fn default_curve_points() -> usize {
    50
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "default_reps")]
    pub n_reps: usize,
    #[serde(default = "default_effect_mean")]
    pub effect_mean: f64,
    #[serde(default = "default_effect_sd")]
    pub effect_sd: f64,
    #[serde(default = "default_alpha")]
    pub alpha_level: f64,
    /// Defaults to the fit models.
    pub models: Option<Vec<AnalysisModel>>,
    /// Simulate Gaussian random fields instead of reusing the observed grid.
    pub synthetic: Option<SyntheticField>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            n_reps: default_reps(),
            effect_mean: default_effect_mean(),
            effect_sd: default_effect_sd(),
            alpha_level: default_alpha(),
            models: None,
            synthetic: None,
        }
    }
}

fn default_reps() -> usize {
    1
}
fn default_effect_mean() -> f64 {
    0.3
}
fn default_effect_sd() -> f64 {
    0.10
}
fn default_alpha() -> f64 {
    0.05
}

impl RunConfig {
    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(input) = &mut config.input {
            if input.path.is_relative() {
                input.path = base.join(&input.path);
            }
        }
        if config.out.is_relative() {
            config.out = base.join(&config.out);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if !(g.dx > 0.0 && g.dy > 0.0 && g.dx.is_finite() && g.dy.is_finite()) {
            bail!("grid spacing must be positive, got {} x {}", g.dx, g.dy);
        }
        let f = &self.field;
        if !(f.headland_margin >= 0.0 && f.side_margin >= 0.0) {
            bail!("margins must be non-negative");
        }
        if let Some(w) = f.row_width {
            if !(w > 0.0) {
                bail!("row_width must be positive, got {w}");
            }
        }
        if let Some(input) = &self.input {
            if !input.path.exists() {
                bail!("input file {} does not exist", input.path.display());
            }
        }
        for d in &self.designs {
            d.layout
                .validate()
                .with_context(|| format!("design {}", d.name))?;
        }
        let mut names: Vec<&str> = self.designs.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            bail!("design names must be unique");
        }
        Ok(())
    }

    /// The design named by `fit.design`, or the first one.
    pub fn fit_design(&self) -> Result<&NamedDesign> {
        match &self.fit.design {
            Some(name) => self
                .designs
                .iter()
                .find(|d| &d.name == name)
                .with_context(|| format!("fit design {name} is not among [[designs]]")),
            None => self
                .designs
                .first()
                .context("config has no [[designs]] entry"),
        }
    }
}
