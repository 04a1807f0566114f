//! Treatment layouts for two-treatment on-farm trials.
//!
//! Plots are measured from the lower-left corner of the valid (untrimmed)
//! area. Pass bands run along y with width `pass_width` across x; split
//! blocks have length `split_length` along y.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_data::YieldGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    /// Alternating machinery pass bands (D1).
    Strip,
    /// Alternating blocks along the direction of travel (D2).
    SplitPlot,
    /// Pass bands crossed with split blocks (D3).
    StripSplit,
    /// Repeating pass-width by split-length tiles (D4).
    Systematic,
}

/// Label of the first plot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    Control,
    Treatment,
}

impl Phase {
    fn bit(self) -> u8 {
        match self {
            Phase::Control => 0,
            Phase::Treatment => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignLayout {
    pub kind: DesignKind,
    /// Machinery working width, m.
    pub pass_width: f64,
    /// Number of pass bands across the valid area; leftover width joins the
    /// last band.
    #[serde(default = "default_passes")]
    pub n_passes: usize,
    /// Plot length along y for split kinds, m.
    #[serde(default)]
    pub split_length: f64,
    #[serde(default)]
    pub phase: Phase,
}

fn default_passes() -> usize {
    2
}

impl DesignLayout {
    pub fn validate(&self) -> Result<()> {
        if !(self.pass_width > 0.0 && self.pass_width.is_finite()) {
            return Err(Error::Design(format!("pass width {}", self.pass_width)));
        }
        let strips = matches!(self.kind, DesignKind::Strip | DesignKind::StripSplit);
        if strips && self.n_passes < 2 {
            return Err(Error::Design(format!(
                "{:?} design needs at least 2 passes, got {}",
                self.kind, self.n_passes
            )));
        }
        let splits = !matches!(self.kind, DesignKind::Strip);
        if splits && !(self.split_length > 0.0 && self.split_length.is_finite()) {
            return Err(Error::Design(format!(
                "{:?} design needs a positive split length, got {}",
                self.kind, self.split_length
            )));
        }
        Ok(())
    }
}

/// A layout with the name it is reported under (for example `D1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDesign {
    pub name: String,
    #[serde(flatten)]
    pub layout: DesignLayout,
}

/// Per-cell treatment labels aligned to a [`YieldGrid`]; `None` for cells
/// outside the grid mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreatmentMask {
    nx: usize,
    ny: usize,
    labels: Vec<Option<u8>>,
}

impl TreatmentMask {
    /// Builds a mask directly from per-cell labels (canonical order).
    pub fn from_labels(nx: usize, ny: usize, labels: Vec<Option<u8>>) -> Result<Self> {
        if labels.len() != nx * ny {
            return Err(Error::Design(format!(
                "expected {} labels, got {}",
                nx * ny,
                labels.len()
            )));
        }
        if labels.iter().flatten().any(|&l| l > 1) {
            return Err(Error::Design("labels must be 0 or 1".into()));
        }
        let mask = Self { nx, ny, labels };
        mask.check_identifiable()?;
        Ok(mask)
    }

    fn check_identifiable(&self) -> Result<()> {
        let treated = self.n_treated();
        let n = self.n_valid();
        if treated == 0 || treated == n {
            return Err(Error::Design(format!(
                "layout assigns a single label to all {n} valid cells"
            )));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn label(&self, i: usize, j: usize) -> Option<u8> {
        self.labels[j * self.nx + i]
    }

    pub fn labels(&self) -> &[Option<u8>] {
        &self.labels
    }

    /// Labels of valid cells in canonical order.
    pub fn valid_labels(&self) -> Vec<u8> {
        self.labels.iter().flatten().copied().collect()
    }

    pub fn n_valid(&self) -> usize {
        self.labels.iter().flatten().count()
    }

    pub fn n_treated(&self) -> usize {
        self.labels.iter().flatten().filter(|&&l| l == 1).count()
    }

    /// Returns the mask with every label flipped.
    pub fn complement(&self) -> Self {
        Self {
            nx: self.nx,
            ny: self.ny,
            labels: self.labels.iter().map(|l| l.map(|v| 1 - v)).collect(),
        }
    }

    /// Writes `i,j,label` rows for valid cells.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "i,j,label")?;
        for j in 0..self.ny {
            for i in 0..self.nx {
                if let Some(l) = self.label(i, j) {
                    writeln!(out, "{i},{j},{l}")?;
                }
            }
        }
        Ok(())
    }
}

/// Assigns treatment labels to the valid cells of `grid`.
pub fn assign_design(grid: &YieldGrid, layout: &DesignLayout) -> Result<TreatmentMask> {
    layout.validate()?;
    if grid.n_valid() == 0 {
        return Err(Error::Design("grid has no valid cells".into()));
    }
    let (i0, j0) = grid
        .valid_indices()
        .map(|k| grid.cell_of(k))
        .fold((usize::MAX, usize::MAX), |(a, b), (i, j)| {
            (a.min(i), b.min(j))
        });

    let phase = layout.phase.bit();
    let labels = (0..grid.ny() * grid.nx())
        .map(|k| {
            if !grid.mask()[k] {
                return None;
            }
            let (i, j) = grid.cell_of(k);
            let x = (i - i0) as f64 * grid.dx() + 0.5 * grid.dx();
            let y = (j - j0) as f64 * grid.dy() + 0.5 * grid.dy();
            let band = (x / layout.pass_width).floor() as usize;
            let block = if layout.split_length > 0.0 {
                (y / layout.split_length).floor() as usize
            } else {
                0
            };
            let pass = band.min(layout.n_passes.saturating_sub(1));
            let parity = match layout.kind {
                DesignKind::Strip => pass % 2,
                DesignKind::SplitPlot => block % 2,
                DesignKind::StripSplit => (pass % 2) ^ (block % 2),
                DesignKind::Systematic => (band + block) % 2,
            };
            Some(phase ^ parity as u8)
        })
        .collect();
    let mask = TreatmentMask {
        nx: grid.nx(),
        ny: grid.ny(),
        labels,
    };
    mask.check_identifiable()?;
    Ok(mask)
}

/// Fixed-effects design matrix: an intercept column and a 0/1 treatment
/// indicator, one row per valid cell in canonical order.
pub fn build_design_matrix(mask: &TreatmentMask) -> Result<DMatrix<f64>> {
    let labels = mask.valid_labels();
    let n = labels.len();
    let treated = labels.iter().filter(|&&l| l == 1).count();
    if treated == 0 || treated == n {
        return Err(Error::Design(
            "treatment indicator is constant; design matrix has rank 1".into(),
        ));
    }
    Ok(DMatrix::from_fn(n, 2, |r, c| {
        if c == 0 {
            1.0
        } else {
            labels[r] as f64
        }
    }))
}
