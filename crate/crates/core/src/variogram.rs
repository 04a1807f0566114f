//! Directional empirical variograms and fitted-model curves.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::covariance::{Axis, CovarianceParams, Sites};
use crate::error::{Error, Result};

/// Bins with fewer pairs than this are not reported.
pub const DEFAULT_MIN_PAIRS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramBin {
    pub lag: f64,
    pub semivariance: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalVariogram {
    pub direction: Axis,
    /// Strictly increasing in `lag`.
    pub bins: Vec<VariogramBin>,
}

impl EmpiricalVariogram {
    pub fn total_pairs(&self) -> usize {
        self.bins.iter().map(|b| b.pairs).sum()
    }
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::X => "x",
        Axis::Y => "y",
    }
}

/// Half the site extent along `axis`.
pub fn default_max_lag(sites: &Sites, axis: Axis) -> f64 {
    let (ex, ey) = sites.extent();
    0.5 * match axis {
        Axis::X => ex,
        Axis::Y => ey,
    }
}

#[derive(Default, Clone, Copy)]
struct Acc {
    lag_sum: f64,
    sq_sum: f64,
    pairs: usize,
}

/// Semivariance `mean((vᵢ − vⱼ)²) / 2` over pairs separated along `axis`
/// only, grouped by exact lag up to `max_lag`.
///
/// Lattice sites are paired by integer offsets. Other sites are paired when
/// their offset on the other axis is zero to within 1e-9 of the extent, and
/// lags are grouped on the same resolution.
pub fn empirical_variogram(
    values: &[f64],
    sites: &Sites,
    axis: Axis,
    max_lag: f64,
    min_pairs: usize,
) -> Result<EmpiricalVariogram> {
    let n = values.len();
    if n != sites.len() {
        return Err(Error::InvalidParameter(format!(
            "{n} values for {} sites",
            sites.len()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidParameter(
            "variogram needs at least 2 cells".into(),
        ));
    }
    if !(max_lag > 0.0) {
        return Err(Error::InvalidParameter(format!("max_lag {max_lag}")));
    }
    let along = |l: (f64, f64)| match axis {
        Axis::X => l,
        Axis::Y => (l.1, l.0),
    };

    let mut acc: BTreeMap<u64, Acc> = BTreeMap::new();
    let mut add = |key: u64, lag: f64, d: f64| {
        let a = acc.entry(key).or_default();
        a.lag_sum += lag;
        a.sq_sum += d * d;
        a.pairs += 1;
    };

    if let Some(cells) = sites.lattice_cells() {
        let (dx, dy) = sites.spacing().expect("lattice sites have a spacing");
        let step = match axis {
            Axis::X => dx,
            Axis::Y => dy,
        };
        let tol = 1e-12 * max_lag;
        for r in 0..n {
            for c in r + 1..n {
                let (di, dj) = along((
                    cells[r].0.abs_diff(cells[c].0) as f64,
                    cells[r].1.abs_diff(cells[c].1) as f64,
                ));
                if dj != 0.0 || di == 0.0 {
                    continue;
                }
                let lag = di * step;
                if lag <= max_lag + tol {
                    add(di as u64, lag, values[r] - values[c]);
                }
            }
        }
    } else {
        let (ex, ey) = sites.extent();
        let quantum = 1e-9 * ex.max(ey).max(f64::MIN_POSITIVE);
        for r in 0..n {
            for c in r + 1..n {
                let (h, off) = along(sites.lag(r, c));
                if off > quantum || h <= quantum || h > max_lag + quantum {
                    continue;
                }
                add((h / quantum).round() as u64, h, values[r] - values[c]);
            }
        }
    }

    if acc.is_empty() {
        return Err(Error::EmptyVariogram);
    }
    let bins: Vec<VariogramBin> = acc
        .into_values()
        .filter(|a| a.pairs >= min_pairs.max(1))
        .map(|a| VariogramBin {
            lag: a.lag_sum / a.pairs as f64,
            semivariance: 0.5 * a.sq_sum / a.pairs as f64,
            pairs: a.pairs,
        })
        .collect();
    Ok(EmpiricalVariogram {
        direction: axis,
        bins,
    })
}

/// Model semivariance `c(0,0) − c(h along axis)` at each lag.
pub fn fitted_curve(model: &CovarianceParams, axis: Axis, lags: &[f64]) -> Result<Vec<(f64, f64)>> {
    lags.iter()
        .map(|&h| {
            if h > 0.0 {
                Ok((h, model.directional_semivariance(axis, h)))
            } else {
                Err(Error::Domain(format!(
                    "variogram lag must be positive, got {h}"
                )))
            }
        })
        .collect()
}

/// Rows `direction,lag,semivariance,pairs`, header first.
pub fn write_empirical_csv<W: Write>(variograms: &[EmpiricalVariogram], mut out: W) -> Result<()> {
    writeln!(out, "direction,lag,semivariance,pairs")?;
    for v in variograms {
        for b in &v.bins {
            writeln!(
                out,
                "{},{},{},{}",
                axis_name(v.direction),
                b.lag,
                b.semivariance,
                b.pairs
            )?;
        }
    }
    Ok(())
}

/// Rows `direction,lag,semivariance`, header first.
pub fn write_fitted_csv<W: Write>(curves: &[(Axis, Vec<(f64, f64)>)], mut out: W) -> Result<()> {
    writeln!(out, "direction,lag,semivariance")?;
    for (axis, curve) in curves {
        for (h, g) in curve {
            writeln!(out, "{},{},{}", axis_name(*axis), h, g)?;
        }
    }
    Ok(())
}
