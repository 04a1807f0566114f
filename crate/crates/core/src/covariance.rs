//! Exponential covariance models and covariance-matrix assembly.
//!
//! Two families are supported: the isotropic exponential model with nugget
//! `c0`, sill `c1` and distance parameter `a`, and the sum-metric
//! anisotropic model
//!
//! ```text
//! c(hx, hy) = cx1·exp(-hx/ax) + cy1·exp(-hy/ay) + cxy1·exp(-hxy/axy),
//! hxy = sqrt(hx² + alpha·hy²)
//! ```
//!
//! sharing a single nugget `c0` at zero lag. Lags are absolute
//! axis-aligned coordinate differences in the rotated field frame.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_data::YieldGrid;

/// Relative diagonal jitter added before factorization.
pub const DIAGONAL_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Isotropic,
    Anisotropic,
}

impl ModelKind {
    /// Number of covariance parameters.
    pub fn n_params(self) -> usize {
        match self {
            ModelKind::Isotropic => 3,
            ModelKind::Anisotropic => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Isotropic => "isotropic",
            ModelKind::Anisotropic => "anisotropic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsoExpParams {
    pub c0: f64,
    pub c1: f64,
    pub a: f64,
}

impl IsoExpParams {
    pub fn new(c0: f64, c1: f64, a: f64) -> Result<Self> {
        let p = Self { c0, c1, a };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c0 >= 0.0 && self.c1 > 0.0 && self.a > 0.0)
            || !(self.c0.is_finite() && self.c1.is_finite() && self.a.is_finite())
        {
            return Err(Error::InvalidParameter(format!(
                "isotropic parameters require c0 >= 0, c1 > 0, a > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SumMetricParams {
    pub c0: f64,
    pub cx1: f64,
    pub ax: f64,
    pub cy1: f64,
    pub ay: f64,
    pub cxy1: f64,
    pub axy: f64,
    pub alpha: f64,
}

impl SumMetricParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.c0, self.cx1, self.ax, self.cy1, self.ay, self.cxy1, self.axy, self.alpha,
        ];
        let ok = all.iter().all(|v| v.is_finite())
            && self.c0 >= 0.0
            && self.cx1 >= 0.0
            && self.cy1 >= 0.0
            && self.cxy1 >= 0.0
            && self.cx1 + self.cy1 + self.cxy1 > 0.0
            && self.ax > 0.0
            && self.ay > 0.0
            && self.axy > 0.0
            && self.alpha > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "invalid sum-metric parameters: {self:?}"
            )))
        }
    }

    pub fn total_sill(&self) -> f64 {
        self.cx1 + self.cy1 + self.cxy1
    }
}

/// Isotropic exponential covariance at lag `h >= 0`.
pub fn iso_cov(h: f64, p: &IsoExpParams) -> f64 {
    if h == 0.0 {
        p.c0 + p.c1
    } else {
        p.c1 * (-h / p.a).exp()
    }
}

/// Isotropic exponential semivariance, defined for `h > 0`.
pub fn iso_variogram(h: f64, p: &IsoExpParams) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!(
            "variogram is defined for positive lags, got {h}"
        )));
    }
    Ok(p.c0 + p.c1 * (1.0 - (-h / p.a).exp()))
}

/// Sum-metric anisotropic covariance at lags `(hx, hy)`.
pub fn summetric_cov(hx: f64, hy: f64, p: &SumMetricParams) -> f64 {
    let (hx, hy) = (hx.abs(), hy.abs());
    if hx == 0.0 && hy == 0.0 {
        return p.c0 + p.total_sill();
    }
    let hxy = (hx * hx + p.alpha * hy * hy).sqrt();
    p.cx1 * (-hx / p.ax).exp() + p.cy1 * (-hy / p.ay).exp() + p.cxy1 * (-hxy / p.axy).exp()
}

/// Lag at which the exponential variogram reaches 95% of its sill (`3a`).
pub fn effective_range(p: &IsoExpParams) -> f64 {
    3.0 * p.a
}

/// Either covariance family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceParams {
    Isotropic(IsoExpParams),
    Anisotropic(SumMetricParams),
}

impl From<IsoExpParams> for CovarianceParams {
    fn from(p: IsoExpParams) -> Self {
        CovarianceParams::Isotropic(p)
    }
}

impl From<SumMetricParams> for CovarianceParams {
    fn from(p: SumMetricParams) -> Self {
        CovarianceParams::Anisotropic(p)
    }
}

impl CovarianceParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            CovarianceParams::Isotropic(_) => ModelKind::Isotropic,
            CovarianceParams::Anisotropic(_) => ModelKind::Anisotropic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CovarianceParams::Isotropic(p) => p.validate(),
            CovarianceParams::Anisotropic(p) => p.validate(),
        }
    }

    /// Covariance between two sites separated by `(hx, hy)`.
    #[inline]
    pub fn cov(&self, hx: f64, hy: f64) -> f64 {
        match self {
            CovarianceParams::Isotropic(p) => iso_cov(hx.hypot(hy), p),
            CovarianceParams::Anisotropic(p) => summetric_cov(hx, hy, p),
        }
    }

    /// Variance at zero lag: nugget plus total sill.
    pub fn zero_lag(&self) -> f64 {
        self.cov(0.0, 0.0)
    }

    pub fn nugget(&self) -> f64 {
        match self {
            CovarianceParams::Isotropic(p) => p.c0,
            CovarianceParams::Anisotropic(p) => p.c0,
        }
    }

    /// Semivariance along one axis, `c(0,0) - c(h on axis, 0 on the other)`.
    pub fn directional_semivariance(&self, axis: Axis, h: f64) -> f64 {
        let c = match axis {
            Axis::X => self.cov(h, 0.0),
            Axis::Y => self.cov(0.0, h),
        };
        self.zero_lag() - c
    }

    /// Parameter values in declaration order.
    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            CovarianceParams::Isotropic(p) => vec![p.c0, p.c1, p.a],
            CovarianceParams::Anisotropic(p) => {
                vec![p.c0, p.cx1, p.ax, p.cy1, p.ay, p.cxy1, p.axy, p.alpha]
            }
        }
    }
}

/// Integer lattice positions backing a [`Sites`] set built from a grid.
#[derive(Debug, Clone, PartialEq)]
struct LatticeIndex {
    dx: f64,
    dy: f64,
    cells: Vec<(usize, usize)>,
    span: (usize, usize),
}

/// Ordered observation locations.
///
/// Sites taken from a [`YieldGrid`] remember their lattice indices so that
/// covariance assembly evaluates the model once per distinct lag.
#[derive(Debug, Clone, PartialEq)]
pub struct Sites {
    coords: Vec<(f64, f64)>,
    lattice: Option<LatticeIndex>,
}

impl Sites {
    pub fn from_coords(coords: Vec<(f64, f64)>) -> Self {
        Self {
            coords,
            lattice: None,
        }
    }

    /// Valid-cell centroids of `grid` in canonical order.
    pub fn from_grid(grid: &YieldGrid) -> Self {
        let cells: Vec<(usize, usize)> = grid.valid_indices().map(|k| grid.cell_of(k)).collect();
        Self::from_lattice_cells(grid.origin(), grid.dx(), grid.dy(), cells)
    }

    /// Sites on the lattice `origin + ((i + 0.5)·dx, (j + 0.5)·dy)`.
    pub fn from_lattice_cells(
        origin: (f64, f64),
        dx: f64,
        dy: f64,
        cells: Vec<(usize, usize)>,
    ) -> Self {
        let coords = cells
            .iter()
            .map(|&(i, j)| {
                (
                    origin.0 + (i as f64 + 0.5) * dx,
                    origin.1 + (j as f64 + 0.5) * dy,
                )
            })
            .collect();
        let (mut i0, mut i1, mut j0, mut j1) = (usize::MAX, 0, usize::MAX, 0);
        for &(i, j) in &cells {
            i0 = i0.min(i);
            i1 = i1.max(i);
            j0 = j0.min(j);
            j1 = j1.max(j);
        }
        let span = if cells.is_empty() {
            (0, 0)
        } else {
            (i1 - i0 + 1, j1 - j0 + 1)
        };
        Self {
            coords,
            lattice: Some(LatticeIndex {
                dx,
                dy,
                cells,
                span,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    /// Lattice cell indices, when the sites came from a grid.
    pub fn lattice_cells(&self) -> Option<&[(usize, usize)]> {
        self.lattice.as_ref().map(|l| l.cells.as_slice())
    }

    /// Lattice spacing, when the sites came from a grid.
    pub fn spacing(&self) -> Option<(f64, f64)> {
        self.lattice.as_ref().map(|l| (l.dx, l.dy))
    }

    /// Extent of the sites along each axis. Lattice sites include the cell
    /// footprint, so a single row of cells has extent `dx` rather than 0.
    pub fn extent(&self) -> (f64, f64) {
        if let Some(l) = &self.lattice {
            return (l.span.0 as f64 * l.dx, l.span.1 as f64 * l.dy);
        }
        let (mut x0, mut x1, mut y0, mut y1) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for &(x, y) in &self.coords {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if self.coords.is_empty() {
            (0.0, 0.0)
        } else {
            (x1 - x0, y1 - y0)
        }
    }

    /// Absolute axis-aligned lag between sites `r` and `c`.
    pub fn lag(&self, r: usize, c: usize) -> (f64, f64) {
        match &self.lattice {
            Some(l) => {
                let (a, b) = (l.cells[r], l.cells[c]);
                (
                    a.0.abs_diff(b.0) as f64 * l.dx,
                    a.1.abs_diff(b.1) as f64 * l.dy,
                )
            }
            None => {
                let (a, b) = (self.coords[r], self.coords[c]);
                ((a.0 - b.0).abs(), (a.1 - b.1).abs())
            }
        }
    }
}

/// Dense covariance matrix over `sites` in their given order.
pub fn build_cov_matrix(sites: &Sites, model: &CovarianceParams) -> Result<DMatrix<f64>> {
    let n = sites.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "covariance matrix needs at least 2 sites, got {n}"
        )));
    }
    let mut v = DMatrix::zeros(n, n);
    match &sites.lattice {
        Some(l) => {
            let (si, sj) = l.span;
            let mut table = vec![0.0; si * sj];
            for dj in 0..sj {
                for di in 0..si {
                    table[dj * si + di] = model.cov(di as f64 * l.dx, dj as f64 * l.dy);
                }
            }
            for c in 0..n {
                let (ic, jc) = l.cells[c];
                for r in c..n {
                    let (ir, jr) = l.cells[r];
                    let val = table[jr.abs_diff(jc) * si + ir.abs_diff(ic)];
                    v[(r, c)] = val;
                    v[(c, r)] = val;
                }
            }
        }
        None => {
            for c in 0..n {
                for r in c..n {
                    let (hx, hy) = sites.lag(r, c);
                    let val = model.cov(hx, hy);
                    v[(r, c)] = val;
                    v[(c, r)] = val;
                }
            }
        }
    }
    Ok(v)
}

/// Adds the conditioning jitter to the diagonal of `v` in place.
pub fn condition(v: &mut DMatrix<f64>, model: &CovarianceParams) {
    let jitter = DIAGONAL_JITTER * model.zero_lag();
    for k in 0..v.nrows() {
        v[(k, k)] += jitter;
    }
}

/// Conditions and Cholesky-factorizes the covariance matrix of `model`.
pub fn cov_cholesky(sites: &Sites, model: &CovarianceParams) -> Result<Cholesky<f64, Dyn>> {
    let mut v = build_cov_matrix(sites, model)?;
    condition(&mut v, model);
    Cholesky::new(v).ok_or_else(|| Error::IllConditioned {
        theta: model.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn iso() -> IsoExpParams {
        IsoExpParams::new(0.1, 0.9, 10.0).unwrap()
    }

    #[test]
    fn iso_cov_values() {
        assert_eq!(iso_cov(0.0, &iso()), 1.0);
        assert_abs_diff_eq!(
            iso_cov(10.0, &iso()),
            0.9 * (-1.0f64).exp(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(iso_cov(10.0, &iso()), 0.331091, epsilon = 1e-6);
        assert!(iso_cov(300.0, &iso()) < 1e-12);
    }

    #[test]
    fn iso_cov_is_decreasing_with_nugget_jump() {
        let p = iso();
        let mut prev = iso_cov(1e-12, &p);
        assert_abs_diff_eq!(iso_cov(0.0, &p) - prev, p.c0, epsilon = 1e-9);
        for k in 1..200 {
            let c = iso_cov(k as f64 * 0.5, &p);
            assert!(c < prev);
            prev = c;
        }
    }

    #[test]
    fn variogram_values() {
        let p = iso();
        assert_abs_diff_eq!(iso_variogram(1e-12, &p).unwrap(), p.c0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            iso_variogram(30.0, &p).unwrap(),
            p.c0 + (1.0 - (-3.0f64).exp()) * p.c1,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            iso_variogram(30.0, &p).unwrap(),
            p.c0 + 0.95021 * p.c1,
            epsilon = 1e-5
        );
        for h in [1.0, 5.0, 50.0] {
            assert_abs_diff_eq!(
                iso_variogram(h, &p).unwrap() + iso_cov(h, &p),
                p.c0 + p.c1,
                epsilon = 1e-14
            );
        }
        assert!(matches!(iso_variogram(0.0, &p), Err(Error::Domain(_))));
    }

    #[test]
    fn summetric_values() {
        let p = SumMetricParams {
            c0: 0.1,
            cx1: 0.2,
            ax: 3.0,
            cy1: 0.3,
            ay: 4.0,
            cxy1: 0.4,
            axy: 5.0,
            alpha: 2.0,
        };
        assert_abs_diff_eq!(summetric_cov(0.0, 0.0, &p), 1.0, epsilon = 1e-15);
        assert_eq!(summetric_cov(-2.0, 3.0, &p), summetric_cov(2.0, -3.0, &p));

        let q = SumMetricParams {
            c0: 0.0,
            cx1: 0.0,
            ax: 1.0,
            cy1: 0.0,
            ay: 1.0,
            cxy1: 1.0,
            axy: 5.0,
            alpha: 1.0,
        };
        assert_abs_diff_eq!(
            summetric_cov(3.0, 4.0, &q),
            (-1.0f64).exp(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(summetric_cov(3.0, 4.0, &q), 0.367879, epsilon = 1e-6);
    }

    #[test]
    fn summetric_reduces_to_iso() {
        let p = iso();
        let q = SumMetricParams {
            c0: p.c0,
            cx1: 0.0,
            ax: 7.0,
            cy1: 0.0,
            ay: 9.0,
            cxy1: p.c1,
            axy: p.a,
            alpha: 1.0,
        };
        for (hx, hy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 2.5), (3.0, 4.0), (12.0, 0.5)] {
            assert_abs_diff_eq!(
                summetric_cov(hx, hy, &q),
                iso_cov((hx * hx + hy * hy).sqrt(), &p),
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn effective_range_rule() {
        assert_eq!(effective_range(&iso()), 30.0);
        // back-derived from a reported 46.1 m effective range
        let p = IsoExpParams::new(0.0, 0.036, 15.37).unwrap();
        assert_abs_diff_eq!(effective_range(&p), 46.1, epsilon = 0.01);
        let r = iso_variogram(effective_range(&p), &p).unwrap();
        assert!(r >= p.c0 + 0.95 * p.c1);
    }

    #[test]
    fn two_site_matrix() {
        let sites = Sites::from_coords(vec![(0.0, 0.0), (3.0, 4.0)]);
        let v = build_cov_matrix(&sites, &iso().into()).unwrap();
        assert_eq!(v[(0, 0)], 1.0);
        assert_eq!(v[(1, 1)], 1.0);
        assert_abs_diff_eq!(v[(0, 1)], iso_cov(5.0, &iso()), epsilon = 1e-15);
        assert_eq!(v, v.transpose());
    }

    #[test]
    fn too_few_sites() {
        let sites = Sites::from_coords(vec![(0.0, 0.0)]);
        assert!(build_cov_matrix(&sites, &iso().into()).is_err());
    }

    #[test]
    fn lattice_matrix_matches_double_loop() {
        let grid = YieldGrid::from_values((10.0, 20.0), 2.5, 5.0, 3, 3, vec![1.0; 9]).unwrap();
        let sites = Sites::from_grid(&grid);
        let models: [CovarianceParams; 2] = [
            iso().into(),
            SumMetricParams {
                c0: 0.05,
                cx1: 0.2,
                ax: 4.0,
                cy1: 0.5,
                ay: 20.0,
                cxy1: 0.3,
                axy: 8.0,
                alpha: 0.4,
            }
            .into(),
        ];
        for model in &models {
            let v = build_cov_matrix(&sites, model).unwrap();
            for r in 0..9 {
                for c in 0..9 {
                    let (i1, j1) = grid.cell_of(r);
                    let (i2, j2) = grid.cell_of(c);
                    let (x1, y1) = grid.centroid(i1, j1);
                    let (x2, y2) = grid.centroid(i2, j2);
                    let expected = model.cov((x1 - x2).abs(), (y1 - y2).abs());
                    assert_abs_diff_eq!(v[(r, c)], expected, epsilon = 1e-14);
                }
            }
            assert_eq!(v, v.transpose());
        }
    }

    #[test]
    fn anisotropic_reduction_matrix() {
        let grid = YieldGrid::from_values((0.0, 0.0), 2.5, 2.5, 4, 3, vec![1.0; 12]).unwrap();
        let sites = Sites::from_grid(&grid);
        let p = iso();
        let q = SumMetricParams {
            c0: p.c0,
            cx1: 0.0,
            ax: 1.0,
            cy1: 0.0,
            ay: 1.0,
            cxy1: p.c1,
            axy: p.a,
            alpha: 1.0,
        };
        let a = build_cov_matrix(&sites, &p.into()).unwrap();
        let b = build_cov_matrix(&sites, &q.into()).unwrap();
        assert!((a - b).abs().max() <= 1e-14);
    }

    #[test]
    fn cholesky_reports_theta_on_failure() {
        let sites = Sites::from_coords(vec![(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        // a negative nugget makes the diagonal negative
        let bad: CovarianceParams = IsoExpParams {
            c0: -1.0,
            c1: 0.5,
            a: 1.0,
        }
        .into();
        match cov_cholesky(&sites, &bad) {
            Err(Error::IllConditioned { theta }) => assert_eq!(theta, vec![-1.0, 0.5, 1.0]),
            other => panic!("expected failure, got {other:?}"),
        }
    }
}
