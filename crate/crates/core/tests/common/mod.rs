//! Independent reference implementations shared by integration tests.
//!
//! Nothing here calls into the library's covariance assembly, Cholesky
//! path or QR least squares.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Isotropic exponential covariance written out directly.
pub fn iso_cov(h: f64, c0: f64, c1: f64, a: f64) -> f64 {
    if h == 0.0 {
        c0 + c1
    } else {
        c1 * (-h / a).exp()
    }
}

/// Negative restricted log-likelihood from an explicitly inverted `V`
/// assembled pair by pair from coordinates.
pub fn naive_reml_iso(
    (c0, c1, a): (f64, f64, f64),
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    coords: &[(f64, f64)],
) -> f64 {
    let n = coords.len();
    let mut v = DMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            let h = (coords[r].0 - coords[c].0).hypot(coords[r].1 - coords[c].1);
            v[(r, c)] = iso_cov(h, c0, c1, a);
        }
        v[(r, r)] += 1e-10 * (c0 + c1);
    }
    let p = x.ncols();
    let vi = v.clone().try_inverse().expect("V invertible");
    let xtvix = x.transpose() * &vi * x;
    let inner = xtvix.clone().try_inverse().expect("XᵀV⁻¹X invertible");
    let proj = &vi - &vi * x * inner * x.transpose() * &vi;
    let quad = (y.transpose() * proj * y)[(0, 0)];
    0.5 * ((n - p) as f64 * (2.0 * std::f64::consts::PI).ln()
        + v.determinant().ln()
        + xtvix.determinant().ln()
        + quad)
}

/// `(XᵀX)⁻¹Xᵀy` by explicit inversion of the normal equations.
pub fn normal_equation_ols(y: &DVector<f64>, x: &DMatrix<f64>) -> DVector<f64> {
    let xtx = x.transpose() * x;
    xtx.try_inverse().expect("full rank") * x.transpose() * y
}

/// Centroids of a fully valid unit lattice in canonical order.
pub fn unit_lattice_coords(nx: usize, ny: usize) -> Vec<(f64, f64)> {
    (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i as f64 + 0.5, j as f64 + 0.5)))
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
