use libm::erfc;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::error::{Error, Result};

/// Index of the treatment coefficient in the two-column design matrix.
pub const TREATMENT: usize = 1;

/// Two-sided normal quantile for 95% intervals.
pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq)]
pub struct GlsEstimate {
    pub beta: DVector<f64>,
    /// `(XᵀV⁻¹X)⁻¹`
    pub cov_beta: DMatrix<f64>,
}

impl GlsEstimate {
    pub fn se(&self) -> DVector<f64> {
        self.cov_beta.diagonal().map(f64::sqrt)
    }
}

/// Result of whitening `X` and `y` by a covariance factor `L`.
pub(crate) struct Whitened {
    pub estimate: GlsEstimate,
    /// `log |XᵀV⁻¹X|`
    pub log_det_xtvx: f64,
    /// `yᵀPy`, the generalized residual sum of squares.
    pub quad: f64,
}

/// GLS given the Cholesky factor of `V`: solves `L [Xs ys] = [X y]` and
/// works with the whitened system.
pub(crate) fn whitened_gls(
    chol: &Cholesky<f64, Dyn>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<Whitened> {
    let (n, p) = x.shape();
    let mut rhs = DMatrix::zeros(n, p + 1);
    rhs.columns_mut(0, p).copy_from(x);
    rhs.column_mut(p).copy_from(y);
    if !chol.l_dirty().solve_lower_triangular_mut(&mut rhs) {
        return Err(Error::Rank("triangular solve failed".into()));
    }
    let xs = rhs.columns(0, p);
    let ys = rhs.column(p);
    let xtvx = xs.transpose() * xs;
    let xtvy = xs.transpose() * ys;
    let inner =
        Cholesky::new(xtvx).ok_or_else(|| Error::Rank("XᵀV⁻¹X is not positive definite".into()))?;
    let log_det_xtvx = 2.0
        * inner
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let beta = inner.solve(&xtvy);
    let resid = ys - xs * &beta;
    let quad = resid.dot(&resid);
    Ok(Whitened {
        estimate: GlsEstimate {
            beta,
            cov_beta: inner.inverse(),
        },
        log_det_xtvx,
        quad,
    })
}

/// Generalized least squares, `β = (XᵀV⁻¹X)⁻¹XᵀV⁻¹y`, via Cholesky of `V`.
pub fn gls_beta(v: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<GlsEstimate> {
    check_shapes(x, y)?;
    if v.shape() != (y.len(), y.len()) {
        return Err(Error::InvalidParameter(format!(
            "V is {:?}, expected {n}x{n}",
            v.shape(),
            n = y.len()
        )));
    }
    let chol =
        Cholesky::new(v.clone()).ok_or_else(|| Error::Rank("V is not positive definite".into()))?;
    Ok(whitened_gls(&chol, x, y)?.estimate)
}

fn check_shapes(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::InvalidParameter(format!(
            "X has {} rows but y has {} entries",
            x.nrows(),
            y.len()
        )));
    }
    if x.ncols() == 0 {
        return Err(Error::InvalidParameter("X has no columns".into()));
    }
    Ok(())
}

/// Ordinary least squares fit with independent errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OlsFit {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub sigma2: f64,
    pub z: f64,
    /// Two-sided p-value of the treatment coefficient.
    pub p_value: f64,
}

impl OlsFit {
    pub fn treatment_effect(&self) -> f64 {
        self.beta[TREATMENT.min(self.beta.len() - 1)]
    }

    pub fn treatment_se(&self) -> f64 {
        self.se[TREATMENT.min(self.se.len() - 1)]
    }
}

/// OLS via Householder QR. `sigma2 = RSS / (n - p)`.
pub fn fit_ols(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<OlsFit> {
    check_shapes(x, y)?;
    let (n, p) = x.shape();
    if n <= p {
        return Err(Error::Rank(format!(
            "need more than {p} observations, got {n}"
        )));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if r.diagonal()
        .iter()
        .any(|d| d.abs() <= 1e-12 * scale.max(1e-300))
    {
        return Err(Error::Rank(format!("X does not have full column rank {p}")));
    }
    let qty = qr.q().transpose() * y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Rank("singular R".into()))?;
    let resid = y - x * &beta;
    let sigma2 = resid.dot(&resid) / (n - p) as f64;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::Rank("singular R".into()))?;
    let unscaled = &r_inv * r_inv.transpose();
    let se: Vec<f64> = unscaled
        .diagonal()
        .iter()
        .map(|d| (sigma2 * d).sqrt())
        .collect();
    let j = TREATMENT.min(p - 1);
    let (z, p_value) = if se[j] > 0.0 {
        wald_test(beta[j], se[j])
    } else {
        // exact fit: the test is undefined; report no evidence either way
        (0.0, 1.0)
    };
    Ok(OlsFit {
        beta: beta.iter().copied().collect(),
        se,
        sigma2,
        z,
        p_value,
    })
}

/// Two-sided z-test of a coefficient: `(z, 2·(1 − Φ(|z|)))`.
pub fn wald_test(beta: f64, se: f64) -> (f64, f64) {
    let z = beta / se;
    (z, erfc(z.abs() / std::f64::consts::SQRT_2))
}

/// Akaike information criterion, `−2ℓ + 2k`.
pub fn aic(loglik: f64, k: usize) -> f64 {
    -2.0 * loglik + 2.0 * k as f64
}

/// 95% normal confidence interval `β ± 1.96·se`.
pub fn confidence_interval(beta: f64, se: f64) -> (f64, f64) {
    (beta - Z_975 * se, beta + Z_975 * se)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_col(ind: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(ind.len(), 2, |r, c| if c == 0 { 1.0 } else { ind[r] })
    }

    #[test]
    fn identity_gls_is_ols() {
        let x = two_col(&[0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 4.0, 3.5, 5.0]);
        let g = gls_beta(&DMatrix::identity(5, 5), &x, &y).unwrap();
        let o = fit_ols(&y, &x).unwrap();
        for k in 0..2 {
            assert_abs_diff_eq!(g.beta[k], o.beta[k], epsilon = 1e-13);
        }
    }

    #[test]
    fn exact_fit_has_zero_quadratic_form() {
        let x = two_col(&[0.0, 1.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, -0.5]);
        let y = &x * &b;
        let v = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let chol = Cholesky::new(v).unwrap();
        let w = whitened_gls(&chol, &x, &y).unwrap();
        assert_abs_diff_eq!(w.estimate.beta[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(w.estimate.beta[1], -0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(w.quad, 0.0, epsilon = 1e-24);
    }

    #[test]
    fn weighted_four_point_system() {
        // x = (0, 1, 0, 1), y = (1, 3, 2, 6), V = diag(1, 1, 4, 4).
        // Weights w = (1, 1, 1/4, 1/4). Normal equations by hand:
        //   [Σw    Σwx ] b = [Σwy  ]     [2.5   1.25] b = [4.0+0.5+1.5] = [6.0 ]
        //   [Σwx   Σwx²]     [Σwxy ]     [1.25  1.25]     [3.0+1.5    ]   [4.5 ]
        // det = 3.125 - 1.5625 = 1.5625
        //   b0 = (6.0*1.25 - 1.25*4.5)/1.5625 = 1.2
        //   b1 = (2.5*4.5 - 1.25*6.0)/1.5625 = 2.4
        let x = two_col(&[0.0, 1.0, 0.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 3.0, 2.0, 6.0]);
        let v = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 4.0, 4.0]));
        let g = gls_beta(&v, &x, &y).unwrap();
        assert_abs_diff_eq!(g.beta[0], 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(g.beta[1], 2.4, epsilon = 1e-12);
        // (XᵀV⁻¹X)⁻¹ = [1.25 -1.25; -1.25 2.5] / 1.5625
        assert_abs_diff_eq!(g.cov_beta[(0, 0)], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(g.cov_beta[(0, 1)], -0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(g.cov_beta[(1, 1)], 1.6, epsilon = 1e-12);
    }

    #[test]
    fn singular_information_is_rank_error() {
        let x = DMatrix::from_fn(4, 2, |_, _| 1.0);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            gls_beta(&DMatrix::identity(4, 4), &x, &y),
            Err(Error::Rank(_))
        ));
        assert!(matches!(fit_ols(&y, &x), Err(Error::Rank(_))));
    }

    #[test]
    fn constant_response() {
        let x = two_col(&[0.0, 1.0, 0.0, 1.0, 1.0]);
        let y = DVector::from_element(5, 4.2);
        let o = fit_ols(&y, &x).unwrap();
        assert_abs_diff_eq!(o.beta[0], 4.2, epsilon = 1e-12);
        assert_abs_diff_eq!(o.beta[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn balanced_groups_give_mean_difference() {
        let x = two_col(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 2.5, 4.5, 6.5]);
        let o = fit_ols(&y, &x).unwrap();
        assert_abs_diff_eq!(o.beta[1], 4.5 - 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(o.beta[0], 2.0, epsilon = 1e-12);
        // RSS = (1+0+1) + (4+0+4) = 10, n - p = 4
        assert_abs_diff_eq!(o.sigma2, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn wald_values() {
        assert_eq!(wald_test(0.0, 1.0), (0.0, 1.0));
        let (z, p) = wald_test(0.3, 0.1);
        assert_abs_diff_eq!(z, 3.0, epsilon = 1e-12);
        // 2·(1 − Φ(3)) = 0.0026997960632601866
        assert_abs_diff_eq!(p, 0.002_699_796_063_260_186_6, epsilon = 1e-14);
        assert_abs_diff_eq!(p, 0.00270, epsilon = 5e-6);
        let (_, p2) = wald_test(3.0, 1.0);
        assert_abs_diff_eq!(p, p2, epsilon = 1e-15);
        let (zn, pn) = wald_test(-0.3, 0.1);
        assert!(zn < 0.0);
        assert_abs_diff_eq!(pn, p, epsilon = 1e-15);
    }

    #[test]
    fn aic_values() {
        assert_eq!(aic(-100.0, 3), 206.0);
        assert_eq!(aic(-50.0, 8) - aic(-50.0, 3), 10.0);
        let d1 = aic(-10.0, 3) - aic(-12.0, 8);
        let d2 = aic(-10.0 + 7.5, 3) - aic(-12.0 + 7.5, 8);
        assert_abs_diff_eq!(d1, d2, epsilon = 1e-12);
    }

    #[test]
    fn ci_half_width() {
        let (lo, hi) = confidence_interval(0.3, 0.07);
        assert_abs_diff_eq!((hi - lo) / 2.0, Z_975 * 0.07, epsilon = 1e-12);
        assert_abs_diff_eq!(Z_975, 1.959964, epsilon = 1e-6);
    }
}
