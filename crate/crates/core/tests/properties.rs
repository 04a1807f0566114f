mod common;

use fieldstat::covariance::Axis;
use fieldstat::covariance::{
    build_cov_matrix, iso_cov, iso_variogram, summetric_cov, CovarianceParams, IsoExpParams, Sites,
    SumMetricParams,
};
use fieldstat::design::{assign_design, build_design_matrix, DesignKind, DesignLayout, Phase};
use fieldstat::field_data::{
    aggregate_to_grid, align_rows, rotate_coordinates, trim_edges, FieldGeometry, YieldGrid,
    YieldPoint,
};
use fieldstat::inference::{fit_ols, gls_beta, wald_test};
use fieldstat::variogram::empirical_variogram;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = YieldPoint> {
    (-500.0f64..500.0, -500.0f64..500.0, 0.0f64..20.0)
        .prop_map(|(x, y, v)| YieldPoint::new(x, y, v).unwrap())
}

fn iso_params() -> impl Strategy<Value = IsoExpParams> {
    (0.0f64..2.0, 0.01f64..5.0, 0.1f64..50.0).prop_map(|(c0, c1, a)| IsoExpParams { c0, c1, a })
}

fn summetric() -> impl Strategy<Value = SumMetricParams> {
    (
        0.0f64..1.0,
        (0.0f64..2.0, 0.1f64..30.0),
        (0.0f64..2.0, 0.1f64..30.0),
        (0.0f64..2.0, 0.1f64..30.0),
        0.1f64..10.0,
    )
        .prop_map(
            |(c0, (cx1, ax), (cy1, ay), (cxy1, axy), alpha)| SumMetricParams {
                c0,
                cx1,
                ax,
                cy1,
                ay,
                cxy1,
                axy,
                alpha,
            },
        )
}

fn full_grid(nx: usize, ny: usize, d: f64, values: Vec<f64>) -> YieldGrid {
    YieldGrid::from_values((0.0, 0.0), d, d, nx, ny, values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_preserves_distances(
        pts in proptest::collection::vec(point(), 2..30),
        heading in -7.0f64..7.0,
    ) {
        let r = rotate_coordinates(&pts, heading).unwrap();
        for a in 0..pts.len() {
            for b in 0..pts.len() {
                let d0 = (pts[a].x - pts[b].x).hypot(pts[a].y - pts[b].y);
                let d1 = (r[a].x - r[b].x).hypot(r[a].y - r[b].y);
                prop_assert!((d0 - d1).abs() < 1e-10);
            }
            prop_assert_eq!(r[a].value, pts[a].value);
        }
    }

    #[test]
    fn aggregation_conserves_mass(
        pts in proptest::collection::vec(point(), 1..200),
        dx in 0.5f64..50.0,
        dy in 0.5f64..50.0,
    ) {
        let g = aggregate_to_grid(&pts, dx, dy).unwrap();
        let total: f64 = pts.iter().map(|p| p.value).sum();
        let binned: f64 = g
            .valid_indices()
            .map(|k| g.values()[k] * g.counts()[k] as f64)
            .sum();
        prop_assert!((total - binned).abs() <= 1e-9 * total.abs().max(1.0));
        let n: u32 = g.counts().iter().sum();
        prop_assert_eq!(n as usize, pts.len());
    }

    #[test]
    fn trimming_is_idempotent(
        nx in 2usize..30,
        ny in 2usize..30,
        side in 0.0f64..6.0,
        head in 0.0f64..6.0,
    ) {
        let g = full_grid(nx, ny, 1.0, vec![1.0; nx * ny]);
        let geom = FieldGeometry {
            width_x: nx as f64,
            length_y: ny as f64,
            heading: 0.0,
            headland_margin: head,
            side_margin: side,
        };
        if let Ok(once) = trim_edges(&g, &geom) {
            prop_assert_eq!(trim_edges(&once, &geom).unwrap(), once);
        }
    }

    #[test]
    fn alignment_is_idempotent(
        rows in proptest::collection::vec((0usize..12, 0.0f64..1.0, 0.0f64..100.0), 1..60),
        row_width in 0.1f64..20.0,
        jitter in 0.0f64..0.3,
    ) {
        let pts: Vec<YieldPoint> = rows
            .iter()
            .map(|&(r, u, y)| {
                YieldPoint::new((r as f64 + 0.5 + jitter * (u - 0.5)) * row_width, y, 1.0).unwrap()
            })
            .collect();
        if let Ok(once) = align_rows(&pts, row_width) {
            prop_assert_eq!(align_rows(&once, row_width).unwrap(), once);
        }
    }

    #[test]
    fn iso_variogram_and_covariance_sum_to_sill(p in iso_params(), h in 1e-6f64..500.0) {
        let total = iso_variogram(h, &p).unwrap() + iso_cov(h, &p);
        prop_assert!((total - (p.c0 + p.c1)).abs() <= 1e-12 * (p.c0 + p.c1).max(1.0));
    }

    #[test]
    fn iso_cov_decreases_with_lag(p in iso_params(), h in 1e-6f64..200.0, dh in 1e-3f64..50.0) {
        prop_assert!(iso_cov(h + dh, &p) <= iso_cov(h, &p));
        prop_assert!(iso_cov(h, &p) <= p.c1);
        // the jump at zero is the nugget, up to rounding of c0 + c1
        let jump = iso_cov(0.0, &p) - iso_cov(1e-300, &p);
        prop_assert!((jump - p.c0).abs() <= 4.0 * f64::EPSILON * (p.c0 + p.c1));
    }

    #[test]
    fn summetric_semivariance_is_bounded(
        p in summetric(),
        hx in 0.0f64..200.0,
        hy in 0.0f64..200.0,
    ) {
        let g = summetric_cov(0.0, 0.0, &p) - summetric_cov(hx, hy, &p);
        prop_assert!(g >= 0.0);
        let bound = if hx == 0.0 && hy == 0.0 { 0.0 } else { p.c0 + p.cx1 + p.cy1 + p.cxy1 };
        prop_assert!(g <= bound + 1e-12);
    }

    #[test]
    fn summetric_reduces_to_isotropic(
        iso in iso_params(),
        cells in proptest::collection::btree_set((0usize..6, 0usize..6), 2..12),
    ) {
        let sites = Sites::from_lattice_cells((0.0, 0.0), 2.0, 3.0, cells.into_iter().collect());
        let aniso = SumMetricParams {
            c0: iso.c0, cx1: 0.0, ax: 1.0, cy1: 0.0, ay: 1.0, cxy1: iso.c1, axy: iso.a, alpha: 1.0,
        };
        let vi = build_cov_matrix(&sites, &iso.into()).unwrap();
        let va = build_cov_matrix(&sites, &aniso.into()).unwrap();
        prop_assert!((vi - va).amax() <= 1e-14);
    }

    #[test]
    fn covariance_matrix_is_exchangeable(
        p in summetric(),
        coords in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0), 2..10),
        seed in any::<u64>(),
    ) {
        let n = coords.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for k in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(k, (s >> 33) as usize % (k + 1));
        }
        let model: CovarianceParams = p.into();
        let v = build_cov_matrix(&Sites::from_coords(coords.clone()), &model).unwrap();
        let shuffled: Vec<(f64, f64)> = perm.iter().map(|&k| coords[k]).collect();
        let w = build_cov_matrix(&Sites::from_coords(shuffled), &model).unwrap();
        for r in 0..n {
            for c in 0..n {
                prop_assert_eq!(w[(r, c)], v[(perm[r], perm[c])]);
            }
        }
    }

    #[test]
    fn gls_with_scaled_identity_matches_ols(
        ys in proptest::collection::vec(-10.0f64..10.0, 12),
        treated in proptest::collection::vec(any::<bool>(), 12),
        s2 in 0.01f64..100.0,
    ) {
        prop_assume!(treated.iter().any(|&t| t) && treated.iter().any(|&t| !t));
        let x = DMatrix::from_fn(12, 2, |r, c| if c == 0 { 1.0 } else { treated[r] as u8 as f64 });
        let y = DVector::from_vec(ys);
        let g = gls_beta(&(DMatrix::identity(12, 12) * s2), &x, &y).unwrap();
        let o = fit_ols(&y, &x).unwrap();
        for k in 0..2 {
            prop_assert!((g.beta[k] - o.beta[k]).abs() <= 1e-10 * o.beta[k].abs().max(1.0));
        }
        // cov(beta) symmetric positive definite, se from its diagonal
        let cb = &g.cov_beta;
        prop_assert!((cb[(0, 1)] - cb[(1, 0)]).abs() <= 1e-14 * cb.amax());
        prop_assert!(cb.clone().cholesky().is_some());
        let se = g.se();
        for k in 0..2 {
            prop_assert_eq!(se[k], cb[(k, k)].sqrt());
        }
    }

    #[test]
    fn z_sign_follows_beta(beta in -100.0f64..100.0, se in 1e-3f64..10.0) {
        let (z, p) = wald_test(beta, se);
        prop_assert_eq!(z.signum(), beta.signum());
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn phase_flip_complements_labels(
        nx in 4usize..30,
        ny in 4usize..30,
        kind in prop_oneof![
            Just(DesignKind::Strip),
            Just(DesignKind::SplitPlot),
            Just(DesignKind::StripSplit),
            Just(DesignKind::Systematic),
        ],
        pass_width in 1.0f64..8.0,
        split_length in 1.0f64..8.0,
    ) {
        let g = full_grid(nx, ny, 1.0, vec![1.0; nx * ny]);
        let layout = DesignLayout {
            kind, pass_width, n_passes: 2, split_length, phase: Phase::Control,
        };
        let flipped = DesignLayout { phase: Phase::Treatment, ..layout };
        match (assign_design(&g, &layout), assign_design(&g, &flipped)) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.complement(), b.clone());
                prop_assert_eq!(assign_design(&g, &layout).unwrap(), a.clone());
                let x = build_design_matrix(&a).unwrap();
                prop_assert_eq!(x.column(1).sum() as usize, a.n_treated());
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "phase changed identifiability"),
        }
    }

    #[test]
    fn strip_bands_are_uniform_along_y(
        nx in 4usize..30,
        ny in 1usize..20,
        pass_width in 1.0f64..8.0,
        n_passes in 2usize..6,
    ) {
        let g = YieldGrid::from_values((0.0, 0.0), 1.0, 1.0, nx, ny.max(2), vec![1.0; nx * ny.max(2)]).unwrap();
        let layout = DesignLayout {
            kind: DesignKind::Strip, pass_width, n_passes, split_length: 0.0, phase: Phase::Control,
        };
        if let Ok(m) = assign_design(&g, &layout) {
            for i in 0..nx {
                let first = m.label(i, 0);
                for j in 1..ny.max(2) {
                    prop_assert_eq!(m.label(i, j), first);
                }
            }
        }
    }

    #[test]
    fn variogram_shift_and_scale(
        nx in 2usize..8,
        ny in 2usize..8,
        seed_values in proptest::collection::vec(-5.0f64..5.0, 64),
        shift in -100.0f64..100.0,
    ) {
        let n = nx * ny;
        let values: Vec<f64> = seed_values[..n].to_vec();
        let sites = Sites::from_lattice_cells(
            (0.0, 0.0), 1.0, 1.0, common::unit_lattice_coords(nx, ny)
                .iter().map(|&(x, y)| (x as usize, y as usize)).collect(),
        );
        for axis in [Axis::X, Axis::Y] {
            let max_lag = 5.0;
            let base = empirical_variogram(&values, &sites, axis, max_lag, 1).unwrap();
            let moved: Vec<f64> = values.iter().map(|v| v + shift).collect();
            let doubled: Vec<f64> = values.iter().map(|v| 2.0 * v).collect();
            let m = empirical_variogram(&moved, &sites, axis, max_lag, 1).unwrap();
            let d = empirical_variogram(&doubled, &sites, axis, max_lag, 1).unwrap();
            for ((b, mb), db) in base.bins.iter().zip(&m.bins).zip(&d.bins) {
                prop_assert!((b.semivariance - mb.semivariance).abs() <= 1e-9 * (1.0 + b.semivariance));
                prop_assert!((4.0 * b.semivariance - db.semivariance).abs() <= 1e-12 * (1.0 + db.semivariance));
                prop_assert!(b.semivariance >= 0.0 && b.pairs >= 1);
            }
            prop_assert!(base.bins.windows(2).all(|w| w[0].lag < w[1].lag));
            // every axis-aligned pair within max_lag is counted once
            let (len, other) = match axis { Axis::X => (nx, ny), Axis::Y => (ny, nx) };
            let expected: usize = (1..len).filter(|&d| d as f64 <= max_lag).map(|d| (len - d) * other).sum();
            prop_assert_eq!(base.total_pairs(), expected);
        }
    }
}

#[test]
fn lattice_and_coordinate_sites_agree() {
    let cells: Vec<(usize, usize)> = vec![(0, 0), (3, 1), (2, 4), (5, 5), (1, 2)];
    let lat = Sites::from_lattice_cells((10.0, -4.0), 2.5, 1.5, cells);
    let free = Sites::from_coords(lat.coords().to_vec());
    let model: CovarianceParams = SumMetricParams {
        c0: 0.1,
        cx1: 0.3,
        ax: 2.0,
        cy1: 0.5,
        ay: 9.0,
        cxy1: 0.2,
        axy: 4.0,
        alpha: 3.0,
    }
    .into();
    let a = build_cov_matrix(&lat, &model).unwrap();
    let b = build_cov_matrix(&free, &model).unwrap();
    assert!((a - b).amax() < 1e-14);
}
