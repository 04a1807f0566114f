//! Derivative-free Nelder–Mead simplex minimization.
//!
//! Uses the dimension-adaptive coefficients of Gao & Han (2012), which keep
//! the simplex from collapsing prematurely in 8-parameter searches.
//! Non-finite objective values are treated as `+inf`.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    /// Offset of each initial vertex from the start along one coordinate.
    pub initial_step: f64,
    pub max_iterations: usize,
    /// Stop once every vertex lies within this infinity-norm distance of
    /// the best vertex.
    pub diameter_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            initial_step: 0.5,
            max_iterations: 500,
            diameter_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fmin: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective value after each iteration.
    pub history: Vec<f64>,
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let nf = n.max(1) as f64;
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);
    let mut evals = 0usize;
    let mut eval = |x: &[f64]| {
        evals += 1;
        sanitize(f(x))
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for k in 0..n {
        let mut v = x0.to_vec();
        v[k] += opts.initial_step;
        simplex.push(v);
    }
    let mut fvals: Vec<f64> = simplex.iter().map(|v| eval(v)).collect();

    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut order: Vec<usize> = (0..=n).collect();

    loop {
        order.sort_by(|&a, &b| fvals[a].total_cmp(&fvals[b]));
        let best = order[0];
        let worst = order[n];

        let diameter = simplex
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&simplex[best])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if diameter < opts.diameter_tol && fvals[best].is_finite() {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations || n == 0 {
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for &k in &order[..n] {
            for (c, x) in centroid.iter_mut().zip(&simplex[k]) {
                *c += x / nf;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[worst])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(alpha);
        let fr = eval(&xr);
        let f_best = fvals[best];
        let f_second = fvals[order[n - 1]];
        let f_worst = fvals[worst];

        if fr < f_best {
            let xe = along(alpha * gamma);
            let fe = eval(&xe);
            if fe < fr {
                simplex[worst] = xe;
                fvals[worst] = fe;
            } else {
                simplex[worst] = xr;
                fvals[worst] = fr;
            }
        } else if fr < f_second {
            simplex[worst] = xr;
            fvals[worst] = fr;
        } else {
            let (xc, fc, accept) = if fr < f_worst {
                let xc = along(alpha * rho);
                let fc = eval(&xc);
                let ok = fc <= fr;
                (xc, fc, ok)
            } else {
                let xc = along(-rho);
                let fc = eval(&xc);
                let ok = fc < f_worst;
                (xc, fc, ok)
            };
            if accept {
                simplex[worst] = xc;
                fvals[worst] = fc;
            } else {
                let anchor = simplex[best].clone();
                for &k in &order[1..] {
                    for (x, a) in simplex[k].iter_mut().zip(&anchor) {
                        *x = a + sigma * (*x - a);
                    }
                    fvals[k] = eval(&simplex[k]);
                }
            }
        }
        history.push(fvals.iter().copied().fold(f64::INFINITY, f64::min));
    }

    let best = (0..=n)
        .min_by(|&a, &b| fvals[a].total_cmp(&fvals[b]))
        .unwrap_or(0);
    NelderMeadResult {
        x: simplex[best].clone(),
        fmin: fvals[best],
        iterations,
        evaluations: evals,
        converged,
        history,
    }
}
