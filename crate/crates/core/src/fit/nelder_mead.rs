//! Derivative-free simplex minimization.

/// Stopping rules and iteration budget for [`nelder_mead`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    pub max_iters: usize,
    /// Bound on `max_i |f_i - f_best|` at termination.
    pub tol_f: f64,
    /// Bound on `max_i |x_i - x_best|_inf` at termination. Both bounds must hold.
    pub tol_x: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            max_iters: 5000,
            tol_f: 1e-9,
            tol_x: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub converged: bool,
    pub iters: usize,
    pub evals: usize,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Minimizes `f`. `None` (or a non-finite value) marks an infeasible point
/// and is treated as `+inf`.
///
/// The initial simplex offsets coordinate `k` of `x0` by
/// `0.05 * max(1, |x0_k|)`.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &SimplexOptions) -> SimplexResult
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64]| -> f64 {
        evals += 1;
        match f(x) {
            Some(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        }
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for k in 0..n {
        let mut v = x0.to_vec();
        v[k] += 0.05 * x0[k].abs().max(1.0);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(x)).collect();

    let mut iters = 0;
    let mut converged = false;
    let mut order: Vec<usize> = (0..=n).collect();
    loop {
        // stable sort keeps ties in insertion order, so runs are reproducible
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let simplex_sorted: Vec<Vec<f64>> = order.iter().map(|&i| simplex[i].clone()).collect();
        let values_sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        simplex = simplex_sorted;
        values = values_sorted;
        order = (0..=n).collect();

        let best = values[0];
        let f_spread = values
            .iter()
            .map(|v| (v - best).abs())
            .fold(0.0f64, f64::max);
        let x_spread = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        if best.is_finite() && f_spread <= opts.tol_f && x_spread <= opts.tol_x {
            converged = true;
            break;
        }
        if iters >= opts.max_iters {
            break;
        }
        iters += 1;

        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let towards = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = towards(REFLECT);
        let fr = eval(&xr);
        if fr < values[0] {
            let xe = towards(REFLECT * EXPAND);
            let fe = eval(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        if fr < values[n] {
            let xc = towards(REFLECT * CONTRACT);
            let fc = eval(&xc);
            if fc <= fr {
                simplex[n] = xc;
                values[n] = fc;
                continue;
            }
        } else {
            let xc = towards(-CONTRACT);
            let fc = eval(&xc);
            if fc < values[n] {
                simplex[n] = xc;
                values[n] = fc;
                continue;
            }
        }
        let x_best = simplex[0].clone();
        for i in 1..=n {
            for (x, b) in simplex[i].iter_mut().zip(&x_best) {
                *x = b + SHRINK * (*x - b);
            }
            values[i] = eval(&simplex[i]);
        }
    }

    SimplexResult {
        x: simplex[0].clone(),
        f: values[0],
        converged,
        iters,
        evals,
    }
}
