//! Maximum-likelihood fitting by Nelder-Mead over the unconstrained
//! parameterization, starting values, and the Pearson dispersion estimator.

mod nelder_mead;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::inference::{asymptotic_covariance, AsymCov};
use crate::likelihood::{
    eta_linear, gaussian_marginal_loglik, log_likelihood, posterior_modes, QuadratureSpec,
};
use crate::model::{from_unconstrained, to_unconstrained, Dataset, Parameters, UnconstrainedParams};

pub use nelder_mead::{nelder_mead, SimplexOptions, SimplexResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iters: usize,
    pub tol_f: f64,
    pub tol_x: f64,
    /// Additional simplex runs from perturbed copies of the best point.
    pub restarts: usize,
    pub quadrature: QuadratureSpec,
    /// Seed of the restart perturbation stream.
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 5000,
            tol_f: 1e-9,
            tol_x: 1e-7,
            restarts: 1,
            quadrature: QuadratureSpec::default(),
            seed: 0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.tol_f > 0.0) || !(self.tol_x > 0.0) {
            return Err(Error::InvalidArgument(
                "max_iters must be >= 1 and tolerances positive".into(),
            ));
        }
        self.quadrature.validate()
    }

    fn simplex(&self) -> SimplexOptions {
        SimplexOptions {
            max_iters: self.max_iters,
            tol_f: self.tol_f,
            tol_x: self.tol_x,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub family: Family,
    pub params: Parameters,
    pub loglik: f64,
    pub converged: bool,
    /// Simplex iterations summed over all runs.
    pub iters: usize,
    pub evals: usize,
    pub start: Parameters,
    pub start_loglik: f64,
    /// Whether the starting values came from the fallback path.
    pub start_fallback: bool,
    pub asym_cov: Option<AsymCov>,
    pub options: FitOptions,
}

/// Starting values together with a flag for the fallback path.
#[derive(Debug, Clone)]
pub struct StartingValues {
    pub params: Parameters,
    pub fallback: bool,
}

fn design_row(ds: &Dataset, g: &crate::model::Group, j: usize) -> Vec<f64> {
    let mut x = g.xa_row(j, ds.d_a()).to_vec();
    x.extend_from_slice(g.xb_row(j, ds.d_b()));
    x
}

/// Fixed-effects GLM by iteratively reweighted least squares with the
/// canonical link. Returns the stacked coefficient vector `[beta_A, beta_B]`.
pub fn irls(ds: &Dataset, family: Family) -> Result<DVector<f64>> {
    let p = ds.d_a() + ds.d_b();
    let rows: Vec<(f64, Vec<f64>)> = ds
        .observations()
        .map(|(_, g, j)| (g.y[j], design_row(ds, g, j)))
        .collect();
    let objective = |beta: &DVector<f64>| -> Option<f64> {
        let mut s = 0.0;
        for (y, x) in &rows {
            let eta: f64 = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            if !family.in_domain(eta) {
                return None;
            }
            s += y * eta - family.b(eta);
        }
        Some(s)
    };
    let solve = |etas: &[f64]| -> Result<DVector<f64>> {
        let mut xtwx = DMatrix::<f64>::zeros(p, p);
        let mut xtwz = DVector::<f64>::zeros(p);
        for ((y, x), &eta) in rows.iter().zip(etas) {
            let (b1, b2) = family.b12(eta);
            let z = eta + (y - b1) / b2;
            for a in 0..p {
                xtwz[a] += b2 * x[a] * z;
                for c in 0..p {
                    xtwx[(a, c)] += b2 * x[a] * x[c];
                }
            }
        }
        nalgebra::Cholesky::new(xtwx)
            .map(|c| c.solve(&xtwz))
            .ok_or_else(|| Error::NotPositiveDefinite("IRLS cross-product matrix".into()))
    };

    let etas: Vec<f64> = rows
        .iter()
        .map(|(y, _)| family.mean_to_eta(*y))
        .collect::<Result<_>>()?;
    let mut beta = solve(&etas)?;
    let mut obj = objective(&beta)
        .ok_or_else(|| Error::Infeasible("IRLS start leaves the natural-parameter domain".into()))?;
    for _ in 0..100 {
        let etas: Vec<f64> = rows
            .iter()
            .map(|(_, x)| x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum())
            .collect();
        let target = solve(&etas)?;
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let cand = &beta + (&target - &beta) * t;
            if let Some(v) = objective(&cand) {
                if v >= obj - 1e-12 * obj.abs() {
                    next = Some((cand, v));
                    break;
                }
            }
            t *= 0.5;
        }
        let (cand, v) = next.ok_or_else(|| Error::Infeasible("IRLS step halving failed".into()))?;
        let change = (&cand - &beta).amax();
        beta = cand;
        obj = v;
        if change <= 1e-10 * (1.0 + beta.amax()) {
            return Ok(beta);
        }
    }
    Err(Error::Infeasible("IRLS did not converge".into()))
}

/// Starting values: IRLS coefficients, `Sigma = 0.25 I`, and the Pearson
/// dispersion at those coefficients with zero random effects.
pub fn starting_values(ds: &Dataset, family: Family) -> Result<StartingValues> {
    let (d_a, d_b) = (ds.d_a(), ds.d_b());
    let sigma = DMatrix::identity(d_a, d_a) * 0.25;
    let attempt = || -> Result<Parameters> {
        let beta = irls(ds, family)?;
        let mut p = Parameters::new(
            beta.rows(0, d_a).into_owned(),
            beta.rows(d_a, d_b).into_owned(),
            sigma.clone(),
            1.0,
        )?;
        let phi = pearson_dispersion(ds, &p, family, false)?;
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::Infeasible(format!("Pearson dispersion {phi}")));
        }
        p.phi = phi;
        Ok(p)
    };
    match attempt() {
        Ok(params) => Ok(StartingValues {
            params,
            fallback: false,
        }),
        Err(e) => {
            log::warn!("starting values: {e}; using fallback values");
            Ok(StartingValues {
                params: fallback_start(ds, family)?,
                fallback: true,
            })
        }
    }
}

/// `beta = 0`, except that the coefficient of a constant-one predictor is
/// set to the canonical parameter of the overall mean so that Gamma and
/// inverse Gaussian starts remain feasible.
fn fallback_start(ds: &Dataset, family: Family) -> Result<Parameters> {
    let (d_a, d_b) = (ds.d_a(), ds.d_b());
    let mut beta = DVector::zeros(d_a + d_b);
    if family != Family::Gaussian {
        let n = ds.n_total() as f64;
        let mean = ds.observations().map(|(_, g, j)| g.y[j]).sum::<f64>() / n;
        let ones = (0..d_a + d_b).find(|&k| {
            ds.observations()
                .all(|(_, g, j)| design_row(ds, g, j)[k] == 1.0)
        });
        if let (Some(k), Ok(eta)) = (ones, family.mean_to_eta(mean)) {
            beta[k] = eta;
        }
    }
    Parameters::new(
        beta.rows(0, d_a).into_owned(),
        beta.rows(d_a, d_b).into_owned(),
        DMatrix::identity(d_a, d_a) * 0.25,
        1.0,
    )
}

/// Pearson estimator with `N - d_A - d_B` degrees of freedom.
pub fn pearson_dispersion(ds: &Dataset, p: &Parameters, family: Family, use_modes: bool) -> Result<f64> {
    let df = ds.n_total() as f64 - (ds.d_a() + ds.d_b()) as f64;
    pearson_dispersion_with_df(ds, p, family, use_modes, df)
}

/// `sum_ij (y_ij - mu_ij)^2 / V(mu_ij) / df`, with `mu = b'(eta)` evaluated
/// at the group posterior modes when `use_modes`, otherwise at `u = 0`.
pub fn pearson_dispersion_with_df(
    ds: &Dataset,
    p: &Parameters,
    family: Family,
    use_modes: bool,
    df: f64,
) -> Result<f64> {
    if !(df > 0.0) {
        return Err(Error::InvalidArgument(format!("degrees of freedom {df}")));
    }
    let (d_a, d_b) = (p.d_a(), p.d_b());
    let modes = if use_modes {
        Some(posterior_modes(p, ds, family)?)
    } else {
        None
    };
    let zero = vec![0.0; d_a];
    let mut s = 0.0;
    for (i, g, j) in ds.observations() {
        let u = modes.as_ref().map_or(&zero[..], |m| m[i].u_star.as_slice());
        let eta = eta_linear(p, g.xa_row(j, d_a), g.xb_row(j, d_b), u);
        let b = family.b_suite(eta)?;
        s += (g.y[j] - b.b1).powi(2) / b.b2;
    }
    Ok(s / df)
}

fn check_support(ds: &Dataset, family: Family) -> Result<()> {
    for (_, g, j) in ds.observations() {
        if !family.in_support(g.y[j]) {
            return Err(Error::Support {
                family: family.name(),
                y: g.y[j],
                row: g.rows[j],
            });
        }
    }
    Ok(())
}

/// Log-likelihood used by the fitter: closed form for Gaussian, quadrature otherwise.
pub fn objective_loglik(p: &Parameters, ds: &Dataset, family: Family, q: &QuadratureSpec) -> Result<f64> {
    match family {
        Family::Gaussian => gaussian_marginal_loglik(p, ds),
        _ => log_likelihood(p, ds, family, q),
    }
}

/// Conditional maximum-likelihood fit.
pub fn fit_mle(ds: &Dataset, family: Family, opts: &FitOptions) -> Result<FitResult> {
    let start = starting_values(ds, family)?;
    fit_mle_from(ds, family, opts, start)
}

/// [`fit_mle`] from caller-supplied starting values.
pub fn fit_mle_from(
    ds: &Dataset,
    family: Family,
    opts: &FitOptions,
    start: StartingValues,
) -> Result<FitResult> {
    opts.validate()?;
    if ds.m() < 2 {
        return Err(Error::Precondition(format!("need at least 2 groups, got {}", ds.m())));
    }
    check_support(ds, family)?;
    let (d_a, d_b) = (ds.d_a(), ds.d_b());
    let q = opts.quadrature;
    let neg_loglik = |theta: &[f64]| -> Option<f64> {
        let u = UnconstrainedParams {
            theta: theta.to_vec(),
            d_a,
            d_b,
        };
        let p = from_unconstrained(&u).ok()?;
        objective_loglik(&p, ds, family, &q).ok().map(|v| -v)
    };

    let theta0 = to_unconstrained(&start.params)?.theta;
    let start_loglik = neg_loglik(&theta0).map(|v| -v).unwrap_or(f64::NEG_INFINITY);
    let mut best = nelder_mead(neg_loglik, &theta0, &opts.simplex());
    let mut iters = best.iters;
    let mut evals = best.evals;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.restarts {
        let from = if best.f.is_finite() { &best.x } else { &theta0 };
        let perturbed: Vec<f64> = from
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v * (1.0 + 0.1 * z)
            })
            .collect();
        let run = nelder_mead(neg_loglik, &perturbed, &opts.simplex());
        iters += run.iters;
        evals += run.evals;
        if run.f < best.f {
            best = run;
        }
    }
    if !best.f.is_finite() {
        return Err(Error::Infeasible(
            "log-likelihood is infeasible at every simplex vertex".into(),
        ));
    }
    let params = from_unconstrained(&UnconstrainedParams {
        theta: best.x.clone(),
        d_a,
        d_b,
    })?;
    let asym_cov = match asymptotic_covariance(ds, &params, family) {
        Ok(c) => Some(c),
        Err(e) => {
            log::warn!("asymptotic covariance unavailable: {e}");
            None
        }
    };
    Ok(FitResult {
        family,
        params,
        loglik: -best.f,
        converged: best.converged,
        iters,
        evals,
        start: start.params,
        start_loglik,
        start_fallback: start.fallback,
        asym_cov,
        options: *opts,
    })
}
