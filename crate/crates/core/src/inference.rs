//! Asymptotic covariance blocks of the maximum-likelihood estimator and the
//! Wald-type confidence intervals built from them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::fit::FitResult;
use crate::likelihood::{eta_linear, posterior_modes};
use crate::model::{dup_pinv, vech, Dataset, Parameters};

/// `Phi^{-1}(p)` for the standard normal.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {p} outside (0, 1)")));
    }
    Ok(Normal::standard().inverse_cdf(p))
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

fn z_value(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1]")));
    }
    if alpha == 1.0 {
        return Ok(0.0);
    }
    normal_quantile(1.0 - alpha / 2.0)
}

/// Diagonal blocks of the estimator's asymptotic covariance, scaled to the
/// sample at hand. Off-diagonal blocks are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymCov {
    /// `Sigma / m`.
    pub beta_a: DMatrix<f64>,
    /// `phi Lambda / (m n)`; empty when there are no fixed-only predictors.
    pub beta_b: DMatrix<f64>,
    /// `2 D+ (Sigma x Sigma) D+' / m`.
    pub vech_sigma: DMatrix<f64>,
    /// `1 / ((2 d'(phi)/phi + d''(phi)) m n)`.
    pub phi_var: f64,
    pub m: usize,
    pub n: f64,
}

/// Plug-in estimate of `Lambda_betaB`, the inverse of the average over groups of
/// the inverted lower-right block of `Omega_i^{-1}`, where
/// `Omega_i = mean_j b''(eta_ij) x_ij x_ij'` at the group posterior modes.
pub fn estimate_lambda_beta_b(ds: &Dataset, p: &Parameters, family: Family) -> Result<DMatrix<f64>> {
    let (d_a, d_b) = (ds.d_a(), ds.d_b());
    if d_b == 0 {
        return Err(Error::InvalidArgument(
            "Lambda_betaB needs at least one fixed-only predictor".into(),
        ));
    }
    let modes = posterior_modes(p, ds, family)?;
    let dim = d_a + d_b;
    let mut acc = DMatrix::<f64>::zeros(d_b, d_b);
    for (g, mode) in ds.groups().iter().zip(&modes) {
        let mut omega = DMatrix::<f64>::zeros(dim, dim);
        for j in 0..g.len() {
            let xa = g.xa_row(j, d_a);
            let xb = g.xb_row(j, d_b);
            let eta = eta_linear(p, xa, xb, mode.u_star.as_slice());
            let w = family.b_suite(eta)?.b2;
            let x: Vec<f64> = xa.iter().chain(xb).copied().collect();
            for a in 0..dim {
                for c in 0..dim {
                    omega[(a, c)] += w * x[a] * x[c];
                }
            }
        }
        omega /= g.len() as f64;
        let singular = || Error::Group {
            group: g.id.clone(),
            reason: "Omega is singular".into(),
        };
        // [lower-right block of Omega^{-1}]^{-1} is the Schur complement
        // Omega_BB - Omega_BA Omega_AA^{-1} Omega_AB.
        let full = omega.clone().cholesky().ok_or_else(singular)?;
        let inv = full.inverse();
        let block = inv.view((d_a, d_a), (d_b, d_b)).into_owned();
        let block_inv = block.cholesky().ok_or_else(singular)?.inverse();
        if block_inv.iter().any(|v| !v.is_finite()) {
            return Err(singular());
        }
        acc += block_inv;
    }
    acc /= ds.m() as f64;
    acc.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::NotPositiveDefinite("averaged Omega blocks".into()))
}

/// `2 D+ (Sigma x Sigma) D+'`.
pub fn vech_sigma_cov(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let d = sigma.nrows();
    let dp = dup_pinv(d);
    &dp * sigma.kronecker(sigma) * dp.transpose() * 2.0
}

/// Theorem-style covariance blocks at plug-in estimates.
pub fn asymptotic_covariance(ds: &Dataset, p: &Parameters, family: Family) -> Result<AsymCov> {
    let m = ds.m();
    let n = ds.n_bar();
    let mf = m as f64;
    let mn = ds.n_total() as f64;
    let beta_b = if ds.d_b() == 0 {
        DMatrix::zeros(0, 0)
    } else {
        estimate_lambda_beta_b(ds, p, family)? * (p.phi / mn)
    };
    Ok(AsymCov {
        beta_a: &p.sigma / mf,
        beta_b,
        vech_sigma: vech_sigma_cov(&p.sigma) / mf,
        phi_var: 1.0 / (family.dispersion_info(p.phi)? * mn),
        m,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    /// Set when a negative lower endpoint of a positive parameter was raised to 0.
    pub truncated: bool,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

fn positive_wald(est: f64, half: f64) -> Interval {
    let lower = est - half;
    Interval {
        lower: lower.max(0.0),
        upper: est + half,
        truncated: lower < 0.0,
    }
}

/// Wald interval for the dispersion:
/// `phi +- z [(2 d'(phi)/phi + d''(phi)) m n]^{-1/2}`.
pub fn ci_phi(phi_hat: f64, family: Family, m: usize, n: f64, alpha: f64) -> Result<Interval> {
    if m == 0 || !(n > 0.0) {
        return Err(Error::InvalidArgument(format!("m={m}, n={n}")));
    }
    let info = family.dispersion_info(phi_hat)?;
    let half = z_value(alpha)? / (info * m as f64 * n).sqrt();
    Ok(positive_wald(phi_hat, half))
}

/// Dispersion interval for a general two-parameter family, from the
/// per-observation values of `d^2/dpsi^2 d~(y, 1/psi)` at `psi = 1/phi_hat`.
pub fn ci_phi_general(phi_hat: f64, d2_values: &[f64], alpha: f64) -> Result<Interval> {
    if !(phi_hat > 0.0) {
        return Err(Error::InvalidArgument(format!("phi_hat {phi_hat}")));
    }
    let total: f64 = d2_values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sum of second derivatives must be positive, got {total}"
        )));
    }
    let half = z_value(alpha)? * phi_hat * phi_hat / total.sqrt();
    Ok(positive_wald(phi_hat, half))
}

/// For a reproductive family each observation contributes the same
/// `d^2/dpsi^2 d(1/psi) = phi^4 (2 d'(phi)/phi + d''(phi))`.
pub fn reproductive_d2_values(family: Family, phi_hat: f64, count: usize) -> Result<Vec<f64>> {
    let v = family.dispersion_info(phi_hat)? * phi_hat.powi(4);
    Ok(vec![v; count])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Raw,
    Sd,
}

/// How standard-deviation rows get their intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdMethod {
    /// Square roots of the variance interval's endpoints.
    #[default]
    Endpoint,
    /// Wald interval with `Var(sqrt v) = Var(v) / (4 v)`.
    Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiRow {
    pub name: String,
    pub estimate: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub scale: Scale,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiTable {
    pub alpha: f64,
    pub rows: Vec<CiRow>,
}

impl CiTable {
    pub fn row(&self, name: &str) -> Option<&CiRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["parameter", "scale", "estimate", "lower", "upper", "truncated"])?;
        let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.write_record([
                r.name.clone(),
                match r.scale {
                    Scale::Raw => "raw".into(),
                    Scale::Sd => "sd".into(),
                },
                r.estimate.to_string(),
                fmt(r.lower),
                fmt(r.upper),
                r.truncated.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<ci table>", e))?;
        Ok(())
    }

    pub fn to_pretty(&self) -> String {
        let mut s = format!(
            "{:<16} {:>5} {:>12}   {:.0}% interval\n",
            "parameter",
            "scale",
            "estimate",
            100.0 * (1.0 - self.alpha)
        );
        for r in &self.rows {
            let ci = match (r.lower, r.upper) {
                (Some(l), Some(u)) => format!("({:.4}, {:.4})", l, u),
                _ => "-".into(),
            };
            let scale = match r.scale {
                Scale::Raw => "raw",
                Scale::Sd => "sd",
            };
            s.push_str(&format!("{:<16} {:>5} {:>12.5}   {}\n", r.name, scale, r.estimate, ci));
        }
        s
    }
}

/// Display names for the coefficient rows.
#[derive(Debug, Clone, Default)]
pub struct Labels {
    pub beta_a: Vec<String>,
    pub beta_b: Vec<String>,
}

impl Labels {
    fn beta_a(&self, k: usize) -> String {
        self.beta_a.get(k).cloned().unwrap_or_else(|| format!("beta_a_{}", k + 1))
    }

    fn beta_b(&self, k: usize) -> String {
        self.beta_b.get(k).cloned().unwrap_or_else(|| format!("beta_b_{}", k + 1))
    }
}

fn wald(name: String, est: f64, var: f64, z: f64) -> CiRow {
    let half = z * var.max(0.0).sqrt();
    CiRow {
        name,
        estimate: est,
        lower: Some(est - half),
        upper: Some(est + half),
        scale: Scale::Raw,
        truncated: false,
    }
}

fn positive_row(name: String, est: f64, var: f64, z: f64) -> CiRow {
    let iv = positive_wald(est, z * var.max(0.0).sqrt());
    CiRow {
        name,
        estimate: est,
        lower: Some(iv.lower),
        upper: Some(iv.upper),
        scale: Scale::Raw,
        truncated: iv.truncated,
    }
}

fn sd_row(name: String, raw: &CiRow, var: f64, z: f64, method: SdMethod) -> CiRow {
    let est = raw.estimate.max(0.0).sqrt();
    let (lower, upper, truncated) = match method {
        SdMethod::Endpoint => (
            raw.lower.map(|v| v.max(0.0).sqrt()),
            raw.upper.map(|v| v.max(0.0).sqrt()),
            raw.truncated,
        ),
        SdMethod::Delta => {
            let sd_var = if raw.estimate > 0.0 { var / (4.0 * raw.estimate) } else { 0.0 };
            let half = z * sd_var.max(0.0).sqrt();
            let lower = est - half;
            (Some(lower.max(0.0)), Some(est + half), lower < 0.0)
        }
    };
    CiRow {
        name,
        estimate: est,
        lower,
        upper,
        scale: Scale::Sd,
        truncated,
    }
}

/// Wald intervals for every coefficient and covariance parameter, plus
/// standard-deviation rows for the random-effect variances and the dispersion.
pub fn ci_table(
    p: &Parameters,
    cov: &AsymCov,
    alpha: f64,
    method: SdMethod,
    labels: &Labels,
) -> Result<CiTable> {
    let z = z_value(alpha)?;
    let d = p.d_a();
    let mut rows = Vec::new();
    for k in 0..d {
        rows.push(wald(labels.beta_a(k), p.beta_a[k], cov.beta_a[(k, k)], z));
    }
    for k in 0..p.d_b() {
        rows.push(wald(labels.beta_b(k), p.beta_b[k], cov.beta_b[(k, k)], z));
    }
    let vs = vech(&p.sigma);
    let mut sd_rows = Vec::new();
    let mut idx = 0;
    for c in 0..d {
        for r in c..d {
            let name = format!("sigma_{}{}", r + 1, c + 1);
            let var = cov.vech_sigma[(idx, idx)];
            if r == c {
                let raw = positive_row(name, vs[idx], var, z);
                sd_rows.push(sd_row(format!("sd_{}", r + 1), &raw, var, z, method));
                rows.push(raw);
            } else {
                rows.push(wald(name, vs[idx], var, z));
            }
            idx += 1;
        }
    }
    for c in 0..d {
        for r in c + 1..d {
            let rho = p.sigma[(r, c)] / (p.sigma[(r, r)] * p.sigma[(c, c)]).sqrt();
            sd_rows.push(CiRow {
                name: format!("rho_{}{}", r + 1, c + 1),
                estimate: rho,
                lower: None,
                upper: None,
                scale: Scale::Raw,
                truncated: false,
            });
        }
    }
    rows.extend(sd_rows);
    let phi_row = positive_row("phi".into(), p.phi, cov.phi_var, z);
    let sqrt_phi = sd_row("sqrt_phi".into(), &phi_row, cov.phi_var, z, method);
    rows.push(phi_row);
    rows.push(sqrt_phi);
    Ok(CiTable { alpha, rows })
}

/// [`ci_table`] for a converged fit.
pub fn ci_all(
    fit: &FitResult,
    ds: &Dataset,
    alpha: f64,
    method: SdMethod,
    labels: &Labels,
) -> Result<CiTable> {
    if !fit.converged {
        return Err(Error::Precondition("fit did not converge".into()));
    }
    let cov = match &fit.asym_cov {
        Some(c) => c.clone(),
        None => asymptotic_covariance(ds, &fit.params, fit.family)?,
    };
    ci_table(&fit.params, &cov, alpha, method, labels)
}

/// Standard errors implied by the covariance blocks, in the order
/// `[beta_A, beta_B, vech(Sigma), phi]`.
pub fn standard_errors(cov: &AsymCov) -> DVector<f64> {
    let mut v: Vec<f64> = cov.beta_a.diagonal().iter().map(|x| x.sqrt()).collect();
    v.extend(cov.beta_b.diagonal().iter().map(|x| x.sqrt()));
    v.extend(cov.vech_sigma.diagonal().iter().map(|x| x.sqrt()));
    v.push(cov.phi_var.sqrt());
    DVector::from_vec(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{duplication_matrix, Observation};
    use std::f64::consts::PI;

    #[test]
    fn normal_quantile_round_trip() {
        for &p in &[0.5, 0.9, 0.975, 0.995, 0.001] {
            let q = normal_quantile(p).unwrap();
            assert!((normal_cdf(q) - p).abs() <= 1e-10, "p={p}");
        }
        assert!((normal_quantile(0.975).unwrap() - 1.959_963_984_540_054).abs() < 1e-9);
        assert!(normal_quantile(1.0).is_err());
    }

    #[test]
    fn ci_phi_gaussian_example() {
        let iv = ci_phi(1.0, Family::Gaussian, 100, 100.0, 0.05).unwrap();
        assert!((iv.lower - 0.972_281).abs() < 1e-6, "{iv:?}");
        assert!((iv.upper - 1.027_719).abs() < 1e-6);
        assert!(!iv.truncated);
    }

    #[test]
    fn ci_phi_alpha_one_is_degenerate() {
        let iv = ci_phi(0.7, Family::Gamma, 10, 5.0, 1.0).unwrap();
        assert_eq!((iv.lower, iv.upper), (0.7, 0.7));
    }

    #[test]
    fn ci_phi_truncates_at_zero() {
        let iv = ci_phi(1.0, Family::Gamma, 2, 1.0, 0.05).unwrap();
        assert!(iv.truncated);
        assert_eq!(iv.lower, 0.0);
    }

    #[test]
    fn ci_phi_small_gamma_matches_gaussian() {
        let g = ci_phi(0.05, Family::Gamma, 50, 10.0, 0.05).unwrap();
        let n = ci_phi(0.05, Family::Gaussian, 50, 10.0, 0.05).unwrap();
        assert!((g.width() / n.width() - 1.0).abs() < 0.02);
    }

    #[test]
    fn ci_phi_width_scaling() {
        let a = ci_phi(0.8, Family::Gamma, 100, 20.0, 0.05).unwrap();
        let b = ci_phi(0.8, Family::Gamma, 400, 20.0, 0.05).unwrap();
        assert!((a.width() / b.width() - 2.0).abs() < 1e-12);
        let c = ci_phi(0.8, Family::Gamma, 100, 80.0, 0.05).unwrap();
        assert!((a.width() / c.width() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ci_phi_general_reduces_to_ci_phi() {
        for fam in Family::ALL {
            let (m, n) = (40usize, 12usize);
            let d2 = reproductive_d2_values(fam, 0.6, m * n).unwrap();
            let a = ci_phi_general(0.6, &d2, 0.05).unwrap();
            let b = ci_phi(0.6, fam, m, n as f64, 0.05).unwrap();
            assert!((a.lower - b.lower).abs() < 1e-10 && (a.upper - b.upper).abs() < 1e-10);
        }
    }

    #[test]
    fn ci_phi_general_constant_values() {
        let (c, count, phi) = (2.5, 30usize, 1.3);
        let iv = ci_phi_general(phi, &vec![c; count], 0.1).unwrap();
        let z = normal_quantile(0.95).unwrap();
        let want = z * phi * phi / (count as f64 * c).sqrt();
        assert!((iv.width() / 2.0 - want).abs() < 1e-12);
        assert!(ci_phi_general(phi, &[1.0, -2.0], 0.05).is_err());
    }

    #[test]
    fn vech_sigma_block_matches_brute_force() {
        let s1 = DMatrix::from_element(1, 1, 2.0);
        assert!((vech_sigma_cov(&s1)[(0, 0)] / 50.0 - 0.16).abs() < 1e-15);
        let s2 = DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]);
        // Cov(vech S) for a Wishart-like estimator: entries 2 sigma^2, sigma_ij^2 + sigma_ii sigma_jj
        let got = vech_sigma_cov(&s2);
        let (a, b, c) = (1.5, 0.4, 0.8);
        let want = DMatrix::from_row_slice(
            3,
            3,
            &[
                2.0 * a * a, 2.0 * a * b, 2.0 * b * b,
                2.0 * a * b, a * c + b * b, 2.0 * b * c,
                2.0 * b * b, 2.0 * b * c, 2.0 * c * c,
            ],
        );
        assert!((got - want).amax() < 1e-14);
        let _ = duplication_matrix(2);
    }

    fn gaussian_design(x_b: &[(f64, f64)], groups: usize) -> Dataset {
        let mut obs = Vec::new();
        for i in 0..groups {
            for &(a, b) in x_b {
                obs.push((format!("{i}"), Observation { y: 0.0, xa: vec![1.0], xb: vec![a, b] }));
            }
        }
        Dataset::from_observations(obs, 1, 2).unwrap()
    }

    #[test]
    fn lambda_identity_for_standardized_design() {
        // mean zero, identity second moment
        let ds = gaussian_design(&[(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)], 3);
        let p = Parameters::scalar(0.0, &[0.0, 0.0], 1.0, 1.0).unwrap();
        let lam = estimate_lambda_beta_b(&ds, &p, Family::Gaussian).unwrap();
        assert!((lam - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn lambda_singular_when_collinear_with_intercept() {
        let mut obs = Vec::new();
        for i in 0..3 {
            for _ in 0..4 {
                obs.push((format!("{i}"), Observation { y: 0.0, xa: vec![1.0], xb: vec![2.0] }));
            }
        }
        let ds = Dataset::from_observations(obs, 1, 1).unwrap();
        let p = Parameters::scalar(0.0, &[0.0], 1.0, 1.0).unwrap();
        assert!(estimate_lambda_beta_b(&ds, &p, Family::Gaussian).is_err());
        let ds0 = gaussian_design(&[(1.0, 0.0)], 2);
        let p0 = Parameters::scalar(0.0, &[0.0, 0.0], 1.0, 1.0).unwrap();
        assert!(estimate_lambda_beta_b(&ds0, &p0, Family::Gaussian).is_err());
    }

    #[test]
    fn phi_var_examples() {
        let obs = (0..100).flat_map(|i| {
            (0..100).map(move |_| (format!("{i}"), Observation { y: 0.0, xa: vec![1.0], xb: vec![] }))
        });
        let ds = Dataset::from_observations(obs, 1, 0).unwrap();
        let p = Parameters::scalar(-1.0, &[], 1.0, 1.0).unwrap();
        let c = asymptotic_covariance(&ds, &p, Family::Gaussian).unwrap();
        assert!((c.phi_var - 2e-4).abs() < 1e-18);
        assert_eq!(c.beta_b.nrows(), 0);
        assert!((c.beta_a[(0, 0)] - 0.01).abs() < 1e-18);
        let g = asymptotic_covariance(&ds, &p, Family::Gamma).unwrap();
        assert!((g.phi_var - 1.0 / ((PI * PI / 6.0 - 1.0) * 1e4)).abs() < 1e-15);
        assert!((g.phi_var - 1.5505e-4).abs() < 1e-8);
        let ig = asymptotic_covariance(&ds, &p, Family::InverseGaussian).unwrap();
        assert_eq!(ig.phi_var, c.phi_var);
    }

    fn toy_cov(d_a: usize, d_b: usize, sigma: DMatrix<f64>, phi: f64) -> (Parameters, AsymCov) {
        let p = Parameters::new(
            DVector::from_fn(d_a, |k, _| 1.0 + k as f64),
            DVector::from_fn(d_b, |k, _| -0.5 * k as f64),
            sigma.clone(),
            phi,
        )
        .unwrap();
        let cov = AsymCov {
            beta_a: &sigma / 50.0,
            beta_b: DMatrix::from_diagonal_element(d_b, d_b, 0.0),
            vech_sigma: vech_sigma_cov(&sigma) / 50.0,
            phi_var: 2.0 * phi * phi / 1000.0,
            m: 50,
            n: 20.0,
        };
        (p, cov)
    }

    #[test]
    fn ci_table_rows_and_ordering() {
        let sigma = DMatrix::from_row_slice(2, 2, &[3.6, 0.2, 0.2, 0.25]);
        let (p, cov) = toy_cov(2, 2, sigma, 35.8);
        for method in [SdMethod::Endpoint, SdMethod::Delta] {
            let t = ci_table(&p, &cov, 0.05, method, &Labels::default()).unwrap();
            for r in &t.rows {
                if let (Some(l), Some(u)) = (r.lower, r.upper) {
                    assert!(l <= r.estimate && r.estimate <= u, "{r:?}");
                }
            }
            // zero-variance beta_B row is degenerate
            let b = t.row("beta_b_1").unwrap();
            assert_eq!((b.lower, b.upper), (Some(b.estimate), Some(b.estimate)));
            assert!(t.row("rho_21").unwrap().lower.is_none());
            // squared sd endpoints bracket the raw estimate
            let sd = t.row("sqrt_phi").unwrap();
            assert!(sd.lower.unwrap().powi(2) <= p.phi && p.phi <= sd.upper.unwrap().powi(2));
            let sd1 = t.row("sd_1").unwrap();
            assert!(sd1.lower.unwrap().powi(2) <= 3.6 && 3.6 <= sd1.upper.unwrap().powi(2));
        }
    }

    #[test]
    fn sd_methods_agree_for_narrow_intervals() {
        let (p, mut cov) = toy_cov(1, 0, DMatrix::from_element(1, 1, 2.0), 1.0);
        cov.phi_var = 1e-8;
        let a = ci_table(&p, &cov, 0.05, SdMethod::Endpoint, &Labels::default()).unwrap();
        let b = ci_table(&p, &cov, 0.05, SdMethod::Delta, &Labels::default()).unwrap();
        let (ra, rb) = (a.row("sqrt_phi").unwrap(), b.row("sqrt_phi").unwrap());
        assert!((ra.lower.unwrap() - rb.lower.unwrap()).abs() < 1e-7);
    }

    #[test]
    fn csv_output_has_fixed_header() {
        let (p, cov) = toy_cov(1, 1, DMatrix::from_element(1, 1, 0.5), 1.0);
        let t = ci_table(&p, &cov, 0.05, SdMethod::Endpoint, &Labels::default()).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("parameter,scale,estimate,lower,upper,truncated\n"));
        assert_eq!(text.lines().count(), 1 + t.rows.len());
    }
}
