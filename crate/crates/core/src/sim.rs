//! Simulation from the random-intercept design, coverage studies for the
//! dispersion interval, and empirical checks of the asymptotic covariance.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::fit::{fit_mle, FitOptions, FitResult};
use crate::inference::{ci_phi, estimate_lambda_beta_b, vech_sigma_cov};
use crate::model::{vech, Dataset, Group, Parameters};

/// Draws whose natural parameter reaches this value trigger a redraw of the
/// group's random effect.
const ETA_GUARD: f64 = -1e-8;
const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SettingLabel {
    A,
    B,
    C,
    D,
    Custom,
}

impl fmt::Display for SettingLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SettingLabel::A => "A",
            SettingLabel::B => "B",
            SettingLabel::C => "C",
            SettingLabel::D => "D",
            SettingLabel::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// True parameters of a random-intercept model with uniform fixed-only
/// predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSetting {
    pub label: SettingLabel,
    pub beta0: f64,
    pub beta_b: Vec<f64>,
    pub sigma2: f64,
    pub phi: f64,
    pub family: Family,
}

impl SimSetting {
    fn gamma(label: SettingLabel, v: [f64; 6]) -> Self {
        SimSetting {
            label,
            beta0: v[0],
            beta_b: v[1..4].to_vec(),
            sigma2: v[4],
            phi: v[5],
            family: Family::Gamma,
        }
    }

    pub fn a() -> Self {
        Self::gamma(SettingLabel::A, [-2.78, -1.55, 0.0, 0.98, 0.25, 0.54])
    }

    pub fn b() -> Self {
        Self::gamma(SettingLabel::B, [-4.06, -2.41, 0.16, -3.93, 0.52, 1.92])
    }

    pub fn c() -> Self {
        Self::gamma(SettingLabel::C, [-8.55, 3.13, -7.82, -0.23, 1.27, 0.86])
    }

    pub fn d() -> Self {
        Self::gamma(SettingLabel::D, [-14.45, 8.78, 0.41, -3.32, 1.88, 2.11])
    }

    pub fn standard() -> Vec<Self> {
        vec![Self::a(), Self::b(), Self::c(), Self::d()]
    }

    pub fn custom(family: Family, beta0: f64, beta_b: Vec<f64>, sigma2: f64, phi: f64) -> Self {
        SimSetting {
            label: SettingLabel::Custom,
            beta0,
            beta_b,
            sigma2,
            phi,
            family,
        }
    }

    /// `(beta0, beta_B..., sigma2, phi)`.
    pub fn true_vector(&self) -> Vec<f64> {
        let mut v = vec![self.beta0];
        v.extend(&self.beta_b);
        v.push(self.sigma2);
        v.push(self.phi);
        v
    }

    pub fn params(&self) -> Result<Parameters> {
        Parameters::scalar(self.beta0, &self.beta_b, self.sigma2, self.phi)
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.phi > 0.0) {
            return Err(Error::InvalidArgument(
                "sigma2 and phi must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl FromStr for SimSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Self::a()),
            "B" => Ok(Self::b()),
            "C" => Ok(Self::c()),
            "D" => Ok(Self::d()),
            other => Err(Error::InvalidArgument(format!("unknown setting `{other}`"))),
        }
    }
}

/// A simulated dataset with its generating parameters.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub dataset: Dataset,
    pub truth: Parameters,
    /// Number of random-effect redraws forced by the natural-parameter guard.
    pub redraws: usize,
}

/// Stream `stream` of the generator keyed by `seed`. Streams are independent,
/// so replications can run in any order.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `m` groups of `n` observations: `x_A = 1`, `x_B ~ U[0,1]^{d_B}`,
/// `eta = beta0 + U_i + beta_B' x_B`, `U_i ~ N(0, sigma2)`.
pub fn generate_dataset(s: &SimSetting, m: usize, n: usize, seed: u64) -> Result<Simulated> {
    generate_with(s, m, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn generate_with<R: Rng>(s: &SimSetting, m: usize, n: usize, rng: &mut R) -> Result<Simulated> {
    if m < 2 || n < 1 {
        return Err(Error::Precondition(format!(
            "need m >= 2 and n >= 1, got m={m}, n={n}"
        )));
    }
    s.validate()?;
    let d_b = s.beta_b.len();
    let normal =
        Normal::new(0.0, s.sigma2.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let guarded = s.family != Family::Gaussian;
    let mut groups = Vec::with_capacity(m);
    let mut redraws = 0;
    let mut row = 0;
    for i in 0..m {
        let xb: Vec<f64> = (0..n * d_b).map(|_| rng.gen::<f64>()).collect();
        let fixed: Vec<f64> = (0..n)
            .map(|j| {
                s.beta0
                    + s.beta_b
                        .iter()
                        .zip(&xb[j * d_b..(j + 1) * d_b])
                        .map(|(b, x)| b * x)
                        .sum::<f64>()
            })
            .collect();
        let max_fixed = fixed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut u: f64 = normal.sample(rng);
        if guarded {
            let mut tries = 0;
            while max_fixed + u >= ETA_GUARD {
                tries += 1;
                if tries > MAX_REDRAWS {
                    return Err(Error::Infeasible(format!(
                        "group {i}: no admissible random effect after {MAX_REDRAWS} draws"
                    )));
                }
                u = normal.sample(rng);
            }
            redraws += tries;
        }
        let y = fixed
            .iter()
            .map(|f| s.family.sample_response(f + u, s.phi, rng))
            .collect::<Result<Vec<f64>>>()?;
        groups.push(Group {
            id: (i + 1).to_string(),
            y,
            xa: vec![1.0; n],
            xb,
            rows: (row + 1..=row + n).collect(),
        });
        row += n;
    }
    Ok(Simulated {
        dataset: Dataset::new(groups, 1, d_b)?,
        truth: s.params()?,
        redraws,
    })
}

/// Key of one (setting, m) cell, mixed into the root seed.
fn cell_seed(root: u64, setting: &SimSetting, m: usize) -> u64 {
    // splitmix64 finalizer over the inputs
    let mut h = root ^ 0x9e37_79b9_7f4a_7c15;
    let label = setting.label as u64 + 1;
    for v in [label, m as u64, setting.phi.to_bits(), setting.beta0.to_bits()] {
        h ^= v;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Generates and fits replication `rep` of a cell.
pub fn replicate(
    s: &SimSetting,
    m: usize,
    n: usize,
    root_seed: u64,
    rep: usize,
    opts: &FitOptions,
) -> Result<(Simulated, FitResult)> {
    let mut rng = stream_rng(cell_seed(root_seed, s, m), rep as u64);
    let sim = generate_with(s, m, n, &mut rng)?;
    let fit = fit_mle(&sim.dataset, s.family, opts)?;
    Ok((sim, fit))
}

/// Outcome of one coverage replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub rep: usize,
    /// `None` when the fit failed.
    pub phi_hat: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub covered: bool,
    pub redraws: usize,
}

impl ReplicationOutcome {
    fn failure(rep: usize, redraws: usize) -> Self {
        ReplicationOutcome {
            rep,
            phi_hat: None,
            lower: None,
            upper: None,
            covered: false,
            redraws,
        }
    }

    pub fn failed(&self) -> bool {
        self.phi_hat.is_none()
    }
}

/// Coverage outcomes for replications `reps` of one cell.
pub fn coverage_outcomes(
    s: &SimSetting,
    m: usize,
    n: usize,
    reps: std::ops::Range<usize>,
    alpha: f64,
    seed: u64,
    opts: &FitOptions,
) -> Vec<ReplicationOutcome> {
    reps.into_par_iter()
        .map(|rep| match replicate(s, m, n, seed, rep, opts) {
            Ok((sim, fit)) if fit.converged => {
                let phi = fit.params.phi;
                match ci_phi(phi, s.family, sim.dataset.m(), sim.dataset.n_bar(), alpha) {
                    Ok(iv) => ReplicationOutcome {
                        rep,
                        phi_hat: Some(phi),
                        lower: Some(iv.lower),
                        upper: Some(iv.upper),
                        covered: iv.contains(s.phi),
                        redraws: sim.redraws,
                    },
                    Err(_) => ReplicationOutcome::failure(rep, sim.redraws),
                }
            }
            Ok((sim, _)) => {
                log::warn!("setting {} m={m} rep {rep}: fit did not converge", s.label);
                ReplicationOutcome::failure(rep, sim.redraws)
            }
            Err(e) => {
                log::warn!("setting {} m={m} rep {rep}: {e}", s.label);
                ReplicationOutcome::failure(rep, 0)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub setting: String,
    pub m: usize,
    pub n: usize,
    /// Successful replications; the coverage denominator.
    pub replications: usize,
    pub covered: usize,
    pub coverage: f64,
    pub mc_se: f64,
    pub fit_failures: usize,
    pub redraws: usize,
}

impl CoverageRow {
    pub fn from_outcomes(
        setting: &SimSetting,
        m: usize,
        n: usize,
        outcomes: &[ReplicationOutcome],
    ) -> Self {
        let fit_failures = outcomes.iter().filter(|o| o.failed()).count();
        let replications = outcomes.len() - fit_failures;
        let covered = outcomes.iter().filter(|o| o.covered).count();
        let coverage = if replications > 0 {
            covered as f64 / replications as f64
        } else {
            f64::NAN
        };
        CoverageRow {
            setting: setting.label.to_string(),
            m,
            n,
            replications,
            covered,
            coverage,
            mc_se: (coverage * (1.0 - coverage) / replications as f64).sqrt(),
            fit_failures,
            redraws: outcomes.iter().map(|o| o.redraws).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
}

pub const COVERAGE_COLUMNS: [&str; 8] = [
    "setting",
    "m",
    "n",
    "replications",
    "covered",
    "coverage",
    "mc_se",
    "fit_failures",
];

impl CoverageReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(COVERAGE_COLUMNS)?;
        for r in &self.rows {
            out.write_record([
                r.setting.clone(),
                r.m.to_string(),
                r.n.to_string(),
                r.replications.to_string(),
                r.covered.to_string(),
                r.coverage.to_string(),
                r.mc_se.to_string(),
                r.fit_failures.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<coverage csv>", e))?;
        Ok(())
    }
}

/// Coverage of the dispersion interval over a grid of group counts, with
/// `n = m / 5` observations per group.
pub fn run_coverage(
    settings: &[SimSetting],
    m_grid: &[usize],
    reps: usize,
    alpha: f64,
    seed: u64,
    opts: &FitOptions,
) -> Result<CoverageReport> {
    if reps < 1 {
        return Err(Error::Precondition("need at least one replication".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha={alpha} outside (0, 1)")));
    }
    if let Some(m) = m_grid.iter().find(|&&m| m % 5 != 0 || m < 10) {
        return Err(Error::Precondition(format!(
            "m={m} is not a multiple of 5 of at least 10"
        )));
    }
    let mut rows = Vec::new();
    for s in settings {
        for &m in m_grid {
            let n = m / 5;
            let outcomes = coverage_outcomes(s, m, n, 0..reps, alpha, seed, opts);
            let row = CoverageRow::from_outcomes(s, m, n, &outcomes);
            log::info!(
                "setting {} m={m} n={n}: coverage {:.3} ({} failures)",
                row.setting,
                row.coverage,
                row.fit_failures
            );
            rows.push(row);
        }
    }
    Ok(CoverageReport { rows })
}

/// Comparison of one diagonal entry of the scaled estimator covariance with
/// its asymptotic prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalCheck {
    pub name: String,
    pub empirical: f64,
    pub predicted: f64,
    pub relative_deviation: f64,
    /// `(empirical - predicted) / (predicted * sqrt(2 / (R - 1)))`.
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCheck {
    pub name: String,
    pub correlation: f64,
    /// Fisher-transformed correlation, `atanh(r) sqrt(R - 3)`.
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub setting: SimSetting,
    pub m: usize,
    pub n: usize,
    pub replications: usize,
    pub successes: usize,
    pub names: Vec<String>,
    /// Mean of the scaled estimator vector.
    pub mean: Vec<f64>,
    /// Row-major empirical covariance of the scaled estimator vector.
    pub covariance: Vec<f64>,
    pub diagonal: Vec<DiagonalCheck>,
    /// Correlations of the scaled dispersion with every other coordinate.
    pub phi_cross: Vec<CrossCheck>,
}

impl Theorem1Report {
    pub fn diagonal(&self, name: &str) -> Option<&DiagonalCheck> {
        self.diagonal.iter().find(|d| d.name == name)
    }
}

/// Fits `reps` replications and compares the empirical covariance of
/// `(sqrt(m)(b_A - b_A0), sqrt(mn)(b_B - b_B0), sqrt(m) vech(S - S0), sqrt(mn)(phi - phi0))`
/// with the block-diagonal asymptotic covariance.
pub fn theorem1_validation(
    s: &SimSetting,
    m: usize,
    n: usize,
    reps: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<Theorem1Report> {
    if reps < 50 {
        return Err(Error::Precondition(format!(
            "need at least 50 replications, got {reps}"
        )));
    }
    let truth = s.params()?;
    let d_b = s.beta_b.len();
    let results: Vec<Option<(DVector<f64>, Option<DMatrix<f64>>)>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let (sim, fit) = match replicate(s, m, n, seed, rep, opts) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("rep {rep}: {e}");
                    return None;
                }
            };
            if !fit.converged {
                return None;
            }
            let lambda = if d_b > 0 {
                estimate_lambda_beta_b(&sim.dataset, &truth, s.family).ok()
            } else {
                None
            };
            Some((scaled_errors(&fit.params, &truth, m, n), lambda))
        })
        .collect();
    let ok: Vec<_> = results.into_iter().flatten().collect();
    if (ok.len() as f64) < 0.8 * reps as f64 {
        return Err(Error::Precondition(format!(
            "only {} of {reps} fits succeeded",
            ok.len()
        )));
    }
    let r = ok.len();
    let dim = ok[0].0.len();
    let mut mean = DVector::zeros(dim);
    for (v, _) in &ok {
        mean += v;
    }
    mean /= r as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for (v, _) in &ok {
        let c = v - &mean;
        cov += &c * c.transpose();
    }
    cov /= (r - 1) as f64;

    let lambdas: Vec<&DMatrix<f64>> = ok.iter().filter_map(|(_, l)| l.as_ref()).collect();
    let mut lambda = DMatrix::zeros(d_b, d_b);
    if !lambdas.is_empty() {
        for l in &lambdas {
            lambda += *l;
        }
        lambda /= lambdas.len() as f64;
    }
    let mut predicted = vec![truth.sigma[(0, 0)]];
    predicted.extend((0..d_b).map(|k| truth.phi * lambda[(k, k)]));
    predicted.extend(vech_sigma_cov(&truth.sigma).diagonal().iter());
    predicted.push(1.0 / s.family.dispersion_info(truth.phi)?);

    let names = scaled_names(d_b);
    let se_factor = (2.0 / (r - 1) as f64).sqrt();
    let diagonal = (0..dim)
        .map(|k| {
            let emp = cov[(k, k)];
            let pred = predicted[k];
            DiagonalCheck {
                name: names[k].clone(),
                empirical: emp,
                predicted: pred,
                relative_deviation: emp / pred - 1.0,
                z: (emp - pred) / (pred * se_factor),
            }
        })
        .collect();
    let phi = dim - 1;
    let phi_cross = (0..phi)
        .map(|k| {
            let rho = cov[(k, phi)] / (cov[(k, k)] * cov[(phi, phi)]).sqrt();
            CrossCheck {
                name: names[k].clone(),
                correlation: rho,
                z: rho.atanh() * ((r - 3) as f64).sqrt(),
            }
        })
        .collect();
    Ok(Theorem1Report {
        setting: s.clone(),
        m,
        n,
        replications: reps,
        successes: r,
        names,
        mean: mean.iter().copied().collect(),
        covariance: cov.transpose().iter().copied().collect(),
        diagonal,
        phi_cross,
    })
}

fn scaled_names(d_b: usize) -> Vec<String> {
    let mut names = vec!["beta0".to_string()];
    names.extend((1..=d_b).map(|k| format!("beta_b_{k}")));
    names.push("sigma2".into());
    names.push("phi".into());
    names
}

/// Estimation errors scaled by their convergence rates.
pub fn scaled_errors(est: &Parameters, truth: &Parameters, m: usize, n: usize) -> DVector<f64> {
    let rm = (m as f64).sqrt();
    let rmn = ((m * n) as f64).sqrt();
    let mut v: Vec<f64> = est
        .beta_a
        .iter()
        .zip(truth.beta_a.iter())
        .map(|(a, b)| rm * (a - b))
        .collect();
    v.extend(
        est.beta_b
            .iter()
            .zip(truth.beta_b.iter())
            .map(|(a, b)| rmn * (a - b)),
    );
    v.extend(
        vech(&est.sigma)
            .iter()
            .zip(vech(&truth.sigma).iter())
            .map(|(a, b)| rm * (a - b)),
    );
    v.push(rmn * (est.phi - truth.phi));
    DVector::from_vec(v)
}
