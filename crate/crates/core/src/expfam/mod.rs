//! Reproductive exponential families with density
//! `exp[{y*eta - b(eta) + c(y)}/phi - d(phi) - e(y)] * h(y)`.

mod special;

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Gamma, InverseGaussian, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub use special::{digamma, trigamma, trigamma_minus_recip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Gamma,
    InverseGaussian,
}

/// `b` and its first three derivatives at one natural parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BSuite {
    pub b: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
}

/// `d` and its first two derivatives at one dispersion value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DSuite {
    pub d: f64,
    pub d1: f64,
    pub d2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeTerms {
    pub c: f64,
    pub e: f64,
    pub in_support: bool,
}

fn check_phi(phi: f64) -> Result<()> {
    if !phi.is_finite() || phi <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "dispersion must be finite and positive, got {phi}"
        )));
    }
    Ok(())
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Gaussian, Family::Gamma, Family::InverseGaussian];

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Gamma => "gamma",
            Family::InverseGaussian => "inverse_gaussian",
        }
    }

    /// Whether `eta` lies in the natural-parameter domain.
    #[inline]
    pub fn in_domain(self, eta: f64) -> bool {
        match self {
            Family::Gaussian => eta.is_finite(),
            Family::Gamma | Family::InverseGaussian => eta < 0.0 && eta.is_finite(),
        }
    }

    /// Whether `y` lies in the support, i.e. `h(y) = 1`.
    #[inline]
    pub fn in_support(self, y: f64) -> bool {
        match self {
            Family::Gaussian => y.is_finite(),
            Family::Gamma | Family::InverseGaussian => y > 0.0 && y.is_finite(),
        }
    }

    fn check_eta(self, eta: f64) -> Result<()> {
        if self.in_domain(eta) {
            Ok(())
        } else {
            Err(Error::NaturalDomain {
                family: self.name(),
                eta,
            })
        }
    }

    /// `b(eta)` without a domain check. Callers in hot loops test
    /// [`Family::in_domain`] first.
    #[inline]
    pub fn b(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 0.5 * eta * eta,
            Family::Gamma => -(-eta).ln(),
            Family::InverseGaussian => -(-2.0 * eta).sqrt(),
        }
    }

    /// `(b'(eta), b''(eta))` without a domain check.
    #[inline]
    pub fn b12(self, eta: f64) -> (f64, f64) {
        match self {
            Family::Gaussian => (eta, 1.0),
            Family::Gamma => {
                let r = -1.0 / eta;
                (r, r * r)
            }
            Family::InverseGaussian => {
                let s = (-2.0 * eta).sqrt();
                let b1 = 1.0 / s;
                (b1, b1 * b1 * b1)
            }
        }
    }

    pub fn b_suite(self, eta: f64) -> Result<BSuite> {
        self.check_eta(eta)?;
        Ok(match self {
            Family::Gaussian => BSuite {
                b: 0.5 * eta * eta,
                b1: eta,
                b2: 1.0,
                b3: 0.0,
            },
            Family::Gamma => {
                let r = -1.0 / eta;
                BSuite {
                    b: -(-eta).ln(),
                    b1: r,
                    b2: r * r,
                    b3: 2.0 * r * r * r,
                }
            }
            Family::InverseGaussian => {
                let s = (-2.0 * eta).sqrt();
                let inv = 1.0 / s;
                BSuite {
                    b: -s,
                    b1: inv,
                    b2: inv.powi(3),
                    b3: 3.0 * inv.powi(5),
                }
            }
        })
    }

    /// Inverse of the mean map `b'`.
    pub fn mean_to_eta(self, mu: f64) -> Result<f64> {
        let eta = match self {
            Family::Gaussian => mu,
            Family::Gamma => -1.0 / mu,
            Family::InverseGaussian => -0.5 / (mu * mu),
        };
        if self != Family::Gaussian && !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{} mean must be positive, got {mu}",
                self.name()
            )));
        }
        self.check_eta(eta)?;
        Ok(eta)
    }

    /// Variance function `V(mu) = b''(b'^{-1}(mu))`.
    pub fn variance_function(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Gamma => mu * mu,
            Family::InverseGaussian => mu * mu * mu,
        }
    }

    pub fn c_e_terms(self, y: f64) -> CeTerms {
        if !self.in_support(y) {
            return CeTerms {
                c: f64::NAN,
                e: f64::NAN,
                in_support: false,
            };
        }
        let (c, e) = match self {
            Family::Gaussian => (-0.5 * y * y, 0.5 * (2.0 * PI).ln()),
            Family::Gamma => (y.ln(), y.ln()),
            Family::InverseGaussian => (-0.5 / y, 0.5 * (2.0 * PI * y * y * y).ln()),
        };
        CeTerms {
            c,
            e,
            in_support: true,
        }
    }

    pub fn d_suite(self, phi: f64) -> Result<DSuite> {
        check_phi(phi)?;
        Ok(match self {
            Family::Gaussian | Family::InverseGaussian => DSuite {
                d: 0.5 * phi.ln(),
                d1: 0.5 / phi,
                d2: -0.5 / (phi * phi),
            },
            Family::Gamma => {
                let x = 1.0 / phi;
                // g = 1 - log(phi) - digamma(1/phi), d' = g / phi^2
                let g = 1.0 - phi.ln() - digamma(x)?;
                let p2 = phi * phi;
                let p3 = p2 * phi;
                DSuite {
                    d: x * phi.ln() + ln_gamma(x),
                    d1: g / p2,
                    d2: -2.0 * g / p3 - 1.0 / p3 + trigamma(x)? / (p3 * phi),
                }
            }
        })
    }

    /// Only `d` itself; cheaper than [`Family::d_suite`] for likelihood sums.
    pub(crate) fn d_value(self, phi: f64) -> f64 {
        match self {
            Family::Gaussian | Family::InverseGaussian => 0.5 * phi.ln(),
            Family::Gamma => phi.ln() / phi + ln_gamma(1.0 / phi),
        }
    }

    /// `2 d'(phi)/phi + d''(phi)`, the Fisher information per observation for
    /// the dispersion. Its reciprocal is the asymptotic variance of
    /// `sqrt(mn) (phi_hat - phi)`.
    pub fn dispersion_info(self, phi: f64) -> Result<f64> {
        check_phi(phi)?;
        match self {
            Family::Gaussian | Family::InverseGaussian => Ok(0.5 / (phi * phi)),
            // (trigamma(1/phi) - phi) / phi^4, with the difference formed
            // without cancellation
            Family::Gamma => Ok(trigamma_minus_recip(1.0 / phi)? / phi.powi(4)),
        }
    }

    /// Log density of `y` at natural parameter `eta`; `-inf` outside the support.
    pub fn log_density(self, y: f64, eta: f64, phi: f64) -> Result<f64> {
        self.check_eta(eta)?;
        check_phi(phi)?;
        let ce = self.c_e_terms(y);
        if !ce.in_support {
            return Ok(f64::NEG_INFINITY);
        }
        Ok((y * eta - self.b(eta) + ce.c) / phi - self.d_value(phi) - ce.e)
    }

    /// Draws one response with mean `b'(eta)` and variance `phi * b''(eta)`.
    pub fn sample_response<R: Rng + ?Sized>(self, eta: f64, phi: f64, rng: &mut R) -> Result<f64> {
        self.check_eta(eta)?;
        check_phi(phi)?;
        let invalid = |e: &dyn fmt::Display| Error::InvalidArgument(e.to_string());
        Ok(match self {
            Family::Gaussian => Normal::new(eta, phi.sqrt())
                .map_err(|e| invalid(&e))?
                .sample(rng),
            Family::Gamma => {
                // shape 1/phi, rate -eta/phi
                Gamma::new(1.0 / phi, phi / (-eta))
                    .map_err(|e| invalid(&e))?
                    .sample(rng)
            }
            Family::InverseGaussian => {
                let mean = 1.0 / (-2.0 * eta).sqrt();
                InverseGaussian::new(mean, 1.0 / phi)
                    .map_err(|e| invalid(&e))?
                    .sample(rng)
            }
        })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "gamma" => Ok(Family::Gamma),
            "inverse_gaussian" | "inversegaussian" | "ig" => Ok(Family::InverseGaussian),
            other => Err(Error::InvalidArgument(format!("unknown family `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn b_suite_examples() {
        let g = Family::Gaussian.b_suite(0.0).unwrap();
        assert_eq!((g.b, g.b1, g.b2, g.b3), (0.0, 0.0, 1.0, 0.0));
        let g = Family::Gamma.b_suite(-1.0).unwrap();
        assert_eq!((g.b, g.b1, g.b2, g.b3), (0.0, 1.0, 1.0, 2.0));
        let g = Family::InverseGaussian.b_suite(-0.5).unwrap();
        assert_eq!((g.b, g.b1, g.b2, g.b3), (-1.0, 1.0, 1.0, 3.0));
    }

    #[test]
    fn b_suite_finite_differences() {
        let h = 1e-5;
        for (fam, eta) in [
            (Family::Gaussian, 0.7),
            (Family::Gamma, -1.3),
            (Family::InverseGaussian, -0.8),
        ] {
            let s = fam.b_suite(eta).unwrap();
            let lo = fam.b_suite(eta - h).unwrap();
            let hi = fam.b_suite(eta + h).unwrap();
            assert!(close((hi.b - lo.b) / (2.0 * h), s.b1, 1e-8));
            assert!(close((hi.b1 - lo.b1) / (2.0 * h), s.b2, 1e-8));
            assert!(close((hi.b2 - lo.b2) / (2.0 * h), s.b3, 1e-8));
            assert_eq!(fam.b12(eta), (s.b1, s.b2));
        }
    }

    #[test]
    fn b_suite_domain_errors() {
        assert!(Family::Gamma.b_suite(0.0).is_err());
        assert!(Family::InverseGaussian.b_suite(0.5).is_err());
        assert!(Family::Gaussian.b_suite(f64::NAN).is_err());
        assert!(Family::Gaussian.b_suite(12.0).is_ok());
    }

    #[test]
    fn c_e_examples() {
        let t = Family::Gaussian.c_e_terms(2.0);
        assert_eq!(t.c, -2.0);
        assert!((t.e - 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!(!Family::Gamma.c_e_terms(-1.0).in_support);
        let t = Family::InverseGaussian.c_e_terms(1.0);
        assert_eq!(t.c, -0.5);
        assert!((t.e - 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!(t.in_support);
    }

    #[test]
    fn d_suite_examples() {
        let s = Family::Gaussian.d_suite(1.0).unwrap();
        assert_eq!((s.d, s.d1, s.d2), (0.0, 0.5, -0.5));
        let s = Family::Gamma.d_suite(1.0).unwrap();
        assert!(s.d.abs() < 1e-15);
        assert!((s.d1 - 1.577_215_664_901_532_9).abs() < 1e-12);
        let want = -3.0 - 2.0 * 0.577_215_664_901_532_9 + PI * PI / 6.0;
        assert!((s.d2 - want).abs() < 1e-12, "{}", s.d2);
        let s = Family::InverseGaussian.d_suite(2.0).unwrap();
        assert!((s.d - 0.5 * 2f64.ln()).abs() < 1e-15);
        assert_eq!((s.d1, s.d2), (0.25, -0.125));
        assert!(Family::Gamma.d_suite(0.0).is_err());
    }

    #[test]
    fn d_suite_finite_differences() {
        for fam in Family::ALL {
            for &phi in &[0.1, 0.5, 1.0, 2.0, 5.0] {
                let s = fam.d_suite(phi).unwrap();
                let h = 1e-5 * phi;
                let f = |p: f64| fam.d_value(p);
                let fd1 = (f(phi + h) - f(phi - h)) / (2.0 * h);
                let h2 = 1e-4 * phi;
                let fd2 = (f(phi + h2) - 2.0 * f(phi) + f(phi - h2)) / (h2 * h2);
                assert!(close(fd1, s.d1, 1e-6), "{fam} {phi}: {fd1} vs {}", s.d1);
                assert!(close(fd2, s.d2, 1e-6), "{fam} {phi}: {fd2} vs {}", s.d2);
                assert_eq!(s.d, f(phi));
            }
        }
    }

    #[test]
    fn dispersion_info_examples() {
        assert_eq!(Family::Gaussian.dispersion_info(1.0).unwrap(), 0.5);
        let g = Family::Gamma.dispersion_info(1.0).unwrap();
        assert!((g - (PI * PI / 6.0 - 1.0)).abs() < 1e-12);
        assert_eq!(Family::InverseGaussian.dispersion_info(2.0).unwrap(), 0.125);
        assert!(Family::Gamma.dispersion_info(-1.0).is_err());
    }

    #[test]
    fn dispersion_info_matches_suite() {
        for fam in Family::ALL {
            for &phi in &[0.3, 1.0, 2.5] {
                let s = fam.d_suite(phi).unwrap();
                let direct = 2.0 * s.d1 / phi + s.d2;
                let info = fam.dispersion_info(phi).unwrap();
                assert!(close(direct, info, 1e-10), "{fam} {phi}");
                assert!(info > 0.0);
            }
        }
    }

    #[test]
    fn dispersion_info_psi_identity() {
        // info * phi^4 = d^2/dpsi^2 d(1/psi) at psi = 1/phi
        for fam in Family::ALL {
            for &phi in &[0.2, 0.54, 1.0, 3.0] {
                let psi = 1.0 / phi;
                let h = 1e-3 * psi;
                let f = |q: f64| fam.d_value(1.0 / q);
                let fd = (f(psi + h) - 2.0 * f(psi) + f(psi - h)) / (h * h);
                let lhs = fam.dispersion_info(phi).unwrap() * phi.powi(4);
                assert!(close(lhs, fd, 1e-6), "{fam} {phi}: {lhs} vs {fd}");
            }
        }
    }

    #[test]
    fn gamma_small_dispersion_limit() {
        let phi: f64 = 0.05;
        let gamma_var = 1.0 / Family::Gamma.dispersion_info(phi).unwrap();
        let gauss_var = 2.0 * phi * phi;
        assert!(((gamma_var - gauss_var) / gauss_var).abs() <= 0.02);
    }

    /// Simpson's rule on a truncated range.
    fn integrate(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            let x = lo + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn densities_integrate_to_one() {
        for &(eta, phi) in &[(-1.0, 0.5), (-2.0, 0.2), (-0.5, 1.0)] {
            for fam in Family::ALL {
                let eta = if fam == Family::Gaussian { -eta } else { eta };
                let dens = |y: f64| fam.log_density(y, eta, phi).unwrap().exp();
                let total = match fam {
                    Family::Gaussian => {
                        let sd = phi.sqrt();
                        integrate(dens, eta - 40.0 * sd, eta + 40.0 * sd, 20_000)
                    }
                    // substitute y = exp(t) to tame the mass near zero
                    _ => integrate(|t: f64| dens(t.exp()) * t.exp(), -40.0, 8.0, 200_000),
                };
                assert!((total - 1.0).abs() < 1e-8, "{fam} eta={eta} phi={phi}: {total}");
            }
        }
    }

    fn moments(fam: Family, eta: f64, phi: f64, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<f64> = (0..n)
            .map(|_| fam.sample_response(eta, phi, &mut rng).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        (mean, var)
    }

    #[test]
    fn sampler_moments() {
        let n = 100_000;
        let (mean, _) = moments(Family::Gaussian, 2.0, 1.0, n, 1);
        assert!((mean - 2.0).abs() < 0.02);

        for (fam, eta, phi) in [
            (Family::Gaussian, 2.0, 1.0),
            (Family::Gamma, -2.0, 0.5),
            (Family::InverseGaussian, -0.5, 1.0),
            (Family::Gamma, -0.8, 1.9),
        ] {
            let s = fam.b_suite(eta).unwrap();
            let var = phi * s.b2;
            let (m, v) = moments(fam, eta, phi, n, 7);
            let se_mean = (var / n as f64).sqrt();
            assert!((m - s.b1).abs() < 4.0 * se_mean, "{fam}: mean {m} vs {}", s.b1);
            if fam != Family::InverseGaussian {
                // fourth central moment for the variance's standard error
                let kurt = match fam {
                    Family::Gaussian => 3.0,
                    _ => 3.0 + 6.0 * phi,
                };
                let se_var = var * ((kurt - 1.0) / n as f64).sqrt();
                assert!((v - var).abs() < 4.0 * se_var, "{fam}: var {v} vs {var}");
            }
        }
    }

    #[test]
    fn sampler_rejects_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Family::Gamma.sample_response(0.1, 1.0, &mut rng).is_err());
        assert!(Family::Gaussian.sample_response(0.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn mean_map_round_trip() {
        for fam in Family::ALL {
            let eta = -0.7;
            let mu = fam.b_suite(eta).unwrap().b1;
            assert!((fam.mean_to_eta(mu).unwrap() - eta).abs() < 1e-14);
            assert!((fam.variance_function(mu) - fam.b_suite(eta).unwrap().b2).abs() < 1e-14);
        }
    }
}
