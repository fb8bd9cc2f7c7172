//! Conditional log-likelihood of the GLMM with Gaussian random effects.
//!
//! Each group's random-effect integral is computed by tensor-product
//! Gauss-Hermite quadrature, centred at the mode of the group integrand and
//! scaled by the inverse Cholesky factor of its negative Hessian. The
//! Gaussian family also has a closed form, [`gaussian_marginal_loglik`].

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::model::{Dataset, Group, Parameters};

/// What to do when a quadrature node puts some natural parameter outside
/// the family's domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainPolicy {
    /// The integrand is zero there (its continuous extension for Gamma).
    ZeroOutside,
    /// Fail the evaluation.
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureSpec {
    /// Odd, at least 3, so the centring point is itself a node.
    pub nodes_per_dim: usize,
    pub adaptive: bool,
    pub domain_policy: DomainPolicy,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            nodes_per_dim: 21,
            adaptive: true,
            domain_policy: DomainPolicy::ZeroOutside,
        }
    }
}

impl QuadratureSpec {
    pub fn with_nodes(nodes_per_dim: usize) -> Self {
        QuadratureSpec {
            nodes_per_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes_per_dim < 3 || self.nodes_per_dim % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "nodes_per_dim must be odd and >= 3, got {}",
                self.nodes_per_dim
            )));
        }
        Ok(())
    }
}

/// Gauss-Hermite rule for the weight `exp(-x^2)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub-Welsch: eigen-decomposition of the Hermite Jacobi matrix.
    fn compute(n: usize) -> Self {
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let off = (k as f64 / 2.0).sqrt();
            jac[(k, k - 1)] = off;
            jac[(k - 1, k)] = off;
        }
        let eig = SymmetricEigen::new(jac);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let v0 = eig.eigenvectors[(0, k)];
                (eig.eigenvalues[k], PI.sqrt() * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // enforce exact symmetry about zero
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for k in 0..n {
            let (a, b) = (pairs[k], pairs[n - 1 - k]);
            nodes[k] = 0.5 * (a.0 - b.0);
            weights[k] = 0.5 * (a.1 + b.1);
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        GaussHermite { nodes, weights }
    }
}

/// Cached rule with `n` nodes.
pub fn gauss_hermite(n: usize) -> Arc<GaussHermite> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    guard
        .entry(n)
        .or_insert_with(|| Arc::new(GaussHermite::compute(n)))
        .clone()
}

/// Tensor-product grid in `d` dimensions: standardized nodes and
/// `log(weight) + |z|^2`.
struct Grid {
    d: usize,
    z: Vec<f64>,
    log_w: Vec<f64>,
}

impl Grid {
    fn new(rule: &GaussHermite, d: usize) -> Self {
        let k = rule.nodes.len();
        let total = k.pow(d as u32);
        let mut z = Vec::with_capacity(total * d);
        let mut log_w = Vec::with_capacity(total);
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            let mut lw = 0.0;
            for &i in &idx {
                let x = rule.nodes[i];
                z.push(x);
                lw += rule.weights[i].ln() + x * x;
            }
            log_w.push(lw);
            for slot in idx.iter_mut() {
                *slot += 1;
                if *slot < k {
                    break;
                }
                *slot = 0;
            }
        }
        Grid { d, z, log_w }
    }

    fn len(&self) -> usize {
        self.log_w.len()
    }

    fn node(&self, k: usize) -> &[f64] {
        &self.z[k * self.d..(k + 1) * self.d]
    }
}

/// `(beta_A + u)' x_A + beta_B' x_B`.
pub fn eta_linear(p: &Parameters, xa: &[f64], xb: &[f64], u: &[f64]) -> f64 {
    let a: f64 = xa
        .iter()
        .zip(p.beta_a.iter().zip(u))
        .map(|(x, (b, u))| (b + u) * x)
        .sum();
    let b: f64 = xb.iter().zip(p.beta_b.iter()).map(|(x, b)| b * x).sum();
    a + b
}

/// Mode of a group's random-effect integrand.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMode {
    pub u_star: DVector<f64>,
    /// Negative Hessian of the integrand's log at the mode.
    pub hessian: DMatrix<f64>,
    /// Log integrand at the mode.
    pub objective: f64,
    pub iterations: usize,
}

/// Log integrand of one group:
/// `g(u) = sum_j {y_j u'x_Aj - b(eta_j(u))}/phi - u' Sigma^{-1} u / 2`.
struct GroupIntegrand<'a> {
    family: Family,
    phi: f64,
    d_a: usize,
    xa: &'a [f64],
    eta0: Vec<f64>,
    y: &'a [f64],
    sum_yxa: Vec<f64>,
    /// Lower Cholesky factor of Sigma.
    chol: &'a DMatrix<f64>,
    /// Sigma^{-1}.
    prec: &'a DMatrix<f64>,
}

impl<'a> GroupIntegrand<'a> {
    fn new(
        p: &Parameters,
        g: &'a Group,
        family: Family,
        chol: &'a DMatrix<f64>,
        prec: &'a DMatrix<f64>,
    ) -> Self {
        let (d_a, d_b) = (p.d_a(), p.d_b());
        let zero = vec![0.0; d_a];
        let eta0 = (0..g.len())
            .map(|j| eta_linear(p, g.xa_row(j, d_a), g.xb_row(j, d_b), &zero))
            .collect();
        let mut sum_yxa = vec![0.0; d_a];
        for j in 0..g.len() {
            for (s, x) in sum_yxa.iter_mut().zip(g.xa_row(j, d_a)) {
                *s += g.y[j] * x;
            }
        }
        GroupIntegrand {
            family,
            phi: p.phi,
            d_a,
            xa: &g.xa,
            eta0,
            y: &g.y,
            sum_yxa,
            chol,
            prec,
        }
    }

    #[inline]
    fn shift(&self, j: usize, u: &[f64]) -> f64 {
        let x = &self.xa[j * self.d_a..(j + 1) * self.d_a];
        x.iter().zip(u).map(|(x, u)| x * u).sum()
    }

    fn prior_quad(&self, u: &[f64]) -> f64 {
        // |C^{-1} u|^2 by forward substitution
        let d = self.d_a;
        let mut w = vec![0.0; d];
        let mut q = 0.0;
        for r in 0..d {
            let mut s = u[r];
            for c in 0..r {
                s -= self.chol[(r, c)] * w[c];
            }
            w[r] = s / self.chol[(r, r)];
            q += w[r] * w[r];
        }
        q
    }

    /// `sum_j b(eta_j(u))`, or `None` if some eta leaves the domain.
    fn sum_b(&self, u: &[f64]) -> Option<f64> {
        let n = self.eta0.len();
        match self.family {
            Family::Gaussian => {
                let mut s = 0.0;
                for j in 0..n {
                    let e = self.eta0[j] + self.shift(j, u);
                    s += 0.5 * e * e;
                }
                Some(s)
            }
            Family::Gamma => {
                // sum of -log(-eta) with the logs taken over blocks of products
                let mut s = 0.0;
                let mut j = 0;
                while j < n {
                    let end = (j + 8).min(n);
                    let mut prod = 1.0;
                    for k in j..end {
                        let e = self.eta0[k] + self.shift(k, u);
                        if !(e < 0.0) {
                            return None;
                        }
                        prod *= -e;
                    }
                    if prod.is_normal() && prod.is_finite() {
                        s -= prod.ln();
                    } else {
                        for k in j..end {
                            s -= (-(self.eta0[k] + self.shift(k, u))).ln();
                        }
                    }
                    j = end;
                }
                Some(s)
            }
            Family::InverseGaussian => {
                let mut s = 0.0;
                for j in 0..n {
                    let e = self.eta0[j] + self.shift(j, u);
                    if !(e < 0.0) {
                        return None;
                    }
                    s -= (-2.0 * e).sqrt();
                }
                Some(s)
            }
        }
    }

    fn value(&self, u: &[f64]) -> Option<f64> {
        let lin: f64 = u.iter().zip(&self.sum_yxa).map(|(u, s)| u * s).sum();
        let sb = self.sum_b(u)?;
        let v = (lin - sb) / self.phi - 0.5 * self.prior_quad(u);
        v.is_finite().then_some(v)
    }

    /// Gradient and negative Hessian at a feasible `u`.
    fn derivatives(&self, u: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.d_a;
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for j in 0..self.eta0.len() {
            let x = &self.xa[j * d..(j + 1) * d];
            let e = self.eta0[j] + self.shift(j, u);
            let (b1, b2) = self.family.b12(e);
            let r = (self.y[j] - b1) / self.phi;
            let w = b2 / self.phi;
            for a in 0..d {
                grad[a] += r * x[a];
                for c in 0..=a {
                    hess[(a, c)] += w * x[a] * x[c];
                }
            }
        }
        for a in 0..d {
            for c in 0..a {
                hess[(c, a)] = hess[(a, c)];
            }
        }
        let uv = DVector::from_column_slice(u);
        grad -= self.prec * &uv;
        hess += self.prec;
        (grad, hess)
    }

    fn mode(&self, group: &str) -> Result<PosteriorMode> {
        let d = self.d_a;
        let fail = |reason: String| Error::Group {
            group: group.to_string(),
            reason,
        };
        let mut u = vec![0.0; d];
        let mut f = self
            .value(&u)
            .ok_or_else(|| fail("natural parameter outside the domain at u = 0".into()))?;
        for it in 0..100 {
            let (grad, hess) = self.derivatives(&u);
            let chol = nalgebra::Cholesky::new(hess.clone())
                .ok_or_else(|| fail("integrand Hessian not positive definite".into()))?;
            if grad.norm() <= 1e-8 * (1.0 + f.abs()) {
                return Ok(PosteriorMode {
                    u_star: DVector::from_vec(u),
                    hessian: hess,
                    objective: f,
                    iterations: it,
                });
            }
            let step = chol.solve(&grad);
            let decrement = grad.dot(&step);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand: Vec<f64> = u.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
                if let Some(fc) = self.value(&cand) {
                    if fc >= f + 1e-4 * t * decrement || fc >= f {
                        u = cand;
                        f = fc;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted || decrement < 1e-24 {
                // no further progress is representable; accept if the gradient is tiny
                let (grad, hess) = self.derivatives(&u);
                if grad.norm() <= 1e-6 * (1.0 + f.abs()) {
                    return Ok(PosteriorMode {
                        u_star: DVector::from_vec(u),
                        hessian: hess,
                        objective: f,
                        iterations: it + 1,
                    });
                }
                return Err(fail("Newton line search failed".into()));
            }
        }
        Err(fail("Newton iteration did not converge in 100 steps".into()))
    }
}

fn sigma_factors(p: &Parameters) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let chol = p.sigma_cholesky()?;
    let d = p.d_a();
    let linv = chol
        .clone()
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::NotPositiveDefinite("Sigma".into()))?;
    let prec = linv.transpose() * linv;
    let log_det: f64 = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((chol, prec, log_det))
}

/// Mode of a group's integrand, found by damped Newton from `u = 0`.
pub fn group_posterior_mode(p: &Parameters, group: &Group, family: Family) -> Result<PosteriorMode> {
    let (chol, prec, _) = sigma_factors(p)?;
    GroupIntegrand::new(p, group, family, &chol, &prec).mode(&group.id)
}

/// Posterior modes of every group, in dataset order.
pub fn posterior_modes(p: &Parameters, ds: &Dataset, family: Family) -> Result<Vec<PosteriorMode>> {
    let (chol, prec, _) = sigma_factors(p)?;
    ds.groups()
        .iter()
        .map(|g| GroupIntegrand::new(p, g, family, &chol, &prec).mode(&g.id))
        .collect()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_dims(p: &Parameters, ds: &Dataset) -> Result<()> {
    if p.d_a() != ds.d_a() || p.d_b() != ds.d_b() {
        return Err(Error::InvalidArgument(format!(
            "parameter dimensions ({}, {}) do not match dataset ({}, {})",
            p.d_a(),
            p.d_b(),
            ds.d_a(),
            ds.d_b()
        )));
    }
    Ok(())
}

/// `sum_ij [(y_ij eta0_ij + c(y_ij))/phi - d(phi) - e(y_ij)]` with the
/// support check.
fn fixed_part(p: &Parameters, ds: &Dataset, family: Family) -> Result<f64> {
    let (d_a, d_b) = (p.d_a(), p.d_b());
    let zero = vec![0.0; d_a];
    let d = family.d_value(p.phi);
    let mut s = 0.0;
    for (_, g, j) in ds.observations() {
        let ce = family.c_e_terms(g.y[j]);
        if !ce.in_support {
            return Err(Error::Support {
                family: family.name(),
                y: g.y[j],
                row: g.rows[j],
            });
        }
        let eta0 = eta_linear(p, g.xa_row(j, d_a), g.xb_row(j, d_b), &zero);
        s += (g.y[j] * eta0 + ce.c) / p.phi - d - ce.e;
    }
    Ok(s)
}

/// The conditional log-likelihood, with each group's integral computed by
/// Gauss-Hermite quadrature.
pub fn log_likelihood(p: &Parameters, ds: &Dataset, family: Family, q: &QuadratureSpec) -> Result<f64> {
    check_dims(p, ds)?;
    q.validate()?;
    let d_a = p.d_a();
    if d_a > 2 {
        if family == Family::Gaussian {
            return gaussian_marginal_loglik(p, ds);
        }
        return Err(Error::InvalidArgument(format!(
            "quadrature supports d_a <= 2, got {d_a}"
        )));
    }
    if d_a == 1 {
        return log_likelihood_scalar(p, ds, family, q);
    }
    let (chol, prec, log_det_sigma) = sigma_factors(p)?;
    let rule = gauss_hermite(q.nodes_per_dim);
    let grid = Grid::new(&rule, d_a);
    let m = ds.m() as f64;

    let mut total = -0.5 * m * (d_a as f64 * (2.0 * PI).ln() + log_det_sigma);
    total += fixed_part(p, ds, family)?;

    let mut vals = vec![0.0; grid.len()];
    let mut u = vec![0.0; d_a];
    for g in ds.groups() {
        let integrand = GroupIntegrand::new(p, g, family, &chol, &prec);
        // centre and scale: u = centre + sqrt(2) * L z with L L' = H^{-1}
        let (centre, scale) = if q.adaptive {
            let mode = integrand.mode(&g.id)?;
            let r = nalgebra::Cholesky::new(mode.hessian.clone())
                .ok_or_else(|| Error::Group {
                    group: g.id.clone(),
                    reason: "mode Hessian not positive definite".into(),
                })?
                .l();
            let scale = r
                .solve_lower_triangular(&DMatrix::identity(d_a, d_a))
                .ok_or_else(|| Error::NotPositiveDefinite("mode Hessian".into()))?
                .transpose();
            (mode.u_star, scale)
        } else {
            (DVector::zeros(d_a), chol.clone())
        };
        let log_det_scale: f64 = scale.diagonal().iter().map(|v| v.abs().ln()).sum();
        for k in 0..grid.len() {
            let z = grid.node(k);
            for a in 0..d_a {
                let mut s = centre[a];
                for c in 0..d_a {
                    s += std::f64::consts::SQRT_2 * scale[(a, c)] * z[c];
                }
                u[a] = s;
            }
            vals[k] = match integrand.value(&u) {
                Some(v) => grid.log_w[k] + v,
                None => match q.domain_policy {
                    DomainPolicy::ZeroOutside => f64::NEG_INFINITY,
                    DomainPolicy::Error => {
                        return Err(Error::Group {
                            group: g.id.clone(),
                            reason: format!(
                                "natural parameter outside the {} domain at a quadrature node",
                                family
                            ),
                        })
                    }
                },
            };
        }
        let lse = log_sum_exp(&vals);
        if !lse.is_finite() {
            return Err(Error::Group {
                group: g.id.clone(),
                reason: "integral is zero at every quadrature node".into(),
            });
        }
        total += 0.5 * d_a as f64 * 2f64.ln() + log_det_scale + lse;
    }
    Ok(total)
}

/// Integrand of one group with a scalar random effect, kept in caller-owned
/// buffers.
struct ScalarIntegrand<'a> {
    family: Family,
    phi: f64,
    prec: f64,
    x: &'a [f64],
    eta0: &'a [f64],
    sum_yx: f64,
    y: &'a [f64],
}

impl ScalarIntegrand<'_> {
    fn sum_b(&self, u: f64) -> Option<f64> {
        let (x, eta0) = (self.x, self.eta0);
        match self.family {
            Family::Gaussian => Some(
                eta0.iter()
                    .zip(x)
                    .map(|(e, x)| {
                        let e = e + x * u;
                        0.5 * e * e
                    })
                    .sum(),
            ),
            Family::Gamma => {
                let mut s = 0.0;
                for (ec, xc) in eta0.chunks(8).zip(x.chunks(8)) {
                    let mut prod = 1.0;
                    for (e, x) in ec.iter().zip(xc) {
                        let e = e + x * u;
                        if !(e < 0.0) {
                            return None;
                        }
                        prod *= -e;
                    }
                    if prod.is_normal() && prod.is_finite() {
                        s -= prod.ln();
                    } else {
                        for (e, x) in ec.iter().zip(xc) {
                            s -= (-(e + x * u)).ln();
                        }
                    }
                }
                Some(s)
            }
            Family::InverseGaussian => {
                let mut s = 0.0;
                for (e, x) in eta0.iter().zip(x) {
                    let e = e + x * u;
                    if !(e < 0.0) {
                        return None;
                    }
                    s -= (-2.0 * e).sqrt();
                }
                Some(s)
            }
        }
    }

    fn value(&self, u: f64) -> Option<f64> {
        let v = (u * self.sum_yx - self.sum_b(u)?) / self.phi - 0.5 * self.prec * u * u;
        v.is_finite().then_some(v)
    }

    /// Gradient and negative second derivative.
    fn derivatives(&self, u: f64) -> (f64, f64) {
        let (mut g, mut h) = (0.0, 0.0);
        for ((e, x), y) in self.eta0.iter().zip(self.x).zip(self.y) {
            let (b1, b2) = self.family.b12(e + x * u);
            g += (y - b1) * x;
            h += b2 * x * x;
        }
        (g / self.phi - self.prec * u, h / self.phi + self.prec)
    }

    fn mode(&self, group: &str) -> Result<(f64, f64)> {
        let fail = |reason: &str| Error::Group {
            group: group.to_string(),
            reason: reason.to_string(),
        };
        let mut u = 0.0;
        let mut f = self
            .value(u)
            .ok_or_else(|| fail("natural parameter outside the domain at u = 0"))?;
        for _ in 0..100 {
            let (grad, hess) = self.derivatives(u);
            if !(hess > 0.0) {
                return Err(fail("integrand Hessian not positive definite"));
            }
            if grad.abs() <= 1e-8 * (1.0 + f.abs()) {
                return Ok((u, hess));
            }
            let step = grad / hess;
            let decrement = grad * step;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = u + t * step;
                if let Some(fc) = self.value(cand) {
                    if fc >= f + 1e-4 * t * decrement || fc >= f {
                        u = cand;
                        f = fc;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted || decrement < 1e-24 {
                let (grad, hess) = self.derivatives(u);
                if grad.abs() <= 1e-6 * (1.0 + f.abs()) && hess > 0.0 {
                    return Ok((u, hess));
                }
                return Err(fail("Newton line search failed"));
            }
        }
        Err(fail("Newton iteration did not converge in 100 steps"))
    }
}

fn log_likelihood_scalar(
    p: &Parameters,
    ds: &Dataset,
    family: Family,
    q: &QuadratureSpec,
) -> Result<f64> {
    let sigma2 = p.sigma[(0, 0)];
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::NotPositiveDefinite("Sigma".into()));
    }
    let grid = Grid::new(&gauss_hermite(q.nodes_per_dim), 1);
    let d_b = p.d_b();
    let beta_a = p.beta_a[0];
    let m = ds.m() as f64;
    let mut total = -0.5 * m * ((2.0 * PI).ln() + sigma2.ln());
    total += fixed_part(p, ds, family)?;

    let mut eta0 = Vec::new();
    let mut vals = vec![0.0; grid.len()];
    for g in ds.groups() {
        eta0.clear();
        let mut sum_yx = 0.0;
        for j in 0..g.len() {
            let xb: f64 = g
                .xb_row(j, d_b)
                .iter()
                .zip(p.beta_b.iter())
                .map(|(x, b)| x * b)
                .sum();
            eta0.push(g.xa[j] * beta_a + xb);
            sum_yx += g.y[j] * g.xa[j];
        }
        let integrand = ScalarIntegrand {
            family,
            phi: p.phi,
            prec: 1.0 / sigma2,
            x: &g.xa,
            eta0: &eta0,
            sum_yx,
            y: &g.y,
        };
        let (centre, scale) = if q.adaptive {
            let (u, h) = integrand.mode(&g.id)?;
            (u, 1.0 / h.sqrt())
        } else {
            (0.0, sigma2.sqrt())
        };
        for (k, (z, lw)) in grid.z.iter().zip(&grid.log_w).enumerate() {
            let u = centre + std::f64::consts::SQRT_2 * scale * z;
            vals[k] = match integrand.value(u) {
                Some(v) => lw + v,
                None => match q.domain_policy {
                    DomainPolicy::ZeroOutside => f64::NEG_INFINITY,
                    DomainPolicy::Error => {
                        return Err(Error::Group {
                            group: g.id.clone(),
                            reason: format!(
                                "natural parameter outside the {} domain at a quadrature node",
                                family
                            ),
                        })
                    }
                },
            };
        }
        let lse = log_sum_exp(&vals);
        if !lse.is_finite() {
            return Err(Error::Group {
                group: g.id.clone(),
                reason: "integral is zero at every quadrature node".into(),
            });
        }
        total += 0.5 * 2f64.ln() + scale.ln() + lse;
    }
    Ok(total)
}

fn gaussian_marginal_scalar(p: &Parameters, ds: &Dataset, sigma2: f64) -> f64 {
    let (d_b, phi, beta_a) = (p.d_b(), p.phi, p.beta_a[0]);
    let log_2pi = (2.0 * PI).ln();
    let mut total = 0.0;
    for g in ds.groups() {
        let (mut ztz, mut ztr, mut rtr) = (0.0, 0.0, 0.0);
        for j in 0..g.len() {
            let x = g.xa[j];
            let xb: f64 = g
                .xb_row(j, d_b)
                .iter()
                .zip(p.beta_b.iter())
                .map(|(x, b)| x * b)
                .sum();
            let r = g.y[j] - x * beta_a - xb;
            rtr += r * r;
            ztr += x * r;
            ztz += x * x;
        }
        let n = g.len() as f64;
        let k = 1.0 + sigma2 * ztz / phi;
        let quad = rtr / phi - sigma2 * ztr * ztr / (phi * phi * k);
        total += -0.5 * (n * log_2pi + n * phi.ln() + k.ln() + quad);
    }
    total
}

/// Closed-form marginal log-likelihood for the Gaussian family:
/// `y_i ~ N(X_Bi beta_B + X_Ai beta_A, phi I + X_Ai Sigma X_Ai')`.
pub fn gaussian_marginal_loglik(p: &Parameters, ds: &Dataset) -> Result<f64> {
    check_dims(p, ds)?;
    let (d_a, d_b) = (p.d_a(), p.d_b());
    let chol = p.sigma_cholesky()?;
    let phi = p.phi;
    if d_a == 1 {
        return Ok(gaussian_marginal_scalar(p, ds, chol[(0, 0)].powi(2)));
    }
    let zero = vec![0.0; d_a];
    let mut total = 0.0;
    for g in ds.groups() {
        let n = g.len();
        // K = I + L' Z'Z L / phi, w = L' Z' r / phi
        let mut ztz = DMatrix::<f64>::zeros(d_a, d_a);
        let mut ztr = DVector::<f64>::zeros(d_a);
        let mut rtr = 0.0;
        for j in 0..n {
            let x = g.xa_row(j, d_a);
            let r = g.y[j] - eta_linear(p, x, g.xb_row(j, d_b), &zero);
            rtr += r * r;
            for a in 0..d_a {
                ztr[a] += x[a] * r;
                for c in 0..d_a {
                    ztz[(a, c)] += x[a] * x[c];
                }
            }
        }
        let k = DMatrix::identity(d_a, d_a) + chol.transpose() * &ztz * &chol / phi;
        let w = chol.transpose() * &ztr / phi;
        let kc = nalgebra::Cholesky::new(k).ok_or_else(|| Error::Group {
            group: g.id.clone(),
            reason: "marginal covariance not positive definite".into(),
        })?;
        let log_det_k: f64 = 2.0 * kc.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let quad = rtr / phi - w.dot(&kc.solve(&w));
        let log_det_v = n as f64 * phi.ln() + log_det_k;
        total += -0.5 * (n as f64 * (2.0 * PI).ln() + log_det_v + quad);
    }
    Ok(total)
}

/// Log-likelihood of the model with the random effects set to zero.
pub fn fixed_effects_loglik(p: &Parameters, ds: &Dataset, family: Family) -> Result<f64> {
    check_dims(p, ds)?;
    let (d_a, d_b) = (p.d_a(), p.d_b());
    let zero = vec![0.0; d_a];
    ds.observations()
        .map(|(_, g, j)| {
            let eta = eta_linear(p, g.xa_row(j, d_a), g.xb_row(j, d_b), &zero);
            family.log_density(g.y[j], eta, p.phi)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Observation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gauss_hermite_moments() {
        for n in [3, 5, 21, 41] {
            let r = gauss_hermite(n);
            let w: f64 = r.weights.iter().sum();
            assert!((w - PI.sqrt()).abs() < 1e-13, "n={n}");
            let m2: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x * x).sum();
            assert!((m2 - PI.sqrt() / 2.0).abs() < 1e-13);
            assert_eq!(r.nodes[n / 2], 0.0);
        }
    }

    #[test]
    fn eta_linear_examples() {
        let p = Parameters::scalar(0.0, &[0.0], 1.0, 1.0).unwrap();
        assert_eq!(eta_linear(&p, &[1.0], &[2.0], &[0.0]), 0.0);
        let p = Parameters::scalar(1.0, &[3.0], 1.0, 1.0).unwrap();
        assert_eq!(eta_linear(&p, &[1.0], &[0.5], &[2.0]), 4.5);
        let eta = eta_linear(&p, &[1.0], &[0.5], &[-1.0]);
        assert!(!Family::Gamma.in_domain(eta));
    }

    fn intercept_group(y: &[f64], xb: &[f64]) -> Group {
        Group {
            id: "g".into(),
            y: y.to_vec(),
            xa: vec![1.0; y.len()],
            xb: xb.to_vec(),
            rows: (1..=y.len()).collect(),
        }
    }

    #[test]
    fn gaussian_intercept_mode_closed_form() {
        let y = [1.2, 0.4, 2.9, 1.7];
        let xb = [0.3, -0.5, 1.1, 0.0];
        let (beta0, beta_b, s2, phi) = (0.4, 0.8, 0.7, 1.3);
        let p = Parameters::scalar(beta0, &[beta_b], s2, phi).unwrap();
        let g = intercept_group(&y, &xb);
        let mode = group_posterior_mode(&p, &g, Family::Gaussian).unwrap();
        let resid: f64 = y.iter().zip(&xb).map(|(y, x)| y - beta_b * x - beta0).sum();
        let want = s2 * resid / (y.len() as f64 * s2 + phi);
        assert!((mode.u_star[0] - want).abs() < 1e-12);
        assert!((mode.hessian[(0, 0)] - (4.0 / phi + 1.0 / s2)).abs() < 1e-12);
    }

    #[test]
    fn zero_residual_mode_is_zero() {
        let p = Parameters::scalar(1.0, &[], 0.5, 0.3).unwrap();
        let g = Group {
            id: "g".into(),
            y: vec![1.0, 1.0],
            xa: vec![1.0, 1.0],
            xb: vec![],
            rows: vec![1, 2],
        };
        let mode = group_posterior_mode(&p, &g, Family::Gaussian).unwrap();
        assert!(mode.u_star[0].abs() < 1e-14);
    }

    #[test]
    fn gamma_mode_matches_grid_search() {
        let y = [0.8, 0.3, 1.9, 0.6, 0.45];
        let xb = [0.2, 0.9, 0.1, 0.5, 0.7];
        let p = Parameters::scalar(-1.6, &[-0.4], 0.3, 0.6).unwrap();
        let g = intercept_group(&y, &xb);
        let mode = group_posterior_mode(&p, &g, Family::Gamma).unwrap();
        // brute-force objective, written out independently
        let obj = |u: f64| -> f64 {
            let mut s = 0.0;
            for (yj, xj) in y.iter().zip(&xb) {
                let eta: f64 = -1.6 + u - 0.4 * xj;
                if eta >= 0.0 {
                    return f64::NEG_INFINITY;
                }
                s += (yj * u + (-eta).ln()) / 0.6;
            }
            s - 0.5 * u * u / 0.3
        };
        let (mut best, mut arg) = (f64::NEG_INFINITY, 0.0);
        let mut u = -2.0;
        while u < 0.8 {
            let v = obj(u);
            if v > best {
                best = v;
                arg = u;
            }
            u += 1e-6;
        }
        assert!((mode.u_star[0] - arg).abs() < 2e-6, "{} vs {arg}", mode.u_star[0]);
        assert!((mode.objective - best).abs() < 1e-9);
    }

    fn random_gaussian_dataset(rng: &mut ChaCha8Rng, d_a: usize, m: usize) -> (Dataset, Parameters) {
        let d_b = 2;
        let mut obs = Vec::new();
        for i in 0..m {
            let n = rng.gen_range(2..=12);
            for _ in 0..n {
                let mut xa = vec![1.0];
                for _ in 1..d_a {
                    xa.push(rng.gen_range(-1.0..1.0));
                }
                let xb = (0..d_b).map(|_| rng.gen_range(0.0..1.0)).collect();
                obs.push((format!("g{i}"), Observation { y: rng.gen_range(-3.0..3.0), xa, xb }));
            }
        }
        let ds = Dataset::from_observations(obs, d_a, d_b).unwrap();
        let sigma = if d_a == 1 {
            DMatrix::from_element(1, 1, 0.8)
        } else {
            DMatrix::from_row_slice(2, 2, &[0.9, 0.3, 0.3, 0.5])
        };
        let p = Parameters::new(
            DVector::from_fn(d_a, |k, _| 0.2 * k as f64 + 0.1),
            DVector::from_vec(vec![0.5, -0.7]),
            sigma,
            1.4,
        )
        .unwrap();
        (ds, p)
    }

    #[test]
    fn quadrature_matches_gaussian_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d_a in [1, 2] {
            let (ds, p) = random_gaussian_dataset(&mut rng, d_a, 15);
            let exact = gaussian_marginal_loglik(&p, &ds).unwrap();
            for nodes in [3, 5, 21] {
                let q = QuadratureSpec::with_nodes(nodes);
                let quad = log_likelihood(&p, &ds, Family::Gaussian, &q).unwrap();
                assert!((quad - exact).abs() < 1e-8, "d_a={d_a} nodes={nodes}: {quad} vs {exact}");
            }
        }
    }

    #[test]
    fn non_adaptive_quadrature_is_close_for_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (ds, p) = random_gaussian_dataset(&mut rng, 1, 10);
        let exact = gaussian_marginal_loglik(&p, &ds).unwrap();
        let q = QuadratureSpec {
            nodes_per_dim: 41,
            adaptive: false,
            ..QuadratureSpec::default()
        };
        let quad = log_likelihood(&p, &ds, Family::Gaussian, &q).unwrap();
        assert!((quad - exact).abs() < 1e-3 * exact.abs());
    }

    #[test]
    fn gaussian_single_observation() {
        let ds = Dataset::from_observations(
            vec![("a", Observation { y: 1.7, xa: vec![1.0], xb: vec![] })],
            1,
            0,
        )
        .unwrap();
        let p = Parameters::scalar(0.4, &[], 0.6, 1.1).unwrap();
        let v: f64 = 1.7;
        let s2 = 0.6 + 1.1;
        let want = -0.5 * (2.0 * PI * s2).ln() - (v - 0.4).powi(2) / (2.0 * s2);
        assert!((gaussian_marginal_loglik(&p, &ds).unwrap() - want).abs() < 1e-13);
    }

    #[test]
    fn gaussian_doubling_phi_with_zero_residuals() {
        let obs = (0..7).map(|k| {
            (
                format!("g{}", k % 3),
                Observation { y: 2.0, xa: vec![1.0], xb: vec![] },
            )
        });
        let ds = Dataset::from_observations(obs, 1, 0).unwrap();
        let tiny = 1e-300;
        let p1 = Parameters::scalar(2.0, &[], tiny, 0.8).unwrap();
        let p2 = Parameters::scalar(2.0, &[], tiny, 1.6).unwrap();
        let diff = gaussian_marginal_loglik(&p1, &ds).unwrap() - gaussian_marginal_loglik(&p2, &ds).unwrap();
        assert!((diff - 3.5 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn near_degenerate_sigma_gives_glm_loglik() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut obs = Vec::new();
        for i in 0..6 {
            for _ in 0..5 {
                let xb = vec![rng.gen_range(0.0..1.0)];
                obs.push((format!("{i}"), Observation { y: rng.gen_range(0.2..3.0), xa: vec![1.0], xb }));
            }
        }
        let ds = Dataset::from_observations(obs, 1, 1).unwrap();
        let p = Parameters::scalar(-1.0, &[-0.3], 1e-12, 0.7).unwrap();
        for fam in Family::ALL {
            let glm = fixed_effects_loglik(&p, &ds, fam).unwrap();
            let ll = log_likelihood(&p, &ds, fam, &QuadratureSpec::default()).unwrap();
            assert!((ll - glm).abs() < 1e-4, "{fam}: {ll} vs {glm}");
        }
    }

    #[test]
    fn group_order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut obs = Vec::new();
        for i in 0..8 {
            for _ in 0..4 {
                let xb = vec![rng.gen_range(0.0..1.0)];
                obs.push((format!("{i}"), Observation { y: rng.gen_range(0.2..3.0), xa: vec![1.0], xb }));
            }
        }
        let p = Parameters::scalar(-1.0, &[-0.3], 0.2, 0.7).unwrap();
        let ds = Dataset::from_observations(obs.clone(), 1, 1).unwrap();
        obs.reverse();
        let rev = Dataset::from_observations(obs, 1, 1).unwrap();
        let q = QuadratureSpec::default();
        let a = log_likelihood(&p, &ds, Family::Gamma, &q).unwrap();
        let b = log_likelihood(&p, &rev, Family::Gamma, &q).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn support_violation_names_row() {
        let obs = vec![
            ("a", Observation { y: 1.0, xa: vec![1.0], xb: vec![] }),
            ("a", Observation { y: 0.0, xa: vec![1.0], xb: vec![] }),
        ];
        let ds = Dataset::from_observations(obs, 1, 0).unwrap();
        let p = Parameters::scalar(-1.0, &[], 0.2, 0.7).unwrap();
        match log_likelihood(&p, &ds, Family::Gamma, &QuadratureSpec::default()) {
            Err(Error::Support { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn domain_policy_error_is_reported_with_group() {
        let obs = vec![
            ("school-7", Observation { y: 1.0, xa: vec![1.0], xb: vec![] }),
            ("school-7", Observation { y: 2.0, xa: vec![1.0], xb: vec![] }),
        ];
        let ds = Dataset::from_observations(obs, 1, 0).unwrap();
        let p = Parameters::scalar(-0.5, &[], 0.5, 1.0).unwrap();
        let strict = QuadratureSpec {
            domain_policy: DomainPolicy::Error,
            ..QuadratureSpec::default()
        };
        let err = log_likelihood(&p, &ds, Family::Gamma, &strict).unwrap_err();
        assert!(err.to_string().contains("school-7"), "{err}");
        assert!(log_likelihood(&p, &ds, Family::Gamma, &QuadratureSpec::default()).is_ok());
    }

    #[test]
    fn even_node_count_rejected() {
        assert!(QuadratureSpec::with_nodes(20).validate().is_err());
        assert!(QuadratureSpec::with_nodes(1).validate().is_err());
    }
}
