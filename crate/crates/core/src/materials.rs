//! Lattice property curves and the pointwise material model.
//!
//! A unit cell is described by two numbers: `gamma1` (1 = void, 0 = lattice)
//! and `gamma2` (normalized beam diameter). The lattice itself contributes
//! four sampled curves over `gamma2` (porosity, conductivity, Darcy and
//! Forchheimer coefficients); `gamma1` blends them with the plain-fluid values
//! through a rational (RAMP-type) weight whose convexity is continued during
//! the optimization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Beam diameter bounds of the lattice, in metres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiameterRange<T> {
    pub d_min: T,
    pub d_max: T,
}

impl<T: Scalar> DiameterRange<T> {
    pub fn new(d_min: T, d_max: T) -> Result<Self> {
        if !(d_min > T::zero() && d_max > d_min) {
            return Err(Error::OutOfRange(format!(
                "diameter range must satisfy 0 < d_min < d_max (got {:?}, {:?})",
                d_min, d_max
            )));
        }
        Ok(Self { d_min, d_max })
    }

    pub fn gamma2_from_diameter(&self, d: T) -> Result<T> {
        let tol = T::c(1e-12) * self.d_max;
        if d < self.d_min - tol || d > self.d_max + tol {
            return Err(Error::OutOfRange(format!(
                "diameter {:?} outside [{:?}, {:?}]",
                d, self.d_min, self.d_max
            )));
        }
        let g = (d - self.d_min) / (self.d_max - self.d_min);
        Ok(g.max(T::zero()).min(T::one()))
    }

    pub fn diameter_from_gamma2(&self, gamma2: T) -> Result<T> {
        if !(gamma2 >= T::zero() && gamma2 <= T::one()) {
            return Err(Error::OutOfRange(format!(
                "gamma2 {:?} outside [0, 1]",
                gamma2
            )));
        }
        Ok(self.d_min + gamma2 * (self.d_max - self.d_min))
    }
}

/// Effective lattice properties at one value of `gamma2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropertySample<T> {
    pub gamma2: T,
    pub eps_por: T,
    pub k_por: T,
    pub alpha_por: T,
    pub beta_por: T,
}

/// Lattice properties together with their slopes in `gamma2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeProps<T> {
    pub eps: T,
    pub k: T,
    pub alpha: T,
    pub beta: T,
    pub d_eps: T,
    pub d_k: T,
    pub d_alpha: T,
    pub d_beta: T,
}

/// Sampled property curves with monotone piecewise-cubic (Fritsch-Carlson)
/// interpolation in `gamma2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyTable<T> {
    samples: Vec<PropertySample<T>>,
    slopes: Vec<[T; 4]>,
    pub diameters: DiameterRange<T>,
}

impl<T: Scalar> PropertyTable<T> {
    /// Build a table, checking that `gamma2` is strictly increasing over
    /// `[0, 1]`, porosity lies in `(0, 1)` and does not increase, and the other
    /// properties are positive and non-decreasing.
    pub fn new(samples: Vec<PropertySample<T>>, diameters: DiameterRange<T>) -> Result<Self> {
        check_table(&samples, true)?;
        let slopes = pchip_slopes(&samples);
        Ok(Self {
            samples,
            slopes,
            diameters,
        })
    }

    pub fn samples(&self) -> &[PropertySample<T>] {
        &self.samples
    }

    /// Interpolated properties and their `gamma2` slopes. Input is clamped to
    /// `[0, 1]`.
    pub fn eval(&self, gamma2: T) -> LatticeProps<T> {
        let g = gamma2.max(T::zero()).min(T::one());
        let n = self.samples.len();
        let mut i = match self
            .samples
            .binary_search_by(|s| s.gamma2.partial_cmp(&g).expect("finite table"))
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        if i >= n - 1 {
            i = n - 2;
        }
        let (a, b) = (&self.samples[i], &self.samples[i + 1]);
        let h = b.gamma2 - a.gamma2;
        let t = (g - a.gamma2) / h;
        let ya = [a.eps_por, a.k_por, a.alpha_por, a.beta_por];
        let yb = [b.eps_por, b.k_por, b.alpha_por, b.beta_por];
        let (ma, mb) = (self.slopes[i], self.slopes[i + 1]);

        let t2 = t * t;
        let t3 = t2 * t;
        let two = T::c(2.0);
        let three = T::c(3.0);
        let h00 = two * t3 - three * t2 + T::one();
        let h10 = t3 - two * t2 + t;
        let h01 = three * t2 - two * t3;
        let h11 = t3 - t2;
        let six = T::c(6.0);
        let four = T::c(4.0);
        let dh00 = (six * t2 - six * t) / h;
        let dh10 = (three * t2 - four * t + T::one()) / h;
        let dh01 = (six * t - six * t2) / h;
        let dh11 = (three * t2 - two * t) / h;

        let mut v = [T::zero(); 4];
        let mut dv = [T::zero(); 4];
        for c in 0..4 {
            v[c] = h00 * ya[c] + h10 * h * ma[c] + h01 * yb[c] + h11 * h * mb[c];
            dv[c] = dh00 * ya[c] + dh10 * h * ma[c] + dh01 * yb[c] + dh11 * h * mb[c];
        }
        LatticeProps {
            eps: v[0],
            k: v[1],
            alpha: v[2],
            beta: v[3],
            d_eps: dv[0],
            d_k: dv[1],
            d_alpha: dv[2],
            d_beta: dv[3],
        }
    }
}

/// Validate sampled rows. `require_span` demands `gamma2` cover `[0, 1]`.
pub fn check_table<T: Scalar>(samples: &[PropertySample<T>], require_span: bool) -> Result<()> {
    if samples.len() < 2 && require_span {
        return Err(Error::Table("at least two samples are required".into()));
    }
    let tol = T::c(1e-9);
    if require_span {
        let first = samples[0].gamma2;
        let last = samples[samples.len() - 1].gamma2;
        if first.abs() > tol || (last - T::one()).abs() > tol {
            return Err(Error::Table(format!(
                "gamma2 samples must span [0, 1] (got {:?}..{:?})",
                first, last
            )));
        }
    }
    for (i, s) in samples.iter().enumerate() {
        if !(s.eps_por > T::zero() && s.eps_por < T::one()) {
            return Err(Error::Table(format!("row {i}: eps_por must lie in (0, 1)")));
        }
        if !(s.k_por > T::zero() && s.alpha_por > T::zero() && s.beta_por >= T::zero()) {
            return Err(Error::Table(format!(
                "row {i}: properties must be positive"
            )));
        }
        if i > 0 {
            let p = &samples[i - 1];
            if s.gamma2 <= p.gamma2 {
                return Err(Error::Table(format!(
                    "row {i}: gamma2 must be strictly increasing"
                )));
            }
            if s.eps_por > p.eps_por {
                return Err(Error::Table(format!(
                    "row {i}: eps_por increases with gamma2"
                )));
            }
            if s.k_por < p.k_por || s.alpha_por < p.alpha_por || s.beta_por < p.beta_por {
                return Err(Error::Table(format!(
                    "row {i}: k_por, alpha_por and beta_por must not decrease with gamma2"
                )));
            }
        }
    }
    Ok(())
}

fn pchip_slopes<T: Scalar>(samples: &[PropertySample<T>]) -> Vec<[T; 4]> {
    let n = samples.len();
    let column = |s: &PropertySample<T>, c: usize| match c {
        0 => s.eps_por,
        1 => s.k_por,
        2 => s.alpha_por,
        _ => s.beta_por,
    };
    let mut out = vec![[T::zero(); 4]; n];
    for c in 0..4 {
        let x: Vec<T> = samples.iter().map(|s| s.gamma2).collect();
        let y: Vec<T> = samples.iter().map(|s| column(s, c)).collect();
        let m = pchip_1d(&x, &y);
        for (o, mi) in out.iter_mut().zip(m) {
            o[c] = mi;
        }
    }
    out
}

/// Shape-preserving derivative estimates at the knots.
fn pchip_1d<T: Scalar>(x: &[T], y: &[T]) -> Vec<T> {
    let n = x.len();
    let h: Vec<T> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
    let delta: Vec<T> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut d = vec![T::zero(); n];
    if n == 2 {
        d[0] = delta[0];
        d[1] = delta[0];
        return d;
    }
    let two = T::c(2.0);
    for k in 1..n - 1 {
        let (a, b) = (delta[k - 1], delta[k]);
        if a == T::zero() || b == T::zero() || (a > T::zero()) != (b > T::zero()) {
            d[k] = T::zero();
        } else {
            let w1 = two * h[k] + h[k - 1];
            let w2 = h[k] + two * h[k - 1];
            d[k] = (w1 + w2) / (w1 / a + w2 / b);
        }
    }
    d[0] = pchip_edge(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = pchip_edge(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

fn pchip_edge<T: Scalar>(h0: T, h1: T, m0: T, m1: T) -> T {
    let two = T::c(2.0);
    let three = T::c(3.0);
    let d = ((two * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    let sign = |v: T| {
        if v > T::zero() {
            1
        } else if v < T::zero() {
            -1
        } else {
            0
        }
    };
    if sign(d) != sign(m0) {
        T::zero()
    } else if sign(m0) != sign(m1) && d.abs() > three * m0.abs() {
        three * m0
    } else {
        d
    }
}

/// Constants of the plain-fluid limit (`gamma1 = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidLimit<T> {
    pub k_f: T,
    /// Wall-friction coefficient of the plain channel, `3 mu / H_t^2`.
    pub alpha_f: T,
    pub beta_f: T,
}

impl<T: Scalar> FluidLimit<T> {
    pub fn new(mu_f: T, k_f: T, half_thickness: T) -> Self {
        Self {
            k_f,
            alpha_f: T::c(3.0) * mu_f / (half_thickness * half_thickness),
            beta_f: T::zero(),
        }
    }
}

/// Interpolated effective properties and their partial derivatives with
/// respect to the projected indicator and to `gamma2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blend<T> {
    pub eps: T,
    pub k: T,
    pub alpha: T,
    pub beta: T,
    pub deps_dg1: T,
    pub dk_dg1: T,
    pub dalpha_dg1: T,
    pub dbeta_dg1: T,
    pub deps_dg2: T,
    pub dk_dg2: T,
    pub dalpha_dg2: T,
    pub dbeta_dg2: T,
}

/// RAMP weight `(1 - x) / (1 + q x)` and its slope.
#[inline]
pub fn ramp<T: Scalar>(x: T, q: T) -> (T, T) {
    let den = T::one() + q * x;
    ((T::one() - x) / den, -(T::one() + q) / (den * den))
}

/// Blend lattice and fluid properties for projected indicator `g1_hat`.
/// Porosity is linear in `g1_hat`; conductivity uses convexity `q_k`, the
/// flow resistances use `q_f`.
pub fn interpolate_properties<T: Scalar>(
    g1_hat: T,
    lattice: &LatticeProps<T>,
    q_k: T,
    q_f: T,
    fluid: &FluidLimit<T>,
) -> Blend<T> {
    let one = T::one();
    let solid = one - g1_hat;
    let (rk, drk) = ramp(g1_hat, q_k);
    let (rf, drf) = ramp(g1_hat, q_f);
    Blend {
        eps: one + (lattice.eps - one) * solid,
        k: fluid.k_f + (lattice.k - fluid.k_f) * rk,
        alpha: fluid.alpha_f + (lattice.alpha - fluid.alpha_f) * rf,
        beta: fluid.beta_f + (lattice.beta - fluid.beta_f) * rf,
        deps_dg1: one - lattice.eps,
        dk_dg1: (lattice.k - fluid.k_f) * drk,
        dalpha_dg1: (lattice.alpha - fluid.alpha_f) * drf,
        dbeta_dg1: (lattice.beta - fluid.beta_f) * drf,
        deps_dg2: lattice.d_eps * solid,
        dk_dg2: lattice.d_k * rk,
        dalpha_dg2: lattice.d_alpha * rf,
        dbeta_dg2: lattice.d_beta * rf,
    }
}

/// Continuation of the RAMP convexity parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuationSchedule {
    /// Conductivity convexity per stage (increasing).
    pub q_k_stages: Vec<f64>,
    /// Flow-resistance convexity per stage (decreasing).
    pub q_f_stages: Vec<f64>,
    /// Design iterations per stage.
    pub stage_length: usize,
}

impl Default for ContinuationSchedule {
    fn default() -> Self {
        Self {
            q_k_stages: vec![1.0, 5.0, 10.0, 50.0],
            q_f_stages: vec![50.0, 10.0, 5.0, 1.0],
            stage_length: 50,
        }
    }
}

impl ContinuationSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.q_k_stages.is_empty() || self.q_k_stages.len() != self.q_f_stages.len() {
            return Err(Error::Config(
                "continuation needs the same non-zero number of q_k and q_f stages".into(),
            ));
        }
        if self.stage_length == 0 {
            return Err(Error::Config(
                "continuation stage_length must be >= 1".into(),
            ));
        }
        if self
            .q_k_stages
            .iter()
            .chain(&self.q_f_stages)
            .any(|q| !(*q >= 0.0))
        {
            return Err(Error::Config(
                "convexity parameters must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Stage index for a zero-based design iteration; the last stage persists.
    pub fn stage(&self, iteration: usize) -> usize {
        (iteration / self.stage_length).min(self.q_k_stages.len() - 1)
    }

    /// `(q_k, q_f)` in effect at a zero-based design iteration.
    pub fn params(&self, iteration: usize) -> (f64, f64) {
        let s = self.stage(iteration);
        (self.q_k_stages[s], self.q_f_stages[s])
    }

    /// Parameters of the final stage.
    pub fn last(&self) -> (f64, f64) {
        let s = self.q_k_stages.len() - 1;
        (self.q_k_stages[s], self.q_f_stages[s])
    }
}

/// Smooth threshold of the indicator field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionParams {
    pub beta: f64,
    pub eta: f64,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            eta: 0.5,
        }
    }
}

impl ProjectionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Config(
                "projection needs beta > 0 and eta in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// tanh projection of `g1` with its derivative.
pub fn heaviside_project<T: Scalar>(g1: T, beta: T, eta: T) -> (T, T) {
    let a = (beta * eta).tanh();
    let den = a + (beta * (T::one() - eta)).tanh();
    let t = (beta * (g1 - eta)).tanh();
    ((a + t) / den, beta * (T::one() - t * t) / den)
}

/// Interfacial coefficients of the two-layer model: `(h_t, h_b, h)`.
pub fn heat_transfer_coefficients<T: Scalar>(
    k: T,
    half_thickness: T,
    k_s: T,
    half_base: T,
) -> (T, T, T) {
    let ht = T::c(35.0) * k / (T::c(26.0) * half_thickness);
    let hb = k_s / half_base;
    (ht, hb, ht * hb / (ht + hb))
}

/// Derivative of the combined coefficient `h` with respect to `k`.
pub fn dh_dk<T: Scalar>(k: T, half_thickness: T, k_s: T, half_base: T) -> T {
    let c = T::c(35.0) / (T::c(26.0) * half_thickness);
    let (ht, hb, _) = heat_transfer_coefficients(k, half_thickness, k_s, half_base);
    let s = ht + hb;
    c * hb * hb / (s * s)
}

/// Effective conductivity of a sampled cell and its normalized form.
pub fn effective_conductivity_from_rve<T: Scalar>(
    q: T,
    length: T,
    delta_t: T,
    k_f: T,
    k_s: T,
) -> Result<(T, T)> {
    if !(delta_t > T::zero()) || !(length > T::zero()) {
        return Err(Error::OutOfRange(
            "temperature difference and length must be positive".into(),
        ));
    }
    let k = q * length / delta_t;
    Ok((k, (k - k_f) / (k_s - k_f)))
}

/// Least-squares fit of `-dp/dx = alpha v + beta v^2` through the origin with
/// `alpha, beta >= 0`.
pub fn fit_darcy_forchheimer<T: Scalar>(samples: &[(T, T)]) -> Result<(T, T)> {
    if samples.len() < 2 {
        return Err(Error::Degenerate(
            "need at least two velocity samples".into(),
        ));
    }
    if samples
        .iter()
        .any(|(v, g)| !(*v > T::zero()) || !g.is_finite())
    {
        return Err(Error::Degenerate(
            "velocities must be positive and gradients finite".into(),
        ));
    }
    let v0 = samples[0].0;
    let spread = samples
        .iter()
        .fold(T::zero(), |m, (v, _)| m.max((*v - v0).abs()));
    if spread <= T::c(1e-12) * v0 {
        return Err(Error::Degenerate("all velocities are identical".into()));
    }

    // Scale columns so the 2x2 normal system is well conditioned, then solve
    // through a thin QR (modified Gram-Schmidt) of [v, v^2].
    let vs = samples.iter().fold(T::zero(), |m, (v, _)| m.max(*v));
    let a1: Vec<T> = samples.iter().map(|(v, _)| *v / vs).collect();
    let a2: Vec<T> = a1.iter().map(|x| *x * *x).collect();
    let y: Vec<T> = samples.iter().map(|(_, g)| *g).collect();
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y);

    let r11 = dot(&a1, &a1).sqrt();
    let q1: Vec<T> = a1.iter().map(|x| *x / r11).collect();
    let r12 = dot(&q1, &a2);
    let w: Vec<T> = a2.iter().zip(&q1).map(|(a, q)| *a - r12 * *q).collect();
    let r22 = dot(&w, &w).sqrt();
    let q2: Vec<T> = w.iter().map(|x| *x / r22).collect();
    let c1 = dot(&q1, &y);
    let c2 = dot(&q2, &y);
    let mut b = c2 / r22;
    let mut a = (c1 - r12 * b) / r11;

    if a < T::zero() || b < T::zero() {
        // Active set: one coefficient pinned at zero.
        let a_only = (dot(&a1, &y) / dot(&a1, &a1)).max(T::zero());
        let b_only = (dot(&a2, &y) / dot(&a2, &a2)).max(T::zero());
        let sse = |a: T, b: T| {
            a1.iter()
                .zip(&a2)
                .zip(&y)
                .fold(T::zero(), |s, ((x1, x2), yy)| {
                    let r = *yy - a * *x1 - b * *x2;
                    s + r * r
                })
        };
        if sse(a_only, T::zero()) <= sse(T::zero(), b_only) {
            a = a_only;
            b = T::zero();
        } else {
            a = T::zero();
            b = b_only;
        }
    }
    Ok((a / vs, b / (vs * vs)))
}

/// Analytic BCC property model used as the built-in table.
///
/// Relative density counts eight half-diagonal struts with a node-overlap
/// correction, conductivity adds the strut contribution of a diagonal network
/// (one third of the solid fraction) to the fluid share, and the drag
/// coefficients follow Kozeny-Carman and Ergun scalings. The two drag
/// prefactors are pinned so that a 2.5 mm cell with 0.9 mm struts (gamma2 =
/// 0.6 on a 0.3-1.3 mm range) reproduces alpha = 30756 Pa s/m^2 and beta =
/// 225360 Pa s^2/m^3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticBcc {
    pub mu_f: f64,
    pub rho_f: f64,
    pub k_f: f64,
    pub k_s: f64,
}

impl SyntheticBcc {
    pub const PIN_CELL: f64 = 2.5e-3;
    pub const PIN_DIAMETER: f64 = 0.9e-3;
    pub const PIN_ALPHA: f64 = 30756.0;
    pub const PIN_BETA: f64 = 225360.0;
    pub const PIN_MU: f64 = 1.004e-3;
    pub const PIN_RHO: f64 = 998.0;

    pub fn relative_density(d: f64, cell: f64) -> f64 {
        let t = d / cell;
        3f64.sqrt() * std::f64::consts::PI * t * t - 5.0 * std::f64::consts::PI / 3.0 * t * t * t
    }

    fn darcy_shape(d: f64, cell: f64) -> f64 {
        let rho = Self::relative_density(d, cell);
        let eps = 1.0 - rho;
        rho * rho / (eps.powi(3) * d * d)
    }

    fn forchheimer_shape(d: f64, cell: f64) -> f64 {
        let rho = Self::relative_density(d, cell);
        let eps = 1.0 - rho;
        rho / (eps.powi(3) * d)
    }

    pub fn sample(&self, d: f64, cell: f64) -> (f64, f64, f64, f64) {
        let rho = Self::relative_density(d, cell);
        let eps = 1.0 - rho;
        let k = eps * self.k_f + rho * self.k_s / 3.0;
        let c_alpha = Self::PIN_ALPHA
            / (Self::PIN_MU * Self::darcy_shape(Self::PIN_DIAMETER, Self::PIN_CELL));
        let c_beta = Self::PIN_BETA
            / (Self::PIN_RHO * Self::forchheimer_shape(Self::PIN_DIAMETER, Self::PIN_CELL));
        let alpha = c_alpha * self.mu_f * Self::darcy_shape(d, cell);
        let beta = c_beta * self.rho_f * Self::forchheimer_shape(d, cell);
        (eps, k, alpha, beta)
    }

    /// Tabulate the model at `n` evenly spaced `gamma2` values.
    pub fn table(
        &self,
        cell: f64,
        diameters: DiameterRange<f64>,
        n: usize,
    ) -> Result<PropertyTable<f64>> {
        if n < 2 {
            return Err(Error::Table(
                "synthetic table needs at least two samples".into(),
            ));
        }
        // Overlap correction turns over at d/L = 2 sqrt(3) / 5.
        if diameters.d_max / cell >= 0.69 {
            return Err(Error::Table(format!(
                "synthetic BCC model is not monotone for d_max/L = {:.3}",
                diameters.d_max / cell
            )));
        }
        let samples = (0..n)
            .map(|i| {
                let g = i as f64 / (n - 1) as f64;
                let d = diameters.d_min + g * (diameters.d_max - diameters.d_min);
                let (eps, k, alpha, beta) = self.sample(d, cell);
                PropertySample {
                    gamma2: g,
                    eps_por: eps,
                    k_por: k,
                    alpha_por: alpha,
                    beta_por: beta,
                }
            })
            .collect();
        PropertyTable::new(samples, diameters)
    }
}

/// Read a property table CSV with header `gamma2,eps_por,k_por,alpha_por,beta_por`.
pub fn read_property_csv(path: &Path) -> Result<Vec<PropertySample<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    let expected = ["gamma2", "eps_por", "k_por", "alpha_por", "beta_por"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            path,
            format!("header must be {}", expected.join(",")),
        ));
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize::<PropertySample<f64>>() {
        out.push(rec.map_err(|e| Error::parse(path, e.to_string()))?);
    }
    if out.is_empty() {
        return Err(Error::parse(path, "no rows"));
    }
    Ok(out)
}

pub fn write_property_csv(path: &Path, rows: &[PropertySample<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    if rows.is_empty() {
        w.write_record(["gamma2", "eps_por", "k_por", "alpha_por", "beta_por"])
            .map_err(|e| Error::parse(path, e.to_string()))?;
    }
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::parse(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row of raw cell-level samples: a conductivity measurement and one
/// velocity/pressure-gradient pair for the lattice at `gamma2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RveSample {
    pub gamma2: f64,
    pub eps_por: f64,
    pub q: f64,
    pub length: f64,
    pub delta_t: f64,
    pub vbar: f64,
    pub neg_dpdx: f64,
}

pub fn read_rve_csv(path: &Path) -> Result<Vec<RveSample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.deserialize::<RveSample>() {
        out.push(rec.map_err(|e| Error::parse(path, e.to_string()))?);
    }
    if out.is_empty() {
        return Err(Error::parse(path, "no sample rows"));
    }
    Ok(out)
}

/// Read a plain `vbar,neg_dpdx` CSV.
pub fn read_df_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        vbar: f64,
        neg_dpdx: f64,
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.deserialize::<Row>() {
        let r = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        out.push((r.vbar, r.neg_dpdx));
    }
    Ok(out)
}

/// Reduce raw samples to one property row per distinct `gamma2`, in
/// increasing `gamma2` order.
pub fn fit_property_rows(
    samples: &[RveSample],
    k_f: f64,
    k_s: f64,
) -> Result<Vec<PropertySample<f64>>> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.gamma2.total_cmp(&b.gamma2));
    let mut rows = Vec::new();
    let mut start = 0;
    while start < sorted.len() {
        let g = sorted[start].gamma2;
        let end = start + sorted[start..].iter().take_while(|s| s.gamma2 == g).count();
        let group = &sorted[start..end];
        let mut k_sum = 0.0;
        for s in group {
            let (k, _) = effective_conductivity_from_rve(s.q, s.length, s.delta_t, k_f, k_s)?;
            k_sum += k;
        }
        let pairs: Vec<(f64, f64)> = group.iter().map(|s| (s.vbar, s.neg_dpdx)).collect();
        let (alpha, beta) = fit_darcy_forchheimer(&pairs)
            .map_err(|e| Error::Degenerate(format!("gamma2 = {g}: {e}")))?;
        let eps = group.iter().map(|s| s.eps_por).sum::<f64>() / group.len() as f64;
        rows.push(PropertySample {
            gamma2: g,
            eps_por: eps,
            k_por: k_sum / group.len() as f64,
            alpha_por: alpha,
            beta_por: beta,
        });
        start = end;
    }
    Ok(rows)
}
