//! Single-site potentials, their tilted Gibbs measures and the macroscopic
//! free energy obtained as the Legendre transform of the log-partition
//! function.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_tridiagonal;
use crate::quad;

/// Nats below the integrand maximum at which the quadrature window is cut.
const TAIL_NATS: f64 = 40.0;

/// Bounded C¹ perturbation: a clamped cubic spline through the knots with zero
/// end slopes, extended by constants outside the knot range.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    knots: Vec<f64>,
    values: Vec<f64>,
    second: Vec<f64>,
    bounds: [f64; 3],
}

impl Perturbation {
    pub fn zero() -> Self {
        Perturbation { knots: Vec::new(), values: Vec::new(), second: Vec::new(), bounds: [0.0; 3] }
    }

    /// Builds the spline from `(knot, value)` pairs. Knots must be strictly
    /// increasing; fewer than two knots is only accepted when empty.
    pub fn from_knots(points: &[[f64; 2]]) -> Result<Self> {
        if points.is_empty() {
            return Ok(Self::zero());
        }
        if points.len() < 2 {
            return Err(Error::InvalidParameter("perturbation needs at least two knots".into()));
        }
        let knots: Vec<f64> = points.iter().map(|p| p[0]).collect();
        let values: Vec<f64> = points.iter().map(|p| p[1]).collect();
        if knots.windows(2).any(|w| !(w[1] > w[0])) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("perturbation knots must be strictly increasing".into()));
        }
        let n = knots.len();
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        diag[0] = 2.0 * h[0];
        upper[0] = h[0];
        rhs[0] = 6.0 * (values[1] - values[0]) / h[0];
        for i in 1..n - 1 {
            lower[i] = h[i - 1];
            diag[i] = 2.0 * (h[i - 1] + h[i]);
            upper[i] = h[i];
            rhs[i] = 6.0 * ((values[i + 1] - values[i]) / h[i] - (values[i] - values[i - 1]) / h[i - 1]);
        }
        lower[n - 1] = h[n - 2];
        diag[n - 1] = 2.0 * h[n - 2];
        rhs[n - 1] = -6.0 * (values[n - 1] - values[n - 2]) / h[n - 2];
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs)?;
        let mut p = Perturbation { knots, values, second: rhs, bounds: [0.0; 3] };
        p.bounds = p.scan_bounds();
        Ok(p)
    }

    fn scan_bounds(&self) -> [f64; 3] {
        let mut b = [0.0f64; 3];
        for w in self.knots.windows(2) {
            for s in 0..=64 {
                let x = w[0] + (w[1] - w[0]) * s as f64 / 64.0;
                for (order, bound) in b.iter_mut().enumerate() {
                    *bound = bound.max(self.eval(x, order as u8).abs());
                }
            }
        }
        // the scan misses the interior extrema of S by at most O(h^2 S''), pad slightly
        b[0] *= 1.0 + 1e-3;
        b[1] *= 1.0 + 1e-3;
        b
    }

    /// Sup-norm bounds of the perturbation and its first two derivatives.
    pub fn bounds(&self) -> [f64; 3] {
        self.bounds
    }

    pub fn is_zero(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn knots(&self) -> Vec<[f64; 2]> {
        self.knots.iter().zip(&self.values).map(|(&k, &v)| [k, v]).collect()
    }

    pub fn eval(&self, x: f64, order: u8) -> f64 {
        if self.knots.is_empty() {
            return 0.0;
        }
        let n = self.knots.len();
        if x <= self.knots[0] {
            return if order == 0 { self.values[0] } else { 0.0 };
        }
        if x >= self.knots[n - 1] {
            return if order == 0 { self.values[n - 1] } else { 0.0 };
        }
        let i = match self.knots.binary_search_by(|k| k.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i - 1,
        };
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let h = x1 - x0;
        let (m0, m1) = (self.second[i], self.second[i + 1]);
        let (v0, v1) = (self.values[i], self.values[i + 1]);
        let a = x1 - x;
        let b = x - x0;
        match order {
            0 => m0 * a.powi(3) / (6.0 * h) + m1 * b.powi(3) / (6.0 * h) + (v0 / h - m0 * h / 6.0) * a + (v1 / h - m1 * h / 6.0) * b,
            1 => -m0 * a * a / (2.0 * h) + m1 * b * b / (2.0 * h) - (v0 / h - m0 * h / 6.0) + (v1 / h - m1 * h / 6.0),
            _ => (m0 * a + m1 * b) / h,
        }
    }
}

/// Serialized potential description: `{"p": 2, "perturbation": [[x, v], ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub p: f64,
    #[serde(default)]
    pub perturbation: Vec<[f64; 2]>,
    #[serde(default)]
    pub domain_cut: Option<f64>,
}

/// ψ(x) = |x|^p / p + δψ(x).
#[derive(Clone, Debug, PartialEq)]
pub struct SingleSitePotential {
    p: f64,
    perturbation: Perturbation,
    domain_cut: f64,
}

/// Location of the tilted weight exp(σx − ψ(x)) and the window carrying all
/// but a negligible fraction of its mass.
#[derive(Clone, Copy, Debug)]
struct Window {
    mode: f64,
    log_max: f64,
    lo: f64,
    hi: f64,
}

impl SingleSitePotential {
    pub const DEFAULT_DOMAIN_CUT: f64 = 60.0;

    pub fn new(p: f64, perturbation: Perturbation, domain_cut: f64) -> Result<Self> {
        if !(p >= 2.0) || !p.is_finite() {
            return Err(Error::InvalidParameter(format!("exponent p = {p} must be >= 2")));
        }
        if !(domain_cut > 0.0) {
            return Err(Error::InvalidParameter("domain_cut must be positive".into()));
        }
        Ok(SingleSitePotential { p, perturbation, domain_cut })
    }

    pub fn gaussian() -> Self {
        SingleSitePotential { p: 2.0, perturbation: Perturbation::zero(), domain_cut: Self::DEFAULT_DOMAIN_CUT }
    }

    pub fn pure_power(p: f64) -> Result<Self> {
        Self::new(p, Perturbation::zero(), Self::DEFAULT_DOMAIN_CUT)
    }

    pub fn from_spec(spec: &PotentialSpec) -> Result<Self> {
        Self::new(
            spec.p,
            Perturbation::from_knots(&spec.perturbation)?,
            spec.domain_cut.unwrap_or(Self::DEFAULT_DOMAIN_CUT),
        )
    }

    pub fn to_spec(&self) -> PotentialSpec {
        PotentialSpec { p: self.p, perturbation: self.perturbation.knots(), domain_cut: Some(self.domain_cut) }
    }

    pub fn exponent(&self) -> f64 {
        self.p
    }

    pub fn perturbation(&self) -> &Perturbation {
        &self.perturbation
    }

    pub fn domain_cut(&self) -> f64 {
        self.domain_cut
    }

    /// True for the unperturbed quadratic potential.
    pub fn is_gaussian(&self) -> bool {
        self.p == 2.0 && self.perturbation.is_zero()
    }

    /// ψ, ψ' or ψ'' at `x` for `order` 0, 1 or 2.
    pub fn eval(&self, x: f64, order: u8) -> f64 {
        assert!(order <= 2, "derivative order must be 0, 1 or 2");
        let ax = x.abs();
        let base = match order {
            0 => {
                if self.p == 2.0 {
                    0.5 * x * x
                } else {
                    ax.powf(self.p) / self.p
                }
            }
            1 => {
                if self.p == 2.0 {
                    x
                } else {
                    ax.powf(self.p - 1.0) * x.signum()
                }
            }
            _ => {
                if self.p == 2.0 {
                    1.0
                } else {
                    (self.p - 1.0) * ax.powf(self.p - 2.0)
                }
            }
        };
        base + self.perturbation.eval(x, order)
    }

    #[inline]
    pub fn psi(&self, x: f64) -> f64 {
        self.eval(x, 0)
    }

    #[inline]
    pub fn dpsi(&self, x: f64) -> f64 {
        if self.p == 2.0 && self.perturbation.is_zero() {
            return x;
        }
        self.eval(x, 1)
    }

    #[inline]
    pub fn d2psi(&self, x: f64) -> f64 {
        self.eval(x, 2)
    }

    /// Global bound on ψ'' when one exists (p = 2).
    pub fn d2psi_bound(&self) -> Option<f64> {
        if self.p == 2.0 {
            Some(1.0 + self.perturbation.bounds()[2])
        } else {
            None
        }
    }

    fn window(&self, sigma: f64) -> Result<Window> {
        let g = |x: f64| sigma * x - self.psi(x);
        // Newton on σ − ψ'(x) from the unperturbed mode.
        let mut x = sigma.signum() * sigma.abs().powf(1.0 / (self.p - 1.0));
        for _ in 0..50 {
            let d2 = self.d2psi(x).max(1e-3);
            let step = (sigma - self.dpsi(x)) / d2;
            x += step.clamp(-1.0, 1.0);
            if step.abs() < 1e-12 * (1.0 + x.abs()) {
                break;
            }
        }
        let scale = 0.25 / self.d2psi(x).max(0.05).sqrt();
        let mut mode = x;
        let mut log_max = g(x);
        let walk = |dir: f64, log_max: &mut f64, mode: &mut f64| -> Result<f64> {
            let mut y = x;
            loop {
                y += dir * scale;
                if y.abs() > self.domain_cut {
                    return Err(Error::TailNotNegligible { radius: self.domain_cut });
                }
                let gy = g(y);
                if gy > *log_max {
                    *log_max = gy;
                    *mode = y;
                }
                if gy < *log_max - TAIL_NATS {
                    return Ok(y);
                }
            }
        };
        let hi = walk(1.0, &mut log_max, &mut mode)?;
        let lo = walk(-1.0, &mut log_max, &mut mode)?;
        Ok(Window { mode, log_max, lo, hi })
    }

    /// Λ(σ) together with the mean and variance of the tilted measure.
    pub fn tilted_moments(&self, sigma: f64) -> Result<TiltedMoments> {
        let w = self.window(sigma)?;
        let c = w.mode;
        let m = quad::integrate(
            |x| {
                let e = (sigma * x - self.psi(x) - w.log_max).exp();
                let d = x - c;
                [e, d * e, d * d * e]
            },
            w.lo,
            w.hi,
            1e-14,
            0.0,
        );
        let mean_shift = m[1] / m[0];
        Ok(TiltedMoments {
            log_partition: w.log_max + m[0].ln(),
            mean: c + mean_shift,
            variance: (m[2] / m[0] - mean_shift * mean_shift).max(0.0),
        })
    }

    /// log ∫ exp(σx − ψ(x)) dx.
    pub fn log_partition(&self, sigma: f64) -> Result<f64> {
        let w = self.window(sigma)?;
        let z = quad::integrate_scalar(|x| (sigma * x - self.psi(x) - w.log_max).exp(), w.lo, w.hi, 1e-14);
        Ok(w.log_max + z.ln())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TiltedMoments {
    pub log_partition: f64,
    pub mean: f64,
    pub variance: f64,
}

/// φ tabulated on a uniform grid of mean-spin values, with the optimizing tilt
/// σ(y) = φ'(y) and φ''(y) = 1 / Var_{μ^σ}.
#[derive(Clone, Debug, PartialEq)]
pub struct FreeEnergyTable {
    pub y_grid: Vec<f64>,
    pub phi: Vec<f64>,
    pub phi_prime: Vec<f64>,
    pub phi_second: Vec<f64>,
    pub sigma_of_y: Vec<f64>,
    /// Fritsch–Carlson limited slopes used when interpolating φ'.
    dphi_slopes: Vec<f64>,
    step: f64,
}

/// Solves Λ'(σ) = y by Newton's method safeguarded by a bisection bracket.
fn solve_tilt(pot: &SingleSitePotential, y: f64, guess: f64) -> Result<(f64, TiltedMoments)> {
    let fail = || Error::NewtonDiverged { target: y };
    let mut lo = guess - 1.0;
    let mut hi = guess + 1.0;
    let mut width = 1.0;
    let mut m_lo = pot.tilted_moments(lo)?;
    while m_lo.mean > y {
        width *= 2.0;
        lo -= width;
        if width > 1e8 {
            return Err(fail());
        }
        m_lo = pot.tilted_moments(lo)?;
    }
    width = 1.0;
    let mut m_hi = pot.tilted_moments(hi)?;
    while m_hi.mean < y {
        width *= 2.0;
        hi += width;
        if width > 1e8 {
            return Err(fail());
        }
        m_hi = pot.tilted_moments(hi)?;
    }
    let mut sigma = guess.clamp(lo, hi);
    let tol = 1e-13 * (1.0 + y.abs());
    for _ in 0..200 {
        let m = pot.tilted_moments(sigma)?;
        let r = m.mean - y;
        if r.abs() <= tol {
            return Ok((sigma, m));
        }
        if r > 0.0 {
            hi = sigma;
        } else {
            lo = sigma;
        }
        let newton = sigma - r / m.variance;
        sigma = if newton > lo && newton < hi && m.variance > 0.0 { newton } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-15 * (1.0 + sigma.abs()) {
            let m = pot.tilted_moments(sigma)?;
            return Ok((sigma, m));
        }
    }
    Err(fail())
}

fn hermite(y0: f64, y1: f64, d0: f64, d1: f64, h: f64, t: f64) -> (f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    let value = h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1;
    let dh00 = 6.0 * t2 - 6.0 * t;
    let dh10 = 3.0 * t2 - 4.0 * t + 1.0;
    let dh01 = -6.0 * t2 + 6.0 * t;
    let dh11 = 3.0 * t2 - 2.0 * t;
    let deriv = (dh00 * y0 + dh01 * y1) / h + dh10 * d0 + dh11 * d1;
    (value, deriv)
}

impl FreeEnergyTable {
    pub fn build(pot: &SingleSitePotential, y_min: f64, y_max: f64, n_grid: usize) -> Result<Self> {
        if !(y_min < y_max) || n_grid < 3 {
            return Err(Error::InvalidParameter("free-energy grid needs y_min < y_max and n_grid >= 3".into()));
        }
        let step = (y_max - y_min) / (n_grid - 1) as f64;
        let mut y_grid = Vec::with_capacity(n_grid);
        let mut phi = Vec::with_capacity(n_grid);
        let mut phi_prime = Vec::with_capacity(n_grid);
        let mut phi_second = Vec::with_capacity(n_grid);
        let mut guess = y_min.signum() * y_min.abs().powf(pot.exponent() - 1.0);
        for i in 0..n_grid {
            let y = if i == n_grid - 1 { y_max } else { y_min + step * i as f64 };
            let (sigma, m) = solve_tilt(pot, y, guess)?;
            guess = sigma;
            y_grid.push(y);
            phi.push(sigma * y - m.log_partition);
            phi_prime.push(sigma);
            phi_second.push(1.0 / m.variance);
        }
        let dphi_slopes = fritsch_carlson(&phi_prime, &phi_second, step);
        Ok(FreeEnergyTable { sigma_of_y: phi_prime.clone(), y_grid, phi, phi_prime, phi_second, dphi_slopes, step })
    }

    pub fn range(&self) -> (f64, f64) {
        (self.y_grid[0], *self.y_grid.last().unwrap())
    }

    pub fn contains(&self, y: f64) -> bool {
        let (lo, hi) = self.range();
        y >= lo && y <= hi
    }

    pub fn check_range(&self, y: f64) -> Result<()> {
        if self.contains(y) {
            Ok(())
        } else {
            let (lo, hi) = self.range();
            Err(Error::OutOfTableRange { value: y, lo, hi })
        }
    }

    fn locate(&self, y: f64) -> Result<(usize, f64)> {
        self.check_range(y)?;
        let n = self.y_grid.len();
        let s = (y - self.y_grid[0]) / self.step;
        let i = (s.floor() as usize).min(n - 2);
        Ok((i, (s - i as f64).clamp(0.0, 1.0)))
    }

    pub fn phi(&self, y: f64) -> Result<f64> {
        let (i, t) = self.locate(y)?;
        Ok(hermite(self.phi[i], self.phi[i + 1], self.phi_prime[i], self.phi_prime[i + 1], self.step, t).0)
    }

    pub fn dphi(&self, y: f64) -> Result<f64> {
        let (i, t) = self.locate(y)?;
        Ok(hermite(self.phi_prime[i], self.phi_prime[i + 1], self.dphi_slopes[i], self.dphi_slopes[i + 1], self.step, t).0)
    }

    pub fn d2phi(&self, y: f64) -> Result<f64> {
        let (i, t) = self.locate(y)?;
        Ok(self.phi_second[i] * (1.0 - t) + self.phi_second[i + 1] * t)
    }

    pub fn max_d2phi(&self) -> f64 {
        self.phi_second.iter().cloned().fold(0.0, f64::max)
    }

    /// Largest φ'' over the grid cells touched by `[lo, hi]`.
    pub fn max_d2phi_on(&self, lo: f64, hi: f64) -> Result<f64> {
        let (i0, _) = self.locate(lo)?;
        let (i1, _) = self.locate(hi)?;
        Ok(self.phi_second[i0..=(i1 + 1).min(self.y_grid.len() - 1)].iter().cloned().fold(0.0, f64::max))
    }

    /// max |φ(y) + Λ(φ'(y)) − y φ'(y)| over the grid.
    pub fn legendre_residual(&self, pot: &SingleSitePotential) -> Result<f64> {
        let mut worst = 0.0f64;
        for i in 0..self.y_grid.len() {
            let lam = pot.log_partition(self.phi_prime[i])?;
            worst = worst.max((self.phi[i] + lam - self.y_grid[i] * self.phi_prime[i]).abs());
        }
        Ok(worst)
    }
}

fn fritsch_carlson(values: &[f64], slopes: &[f64], h: f64) -> Vec<f64> {
    let mut d = slopes.to_vec();
    for i in 0..values.len() - 1 {
        let delta = (values[i + 1] - values[i]) / h;
        if delta <= 0.0 {
            d[i] = 0.0;
            d[i + 1] = 0.0;
            continue;
        }
        let a = d[i] / delta;
        let b = d[i + 1] / delta;
        let r = a * a + b * b;
        if r > 9.0 {
            let tau = 3.0 / r.sqrt();
            d[i] = tau * a * delta;
            d[i + 1] = tau * b * delta;
        }
    }
    d
}

/// Inverse-CDF sampler for μ^λ(dx) ∝ exp(λx − ψ(x)) dx built on a tabulated,
/// piecewise-linear density.
#[derive(Clone, Debug)]
pub struct TiltedSampler {
    lambda: f64,
    lo: f64,
    h: f64,
    density: Vec<f64>,
    cumulative: Vec<f64>,
}

impl TiltedSampler {
    pub const CELLS: usize = 4096;

    pub fn new(pot: &SingleSitePotential, lambda: f64) -> Result<Self> {
        let w = pot.window(lambda)?;
        let n = Self::CELLS;
        let h = (w.hi - w.lo) / n as f64;
        let density: Vec<f64> = (0..=n)
            .map(|j| {
                let x = w.lo + h * j as f64;
                (lambda * x - pot.psi(x) - w.log_max).exp()
            })
            .collect();
        let mut cumulative = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for j in 0..n {
            acc += 0.5 * h * (density[j] + density[j + 1]);
            cumulative.push(acc);
        }
        Ok(TiltedSampler { lambda, lo: w.lo, h, density, cumulative })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Mean of the tabulated density (exact for the piecewise-linear model).
    pub fn mean(&self) -> f64 {
        let total = *self.cumulative.last().unwrap();
        let mut m = 0.0;
        for j in 0..self.density.len() - 1 {
            let x0 = self.lo + self.h * j as f64;
            let (d0, d1) = (self.density[j], self.density[j + 1]);
            m += self.h * (d0 * (x0 + self.h / 3.0) + d1 * (x0 + 2.0 * self.h / 3.0)) * 0.5;
        }
        m / total
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let total = *self.cumulative.last().unwrap();
        let u: f64 = rng.random::<f64>() * total;
        let j = match self.cumulative.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(j) => j.min(self.density.len() - 2),
            Err(j) => j.saturating_sub(1).min(self.density.len() - 2),
        };
        let c = (u - self.cumulative[j]) / self.h;
        let (d0, d1) = (self.density[j], self.density[j + 1]);
        let disc = (d0 * d0 + 2.0 * (d1 - d0) * c).max(0.0);
        let denom = d0 + disc.sqrt();
        let t = if denom > 0.0 { (2.0 * c / denom).clamp(0.0, 1.0) } else { 0.5 };
        self.lo + self.h * (j as f64 + t)
    }
}

/// One draw from μ^λ. Builds a sampler per call; use [`TiltedSampler`] for
/// repeated draws.
pub fn sample_single_site<R: Rng + ?Sized>(pot: &SingleSitePotential, lambda: f64, rng: &mut R) -> Result<f64> {
    Ok(TiltedSampler::new(pot, lambda)?.sample(rng))
}

/// Options for the constrained log-partition computation.
#[derive(Clone, Copy, Debug)]
pub struct CramerOptions {
    /// Spacing of the convolution grid.
    pub step: f64,
    /// Largest accepted difference between the `step` and `2 * step` results.
    pub tol: f64,
}

impl Default for CramerOptions {
    fn default() -> Self {
        CramerOptions { step: 0.05, tol: 1e-7 }
    }
}

/// ψ_K(m) = −(1/K) log ∫_{Σx = Km} exp(−Σψ(x_i)) dx_1..dx_{K−1} at each `m`,
/// by repeated trapezoidal convolution of exp(−ψ).
fn constrained_free_energy(pot: &SingleSitePotential, k: usize, m_grid: &[f64], step: f64) -> Result<Vec<f64>> {
    // support of exp(−ψ) down to 60 nats below its maximum
    let w = pot.window(0.0)?;
    let psi_min = -w.log_max;
    let mut half = 0usize;
    while pot.psi(half as f64 * step).min(pot.psi(-(half as f64) * step)) - psi_min < 60.0 {
        half += 1;
        if half as f64 * step > pot.domain_cut() {
            return Err(Error::TailNotNegligible { radius: pot.domain_cut() });
        }
    }
    let base: Vec<f64> = (-(half as i64)..=half as i64).map(|j| (psi_min - pot.psi(j as f64 * step)).exp()).collect();
    // conv holds exp(log_scale) * density of the partial sum on offsets j·step, j ∈ [−len/2, len/2]
    let mut conv = base.clone();
    let mut log_scale = -psi_min;
    for _ in 1..k.saturating_sub(1) {
        let mut next = vec![0.0; conv.len() + base.len() - 1];
        for (i, &c) in conv.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (j, &b) in base.iter().enumerate() {
                next[i + j] += c * b;
            }
        }
        let peak = next.iter().cloned().fold(0.0, f64::max);
        for v in &mut next {
            *v *= step / peak;
        }
        log_scale += peak.ln() - psi_min;
        conv = next;
    }
    let offset = (conv.len() / 2) as f64;
    m_grid
        .iter()
        .map(|&m| {
            if k == 1 {
                return Ok(pot.psi(m));
            }
            let s = k as f64 * m;
            let mut acc = 0.0;
            let mut shift = f64::NEG_INFINITY;
            let terms: Vec<f64> = conv
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0.0)
                .map(|(i, &c)| {
                    let x = (i as f64 - offset) * step;
                    let t = c.ln() - pot.psi(s - x);
                    shift = shift.max(t);
                    t
                })
                .collect();
            for t in terms {
                acc += (t - shift).exp();
            }
            let log_integral = shift + (acc * step).ln() + log_scale;
            Ok(-log_integral / k as f64)
        })
        .collect()
}

/// sup over `m_grid` of |ψ_K(m) − φ(m)| with zero external field.
pub fn cramer_compare(
    pot: &SingleSitePotential,
    table: &FreeEnergyTable,
    k: usize,
    m_grid: &[f64],
    options: CramerOptions,
) -> Result<f64> {
    if k == 0 || k > 12 {
        return Err(Error::InvalidParameter(format!("block size K = {k} must lie in 1..=12")));
    }
    let fine = constrained_free_energy(pot, k, m_grid, options.step)?;
    let coarse = constrained_free_energy(pot, k, m_grid, 2.0 * options.step)?;
    let estimate = fine.iter().zip(&coarse).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if estimate > options.tol {
        return Err(Error::GridTooCoarse { estimate, tol: options.tol });
    }
    let mut worst = 0.0f64;
    for (&m, &v) in m_grid.iter().zip(&fine) {
        worst = worst.max((v - table.phi(m)?).abs());
    }
    Ok(worst)
}

/// ψ_K values themselves, exposed for diagnostics.
pub fn constrained_log_partition(pot: &SingleSitePotential, k: usize, m_grid: &[f64], step: f64) -> Result<Vec<f64>> {
    constrained_free_energy(pot, k, m_grid, step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn eval_examples() {
        let g = SingleSitePotential::gaussian();
        assert_eq!(g.eval(3.0, 1), 3.0);
        assert_eq!(g.eval(0.0, 0), 0.0);
        let q = SingleSitePotential::pure_power(4.0).unwrap();
        assert!((q.eval(2.0, 2) - 12.0).abs() < 1e-12);
        assert!((q.eval(-2.0, 1) + 8.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_subquadratic() {
        assert!(SingleSitePotential::pure_power(1.5).is_err());
    }

    #[test]
    fn gaussian_log_partition() {
        let g = SingleSitePotential::gaussian();
        let c = 0.5 * (2.0 * PI).ln();
        assert!((g.log_partition(0.0).unwrap() - c).abs() < 1e-12);
        assert!((g.log_partition(1.0).unwrap() - (0.5 + c)).abs() < 1e-12);
        let m = g.tilted_moments(-0.7).unwrap();
        assert!((m.mean + 0.7).abs() < 1e-12);
        assert!((m.variance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quartic_log_partition_against_gauss_oracle() {
        // independent composite Gauss–Legendre (5-point) with doubling until stable
        let nodes = [0.0, 0.538_469_310_105_683_1, -0.538_469_310_105_683_1, 0.906_179_845_938_664, -0.906_179_845_938_664];
        let weights = [0.568_888_888_888_888_9, 0.478_628_670_499_366_5, 0.478_628_670_499_366_5, 0.236_926_885_056_189_1, 0.236_926_885_056_189_1];
        let oracle = |panels: usize| {
            let (a, b) = (-8.0, 8.0);
            let h = (b - a) / panels as f64;
            let mut s = 0.0;
            for p in 0..panels {
                let c = a + h * (p as f64 + 0.5);
                for (x, w) in nodes.iter().zip(&weights) {
                    let t = c + 0.5 * h * x;
                    s += 0.5 * h * w * (-t.powi(4) / 4.0).exp();
                }
            }
            s.ln()
        };
        let mut panels = 8;
        let mut prev = oracle(panels);
        loop {
            panels *= 2;
            let next = oracle(panels);
            if (next - prev).abs() < 1e-14 {
                prev = next;
                break;
            }
            prev = next;
        }
        let q = SingleSitePotential::pure_power(4.0).unwrap();
        assert!((q.log_partition(0.0).unwrap() - prev).abs() < 1e-10);
    }

    #[test]
    fn perturbation_is_bounded_and_smooth_at_knots() {
        let p = Perturbation::from_knots(&[[-1.0, 0.0], [0.0, 0.3], [1.0, -0.2], [2.0, 0.0]]).unwrap();
        for x in [-1.0, 0.0, 1.0, 2.0] {
            let left = p.eval(x - 1e-9, 1);
            let right = p.eval(x + 1e-9, 1);
            assert!((left - right).abs() < 1e-6);
        }
        assert_eq!(p.eval(5.0, 0), 0.0);
        assert_eq!(p.eval(-5.0, 1), 0.0);
        let b = p.bounds();
        assert!(b[0] >= 0.3 && b[1] > 0.0 && b[2] > 0.0);
        // derivative consistency by central differences
        for x in [-0.7, 0.2, 1.4] {
            let fd = (p.eval(x + 1e-6, 0) - p.eval(x - 1e-6, 0)) / 2e-6;
            assert!((fd - p.eval(x, 1)).abs() < 1e-6);
            let fd2 = (p.eval(x + 1e-5, 1) - p.eval(x - 1e-5, 1)) / 2e-5;
            assert!((fd2 - p.eval(x, 2)).abs() < 1e-5);
        }
    }

    #[test]
    fn gaussian_free_energy_closed_form() {
        let g = SingleSitePotential::gaussian();
        let t = FreeEnergyTable::build(&g, -2.0, 2.0, 41).unwrap();
        let c = 0.5 * (2.0 * PI).ln();
        for (i, &y) in t.y_grid.iter().enumerate() {
            assert!((t.phi[i] - (0.5 * y * y - c)).abs() < 1e-8);
            assert!((t.phi_prime[i] - y).abs() < 1e-8);
            assert!((t.phi_second[i] - 1.0).abs() < 1e-8);
        }
        for y in [-1.93, -0.31, 0.77, 1.5] {
            assert!((t.phi(y).unwrap() - (0.5 * y * y - c)).abs() < 1e-8);
            assert!((t.dphi(y).unwrap() - y).abs() < 1e-8);
        }
        assert!(matches!(t.phi(2.5), Err(Error::OutOfTableRange { .. })));
    }

    #[test]
    fn quartic_tilt_against_brute_force_sup() {
        let q = SingleSitePotential::pure_power(4.0).unwrap();
        let t = FreeEnergyTable::build(&q, -1.5, 1.5, 31).unwrap();
        // brute-force sup_σ σ·1 − Λ(σ) on a 1e-5 grid around the optimum
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut coarse = -5.0;
        while coarse <= 5.0 {
            let v = coarse - q.log_partition(coarse).unwrap();
            if v > best.0 {
                best = (v, coarse);
            }
            coarse += 0.01;
        }
        let center = best.1;
        let mut s = center - 0.01;
        while s <= center + 0.01 {
            let v = s - q.log_partition(s).unwrap();
            if v > best.0 {
                best = (v, s);
            }
            s += 1e-5;
        }
        assert!((t.dphi(1.0).unwrap() - best.1).abs() < 2e-5);
        assert!((t.phi(1.0).unwrap() - best.0).abs() < 1e-9);
    }

    #[test]
    fn table_invariants_with_perturbation() {
        let pot = SingleSitePotential::new(2.0, Perturbation::from_knots(&[[-1.0, 0.0], [0.0, 0.4], [1.0, 0.0]]).unwrap(), 60.0).unwrap();
        let t = FreeEnergyTable::build(&pot, -3.0, 3.0, 121).unwrap();
        for w in t.phi.windows(3) {
            assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-9);
        }
        assert!(t.phi_prime.windows(2).all(|w| w[1] > w[0]));
        assert!(t.legendre_residual(&pot).unwrap() <= 1e-8);
    }

    #[test]
    fn sampler_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = SingleSitePotential::gaussian();
        for lam in [0.0, 1.5] {
            let s = TiltedSampler::new(&g, lam).unwrap();
            let n = 1_000_000;
            let mean = (0..n).map(|_| s.sample(&mut rng)).sum::<f64>() / n as f64;
            assert!((mean - lam).abs() < 0.005, "lambda {lam}: mean {mean}");
        }
        let q = SingleSitePotential::pure_power(4.0).unwrap();
        let t = FreeEnergyTable::build(&q, -1.0, 1.0, 21).unwrap();
        let lam = t.dphi(0.7).unwrap();
        let s = TiltedSampler::new(&q, lam).unwrap();
        // quadrature cross-check of the tilt identity
        assert!((q.tilted_moments(lam).unwrap().mean - 0.7).abs() < 1e-10);
        assert!((s.mean() - 0.7).abs() < 1e-4);
        let n = 1_000_000;
        let mean = (0..n).map(|_| s.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.7).abs() < 0.01);
    }

    #[test]
    fn gaussian_cramer_closed_form() {
        let g = SingleSitePotential::gaussian();
        let t = FreeEnergyTable::build(&g, -2.0, 2.0, 81).unwrap();
        let ms = [-1.0, -0.25, 0.0, 0.6, 1.2];
        for k in [2usize, 5, 8] {
            let v = constrained_log_partition(&g, k, &ms, 0.05).unwrap();
            for (&m, &psi_k) in ms.iter().zip(&v) {
                let exact = 0.5 * m * m - 0.5 * (2.0 * PI).ln() + (2.0 * PI * k as f64).ln() / (2.0 * k as f64);
                assert!((psi_k - exact).abs() < 1e-6, "K={k} m={m}: {psi_k} vs {exact}");
            }
        }
        let d2 = cramer_compare(&g, &t, 2, &ms, CramerOptions::default()).unwrap();
        let d8 = cramer_compare(&g, &t, 8, &ms, CramerOptions::default()).unwrap();
        assert!(d8 < d2);
    }

    #[test]
    fn cramer_rejects_coarse_grid() {
        let q = SingleSitePotential::pure_power(4.0).unwrap();
        let t = FreeEnergyTable::build(&q, -1.0, 1.0, 21).unwrap();
        let r = cramer_compare(&q, &t, 4, &[0.0, 0.5], CramerOptions { step: 0.6, tol: 1e-10 });
        assert!(matches!(r, Err(Error::GridTooCoarse { .. })));
    }
}
