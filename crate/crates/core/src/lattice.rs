//! Periodic one-dimensional lattices: spin configurations, conductance
//! fields, the divergence-form operators built from them, discrete Dirichlet
//! forms and their dual norms, and the step embedding of configurations into
//! cell-averaged profiles on the unit torus.
//!
//! Site `i` occupies the cell `[i/N, (i+1)/N)`; bond `i` joins site `i` to
//! site `i + 1 (mod N)` and sits at `θ = (i+1)/N`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::hminus1_norm;
use crate::hydro::SpaceTimeProfile;
use crate::linalg::solve_tridiagonal;

/// Spins x_1..x_N on the periodic lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinConfiguration {
    pub values: Vec<f64>,
    /// Conserved mean spin, recorded when the configuration was created.
    pub mean: f64,
}

impl SpinConfiguration {
    pub fn new(values: Vec<f64>) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        SpinConfiguration { values, mean }
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn current_mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Drift of the mean away from the recorded value.
    pub fn conservation_error(&self) -> f64 {
        (self.current_mean() - self.mean).abs()
    }
}

/// State-dependent bond conductance a(x, y) between neighbouring spins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BondFn {
    Constant { value: f64 },
    /// a(x, y) = base + amplitude · exp(−(x² + y²) / width²).
    Bump { base: f64, amplitude: f64, width: f64 },
}

impl BondFn {
    #[inline]
    pub fn value(&self, x: f64, y: f64) -> f64 {
        match *self {
            BondFn::Constant { value } => value,
            BondFn::Bump { base, amplitude, width } => base + amplitude * (-(x * x + y * y) / (width * width)).exp(),
        }
    }

    /// (a, ∂a/∂x, ∂a/∂y).
    #[inline]
    pub fn with_gradient(&self, x: f64, y: f64) -> (f64, f64, f64) {
        match *self {
            BondFn::Constant { value } => (value, 0.0, 0.0),
            BondFn::Bump { base, amplitude, width } => {
                let w2 = width * width;
                let e = amplitude * (-(x * x + y * y) / w2).exp();
                (base + e, -2.0 * x / w2 * e, -2.0 * y / w2 * e)
            }
        }
    }

    /// Range `[lo, hi]` of the conductance.
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            BondFn::Constant { value } => (value, value),
            BondFn::Bump { base, amplitude, .. } => (base.min(base + amplitude), base.max(base + amplitude)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.bounds();
        let width_ok = match *self {
            BondFn::Bump { width, .. } => width > 0.0,
            BondFn::Constant { .. } => true,
        };
        if lo > 0.0 && hi.is_finite() && width_ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bond function {self:?} is not uniformly elliptic")))
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, BondFn::Constant { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConductanceField {
    Constant { value: f64 },
    /// Quenched i.i.d. conductances, one per bond, all within `[1/c, c]`.
    Iid { bonds: Vec<f64>, c: f64 },
    StateDependent { bond_fn: BondFn },
}

impl ConductanceField {
    pub fn unit() -> Self {
        ConductanceField::Constant { value: 1.0 }
    }

    pub fn iid(bonds: Vec<f64>, c: f64) -> Result<Self> {
        if bonds.iter().any(|&a| !(a >= 1.0 / c - 1e-15 && a <= c + 1e-15)) {
            return Err(Error::InvalidParameter(format!("conductance outside [1/{c}, {c}]")));
        }
        Ok(ConductanceField::Iid { bonds, c })
    }

    /// i.i.d. uniform conductances on `[lo, hi]`.
    pub fn iid_uniform<R: Rng + ?Sized>(n: usize, lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidParameter("uniform conductances need 0 < lo <= hi".into()));
        }
        let bonds = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
        Self::iid(bonds, hi.max(1.0 / lo))
    }

    /// Ellipticity constant c with 1/c ≤ a ≤ c.
    pub fn ellipticity(&self) -> f64 {
        let (lo, hi) = self.bounds();
        hi.max(1.0 / lo)
    }

    pub fn bounds(&self) -> (f64, f64) {
        match self {
            ConductanceField::Constant { value } => (*value, *value),
            ConductanceField::Iid { bonds, .. } => bonds.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &a| (l.min(a), h.max(a))),
            ConductanceField::StateDependent { bond_fn } => bond_fn.bounds(),
        }
    }

    /// Conductance of every bond; state-dependent fields need the configuration.
    pub fn bonds(&self, n: usize, config: Option<&[f64]>) -> Vec<f64> {
        match self {
            ConductanceField::Constant { value } => vec![*value; n],
            ConductanceField::Iid { bonds, .. } => {
                assert_eq!(bonds.len(), n, "conductance field size does not match the lattice");
                bonds.clone()
            }
            ConductanceField::StateDependent { bond_fn } => {
                let x = config.expect("state-dependent conductance requires a configuration");
                (0..n).map(|i| bond_fn.value(x[i], x[(i + 1) % n])).collect()
            }
        }
    }
}

fn divergence_form(bonds: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let n2 = (n * n) as f64;
    let flux: Vec<f64> = (0..n).map(|i| bonds[i] * (x[(i + 1) % n] - x[i])).collect();
    (0..n).map(|i| n2 * (flux[i] - flux[(i + n - 1) % n])).collect()
}

/// (A₀x)_i = N²(x_{i+1} + x_{i−1} − 2x_i).
pub fn apply_a0(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let n2 = (n * n) as f64;
    (0..n).map(|i| n2 * (x[(i + 1) % n] + x[(i + n - 1) % n] - 2.0 * x[i])).collect()
}

/// (Ax)_i = N²[a_i(x_{i+1} − x_i) − a_{i−1}(x_i − x_{i−1})].
pub fn apply_conductance(field: &ConductanceField, x: &[f64], config: Option<&[f64]>) -> Vec<f64> {
    divergence_form(&field.bonds(x.len(), config), x)
}

/// Σ_i w_i N² a_i (h_{i+1} − h_i)².
pub fn dirichlet_form(field: &ConductanceField, h: &[f64], weights: &[f64], config: Option<&[f64]>) -> f64 {
    let n = h.len();
    let n2 = (n * n) as f64;
    let a = field.bonds(n, config);
    (0..n).map(|i| weights[i] * n2 * a[i] * (h[(i + 1) % n] - h[i]).powi(2)).sum()
}

/// sup_h 2⟨h, r⟩ − ⟨−Ah, h⟩ for mean-zero `r`.
///
/// The operator −A vanishes on constants, so the system is grounded at site 0
/// and the remaining N − 1 unknowns form a tridiagonal system.
pub fn discrete_dual_norm(field: &ConductanceField, r: &[f64], config: Option<&[f64]>) -> Result<f64> {
    let n = r.len();
    let sum: f64 = r.iter().sum();
    let scale = r.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    if sum.abs() > 1e-10 * scale {
        return Err(Error::NotMeanZero { mean: sum / n as f64 });
    }
    if n < 2 {
        return Ok(0.0);
    }
    let mean = sum / n as f64;
    let r: Vec<f64> = r.iter().map(|v| v - mean).collect();
    let a = field.bonds(n, config);
    let n2 = (n * n) as f64;
    let m = n - 1;
    let mut lower = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    let mut u: Vec<f64> = r[1..].to_vec();
    for k in 0..m {
        let i = k + 1;
        diag[k] = n2 * (a[i - 1] + a[i]);
        lower[k] = -n2 * a[i - 1];
        upper[k] = -n2 * a[i];
    }
    solve_tridiagonal(&lower, &diag, &upper, &mut u)?;
    Ok(u.iter().zip(&r[1..]).map(|(a, b)| a * b).sum())
}

/// Cell-averaged function on the uniform grid of `M` cells of the unit torus;
/// value `j` is the average over `[j/M, (j+1)/M)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(values: Vec<f64>) -> Self {
        GridFunction { values }
    }

    pub fn constant(m: usize, value: f64) -> Self {
        GridFunction { values: vec![value; m] }
    }

    /// Samples `f` at the cell centres.
    pub fn from_fn<F: Fn(f64) -> f64>(m: usize, f: F) -> Self {
        GridFunction { values: (0..m).map(|j| f(Self::center(m, j))).collect() }
    }

    pub fn center(m: usize, j: usize) -> f64 {
        (j as f64 + 0.5) / m as f64
    }

    pub fn m(&self) -> usize {
        self.values.len()
    }

    /// ∫ over the torus, exact for the step representation.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sub(&self, other: &GridFunction) -> GridFunction {
        assert_eq!(self.m(), other.m());
        GridFunction { values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect() }
    }

    pub fn centered(&self) -> GridFunction {
        let m = self.mean();
        GridFunction { values: self.values.iter().map(|v| v - m).collect() }
    }

    /// Cell-average resampling onto `m` cells; preserves the mean exactly.
    pub fn resample(&self, m: usize) -> GridFunction {
        cell_average(&self.values, m)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "theta,value")?;
        let m = self.m();
        for (j, v) in self.values.iter().enumerate() {
            writeln!(out, "{},{}", Self::center(m, j), v)?;
        }
        Ok(())
    }
}

fn cell_average(values: &[f64], m: usize) -> GridFunction {
    let n = values.len();
    if n == m {
        return GridFunction::new(values.to_vec());
    }
    let mut out = vec![0.0; m];
    // sweep the merged partition {i/N} ∪ {j/M} in integer units of 1/(N·M)
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos = 0usize;
    while i < n && j < m {
        let end_i = (i + 1) * m;
        let end_j = (j + 1) * n;
        let end = end_i.min(end_j);
        out[j] += values[i] * (end - pos) as f64;
        pos = end;
        if end == end_i {
            i += 1;
        }
        if end == end_j {
            j += 1;
        }
    }
    for v in &mut out {
        *v /= n as f64;
    }
    GridFunction::new(out)
}

/// Step profile of a configuration, cell-averaged onto `m` cells.
pub fn embed_step(x: &SpinConfiguration, m: usize) -> GridFunction {
    cell_average(&x.values, m)
}

/// max over snapshots of the H⁻¹ distance between `traj` and `target`; the
/// means must agree at every snapshot within `mean_tol`.
pub fn linf_hminus1_distance(traj: &[GridFunction], target: &SpaceTimeProfile, mean_tol: f64) -> Result<f64> {
    distance_impl(traj, target, mean_tol, false)
}

/// As [`linf_hminus1_distance`], but a mean offset that stays constant in
/// time (within `mean_tol`) is removed before measuring.
pub fn linf_hminus1_distance_centered(traj: &[GridFunction], target: &SpaceTimeProfile, mean_tol: f64) -> Result<f64> {
    distance_impl(traj, target, mean_tol, true)
}

fn distance_impl(traj: &[GridFunction], target: &SpaceTimeProfile, mean_tol: f64, allow_offset: bool) -> Result<f64> {
    if traj.len() != target.times.len() {
        return Err(Error::InvalidParameter(format!(
            "trajectory has {} snapshots, target {}",
            traj.len(),
            target.times.len()
        )));
    }
    let mut worst = 0.0f64;
    let mut reference = None;
    for (k, (snap, t)) in traj.iter().zip(&target.times).enumerate() {
        let goal = &target.values[k];
        let snap = if snap.m() == goal.m() { snap.clone() } else { snap.resample(goal.m()) };
        let diff = snap.sub(goal);
        let offset = diff.mean();
        let base = if allow_offset { *reference.get_or_insert(offset) } else { 0.0 };
        if (offset - base).abs() > mean_tol {
            return Err(Error::MeanMismatch { time: *t, diff: offset - base });
        }
        let d = hminus1_norm(&diff.centered())?.sqrt();
        worst = worst.max(d);
    }
    Ok(worst)
}
