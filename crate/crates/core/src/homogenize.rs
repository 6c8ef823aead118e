//! Effective coefficients: ā for quenched conductances, and variational upper
//! bounds on the non-gradient coefficient â(y) = inf_F a_F(y) over
//! linear + quadratic cylinder functions.
//!
//! For F(y) = α·y + ½yᵀSy on the window −k..k, the corrector ξ = Σ_i τ_i F has
//! ∂_mξ = Σ_j α_j + Σ_d c_d x_{m+d} with c_d the d-th diagonal sum of S. The
//! linear part drops out of every gradient difference, and a_F depends on S
//! only through c.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::replica_seed;
use crate::error::{Error, Result};
use crate::functionals::McEstimate;
use crate::lattice::BondFn;
use crate::potential::{FreeEnergyTable, SingleSitePotential, TiltedSampler};

/// 1/E[1/a] over a sample of conductances.
pub fn abar(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyField);
    }
    if samples.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::InvalidParameter("conductances must be positive".into()));
    }
    Ok(samples.len() as f64 / samples.iter().map(|a| 1.0 / a).sum::<f64>())
}

/// Harmonic mean of the uniform law on [lo, hi].
pub fn abar_uniform(lo: f64, hi: f64) -> Result<f64> {
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::InvalidParameter("uniform conductances need 0 < lo <= hi".into()));
    }
    if hi == lo {
        return Ok(lo);
    }
    Ok((hi - lo) / (hi / lo).ln())
}

/// F(y_{−k..k}) = α·y + ½ yᵀSy, S stored as its upper triangle, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylinderFn {
    pub k: usize,
    pub linear: Vec<f64>,
    pub quadratic: Vec<f64>,
}

fn tri_len(w: usize) -> usize {
    w * (w + 1) / 2
}

fn tri_index(w: usize, j: usize, l: usize) -> usize {
    let (a, b) = if j <= l { (j, l) } else { (l, j) };
    a * w - a * (a + 1) / 2 + b
}

impl CylinderFn {
    pub fn zero(k: usize) -> Self {
        let w = 2 * k + 1;
        CylinderFn { k, linear: vec![0.0; w], quadratic: vec![0.0; tri_len(w)] }
    }

    pub fn width(&self) -> usize {
        2 * self.k + 1
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.width();
        if self.linear.len() != w || self.quadratic.len() != tri_len(w) {
            return Err(Error::InvalidParameter(format!("cylinder function with k = {} needs {} linear and {} quadratic coefficients", self.k, w, tri_len(w))));
        }
        Ok(())
    }

    pub fn s(&self, j: usize, l: usize) -> f64 {
        self.quadratic[tri_index(self.width(), j, l)]
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        let w = self.width();
        let mut v = 0.0;
        for j in 0..w {
            v += self.linear[j] * y[j];
            for l in 0..w {
                v += 0.5 * self.s(j, l) * y[j] * y[l];
            }
        }
        v
    }

    /// ∂F/∂y_j.
    pub fn gradient(&self, y: &[f64], out: &mut [f64]) {
        let w = self.width();
        for j in 0..w {
            out[j] = self.linear[j] + (0..w).map(|l| self.s(j, l) * y[l]).sum::<f64>();
        }
    }

    /// Diagonal sums c_d = Σ_{l−j=d} S_jl, d = −2k..=2k (index d + 2k).
    pub fn diagonal_sums(&self) -> Vec<f64> {
        let w = self.width();
        let mut c = vec![0.0; 2 * w - 1];
        for j in 0..w {
            for l in 0..w {
                c[l + w - 1 - j] += self.s(j, l);
            }
        }
        c
    }

    /// ∂ξ/∂x_m for every site of a periodic configuration.
    pub fn corrector_gradient(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        let c = self.diagonal_sums();
        let a: f64 = self.linear.iter().sum();
        let reach = 2 * self.k as isize;
        for m in 0..n {
            let mut g = a;
            for d in -reach..=reach {
                g += c[(d + reach) as usize] * x[(m as isize + d).rem_euclid(n as isize) as usize];
            }
            out[m] = g;
        }
    }

    /// Smallest-norm F with the same corrector gradient: zero linear part and
    /// each diagonal sum spread evenly along its diagonal.
    pub fn canonical(&self) -> CylinderFn {
        let w = self.width();
        let c = self.diagonal_sums();
        let mut out = CylinderFn::zero(self.k);
        for j in 0..w {
            for l in j..w {
                let d = l - j;
                out.quadratic[tri_index(w, j, l)] = c[d + w - 1] / (w - d) as f64;
            }
        }
        out
    }

    #[cfg(test)]
    fn minimizer_norm_sq(&self) -> f64 {
        self.quadratic.iter().map(|v| v * v).sum()
    }

    fn embed(&self, k: usize) -> CylinderFn {
        let mut out = CylinderFn::zero(k);
        let shift = k - self.k;
        let w = self.width();
        for j in 0..w {
            out.linear[j + shift] = self.linear[j];
            for l in j..w {
                let idx = tri_index(out.width(), j + shift, l + shift);
                out.quadratic[idx] = self.s(j, l);
            }
        }
        out
    }
}

/// i.i.d. draws from μ^λ on the sites −2K..=1+2K, shared by every F with
/// window k ≤ K (common random numbers).
#[derive(Clone, Debug)]
pub struct WindowSamples {
    pub k_max: usize,
    pub lambda: f64,
    rows: Vec<Vec<f64>>,
}

impl WindowSamples {
    pub fn draw<R: Rng + ?Sized>(pot: &SingleSitePotential, table: &FreeEnergyTable, y: f64, k_max: usize, samples: usize, rng: &mut R) -> Result<Self> {
        let lambda = table.dphi(y)?;
        let width = 4 * k_max + 2;
        let rows = if pot.is_gaussian() {
            (0..samples).map(|_| (0..width).map(|_| lambda + rng.sample::<f64, _>(StandardNormal)).collect()).collect()
        } else {
            let sampler = TiltedSampler::new(pot, lambda)?;
            (0..samples).map(|_| (0..width).map(|_| sampler.sample(rng)).collect()).collect()
        };
        Ok(WindowSamples { k_max, lambda, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Value at lattice site `site` ∈ [−2K, 1 + 2K] of sample `r`.
    fn at(&self, r: usize, site: isize) -> f64 {
        self.rows[r][(site + 2 * self.k_max as isize) as usize]
    }

    /// z_d = x_{1+d} − x_d for d = −2k..=2k, and a(x₀, x₁).
    fn features(&self, r: usize, k: usize, bond: &BondFn, z: &mut [f64]) -> f64 {
        let reach = 2 * k as isize;
        for d in -reach..=reach {
            z[(d + reach) as usize] = self.at(r, 1 + d) - self.at(r, d);
        }
        bond.value(self.at(r, 0), self.at(r, 1))
    }
}

fn estimate(values: impl Iterator<Item = f64>) -> McEstimate {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let se = if n > 1.0 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt() } else { f64::INFINITY };
    McEstimate { value: mean, se }
}

/// a_F(y) = E[a(x₀,x₁)(1 − ∂₁ξ + ∂₀ξ)²] over the stored samples.
pub fn a_f_on(bond: &BondFn, f: &CylinderFn, samples: &WindowSamples) -> Result<McEstimate> {
    f.validate()?;
    if f.k > samples.k_max {
        return Err(Error::InvalidParameter("cylinder window exceeds the sampled window".into()));
    }
    if samples.is_empty() {
        return Err(Error::InvalidParameter("no samples".into()));
    }
    let c = f.diagonal_sums();
    let mut z = vec![0.0; c.len()];
    Ok(estimate((0..samples.len()).map(|r| {
        let a = samples.features(r, f.k, bond, &mut z);
        let d: f64 = c.iter().zip(&z).map(|(c, z)| c * z).sum();
        a * (1.0 - d) * (1.0 - d)
    })))
}

#[allow(clippy::too_many_arguments)]
pub fn a_f<R: Rng + ?Sized>(
    pot: &SingleSitePotential,
    table: &FreeEnergyTable,
    bond: &BondFn,
    y: f64,
    f: &CylinderFn,
    samples: usize,
    max_rel_se: f64,
    rng: &mut R,
) -> Result<McEstimate> {
    let ws = WindowSamples::draw(pot, table, y, f.k, samples, rng)?;
    let est = a_f_on(bond, f, &ws)?;
    if est.value > 0.0 && est.se / est.value > max_rel_se {
        return Err(Error::McVarianceTooHigh { rel_se: est.se / est.value, limit: max_rel_se });
    }
    Ok(est)
}

/// Sample moments of a_F as a quadratic in the diagonal sums c:
/// a_F = m0 − 2cᵀv + cᵀMc.
struct Moments {
    m0: f64,
    v: Vec<f64>,
    mm: Vec<f64>,
}

impl Moments {
    fn new(bond: &BondFn, samples: &WindowSamples, k: usize) -> Self {
        let dim = 4 * k + 1;
        let mut z = vec![0.0; dim];
        let (mut m0, mut v, mut mm) = (0.0, vec![0.0; dim], vec![0.0; dim * dim]);
        for r in 0..samples.len() {
            let a = samples.features(r, k, bond, &mut z);
            m0 += a;
            for i in 0..dim {
                v[i] += a * z[i];
                for j in 0..dim {
                    mm[i * dim + j] += a * z[i] * z[j];
                }
            }
        }
        let n = samples.len() as f64;
        Moments { m0: m0 / n, v: v.iter().map(|x| x / n).collect(), mm: mm.iter().map(|x| x / n).collect() }
    }

    fn value(&self, c: &[f64]) -> f64 {
        let dim = c.len();
        let mut q = 0.0;
        let mut lin = 0.0;
        for i in 0..dim {
            lin += c[i] * self.v[i];
            for j in 0..dim {
                q += c[i] * self.mm[i * dim + j] * c[j];
            }
        }
        (self.m0 - 2.0 * lin + q).max(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Box constraint |S_jl| ≤ bound.
    pub bound: f64,
    pub initial_step: f64,
    pub min_step: f64,
    pub max_sweeps: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { bound: 1.0, initial_step: 0.25, min_step: 1e-4, max_sweeps: 400 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AhatEntry {
    pub y: f64,
    pub k: usize,
    pub a_f_best: f64,
    pub mc_se: f64,
    pub minimizer: CylinderFn,
}

impl AhatEntry {
    /// Euclidean norm of the quadratic coefficients.
    pub fn minimizer_norm(&self) -> f64 {
        self.minimizer.quadratic.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Coordinate search over the quadratic coefficients with shrinking steps,
/// starting from `start`.
fn coordinate_search(bond: &BondFn, samples: &WindowSamples, start: CylinderFn, opts: &SearchOptions) -> (CylinderFn, f64) {
    let moments = Moments::new(bond, samples, start.k);
    let mut f = start;
    let mut best = moments.value(&f.diagonal_sums());
    let mut step = opts.initial_step;
    let mut sweeps = 0;
    while step >= opts.min_step && sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut improved = false;
        for p in 0..f.quadratic.len() {
            for dir in [1.0, -1.0] {
                let old = f.quadratic[p];
                let trial = (old + dir * step).clamp(-opts.bound, opts.bound);
                if trial == old {
                    continue;
                }
                f.quadratic[p] = trial;
                let v = moments.value(&f.diagonal_sums());
                if v < best {
                    best = v;
                    improved = true;
                    break;
                }
                f.quadratic[p] = old;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (f, best)
}

/// For each y, minimizes a_F over windows k = 0..=k_max. The search runs on
/// one sample set and the reported a_F (with its SE) on a second, independent
/// one, so each entry is an unbiased estimate of an upper bound on â(y); an
/// in-sample minimum would be biased low by O(window/samples). Each window is
/// warm-started from the previous optimum and keeps it unless the held-out
/// estimate improves, so a_F_best is non-increasing in k. Entries are
/// ordered by y, then k.
#[allow(clippy::too_many_arguments)]
pub fn ahat_approx(
    pot: &SingleSitePotential,
    table: &FreeEnergyTable,
    bond: &BondFn,
    y_grid: &[f64],
    k_max: usize,
    samples: usize,
    seed: u64,
    opts: &SearchOptions,
) -> Result<Vec<AhatEntry>> {
    if k_max > 3 {
        return Err(Error::InvalidParameter("window k_max is limited to 3".into()));
    }
    bond.validate()?;
    let per_y: Vec<Vec<AhatEntry>> = y_grid
        .par_iter()
        .enumerate()
        .map(|(iy, &y)| {
            let mut rng = ChaCha8Rng::seed_from_u64(replica_seed(seed, iy as u64));
            let ws = WindowSamples::draw(pot, table, y, k_max, samples, &mut rng)?;
            let held_out = WindowSamples::draw(pot, table, y, k_max, samples, &mut rng)?;
            let mut out = Vec::with_capacity(k_max + 1);
            let mut start = CylinderFn::zero(0);
            for k in 0..=k_max {
                let warm = start.embed(k);
                let (f, _) = coordinate_search(bond, &ws, warm.clone(), opts);
                let mut f = f.canonical();
                let mut est = a_f_on(bond, &f, &held_out)?;
                let base = a_f_on(bond, &warm, &held_out)?;
                if base.value < est.value {
                    f = warm;
                    est = base;
                }
                start = f.clone();
                out.push(AhatEntry { y, k, a_f_best: est.value, mc_se: est.se, minimizer: f });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_y.into_iter().flatten().collect())
}

pub fn write_ahat_csv<W: Write>(entries: &[AhatEntry], mut out: W) -> std::io::Result<()> {
    writeln!(out, "y,k,a_F_best,mc_se")?;
    for e in entries {
        writeln!(out, "{},{},{},{}", e.y, e.k, e.a_f_best, e.mc_se)?;
    }
    Ok(())
}

/// â(y) by linear interpolation of the best entries per y (largest k),
/// held constant outside the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AhatTable {
    pub y: Vec<f64>,
    pub value: Vec<f64>,
}

impl AhatTable {
    pub fn from_entries(entries: &[AhatEntry]) -> Result<Self> {
        let mut y: Vec<f64> = Vec::new();
        let mut value: Vec<f64> = Vec::new();
        for e in entries {
            if y.last() == Some(&e.y) {
                *value.last_mut().unwrap() = value.last().unwrap().min(e.a_f_best);
            } else {
                y.push(e.y);
                value.push(e.a_f_best);
            }
        }
        if y.is_empty() || y.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("â table needs increasing y values".into()));
        }
        Ok(AhatTable { y, value })
    }

    pub fn eval(&self, y: f64) -> f64 {
        let n = self.y.len();
        if n == 1 || y <= self.y[0] {
            return self.value[0];
        }
        if y >= self.y[n - 1] {
            return self.value[n - 1];
        }
        let j = self.y.partition_point(|&v| v <= y) - 1;
        let t = (y - self.y[j]) / (self.y[j + 1] - self.y[j]);
        self.value[j] + t * (self.value[j + 1] - self.value[j])
    }

    pub fn max(&self) -> f64 {
        self.value.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian() -> (SingleSitePotential, FreeEnergyTable) {
        let pot = SingleSitePotential::gaussian();
        let t = FreeEnergyTable::build(&pot, -3.0, 3.0, 61).unwrap();
        (pot, t)
    }

    #[test]
    fn canonical_keeps_the_corrector() {
        let mut f = CylinderFn::zero(2);
        for (i, q) in f.quadratic.iter_mut().enumerate() {
            *q = (i as f64 * 0.37).sin();
        }
        f.linear[1] = 0.4;
        let g = f.canonical();
        for (a, b) in f.diagonal_sums().iter().zip(g.diagonal_sums()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(g.minimizer_norm_sq() <= f.quadratic.iter().map(|v| v * v).sum::<f64>());
    }

    #[test]
    fn harmonic_means() {
        assert_eq!(abar(&[2.5; 7]).unwrap(), 2.5);
        assert!((abar(&[1.0, 2.0]).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert!(matches!(abar(&[]), Err(Error::EmptyField)));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<f64> = (0..1_000_000).map(|_| 1.0 + rng.random::<f64>()).collect();
        let exact = 1.0 / std::f64::consts::LN_2;
        assert!((abar(&s).unwrap() - exact).abs() / exact < 0.02);
        assert!((abar_uniform(1.0, 2.0).unwrap() - exact).abs() < 1e-15);
    }

    #[test]
    fn diagonal_sums_match_brute_force_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 2;
        let mut f = CylinderFn::zero(k);
        f.linear.iter_mut().for_each(|v| *v = rng.random::<f64>() - 0.5);
        f.quadratic.iter_mut().for_each(|v| *v = rng.random::<f64>() - 0.5);
        let n = 13;
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mut fast = vec![0.0; n];
        f.corrector_gradient(&x, &mut fast);
        // brute force: differentiate ξ = Σ_c F(x_{c−k..c+k}) numerically
        let xi = |x: &[f64]| -> f64 {
            (0..n)
                .map(|c| {
                    let y: Vec<f64> = (0..f.width()).map(|j| x[(c + n - k + j) % n]).collect();
                    f.eval(&y)
                })
                .sum()
        };
        for m in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[m] += 1e-5;
            xm[m] -= 1e-5;
            let num = (xi(&xp) - xi(&xm)) / 2e-5;
            assert!((num - fast[m]).abs() < 1e-7, "site {m}: {num} vs {}", fast[m]);
        }
    }

    #[test]
    fn zero_and_linear_corrector_reduce_to_mean_conductance() {
        let (pot, t) = gaussian();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ws = WindowSamples::draw(&pot, &t, 0.3, 1, 20_000, &mut rng).unwrap();
        let bump = BondFn::Bump { base: 1.0, amplitude: 0.5, width: 1.0 };
        let zero = a_f_on(&bump, &CylinderFn::zero(1), &ws).unwrap();
        let direct = estimate((0..ws.len()).map(|r| bump.value(ws.at(r, 0), ws.at(r, 1))));
        assert!((zero.value - direct.value).abs() < 1e-15);
        let kappa = BondFn::Constant { value: 1.7 };
        let mut lin = CylinderFn::zero(1);
        lin.linear = vec![0.3, -1.2, 0.8];
        let v = a_f_on(&kappa, &lin, &ws).unwrap();
        assert!((v.value - 1.7).abs() < 1e-12 && v.se < 1e-8, "{v:?}");
    }

    #[test]
    fn constant_conductance_has_trivial_minimizer() {
        let (pot, t) = gaussian();
        let bond = BondFn::Constant { value: 1.5 };
        let res = ahat_approx(&pot, &t, &bond, &[0.0, 0.5], 2, 4000, 7, &SearchOptions::default()).unwrap();
        for e in &res {
            assert!((e.a_f_best - 1.5).abs() <= 2.0 * e.mc_se.max(1e-12), "{e:?}");
            assert!(e.minimizer_norm() < 0.05, "{e:?}");
        }
    }

    #[test]
    fn nested_windows_are_monotone() {
        let (pot, t) = gaussian();
        let bond = BondFn::Bump { base: 1.0, amplitude: 0.8, width: 0.7 };
        let res = ahat_approx(&pot, &t, &bond, &[-0.5, 0.0, 0.5], 2, 3000, 3, &SearchOptions::default()).unwrap();
        for chunk in res.chunks(3) {
            assert!(chunk[1].a_f_best <= chunk[0].a_f_best);
            assert!(chunk[2].a_f_best <= chunk[1].a_f_best);
            let (lo, hi) = bond.bounds();
            assert!(chunk.iter().all(|e| e.a_f_best >= 0.99 * lo && e.a_f_best <= hi));
        }
    }

    #[test]
    fn table_interpolation() {
        let tab = AhatTable { y: vec![0.0, 1.0], value: vec![1.0, 2.0] };
        assert_eq!(tab.eval(0.25), 1.25);
        assert_eq!(tab.eval(-1.0), 1.0);
        assert_eq!(tab.eval(3.0), 2.0);
    }
}
