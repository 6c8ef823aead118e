//! Dual Sobolev norms, free energies, the two rate functions, and the
//! entropy-production estimators (Fisher information of local Gibbs states,
//! slope lower bound, control-cost identity).
//!
//! Grid functions are treated as step functions. Their antiderivative U is
//! then piecewise linear, and ‖u‖²_{H⁻¹} = ∫(U − Ū)² is integrated exactly.

use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::hydro::{solve_controlled, ControlFn, HydroOptions, SpaceTimeProfile};
use crate::lattice::{ConductanceField, GridFunction};
use crate::linalg::solve_dense;
use crate::potential::{FreeEnergyTable, SingleSitePotential, TiltedSampler};
use crate::quad;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn forward_fft(m: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(m))
}

fn check_mean_zero(u: &GridFunction) -> Result<()> {
    let mean = u.mean();
    let scale = u.values.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    if mean.abs() > 1e-10 * scale {
        return Err(Error::NotMeanZero { mean });
    }
    Ok(())
}

/// Node values U_j = ∫₀^{j/M} u of the antiderivative, j = 0..=M.
fn antiderivative(u: &[f64]) -> Vec<f64> {
    let m = u.len() as f64;
    let mut out = Vec::with_capacity(u.len() + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for &v in u {
        acc += v / m;
        out.push(acc);
    }
    out
}

/// Σ_j c_j ∫_{cell j} (U − C)², U linear on each cell.
fn weighted_square(nodes: &[f64], centre: f64, cell_weight: impl Fn(usize) -> f64) -> f64 {
    let m = (nodes.len() - 1) as f64;
    let mut s = 0.0;
    for j in 0..nodes.len() - 1 {
        let a = nodes[j] - centre;
        let b = nodes[j + 1] - centre;
        s += cell_weight(j) * (a * a + a * b + b * b) / 3.0;
    }
    s / m
}

/// Fourier form of the step-function norm: the k-th coefficient of a step
/// function carries the factor sinc²(k/M), which summed over aliases gives
/// (1 + 2cos²(πk/M)) / (12 M² sin²(πk/M)).
fn hminus1_spectral(u: &[f64]) -> f64 {
    let m = u.len();
    let mut buf: Vec<Complex<f64>> = u.iter().map(|&v| Complex::new(v, 0.0)).collect();
    forward_fft(m).process(&mut buf);
    let mf = m as f64;
    let mut s = 0.0;
    for (k, c) in buf.iter().enumerate().skip(1) {
        let x = std::f64::consts::PI * k as f64 / mf;
        let (sin, cos) = x.sin_cos();
        s += (c.norm_sqr() / (mf * mf)) * (1.0 + 2.0 * cos * cos) / (12.0 * mf * mf * sin * sin);
    }
    s
}

/// Squared H⁻¹ norm of a mean-zero grid function, cross-checked against its
/// Fourier representation.
pub fn hminus1_norm(u: &GridFunction) -> Result<f64> {
    check_mean_zero(u)?;
    let u = u.centered();
    if u.m() < 2 {
        return Ok(0.0);
    }
    let nodes = antiderivative(&u.values);
    let mean = nodes.windows(2).map(|w| w[0] + w[1]).sum::<f64>() / (2.0 * u.m() as f64);
    let primary = weighted_square(&nodes, mean, |_| 1.0);
    let spectral = hminus1_spectral(&u.values);
    let l2 = u.values.iter().map(|v| v * v).sum::<f64>() / u.m() as f64;
    if (primary - spectral).abs() > 1e-8 * primary.max(spectral) + 1e-14 * l2 {
        return Err(Error::CrossCheckFailed { primary, spectral });
    }
    Ok(primary)
}

/// sup_v 2∫uv − ∫w(v')², with `w` constant on each cell.
pub fn weighted_hminus1_norm(u: &GridFunction, w: &GridFunction) -> Result<f64> {
    check_mean_zero(u)?;
    if w.m() != u.m() {
        return Err(Error::InvalidParameter("weight and function live on different grids".into()));
    }
    if w.values.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::SolverSingular);
    }
    let u = u.centered();
    let nodes = antiderivative(&u.values);
    // optimal v' = (C − U)/w, with C fixed by periodicity of v
    let inv_sum: f64 = w.values.iter().map(|x| 1.0 / x).sum();
    let weighted: f64 = nodes.windows(2).zip(&w.values).map(|(n, x)| 0.5 * (n[0] + n[1]) / x).sum();
    let centre = weighted / inv_sum;
    Ok(weighted_square(&nodes, centre, |j| 1.0 / w.values[j]))
}

/// ∫φ(ρ) − φ(∫ρ).
pub fn macro_free_energy(table: &FreeEnergyTable, rho: &GridFunction) -> Result<f64> {
    let mut s = 0.0;
    for &v in &rho.values {
        s += table.phi(v)?;
    }
    Ok(s / rho.m() as f64 - table.phi(rho.mean())?)
}

/// ∫φ(ρ) − φ(m₀) − φ'(m₀)(ρ − m₀), the Bregman divergence of φ.
pub fn initial_term(table: &FreeEnergyTable, rho: &GridFunction, m0: &GridFunction) -> Result<f64> {
    let m0 = if m0.m() == rho.m() { m0.clone() } else { m0.resample(rho.m()) };
    let mut s = 0.0;
    for (&r, &m) in rho.values.iter().zip(&m0.values) {
        s += table.phi(r)? - table.phi(m)? - table.dphi(m)? * (r - m);
    }
    Ok((s / rho.m() as f64).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub initial_term: f64,
    pub kinetic_term: f64,
    pub total: f64,
    /// Kinetic integrand at each snapshot time.
    pub per_time: Vec<f64>,
}

/// ∂ρ/∂t on the stored time grid: three-point central differences inside,
/// second-order one-sided differences at the ends.
pub fn time_derivative(rho: &SpaceTimeProfile) -> Result<Vec<GridFunction>> {
    let t = &rho.times;
    let n = t.len();
    if n < 2 {
        return Err(Error::InvalidParameter("time derivative needs at least two snapshots".into()));
    }
    let m = rho.m();
    let v = &rho.values;
    let combine = |idx: [usize; 3], w: [f64; 3]| {
        GridFunction::new((0..m).map(|j| w[0] * v[idx[0]].values[j] + w[1] * v[idx[1]].values[j] + w[2] * v[idx[2]].values[j]).collect())
    };
    // derivative at t[at] of the quadratic through three nodes
    let lagrange = |i: [usize; 3], at: usize| {
        let (a, b, c) = (t[i[0]], t[i[1]], t[i[2]]);
        let x = t[at];
        [
            ((x - b) + (x - c)) / ((a - b) * (a - c)),
            ((x - a) + (x - c)) / ((b - a) * (b - c)),
            ((x - a) + (x - b)) / ((c - a) * (c - b)),
        ]
    };
    let mut out = Vec::with_capacity(n);
    if n == 2 {
        let d = 1.0 / (t[1] - t[0]);
        let g = GridFunction::new((0..m).map(|j| d * (v[1].values[j] - v[0].values[j])).collect());
        return Ok(vec![g.clone(), g]);
    }
    for k in 0..n {
        let idx = if k == 0 {
            [0, 1, 2]
        } else if k == n - 1 {
            [n - 3, n - 2, n - 1]
        } else {
            [k - 1, k, k + 1]
        };
        out.push(combine(idx, lagrange(idx, k)));
    }
    Ok(out)
}

fn trapezoid(t: &[f64], f: &[f64]) -> f64 {
    t.windows(2).zip(f.windows(2)).map(|(t, f)| 0.5 * (t[1] - t[0]) * (f[0] + f[1])).sum()
}

/// M(F_{j+½} − F_{j−½}) with F_{j+½} = c_{j+½}·M(w_{j+1} − w_j), w = φ'(ρ).
fn discrete_flux_divergence(table: &FreeEnergyTable, rho: &GridFunction, coeff: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let m = rho.m();
    let mf = m as f64;
    let w: Vec<f64> = rho.values.iter().map(|&r| table.dphi(r)).collect::<Result<_>>()?;
    let flux: Vec<f64> = (0..m)
        .map(|j| {
            let jp = (j + 1) % m;
            coeff(0.5 * (rho.values[j] + rho.values[jp])) * mf * (w[jp] - w[j])
        })
        .collect();
    Ok((0..m).map(|j| mf * (flux[j] - flux[(j + m - 1) % m])).collect())
}

fn rate_impl(
    table: &FreeEnergyTable,
    m0: &GridFunction,
    rho: &SpaceTimeProfile,
    coeff: &dyn Fn(f64) -> f64,
    norm: &dyn Fn(&GridFunction, &GridFunction) -> Result<f64>,
) -> Result<RateReport> {
    let init = initial_term(table, rho.initial(), m0)?;
    let dot = time_derivative(rho)?;
    let mut per_time = Vec::with_capacity(rho.times.len());
    for (d, r) in dot.iter().zip(&rho.values) {
        let drift = discrete_flux_divergence(table, r, coeff)?;
        let residual = GridFunction::new(d.values.iter().zip(&drift).map(|(a, b)| a - b).collect()).centered();
        per_time.push(0.25 * norm(&residual, r)?);
    }
    let kinetic = trapezoid(&rho.times, &per_time);
    Ok(RateReport { initial_term: init, kinetic_term: kinetic, total: init + kinetic, per_time })
}

/// Rate of a space-time profile for the random-environment model:
/// initial Bregman term + (1/4ā)∫‖∂ρ/∂t − ā∂²θφ'(ρ)‖²_{H⁻¹}dt.
pub fn rate_random_env(table: &FreeEnergyTable, abar: f64, m0: &GridFunction, rho: &SpaceTimeProfile) -> Result<RateReport> {
    if !(abar > 0.0) {
        return Err(Error::InvalidParameter("abar must be positive".into()));
    }
    rate_impl(table, m0, rho, &|_| abar, &|r, _| Ok(hminus1_norm(r)? / abar))
}

/// Rate for the non-gradient model, with the â(ρ)-weighted dual norm.
pub fn rate_nongradient(table: &FreeEnergyTable, ahat: &dyn Fn(f64) -> f64, m0: &GridFunction, rho: &SpaceTimeProfile) -> Result<RateReport> {
    rate_impl(table, m0, rho, ahat, &|r, profile| {
        let w = GridFunction::new(profile.values.iter().map(|&y| ahat(y)).collect());
        weighted_hminus1_norm(r, &w)
    })
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub se: f64,
}

/// Normalized entropy production g(ν)²/N of the local Gibbs state with
/// profile `rho` on N sites.
///
/// For ν ∝ exp(Σλ_i x_i − Σψ(x_i)) the vector ∇ν/ν + ∇H equals λ, so the
/// quadratic form is Σ N² a_i (λ_{i+1} − λ_i)². It is random only when the
/// conductances depend on the configuration; otherwise the exact value is
/// returned with zero standard error. For a quenched i.i.d. field the value
/// tends to E[a]∫(∂θφ'(ρ))², the arithmetic and not the harmonic mean: the
/// uncorrected local Gibbs state only bounds the slope from above.
#[allow(clippy::too_many_arguments)]
pub fn fisher_mc<R: Rng + ?Sized>(
    pot: &SingleSitePotential,
    table: &FreeEnergyTable,
    rho: &dyn Fn(f64) -> f64,
    n: usize,
    field: &ConductanceField,
    samples: usize,
    max_rel_se: f64,
    rng: &mut R,
) -> Result<McEstimate> {
    let lambda: Vec<f64> = (0..n).map(|i| table.dphi(rho(GridFunction::center(n, i)))).collect::<Result<_>>()?;
    let n2 = (n * n) as f64;
    let grad2: Vec<f64> = (0..n).map(|i| n2 * (lambda[(i + 1) % n] - lambda[i]).powi(2)).collect();
    let form = |a: &[f64]| a.iter().zip(&grad2).map(|(a, g)| a * g).sum::<f64>() / n as f64;
    if !matches!(field, ConductanceField::StateDependent { .. }) {
        return Ok(McEstimate { value: form(&field.bonds(n, None)), se: 0.0 });
    }
    if samples < 2 {
        return Err(Error::InvalidParameter("fisher_mc needs at least two samples".into()));
    }
    let mut samplers: Vec<(f64, TiltedSampler)> = Vec::new();
    let mut which = Vec::with_capacity(n);
    for &l in &lambda {
        let pos = samplers.iter().position(|(x, _)| *x == l);
        which.push(match pos {
            Some(p) => p,
            None => {
                samplers.push((l, TiltedSampler::new(pot, l)?));
                samplers.len() - 1
            }
        });
    }
    let mut x = vec![0.0; n];
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        for i in 0..n {
            x[i] = samplers[which[i]].1.sample(rng);
        }
        let v = form(&field.bonds(n, Some(&x)));
        s1 += v;
        s2 += v * v;
    }
    let k = samples as f64;
    let mean = s1 / k;
    let se = ((s2 / k - mean * mean).max(0.0) / (k - 1.0)).sqrt();
    if mean.abs() > 0.0 && se / mean.abs() > max_rel_se {
        return Err(Error::McVarianceTooHigh { rel_se: se / mean.abs(), limit: max_rel_se });
    }
    Ok(McEstimate { value: mean, se })
}

/// Test potential J(t, θ) for the linear-readout slope bound.
pub type TestFn<'a> = &'a dyn Fn(f64, f64) -> f64;

/// Per-interval ingredients shared by the slope estimators: for each test
/// function, the linear term b = (1/N)Σ_k⟨G(t_{k+½}), ΔX̄_k⟩ and the quadratic
/// cross terms Q_{lm} = (1/N)Σ_k Δt_k E⟨A∇V_l, ∇V_m⟩.
fn slope_terms(ensemble: &[Trajectory], test_fns: &[TestFn<'_>], field: &ConductanceField, abar: Option<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = ensemble.first().ok_or_else(|| Error::InvalidParameter("empty ensemble".into()))?;
    let times = &first.times;
    let n = first.states[0].n();
    let nf = n as f64;
    let n2 = nf * nf;
    let l = test_fns.len();
    if ensemble.iter().any(|tr| tr.times != *times) {
        return Err(Error::InvalidParameter("ensemble members use different snapshot times".into()));
    }
    let reps = ensemble.len() as f64;
    let mean_state = |k: usize| -> Vec<f64> {
        let mut s = vec![0.0; n];
        for tr in ensemble {
            for (a, b) in s.iter_mut().zip(&tr.states[k].values) {
                *a += b;
            }
        }
        s.iter().map(|v| v / reps).collect()
    };
    let static_bonds = match field {
        ConductanceField::StateDependent { .. } => None,
        _ => Some(field.bonds(n, None)),
    };
    // bond gradients of V = Σ G_i x_i; for quenched fields the increments are
    // reweighted by ā/a_i and re-centred so that G stays periodic
    let bond_gradients = |t: f64, j: TestFn<'_>| -> Vec<f64> {
        let vals: Vec<f64> = (0..n).map(|i| j(t, GridFunction::center(n, i))).collect();
        let mut d: Vec<f64> = (0..n).map(|i| vals[(i + 1) % n] - vals[i]).collect();
        if let (Some(ab), ConductanceField::Iid { bonds, .. }) = (abar, field) {
            for (di, a) in d.iter_mut().zip(bonds) {
                *di *= ab / a;
            }
            let c = d.iter().sum::<f64>() / nf;
            for di in &mut d {
                *di -= c;
            }
        }
        d
    };
    let expected_bonds = |k: usize| -> Vec<f64> {
        match &static_bonds {
            Some(b) => b.clone(),
            None => {
                let mut s = vec![0.0; n];
                for tr in ensemble {
                    for (a, b) in s.iter_mut().zip(field.bonds(n, Some(&tr.states[k].values))) {
                        *a += b;
                    }
                }
                s.iter().map(|v| v / reps).collect()
            }
        }
    };
    let mut b = vec![0.0; l];
    let mut q = vec![0.0; l * l];
    let mut prev_mean = mean_state(0);
    let mut prev_bonds = expected_bonds(0);
    for k in 0..times.len() - 1 {
        let dt = times[k + 1] - times[k];
        let tm = 0.5 * (times[k] + times[k + 1]);
        let next_mean = mean_state(k + 1);
        let next_bonds = expected_bonds(k + 1);
        let bonds: Vec<f64> = prev_bonds.iter().zip(&next_bonds).map(|(a, c)| 0.5 * (a + c)).collect();
        let grads: Vec<Vec<f64>> = test_fns.iter().map(|j| bond_gradients(tm, *j)).collect();
        for (li, j) in test_fns.iter().enumerate() {
            // site values reconstructed from the (possibly reweighted) increments
            let mut g = Vec::with_capacity(n);
            let mut acc = j(tm, GridFunction::center(n, 0));
            for i in 0..n {
                g.push(acc);
                acc += grads[li][i];
            }
            b[li] += g.iter().enumerate().map(|(i, gi)| gi * (next_mean[i] - prev_mean[i])).sum::<f64>() / nf;
            for mi in 0..=li {
                let s: f64 = (0..n).map(|i| n2 * bonds[i] * grads[li][i] * grads[mi][i]).sum::<f64>() * dt / nf;
                q[li * l + mi] += s;
                if mi != li {
                    q[mi * l + li] += s;
                }
            }
        }
        prev_mean = next_mean;
        prev_bonds = next_bonds;
    }
    Ok((b, q))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeBound {
    pub value: f64,
    pub best_index: usize,
    pub per_fn: Vec<f64>,
}

/// max over the supplied test functions of
/// (1/N)[2Σ_k⟨G(t_{k+½}), X̄(t_{k+1}) − X̄(t_k)⟩ − Σ_k Δt_k E⟨A∇V, ∇V⟩],
/// a lower bound on ∫|ν̇|² (normalized by N) for the ensemble's marginals.
///
/// With `abar` given and a quenched field, the readout increments are
/// reweighted by ā/a_i.
pub fn slope_lower_bound(ensemble: &[Trajectory], test_fns: &[TestFn<'_>], field: &ConductanceField, abar: Option<f64>) -> Result<SlopeBound> {
    if test_fns.is_empty() {
        return Err(Error::InvalidParameter("no test functions supplied".into()));
    }
    let (b, q) = slope_terms(ensemble, test_fns, field, abar)?;
    let l = b.len();
    let per_fn: Vec<f64> = (0..l).map(|i| 2.0 * b[i] - q[i * l + i]).collect();
    let (best_index, value) = per_fn.iter().cloned().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    Ok(SlopeBound { value, best_index, per_fn })
}

/// Supremum of the slope expression over the linear span of the test
/// functions, bᵀQ⁻¹b. Directions with vanishing quadratic cost are dropped.
pub fn slope_lower_bound_span(ensemble: &[Trajectory], basis: &[TestFn<'_>], field: &ConductanceField, abar: Option<f64>) -> Result<f64> {
    let (b, q) = slope_terms(ensemble, basis, field, abar)?;
    let l = b.len();
    let trace: f64 = (0..l).map(|i| q[i * l + i]).sum();
    let keep: Vec<usize> = (0..l).filter(|&i| q[i * l + i] > 1e-13 * trace).collect();
    let k = keep.len();
    if k == 0 {
        return Ok(0.0);
    }
    let mut qq = vec![0.0; k * k];
    for (a, &i) in keep.iter().enumerate() {
        for (c, &j) in keep.iter().enumerate() {
            qq[a * k + c] = q[i * l + j];
        }
        qq[a * k + a] += 1e-12 * trace;
    }
    let bb: Vec<f64> = keep.iter().map(|&i| b[i]).collect();
    let c = solve_dense(&qq, &bb)?;
    Ok(c.iter().zip(&bb).map(|(x, y)| x * y).sum::<f64>().max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GirsanovCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub reldiff: f64,
}

/// Compares (1/2)∫∫ā h̃² (h̃ = h minus its spatial mean) with twice the
/// kinetic rate term of the controlled flow ∂ρ/∂t = ā∂θ(h + ∂θφ'(ρ)).
pub fn girsanov_identity_check(
    h: ControlFn<'_>,
    abar: f64,
    table: &FreeEnergyTable,
    rho0: &GridFunction,
    opts: &HydroOptions,
) -> Result<GirsanovCheck> {
    const QN: usize = 4096;
    let spatial = |t: f64| {
        let vals: Vec<f64> = (0..QN).map(|j| h(t, (j as f64 + 0.5) / QN as f64)).collect();
        let mean = vals.iter().sum::<f64>() / QN as f64;
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / QN as f64
    };
    let lhs = 0.5 * abar * quad::integrate_scalar(spatial, 0.0, opts.t_final, 1e-10);
    let flow = solve_controlled(table, abar, rho0, h, opts)?;
    let rhs = 2.0 * rate_random_env(table, abar, rho0, &flow)?.kinetic_term;
    let scale = lhs.abs().max(rhs.abs());
    let reldiff = if scale == 0.0 { 0.0 } else { (lhs - rhs).abs() / scale };
    Ok(GirsanovCheck { lhs, rhs, reldiff })
}
