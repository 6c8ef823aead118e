//! Monte Carlo deviation experiments: direct tube-probability estimates,
//! importance sampling through the tilted dynamics, normalized log-probability
//! curves, and local-averaging diagnostics.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate_map, LocalGibbs, Model, Schedule, Tilt, Trajectory};
use crate::error::{Error, Result};
use crate::hydro::SpaceTimeProfile;
use crate::lattice::{linf_hminus1_distance_centered, GridFunction, SpinConfiguration};
use crate::potential::{FreeEnergyTable, SingleSitePotential, TiltedSampler};

/// Trajectories staying within `radius` of `target` (in the snapshot
/// L^∞(H⁻¹) distance) at every snapshot time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationEvent {
    pub target: SpaceTimeProfile,
    pub radius: f64,
}

impl DeviationEvent {
    pub fn new(target: SpaceTimeProfile, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidParameter("tube radius must be positive".into()));
        }
        Ok(DeviationEvent { target, radius })
    }
}

/// Mean offsets allowed between a trajectory and the target. Local Gibbs
/// starts are not conditioned on the mean, so the offset is O(N^{−1/2}); it
/// must however stay constant in time.
const OFFSET_DRIFT_TOL: f64 = 1e-9;

/// Distance of one trajectory to the target; fails if conservation broke.
pub fn tube_distance(tr: &Trajectory, target: &SpaceTimeProfile) -> Result<f64> {
    if tr.max_conservation_error() > OFFSET_DRIFT_TOL {
        return Err(Error::UnstableStep { reason: format!("conservation audit failed for seed {}", tr.seed) });
    }
    if tr.times.len() != target.times.len() || tr.times.iter().zip(&target.times).any(|(a, b)| (a - b).abs() > 1e-12) {
        return Err(Error::InvalidParameter("trajectory and target use different snapshot times".into()));
    }
    let profiles = tr.profiles(target.m());
    linf_hminus1_distance_centered(&profiles, target, OFFSET_DRIFT_TOL)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeEstimate {
    pub n: usize,
    pub replicas: usize,
    pub hits: usize,
    pub p_hat: f64,
    pub se: f64,
    pub base_seed: u64,
    /// Per-replica distances to the target, in replica order.
    pub distances: Vec<f64>,
}

impl TubeEstimate {
    /// Re-evaluates the estimate for another radius on the same trajectories.
    pub fn with_radius(&self, radius: f64) -> TubeEstimate {
        let hits = self.distances.iter().filter(|&&d| d <= radius).count();
        let r = self.replicas as f64;
        let p = hits as f64 / r;
        TubeEstimate { hits, p_hat: p, se: (p * (1.0 - p) / r).sqrt(), ..self.clone() }
    }

    pub fn median_distance(&self) -> f64 {
        median(&self.distances)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Everything needed to run the untilted model at a given lattice size.
pub struct Experiment<'a> {
    pub pot: &'a SingleSitePotential,
    pub table: &'a FreeEnergyTable,
    /// Builds the model (and its environment) for a lattice of N sites.
    pub model: &'a (dyn Fn(usize) -> Result<Model> + Sync),
    /// Initial macroscopic profile m₀.
    pub m0: &'a GridFunction,
    /// Largest time step, as a fraction of the model's stability limit.
    pub dt_fraction: f64,
}

impl Experiment<'_> {
    fn schedule(&self, model: &Model, target: &SpaceTimeProfile) -> Schedule {
        let d2 = model.pot.d2psi_bound().unwrap_or_else(|| self.table.max_d2phi().max(1.0));
        Schedule { dt: self.dt_fraction * model.stable_dt(d2), snapshot_times: target.times.clone() }
    }
}

/// Direct frequency estimate of the tube event for each N.
pub fn estimate_tube_probability(exp: &Experiment<'_>, event: &DeviationEvent, n_list: &[usize], replicas: usize, base_seed: u64) -> Result<Vec<TubeEstimate>> {
    let mut out = Vec::with_capacity(n_list.len());
    for (idx, &n) in n_list.iter().enumerate() {
        let model = (exp.model)(n)?;
        let init = LocalGibbs::new(exp.pot, exp.table, exp.m0, n)?;
        let schedule = exp.schedule(&model, &event.target);
        let seed = base_seed.wrapping_add(idx as u64);
        let distances = simulate_map(&model, &init, &schedule, None, replicas, seed, |_, tr| tube_distance(&tr, &event.target))?;
        let est = TubeEstimate { n, replicas, hits: 0, p_hat: 0.0, se: 0.0, base_seed: seed, distances };
        out.push(est.with_radius(event.radius));
    }
    Ok(out)
}

/// Default tube radius: three times the median tracking distance.
pub fn calibrate_radius(pilot: &TubeEstimate) -> f64 {
    3.0 * pilot.median_distance()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltedEstimate {
    pub n: usize,
    pub replicas: usize,
    pub hits: usize,
    /// Importance-sampling estimate of the tube probability under the
    /// untilted dynamics started from local Gibbs at m₀.
    pub p_hat: f64,
    pub se: f64,
    /// Effective sample size (Σw)²/Σw² over all replicas.
    pub ess: f64,
    /// Mean of log dP̃/dP for the path part, divided by N.
    pub mean_path_cost: f64,
    /// Mean of log dP̃₀/dP₀ for the initial law, divided by N.
    pub mean_initial_cost: f64,
    /// Mean of the accumulated quadratic control cost (already normalized by N).
    pub mean_girsanov_cost: f64,
    /// Mean over replicas of the distance to the target.
    pub mean_distance: f64,
    /// Ensemble-mean profile at the snapshot times, on the target grid.
    pub mean_path: Vec<GridFunction>,
    pub base_seed: u64,
}

/// log of the μ^λ density ratio, Σ_i (λ_i − λ'_i)x_i − Λ(λ_i) + Λ(λ'_i).
fn initial_log_ratio(pot: &SingleSitePotential, from: &[f64], to: &[f64], x: &SpinConfiguration, cache: &mut Vec<(f64, f64)>) -> Result<f64> {
    let mut lp = |l: f64| -> Result<f64> {
        if let Some(&(_, v)) = cache.iter().find(|(k, _)| *k == l) {
            return Ok(v);
        }
        let v = pot.log_partition(l)?;
        cache.push((l, v));
        Ok(v)
    };
    let mut s = 0.0;
    for ((&a, &b), &xi) in from.iter().zip(to).zip(&x.values) {
        s += (a - b) * xi - lp(a)? + lp(b)?;
    }
    Ok(s)
}

/// Importance-sampling estimate of the tube probability: replicas start from
/// local Gibbs at the target's initial profile and follow the dynamics tilted
/// by `h`; each is weighted by dP/dP̃ (initial law and path).
#[allow(clippy::too_many_arguments)]
pub fn tilted_estimate(
    exp: &Experiment<'_>,
    h: crate::hydro::ControlFn<'_>,
    abar: f64,
    event: &DeviationEvent,
    n: usize,
    replicas: usize,
    base_seed: u64,
    min_ess: f64,
) -> Result<TiltedEstimate> {
    let model = (exp.model)(n)?;
    let untilted = LocalGibbs::new(exp.pot, exp.table, exp.m0, n)?;
    let tilted = LocalGibbs::new(exp.pot, exp.table, event.target.initial(), n)?;
    let schedule = exp.schedule(&model, &event.target);
    let tilt = Tilt { h, abar, cylinder: None };
    let m = event.target.m();
    let rows = simulate_map(&model, &tilted, &schedule, Some(&tilt), replicas, base_seed, |_, tr| {
        let d = tube_distance(&tr, &event.target)?;
        let mut cache = Vec::new();
        // log dP₀/dP̃₀ evaluated at the tilted start
        let init_lr = initial_log_ratio(exp.pot, untilted.lambdas(), tilted.lambdas(), &tr.states[0], &mut cache)?;
        Ok((d, init_lr, tr.log_weight, tr.girsanov_cost, tr.profiles(m)))
    })?;
    let nf = n as f64;
    let r = replicas as f64;
    let log_w: Vec<f64> = rows.iter().map(|(_, i, p, _, _)| i + p).collect();
    let shift = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - shift).exp()).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|x| x * x).sum();
    let ess = sw * sw / sw2;
    let hit: Vec<f64> = rows.iter().zip(&w).map(|((d, ..), wi)| if *d <= event.radius { *wi } else { 0.0 }).collect();
    let scale = shift.exp();
    let mean_hit = hit.iter().sum::<f64>() / r;
    let var = hit.iter().map(|x| (x - mean_hit).powi(2)).sum::<f64>() / (r - 1.0).max(1.0);
    let p_hat = mean_hit * scale;
    let se = (var / r).sqrt() * scale;
    let hits = rows.iter().filter(|(d, ..)| *d <= event.radius).count();
    let mut mean_path = vec![GridFunction::constant(m, 0.0); event.target.times.len()];
    for (.., prof) in &rows {
        for (acc, g) in mean_path.iter_mut().zip(prof) {
            for (a, v) in acc.values.iter_mut().zip(&g.values) {
                *a += v / r;
            }
        }
    }
    let est = TiltedEstimate {
        n,
        replicas,
        hits,
        p_hat,
        se,
        ess,
        mean_path_cost: -rows.iter().map(|(_, _, p, _, _)| p).sum::<f64>() / (r * nf),
        mean_initial_cost: -rows.iter().map(|(_, i, ..)| i).sum::<f64>() / (r * nf),
        mean_girsanov_cost: rows.iter().map(|(_, _, _, c, _)| c).sum::<f64>() / r,
        mean_distance: rows.iter().map(|(d, ..)| d).sum::<f64>() / r,
        mean_path,
        base_seed,
    };
    if ess < min_ess {
        return Err(Error::WeightDegeneracy { ess, threshold: min_ess });
    }
    Ok(est)
}

/// Control keeping the frozen profile ρ(θ) stationary: h = −∂θφ'(ρ), taken
/// by central differences on the face grid of `rho`, then mean-zero.
pub fn frozen_control(table: &FreeEnergyTable, rho: &GridFunction) -> Result<FaceControl> {
    let target = SpaceTimeProfile::frozen(rho, vec![0.0, 1.0]);
    control_from_target(table, 1.0, &target)
}

/// Face values h_{j+½} at θ = (j+1)/M and snapshot times, interpolated
/// linearly in both variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceControl {
    pub times: Vec<f64>,
    pub faces: Vec<Vec<f64>>,
}

impl FaceControl {
    pub fn eval(&self, t: f64, theta: f64) -> f64 {
        let k = match self.times.len() {
            1 => return self.eval_space(0, theta),
            _ => self.times.partition_point(|&s| s <= t).clamp(1, self.times.len() - 1) - 1,
        };
        let w = ((t - self.times[k]) / (self.times[k + 1] - self.times[k])).clamp(0.0, 1.0);
        (1.0 - w) * self.eval_space(k, theta) + w * self.eval_space(k + 1, theta)
    }

    fn eval_space(&self, k: usize, theta: f64) -> f64 {
        let f = &self.faces[k];
        let m = f.len();
        // face j sits at (j+1)/M; shift so that position s = θM − 1 indexes faces
        let s = (theta * m as f64 - 1.0).rem_euclid(m as f64);
        let j = (s.floor() as usize).min(m - 1);
        let w = s - j as f64;
        (1.0 - w) * f[j] + w * f[(j + 1) % m]
    }
}

/// Solves ∂ρ/∂t = ā∂θ(h + ∂θφ'(ρ)) for h given ρ: h = U/ā − ∂θφ'(ρ), with U
/// the antiderivative of ∂ρ/∂t, normalized to spatial mean zero.
pub fn control_from_target(table: &FreeEnergyTable, abar: f64, target: &SpaceTimeProfile) -> Result<FaceControl> {
    let dot = crate::functionals::time_derivative(target)?;
    let m = target.m();
    let mf = m as f64;
    let mut faces = Vec::with_capacity(target.times.len());
    for (d, rho) in dot.iter().zip(&target.values) {
        let d = d.centered();
        let w: Vec<f64> = rho.values.iter().map(|&r| table.dphi(r)).collect::<Result<_>>()?;
        let mut u = 0.0;
        let mut h: Vec<f64> = (0..m)
            .map(|j| {
                u += d.values[j] / mf;
                u / abar - mf * (w[(j + 1) % m] - w[j])
            })
            .collect();
        let mean = h.iter().sum::<f64>() / mf;
        h.iter_mut().for_each(|v| *v -= mean);
        faces.push(h);
    }
    Ok(FaceControl { times: target.times.clone(), faces })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: usize,
    pub value: f64,
    pub se: f64,
}

/// −log(p̂)/N with a delta-method band se(p̂)/(p̂N).
pub fn empirical_rate_curve(results: &[(usize, f64, f64)]) -> Result<Vec<RatePoint>> {
    results
        .iter()
        .map(|&(n, p, se)| {
            if !(p > 0.0) {
                return Err(Error::ZeroHits { n });
            }
            let nf = n as f64;
            Ok(RatePoint { n, value: -p.ln() / nf + 0.0, se: se / (p * nf) })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalAverage {
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    pub diff: f64,
    pub combined_se: f64,
}

/// Observable F(x_{i−k..i+k}) on a window of 2k+1 sites.
pub struct LocalObservable<'a> {
    pub k: usize,
    pub f: &'a (dyn Fn(&[f64]) -> f64 + Sync),
}

/// Compares the ensemble average of (1/N)Σ_i J(θ_i)F(x_{i−k..i+k}) with
/// ∫J(θ)F̃(ρ(θ))dθ, where F̃(y) is the expectation of F under the product of
/// μ^{φ'(y)}. The right side uses a midpoint rule on `quad_points` cells
/// and `samples` windows per cell.
#[allow(clippy::too_many_arguments)]
pub fn local_average_check<R: Rng + ?Sized>(
    ensemble: &[SpinConfiguration],
    j: &dyn Fn(f64) -> f64,
    obs: &LocalObservable<'_>,
    pot: &SingleSitePotential,
    table: &FreeEnergyTable,
    rho_ref: &dyn Fn(f64) -> f64,
    quad_points: usize,
    samples: usize,
    max_se: f64,
    rng: &mut R,
) -> Result<LocalAverage> {
    if ensemble.len() < 2 || samples < 2 || quad_points == 0 {
        return Err(Error::InvalidParameter("local averaging needs ≥ 2 replicas, ≥ 2 samples and ≥ 1 quadrature point".into()));
    }
    let w = 2 * obs.k + 1;
    let mut window = vec![0.0; w];
    let per_replica: Vec<f64> = ensemble
        .iter()
        .map(|s| {
            let n = s.n();
            let mut acc = 0.0;
            for i in 0..n {
                for (l, slot) in window.iter_mut().enumerate() {
                    *slot = s.values[(i + n + l - obs.k) % n];
                }
                acc += j(GridFunction::center(n, i)) * (obs.f)(&window);
            }
            acc / n as f64
        })
        .collect();
    let (lhs, lhs_se) = mean_se(&per_replica);
    let (mut rhs, mut var) = (0.0, 0.0);
    let q = quad_points as f64;
    for c in 0..quad_points {
        let theta = (c as f64 + 0.5) / q;
        let lambda = table.dphi(rho_ref(theta))?;
        let sampler = if pot.is_gaussian() { None } else { Some(TiltedSampler::new(pot, lambda)?) };
        let vals: Vec<f64> = (0..samples)
            .map(|_| {
                for slot in window.iter_mut() {
                    *slot = match &sampler {
                        None => lambda + rng.sample::<f64, _>(StandardNormal),
                        Some(s) => s.sample(rng),
                    };
                }
                (obs.f)(&window)
            })
            .collect();
        let (m, se) = mean_se(&vals);
        let jt = j(theta);
        rhs += jt * m / q;
        var += (jt * se / q).powi(2);
    }
    let rhs_se = var.sqrt();
    let combined_se = (lhs_se * lhs_se + var).sqrt();
    if combined_se > max_se {
        return Err(Error::McVarianceTooHigh { rel_se: combined_se, limit: max_se });
    }
    Ok(LocalAverage { lhs, lhs_se, rhs, rhs_se, diff: lhs - rhs, combined_se })
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
