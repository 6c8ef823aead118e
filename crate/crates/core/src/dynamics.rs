//! Euler–Maruyama integrators for the conservative spin dynamics.
//!
//! All three models share one flux form. Bond i joins sites i and i+1 and
//! carries a drift flux f_i and a noise amplitude √a_i; then
//!
//!   ΔX_i = N²(f_i − f_{i−1})dt + N√(2dt)(√a_i η_i − √a_{i−1} η_{i−1}),
//!
//! which telescopes, so the mean spin is conserved up to rounding. Noise
//! variables are drawn one per bond, in bond order, so the models reduce to
//! one another bitwise on a shared stream.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homogenize::CylinderFn;
use crate::hydro::ControlFn;
use crate::lattice::{ConductanceField, GridFunction, SpinConfiguration};
use crate::potential::{FreeEnergyTable, SingleSitePotential, TiltedSampler};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Classical,
    RandomEnv,
    Nongradient,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub pot: SingleSitePotential,
    pub field: ConductanceField,
    pub n: usize,
    /// Stability fraction: dt·N²·sup a·sup ψ'' must not exceed it. For
    /// super-quadratic ψ the supremum is over the current configuration and
    /// the hard explicit limit 1/2 is used instead.
    pub c_stab: f64,
    /// Any single-step increment larger than this aborts the run.
    pub blowup: f64,
}

impl Model {
    pub fn new(kind: ModelKind, pot: SingleSitePotential, field: ConductanceField, n: usize) -> Result<Self> {
        let model = Model { kind, pot, field, n, c_stab: 0.1, blowup: 1e3 };
        model.validate()?;
        Ok(model)
    }

    pub fn classical(pot: SingleSitePotential, n: usize) -> Result<Self> {
        Self::new(ModelKind::Classical, pot, ConductanceField::unit(), n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidParameter("lattice needs at least two sites".into()));
        }
        let ok = match (&self.kind, &self.field) {
            (ModelKind::Classical, ConductanceField::Constant { value }) => *value == 1.0,
            (ModelKind::RandomEnv, ConductanceField::Constant { .. }) => true,
            (ModelKind::RandomEnv, ConductanceField::Iid { bonds, .. }) => bonds.len() == self.n,
            (ModelKind::Nongradient, ConductanceField::StateDependent { bond_fn }) => bond_fn.validate().is_ok(),
            (ModelKind::Nongradient, ConductanceField::Constant { .. }) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::InvalidParameter(format!("conductance field does not fit a {:?} model with N = {}", self.kind, self.n)));
        }
        Ok(())
    }

    /// Largest stable step for configurations with sup ψ'' ≤ `d2psi_max`.
    pub fn stable_dt(&self, d2psi_max: f64) -> f64 {
        let n2 = (self.n * self.n) as f64;
        self.c_stab / (n2 * self.field.bounds().1 * d2psi_max)
    }
}

/// Control of a tilted run: the macroscopic drift h(t, θ) evaluated at bond
/// positions θ = (i+1)/N, the effective conductance ā, and for the
/// non-gradient model the corrector ξ = Σ_i τ_i F.
#[derive(Clone, Copy)]
pub struct Tilt<'a> {
    pub h: ControlFn<'a>,
    pub abar: f64,
    pub cylinder: Option<&'a CylinderFn>,
}

/// Per-step contributions of a tilt.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepCost {
    /// (1/2N)Σ_i (flux_i²/a_i)·dt with flux_i the macroscopic control flux.
    pub cost: f64,
    /// log dP/dP̃ of the step, evaluated on the tilted noise.
    pub log_weight: f64,
}

/// Scratch buffers reused across steps.
#[derive(Clone, Debug, Default)]
pub struct Workspace {
    dpsi: Vec<f64>,
    bonds: Vec<f64>,
    flux: Vec<f64>,
    noise: Vec<f64>,
    shift: Vec<f64>,
    xi_grad: Vec<f64>,
}

impl Workspace {
    pub fn new(n: usize) -> Self {
        let z = vec![0.0; n];
        Workspace { dpsi: z.clone(), bonds: z.clone(), flux: z.clone(), noise: z.clone(), shift: z.clone(), xi_grad: z }
    }
}

fn advance<R: Rng + ?Sized>(
    x: &mut [f64],
    model: &Model,
    tilt: Option<(&Tilt<'_>, f64)>,
    dt: f64,
    rng: &mut R,
    ws: &mut Workspace,
) -> Result<StepCost> {
    let n = x.len();
    if n != model.n {
        return Err(Error::InvalidParameter(format!("state has {} sites, model {}", n, model.n)));
    }
    if ws.dpsi.len() != n {
        *ws = Workspace::new(n);
    }
    let nf = n as f64;
    let pot = &model.pot;
    // with a global bound on ψ'' the configured fraction applies; otherwise
    // only the state-wise explicit limit (fraction 1/2) can be enforced
    let limit = match pot.d2psi_bound() {
        Some(b) => model.stable_dt(b),
        None => {
            let d2 = x.iter().fold(0.0f64, |m, &v| m.max(pot.d2psi(v)));
            model.stable_dt(d2) * 0.5 / model.c_stab
        }
    };
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::UnstableStep { reason: format!("dt = {dt:e} exceeds the stability limit {limit:e}") });
    }
    for (d, &v) in ws.dpsi.iter_mut().zip(x.iter()) {
        *d = pot.dpsi(v);
    }
    match (&model.kind, &model.field) {
        (ModelKind::Classical, _) => {
            for i in 0..n {
                ws.bonds[i] = 1.0;
                ws.flux[i] = ws.dpsi[(i + 1) % n] - ws.dpsi[i];
            }
        }
        (_, ConductanceField::StateDependent { bond_fn }) => {
            // f = a(ψ'(y) − ψ'(x)) + ∂ₓa − ∂ᵧa makes the product measure reversible
            for i in 0..n {
                let ip = (i + 1) % n;
                let (a, ax, ay) = bond_fn.with_gradient(x[i], x[ip]);
                ws.bonds[i] = a;
                ws.flux[i] = a * (ws.dpsi[ip] - ws.dpsi[i]) + ax - ay;
            }
        }
        (_, field) => {
            match field {
                ConductanceField::Constant { value } => ws.bonds.iter_mut().for_each(|b| *b = *value),
                ConductanceField::Iid { bonds, .. } => ws.bonds.copy_from_slice(bonds),
                ConductanceField::StateDependent { .. } => unreachable!(),
            }
            for i in 0..n {
                ws.flux[i] = ws.bonds[i] * (ws.dpsi[(i + 1) % n] - ws.dpsi[i]);
            }
        }
    }
    for eta in ws.noise.iter_mut() {
        *eta = rng.sample(StandardNormal);
    }
    let noise_scale = nf * (2.0 * dt).sqrt();
    let mut out = StepCost::default();
    if let Some((tilt, t)) = tilt {
        // control flux c_i, expressed as a shift of the bond noise
        if let Some(f) = tilt.cylinder {
            f.corrector_gradient(x, &mut ws.xi_grad);
        }
        let mut cost = 0.0;
        for i in 0..n {
            let h = (tilt.h)(t, (i + 1) as f64 / nf);
            let flux = match tilt.cylinder {
                Some(_) => ws.bonds[i] * (1.0 - ws.xi_grad[(i + 1) % n] + ws.xi_grad[i]) * h,
                None => tilt.abar * h,
            };
            cost += flux * flux / ws.bonds[i];
            ws.shift[i] = nf * flux * dt / (noise_scale * ws.bonds[i].sqrt());
        }
        out.cost = cost * dt / (2.0 * nf);
        // drop the component along the kernel k_i = 1/√a_i of the noise map;
        // it moves no mass and would only inflate the likelihood ratio
        let (mut sk, mut kk) = (0.0, 0.0);
        for i in 0..n {
            let k = 1.0 / ws.bonds[i].sqrt();
            sk += ws.shift[i] * k;
            kk += k * k;
        }
        let proj = sk / kk;
        let mut lw = 0.0;
        for i in 0..n {
            let s = ws.shift[i] - proj / ws.bonds[i].sqrt();
            lw -= s * ws.noise[i] + 0.5 * s * s;
            ws.noise[i] += s;
        }
        out.log_weight = lw;
    }
    let n2dt = nf * nf * dt;
    let g = |i: usize, ws: &Workspace| n2dt * ws.flux[i] + noise_scale * ws.bonds[i].sqrt() * ws.noise[i];
    let last = g(n - 1, ws);
    let mut prev = last;
    for i in 0..n {
        let cur = if i == n - 1 { last } else { g(i, ws) };
        let dx = cur - prev;
        if !(dx.abs() <= model.blowup) {
            return Err(Error::UnstableStep { reason: format!("increment {dx:e} at site {i}") });
        }
        x[i] += dx;
        prev = cur;
    }
    Ok(out)
}

/// One step of the classical Ginzburg–Landau–Kawasaki dynamics.
pub fn step_classical<R: Rng + ?Sized>(x: &mut [f64], pot: &SingleSitePotential, dt: f64, rng: &mut R) -> Result<()> {
    let model = Model { kind: ModelKind::Classical, pot: pot.clone(), field: ConductanceField::unit(), n: x.len(), c_stab: 0.1, blowup: 1e3 };
    advance(x, &model, None, dt, rng, &mut Workspace::new(x.len())).map(|_| ())
}

/// One step of a model (classical, quenched conductances or non-gradient).
pub fn step<R: Rng + ?Sized>(x: &mut [f64], model: &Model, dt: f64, rng: &mut R, ws: &mut Workspace) -> Result<()> {
    advance(x, model, None, dt, rng, ws).map(|_| ())
}

/// One step of the tilted dynamics at time `t`.
pub fn step_tilted<R: Rng + ?Sized>(x: &mut [f64], model: &Model, tilt: &Tilt<'_>, t: f64, dt: f64, rng: &mut R, ws: &mut Workspace) -> Result<StepCost> {
    if tilt.cylinder.is_some() && model.kind != ModelKind::Nongradient {
        return Err(Error::InvalidParameter("a cylinder corrector only applies to the non-gradient model".into()));
    }
    advance(x, model, Some((tilt, t)), dt, rng, ws)
}

/// Independent draws x_i ~ μ^{λ_i} with λ_i = φ'(ρ̄_i), ρ̄_i the average of
/// ρ₀ over the cell of site i. The hyperplane constraint is not imposed; the
/// achieved mean is recorded instead.
pub struct LocalGibbs {
    lambdas: Vec<f64>,
    gaussian: bool,
    samplers: Vec<TiltedSampler>,
    which: Vec<usize>,
}

impl LocalGibbs {
    pub fn new(pot: &SingleSitePotential, table: &FreeEnergyTable, rho0: &GridFunction, n: usize) -> Result<Self> {
        let rho = rho0.resample(n);
        let lambdas: Vec<f64> = rho.values.iter().map(|&r| table.dphi(r)).collect::<Result<_>>()?;
        let gaussian = pot.is_gaussian();
        let mut samplers: Vec<TiltedSampler> = Vec::new();
        let mut which = Vec::with_capacity(n);
        if !gaussian {
            for &l in &lambdas {
                match samplers.iter().position(|s| s.lambda() == l) {
                    Some(p) => which.push(p),
                    None => {
                        samplers.push(TiltedSampler::new(pot, l)?);
                        which.push(samplers.len() - 1);
                    }
                }
            }
        }
        Ok(LocalGibbs { lambdas, gaussian, samplers, which })
    }

    pub fn n(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SpinConfiguration {
        let values = if self.gaussian {
            self.lambdas.iter().map(|&l| l + rng.sample::<f64, _>(StandardNormal)).collect()
        } else {
            self.which.iter().map(|&w| self.samplers[w].sample(rng)).collect()
        };
        SpinConfiguration::new(values)
    }
}

pub fn init_local_gibbs<R: Rng + ?Sized>(
    pot: &SingleSitePotential,
    table: &FreeEnergyTable,
    rho0: &GridFunction,
    n: usize,
    rng: &mut R,
) -> Result<SpinConfiguration> {
    Ok(LocalGibbs::new(pot, table, rho0, n)?.sample(rng))
}

/// Exact sample of the Gaussian product measure conditioned on mean `m`.
pub fn sample_gaussian_canonical<R: Rng + ?Sized>(n: usize, m: f64, rng: &mut R) -> SpinConfiguration {
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let zbar = z.iter().sum::<f64>() / n as f64;
    SpinConfiguration::new(z.iter().map(|v| v - zbar + m).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SpinConfiguration>,
    pub seed: u64,
    /// Accumulated (1/2N)Σ(flux²/a)dt of the tilt; zero for untilted runs.
    pub girsanov_cost: f64,
    /// log dP/dP̃ of the whole path; zero for untilted runs.
    pub log_weight: f64,
}

impl Trajectory {
    pub fn profiles(&self, m: usize) -> Vec<GridFunction> {
        self.states.iter().map(|s| crate::lattice::embed_step(s, m)).collect()
    }

    pub fn max_conservation_error(&self) -> f64 {
        let m0 = self.states[0].current_mean();
        self.states.iter().map(|s| (s.current_mean() - m0).abs()).fold(0.0, f64::max)
    }
}

/// Time grid of a run: steps of at most `dt`, landing exactly on each
/// snapshot time. The first snapshot must be 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub dt: f64,
    pub snapshot_times: Vec<f64>,
}

impl Schedule {
    pub fn uniform(t_final: f64, dt: f64, snapshots: usize) -> Self {
        let snapshot_times = (0..=snapshots).map(|k| t_final * k as f64 / snapshots as f64).collect();
        Schedule { dt, snapshot_times }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.snapshot_times;
        if t.first() != Some(&0.0) || t.windows(2).any(|w| !(w[1] > w[0])) || !(self.dt > 0.0) {
            return Err(Error::InvalidParameter("snapshot times must start at 0 and increase; dt must be positive".into()));
        }
        Ok(())
    }

    pub fn t_final(&self) -> f64 {
        *self.snapshot_times.last().unwrap()
    }
}

/// splitmix64 finalizer applied to (base, replica).
pub fn replica_seed(base: u64, replica: u64) -> u64 {
    let mut z = base ^ replica.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs one replica from the given seed.
pub fn run_replica(model: &Model, init: &LocalGibbs, schedule: &Schedule, tilt: Option<&Tilt<'_>>, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = init.sample(&mut rng);
    run_from(model, start, schedule, tilt, seed, &mut rng)
}

/// Runs from a given configuration with the caller's generator.
pub fn run_from<R: Rng + ?Sized>(
    model: &Model,
    start: SpinConfiguration,
    schedule: &Schedule,
    tilt: Option<&Tilt<'_>>,
    seed: u64,
    rng: &mut R,
) -> Result<Trajectory> {
    schedule.validate()?;
    let mut ws = Workspace::new(model.n);
    let mut x = start.values.clone();
    let mean = start.mean;
    let mut states = vec![start];
    let (mut cost, mut log_weight) = (0.0, 0.0);
    for w in schedule.snapshot_times.windows(2) {
        let steps = ((w[1] - w[0]) / schedule.dt).ceil().max(1.0) as usize;
        let dt = (w[1] - w[0]) / steps as f64;
        for s in 0..steps {
            let t = w[0] + s as f64 * dt;
            let c = advance(&mut x, model, tilt.map(|tl| (tl, t)), dt, rng, &mut ws)?;
            cost += c.cost;
            log_weight += c.log_weight;
        }
        states.push(SpinConfiguration { values: x.clone(), mean });
    }
    Ok(Trajectory { times: schedule.snapshot_times.clone(), states, seed, girsanov_cost: cost, log_weight })
}

/// Runs `replicas` independent trajectories, replica r seeded with
/// `replica_seed(base_seed, r)`, and maps each through `f` as soon as it
/// finishes. Output order is by replica index regardless of scheduling.
pub fn simulate_map<T, F>(
    model: &Model,
    init: &LocalGibbs,
    schedule: &Schedule,
    tilt: Option<&Tilt<'_>>,
    replicas: usize,
    base_seed: u64,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, Trajectory) -> Result<T> + Sync,
{
    if init.n() != model.n {
        return Err(Error::InvalidParameter("initial state and model disagree on N".into()));
    }
    (0..replicas)
        .into_par_iter()
        .map(|r| run_replica(model, init, schedule, tilt, replica_seed(base_seed, r as u64)).and_then(|tr| f(r, tr)))
        .collect()
}

pub fn simulate(
    model: &Model,
    init: &LocalGibbs,
    schedule: &Schedule,
    tilt: Option<&Tilt<'_>>,
    replicas: usize,
    base_seed: u64,
) -> Result<Vec<Trajectory>> {
    simulate_map(model, init, schedule, tilt, replicas, base_seed, |_, tr| Ok(tr))
}

pub fn write_trajectories_csv<W: Write>(ensemble: &[Trajectory], mut out: W) -> std::io::Result<()> {
    writeln!(out, "replica,time,site,value")?;
    for (r, tr) in ensemble.iter().enumerate() {
        for (t, s) in tr.times.iter().zip(&tr.states) {
            for (i, v) in s.values.iter().enumerate() {
                writeln!(out, "{r},{t},{i},{v}")?;
            }
        }
    }
    Ok(())
}

pub fn write_costs_csv<W: Write>(ensemble: &[Trajectory], mut out: W) -> std::io::Result<()> {
    writeln!(out, "replica,cost")?;
    for (r, tr) in ensemble.iter().enumerate() {
        writeln!(out, "{r},{}", tr.girsanov_cost)?;
    }
    Ok(())
}
