//! JSON experiment configuration and its resolution into solver inputs.
//!
//! Every block except `potential` has defaults, so a config file only needs
//! the parts used by the subcommand being run.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{replica_seed, Model, ModelKind};
use crate::error::{Error, Result};
use crate::homogenize::{abar, abar_uniform, SearchOptions};
use crate::lattice::{BondFn, ConductanceField, GridFunction};
use crate::potential::{FreeEnergyTable, PotentialSpec, SingleSitePotential};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub potential: PotentialSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub free_energy: TableConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub initial_profile: ProfileSpec,
    /// Control h(t, θ) for the controlled PDE and the tilted dynamics.
    #[serde(default)]
    pub control: ControlSpec,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub homogenize: HomogenizeConfig,
    #[serde(default)]
    pub ldp: LdpConfig,
}

fn default_seed() -> u64 {
    1
}

fn default_replicas() -> usize {
    16
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n: usize,
    pub conductance: ConductanceSpec,
    pub c_stab: f64,
    /// Non-gradient effective coefficient â, used by `hydro` and `rate`.
    pub ahat: Option<AhatSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { kind: ModelKind::Classical, n: 64, conductance: ConductanceSpec::Constant { value: 1.0 }, c_stab: 0.1, ahat: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConductanceSpec {
    Constant { value: f64 },
    /// i.i.d. uniform on [lo, hi], drawn from the environment seed.
    Uniform { lo: f64, hi: f64, env_seed: Option<u64> },
    /// Explicit per-bond values; their number must equal N.
    Bonds { values: Vec<f64> },
    StateDependent { bond_fn: BondFn },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AhatSpec {
    Constant { value: f64 },
    /// Piecewise-linear table (y, â) as written by `homogenize`.
    Table { y: Vec<f64>, value: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableConfig {
    pub y_min: f64,
    pub y_max: f64,
    pub n_grid: usize,
}

impl Default for TableConfig {
    fn default() -> Self {
        TableConfig { y_min: -3.0, y_max: 3.0, n_grid: 121 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Cells of the macroscopic grid.
    pub m: usize,
    pub t_final: f64,
    /// Largest PDE time step; defaults to half the explicit limit.
    pub dt_pde: Option<f64>,
    /// Largest SDE step; defaults to the model's stability limit.
    pub dt_sde: Option<f64>,
    /// Number of snapshot intervals on [0, T].
    pub snapshots: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { m: 128, t_final: 0.1, dt_pde: None, dt_sde: None, snapshots: 20 }
    }
}

impl GridConfig {
    pub fn snapshot_times(&self) -> Vec<f64> {
        (0..=self.snapshots).map(|k| self.t_final * k as f64 / self.snapshots as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileSpec {
    Constant { mean: f64 },
    /// mean + amplitude·cos(2π·mode·θ)
    Cosine { mean: f64, amplitude: f64, mode: u32 },
    /// mean + amplitude·sin(2π·mode·θ)
    Sine { mean: f64, amplitude: f64, mode: u32 },
    /// CSV with columns theta,value (cell averages, uniform grid).
    Csv { path: PathBuf },
}

impl Default for ProfileSpec {
    fn default() -> Self {
        ProfileSpec::Constant { mean: 0.0 }
    }
}

impl ProfileSpec {
    /// Profile as a function of θ; CSV profiles are piecewise constant.
    pub fn resolve(&self, base: &Path, m: usize) -> Result<GridFunction> {
        Ok(match self {
            ProfileSpec::Constant { mean } => GridFunction::constant(m, *mean),
            ProfileSpec::Cosine { mean, amplitude, mode } => {
                GridFunction::from_fn(m, |x| mean + amplitude * (2.0 * PI * *mode as f64 * x).cos())
            }
            ProfileSpec::Sine { mean, amplitude, mode } => {
                GridFunction::from_fn(m, |x| mean + amplitude * (2.0 * PI * *mode as f64 * x).sin())
            }
            ProfileSpec::Csv { path } => {
                let text = std::fs::read_to_string(base.join(path)).map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?;
                let mut values = Vec::new();
                for (i, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() || (i == 0 && line.starts_with("theta")) {
                        continue;
                    }
                    let v = line
                        .split(',')
                        .nth(1)
                        .and_then(|s| s.trim().parse::<f64>().ok())
                        .ok_or_else(|| Error::InvalidParameter(format!("{}: bad line {}", path.display(), i + 1)))?;
                    values.push(v);
                }
                if values.is_empty() {
                    return Err(Error::InvalidParameter(format!("{}: empty profile", path.display())));
                }
                GridFunction::new(values).resample(m)
            }
        })
    }

    pub fn eval(&self, theta: f64) -> Option<f64> {
        match self {
            ProfileSpec::Constant { mean } => Some(*mean),
            ProfileSpec::Cosine { mean, amplitude, mode } => Some(mean + amplitude * (2.0 * PI * *mode as f64 * theta).cos()),
            ProfileSpec::Sine { mean, amplitude, mode } => Some(mean + amplitude * (2.0 * PI * *mode as f64 * theta).sin()),
            ProfileSpec::Csv { .. } => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSpec {
    #[default]
    Zero,
    /// amplitude·sin(2π·mode·θ), constant in time.
    Sine { amplitude: f64, mode: u32 },
    /// amplitude·cos(2π·mode·θ), constant in time.
    Cosine { amplitude: f64, mode: u32 },
}

impl ControlSpec {
    pub fn eval(&self, _t: f64, theta: f64) -> f64 {
        match self {
            ControlSpec::Zero => 0.0,
            ControlSpec::Sine { amplitude, mode } => amplitude * (2.0 * PI * *mode as f64 * theta).sin(),
            ControlSpec::Cosine { amplitude, mode } => amplitude * (2.0 * PI * *mode as f64 * theta).cos(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomogenizeConfig {
    pub y_grid: Vec<f64>,
    pub k_max: usize,
    pub samples: usize,
    #[serde(default)]
    pub search: SearchOptions,
}

impl Default for HomogenizeConfig {
    fn default() -> Self {
        HomogenizeConfig { y_grid: vec![-1.0, -0.5, 0.0, 0.5, 1.0], k_max: 2, samples: 4000, search: SearchOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdpConfig {
    pub n_list: Vec<usize>,
    /// Frozen target profile; the tube is around it on [0, T].
    pub target: ProfileSpec,
    /// Tube radius; calibrated from a pilot run around the hydrodynamic
    /// solution when absent.
    pub radius: Option<f64>,
    pub pilot_replicas: usize,
    /// Importance-sampling replicas at the largest N (0 disables).
    pub tilted_replicas: usize,
    pub min_ess: f64,
    /// SDE step as a fraction of the stability limit.
    pub dt_fraction: f64,
}

impl Default for LdpConfig {
    fn default() -> Self {
        LdpConfig {
            n_list: vec![16, 32, 64],
            target: ProfileSpec::Cosine { mean: 0.0, amplitude: 0.1, mode: 1 },
            radius: None,
            pilot_replicas: 64,
            tilted_replicas: 64,
            min_ess: 10.0,
            dt_fraction: 1.0,
        }
    }
}

/// Potential, table and effective coefficient resolved from a config.
pub struct Resolved {
    pub pot: SingleSitePotential,
    pub table: FreeEnergyTable,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::InvalidParameter(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.model.n < 2 {
            return bad("model.n must be at least 2");
        }
        if !(self.model.c_stab > 0.0 && self.model.c_stab <= 0.5) {
            return bad("model.c_stab must lie in (0, 0.5]");
        }
        if self.grid.m < 3 || self.grid.snapshots == 0 || !(self.grid.t_final > 0.0) {
            return bad("grid needs m >= 3, snapshots >= 1 and t_final > 0");
        }
        if self.free_energy.n_grid < 3 || !(self.free_energy.y_min < self.free_energy.y_max) {
            return bad("free_energy needs y_min < y_max and n_grid >= 3");
        }
        if self.replicas == 0 {
            return bad("replicas must be positive");
        }
        match (&self.model.kind, &self.model.conductance) {
            (ModelKind::Classical, ConductanceSpec::Constant { value }) if *value == 1.0 => {}
            (ModelKind::Classical, _) => return bad("the classical model has unit conductances"),
            (ModelKind::RandomEnv, ConductanceSpec::StateDependent { .. }) => return bad("random_env needs quenched conductances"),
            (ModelKind::Nongradient, ConductanceSpec::Uniform { .. } | ConductanceSpec::Bonds { .. }) => {
                return bad("nongradient needs a state-dependent or constant conductance")
            }
            _ => {}
        }
        if let ConductanceSpec::StateDependent { bond_fn } = &self.model.conductance {
            bond_fn.validate()?;
        }
        if let ConductanceSpec::Uniform { lo, hi, .. } = &self.model.conductance {
            abar_uniform(*lo, *hi)?;
        }
        SingleSitePotential::from_spec(&self.potential)?;
        Ok(())
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let pot = SingleSitePotential::from_spec(&self.potential)?;
        let t = &self.free_energy;
        let table = FreeEnergyTable::build(&pot, t.y_min, t.y_max, t.n_grid)?;
        Ok(Resolved { pot, table })
    }

    fn env_seed(&self) -> u64 {
        match &self.model.conductance {
            ConductanceSpec::Uniform { env_seed: Some(s), .. } => *s,
            _ => replica_seed(self.seed, u64::MAX),
        }
    }

    /// Conductance field for a lattice of `n` sites. Uniform environments
    /// are drawn from one stream, so the first bonds agree across N.
    pub fn field(&self, n: usize) -> Result<ConductanceField> {
        Ok(match &self.model.conductance {
            ConductanceSpec::Constant { value } => ConductanceField::Constant { value: *value },
            ConductanceSpec::Uniform { lo, hi, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.env_seed());
                ConductanceField::iid_uniform(n, *lo, *hi, &mut rng)?
            }
            ConductanceSpec::Bonds { values } => {
                if values.len() != n {
                    return Err(Error::InvalidParameter(format!("{} bond values given for N = {n}", values.len())));
                }
                let c = values.iter().fold(1.0f64, |c, &a| c.max(a).max(1.0 / a));
                ConductanceField::iid(values.clone(), c)?
            }
            ConductanceSpec::StateDependent { bond_fn } => ConductanceField::StateDependent { bond_fn: bond_fn.clone() },
        })
    }

    pub fn model(&self, pot: &SingleSitePotential, n: usize) -> Result<Model> {
        let mut m = Model::new(self.model.kind, pot.clone(), self.field(n)?, n)?;
        m.c_stab = self.model.c_stab;
        Ok(m)
    }

    /// ā of the configured environment: the law's harmonic mean for uniform
    /// conductances, the sample harmonic mean for explicit bonds.
    pub fn abar(&self) -> Result<f64> {
        match &self.model.conductance {
            ConductanceSpec::Constant { value } => Ok(*value),
            ConductanceSpec::Uniform { lo, hi, .. } => abar_uniform(*lo, *hi),
            ConductanceSpec::Bonds { values } => abar(values),
            ConductanceSpec::StateDependent { .. } => match &self.model.ahat {
                Some(AhatSpec::Constant { value }) => Ok(*value),
                _ => Err(Error::InvalidParameter("a state-dependent conductance has no ā; give model.ahat".into())),
            },
        }
    }
}

impl AhatSpec {
    pub fn eval(&self, y: f64) -> f64 {
        match self {
            AhatSpec::Constant { value } => *value,
            AhatSpec::Table { y: ys, value } => crate::homogenize::AhatTable { y: ys.clone(), value: value.clone() }.eval(y),
        }
    }

    pub fn max(&self) -> f64 {
        match self {
            AhatSpec::Constant { value } => *value,
            AhatSpec::Table { value, .. } => value.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}
