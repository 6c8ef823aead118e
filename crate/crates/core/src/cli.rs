//! Command-line front end: one subcommand per experiment, all driven by a
//! JSON config. Exit codes: 0 success, 1 configuration or I/O problem,
//! 2 numerical failure (reported with the error's name).

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, Resolved};
use crate::dynamics::{self, replica_seed, LocalGibbs, Model, ModelKind, Schedule, Tilt};
use crate::error::Error;
use crate::functionals::{self, hminus1_norm, rate_nongradient, rate_random_env};
use crate::homogenize::{ahat_approx, write_ahat_csv, AhatTable};
use crate::hydro::{solve_controlled, solve_hydro, solve_nongrad_hydro, HydroOptions, SpaceTimeProfile};
use crate::lattice::{BondFn, ConductanceField, GridFunction};
use crate::ldplab::{self, DeviationEvent, Experiment};

#[derive(Parser, Debug)]
#[command(name = "glk", version, about = "Conservative Ginzburg–Landau diffusion laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    replicas: Option<usize>,
    /// Worker threads for replica-parallel work (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Eq)]
enum Command {
    /// Tabulate φ, φ', φ'' (free_energy.csv).
    Phi,
    /// Simulate an ensemble (trajectories.csv, costs.csv).
    Simulate,
    /// Solve the hydrodynamic equation (hydro.csv).
    Hydro,
    /// Evaluate the rate function of a profile (rate_report.json).
    Rate {
        /// Space-time profile CSV with columns t,theta,rho.
        #[arg(long)]
        profile: PathBuf,
    },
    /// Control-cost identity and tilted ensemble costs (tilt.json).
    Tilt,
    /// Variational estimate of the non-gradient coefficient (ahat.csv).
    Homogenize,
    /// Tube probabilities and empirical rates (ldp.json, rate_curve.csv).
    Ldp,
    /// Run the invariant suite (check.json).
    Check,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Phi => "phi",
            Command::Simulate => "simulate",
            Command::Hydro => "hydro",
            Command::Rate { .. } => "rate",
            Command::Tilt => "tilt",
            Command::Homogenize => "homogenize",
            Command::Ldp => "ldp",
            Command::Check => "check",
        }
    }
}

enum Failure {
    Config(String),
    Numerical(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(m) => Failure::Config(m),
            other => Failure::Numerical(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(format!("i/o: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Config(format!("json: {e}"))
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

struct Ctx {
    cfg: ExperimentConfig,
    base: PathBuf,
    out: PathBuf,
    written: Vec<String>,
}

impl Ctx {
    fn create(&mut self, name: &str) -> Outcome<BufWriter<File>> {
        self.written.push(name.to_string());
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Outcome<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.threads.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(()) => 0,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("error[{}]: {e}", e.name());
            2
        }
    }
}

fn execute(cli: &Cli) -> Outcome<()> {
    let path = cli.config.as_ref().ok_or_else(|| Failure::Config("--config <path> is required".into()))?;
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.replicas {
        cfg.replicas = r;
    }
    cfg.validate()?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = match &cli.out {
        Some(o) => o.clone(),
        None => base.join(&cfg.output_dir),
    };
    fs::create_dir_all(&out)?;
    let mut ctx = Ctx { cfg, base, out, written: Vec::new() };
    let res = ctx.cfg.resolve()?;
    match &cli.command {
        Command::Phi => phi(&mut ctx, &res)?,
        Command::Simulate => simulate(&mut ctx, &res)?,
        Command::Hydro => hydro(&mut ctx, &res)?,
        Command::Rate { profile } => rate(&mut ctx, &res, profile)?,
        Command::Tilt => tilt(&mut ctx, &res)?,
        Command::Homogenize => homogenize(&mut ctx, &res)?,
        Command::Ldp => ldp(&mut ctx, &res)?,
        Command::Check => check(&mut ctx, &res)?,
    }
    let mut outputs = ctx.written.clone();
    outputs.push("manifest.json".into());
    let manifest = json!({
        "subcommand": cli.command.name(),
        "seed": ctx.cfg.seed,
        "replicas": ctx.cfg.replicas,
        "config": ctx.cfg,
        "outputs": outputs,
        "version": env!("CARGO_PKG_VERSION"),
    });
    ctx.write_json("manifest.json", &manifest)
}

fn phi(ctx: &mut Ctx, res: &Resolved) -> Outcome<()> {
    let t = &res.table;
    let mut w = ctx.create("free_energy.csv")?;
    writeln!(w, "y,phi,phi_prime,phi_second,sigma")?;
    for i in 0..t.y_grid.len() {
        writeln!(w, "{},{},{},{},{}", t.y_grid[i], t.phi[i], t.phi_prime[i], t.phi_second[i], t.sigma_of_y[i])?;
    }
    w.flush()?;
    Ok(())
}

/// Default SDE step: the model's stability limit with sup ψ'' taken from the
/// global bound, or over the free-energy range widened by 4 for p > 2.
fn sde_dt(ctx: &Ctx, res: &Resolved, model: &Model) -> f64 {
    if let Some(dt) = ctx.cfg.grid.dt_sde {
        return dt;
    }
    let d2 = res.pot.d2psi_bound().unwrap_or_else(|| {
        let r = ctx.cfg.free_energy.y_min.abs().max(ctx.cfg.free_energy.y_max.abs()) + 4.0;
        res.pot.d2psi(r)
    });
    model.stable_dt(d2)
}

fn control(ctx: &Ctx) -> impl Fn(f64, f64) -> f64 + Sync + use<> {
    let spec = ctx.cfg.control.clone();
    move |t, x| spec.eval(t, x)
}

fn simulate(ctx: &mut Ctx, res: &Resolved) -> Outcome<()> {
    let cfg = &ctx.cfg;
    let n = cfg.model.n;
    let model = cfg.model(&res.pot, n)?;
    let rho0 = cfg.initial_profile.resolve(&ctx.base, cfg.grid.m)?;
    let init = LocalGibbs::new(&res.pot, &res.table, &rho0, n)?;
    let schedule = Schedule { dt: sde_dt(ctx, res, &model), snapshot_times: cfg.grid.snapshot_times() };
    let h = control(ctx);
    let tilted = !matches!(cfg.control, crate::config::ControlSpec::Zero);
    let tilt = if tilted { Some(Tilt { h: &h, abar: cfg.abar()?, cylinder: None }) } else { None };
    let ens = dynamics::simulate(&model, &init, &schedule, tilt.as_ref(), cfg.replicas, cfg.seed)?;
    let mut w = ctx.create("trajectories.csv")?;
    dynamics::write_trajectories_csv(&ens, &mut w)?;
    w.flush()?;
    let mut w = ctx.create("costs.csv")?;
    dynamics::write_costs_csv(&ens, &mut w)?;
    w.flush()?;
    Ok(())
}

fn hydro_options(ctx: &Ctx, res: &Resolved, mobility: f64) -> HydroOptions {
    let g = &ctx.cfg.grid;
    let mut opts = HydroOptions::new(g.t_final, 0.0, g.snapshots);
    opts.dt = g.dt_pde.unwrap_or_else(|| 0.9 * opts.stable_dt(g.m, mobility, res.table.max_d2phi()));
    opts
}

fn ahat_spec(ctx: &Ctx) -> Outcome<crate::config::AhatSpec> {
    ctx.cfg.model.ahat.clone().ok_or_else(|| Failure::Config("the non-gradient model needs model.ahat".into()))
}

fn hydro(ctx: &mut Ctx, res: &Resolved) -> Outcome<()> {
    let cfg = &ctx.cfg;
    let rho0 = cfg.initial_profile.resolve(&ctx.base, cfg.grid.m)?;
    let h = control(ctx);
    let zero = matches!(cfg.control, crate::config::ControlSpec::Zero);
    let sol = if cfg.model.kind == ModelKind::Nongradient {
        let ahat = ahat_spec(ctx)?;
        let f = |y: f64| ahat.eval(y);
        let opts = hydro_options(ctx, res, ahat.max());
        solve_nongrad_hydro(&res.table, &f, ahat.max(), &rho0, if zero { None } else { Some(&h) }, &opts)?
    } else {
        let a = cfg.abar()?;
        let opts = hydro_options(ctx, res, a);
        if zero {
            solve_hydro(&res.table, a, &rho0, &opts)?
        } else {
            solve_controlled(&res.table, a, &rho0, &h, &opts)?
        }
    };
    let mut w = ctx.create("hydro.csv")?;
    sol.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn rate(ctx: &mut Ctx, res: &Resolved, profile: &Path) -> Outcome<()> {
    let file = File::open(profile).map_err(|e| Failure::Config(format!("{}: {e}", profile.display())))?;
    let prof = SpaceTimeProfile::read_csv(BufReader::new(file))?;
    let m0 = ctx.cfg.initial_profile.resolve(&ctx.base, prof.m())?;
    let report = if ctx.cfg.model.kind == ModelKind::Nongradient {
        let ahat = ahat_spec(ctx)?;
        rate_nongradient(&res.table, &|y| ahat.eval(y), &m0, &prof)?
    } else {
        rate_random_env(&res.table, ctx.cfg.abar()?, &m0, &prof)?
    };
    ctx.write_json("rate_report.json", &report)
}

fn tilt(ctx: &mut Ctx, res: &Resolved) -> Outcome<()> {
    let cfg = ctx.cfg.clone();
    let a = cfg.abar()?;
    let h = control(ctx);
    let rho0 = cfg.initial_profile.resolve(&ctx.base, cfg.grid.m)?;
    let opts = hydro_options(ctx, res, a);
    let identity = functionals::girsanov_identity_check(&h, a, &res.table, &rho0, &opts)?;
    let n = cfg.model.n;
    let model = cfg.model(&res.pot, n)?;
    let init = LocalGibbs::new(&res.pot, &res.table, &rho0, n)?;
    let schedule = Schedule { dt: sde_dt(ctx, res, &model), snapshot_times: cfg.grid.snapshot_times() };
    let tl = Tilt { h: &h, abar: a, cylinder: None };
    let costs = dynamics::simulate_map(&model, &init, &schedule, Some(&tl), cfg.replicas, cfg.seed, |_, tr| Ok((tr.girsanov_cost, -tr.log_weight / n as f64)))?;
    let r = costs.len() as f64;
    let mean_cost = costs.iter().map(|c| c.0).sum::<f64>() / r;
    let mean_kl = costs.iter().map(|c| c.1).sum::<f64>() / r;
    let mut w = ctx.create("costs.csv")?;
    writeln!(w, "replica,cost,log_ratio_per_n")?;
    for (i, (c, k)) in costs.iter().enumerate() {
        writeln!(w, "{i},{c},{k}")?;
    }
    w.flush()?;
    let summary = json!({
        "identity": identity,
        "n": n,
        "analytic_cost": identity.lhs,
        "mean_girsanov_cost": mean_cost,
        "mean_log_ratio_per_n": mean_kl,
        "kinetic_term": identity.rhs / 2.0,
    });
    ctx.write_json("tilt.json", &summary)
}

fn bond_fn(ctx: &Ctx) -> Outcome<BondFn> {
    match ctx.cfg.field(ctx.cfg.model.n)? {
        ConductanceField::StateDependent { bond_fn } => Ok(bond_fn),
        ConductanceField::Constant { value } => Ok(BondFn::Constant { value }),
        ConductanceField::Iid { .. } => Err(Failure::Config("homogenize needs a state-dependent or constant conductance".into())),
    }
}

fn homogenize(ctx: &mut Ctx, res: &Resolved) -> Outcome<()> {
    let hc = ctx.cfg.homogenize.clone();
    let bond = bond_fn(ctx)?;
    let entries = ahat_approx(&res.pot, &res.table, &bond, &hc.y_grid, hc.k_max, hc.samples, ctx.cfg.seed, &hc.search)?;
    let mut w = ctx.create("ahat.csv")?;
    write_ahat_csv(&entries, &mut w)?;
    w.flush()?;
    let table = AhatTable::from_entries(&entries)?;
    ctx.write_json("ahat.json", &json!({ "kind": "table", "y": table.y, "value": table.value }))
}

fn ldp(ctx: &mut Ctx, res: &Resolved) -> Outcome<()> {
    let cfg = ctx.cfg.clone();
    let lc = &cfg.ldp;
    if lc.n_list.is_empty() {
        return Err(Failure::Config("ldp.n_list is empty".into()));
    }
    let m = cfg.grid.m;
    let a = cfg.abar()?;
    let m0 = cfg.initial_profile.resolve(&ctx.base, m)?;
    let times = cfg.grid.snapshot_times();
    let goal = lc.target.resolve(&ctx.base, m)?;
    let target = SpaceTimeProfile::frozen(&goal, times.clone());
    let make = |n: usize| cfg.model(&res.pot, n);
    let exp = Experiment { pot: &res.pot, table: &res.table, model: &make, m0: &m0, dt_fraction: lc.dt_fraction };
    let n_max = *lc.n_list.iter().max().unwrap();
    let radius = match lc.radius {
        Some(r) => r,
        None => {
            let hydro_opts = HydroOptions::new(cfg.grid.t_final, 0.9 * HydroOptions::new(1.0, 1.0, 1).stable_dt(m, a, res.table.max_d2phi()), cfg.grid.snapshots);
            let flow = solve_hydro(&res.table, a, &m0, &hydro_opts)?;
            let pilot_ev = DeviationEvent::new(flow, f64::INFINITY)?;
            let pilot = ldplab::estimate_tube_probability(&exp, &pilot_ev, &[n_max], lc.pilot_replicas, replica_seed(cfg.seed, 1 << 32))?;
            ldplab::calibrate_radius(&pilot[0])
        }
    };
    let event = DeviationEvent::new(target.clone(), radius)?;
    let direct = ldplab::estimate_tube_probability(&exp, &event, &lc.n_list, cfg.replicas, cfg.seed)?;
    let reference = rate_random_env(&res.table, a, &m0, &target)?;
    let curve: Vec<_> = direct.iter().filter(|d| d.hits > 0).map(|d| (d.n, d.p_hat, d.se)).collect();
    let points = ldplab::empirical_rate_curve(&curve)?;
    let tilted = if lc.tilted_replicas > 0 {
        let ctl = ldplab::frozen_control(&res.table, &goal)?;
        let h = move |t: f64, x: f64| ctl.eval(t, x);
        Some(ldplab::tilted_estimate(&exp, &h, a, &event, n_max, lc.tilted_replicas, replica_seed(cfg.seed, 1 << 33), lc.min_ess)?)
    } else {
        None
    };
    let mut w = ctx.create("rate_curve.csv")?;
    writeln!(w, "n,value,se,p_hat,hits,replicas")?;
    for d in &direct {
        let p = points.iter().find(|p| p.n == d.n);
        let (v, se) = p.map_or((f64::INFINITY, f64::NAN), |p| (p.value, p.se));
        writeln!(w, "{},{},{},{},{},{}", d.n, v, se, d.p_hat, d.hits, d.replicas)?;
    }
    w.flush()?;
    let summary = json!({
        "radius": radius,
        "reference_rate": reference,
        "direct": direct.iter().map(|d| json!({"n": d.n, "p_hat": d.p_hat, "se": d.se, "hits": d.hits, "replicas": d.replicas, "base_seed": d.base_seed, "median_distance": d.median_distance()})).collect::<Vec<_>>(),
        "curve": points,
        "tilted": tilted.map(|t| json!({"n": t.n, "p_hat": t.p_hat, "se": t.se, "ess": t.ess, "hits": t.hits, "mean_path_cost": t.mean_path_cost, "mean_initial_cost": t.mean_initial_cost, "mean_girsanov_cost": t.mean_girsanov_cost, "mean_distance": t.mean_distance, "base_seed": t.base_seed})),
    });
    ctx.write_json("ldp.json", &summary)
}

#[derive(Serialize)]
struct CheckItem {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn check(ctx: &mut Ctx, res: &Resolved) -> Outcome<()> {
    let cfg = ctx.cfg.clone();
    let mut items = Vec::new();
    let mut push = |name: &'static str, r: std::result::Result<(bool, String), Error>| {
        let (passed, detail) = r.unwrap_or_else(|e| (false, format!("{}: {e}", e.name())));
        items.push(CheckItem { name, passed, detail });
    };
    push("legendre_residual", res.table.legendre_residual(&res.pot).map(|r| (r < 1e-6, format!("max residual {r:e}"))));
    push("conservation", (|| {
        let n = cfg.model.n;
        let model = cfg.model(&res.pot, n)?;
        let rho0 = cfg.initial_profile.resolve(&ctx.base, n)?;
        let init = LocalGibbs::new(&res.pot, &res.table, &rho0, n)?;
        let dt = sde_dt(ctx, res, &model);
        let sched = Schedule { dt, snapshot_times: vec![0.0, 1000.0 * dt] };
        let tr = dynamics::run_replica(&model, &init, &sched, None, cfg.seed)?;
        let e = tr.max_conservation_error();
        Ok((e < 1e-9, format!("mean drift {e:e} over 1000 steps")))
    })());
    push("hminus1_cross_check", (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..20 {
            let u = GridFunction::new((0..64).map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5).collect()).centered();
            hminus1_norm(&u)?;
        }
        Ok((true, "20 random inputs agree".into()))
    })());
    push("hydro_dissipation", (|| {
        let a = match cfg.model.kind {
            ModelKind::Nongradient => cfg.model.ahat.as_ref().map_or(1.0, |s| s.max()),
            _ => cfg.abar()?,
        };
        let rho0 = cfg.initial_profile.resolve(&ctx.base, cfg.grid.m)?;
        let sol = solve_hydro(&res.table, a, &rho0, &hydro_options(ctx, res, a))?;
        let energies: Vec<f64> = sol.values.iter().map(|g| functionals::macro_free_energy(&res.table, g)).collect::<crate::Result<_>>()?;
        let monotone = energies.windows(2).all(|w| w[1] <= w[0] + 1e-14);
        let drift = sol.mean_drift();
        let r = rate_random_env(&res.table, a, &rho0, &sol)?;
        Ok((monotone && drift < 1e-10 && r.total < 1e-4, format!("free energy monotone: {monotone}, mass drift {drift:e}, rate {:e}", r.total)))
    })());
    let failed: Vec<&str> = items.iter().filter(|i| !i.passed).map(|i| i.name).collect();
    ctx.write_json("check.json", &items)?;
    if !failed.is_empty() {
        return Err(Failure::Numerical(Error::UnstableStep { reason: format!("invariant checks failed: {}", failed.join(", ")) }));
    }
    Ok(())
}
