//! Explicit conservative finite-volume solvers for the hydrodynamic
//! equations ∂ρ/∂t = ∂θ(m(ρ)(∂θφ'(ρ) + h)) on the unit torus, where the
//! mobility m is either the constant ā or a density-dependent â(ρ).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::GridFunction;
use crate::potential::FreeEnergyTable;

/// ρ(t, θ) stored as cell-averaged profiles at snapshot times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeProfile {
    pub times: Vec<f64>,
    pub values: Vec<GridFunction>,
}

impl SpaceTimeProfile {
    /// Profile frozen at `rho` on the given time grid.
    pub fn frozen(rho: &GridFunction, times: Vec<f64>) -> Self {
        let values = vec![rho.clone(); times.len()];
        SpaceTimeProfile { times, values }
    }

    pub fn m(&self) -> usize {
        self.values.first().map_or(0, |v| v.m())
    }

    pub fn initial(&self) -> &GridFunction {
        &self.values[0]
    }

    pub fn last(&self) -> &GridFunction {
        self.values.last().unwrap()
    }

    /// Largest deviation of the spatial mean from its initial value.
    pub fn mean_drift(&self) -> f64 {
        let m0 = self.values[0].mean();
        self.values.iter().map(|v| (v.mean() - m0).abs()).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,theta,rho")?;
        for (t, g) in self.times.iter().zip(&self.values) {
            let m = g.m();
            for (j, v) in g.values.iter().enumerate() {
                writeln!(out, "{},{},{}", t, GridFunction::center(m, j), v)?;
            }
        }
        Ok(())
    }

    /// Reads the `t,theta,rho` layout written by [`SpaceTimeProfile::write_csv`].
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut times: Vec<f64> = Vec::new();
        let mut values: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::InvalidParameter(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with('t')) {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidParameter(format!("line {}: {e}", lineno + 1)))?;
            if fields.len() != 3 {
                return Err(Error::InvalidParameter(format!("line {}: expected t,theta,rho", lineno + 1)));
            }
            if times.last() != Some(&fields[0]) {
                times.push(fields[0]);
                values.push(Vec::new());
            }
            values.last_mut().unwrap().push(fields[2]);
        }
        if times.is_empty() || values.iter().any(|v| v.len() != values[0].len()) {
            return Err(Error::InvalidParameter("profile CSV is empty or ragged".into()));
        }
        Ok(SpaceTimeProfile { times, values: values.into_iter().map(GridFunction::new).collect() })
    }
}

/// Time discretization shared by the solvers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HydroOptions {
    pub t_final: f64,
    /// Largest allowed time step; the actual step divides the snapshot interval.
    pub dt: f64,
    /// Number of snapshot intervals; snapshots are stored at k·T/snapshots.
    pub snapshots: usize,
    /// Stability fraction: dt·M²·max mobility·max φ'' must stay below this.
    #[serde(default = "default_cfl")]
    pub cfl: f64,
}

fn default_cfl() -> f64 {
    0.5
}

impl HydroOptions {
    pub fn new(t_final: f64, dt: f64, snapshots: usize) -> Self {
        HydroOptions { t_final, dt, snapshots, cfl: default_cfl() }
    }

    /// Largest stable step for the given grid, mobility and stiffness.
    pub fn stable_dt(&self, m: usize, mobility: f64, d2phi: f64) -> f64 {
        self.cfl / ((m * m) as f64 * mobility * d2phi)
    }
}

enum Mobility<'a> {
    Constant(f64),
    Density(&'a dyn Fn(f64) -> f64, f64),
}

/// Control h(t, θ), evaluated at cell faces.
pub type ControlFn<'a> = &'a (dyn Fn(f64, f64) -> f64 + Sync);

fn solve(
    table: &FreeEnergyTable,
    mobility: Mobility<'_>,
    rho0: &GridFunction,
    control: Option<ControlFn<'_>>,
    opts: &HydroOptions,
) -> Result<SpaceTimeProfile> {
    let m = rho0.m();
    if m < 3 || opts.snapshots == 0 || !(opts.t_final > 0.0) || !(opts.dt > 0.0) {
        return Err(Error::InvalidParameter("hydro solve needs M >= 3, snapshots >= 1, T > 0, dt > 0".into()));
    }
    for &v in &rho0.values {
        table.check_range(v)?;
    }
    let mob_max = match mobility {
        Mobility::Constant(a) => a,
        Mobility::Density(_, bound) => bound,
    };
    let stiff = if control.is_none() {
        table.max_d2phi_on(rho0.min(), rho0.max())?
    } else {
        table.max_d2phi()
    };
    let limit = opts.stable_dt(m, mob_max, stiff);
    let interval = opts.t_final / opts.snapshots as f64;
    let steps_per = (interval / opts.dt).ceil().max(1.0) as usize;
    let dt = interval / steps_per as f64;
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::CflViolation { dt, limit });
    }
    let mf = m as f64;
    let mut rho = rho0.values.clone();
    let mut w = vec![0.0; m];
    let mut flux = vec![0.0; m];
    let mut times = vec![0.0];
    let mut values = vec![rho0.clone()];
    let faces: Vec<f64> = (0..m).map(|j| (j + 1) as f64 / mf).collect();
    for snap in 0..opts.snapshots {
        for s in 0..steps_per {
            let t = (snap * steps_per + s) as f64 * dt;
            for j in 0..m {
                w[j] = table.dphi(rho[j])?;
            }
            for j in 0..m {
                let jp = (j + 1) % m;
                let coeff = match mobility {
                    Mobility::Constant(a) => a,
                    Mobility::Density(f, _) => f(0.5 * (rho[j] + rho[jp])),
                };
                let drive = control.map_or(0.0, |h| h(t, faces[j]));
                flux[j] = coeff * (mf * (w[jp] - w[j]) + drive);
            }
            for j in 0..m {
                rho[j] += dt * mf * (flux[j] - flux[(j + m - 1) % m]);
            }
        }
        times.push((snap + 1) as f64 * interval);
        values.push(GridFunction::new(rho.clone()));
    }
    Ok(SpaceTimeProfile { times, values })
}

/// ∂ρ/∂t = ā ∂²θ φ'(ρ).
pub fn solve_hydro(table: &FreeEnergyTable, abar: f64, rho0: &GridFunction, opts: &HydroOptions) -> Result<SpaceTimeProfile> {
    solve(table, Mobility::Constant(abar), rho0, None, opts)
}

/// ∂ρ/∂t = ā ∂θ(h + ∂θφ'(ρ)).
pub fn solve_controlled(
    table: &FreeEnergyTable,
    abar: f64,
    rho0: &GridFunction,
    h: ControlFn<'_>,
    opts: &HydroOptions,
) -> Result<SpaceTimeProfile> {
    solve(table, Mobility::Constant(abar), rho0, Some(h), opts)
}

/// ∂ρ/∂t = ∂θ(â(ρ)(∂θφ'(ρ) + h)); `ahat_max` bounds â for the stability check.
pub fn solve_nongrad_hydro(
    table: &FreeEnergyTable,
    ahat: &dyn Fn(f64) -> f64,
    ahat_max: f64,
    rho0: &GridFunction,
    h: Option<ControlFn<'_>>,
    opts: &HydroOptions,
) -> Result<SpaceTimeProfile> {
    solve(table, Mobility::Density(ahat, ahat_max), rho0, h, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::SingleSitePotential;
    use std::f64::consts::PI;

    fn gaussian_table() -> FreeEnergyTable {
        FreeEnergyTable::build(&SingleSitePotential::gaussian(), -3.0, 3.0, 121).unwrap()
    }

    #[test]
    fn heat_mode_decay() {
        let t = gaussian_table();
        let abar = 1.3;
        let m = 128;
        let eps = 0.2;
        let rho0 = GridFunction::from_fn(m, |x| 0.1 + eps * (2.0 * PI * x).cos());
        let opts = HydroOptions::new(0.02, 1e-5, 4);
        let sol = solve_hydro(&t, abar, &rho0, &opts).unwrap();
        for (time, g) in sol.times.iter().zip(&sol.values) {
            let exact = GridFunction::from_fn(m, |x| 0.1 + eps * (-4.0 * PI * PI * abar * time).exp() * (2.0 * PI * x).cos());
            let err = g.values.iter().zip(&exact.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 2e-4, "t={time} err={err}");
        }
        assert!(sol.mean_drift() < 1e-13);
    }

    #[test]
    fn constant_is_fixed_point() {
        let t = gaussian_table();
        let rho0 = GridFunction::constant(32, 0.4);
        let sol = solve_hydro(&t, 1.0, &rho0, &HydroOptions::new(0.1, 1e-4, 2)).unwrap();
        assert!(sol.last().values.iter().all(|v| (v - 0.4).abs() < 1e-14));
    }

    #[test]
    fn cfl_is_enforced() {
        let t = gaussian_table();
        let rho0 = GridFunction::constant(64, 0.0);
        let r = solve_hydro(&t, 1.0, &rho0, &HydroOptions::new(0.1, 1e-3, 1));
        assert!(matches!(r, Err(Error::CflViolation { .. })));
    }

    #[test]
    fn controlled_reduces_and_conserves() {
        let t = gaussian_table();
        let rho0 = GridFunction::from_fn(64, |x| 0.3 * (2.0 * PI * x).sin());
        let opts = HydroOptions::new(0.05, 2e-5, 5);
        let zero = |_: f64, _: f64| 0.0;
        let a = solve_controlled(&t, 1.0, &rho0, &zero, &opts).unwrap();
        let b = solve_hydro(&t, 1.0, &rho0, &opts).unwrap();
        assert_eq!(a, b);
        let h = |tt: f64, x: f64| (1.0 + tt) * (2.0 * PI * x).cos() + 0.7;
        let c = solve_controlled(&t, 1.0, &rho0, &h, &opts).unwrap();
        assert!(c.mean_drift() < 1e-13);
    }

    #[test]
    fn forced_mode_reaches_steady_state() {
        // ρ̇ = ā∂θ(h + ∂θρ) with h = sin(2πθ): ĉ' = ā(2π ĉ_h − 4π²ĉ) per mode,
        // steady solution ρ = m + cos(2πθ)/(2π)
        let t = gaussian_table();
        let m = 128;
        let rho0 = GridFunction::constant(m, 0.0);
        let h = |_: f64, x: f64| (2.0 * PI * x).sin();
        let sol = solve_controlled(&t, 1.0, &rho0, &h, &HydroOptions::new(0.6, 1e-5, 3)).unwrap();
        let g = sol.last();
        // modal ODE solution at T: amplitude (1 − e^{−4π²T})/(2π)
        let amp = (1.0 - (-4.0 * PI * PI * 0.6f64).exp()) / (2.0 * PI);
        for (j, v) in g.values.iter().enumerate() {
            let x = GridFunction::center(m, j);
            assert!((v - amp * (2.0 * PI * x).cos()).abs() < 2e-4);
        }
    }

    #[test]
    fn nongradient_reduces_to_constant_mobility() {
        let t = gaussian_table();
        let rho0 = GridFunction::from_fn(48, |x| 0.5 * (2.0 * PI * x).cos());
        let opts = HydroOptions::new(0.02, 1e-5, 2);
        let a = solve_nongrad_hydro(&t, &|_| 1.7, 1.7, &rho0, None, &opts).unwrap();
        let b = solve_hydro(&t, 1.7, &rho0, &opts).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            for (p, q) in x.values.iter().zip(&y.values) {
                assert!((p - q).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let rho = GridFunction::from_fn(8, |x| x * x);
        let prof = SpaceTimeProfile::frozen(&rho, vec![0.0, 0.25, 0.5]);
        let mut buf = Vec::new();
        prof.write_csv(&mut buf).unwrap();
        let back = SpaceTimeProfile::read_csv(&buf[..]).unwrap();
        assert_eq!(back, prof);
    }
}
