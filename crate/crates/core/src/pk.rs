//! One-compartment pharmacokinetics simulator with pulse dosing and a
//! peak-window observation design.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{sample_observations, Dataset, DesignWeights, InputField, Observation};
use crate::error::{DopeError, Result};
use crate::grid::{Domain, Grid1D};
use crate::rng::{stream, Role};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PkConfig {
    pub horizon: f64,
    pub delta: usize,
    pub k: usize,
    pub sigma_eps: f64,
    pub window_half_width: f64,
    pub log_cl_mean: f64,
    pub log_v_mean: f64,
    pub log_cl_sd: f64,
    pub log_v_sd: f64,
    pub log_corr: f64,
}

impl Default for PkConfig {
    fn default() -> Self {
        Self {
            horizon: 24.0,
            delta: 128,
            k: 24,
            sigma_eps: 0.002,
            window_half_width: 5.0,
            log_cl_mean: 0.0,
            log_v_mean: 1.0,
            log_cl_sd: 0.25,
            log_v_sd: 0.20,
            log_corr: 0.4,
        }
    }
}

impl PkConfig {
    pub fn grid(&self) -> Result<Grid1D> {
        Grid1D::new(self.horizon, self.delta)
    }
}

/// Correlated log-normal clearance and volume.
pub fn sample_pk_params<R: Rng + ?Sized>(rng: &mut R, cfg: &PkConfig) -> (f64, f64) {
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    let rho = cfg.log_corr;
    let log_cl = cfg.log_cl_mean + cfg.log_cl_sd * z1;
    let log_v = cfg.log_v_mean + cfg.log_v_sd * (rho * z1 + (1.0 - rho * rho).max(0.0).sqrt() * z2);
    (log_cl.exp(), log_v.exp())
}

/// Rectangular infusion pulse `amplitude · 1{start ≤ t ≤ start + duration}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pulse {
    pub start: f64,
    pub duration: f64,
    pub amplitude: f64,
}

pub fn sample_pulses<R: Rng + ?Sized>(rng: &mut R, horizon: f64) -> Vec<Pulse> {
    let m = if rng.gen_bool(0.5) { 1 } else { 2 };
    (0..m)
        .map(|_| {
            let duration = rng.gen_range(1.0..=4.0);
            let start = rng.gen_range(0.0..=(horizon - duration).max(0.0));
            let amplitude = rng.gen_range(0.5..=2.0);
            Pulse {
                start,
                duration,
                amplitude,
            }
        })
        .collect()
}

pub fn dosing_from_pulses(pulses: &[Pulse], grid: &Grid1D) -> Vec<f64> {
    let t_end = grid.horizon();
    grid.points()
        .iter()
        .map(|&t| {
            pulses
                .iter()
                .filter(|p| p.start <= t && t <= t_end.min(p.start + p.duration))
                .map(|p| p.amplitude)
                .sum()
        })
        .collect()
}

/// Dosing-rate profile from one or two random pulses.
pub fn sample_dosing<R: Rng + ?Sized>(rng: &mut R, grid: &Grid1D) -> Vec<f64> {
    dosing_from_pulses(&sample_pulses(rng, grid.horizon()), grid)
}

/// Exact exponential recursion for `du/dt = -(CL/V) u + r/V` with the
/// forcing held at its left-endpoint value over each step.
pub fn solve_pk(r: &[f64], cl: f64, v: f64, grid: &Grid1D) -> Result<Vec<f64>> {
    if !(cl > 0.0 && cl.is_finite() && v > 0.0 && v.is_finite()) {
        return Err(DopeError::InvalidParameter(format!(
            "clearance and volume must be positive, got CL={cl}, V={v}"
        )));
    }
    if r.len() != grid.len() {
        return Err(DopeError::Shape(format!(
            "dosing profile of length {} on a {}-point grid",
            r.len(),
            grid.len()
        )));
    }
    let dt = grid.step();
    let kappa = cl / v;
    let decay = (-kappa * dt).exp();
    let small = kappa * dt < 1e-10;
    let gain = if small { dt } else { (1.0 - decay) / kappa };
    let mut u = vec![0.0; r.len()];
    for d in 1..r.len() {
        u[d] = if small {
            u[d - 1] + dt * r[d - 1] / v
        } else {
            decay * u[d - 1] + r[d - 1] / v * gain
        };
    }
    Ok(u)
}

/// Mixture of the uniform design and a uniform window around the peak of `u`.
pub fn pk_design(u: &[f64], grid: &Grid1D, rho: f64, h: f64) -> Result<DesignWeights> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(DopeError::InvalidParameter(format!("rho must lie in [0,1], got {rho}")));
    }
    if !(h > 0.0) {
        return Err(DopeError::InvalidParameter(format!("window half-width {h}")));
    }
    if u.len() != grid.len() || u.iter().any(|x| !x.is_finite()) {
        return Err(DopeError::NumericInput("trajectory for design".into()));
    }
    let n = grid.len();
    let peak = u
        .iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > u[best] { i } else { best });
    let tau = grid.points()[peak];
    let inside: Vec<bool> = grid.points().iter().map(|t| (t - tau).abs() <= h).collect();
    let count = inside.iter().filter(|&&b| b).count() as f64;
    let mix = rho / 5.0;
    let p = inside
        .iter()
        .map(|&b| (1.0 - mix) / n as f64 + if b { mix / count } else { 0.0 })
        .collect();
    DesignWeights::new(p, &grid.weights())
}

/// Simulate one subject given a generator.
pub fn simulate_pk<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &PkConfig,
    grid: &Grid1D,
    rho: f64,
) -> Result<Observation> {
    let (cl, v) = sample_pk_params(rng, cfg);
    let r = sample_dosing(rng, grid);
    let u = solve_pk(&r, cl, v, grid)?;
    let design = pk_design(&u, grid, rho, cfg.window_half_width)?;
    let (idx, y) = sample_observations(&design, &u, cfg.k, cfg.sigma_eps, rng)?;
    Observation::new(
        InputField::Pk {
            r,
            log_cl: cl.ln(),
            log_v: v.ln(),
        },
        idx,
        y,
        design,
        Some(u),
    )
}

/// `n` independent subjects drawn from the stream `(seed, role, index)`.
pub fn generate_pk_dataset(
    n: usize,
    rho: f64,
    cfg: &PkConfig,
    seed: u64,
    role: Role,
    index: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(DopeError::InvalidParameter("dataset size must be positive".into()));
    }
    let grid = cfg.grid()?;
    let mut rng = stream(seed, role, index);
    let samples = (0..n)
        .map(|_| simulate_pk(&mut rng, cfg, &grid, rho))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        domain: Domain::Line(grid),
        samples,
    })
}
