//! Two-dimensional Darcy flow `-∇·(a∇u) = 1` with zero Dirichlet data,
//! piecewise-constant random permeability and a saliency-driven design.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{sample_observations, Dataset, DesignWeights, InputField, Observation};
use crate::error::{DopeError, Result};
use crate::grid::{Domain, Grid2D};
use crate::rng::{stream, Role};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DarcyConfig {
    pub size: usize,
    pub coarse: usize,
    pub modes: usize,
    pub log_scale: f64,
    pub floor: f64,
    pub k: usize,
    pub sigma_eps: f64,
    pub design_temperature: f64,
    pub design_floor: f64,
}

impl Default for DarcyConfig {
    fn default() -> Self {
        Self {
            size: 17,
            coarse: 5,
            modes: 3,
            log_scale: 0.65,
            floor: 0.2,
            k: 24,
            sigma_eps: 0.01,
            design_temperature: 7.0,
            design_floor: 1e-3,
        }
    }
}

impl DarcyConfig {
    pub fn grid(&self) -> Result<Grid2D> {
        Grid2D::new(self.size, self.size)
    }

    /// Coarse cell holding fine index `i`: the fine index range is split into
    /// `coarse` consecutive blocks.
    pub fn coarse_cell(&self, i: usize) -> usize {
        (i * self.coarse / self.size).min(self.coarse - 1)
    }
}

/// Coefficient field from the `modes x modes` cosine coefficients
/// (row-major in `(m_x, m_y)`).
pub fn coefficient_from_modes(coeffs: &[f64], cfg: &DarcyConfig) -> Result<Vec<f64>> {
    if coeffs.len() != cfg.modes * cfg.modes {
        return Err(DopeError::Shape(format!(
            "{} cosine coefficients for {} modes",
            coeffs.len(),
            cfg.modes * cfg.modes
        )));
    }
    let nc = cfg.coarse;
    let bar = |r: usize| r as f64 / (nc - 1) as f64;
    let phi = |m: usize, x: f64| 2f64.sqrt() * (std::f64::consts::PI * m as f64 * x).cos();
    let scale = cfg.log_scale / cfg.modes as f64;
    let mut coarse = vec![0.0; nc * nc];
    for r in 0..nc {
        for s in 0..nc {
            let mut z = 0.0;
            for mx in 1..=cfg.modes {
                for my in 1..=cfg.modes {
                    z += coeffs[(mx - 1) * cfg.modes + (my - 1)] * phi(mx, bar(r)) * phi(my, bar(s));
                }
            }
            coarse[r * nc + s] = (scale * z).exp().max(cfg.floor);
        }
    }
    let n = cfg.size;
    let mut a = vec![0.0; n * n];
    for p in 0..n {
        for q in 0..n {
            a[q + n * p] = coarse[cfg.coarse_cell(p) * nc + cfg.coarse_cell(q)];
        }
    }
    Ok(a)
}

pub fn sample_coefficient<R: Rng + ?Sized>(rng: &mut R, cfg: &DarcyConfig) -> Result<Vec<f64>> {
    let coeffs: Vec<f64> = (0..cfg.modes * cfg.modes)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    coefficient_from_modes(&coeffs, cfg)
}

#[inline]
fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Five-point finite-difference solve with harmonic-mean face coefficients;
/// boundary values are zero.
pub fn solve_darcy(a: &[f64], grid: &Grid2D) -> Result<Vec<f64>> {
    let (nh, nw) = (grid.rows(), grid.cols());
    if a.len() != nh * nw {
        return Err(DopeError::Shape(format!(
            "coefficient of length {} on a {nh}x{nw} grid",
            a.len()
        )));
    }
    if let Some(i) = a.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(DopeError::InvalidParameter(format!(
            "coefficient must be positive, got {} at {i}",
            a[i]
        )));
    }
    if nh < 3 || nw < 3 {
        return Ok(vec![0.0; nh * nw]);
    }
    let (ih, iw) = (nh - 2, nw - 2);
    let m = ih * iw;
    let hx = 1.0 / (nh - 1) as f64;
    let hy = 1.0 / (nw - 1) as f64;
    let at = |p: usize, q: usize| a[q + nw * p];
    let interior = |p: usize, q: usize| (q - 1) + iw * (p - 1);
    let mut mat = DMatrix::<f64>::zeros(m, m);
    for p in 1..nh - 1 {
        for q in 1..nw - 1 {
            let row = interior(p, q);
            let c = at(p, q);
            let nbrs = [
                (p - 1, q, hx),
                (p + 1, q, hx),
                (p, q - 1, hy),
                (p, q + 1, hy),
            ];
            for (pp, qq, h) in nbrs {
                let face = harmonic(c, at(pp, qq)) / (h * h);
                mat[(row, row)] += face;
                let on_boundary = pp == 0 || qq == 0 || pp == nh - 1 || qq == nw - 1;
                if !on_boundary {
                    mat[(row, interior(pp, qq))] -= face;
                }
            }
        }
    }
    let rhs = DVector::<f64>::from_element(m, 1.0);
    let sol = mat
        .lu()
        .solve(&rhs)
        .ok_or_else(|| DopeError::Solver("singular Darcy system".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(DopeError::Solver("non-finite Darcy solution".into()));
    }
    let mut u = vec![0.0; nh * nw];
    for p in 1..nh - 1 {
        for q in 1..nw - 1 {
            u[q + nw * p] = sol[interior(p, q)];
        }
    }
    Ok(u)
}

/// Design `q ∝ exp(λ|S̃|) + ε` from the normalized saliency
/// `S = a⁻¹ (0.5 + |u| + |∇u|)`.
pub fn darcy_design(
    a: &[f64],
    u: &[f64],
    grid: &Grid2D,
    temperature: f64,
    floor: f64,
) -> Result<DesignWeights> {
    let (nh, nw) = (grid.rows(), grid.cols());
    if a.len() != nh * nw || u.len() != nh * nw {
        return Err(DopeError::Shape("design inputs do not match the grid".into()));
    }
    if !(floor > 0.0) || !temperature.is_finite() {
        return Err(DopeError::InvalidParameter(format!(
            "design temperature {temperature} / floor {floor}"
        )));
    }
    let at = |p: usize, q: usize| u[q + nw * p];
    // centered differences inside, one-sided at the boundary
    let diff = |lo: f64, mid: f64, hi: f64, has_lo: bool, has_hi: bool| match (has_lo, has_hi) {
        (true, true) => hi - lo,
        (false, true) => hi - mid,
        (true, false) => mid - lo,
        (false, false) => 0.0,
    };
    let mut s = vec![0.0; nh * nw];
    for p in 0..nh {
        for q in 0..nw {
            let c = at(p, q);
            let gx = diff(
                if p > 0 { at(p - 1, q) } else { c },
                c,
                if p + 1 < nh { at(p + 1, q) } else { c },
                p > 0,
                p + 1 < nh,
            );
            let gy = diff(
                if q > 0 { at(p, q - 1) } else { c },
                c,
                if q + 1 < nw { at(p, q + 1) } else { c },
                q > 0,
                q + 1 < nw,
            );
            let g = (gx * gx + gy * gy).sqrt();
            let inv = 1.0 / a[q + nw * p].max(1e-8);
            s[q + nw * p] = inv * (0.5 + c.abs() + g);
        }
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(DopeError::NumericInput("non-finite saliency".into()));
    }
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let spread = s.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    let raw: Vec<f64> = s
        .iter()
        .map(|v| {
            let z = if spread > 0.0 { (v - mean) / spread } else { 0.0 };
            (temperature * z.abs()).exp() + floor
        })
        .collect();
    let total: f64 = raw.iter().sum();
    DesignWeights::new(raw.into_iter().map(|v| v / total).collect(), &grid.weights())
}

pub fn simulate_darcy<R: Rng + ?Sized>(rng: &mut R, cfg: &DarcyConfig, grid: &Grid2D) -> Result<Observation> {
    let a = sample_coefficient(rng, cfg)?;
    let u = solve_darcy(&a, grid)?;
    let design = darcy_design(&a, &u, grid, cfg.design_temperature, cfg.design_floor)?;
    let (idx, y) = sample_observations(&design, &u, cfg.k, cfg.sigma_eps, rng)?;
    Observation::new(InputField::Darcy { a }, idx, y, design, Some(u))
}

/// `n` independent Darcy samples drawn from the stream `(seed, role, index)`.
pub fn generate_darcy_dataset(
    n: usize,
    cfg: &DarcyConfig,
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
        .map(|_| simulate_darcy(&mut rng, cfg, &grid))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        domain: Domain::Square(grid),
        samples,
    })
}
