//! Oracle and invariant suites, shared by `dope verify` and the acceptance
//! target.

use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use dope_core::autodiff::{forward_jvp, reverse_gradient, Tape, Tensor, Var};
use dope_core::darcy::{solve_darcy, DarcyConfig};
use dope_core::data::DesignWeights;
use dope_core::functional::{functional_jvp, functional_value, riesz_representer, FunctionalSpec};
use dope_core::grid::{Domain, Grid1D, Grid2D, QuadratureWeights};
use dope_core::operators::{
    bases_1d, bases_2d, BackboneConfig, DeepONetConfig, FnoConfig, Operator,
};
use dope_core::pk::{generate_pk_dataset, pk_design, sample_dosing, sample_pk_params, solve_pk, PkConfig};
use dope_core::riesz::oracle_beta;
use dope_core::rng::{stream, Role, StreamRng};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] {} ({:.1}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteSizes {
    pub jvp_pairs: usize,
    pub riesz_draws: usize,
    pub riesz_directions: usize,
    pub identity_samples: usize,
    pub solver_inputs: usize,
    pub rate_repeats: usize,
    pub rate_pool: usize,
}

impl SuiteSizes {
    pub fn full() -> Self {
        Self {
            jvp_pairs: 100,
            riesz_draws: 1_000_000,
            riesz_directions: 20,
            identity_samples: 10_000,
            solver_inputs: 100,
            rate_repeats: 200,
            rate_pool: 200_000,
        }
    }
}

pub fn all_functionals() -> [FunctionalSpec; 4] {
    [
        FunctionalSpec::auc(),
        FunctionalSpec::tat(),
        FunctionalSpec::soft_cmax(),
        FunctionalSpec::smooth_excess_sweep(0.5),
    ]
}

/// Smooth random function on `t ∈ [0, 1]`, values roughly in `[lo, hi]`.
fn smooth_random(rng: &mut StreamRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let coef: Vec<(f64, f64)> = (1..=4)
        .map(|k| (rng.gen_range(-1.0..1.0) / k as f64, rng.gen_range(0.0..2.0 * PI)))
        .collect();
    (0..n)
        .map(|j| {
            let t = j as f64 / (n - 1) as f64;
            let s: f64 = coef
                .iter()
                .enumerate()
                .map(|(k, (a, ph))| a * (2.0 * PI * (k + 1) as f64 * t + ph).sin())
                .sum();
            lo + (hi - lo) * (0.5 + 0.35 * s)
        })
        .collect()
}

fn dot_w(a: &[f64], b: &[f64], w: &QuadratureWeights) -> f64 {
    a.iter().zip(b).zip(w.values()).map(|((x, y), z)| x * y * z).sum()
}

/// Forward-mode JVP against the closed-form representer and central
/// differences for every functional.
pub fn functional_suite(pairs: usize, seed: u64) -> CheckOutcome {
    timed("functional JVP suite", || {
        let grid = Grid1D::new(24.0, 128)?;
        let w = grid.weights();
        let mut rng = stream(seed, Role::MonteCarlo, 1);
        let (mut worst_rep, mut worst_fd) = (0.0f64, 0.0f64);
        for spec in all_functionals() {
            for _ in 0..pairs {
                let u = smooth_random(&mut rng, 128, -0.2, 1.2);
                let b: Vec<f64> = (0..128).map(|_| StandardNormal.sample(&mut rng)).collect();
                let jvp = functional_jvp(&spec, &u, &b, &w)?;
                let rep = riesz_representer(&spec, &u, &w)?;
                let closed = dot_w(&rep, &b, &w);
                let scale: f64 = rep
                    .iter()
                    .zip(&b)
                    .zip(w.values())
                    .map(|((r, x), z)| (r * x * z).abs())
                    .sum::<f64>()
                    .max(f64::MIN_POSITIVE);
                let h = 1e-5;
                let up: Vec<f64> = u.iter().zip(&b).map(|(a, c)| a + h * c).collect();
                let dn: Vec<f64> = u.iter().zip(&b).map(|(a, c)| a - h * c).collect();
                let fd = (functional_value(&spec, &up, &w)? - functional_value(&spec, &dn, &w)?) / (2.0 * h);
                worst_rep = worst_rep.max((jvp - closed).abs() / scale);
                worst_fd = worst_fd.max((jvp - fd).abs() / scale);
            }
        }
        Ok((
            worst_rep <= 1e-10 && worst_fd <= 1e-6,
            format!("4 functionals x {pairs} pairs; max rel. error vs representer {worst_rep:.2e} (tol 1e-10), vs central differences {worst_fd:.2e} (tol 1e-6)"),
        ))
    })
}

type Scalar = dyn Fn(&mut Tape, &[Var]) -> dope_core::Result<Var>;

/// Largest relative disagreement between reverse-mode gradients and central
/// differences, checking up to `per_tensor` coordinates of every parameter.
fn fd_check(params: &[Tensor], f: &Scalar, per_tensor: usize) -> Result<f64> {
    let (_, grads) = reverse_gradient(params, |t, v| f(t, v))?;
    let eval = |p: &[Tensor]| -> Result<f64> { Ok(reverse_gradient(p, |t, v| f(t, v))?.0) };
    let mut worst = 0.0f64;
    for (ti, t) in params.iter().enumerate() {
        let gmax = grads[ti].iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let stride = (t.len() / per_tensor).max(1);
        for j in (0..t.len()).step_by(stride).take(per_tensor) {
            let h = 1e-6 * t.data[j].abs().max(1.0);
            let mut p = params.to_vec();
            p[ti].data[j] += h;
            let up = eval(&p)?;
            p[ti].data[j] -= 2.0 * h;
            let dn = eval(&p)?;
            let fd = (up - dn) / (2.0 * h);
            let ad = grads[ti][j];
            let denom = ad.abs().max(fd.abs()).max(1e-3 * gmax).max(1e-12);
            worst = worst.max((ad - fd).abs() / denom);
        }
    }
    Ok(worst)
}

/// Reverse-mode gradient against a forward-mode JVP in a random direction.
fn jvp_consistency(params: &[Tensor], f: &Scalar, rng: &mut StreamRng) -> Result<f64> {
    let (_, grads) = reverse_gradient(params, |t, v| f(t, v))?;
    let dirs: Vec<Vec<f64>> = params
        .iter()
        .map(|t| (0..t.len()).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    let (_, jvp) = forward_jvp(params, &dirs, |t, v| f(t, v))?;
    let mut dot = 0.0;
    let mut scale = 0.0;
    for (g, d) in grads.iter().zip(&dirs) {
        for (a, b) in g.iter().zip(d) {
            dot += a * b;
            scale += (a * b).abs();
        }
    }
    Ok((dot - jvp).abs() / scale.max(1e-300))
}

fn random_tensor(rng: &mut StreamRng, rows: usize, cols: usize, sd: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect();
    Tensor::new(rows, cols, data).expect("shape is consistent")
}

/// Finite-difference checks of every backbone block and of the training
/// objectives built from them.
pub fn gradient_suite(seed: u64) -> CheckOutcome {
    timed("gradient suite", || {
        let mut rng = stream(seed, Role::MonteCarlo, 2);
        let mut results: Vec<(String, f64)> = Vec::new();
        let mut check = |name: &str, params: Vec<Tensor>, f: Box<Scalar>, rng: &mut StreamRng| -> Result<()> {
            let fd = fd_check(&params, f.as_ref(), 24)?;
            let fw = jvp_consistency(&params, f.as_ref(), rng)?;
            results.push((name.to_string(), fd.max(fw)));
            Ok(())
        };

        // Pointwise lift: W x + b followed by a weighted sum.
        let x = random_tensor(&mut rng, 4, 20, 1.0);
        let c = random_tensor(&mut rng, 1, 6 * 20, 1.0).data;
        let p = vec![random_tensor(&mut rng, 6, 4, 0.5), random_tensor(&mut rng, 6, 1, 0.5)];
        let (xc, cc) = (x.clone(), std::sync::Arc::new(c));
        check(
            "pointwise linear",
            p,
            Box::new(move |t, v| {
                let xv = t.leaf(&xc);
                let y = t.matmul(v[0], xv)?;
                let y = t.add_row_bias(y, v[1])?;
                let y = t.reshape(y, 1, 120)?;
                t.dot_const(y, cc.clone())
            }),
            &mut rng,
        )?;

        // Spectral convolution in 1D and 2D.
        for (name, bases, n) in [
            ("spectral convolution 1d", bases_1d(16, 4), 16usize),
            ("spectral convolution 2d", bases_2d(8, 8, 2), 64usize),
        ] {
            let (cin, cout, batch) = (3, 2, 2);
            let x = random_tensor(&mut rng, cin * batch, n, 1.0);
            let wr = random_tensor(&mut rng, cin * cout, bases.modes, 0.5);
            let wi = random_tensor(&mut rng, cin * cout, bases.modes, 0.5);
            let c = std::sync::Arc::new(random_tensor(&mut rng, 1, cout * batch * n, 1.0).data);
            check(
                name,
                vec![x, wr, wi],
                Box::new(move |t, v| {
                    let s = t.matmul_const(v[0], &bases.analysis)?;
                    let m = t.spectral_mix(s, v[1], v[2], cin, cout)?;
                    let y = t.matmul_const(m, &bases.synthesis)?;
                    let y = t.reshape(y, 1, cout * batch * n)?;
                    t.dot_const(y, c.clone())
                }),
                &mut rng,
            )?;
        }

        // Activations and the squared-error head.
        let x = random_tensor(&mut rng, 1, 30, 2.0);
        let c = std::sync::Arc::new(random_tensor(&mut rng, 1, 30, 1.0).data);
        let cc = c.clone();
        check(
            "gelu",
            vec![x.clone()],
            Box::new(move |t, v| {
                let y = t.gelu(v[0]);
                t.dot_const(y, cc.clone())
            }),
            &mut rng,
        )?;
        let cc = c.clone();
        check(
            "clamped exponential",
            vec![x.clone()],
            Box::new(move |t, v| {
                let y = t.exp_clamp(v[0], -1.5, 1.5);
                t.dot_const(y, cc.clone())
            }),
            &mut rng,
        )?;
        let idx = std::sync::Arc::new(vec![0usize, 3, 7, 8, 21, 29]);
        let target = random_tensor(&mut rng, 1, 6, 1.0);
        check(
            "masked squared error",
            vec![x],
            Box::new(move |t, v| {
                let g = t.gather(v[0], idx.clone())?;
                let y = t.leaf(&target);
                let r = t.sub(g, y)?;
                let s = t.square(r);
                let a = t.dot_const(s, std::sync::Arc::new(vec![0.3; 6]))?;
                let b = t.sum_squares(v[0]);
                let b = t.scale(b, 0.1);
                t.add(a, b)
            }),
            &mut rng,
        )?;

        // Whole backbones at small widths.
        let line = Domain::Line(Grid1D::new(24.0, 16)?);
        let square = Domain::Square(Grid2D::new(8, 8)?);
        let backbones = [
            (
                "fno 1d",
                BackboneConfig::Fno1d(FnoConfig {
                    in_channels: 4,
                    hidden_channels: 5,
                    out_channels: 1,
                    n_layers: 2,
                    modes: 4,
                }),
                line.clone(),
            ),
            (
                "fno 2d",
                BackboneConfig::Fno2d(FnoConfig {
                    in_channels: 3,
                    hidden_channels: 4,
                    out_channels: 1,
                    n_layers: 2,
                    modes: 2,
                }),
                square,
            ),
            (
                "deeponet",
                BackboneConfig::DeepOnet(DeepONetConfig {
                    in_channels: 4,
                    branch_width: 6,
                    trunk_width: 6,
                    latent: 5,
                    out_channels: 1,
                }),
                line,
            ),
        ];
        for (name, cfg, domain) in backbones {
            let op = Operator::init(cfg, &domain, &mut rng)?;
            let batch = 2;
            let n = domain.len();
            let x = random_tensor(&mut rng, cfg.in_channels(), batch * n, 1.0);
            let c = std::sync::Arc::new(random_tensor(&mut rng, 1, batch * n, 1.0).data);
            let params = op.tensors().to_vec();
            check(
                name,
                params,
                Box::new(move |t, v| {
                    let xv = t.leaf(&x);
                    let y = op.forward(t, v, xv, batch)?;
                    let sq = t.square(y);
                    let a = t.dot_const(sq, c.clone())?;
                    let b = t.dot_const(y, c.clone())?;
                    t.add(a, b)
                }),
                &mut rng,
            )?;
        }

        let worst = results.iter().fold(0.0f64, |m, r| m.max(r.1));
        let detail = results
            .iter()
            .map(|(n, e)| format!("{n} {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", ");
        Ok((worst <= 1e-5, format!("max rel. error {worst:.2e} (tol 1e-5): {detail}")))
    })
}

/// Inverse-CDF sampler on grid indices.
struct GridSampler {
    cdf: Vec<f64>,
}

impl GridSampler {
    fn new(p: &[f64]) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = p
            .iter()
            .map(|v| {
                acc += v;
                acc
            })
            .collect();
        let total = acc;
        for c in &mut cdf {
            *c /= total;
        }
        Self { cdf }
    }

    fn draw(&self, rng: &mut StreamRng) -> usize {
        let u: f64 = rng.gen();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

fn mean_se(v: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let (mut n, mut m, mut s) = (0usize, 0.0, 0.0);
    for x in v {
        n += 1;
        let d = x - m;
        m += d / n as f64;
        s += d * (x - m);
    }
    let var = if n > 1 { s / (n - 1) as f64 } else { 0.0 };
    (m, (var / n as f64).sqrt(), n)
}

/// `E_{X~p}[β₀(X) h(X)] = ⟨w_g(u), h⟩` for a peaked design, by Monte Carlo.
pub fn riesz_identity_suite(draws: usize, directions: usize, seed: u64) -> CheckOutcome {
    timed("oracle Riesz identity", || {
        let cfg = PkConfig::default();
        let ds = generate_pk_dataset(1, 1.0, &cfg, seed, Role::MonteCarlo, 3)?;
        let o = &ds.samples[0];
        let w = ds.domain.weights();
        let u = o.oracle_trajectory()?;
        let sampler = GridSampler::new(o.design.p());
        let mut rng = stream(seed, Role::MonteCarlo, 4);
        let mut counts = vec![0usize; u.len()];
        for _ in 0..draws {
            counts[sampler.draw(&mut rng)] += 1;
        }
        let mut worst = 0.0f64;
        let mut failures = 0;
        for d in 0..directions {
            let spec = all_functionals()[d % 4];
            let h = smooth_random(&mut rng, u.len(), -1.0, 1.0);
            let beta = oracle_beta(&o.design, &spec, u, &w)?;
            let exact = dot_w(&riesz_representer(&spec, u, &w)?, &h, &w);
            let vals: Vec<f64> = beta.iter().zip(&h).map(|(b, x)| b * x).collect();
            let mean = counts.iter().zip(&vals).map(|(&c, v)| c as f64 * v).sum::<f64>() / draws as f64;
            let var = counts
                .iter()
                .zip(&vals)
                .map(|(&c, v)| c as f64 * (v - mean).powi(2))
                .sum::<f64>()
                / (draws - 1) as f64;
            let z = (mean - exact).abs() / (var / draws as f64).sqrt();
            worst = worst.max(z);
            if z > 3.0 {
                failures += 1;
            }
        }
        Ok((
            failures == 0,
            format!("{draws} design draws, {directions} directions; max |z| = {worst:.2} (bound 3), {failures} outside"),
        ))
    })
}

/// One simulated subject with `k` observation locations drawn i.i.d. from
/// its design.
struct IidSubject {
    u: Vec<f64>,
    design: DesignWeights,
    obs: Vec<usize>,
    y: Vec<f64>,
}

fn iid_subject(rng: &mut StreamRng, cfg: &PkConfig, grid: &Grid1D, rho: f64) -> Result<IidSubject> {
    let (cl, v) = sample_pk_params(rng, cfg);
    let r = sample_dosing(rng, grid);
    let u = solve_pk(&r, cl, v, grid)?;
    let design = pk_design(&u, grid, rho, cfg.window_half_width)?;
    let sampler = GridSampler::new(design.p());
    let obs: Vec<usize> = (0..cfg.k).map(|_| sampler.draw(rng)).collect();
    let y = obs
        .iter()
        .map(|&j| {
            let e: f64 = StandardNormal.sample(rng);
            u[j] + cfg.sigma_eps * e
        })
        .collect();
    Ok(IidSubject { u, design, obs, y })
}

fn weighted_residual(s: &IidSubject, s_hat: &[f64], beta: &[f64]) -> f64 {
    s.obs
        .iter()
        .zip(&s.y)
        .map(|(&j, y)| beta[j] * (y - s_hat[j]))
        .sum::<f64>()
        / s.obs.len() as f64
}

/// Injected operator error used by the identity checks.
fn injected_error(u: &[f64], grid: &Grid1D) -> Vec<f64> {
    let t = grid.points();
    u.iter()
        .zip(t)
        .map(|(v, t)| 0.03 * (2.0 * PI * t / grid.horizon()).sin() + 0.15 * v)
        .collect()
}

/// With the oracle weight, the mean weighted residual of `S₀ + Δ` equals
/// `−E[Dg_{S₀(A)}(Δ(A))]`.
pub fn debiasing_identity_suite(samples: usize, seed: u64) -> CheckOutcome {
    timed("debiasing identity", || {
        let cfg = PkConfig::default();
        let grid = cfg.grid()?;
        let w = grid.weights();
        let spec = FunctionalSpec::tat();
        let mut rng = stream(seed, Role::MonteCarlo, 5);
        let mut diffs = Vec::with_capacity(samples);
        for i in 0..samples {
            let rho = (i % 9) as f64 / 8.0;
            let s = iid_subject(&mut rng, &cfg, &grid, rho)?;
            let delta = injected_error(&s.u, &grid);
            let s_hat: Vec<f64> = s.u.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let beta = oracle_beta(&s.design, &spec, &s.u, &w)?;
            let lhs = weighted_residual(&s, &s_hat, &beta);
            let rhs = -functional_jvp(&spec, &s.u, &delta, &w)?;
            diffs.push((lhs, rhs));
        }
        let (m_lhs, _, _) = mean_se(diffs.iter().map(|d| d.0));
        let (m_rhs, _, _) = mean_se(diffs.iter().map(|d| d.1));
        let (m, se, _) = mean_se(diffs.iter().map(|d| d.0 - d.1));
        let z = m.abs() / se;
        Ok((
            z <= 3.0,
            format!("{samples} subjects: mean residual {m_lhs:.5}, -E[Dg(Delta)] {m_rhs:.5}, |z| = {z:.2} (bound 3)"),
        ))
    })
}

/// Central-difference derivatives of the mean score at the truth.
pub fn orthogonality_suite(samples: usize, seed: u64) -> CheckOutcome {
    timed("orthogonality", || {
        let cfg = PkConfig::default();
        let grid = cfg.grid()?;
        let w = grid.weights();
        let spec = FunctionalSpec::tat();
        let step = 0.05;
        let t = grid.points();
        let h_s: Vec<f64> = t.iter().map(|x| 0.05 + 0.1 * (2.0 * PI * x / grid.horizon()).cos()).collect();
        let h_b: Vec<f64> = t.iter().map(|x| 1.0 + (2.0 * PI * x / grid.horizon()).sin()).collect();
        let mut rng = stream(seed, Role::MonteCarlo, 6);
        let (mut ds, mut db, mut dp) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..samples {
            let s = iid_subject(&mut rng, &cfg, &grid, 0.5)?;
            let beta = oracle_beta(&s.design, &spec, &s.u, &w)?;
            let shift = |sign: f64| -> Vec<f64> { s.u.iter().zip(&h_s).map(|(a, b)| a + sign * step * b).collect() };
            let (up, dn) = (shift(1.0), shift(-1.0));
            let score = |u: &[f64], b: &[f64]| -> Result<f64> {
                Ok(functional_value(&spec, u, &w)? + weighted_residual(&s, u, b))
            };
            ds.push((score(&up, &beta)? - score(&dn, &beta)?) / (2.0 * step));
            let bshift = |sign: f64| -> Vec<f64> { beta.iter().zip(&h_b).map(|(a, b)| a + sign * step * b).collect() };
            db.push((score(&s.u, &bshift(1.0))? - score(&s.u, &bshift(-1.0))?) / (2.0 * step));
            dp.push((functional_value(&spec, &up, &w)? - functional_value(&spec, &dn, &w)?) / (2.0 * step));
        }
        let (ms, ses, _) = mean_se(ds.into_iter());
        let (mb, seb, _) = mean_se(db.into_iter());
        let (mp, sep, _) = mean_se(dp.into_iter());
        let (zs, zb, zp) = (ms.abs() / ses, mb.abs() / seb, mp.abs() / sep);
        Ok((
            zs <= 3.0 && zb <= 3.0 && zp > 3.0,
            format!(
                "{samples} subjects: score derivative along S {ms:.2e} (|z| {zs:.2}), along beta {mb:.2e} (|z| {zb:.2}); plug-in along S {mp:.2e} (|z| {zp:.1}, must exceed 3)"
            ),
        ))
    })
}

/// Classical RK4 with the forcing held at its left grid value.
fn rk4_reference(r: &[f64], cl: f64, v: f64, grid: &Grid1D, substeps: usize) -> Vec<f64> {
    let dt = grid.step() / substeps as f64;
    let k = cl / v;
    let mut u = vec![0.0; r.len()];
    let mut x = 0.0;
    for d in 1..r.len() {
        let f = r[d - 1] / v;
        let rhs = |y: f64| -k * y + f;
        for _ in 0..substeps {
            let k1 = rhs(x);
            let k2 = rhs(x + 0.5 * dt * k1);
            let k3 = rhs(x + 0.5 * dt * k2);
            let k4 = rhs(x + dt * k3);
            x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        u[d] = x;
    }
    u
}

/// Center value of `−Δu = 1` on the unit square with zero boundary values.
pub fn poisson_center_series(terms: usize) -> f64 {
    let mut s = 0.0;
    for m in (1..=terms).step_by(2) {
        for n in (1..=terms).step_by(2) {
            let (mf, nf) = (m as f64, n as f64);
            let sign = if ((m + n) / 2 - 1) % 2 == 0 { 1.0 } else { -1.0 };
            s += 16.0 / (PI.powi(4) * mf * nf * (mf * mf + nf * nf)) * sign;
        }
    }
    s
}

pub fn solver_suite(inputs: usize, seed: u64) -> CheckOutcome {
    timed("PDE solvers", || {
        let cfg = PkConfig::default();
        let grid = cfg.grid()?;
        let mut rng = stream(seed, Role::MonteCarlo, 7);
        let mut worst = 0.0f64;
        for _ in 0..inputs {
            let (cl, v) = sample_pk_params(&mut rng, &cfg);
            let r = sample_dosing(&mut rng, &grid);
            let u = solve_pk(&r, cl, v, &grid)?;
            let reference = rk4_reference(&r, cl, v, &grid, 40);
            let num: f64 = u.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum();
            let den: f64 = reference.iter().map(|b| b * b).sum();
            worst = worst.max((num / den).sqrt());
        }
        let dc = DarcyConfig::default();
        let g2 = dc.grid()?;
        let n = g2.rows();
        let u = solve_darcy(&vec![1.0; g2.len()], &g2)?;
        let center = u[g2.flat(n / 2, n / 2)];
        let series = poisson_center_series(401);
        let mut asym = 0.0f64;
        for p in 0..n {
            for q in 0..n {
                let v = u[g2.flat(p, q)];
                for other in [g2.flat(q, p), g2.flat(n - 1 - p, q), g2.flat(p, n - 1 - q)] {
                    asym = asym.max((v - u[other]).abs());
                }
            }
        }
        let ok = worst < 1e-3 && (center - series).abs() < 2e-3 && asym <= 1e-12;
        Ok((
            ok,
            format!(
                "PK vs RK4 max rel. L2 {worst:.2e} over {inputs} inputs (tol 1e-3); Darcy center {center:.5} vs series {series:.5} (tol 2e-3); max asymmetry {asym:.1e}"
            ),
        ))
    })
}

/// Least-squares slope of `log y` on `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Root-mean-square error of the oracle-nuisance estimate against `n`.
pub fn rate_suite(repeats: usize, pool: usize, seed: u64) -> CheckOutcome {
    timed("root-n rate", || {
        let cfg = PkConfig::default();
        let grid = cfg.grid()?;
        let w = grid.weights();
        let spec = FunctionalSpec::auc();
        let rho = 0.5;
        let mut rng = stream(seed, Role::TruthPool, 8);
        let mut truth = 0.0;
        for _ in 0..pool {
            let (cl, v) = sample_pk_params(&mut rng, &cfg);
            let r = sample_dosing(&mut rng, &grid);
            truth += functional_value(&spec, &solve_pk(&r, cl, v, &grid)?, &w)?;
        }
        truth /= pool as f64;
        let sizes = [64usize, 256, 1024];
        let mut rmse = Vec::new();
        for (si, &n) in sizes.iter().enumerate() {
            let mut sq = 0.0;
            for rep in 0..repeats {
                let ds = generate_pk_dataset(n, rho, &cfg, seed, Role::MonteCarlo, 1000 * (si as u64 + 1) + rep as u64)?;
                let mut total = 0.0;
                for o in &ds.samples {
                    let u = o.oracle_trajectory()?;
                    let beta = oracle_beta(&o.design, &spec, u, &w)?;
                    total += dope_core::estimator::pseudo_outcome(u, &beta, o, &spec, &w)?;
                }
                sq += (total / n as f64 - truth).powi(2);
            }
            rmse.push((sq / repeats as f64).sqrt());
        }
        let x: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
        let slope = log_log_slope(&x, &rmse);
        Ok((
            (slope + 0.5).abs() <= 0.15,
            format!(
                "RMSE {:.2e} / {:.2e} / {:.2e} at n = 64 / 256 / 1024 over {repeats} repeats; slope {slope:.3} (target -0.5 +- 0.15)",
                rmse[0], rmse[1], rmse[2]
            ),
        ))
    })
}

/// Every suite at `sizes`; the closure sees each outcome as it completes.
pub fn run_all(sizes: SuiteSizes, seed: u64, mut report: impl FnMut(&CheckOutcome)) -> Vec<CheckOutcome> {
    let suites: Vec<Box<dyn FnOnce() -> CheckOutcome>> = vec![
        Box::new(move || functional_suite(sizes.jvp_pairs, seed)),
        Box::new(move || gradient_suite(seed)),
        Box::new(move || riesz_identity_suite(sizes.riesz_draws, sizes.riesz_directions, seed)),
        Box::new(move || debiasing_identity_suite(sizes.identity_samples, seed)),
        Box::new(move || orthogonality_suite(sizes.identity_samples, seed)),
        Box::new(move || solver_suite(sizes.solver_inputs, seed)),
        Box::new(move || rate_suite(sizes.rate_repeats, sizes.rate_pool, seed)),
    ];
    suites
        .into_iter()
        .map(|s| {
            let out = s();
            report(&out);
            out
        })
        .collect()
}

/// Error unless every outcome passed.
pub fn require_all(outcomes: &[CheckOutcome]) -> Result<()> {
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Runtime(format!("failed suites: {}", failed.join(", "))))
    }
}
