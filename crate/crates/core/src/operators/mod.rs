//! Neural operator backbones: Fourier neural operators on the line and the
//! square, and a branch/trunk DeepONet.
//!
//! Batched activations are `channels x (batch * grid)` matrices, so a
//! pointwise channel map is a single matrix product and reinterpreting the
//! same buffer as `(channels * batch) x grid` exposes one signal per row for
//! the Fourier transform.

mod spectral;
mod train;

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::InputField;
use crate::error::{DopeError, Result};
use crate::grid::Domain;

pub use spectral::{bases_1d, bases_2d, SpectralBases};
pub(crate) use train::stack_inputs;
pub use train::{batch_input, train_loop, train_solution_operator, TrainConfig, TrainingMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FnoConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub out_channels: usize,
    pub n_layers: usize,
    pub modes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeepONetConfig {
    pub in_channels: usize,
    pub branch_width: usize,
    pub trunk_width: usize,
    pub latent: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "backbone", rename_all = "snake_case")]
pub enum BackboneConfig {
    Fno1d(FnoConfig),
    Fno2d(FnoConfig),
    DeepOnet(DeepONetConfig),
}

impl BackboneConfig {
    pub fn pk_fno() -> Self {
        BackboneConfig::Fno1d(FnoConfig {
            in_channels: 4,
            hidden_channels: 32,
            out_channels: 1,
            n_layers: 3,
            modes: 12,
        })
    }

    pub fn darcy_fno() -> Self {
        BackboneConfig::Fno2d(FnoConfig {
            in_channels: 3,
            hidden_channels: 24,
            out_channels: 1,
            n_layers: 3,
            modes: 8,
        })
    }

    pub fn pk_deeponet() -> Self {
        BackboneConfig::DeepOnet(DeepONetConfig {
            in_channels: 4,
            branch_width: 32,
            trunk_width: 32,
            latent: 32,
            out_channels: 1,
        })
    }

    pub fn in_channels(&self) -> usize {
        match self {
            BackboneConfig::Fno1d(c) | BackboneConfig::Fno2d(c) => c.in_channels,
            BackboneConfig::DeepOnet(c) => c.in_channels,
        }
    }

    /// Check the configuration against a grid.
    pub fn validate(&self, domain: &Domain) -> Result<()> {
        let bad = |m: String| Err(DopeError::Config(m));
        match (self, domain) {
            (BackboneConfig::Fno1d(c), Domain::Line(g)) => {
                check_counts(c)?;
                if 2 * c.modes > g.len() {
                    return bad(format!("{} modes need at least {} grid points", c.modes, 2 * c.modes));
                }
                Ok(())
            }
            (BackboneConfig::Fno2d(c), Domain::Square(g)) => {
                check_counts(c)?;
                if 2 * c.modes > g.rows() || 2 * c.modes > g.cols() {
                    return bad(format!(
                        "{} modes per axis need at least {} points per axis",
                        c.modes,
                        2 * c.modes
                    ));
                }
                Ok(())
            }
            (BackboneConfig::DeepOnet(c), _) => {
                if c.latent == 0 || c.branch_width == 0 || c.trunk_width == 0 || c.in_channels == 0 {
                    return bad("DeepONet widths must be positive".into());
                }
                if c.out_channels != 1 {
                    return bad("DeepONet supports a single output channel".into());
                }
                Ok(())
            }
            _ => bad(format!("backbone {self:?} does not match a {}D grid", domain.dim())),
        }
    }

    /// SHA-256 of the canonical JSON of the configuration and grid size.
    pub fn hash(&self, domain: &Domain) -> String {
        let text = serde_json::to_string(&(self, domain.len(), domain.dim())).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn check_counts(c: &FnoConfig) -> Result<()> {
    if c.in_channels == 0 || c.hidden_channels == 0 || c.out_channels == 0 || c.n_layers == 0 || c.modes == 0 {
        return Err(DopeError::Config(format!("all FNO sizes must be positive: {c:?}")));
    }
    Ok(())
}

/// Shared, grid-dependent constants of a backbone.
#[derive(Debug, Clone)]
enum Consts {
    Fourier(Arc<SpectralBases>),
    Trunk { coords: Arc<Tensor> },
}

/// A backbone bound to a grid together with its parameter tensors.
///
/// Parameters are only ever replaced wholesale by training; evaluation
/// borrows them immutably.
#[derive(Debug, Clone)]
pub struct Operator {
    config: BackboneConfig,
    domain: Domain,
    consts: Consts,
    tensors: Vec<Tensor>,
    meta: TrainingMeta,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    FanIn(usize),
    Gaussian(f64),
    Zero,
}

/// Shapes and initialization rules of every parameter tensor, in order.
fn layout(config: &BackboneConfig, domain: &Domain, consts: &Consts) -> Vec<(usize, usize, Init)> {
    let mut out = Vec::new();
    match (config, consts) {
        (BackboneConfig::Fno1d(c) | BackboneConfig::Fno2d(c), Consts::Fourier(b)) => {
            let h = c.hidden_channels;
            out.push((h, c.in_channels, Init::FanIn(c.in_channels)));
            out.push((h, 1, Init::FanIn(c.in_channels)));
            let scale = 1.0 / (h * c.modes) as f64;
            for _ in 0..c.n_layers {
                out.push((h * h, b.modes, Init::Gaussian(scale)));
                out.push((h * h, b.modes, Init::Gaussian(scale)));
                out.push((h, h, Init::FanIn(h)));
                out.push((h, 1, Init::FanIn(h)));
            }
            out.push((c.out_channels, h, Init::FanIn(h)));
            out.push((c.out_channels, 1, Init::FanIn(h)));
        }
        (BackboneConfig::DeepOnet(c), Consts::Trunk { coords }) => {
            let d_in = c.in_channels * domain.len();
            let (bw, tw, p) = (c.branch_width, c.trunk_width, c.latent);
            for (fan, width) in [(d_in, bw), (bw, bw), (bw, p), (coords.cols, tw), (tw, tw), (tw, p)] {
                out.push((fan, width, Init::FanIn(fan)));
                out.push((1, width, Init::FanIn(fan)));
            }
            out.push((1, 1, Init::Zero));
        }
        _ => unreachable!("constants follow the configuration"),
    }
    out
}

impl Operator {
    /// Fresh, randomly initialized operator.
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, domain: &Domain, rng: &mut R) -> Result<Self> {
        config.validate(domain)?;
        let consts = Self::consts(&config, domain);
        let tensors = layout(&config, domain, &consts)
            .into_iter()
            .map(|(rows, cols, init)| {
                let data = (0..rows * cols)
                    .map(|_| match init {
                        Init::FanIn(fan) => {
                            let bound = 1.0 / (fan as f64).sqrt();
                            rng.gen_range(-bound..bound)
                        }
                        Init::Gaussian(scale) => scale * rng.sample::<f64, _>(StandardNormal),
                        Init::Zero => 0.0,
                    })
                    .collect();
                Tensor { rows, cols, data }
            })
            .collect();
        Ok(Self {
            config,
            domain: domain.clone(),
            consts,
            tensors,
            meta: TrainingMeta::default(),
        })
    }

    fn consts(config: &BackboneConfig, domain: &Domain) -> Consts {
        match (config, domain) {
            (BackboneConfig::Fno1d(c), Domain::Line(g)) => Consts::Fourier(Arc::new(bases_1d(g.len(), c.modes))),
            (BackboneConfig::Fno2d(c), Domain::Square(g)) => {
                Consts::Fourier(Arc::new(bases_2d(g.rows(), g.cols(), c.modes)))
            }
            _ => {
                let coords = domain.unit_coordinates();
                let dim = domain.dim();
                let data = coords.into_iter().flatten().collect();
                Consts::Trunk {
                    coords: Arc::new(Tensor {
                        rows: domain.len(),
                        cols: dim,
                        data,
                    }),
                }
            }
        }
    }

    /// Rebuild from stored tensors, checking their shapes.
    pub fn from_parts(config: BackboneConfig, domain: &Domain, tensors: Vec<Tensor>, meta: TrainingMeta) -> Result<Self> {
        config.validate(domain)?;
        let consts = Self::consts(&config, domain);
        let shapes = layout(&config, domain, &consts);
        if shapes.len() != tensors.len()
            || shapes
                .iter()
                .zip(&tensors)
                .any(|(&(r, c, _), t)| t.rows != r || t.cols != c || t.data.len() != r * c)
        {
            return Err(DopeError::Checkpoint("parameter shapes do not match the configuration".into()));
        }
        if tensors.iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
            return Err(DopeError::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            domain: domain.clone(),
            consts,
            tensors,
            meta,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Copy with replaced parameters (same shapes).
    pub fn with_tensors(&self, tensors: Vec<Tensor>, meta: TrainingMeta) -> Result<Self> {
        Self::from_parts(self.config, &self.domain, tensors, meta)
    }

    /// SHA-256 over configuration and parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.hash(&self.domain).as_bytes());
        for t in &self.tensors {
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Record the forward pass for a batch on `tape`.
    ///
    /// `x` is `in_channels x (batch * grid)`; the result is
    /// `out_channels x (batch * grid)`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var, batch: usize) -> Result<Var> {
        let n = self.domain.len();
        let (rows, cols) = tape.shape(x);
        if rows != self.config.in_channels() || cols != batch * n {
            return Err(DopeError::Shape(format!(
                "operator input {rows}x{cols}, expected {}x{}",
                self.config.in_channels(),
                batch * n
            )));
        }
        if params.len() != self.tensors.len() {
            return Err(DopeError::Shape("parameter leaves do not match the operator".into()));
        }
        match (&self.config, &self.consts) {
            (BackboneConfig::Fno1d(c) | BackboneConfig::Fno2d(c), Consts::Fourier(b)) => {
                fno_forward(c, b, tape, params, x, batch, n)
            }
            (BackboneConfig::DeepOnet(_), Consts::Trunk { coords }) => {
                let trunk_in = tape.leaf(coords);
                deeponet_forward(tape, params, x, trunk_in, batch, n)
            }
            _ => unreachable!("constants follow the configuration"),
        }
    }

    /// Grid predictions for a set of inputs.
    pub fn predict(&self, inputs: &[&InputField]) -> Result<Vec<Vec<f64>>> {
        let n = self.domain.len();
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(32) {
            let x = batch_input(chunk, &self.domain)?;
            let mut tape = Tape::new();
            let leaves: Vec<Var> = self.tensors.iter().map(|t| tape.leaf(t)).collect();
            let xv = tape.leaf(&x);
            let y = self.forward(&mut tape, &leaves, xv, chunk.len())?;
            let vals = tape.value(y);
            for b in 0..chunk.len() {
                let row = vals[b * n..(b + 1) * n].to_vec();
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(DopeError::NumericInput("operator produced a non-finite value".into()));
                }
                out.push(row);
            }
        }
        Ok(out)
    }

    pub fn predict_one(&self, input: &InputField) -> Result<Vec<f64>> {
        Ok(self.predict(&[input])?.remove(0))
    }

    /// DeepONet evaluation at arbitrary coordinates in `[0,1]^d`.
    pub fn predict_at(&self, input: &InputField, queries: &[Vec<f64>]) -> Result<Vec<f64>> {
        let BackboneConfig::DeepOnet(_) = self.config else {
            return Err(DopeError::Config("off-grid queries need a DeepONet backbone".into()));
        };
        let dim = self.domain.dim();
        if queries.iter().any(|q| q.len() != dim) {
            return Err(DopeError::Shape(format!("queries must have {dim} coordinates")));
        }
        let n = self.domain.len();
        let x = batch_input(&[input], &self.domain)?;
        let mut tape = Tape::new();
        let leaves: Vec<Var> = self.tensors.iter().map(|t| tape.leaf(t)).collect();
        let xv = tape.leaf(&x);
        let coords = tape.leaf_owned(queries.len(), dim, queries.iter().flatten().cloned().collect())?;
        let branch = deeponet_branch(&mut tape, &leaves, xv, 1, n)?;
        let y = deeponet_combine(&mut tape, &leaves, branch, coords, 1, queries.len())?;
        Ok(tape.value(y).to_vec())
    }
}

fn fno_forward(
    c: &FnoConfig,
    b: &SpectralBases,
    tape: &mut Tape,
    p: &[Var],
    x: Var,
    batch: usize,
    n: usize,
) -> Result<Var> {
    let hdim = c.hidden_channels;
    let mut h = tape.matmul(p[0], x)?;
    h = tape.add_row_bias(h, p[1])?;
    for l in 0..c.n_layers {
        let base = 2 + 4 * l;
        let signals = tape.reshape(h, hdim * batch, n)?;
        let spec = tape.matmul_const(signals, &b.analysis)?;
        let mixed = tape.spectral_mix(spec, p[base], p[base + 1], hdim, hdim)?;
        let back = tape.matmul_const(mixed, &b.synthesis)?;
        let back = tape.reshape(back, hdim, batch * n)?;
        let skip = tape.matmul(p[base + 2], h)?;
        let skip = tape.add_row_bias(skip, p[base + 3])?;
        let sum = tape.add(back, skip)?;
        h = tape.gelu(sum);
    }
    let base = 2 + 4 * c.n_layers;
    let out = tape.matmul(p[base], h)?;
    tape.add_row_bias(out, p[base + 1])
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var, act: bool) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let y = tape.add_col_bias(y, b)?;
    Ok(if act { tape.gelu(y) } else { y })
}

/// Branch embedding, `batch x latent`.
fn deeponet_branch(tape: &mut Tape, p: &[Var], x: Var, batch: usize, n: usize) -> Result<Var> {
    let (cin, _) = tape.shape(x);
    // regroup channel-major columns into one flat row per sample
    let mut idx = Vec::with_capacity(batch * cin * n);
    for b in 0..batch {
        for c in 0..cin {
            for j in 0..n {
                idx.push(c * batch * n + b * n + j);
            }
        }
    }
    let flat = tape.gather(x, Arc::new(idx))?;
    let flat = tape.reshape(flat, batch, cin * n)?;
    let h = dense(tape, flat, p[0], p[1], true)?;
    let h = dense(tape, h, p[2], p[3], true)?;
    dense(tape, h, p[4], p[5], false)
}

/// `branch · trunk(coords)ᵀ + bias`, flattened to `1 x (batch * queries)`.
fn deeponet_combine(tape: &mut Tape, p: &[Var], branch: Var, coords: Var, batch: usize, queries: usize) -> Result<Var> {
    let t = dense(tape, coords, p[6], p[7], true)?;
    let t = dense(tape, t, p[8], p[9], true)?;
    let t = dense(tape, t, p[10], p[11], false)?;
    let tt = tape.transpose(t);
    let y = tape.matmul(branch, tt)?;
    let y = tape.reshape(y, batch * queries, 1)?;
    let y = tape.add_col_bias(y, p[12])?;
    tape.reshape(y, 1, batch * queries)
}

fn deeponet_forward(tape: &mut Tape, p: &[Var], x: Var, coords: Var, batch: usize, n: usize) -> Result<Var> {
    let branch = deeponet_branch(tape, p, x, batch, n)?;
    deeponet_combine(tape, p, branch, coords, batch, n)
}

/// Versioned JSON checkpoint keyed by the configuration hash.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config_hash: String,
    config: BackboneConfig,
    tensors: Vec<Tensor>,
    meta: TrainingMeta,
}

const CHECKPOINT_VERSION: u32 = 1;

impl Operator {
    pub fn to_checkpoint(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config_hash: self.config.hash(&self.domain),
            config: self.config,
            tensors: self.tensors.clone(),
            meta: self.meta.clone(),
        })?)
    }

    /// Load a checkpoint, rejecting any whose configuration hash differs from
    /// `expected` on `domain`.
    pub fn from_checkpoint(text: &str, expected: &BackboneConfig, domain: &Domain) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(DopeError::Checkpoint(format!("unsupported format version {}", ck.format_version)));
        }
        let want = expected.hash(domain);
        if ck.config_hash != want || ck.config.hash(domain) != want {
            return Err(DopeError::Checkpoint(format!(
                "configuration hash {} does not match expected {want}",
                ck.config_hash
            )));
        }
        Self::from_parts(ck.config, domain, ck.tensors, ck.meta)
    }
}
