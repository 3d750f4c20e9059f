//! Mini-batch training shared by the solution operator and the debiasing
//! weight.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::data::{InputField, Observation};
use crate::error::{DopeError, Result};
use crate::grid::Domain;
use crate::rng::{stream, Role, StreamRng};

use super::{BackboneConfig, Operator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    /// Mean mini-batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainingMeta {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Channel-major operator input for a batch: `channels x (batch * grid)`.
pub fn batch_input(inputs: &[&InputField], domain: &Domain) -> Result<Tensor> {
    let n = domain.len();
    let b = inputs.len();
    let cin = inputs
        .first()
        .map(|i| i.channel_count())
        .ok_or_else(|| DopeError::Data("empty batch".into()))?;
    let mut data = vec![0.0; cin * b * n];
    for (bi, input) in inputs.iter().enumerate() {
        let ch = input.channels(domain)?;
        if ch.len() != cin {
            return Err(DopeError::Data("mixed input kinds in one batch".into()));
        }
        for (c, values) in ch.iter().enumerate() {
            data[c * b * n + bi * n..c * b * n + (bi + 1) * n].copy_from_slice(values);
        }
    }
    Tensor::new(cin, b * n, data)
}

/// Adam over shuffled mini-batches for a fixed number of epochs.
///
/// `batch_loss` records the loss of the given sample indices on the tape,
/// with one leaf per parameter tensor already in place.
pub fn train_loop<F>(
    mut params: Vec<Tensor>,
    n: usize,
    cfg: &TrainConfig,
    rng: &mut StreamRng,
    mut batch_loss: F,
) -> Result<(Vec<Tensor>, Vec<f64>)>
where
    F: FnMut(&mut Tape, &[Var], &[usize]) -> Result<Var>,
{
    if n == 0 {
        return Err(DopeError::Data("no training samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(DopeError::Config("batch size must be positive".into()));
    }
    let sizes: Vec<usize> = params.iter().map(|t| t.len()).collect();
    let mut opt = AdamState::new(cfg.adam, &sizes);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let leaves: Vec<Var> = params.iter().map(|t| tape.leaf(t)).collect();
            let loss = batch_loss(&mut tape, &leaves, idx)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(DopeError::Training(format!(
                    "loss became {value} in epoch {} after {} updates",
                    epoch + 1,
                    opt.step_count()
                )));
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Vec<f64>> = leaves
                .iter()
                .zip(&sizes)
                .map(|(&v, &len)| grads.wrt(v, len))
                .collect();
            let mut slots: Vec<&mut [f64]> = params.iter_mut().map(|t| t.data.as_mut_slice()).collect();
            opt.step(&mut slots, &g)?;
            total += value;
            batches += 1;
        }
        history.push(total / batches as f64);
    }
    Ok((params, history))
}

/// Flat positions of the observed grid points of each batch member, and
/// the per-point weights `scale / K_i`.
pub(crate) fn observed_positions(obs: &[&Observation], n: usize, scale: f64) -> (Arc<Vec<usize>>, Arc<Vec<f64>>) {
    let mut idx = Vec::new();
    let mut wts = Vec::new();
    for (b, o) in obs.iter().enumerate() {
        let k = o.k() as f64;
        for &j in &o.obs_indices {
            idx.push(b * n + j);
            wts.push(scale / k);
        }
    }
    (Arc::new(idx), Arc::new(wts))
}

/// Fit a backbone by mean squared error at the observed locations only.
pub fn train_solution_operator(
    data: &[Observation],
    domain: &Domain,
    config: BackboneConfig,
    train: &TrainConfig,
    seed: u64,
    index: u64,
) -> Result<Operator> {
    if data.is_empty() {
        return Err(DopeError::Data("cannot train on an empty dataset".into()));
    }
    let mut init_rng = stream(seed, Role::SolutionInit, index);
    let model = Operator::init(config, domain, &mut init_rng)?;
    let inputs: Vec<Tensor> = data
        .iter()
        .map(|o| batch_input(&[&o.input], domain))
        .collect::<Result<_>>()?;
    let n = domain.len();
    let mut rng = stream(seed, Role::SolutionShuffle, index);
    let (tensors, history) = train_loop(model.tensors().to_vec(), data.len(), train, &mut rng, |tape, p, idx| {
        let batch: Vec<&Observation> = idx.iter().map(|&i| &data[i]).collect();
        let x = stack_inputs(idx.iter().map(|&i| &inputs[i]), n);
        let xv = tape.leaf(&x);
        let out = model.forward(tape, p, xv, idx.len())?;
        let (pos, wts) = observed_positions(&batch, n, 1.0 / idx.len() as f64);
        let pred = tape.gather(out, pos)?;
        let y: Vec<f64> = batch.iter().flat_map(|o| o.y.iter().copied()).collect();
        let yv = tape.leaf_owned(1, y.len(), y)?;
        let resid = tape.sub(pred, yv)?;
        let sq = tape.square(resid);
        tape.dot_const(sq, wts)
    })?;
    model.with_tensors(
        tensors,
        TrainingMeta {
            seed,
            epochs_run: train.epochs,
            epoch_losses: history,
        },
    )
}

/// Concatenate single-sample inputs (`channels x grid`) into a batch.
pub(crate) fn stack_inputs<'a>(parts: impl ExactSizeIterator<Item = &'a Tensor>, n: usize) -> Tensor {
    let parts: Vec<&Tensor> = parts.collect();
    let b = parts.len();
    let cin = parts[0].rows;
    let mut data = vec![0.0; cin * b * n];
    for (bi, t) in parts.iter().enumerate() {
        for c in 0..cin {
            data[c * b * n + bi * n..c * b * n + (bi + 1) * n].copy_from_slice(&t.data[c * n..(c + 1) * n]);
        }
    }
    Tensor {
        rows: cin,
        cols: b * n,
        data,
    }
}
