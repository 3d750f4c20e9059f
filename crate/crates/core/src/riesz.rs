//! Debiasing weights: the oracle `ξ₀ · w_g(S₀(A))` and neural estimates fitted
//! by minimizing the penalized variational (Riesz) objective.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{DesignWeights, Observation};
use crate::error::{DopeError, Result};
use crate::functional::{functional_gradient, functional_jvp, riesz_representer, FunctionalSpec};
use crate::grid::{Domain, QuadratureWeights};
use crate::operators::{batch_input, BackboneConfig, Operator, TrainConfig, TrainingMeta};
use crate::rng::{stream, Role};

/// Bound on the log of the structured inverse-design head.
pub const LOG_XI_BOUND: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    Unstructured,
    Structured,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RieszConfig {
    pub lambda: f64,
    pub train: TrainConfig,
}

impl Default for RieszConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            train: TrainConfig::default(),
        }
    }
}

/// A debiasing weight `A ↦ β(A)(·)` on the grid.
#[derive(Debug, Clone)]
pub enum BetaModel {
    /// Operator output used directly.
    Unstructured(Operator),
    /// `exp(clamp(head(A)))` times the closed-form representer at `Ŝ(A)`.
    Structured {
        head: Operator,
        spec: FunctionalSpec,
        s_hat: Arc<Operator>,
    },
    /// `ξ₀ · w_g(S₀(A))`; needs the simulated latent trajectory.
    Oracle { spec: FunctionalSpec },
}

impl BetaModel {
    pub fn mode(&self) -> BetaMode {
        match self {
            BetaModel::Unstructured(_) => BetaMode::Unstructured,
            BetaModel::Structured { .. } => BetaMode::Structured,
            BetaModel::Oracle { .. } => BetaMode::Oracle,
        }
    }

    /// Trainable parameters (empty for the oracle).
    pub fn tensors(&self) -> &[Tensor] {
        match self {
            BetaModel::Unstructured(op) => op.tensors(),
            BetaModel::Structured { head, .. } => head.tensors(),
            BetaModel::Oracle { .. } => &[],
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum()
    }

    /// Structured head values `ξ̂(A)` on the grid.
    pub fn xi_hat(&self, obs: &[&Observation]) -> Result<Vec<Vec<f64>>> {
        let BetaModel::Structured { head, .. } = self else {
            return Err(DopeError::Config("only the structured weight has a design head".into()));
        };
        let inputs: Vec<_> = obs.iter().map(|o| &o.input).collect();
        Ok(head
            .predict(&inputs)?
            .into_iter()
            .map(|h| h.into_iter().map(|v| v.clamp(-LOG_XI_BOUND, LOG_XI_BOUND).exp()).collect())
            .collect())
    }

    /// `β(A)` on the grid for each observation.
    pub fn evaluate(&self, obs: &[&Observation], w: &QuadratureWeights) -> Result<Vec<Vec<f64>>> {
        match self {
            BetaModel::Unstructured(op) => {
                let inputs: Vec<_> = obs.iter().map(|o| &o.input).collect();
                op.predict(&inputs)
            }
            BetaModel::Structured { spec, s_hat, .. } => {
                let xi = self.xi_hat(obs)?;
                let inputs: Vec<_> = obs.iter().map(|o| &o.input).collect();
                let s = s_hat.predict(&inputs)?;
                xi.into_iter()
                    .zip(s)
                    .map(|(x, u)| {
                        let r = riesz_representer(spec, &u, w)?;
                        Ok(x.iter().zip(&r).map(|(a, b)| a * b).collect())
                    })
                    .collect()
            }
            BetaModel::Oracle { spec } => obs
                .iter()
                .map(|o| oracle_beta(&o.design, spec, o.oracle_trajectory()?, w))
                .collect(),
        }
    }
}

/// `β₀ = ξ₀ · w_g(u₀)` pointwise.
pub fn oracle_beta(
    design: &DesignWeights,
    spec: &FunctionalSpec,
    latent_u: &[f64],
    w: &QuadratureWeights,
) -> Result<Vec<f64>> {
    if design.len() != latent_u.len() {
        return Err(DopeError::Shape("design and trajectory lengths differ".into()));
    }
    if let Some(i) = design.p().iter().position(|p| !(*p > 0.0)) {
        return Err(DopeError::OverlapViolation(i));
    }
    let r = riesz_representer(spec, latent_u, w)?;
    Ok(design.xi().iter().zip(&r).map(|(x, g)| x * g).collect())
}

/// Empirical penalized objective
/// `(1/n) Σ [ (1/K) Σ_k β(X_k)² − 2 Dg_{u}[β] ] + λ ‖η‖²` at `u = Ŝ(A)`.
pub fn riesz_loss(
    beta: &BetaModel,
    batch: &[Observation],
    spec: &FunctionalSpec,
    s_hat: &Operator,
    lambda: f64,
    w: &QuadratureWeights,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(DopeError::Data("empty batch".into()));
    }
    let refs: Vec<&Observation> = batch.iter().collect();
    let inputs: Vec<_> = batch.iter().map(|o| &o.input).collect();
    let u = s_hat.predict(&inputs)?;
    let b = beta.evaluate(&refs, w)?;
    let mut total = 0.0;
    for ((o, ui), bi) in batch.iter().zip(&u).zip(&b) {
        let quad = o.obs_indices.iter().map(|&j| bi[j] * bi[j]).sum::<f64>() / o.k() as f64;
        let lin = functional_jvp(spec, ui, bi, w)?;
        total += quad - 2.0 * lin;
    }
    let value = total / batch.len() as f64 + lambda * beta.squared_norm();
    if !value.is_finite() {
        return Err(DopeError::Training("non-finite Riesz objective".into()));
    }
    Ok(value)
}

struct Prepared {
    input: Tensor,
    /// `∂g/∂u` at `Ŝ(A)` on the grid.
    grad: Vec<f64>,
    /// `w_g(Ŝ(A))`, only for the structured weight.
    representer: Vec<f64>,
}

/// Fit the debiasing weight on `data` given the fitted solution operator.
#[allow(clippy::too_many_arguments)]
pub fn train_riesz(
    data: &[Observation],
    domain: &Domain,
    mode: BetaMode,
    spec: &FunctionalSpec,
    s_hat: &Arc<Operator>,
    backbone: BackboneConfig,
    cfg: &RieszConfig,
    seed: u64,
    index: u64,
) -> Result<BetaModel> {
    spec.validate()?;
    if mode == BetaMode::Oracle {
        return Ok(BetaModel::Oracle { spec: *spec });
    }
    if data.is_empty() {
        return Err(DopeError::Data("cannot fit the debiasing weight on no data".into()));
    }
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(DopeError::InvalidParameter(format!("penalty {}", cfg.lambda)));
    }
    let w = domain.weights();
    let n = domain.len();
    let inputs: Vec<_> = data.iter().map(|o| &o.input).collect();
    let u = s_hat.predict(&inputs)?;
    let prepared: Vec<Prepared> = data
        .iter()
        .zip(&u)
        .map(|(o, ui)| {
            Ok(Prepared {
                input: batch_input(&[&o.input], domain)?,
                grad: functional_gradient(spec, ui, &w)?,
                representer: if mode == BetaMode::Structured {
                    riesz_representer(spec, ui, &w)?
                } else {
                    Vec::new()
                },
            })
        })
        .collect::<Result<_>>()?;
    let mut init_rng = stream(seed, Role::RieszInit, index);
    let model = Operator::init(backbone, domain, &mut init_rng)?;
    let mut rng = stream(seed, Role::RieszShuffle, index);
    let lambda = cfg.lambda;
    let (tensors, history) = crate::operators::train_loop(
        model.tensors().to_vec(),
        data.len(),
        &cfg.train,
        &mut rng,
        |tape, p, idx| {
            let b = idx.len();
            let x = crate::operators::stack_inputs(idx.iter().map(|&i| &prepared[i].input), n);
            let xv = tape.leaf(&x);
            let out = model.forward(tape, p, xv, b)?;
            let beta = if mode == BetaMode::Structured {
                let xi = tape.exp_clamp(out, -LOG_XI_BOUND, LOG_XI_BOUND);
                let rep: Vec<f64> = idx.iter().flat_map(|&i| prepared[i].representer.iter().copied()).collect();
                tape.mul_const(xi, Arc::new(rep))?
            } else {
                out
            };
            batch_riesz_objective(tape, beta, p, idx.iter().map(|&i| (&data[i], &prepared[i].grad)), n, lambda)
        },
    )?;
    let meta = TrainingMeta {
        seed,
        epochs_run: cfg.train.epochs,
        epoch_losses: history,
    };
    let fitted = model.with_tensors(tensors, meta)?;
    Ok(match mode {
        BetaMode::Unstructured => BetaModel::Unstructured(fitted),
        BetaMode::Structured => BetaModel::Structured {
            head: fitted,
            spec: *spec,
            s_hat: Arc::clone(s_hat),
        },
        BetaMode::Oracle => unreachable!("handled above"),
    })
}

/// Record the mini-batch objective for a `1 x (batch * grid)` weight node.
fn batch_riesz_objective<'a>(
    tape: &mut Tape,
    beta: Var,
    params: &[Var],
    batch: impl ExactSizeIterator<Item = (&'a Observation, &'a Vec<f64>)>,
    n: usize,
    lambda: f64,
) -> Result<Var> {
    let b = batch.len();
    let scale = 1.0 / b as f64;
    let mut idx = Vec::new();
    let mut qw = Vec::new();
    let mut lin = Vec::with_capacity(b * n);
    for (bi, (o, g)) in batch.enumerate() {
        for &j in &o.obs_indices {
            idx.push(bi * n + j);
            qw.push(scale / o.k() as f64);
        }
        lin.extend(g.iter().map(|v| -2.0 * scale * v));
    }
    let at_obs = tape.gather(beta, Arc::new(idx))?;
    let sq = tape.square(at_obs);
    let quad = tape.dot_const(sq, Arc::new(qw))?;
    let linear = tape.dot_const(beta, Arc::new(lin))?;
    let mut loss = tape.add(quad, linear)?;
    if lambda > 0.0 {
        for &p in params {
            let s = tape.sum_squares(p);
            let s = tape.scale(s, lambda);
            loss = tape.add(loss, s)?;
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid1D;

    #[test]
    fn oracle_for_auc_is_inverse_design() {
        let g = Grid1D::new(24.0, 128).unwrap();
        let w = g.weights();
        let d = DesignWeights::new(vec![1.0 / 128.0; 128], &w).unwrap();
        let u: Vec<f64> = (0..128).map(|i| (i as f64 * 0.05).sin()).collect();
        let b = oracle_beta(&d, &FunctionalSpec::auc(), &u, &w).unwrap();
        assert_eq!(b, d.xi());
        let b = oracle_beta(&d, &FunctionalSpec::tat(), &[0.5; 128], &w).unwrap();
        assert!((b[10] - 128.0 / 127.0 * 2.0).abs() < 1e-12);
    }
}
