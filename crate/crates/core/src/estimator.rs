//! Plug-in, one-step (debiased) and prediction-powered estimators of
//! `θ = E[g(S₀(A))]`, with variance estimates and 95% intervals.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{InputField, Observation};
use crate::error::{DopeError, Result};
use crate::functional::{functional_value, FunctionalSpec};
use crate::grid::{Domain, QuadratureWeights};
use crate::operators::{train_solution_operator, BackboneConfig, Operator, TrainConfig};
use crate::riesz::{oracle_beta, train_riesz, BetaMode, BetaModel, RieszConfig};
use crate::rng::{stream, Role};

/// Normal quantile for a two-sided 95% interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
    /// Fold index of every sample (empty when no cross-fitting was done).
    pub folds: Vec<usize>,
    /// Set when the variance could not be estimated (fewer than two values).
    pub degenerate: bool,
    /// Per-fold training summaries of the nuisances.
    pub nuisance_notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: String,
    pub theta_hat: f64,
    pub pseudo_outcomes: Vec<f64>,
    pub variance_hat: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub meta: ReportMeta,
}

impl EstimateReport {
    fn from_values(method: &str, values: Vec<f64>, variance: Option<f64>, meta: ReportMeta) -> Result<Self> {
        if values.is_empty() {
            return Err(DopeError::Data("no values to average".into()));
        }
        let theta = mean(&values);
        let (variance_hat, degenerate) = match variance {
            Some(v) => (v, false),
            None => (0.0, true),
        };
        let se = variance_hat.sqrt();
        Ok(Self {
            method: method.to_string(),
            theta_hat: theta,
            pseudo_outcomes: values,
            variance_hat,
            se,
            ci: (theta - Z_95 * se, theta + Z_95 * se),
            meta: ReportMeta { degenerate, ..meta },
        })
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci.0 <= truth && truth <= self.ci.1
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `V̂ = (1/n²) Σ (ψ̃_i − θ̂)²` and the interval `θ̂ ± 1.96 √V̂`.
pub fn variance_and_ci(pseudo_outcomes: &[f64]) -> Result<(f64, (f64, f64))> {
    let n = pseudo_outcomes.len();
    if n < 2 {
        return Err(DopeError::DegenerateVariance(format!("{n} pseudo-outcomes")));
    }
    let theta = mean(pseudo_outcomes);
    let v = pseudo_outcomes.iter().map(|p| (p - theta).powi(2)).sum::<f64>() / (n * n) as f64;
    let half = Z_95 * v.sqrt();
    Ok((v, (theta - half, theta + half)))
}

/// Predicted trajectory and debiasing weight of one sample on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceValues {
    pub s: Vec<f64>,
    pub beta: Vec<f64>,
}

/// `ψ̃ = g(Ŝ(A)) + (1/K) Σ_k β̂(A)(X_k) (Y_k − Ŝ(A)(X_k))`.
pub fn pseudo_outcome(
    s_hat: &[f64],
    beta: &[f64],
    obs: &Observation,
    spec: &FunctionalSpec,
    w: &QuadratureWeights,
) -> Result<f64> {
    Ok(functional_value(spec, s_hat, w)? + correction(s_hat, beta, obs)?)
}

/// Weighted-residual correction `(1/K) Σ_k β(X_k)(Y_k − Ŝ(X_k))`.
pub fn correction(s_hat: &[f64], beta: &[f64], obs: &Observation) -> Result<f64> {
    let n = s_hat.len();
    if beta.len() != n {
        return Err(DopeError::Shape("prediction and weight lengths differ".into()));
    }
    let mut acc = 0.0;
    for (&j, &y) in obs.obs_indices.iter().zip(&obs.y) {
        if j >= n {
            return Err(DopeError::Data(format!("observation index {j} outside a {n}-point grid")));
        }
        acc += beta[j] * (y - s_hat[j]);
    }
    Ok(acc / obs.k() as f64)
}

/// Average of `g(Ŝ(A_i))`; variance is the sample variance over `n`.
pub fn plugin_estimate(
    s_hat: &Operator,
    inputs: &[&InputField],
    spec: &FunctionalSpec,
    w: &QuadratureWeights,
) -> Result<EstimateReport> {
    if inputs.is_empty() {
        return Err(DopeError::Data("plug-in estimate of no inputs".into()));
    }
    let preds = s_hat.predict(inputs)?;
    plugin_from_predictions(&preds, spec, w)
}

pub fn plugin_from_predictions(preds: &[Vec<f64>], spec: &FunctionalSpec, w: &QuadratureWeights) -> Result<EstimateReport> {
    let values = preds
        .iter()
        .map(|u| functional_value(spec, u, w))
        .collect::<Result<Vec<_>>>()?;
    let n = values.len();
    let var = (n >= 2).then(|| {
        let m = mean(&values);
        values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ((n - 1) * n) as f64
    });
    EstimateReport::from_values("plugin", values, var, ReportMeta::default())
}

/// One-step estimate from already evaluated nuisances.
pub fn dope_from_nuisances(
    method: &str,
    obs: &[&Observation],
    nuisances: &[NuisanceValues],
    spec: &FunctionalSpec,
    w: &QuadratureWeights,
    meta: ReportMeta,
) -> Result<EstimateReport> {
    if obs.len() != nuisances.len() {
        return Err(DopeError::Shape("one nuisance pair per observation required".into()));
    }
    let psi = obs
        .iter()
        .zip(nuisances)
        .map(|(o, nv)| pseudo_outcome(&nv.s, &nv.beta, o, spec, w))
        .collect::<Result<Vec<_>>>()?;
    let var = variance_and_ci(&psi).ok().map(|(v, _)| v);
    EstimateReport::from_values(method, psi, var, meta)
}

/// Where the solution operator of the one-step estimator comes from.
#[derive(Debug, Clone)]
pub enum SolutionSource {
    /// Trained per fold on the fold's complement.
    CrossFit { backbone: BackboneConfig, train: TrainConfig },
    /// Fitted beforehand on data disjoint from the evaluation sample.
    Pretrained(Arc<Operator>),
    /// One operator per fold, each fitted on that fold's complement (see
    /// [`fit_fold_solutions`]).
    PerFold(Vec<Arc<Operator>>),
}

#[derive(Debug, Clone)]
pub struct CrossFitConfig {
    pub folds: usize,
    pub beta_mode: BetaMode,
    pub beta_backbone: BackboneConfig,
    pub riesz: RieszConfig,
    pub seed: u64,
    /// Distinguishes independent runs sharing a seed (e.g. repeats).
    pub index: u64,
}

/// Nuisance values of every sample, each from models that never saw its fold.
#[derive(Debug, Clone)]
pub struct CrossFitted {
    pub folds: Vec<usize>,
    pub nuisances: Vec<NuisanceValues>,
    pub notes: Vec<String>,
}

/// Random balanced assignment of `n` samples to `j` folds.
pub fn assign_folds(n: usize, j: usize, seed: u64, index: u64) -> Result<Vec<usize>> {
    if j < 2 {
        return Err(DopeError::Config(format!("cross-fitting needs at least 2 folds, got {j}")));
    }
    if n < 2 * j {
        return Err(DopeError::Config(format!("{n} samples are too few for {j} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Role::Folds, index));
    let mut folds = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        folds[i] = rank % j;
    }
    Ok(folds)
}

/// Training set of fold `j`: every sample outside it.
fn complement(data: &[Observation], folds: &[usize], j: usize) -> Vec<Observation> {
    data.iter()
        .zip(folds)
        .filter(|(_, &f)| f != j)
        .map(|(o, _)| o.clone())
        .collect()
}

/// Solution operators for every fold of `cfg`, fitted exactly as
/// [`SolutionSource::CrossFit`] would fit them inside [`crossfit_nuisances`].
/// Returns the fold map with the operators.
pub fn fit_fold_solutions(
    data: &[Observation],
    domain: &Domain,
    backbone: BackboneConfig,
    train: &TrainConfig,
    cfg: &CrossFitConfig,
) -> Result<(Vec<usize>, Vec<Arc<Operator>>)> {
    let folds = assign_folds(data.len(), cfg.folds, cfg.seed, cfg.index)?;
    let ops = (0..cfg.folds)
        .map(|j| {
            let fold_index = cfg.index * 64 + j as u64;
            train_solution_operator(&complement(data, &folds, j), domain, backbone, train, cfg.seed, fold_index)
                .map(Arc::new)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((folds, ops))
}

/// Train both nuisances on each fold's complement (solution operator first,
/// then the debiasing weight given it) and evaluate them on the fold.
pub fn crossfit_nuisances(
    data: &[Observation],
    domain: &Domain,
    spec: &FunctionalSpec,
    solution: &SolutionSource,
    cfg: &CrossFitConfig,
) -> Result<CrossFitted> {
    let folds = assign_folds(data.len(), cfg.folds, cfg.seed, cfg.index)?;
    let w = domain.weights();
    let mut nuisances: Vec<Option<NuisanceValues>> = vec![None; data.len()];
    let mut notes = Vec::new();
    for j in 0..cfg.folds {
        let train = complement(data, &folds, j);
        let eval: Vec<usize> = (0..data.len()).filter(|&i| folds[i] == j).collect();
        let fold_index = cfg.index * 64 + j as u64;
        let s_hat = match solution {
            SolutionSource::CrossFit { backbone, train: tc } => Arc::new(train_solution_operator(
                &train, domain, *backbone, tc, cfg.seed, fold_index,
            )?),
            SolutionSource::Pretrained(op) => Arc::clone(op),
            SolutionSource::PerFold(ops) => match ops.get(j) {
                Some(op) if ops.len() == cfg.folds => Arc::clone(op),
                _ => {
                    return Err(DopeError::Config(format!(
                        "{} per-fold solution operators for {} folds",
                        ops.len(),
                        cfg.folds
                    )))
                }
            },
        };
        let beta = train_riesz(
            &train,
            domain,
            cfg.beta_mode,
            spec,
            &s_hat,
            cfg.beta_backbone,
            &cfg.riesz,
            cfg.seed,
            fold_index,
        )?;
        if let Some(loss) = s_hat.meta().final_loss() {
            notes.push(format!("fold {j}: solution loss {loss:.6e}"));
        }
        let eval_obs: Vec<&Observation> = eval.iter().map(|&i| &data[i]).collect();
        let inputs: Vec<_> = eval_obs.iter().map(|o| &o.input).collect();
        let s_vals = s_hat.predict(&inputs)?;
        let b_vals = beta.evaluate(&eval_obs, &w)?;
        for ((&i, s), b) in eval.iter().zip(s_vals).zip(b_vals) {
            nuisances[i] = Some(NuisanceValues { s, beta: b });
        }
    }
    Ok(CrossFitted {
        folds,
        nuisances: nuisances.into_iter().map(|n| n.expect("every sample is in a fold")).collect(),
        notes,
    })
}

/// Cross-fitted one-step estimate.
pub fn dope_crossfit(
    data: &[Observation],
    domain: &Domain,
    spec: &FunctionalSpec,
    solution: &SolutionSource,
    cfg: &CrossFitConfig,
) -> Result<EstimateReport> {
    let fitted = crossfit_nuisances(data, domain, spec, solution, cfg)?;
    let obs: Vec<&Observation> = data.iter().collect();
    let method = match cfg.beta_mode {
        BetaMode::Unstructured => "dope",
        BetaMode::Structured => "dope_structured",
        BetaMode::Oracle => "dope_oracle",
    };
    let meta = ReportMeta {
        seed: cfg.seed,
        config_hash: cfg.beta_backbone.hash(domain),
        folds: fitted.folds.clone(),
        degenerate: false,
        nuisance_notes: fitted.notes.clone(),
    };
    dope_from_nuisances(method, &obs, &fitted.nuisances, spec, &domain.weights(), meta)
}

/// Prediction-powered one-step estimate: the plug-in average runs over
/// labeled and unlabeled inputs, the correction over labeled samples only.
pub fn ppi_from_values(
    labeled: &[&Observation],
    labeled_nuisances: &[NuisanceValues],
    unlabeled_predictions: &[Vec<f64>],
    spec: &FunctionalSpec,
    w: &QuadratureWeights,
) -> Result<EstimateReport> {
    let n1 = labeled.len();
    if n1 == 0 {
        return Err(DopeError::Data("prediction-powered estimate needs labeled samples".into()));
    }
    if labeled_nuisances.len() != n1 {
        return Err(DopeError::Shape("one nuisance pair per labeled sample required".into()));
    }
    let mut g_all = Vec::with_capacity(n1 + unlabeled_predictions.len());
    for nv in labeled_nuisances {
        g_all.push(functional_value(spec, &nv.s, w)?);
    }
    for u in unlabeled_predictions {
        g_all.push(functional_value(spec, u, w)?);
    }
    let corr = labeled
        .iter()
        .zip(labeled_nuisances)
        .map(|(o, nv)| correction(&nv.s, &nv.beta, o))
        .collect::<Result<Vec<_>>>()?;
    let g_bar = mean(&g_all);
    let c_bar = mean(&corr);
    let psi: Vec<f64> = corr.iter().map(|c| g_bar + c).collect();
    let var = (n1 >= 2).then(|| {
        let n = g_all.len() as f64;
        let vg = g_all.iter().map(|v| (v - g_bar).powi(2)).sum::<f64>() / (n * n);
        let vc = corr.iter().map(|v| (v - c_bar).powi(2)).sum::<f64>() / (n1 * n1) as f64;
        vg + vc
    });
    EstimateReport::from_values("dope_ppi", psi, var, ReportMeta::default())
}

/// Prediction-powered estimate with nuisances fitted away from all
/// evaluation data.
pub fn ppi_estimate(
    labeled: &[Observation],
    unlabeled_inputs: &[&InputField],
    s_hat: &Operator,
    beta: &BetaModel,
    spec: &FunctionalSpec,
    w: &QuadratureWeights,
) -> Result<EstimateReport> {
    let obs: Vec<&Observation> = labeled.iter().collect();
    let inputs: Vec<_> = labeled.iter().map(|o| &o.input).collect();
    let s = s_hat.predict(&inputs)?;
    let b = beta.evaluate(&obs, w)?;
    let nv: Vec<NuisanceValues> = s.into_iter().zip(b).map(|(s, beta)| NuisanceValues { s, beta }).collect();
    let unl = if unlabeled_inputs.is_empty() {
        Vec::new()
    } else {
        s_hat.predict(unlabeled_inputs)?
    };
    ppi_from_values(&obs, &nv, &unl, spec, w)
}

/// Which nuisance to perturb in the robustness protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceKind {
    Solution,
    Weight,
}

/// `oracle + (1 + δ)(fitted − oracle)` pointwise.
pub fn scale_error(fitted: &[f64], oracle: &[f64], delta: f64) -> Result<Vec<f64>> {
    if !(0.0..=0.5).contains(&delta) {
        return Err(DopeError::InvalidParameter(format!("corruption factor {delta} outside [0, 0.5]")));
    }
    if fitted.len() != oracle.len() {
        return Err(DopeError::Shape("fitted and oracle lengths differ".into()));
    }
    Ok(fitted
        .iter()
        .zip(oracle)
        .map(|(f, o)| o + (1.0 + delta) * (f - o))
        .collect())
}

/// Inflate the error of one fitted nuisance of `obs` relative to its oracle.
pub fn corrupt_nuisance(
    which: NuisanceKind,
    fitted: &NuisanceValues,
    obs: &Observation,
    spec: &FunctionalSpec,
    w: &QuadratureWeights,
    delta: f64,
) -> Result<NuisanceValues> {
    let u0 = obs.oracle_trajectory()?;
    Ok(match which {
        NuisanceKind::Solution => NuisanceValues {
            s: scale_error(&fitted.s, u0, delta)?,
            beta: fitted.beta.clone(),
        },
        NuisanceKind::Weight => {
            let b0 = oracle_beta(&obs.design, spec, u0, w)?;
            NuisanceValues {
                s: fitted.s.clone(),
                beta: scale_error(&fitted.beta, &b0, delta)?,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_variance() {
        let (v, ci) = variance_and_ci(&[1.0, 3.0]).unwrap();
        assert!((v - 4.0 / 8.0).abs() < 1e-15);
        assert!(ci.0 < 2.0 && ci.1 > 2.0);
        let (v, ci) = variance_and_ci(&[0.7; 5]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(ci.0, ci.1);
        assert!(matches!(variance_and_ci(&[1.0]), Err(DopeError::DegenerateVariance(_))));
    }

    #[test]
    fn fold_assignment_is_balanced() {
        let f = assign_folds(65, 2, 3, 0).unwrap();
        let ones = f.iter().filter(|&&x| x == 1).count();
        assert!(ones == 32 || ones == 33);
        assert!(assign_folds(10, 1, 0, 0).is_err());
        assert!(assign_folds(3, 2, 0, 0).is_err());
        assert_eq!(f, assign_folds(65, 2, 3, 0).unwrap());
    }

    #[test]
    fn error_scaling_limits() {
        let f = vec![1.0, 2.0, 3.0];
        let o = vec![1.5, 2.0, 2.0];
        assert_eq!(scale_error(&f, &o, 0.0).unwrap(), f);
        assert_eq!(scale_error(&o, &o, 0.4).unwrap(), o);
        assert!(scale_error(&f, &o, 0.7).is_err());
    }
}
