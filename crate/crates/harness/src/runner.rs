//! Repeat-level execution of an experiment configuration.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use dope_core::darcy::{generate_darcy_dataset, DarcyConfig};
use dope_core::data::{Dataset, InputField, Observation};
use dope_core::estimator::{
    corrupt_nuisance, crossfit_nuisances, dope_from_nuisances, fit_fold_solutions, plugin_from_predictions,
    ppi_from_values,
    CrossFitConfig, CrossFitted, EstimateReport, NuisanceKind, NuisanceValues, ReportMeta, SolutionSource,
};
use dope_core::functional::FunctionalSpec;
use dope_core::grid::{Domain, QuadratureWeights};
use dope_core::operators::{train_solution_operator, Operator};
use dope_core::pk::{generate_pk_dataset, PkConfig};
use dope_core::riesz::{BetaMode, RieszConfig};
use dope_core::rng::Role;

use crate::config::{CorruptTarget, Dgp, ExperimentConfig, Method, Sweep};
use crate::error::{HarnessError, Result};
use crate::plot::{emit_plot, PlotKind};
use crate::results::{write_csv, ResultRow};
use crate::truth::TruthCache;

/// Simulate `n` samples for split `role` of one repeat.
pub fn simulate(dgp: Dgp, n: usize, rho: f64, seed: u64, role: Role) -> Result<Dataset> {
    Ok(match dgp {
        Dgp::Pk => generate_pk_dataset(n, rho, &PkConfig::default(), seed, role, 0)?,
        Dgp::Darcy => generate_darcy_dataset(n, &DarcyConfig::default(), seed, role, 0)?,
    })
}

/// Truth values keyed by (sweep index, functional index).
type Truths = Vec<Vec<f64>>;

/// Run every (sweep value, repeat) of `cfg`, write the CSV and plot named in
/// its output section, and return the rows in sweep/repeat/method order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let values = cfg.sweep.values();
    let mut cache = TruthCache::open(cfg.output.cache_dir.as_deref())?;
    let mut truths: Truths = Vec::with_capacity(values.len());
    for &v in &values {
        let rho = cfg.rho_at(v);
        let t = cfg
            .functionals_at(v)
            .iter()
            .map(|f| cache.get(cfg, f, rho))
            .collect::<Result<Vec<_>>>()?;
        truths.push(t);
    }
    cache.save()?;

    let data_points: Vec<usize> = if cfg.sweep.changes_data() {
        (0..values.len()).collect()
    } else {
        vec![0]
    };
    let items: Vec<(usize, usize)> = data_points
        .iter()
        .flat_map(|&d| (0..cfg.repeats).map(move |r| (d, r)))
        .collect();
    let workers = cfg
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, items.len());
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<(usize, Vec<ResultRow>)>> = Mutex::new(Vec::with_capacity(items.len()));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(d, r)) = items.get(i) else { break };
                let rows = run_unit(cfg, d, r, &values, &truths);
                done.lock().expect("no worker panics while holding the lock").push((i, rows));
            });
        }
    });
    let mut done = done.into_inner().expect("workers finished");
    done.sort_by_key(|(i, _)| *i);
    let mut rows: Vec<ResultRow> = done.into_iter().flat_map(|(_, rows)| rows).collect();
    if !cfg.sweep.changes_data() {
        // Group by sweep value first, as for data-changing sweeps.
        let order = |r: &ResultRow| values.iter().position(|v| v.to_bits() == r.sweep_value.to_bits());
        rows.sort_by_key(|r| (order(r), r.repeat));
    }
    if let Some(path) = &cfg.output.csv {
        write_csv(path, &rows)?;
    }
    if let Some(path) = &cfg.output.plot {
        let kind = match cfg.sweep {
            Sweep::Delta(_) => PlotKind::RmseVsDelta,
            _ => PlotKind::RmseVsSweep,
        };
        let methods: Vec<&str> = cfg.methods.iter().map(|m| m.name()).collect();
        emit_plot(&rows, kind, &methods, cfg.sweep.variable(), path)?;
    }
    Ok(rows)
}

/// Sweep values served by one data point.
fn served(cfg: &ExperimentConfig, data_index: usize, n_values: usize) -> Vec<usize> {
    if cfg.sweep.changes_data() {
        vec![data_index]
    } else {
        (0..n_values).collect()
    }
}

struct Unit<'a> {
    cfg: &'a ExperimentConfig,
    repeat: usize,
    seed: u64,
    domain: Domain,
    w: QuadratureWeights,
    test: Vec<Observation>,
    solution: SolutionSource,
    /// Solution-operator predictions on the test inputs, each from an
    /// operator that did not see that sample.
    s_test: Vec<Vec<f64>>,
    fit_time: f64,
}

fn run_unit(cfg: &ExperimentConfig, data_index: usize, repeat: usize, values: &[f64], truths: &Truths) -> Vec<ResultRow> {
    let sv = served(cfg, data_index, values.len());
    match prepare_unit(cfg, data_index, repeat, values) {
        Ok(unit) => {
            let mut rows = Vec::new();
            match &cfg.sweep {
                Sweep::Rho(_) | Sweep::Kappa(_) => {
                    for &si in &sv {
                        for (fi, spec) in cfg.functionals_at(values[si]).iter().enumerate() {
                            for &m in &cfg.methods {
                                rows.push(unit.standard_row(m, spec, values[si], truths[si][fi]));
                            }
                        }
                    }
                }
                Sweep::Delta(_) => {
                    for (fi, spec) in cfg.functionals.iter().enumerate() {
                        rows.extend(unit.delta_rows(spec, values, &truths[0][fi]));
                    }
                }
                Sweep::NUnlabeled(sizes) => {
                    for (fi, spec) in cfg.functionals.iter().enumerate() {
                        rows.extend(unit.ppi_rows(spec, sizes, truths[0][fi]));
                    }
                }
            }
            rows
        }
        Err(e) => {
            let mut rows = Vec::new();
            for &si in &sv {
                for spec in cfg.functionals_at(values[si]) {
                    for m in &cfg.methods {
                        rows.push(ResultRow::failure(m.name(), spec.name(), values[si], repeat, &e.to_string()));
                    }
                }
            }
            rows
        }
    }
}

fn prepare_unit<'a>(cfg: &'a ExperimentConfig, data_index: usize, repeat: usize, values: &[f64]) -> Result<Unit<'a>> {
    let start = Instant::now();
    let seed = cfg.repeat_seed(repeat, data_index);
    let rho = cfg.rho_at(values[data_index]);
    let test = simulate(cfg.dgp, cfg.splits.test, rho, seed, Role::Test)?;
    let backbone = cfg.backbone_config();
    let inputs: Vec<&InputField> = test.samples.iter().map(|o| &o.input).collect();
    let (solution, s_test) = if cfg.crossfit_solution {
        let cf = crossfit_config(cfg, seed, BetaMode::Unstructured);
        let (folds, ops) = fit_fold_solutions(&test.samples, &test.domain, backbone, &cfg.train, &cf)?;
        let s_test = predict_by_fold(&ops, &inputs, &folds)?;
        (SolutionSource::PerFold(ops), s_test)
    } else {
        let train = simulate(cfg.dgp, cfg.splits.train, rho, seed, Role::Train)?;
        let s_hat = train_solution_operator(&train.samples, &train.domain, backbone, &cfg.train, seed, 0)?;
        let s_test = s_hat.predict(&inputs)?;
        (SolutionSource::Pretrained(Arc::new(s_hat)), s_test)
    };
    Ok(Unit {
        cfg,
        repeat,
        seed,
        w: test.domain.weights(),
        domain: test.domain,
        test: test.samples,
        solution,
        s_test,
        fit_time: start.elapsed().as_secs_f64(),
    })
}

/// Predict every input with the operator of its assigned fold.
fn predict_by_fold(ops: &[Arc<Operator>], inputs: &[&InputField], folds: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); inputs.len()];
    for (j, op) in ops.iter().enumerate() {
        let idx: Vec<usize> = (0..inputs.len()).filter(|&i| folds[i] == j).collect();
        if idx.is_empty() {
            continue;
        }
        let batch: Vec<&InputField> = idx.iter().map(|&i| inputs[i]).collect();
        for (i, p) in idx.into_iter().zip(op.predict(&batch)?) {
            out[i] = p;
        }
    }
    Ok(out)
}

fn crossfit_config(cfg: &ExperimentConfig, seed: u64, mode: BetaMode) -> CrossFitConfig {
    CrossFitConfig {
        folds: cfg.folds,
        beta_mode: mode,
        beta_backbone: cfg.backbone_config(),
        riesz: RieszConfig {
            lambda: cfg.riesz_lambda,
            train: cfg.train,
        },
        seed,
        index: 0,
    }
}

fn beta_mode(m: Method) -> Option<BetaMode> {
    match m {
        Method::Dope | Method::DopePpi => Some(BetaMode::Unstructured),
        Method::DopeStructured => Some(BetaMode::Structured),
        Method::DopeOracle => Some(BetaMode::Oracle),
        Method::Plugin => None,
    }
}

impl Unit<'_> {
    fn crossfit(&self, spec: &FunctionalSpec, mode: BetaMode) -> Result<CrossFitted> {
        let cf = crossfit_config(self.cfg, self.seed, mode);
        Ok(crossfit_nuisances(&self.test, &self.domain, spec, &self.solution, &cf)?)
    }

    /// Predictions for inputs outside the test split. Per-fold operators
    /// take turns so every fold's operator serves an equal share.
    fn predict_other(&self, inputs: &[&InputField]) -> Result<Vec<Vec<f64>>> {
        match &self.solution {
            SolutionSource::PerFold(ops) => {
                let turns: Vec<usize> = (0..inputs.len()).map(|i| i % ops.len()).collect();
                predict_by_fold(ops, inputs, &turns)
            }
            SolutionSource::Pretrained(op) => Ok(op.predict(inputs)?),
            SolutionSource::CrossFit { .. } => Err(HarnessError::Runtime("solution operators were not fitted".into())),
        }
    }

    fn meta(&self, fitted: &CrossFitted) -> ReportMeta {
        ReportMeta {
            seed: self.seed,
            config_hash: self.cfg.hash(),
            folds: fitted.folds.clone(),
            degenerate: false,
            nuisance_notes: fitted.notes.clone(),
        }
    }

    fn dope(&self, method: Method, spec: &FunctionalSpec, fitted: &CrossFitted) -> Result<EstimateReport> {
        let obs: Vec<&Observation> = self.test.iter().collect();
        Ok(dope_from_nuisances(
            method.name(),
            &obs,
            &fitted.nuisances,
            spec,
            &self.w,
            self.meta(fitted),
        )?)
    }

    fn row(&self, m: Method, spec: &FunctionalSpec, sweep: f64, truth: f64, rep: Result<EstimateReport>, t: f64) -> ResultRow {
        match rep {
            Ok(r) => ResultRow::estimate(m.name(), spec.name(), sweep, self.repeat, r.theta_hat, r.se, r.ci, truth, t),
            Err(e) => ResultRow::failure(m.name(), spec.name(), sweep, self.repeat, &e.to_string()),
        }
    }

    fn standard_row(&self, m: Method, spec: &FunctionalSpec, sweep: f64, truth: f64) -> ResultRow {
        let start = Instant::now();
        let rep = match beta_mode(m) {
            None => plugin_from_predictions(&self.s_test, spec, &self.w).map_err(HarnessError::from),
            Some(mode) => self.crossfit(spec, mode).and_then(|f| self.dope(m, spec, &f)),
        };
        let t = self.fit_time + start.elapsed().as_secs_f64();
        self.row(m, spec, sweep, truth, rep, t)
    }

    /// Every method at every corruption level, from one set of fits.
    fn delta_rows(&self, spec: &FunctionalSpec, deltas: &[f64], truth: &f64) -> Vec<ResultRow> {
        let truth = *truth;
        let target = self.cfg.corrupt;
        let hits_s = matches!(target, CorruptTarget::Both | CorruptTarget::Solution);
        let hits_b = matches!(target, CorruptTarget::Both | CorruptTarget::Weight);
        let mut rows = Vec::new();
        let mut fits: Vec<(Method, Result<CrossFitted>, f64)> = Vec::new();
        for &m in &self.cfg.methods {
            let start = Instant::now();
            let fit = match beta_mode(m) {
                Some(mode) => self.crossfit(spec, mode),
                None => Ok(CrossFitted {
                    folds: Vec::new(),
                    nuisances: self
                        .s_test
                        .iter()
                        .map(|s| NuisanceValues {
                            s: s.clone(),
                            beta: vec![0.0; s.len()],
                        })
                        .collect(),
                    notes: Vec::new(),
                }),
            };
            fits.push((m, fit, self.fit_time + start.elapsed().as_secs_f64()));
        }
        for &delta in deltas {
            for (m, fit, t) in &fits {
                let rep = fit.as_ref().map_err(|e| HarnessError::Runtime(e.to_string())).and_then(|f| {
                    let corrupted = self.corrupt(spec, f, delta, hits_s, hits_b && *m != Method::Plugin)?;
                    if *m == Method::Plugin {
                        let s: Vec<Vec<f64>> = corrupted.into_iter().map(|n| n.s).collect();
                        Ok(plugin_from_predictions(&s, spec, &self.w)?)
                    } else {
                        let f = CrossFitted {
                            nuisances: corrupted,
                            ..f.clone()
                        };
                        self.dope(*m, spec, &f)
                    }
                });
                rows.push(self.row(*m, spec, delta, truth, rep, *t));
            }
        }
        rows
    }

    fn corrupt(
        &self,
        spec: &FunctionalSpec,
        fitted: &CrossFitted,
        delta: f64,
        hit_s: bool,
        hit_b: bool,
    ) -> Result<Vec<NuisanceValues>> {
        self.test
            .iter()
            .zip(&fitted.nuisances)
            .map(|(o, nv)| {
                let mut out = nv.clone();
                if hit_s {
                    out = corrupt_nuisance(NuisanceKind::Solution, &out, o, spec, &self.w, delta)?;
                }
                if hit_b {
                    out = corrupt_nuisance(NuisanceKind::Weight, &out, o, spec, &self.w, delta)?;
                }
                Ok(out)
            })
            .collect()
    }

    /// Plug-in and prediction-powered estimates over nested unlabeled pools.
    fn ppi_rows(&self, spec: &FunctionalSpec, sizes: &[usize], truth: f64) -> Vec<ResultRow> {
        let start = Instant::now();
        let max_n = sizes.iter().copied().max().unwrap_or(0);
        let prepared = (|| -> Result<(Option<CrossFitted>, Vec<Vec<f64>>)> {
            let fitted = if self.cfg.methods.contains(&Method::DopePpi) {
                Some(self.crossfit(spec, BetaMode::Unstructured)?)
            } else {
                None
            };
            let unl = if max_n > 0 {
                let rho = self.cfg.rho;
                let pool = simulate(self.cfg.dgp, max_n, rho, self.seed, Role::Unlabeled)?;
                let inputs: Vec<&InputField> = pool.samples.iter().map(|o| &o.input).collect();
                self.predict_other(&inputs)?
            } else {
                Vec::new()
            };
            Ok((fitted, unl))
        })();
        let t = self.fit_time + start.elapsed().as_secs_f64();
        let mut rows = Vec::new();
        for &n2 in sizes {
            for &m in &self.cfg.methods {
                let rep = prepared.as_ref().map_err(|e| HarnessError::Runtime(e.to_string())).and_then(|(fitted, unl)| {
                    let unl = &unl[..n2];
                    match (m, fitted) {
                        (Method::DopePpi, Some(f)) => {
                            let obs: Vec<&Observation> = self.test.iter().collect();
                            Ok(ppi_from_values(&obs, &f.nuisances, unl, spec, &self.w)?)
                        }
                        _ => {
                            let all: Vec<Vec<f64>> = self.s_test.iter().chain(unl).cloned().collect();
                            Ok(plugin_from_predictions(&all, spec, &self.w)?)
                        }
                    }
                });
                rows.push(self.row(m, spec, n2 as f64, truth, rep, t));
            }
        }
        rows
    }
}
