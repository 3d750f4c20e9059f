use std::sync::Arc;

use dope_core::data::Observation;
use dope_core::estimator::{
    assign_folds, corrupt_nuisance, correction, crossfit_nuisances, dope_crossfit, dope_from_nuisances, fit_fold_solutions,
    plugin_from_predictions, ppi_from_values, pseudo_outcome, variance_and_ci, CrossFitConfig, NuisanceKind,
    NuisanceValues, ReportMeta, SolutionSource,
};
use dope_core::functional::{functional_value, FunctionalSpec};
use dope_core::grid::Domain;
use dope_core::operators::{train_solution_operator, BackboneConfig, FnoConfig, TrainConfig};
use dope_core::pk::{generate_pk_dataset, PkConfig};
use dope_core::riesz::{oracle_beta, BetaMode, RieszConfig};
use dope_core::rng::{stream, Role};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn pk(n: usize, rho: f64, seed: u64, role: Role) -> (Domain, Vec<Observation>) {
    let ds = generate_pk_dataset(n, rho, &PkConfig::default(), seed, role, 0).unwrap();
    (ds.domain, ds.samples)
}

fn oracle_nuisances(data: &[Observation], spec: &FunctionalSpec, domain: &Domain) -> Vec<NuisanceValues> {
    let w = domain.weights();
    data.iter()
        .map(|o| {
            let u = o.oracle_trajectory().unwrap().to_vec();
            let beta = oracle_beta(&o.design, spec, &u, &w).unwrap();
            NuisanceValues { s: u, beta }
        })
        .collect()
}

#[test]
fn zero_residuals_and_zero_weight() {
    let (domain, data) = pk(10, 0.5, 1, Role::Test);
    let w = domain.weights();
    let spec = FunctionalSpec::tat();
    for o in &data {
        // a prediction that interpolates the observations exactly
        let mut s: Vec<f64> = (0..128).map(|i| 0.1 * (i as f64 * 0.2).sin()).collect();
        for (&i, &y) in o.obs_indices.iter().zip(&o.y) {
            s[i] = y;
        }
        let beta = vec![3.0; 128];
        assert_eq!(pseudo_outcome(&s, &beta, o, &spec, &w).unwrap(), functional_value(&spec, &s, &w).unwrap());
        let other: Vec<f64> = s.iter().map(|v| v + 0.2).collect();
        assert_eq!(
            pseudo_outcome(&other, &vec![0.0; 128], o, &spec, &w).unwrap(),
            functional_value(&spec, &other, &w).unwrap()
        );
    }
}

#[test]
fn oracle_nuisances_are_unbiased() {
    let spec = FunctionalSpec::tat();
    let (domain, data) = pk(10_000, 0.5, 2, Role::MonteCarlo);
    let w = domain.weights();
    let nv = oracle_nuisances(&data, &spec, &domain);
    let refs: Vec<&Observation> = data.iter().collect();
    let est = dope_from_nuisances("dope_oracle", &refs, &nv, &spec, &w, ReportMeta::default()).unwrap();
    let (_, pool) = pk(20_000, 0.5, 3, Role::TruthPool);
    let truth_values: Vec<f64> = pool
        .iter()
        .map(|o| functional_value(&spec, o.oracle_trajectory().unwrap(), &w).unwrap())
        .collect();
    let m = truth_values.len() as f64;
    let truth = truth_values.iter().sum::<f64>() / m;
    let truth_var = truth_values.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / (m - 1.0) / m;
    let se = (est.se.powi(2) + truth_var).sqrt();
    assert!((est.theta_hat - truth).abs() < 3.0 * se, "{} vs {truth} (se {se})", est.theta_hat);
}

#[test]
fn exact_surrogate_recovers_the_pool_mean() {
    let spec = FunctionalSpec::auc();
    let (domain, pool) = pk(2000, 0.5, 4, Role::TruthPool);
    let w = domain.weights();
    let preds: Vec<Vec<f64>> = pool.iter().map(|o| o.oracle_trajectory().unwrap().to_vec()).collect();
    let est = plugin_from_predictions(&preds, &spec, &w).unwrap();
    let truth = preds.iter().map(|u| functional_value(&spec, u, &w).unwrap()).sum::<f64>() / 2000.0;
    assert!((est.theta_hat - truth).abs() < 1e-12);
}

#[test]
fn degenerate_inputs() {
    let (domain, data) = pk(1, 0.5, 5, Role::Test);
    let w = domain.weights();
    let spec = FunctionalSpec::auc();
    let nv = oracle_nuisances(&data, &spec, &domain);
    let refs: Vec<&Observation> = data.iter().collect();
    let est = dope_from_nuisances("dope", &refs, &nv, &spec, &w, ReportMeta::default()).unwrap();
    assert!(est.meta.degenerate);
    assert_eq!(est.variance_hat, 0.0);
    assert_eq!(est.ci.0, est.ci.1);
    assert!(assign_folds(10, 1, 0, 0).is_err());
    let (v, ci) = variance_and_ci(&[0.3; 5]).unwrap();
    assert_eq!(v, 0.0);
    assert_eq!(ci, (0.3, 0.3));
    let (v, _) = variance_and_ci(&[1.0, 4.0]).unwrap();
    assert!((v - 9.0 / 8.0).abs() < 1e-15);
}

#[test]
fn normal_interval_coverage() {
    let mut rng = stream(6, Role::MonteCarlo, 0);
    let reps = 1000;
    let mut covered = 0;
    for _ in 0..reps {
        let psi: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let (_, (lo, hi)) = variance_and_ci(&psi).unwrap();
        if lo <= 0.0 && 0.0 <= hi {
            covered += 1;
        }
    }
    let c = covered as f64 / reps as f64;
    assert!((c - 0.95).abs() <= 0.02, "{c}");
}

fn tiny_fno() -> BackboneConfig {
    BackboneConfig::Fno1d(FnoConfig {
        in_channels: 4,
        hidden_channels: 6,
        out_channels: 1,
        n_layers: 1,
        modes: 6,
    })
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    }
}

fn crossfit_cfg(mode: BetaMode, folds: usize) -> CrossFitConfig {
    CrossFitConfig {
        folds,
        beta_mode: mode,
        beta_backbone: tiny_fno(),
        riesz: RieszConfig {
            lambda: 0.1,
            train: quick(),
        },
        seed: 9,
        index: 0,
    }
}

#[test]
fn crossfit_is_deterministic_and_fold_honest() {
    let (domain, data) = pk(24, 0.5, 7, Role::Test);
    let spec = FunctionalSpec::tat();
    let source = SolutionSource::CrossFit {
        backbone: tiny_fno(),
        train: quick(),
    };
    let a = dope_crossfit(&data, &domain, &spec, &source, &crossfit_cfg(BetaMode::Unstructured, 3)).unwrap();
    let b = dope_crossfit(&data, &domain, &spec, &source, &crossfit_cfg(BetaMode::Unstructured, 3)).unwrap();
    assert_eq!(a.theta_hat, b.theta_hat);
    assert_eq!(a.pseudo_outcomes, b.pseudo_outcomes);
    let mean = a.pseudo_outcomes.iter().sum::<f64>() / a.pseudo_outcomes.len() as f64;
    assert!((mean - a.theta_hat).abs() < 1e-15);
    assert!(dope_crossfit(&data, &domain, &spec, &source, &crossfit_cfg(BetaMode::Unstructured, 1)).is_err());

    // The nuisances of a fold do not depend on that fold's own observations.
    let fitted = crossfit_nuisances(&data, &domain, &spec, &source, &crossfit_cfg(BetaMode::Unstructured, 3)).unwrap();
    let mut changed = data.clone();
    let target = fitted.folds[0];
    for (o, &f) in changed.iter_mut().zip(&fitted.folds) {
        if f == target {
            o.y.iter_mut().for_each(|y| *y += 1.0);
        }
    }
    let refit = crossfit_nuisances(&changed, &domain, &spec, &source, &crossfit_cfg(BetaMode::Unstructured, 3)).unwrap();
    for ((f, a), b) in fitted.folds.iter().zip(&fitted.nuisances).zip(&refit.nuisances) {
        if *f == target {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn per_fold_operators_match_in_loop_fitting() {
    let (domain, data) = pk(16, 0.5, 11, Role::Test);
    let spec = FunctionalSpec::tat();
    let cfg = crossfit_cfg(BetaMode::Unstructured, 2);
    let (folds, ops) = fit_fold_solutions(&data, &domain, tiny_fno(), &quick(), &cfg).unwrap();
    let inside = SolutionSource::CrossFit {
        backbone: tiny_fno(),
        train: quick(),
    };
    let a = crossfit_nuisances(&data, &domain, &spec, &inside, &cfg).unwrap();
    let b = crossfit_nuisances(&data, &domain, &spec, &SolutionSource::PerFold(ops.clone()), &cfg).unwrap();
    assert_eq!(folds, a.folds);
    assert_eq!(a.nuisances, b.nuisances);
    let short = SolutionSource::PerFold(ops[..1].to_vec());
    assert!(crossfit_nuisances(&data, &domain, &spec, &short, &cfg).is_err());
}

#[test]
fn pretrained_operator_is_left_untouched() {
    let (domain, data) = pk(16, 0.5, 10, Role::Test);
    let train = pk(32, 0.5, 10, Role::Train).1;
    let s_hat = Arc::new(train_solution_operator(&train, &domain, tiny_fno(), &quick(), 0, 0).unwrap());
    let before = s_hat.fingerprint();
    let source = SolutionSource::Pretrained(Arc::clone(&s_hat));
    for mode in [BetaMode::Unstructured, BetaMode::Structured] {
        dope_crossfit(&data, &domain, &FunctionalSpec::tat(), &source, &crossfit_cfg(mode, 2)).unwrap();
    }
    assert_eq!(s_hat.fingerprint(), before);
}

#[test]
fn oracle_mode_uses_the_simulator_weight() {
    let (domain, data) = pk(16, 0.5, 8, Role::Test);
    let train = pk(32, 0.5, 8, Role::Train).1;
    let spec = FunctionalSpec::auc();
    let s_hat = Arc::new(train_solution_operator(&train, &domain, tiny_fno(), &quick(), 0, 0).unwrap());
    let fitted = crossfit_nuisances(
        &data,
        &domain,
        &spec,
        &SolutionSource::Pretrained(s_hat),
        &crossfit_cfg(BetaMode::Oracle, 2),
    )
    .unwrap();
    for (o, nv) in data.iter().zip(&fitted.nuisances) {
        assert_eq!(nv.beta, o.design.xi());
    }
}

#[test]
fn ppi_without_unlabeled_inputs_is_the_one_step_estimate() {
    let (domain, data) = pk(40, 0.5, 9, Role::Test);
    let w = domain.weights();
    let spec = FunctionalSpec::soft_cmax();
    let mut nv = oracle_nuisances(&data, &spec, &domain);
    for n in &mut nv {
        n.s.iter_mut().for_each(|v| *v *= 0.95);
    }
    let refs: Vec<&Observation> = data.iter().collect();
    let dope = dope_from_nuisances("dope", &refs, &nv, &spec, &w, ReportMeta::default()).unwrap();
    let ppi = ppi_from_values(&refs, &nv, &[], &spec, &w).unwrap();
    assert!((dope.theta_hat - ppi.theta_hat).abs() < 1e-14);

    // Unlabeled inputs move only the plug-in average.
    let (_, pool) = pk(100, 0.5, 10, Role::Unlabeled);
    let unl: Vec<Vec<f64>> = pool.iter().map(|o| o.oracle_trajectory().unwrap().to_vec()).collect();
    let with = ppi_from_values(&refs, &nv, &unl, &spec, &w).unwrap();
    let corr: f64 = data
        .iter()
        .zip(&nv)
        .map(|(o, n)| correction(&n.s, &n.beta, o).unwrap())
        .sum::<f64>()
        / 40.0;
    let g_all: Vec<f64> = nv
        .iter()
        .map(|n| functional_value(&spec, &n.s, &w).unwrap())
        .chain(unl.iter().map(|u| functional_value(&spec, u, &w).unwrap()))
        .collect();
    let g_bar = g_all.iter().sum::<f64>() / g_all.len() as f64;
    assert!((with.theta_hat - (g_bar + corr)).abs() < 1e-14);
}

#[test]
fn corruption_limits() {
    let (domain, data) = pk(6, 0.5, 11, Role::Test);
    let w = domain.weights();
    let spec = FunctionalSpec::tat();
    let oracle = oracle_nuisances(&data, &spec, &domain);
    for (o, nv) in data.iter().zip(&oracle) {
        let fitted = NuisanceValues {
            s: nv.s.iter().map(|v| v * 1.1).collect(),
            beta: nv.beta.iter().map(|v| v + 0.3).collect(),
        };
        for which in [NuisanceKind::Solution, NuisanceKind::Weight] {
            assert_eq!(corrupt_nuisance(which, &fitted, o, &spec, &w, 0.0).unwrap(), fitted);
            for delta in [0.1, 0.5] {
                assert_eq!(&corrupt_nuisance(which, nv, o, &spec, &w, delta).unwrap(), nv);
            }
            assert!(corrupt_nuisance(which, &fitted, o, &spec, &w, 0.6).is_err());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn variance_matches_direct_formula(psi in prop::collection::vec(-5.0f64..5.0, 2..200)) {
        let (v, (lo, hi)) = variance_and_ci(&psi).unwrap();
        let n = psi.len() as f64;
        let m = psi.iter().sum::<f64>() / n;
        let direct = psi.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (n * n);
        prop_assert!((v - direct).abs() <= 1e-12 * direct.max(1e-12));
        prop_assert!(((hi + lo) / 2.0 - m).abs() < 1e-12);
        prop_assert!((hi - lo - 2.0 * 1.96 * v.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn folds_partition_evenly(n in 4usize..300, j in 2usize..6, seed in 0u64..1000) {
        prop_assume!(n >= 2 * j);
        let folds = assign_folds(n, j, seed, 0).unwrap();
        prop_assert_eq!(folds.len(), n);
        let mut counts = vec![0usize; j];
        for f in folds {
            counts[f] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }
}
