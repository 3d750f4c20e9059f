use std::sync::Arc;

use dope_core::autodiff::{forward_jvp, reverse_gradient, Tape, Tensor, Var};
use dope_core::data::{InputField, Observation};
use dope_core::grid::Domain;
use dope_core::operators::{
    batch_input, bases_1d, train_solution_operator, BackboneConfig, DeepONetConfig, FnoConfig, Operator, TrainConfig,
    TrainingMeta,
};
use dope_core::pk::{generate_pk_dataset, PkConfig};
use dope_core::rng::{stream, Role};
use rand::Rng;

fn pk_domain() -> Domain {
    Domain::Line(PkConfig::default().grid().unwrap())
}

fn small_fno() -> BackboneConfig {
    BackboneConfig::Fno1d(FnoConfig {
        in_channels: 4,
        hidden_channels: 4,
        out_channels: 1,
        n_layers: 2,
        modes: 5,
    })
}

fn small_deeponet() -> BackboneConfig {
    BackboneConfig::DeepOnet(DeepONetConfig {
        in_channels: 4,
        branch_width: 6,
        trunk_width: 6,
        latent: 5,
        out_channels: 1,
    })
}

fn pk_inputs(n: usize, seed: u64) -> Vec<Observation> {
    generate_pk_dataset(n, 0.5, &PkConfig::default(), seed, Role::Test, 0)
        .unwrap()
        .samples
}

/// Squared error of the operator output against a fixed target.
fn loss<'a>(
    op: &'a Operator,
    x: &'a Tensor,
    target: &Arc<Vec<f64>>,
    batch: usize,
) -> impl FnOnce(&mut Tape, &[Var]) -> dope_core::Result<Var> + 'a {
    let target = Arc::clone(target);
    move |tape, params| {
        let xv = tape.leaf(x);
        let y = op.forward(tape, params, xv, batch)?;
        let t = tape.leaf_owned(1, target.len(), target.to_vec())?;
        let d = tape.sub(y, t)?;
        Ok(tape.sum_squares(d))
    }
}

fn gradient_check(cfg: BackboneConfig) {
    let domain = pk_domain();
    let mut rng = stream(21, Role::MonteCarlo, 0);
    let op = Operator::init(cfg, &domain, &mut rng).unwrap();
    let data = pk_inputs(2, 3);
    let inputs: Vec<&InputField> = data.iter().map(|o| &o.input).collect();
    let x = batch_input(&inputs, &domain).unwrap();
    let target: Arc<Vec<f64>> = Arc::new((0..2 * domain.len()).map(|i| (i as f64 * 0.05).sin() * 0.3).collect());
    let params: Vec<Tensor> = op.tensors().to_vec();
    let (_, grads) = reverse_gradient(&params, loss(&op, &x, &target, 2)).unwrap();
    let eval = |ps: &[Tensor]| reverse_gradient(ps, loss(&op, &x, &target, 2)).unwrap().0;
    for (ti, t) in params.iter().enumerate() {
        let gmax = grads[ti].iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for _ in 0..8 {
            let j = rng.gen_range(0..t.len());
            let h = 1e-4 * t.data[j].abs().max(1.0);
            let at = |s: f64| {
                let mut ps = params.clone();
                ps[ti].data[j] += s * h;
                eval(&ps)
            };
            // five-point stencil, O(h^4)
            let fd = (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * h);
            let g = grads[ti][j];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3 * gmax).max(1e-8);
            assert!(rel < 1e-5, "tensor {ti} entry {j}: {g} vs {fd}");
        }
    }
}

#[test]
fn fno_gradients_match_finite_differences() {
    gradient_check(small_fno());
}

#[test]
fn deeponet_gradients_match_finite_differences() {
    gradient_check(small_deeponet());
}

#[test]
fn jvp_agrees_with_contracted_gradient() {
    let domain = pk_domain();
    let mut rng = stream(22, Role::MonteCarlo, 0);
    let op = Operator::init(small_fno(), &domain, &mut rng).unwrap();
    let data = pk_inputs(2, 4);
    let inputs: Vec<&InputField> = data.iter().map(|o| &o.input).collect();
    let x = batch_input(&inputs, &domain).unwrap();
    let target: Arc<Vec<f64>> = Arc::new(vec![0.1; 2 * domain.len()]);
    let params = op.tensors().to_vec();
    let tangents: Vec<Vec<f64>> = params
        .iter()
        .map(|t| (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let (_, grads) = reverse_gradient(&params, loss(&op, &x, &target, 2)).unwrap();
    let contracted: f64 = grads
        .iter()
        .zip(&tangents)
        .map(|(g, t)| g.iter().zip(t).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let (_, jvp) = forward_jvp(&params, &tangents, loss(&op, &x, &target, 2)).unwrap();
    assert!((jvp - contracted).abs() <= 1e-10 * contracted.abs(), "{jvp} vs {contracted}");
    let zeros: Vec<Vec<f64>> = params.iter().map(|t| vec![0.0; t.len()]).collect();
    assert_eq!(forward_jvp(&params, &zeros, loss(&op, &x, &target, 2)).unwrap().1, 0.0);
}

#[test]
fn pk_fno_maps_four_channels_to_one() {
    let domain = pk_domain();
    let mut rng = stream(1, Role::MonteCarlo, 0);
    let op = Operator::init(BackboneConfig::pk_fno(), &domain, &mut rng).unwrap();
    let data = pk_inputs(3, 1);
    let x = batch_input(&[&data[0].input], &domain).unwrap();
    assert_eq!((x.rows, x.cols), (4, 128));
    let mut tape = Tape::new();
    let leaves: Vec<Var> = op.tensors().iter().map(|t| tape.leaf(t)).collect();
    let xv = tape.leaf(&x);
    let y = op.forward(&mut tape, &leaves, xv, 1).unwrap();
    assert_eq!(tape.shape(y), (1, 128));
    let preds = op.predict(&data.iter().map(|o| &o.input).collect::<Vec<_>>()).unwrap();
    assert_eq!(preds.len(), 3);
    assert!(preds.iter().all(|p| p.len() == 128));
}

#[test]
fn truncated_modes_do_not_pass_the_spectral_path() {
    let n = 128;
    let b = bases_1d(n, 12);
    let signal: Vec<f64> = (0..n)
        .map(|j| (2.0 * std::f64::consts::PI * 20.0 * j as f64 / n as f64).cos())
        .collect();
    let mut tape = Tape::new();
    let x = tape.leaf_owned(1, n, signal).unwrap();
    let spec = tape.matmul_const(x, &b.analysis).unwrap();
    assert!(tape.value(spec).iter().all(|v| v.abs() < 1e-10));
    let back = tape.matmul_const(spec, &b.synthesis).unwrap();
    assert!(tape.value(back).iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn deeponet_queries_and_branch_superposition() {
    let domain = pk_domain();
    let mut rng = stream(2, Role::MonteCarlo, 0);
    let op = Operator::init(BackboneConfig::pk_deeponet(), &domain, &mut rng).unwrap();
    let data = pk_inputs(1, 2);
    let queries: Vec<Vec<f64>> = (0..24).map(|i| vec![i as f64 / 23.0 * 0.97 + 0.01]).collect();
    let out = op.predict_at(&data[0].input, &queries).unwrap();
    assert_eq!(out.len(), 24);

    // Zero the last branch layer so its bias is the embedding, then check
    // that the output is affine in that embedding.
    let with_embedding = |e: &[f64]| {
        let mut ts = op.tensors().to_vec();
        ts[4].data.iter_mut().for_each(|v| *v = 0.0);
        ts[5].data.copy_from_slice(e);
        let o = op.with_tensors(ts, TrainingMeta::default()).unwrap();
        o.predict_at(&data[0].input, &queries).unwrap()
    };
    let latent = op.tensors()[5].len();
    let e1: Vec<f64> = (0..latent).map(|i| (i as f64).sin()).collect();
    let e2: Vec<f64> = (0..latent).map(|i| (i as f64 * 0.3).cos()).collect();
    let sum: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| a + b).collect();
    let (y1, y2, y12, y0) = (
        with_embedding(&e1),
        with_embedding(&e2),
        with_embedding(&sum),
        with_embedding(&vec![0.0; latent]),
    );
    for i in 0..24 {
        assert!((y12[i] - (y1[i] + y2[i] - y0[i])).abs() < 1e-12);
    }
}

fn observed_mse(op: &Operator, data: &[Observation]) -> f64 {
    let preds = op.predict(&data.iter().map(|o| &o.input).collect::<Vec<_>>()).unwrap();
    let total: f64 = data
        .iter()
        .zip(&preds)
        .map(|(o, p)| o.obs_indices.iter().zip(&o.y).map(|(&i, y)| (p[i] - y).powi(2)).sum::<f64>() / o.k() as f64)
        .sum();
    total / data.len() as f64
}

#[test]
fn zero_epochs_return_the_initialization() {
    let domain = pk_domain();
    let data = pk_inputs(8, 5);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let a = train_solution_operator(&data, &domain, small_fno(), &cfg, 3, 0).unwrap();
    let mut rng = stream(3, Role::SolutionInit, 0);
    let b = Operator::init(small_fno(), &domain, &mut rng).unwrap();
    assert_eq!(a.tensors(), b.tensors());
}

#[test]
fn single_sample_is_memorized() {
    let domain = pk_domain();
    let data = pk_inputs(1, 6);
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let op = train_solution_operator(&data, &domain, BackboneConfig::pk_fno(), &cfg, 0, 0).unwrap();
    let mse = observed_mse(&op, &data);
    assert!(mse < 1e-4, "{mse}");
}

#[test]
fn one_epoch_reduces_training_loss() {
    let domain = pk_domain();
    let data = pk_inputs(256, 7);
    let zero = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let one = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut improved = 0;
    for seed in 0..50 {
        let init = train_solution_operator(&data, &domain, BackboneConfig::pk_fno(), &zero, seed, 0).unwrap();
        let fit = train_solution_operator(&data, &domain, BackboneConfig::pk_fno(), &one, seed, 0).unwrap();
        if observed_mse(&fit, &data) < observed_mse(&init, &data) {
            improved += 1;
        }
    }
    assert!(improved >= 48, "{improved} of 50");
}

#[test]
fn checkpoint_round_trip() {
    let domain = pk_domain();
    let mut rng = stream(8, Role::MonteCarlo, 0);
    let op = Operator::init(small_fno(), &domain, &mut rng).unwrap();
    let back = Operator::from_checkpoint(&op.to_checkpoint().unwrap(), &small_fno(), &domain).unwrap();
    assert_eq!(op.fingerprint(), back.fingerprint());
    assert!(Operator::from_checkpoint(&op.to_checkpoint().unwrap(), &small_deeponet(), &domain).is_err());
}

#[test]
fn initialized_operators_give_finite_outputs() {
    let domain = pk_domain();
    let data = pk_inputs(1000, 11);
    let inputs: Vec<&InputField> = data.iter().map(|o| &o.input).collect();
    for (seed, cfg) in [(0, BackboneConfig::pk_fno()), (1, BackboneConfig::pk_deeponet())] {
        let mut rng = stream(seed, Role::MonteCarlo, 0);
        let op = Operator::init(cfg, &domain, &mut rng).unwrap();
        let preds = op.predict(&inputs).unwrap();
        assert!(preds.iter().flatten().all(|v| v.is_finite()));
    }
}
