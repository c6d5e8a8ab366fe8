mod common;

use common::*;
use dpr_core::interval::{output_bounds, RobustSpec};
use dpr_core::losses::{loss_and_gradients, mse_loss, symbolic_tolerance_loss};
use dpr_core::training::{adam_step, init_weights, run_schedule, AdamState, OptimizerConfig, Schedule, Stage};
use dpr_core::{Error, LayerSpec, LossKind, Network, Sample, Tensor};

fn bits(net: &Network) -> Vec<u64> {
    net.parameters()
        .iter()
        .flat_map(|p| p.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn one_stage(loss: LossKind, epochs: usize, learning_rate: f64, batch_size: usize) -> Schedule {
    Schedule {
        stages: vec![Stage {
            loss,
            epochs,
            learning_rate,
        }],
        batch_size,
        ..Schedule::default()
    }
}

fn toy_dataset(net: &Network, n: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng(seed);
    samples_near(net, n, 2.0, &mut r)
}

#[test]
fn convex_toy_problem_converges() {
    let mut net = Network::from_specs(
        &[3],
        &[LayerSpec::Dense {
            name: "w".into(),
            units: 1,
        }],
    )
    .unwrap();
    init_weights(&mut net, 0);
    let sample = Sample::new(Tensor::vector(vec![0.5, -1.0, 0.25]), vec![2.0], "only");
    let data = vec![sample];
    let config = OptimizerConfig {
        seed: 0,
        ..OptimizerConfig::default()
    };
    let log = run_schedule(&mut net, &data, &one_stage(LossKind::Mse, 500, 0.01, 1), &config).unwrap();
    let first_below = log.iter().position(|m| m.loss < 1e-6);
    assert!(first_below.is_some(), "final loss {}", log.last().unwrap().loss);
    assert!(mse_loss(&net, &data).unwrap().value < 1e-6);
}

#[test]
fn symbolic_with_zero_tolerance_and_kappa_reproduces_mse_trajectory() {
    let mut base = conv_net(8, 7, 1, 1);
    init_weights(&mut base, 3);
    let data = toy_dataset(&base, 20, 9);
    let config = OptimizerConfig {
        seed: 5,
        ..OptimizerConfig::default()
    };
    let l_tilde = base.perturbation_index_after("hidden").unwrap();
    let symbolic = LossKind::Symbolic {
        spec: RobustSpec::new(vec![0.0], l_tilde, 0.0).unwrap(),
    };
    let mut a = base.clone();
    let mut b = base.clone();
    let log_a = run_schedule(&mut a, &data, &one_stage(LossKind::Mse, 6, 0.01, 4), &config).unwrap();
    let log_b = run_schedule(&mut b, &data, &one_stage(symbolic, 6, 0.01, 4), &config).unwrap();
    assert_eq!(bits(&a), bits(&b));
    let la: Vec<u64> = log_a.iter().map(|m| m.loss.to_bits()).collect();
    let lb: Vec<u64> = log_b.iter().map(|m| m.loss.to_bits()).collect();
    assert_eq!(la, lb);
    assert_ne!(bits(&a), bits(&base));
}

#[test]
fn batch_inside_bands_under_kappa_leaves_parameters_unchanged() {
    let mut net = dense_net(&[3, 5, 1]);
    let mut r = rng(11);
    randomize(&mut net, &mut r, 0.5);
    let data = samples_near(&net, 6, 0.2, &mut r);
    let spec = RobustSpec::new(vec![5.0], 2, 0.01).unwrap();
    for s in &data {
        let b = output_bounds(&net, &s.input, &spec).unwrap();
        assert!(b.lower().data()[0] >= s.label[0] - 5.0 && b.upper().data()[0] <= s.label[0] + 5.0);
    }
    let refs: Vec<&Sample> = data.iter().collect();
    let kind = LossKind::Symbolic { spec };
    let (report, grads) = loss_and_gradients(&net, &refs, &kind).unwrap();
    assert_eq!(report.value, 0.0);
    assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    let before = bits(&net);
    let mut state = AdamState::for_params(net.parameters());
    let config = OptimizerConfig::default();
    adam_step(&mut net.parameters_mut(), &grads, &mut state, &config, 0.01).unwrap();
    assert_eq!(bits(&net), before);
    assert_eq!(state.step, 1);
}

#[test]
fn training_is_deterministic() {
    let mut base = conv_net(8, 7, 1, 1);
    init_weights(&mut base, 1);
    let data = toy_dataset(&base, 12, 2);
    let spec = RobustSpec::new(vec![0.5], base.perturbation_index_after("hidden").unwrap(), 0.05).unwrap();
    let schedule = Schedule {
        stages: vec![
            Stage {
                loss: LossKind::Mse,
                epochs: 3,
                learning_rate: 0.01,
            },
            Stage {
                loss: LossKind::Symbolic { spec },
                epochs: 3,
                learning_rate: 0.001,
            },
        ],
        batch_size: 5,
        ..Schedule::default()
    };
    let config = OptimizerConfig {
        seed: 42,
        ..OptimizerConfig::default()
    };
    let run = || {
        let mut net = base.clone();
        let log = run_schedule(&mut net, &data, &schedule, &config).unwrap();
        (bits(&net), log.iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
    let mut other = base.clone();
    let config2 = OptimizerConfig { seed: 43, ..config };
    run_schedule(&mut other, &data, &schedule, &config2).unwrap();
    assert_ne!(bits(&other), run().0, "shuffle order should depend on the seed");
}

#[test]
fn mse_stage_loss_settles_on_tiny_dataset() {
    let mut net = dense_net(&[4, 8, 1]);
    init_weights(&mut net, 0);
    let mut r = rng(3);
    let data: Vec<Sample> = (0..8)
        .map(|i| {
            let x = uniform(&[4], &mut r, -1.0, 1.0);
            let y = x.data()[0] - 0.5 * x.data()[2];
            Sample::new(x, vec![y], format!("{i}"))
        })
        .collect();
    let config = OptimizerConfig::default();
    let log = run_schedule(&mut net, &data, &one_stage(LossKind::Mse, 60, 0.01, 8), &config).unwrap();
    for w in log[5..].windows(2) {
        assert!(
            w[1].loss <= w[0].loss,
            "epoch {}: {} -> {}",
            w[1].epoch,
            w[0].loss,
            w[1].loss
        );
    }
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let mut net = dense_net(&[2, 3, 1]);
    init_weights(&mut net, 0);
    let mut data: Vec<Sample> = (0..4)
        .map(|i| Sample::new(Tensor::vector(vec![0.1 * i as f64, 0.2]), vec![1.0], format!("{i}")))
        .collect();
    data[2].label[0] = f64::NAN;
    let err = run_schedule(
        &mut net,
        &data,
        &one_stage(LossKind::Mse, 2, 0.01, 8),
        &OptimizerConfig::default(),
    )
    .unwrap_err();
    match err {
        Error::NonFinite(msg) => assert!(msg.contains("epoch 0") && msg.contains("batch 0"), "{msg}"),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn robust_stage_ramps_kappa_and_reduces_symbolic_loss() {
    let mut net = dense_net(&[4, 8, 8, 1]);
    init_weights(&mut net, 2);
    let mut r = rng(8);
    let data: Vec<Sample> = (0..24)
        .map(|i| {
            let x = uniform(&[4], &mut r, -1.0, 1.0);
            let y = 3.0 * x.data()[1] + x.data()[3];
            Sample::new(x, vec![y], format!("{i}"))
        })
        .collect();
    let spec = RobustSpec::new(vec![0.2], net.perturbation_index_after("fc2").unwrap(), 0.05).unwrap();
    let before = symbolic_tolerance_loss(&net, &data, &spec).unwrap().value;
    let mut schedule = one_stage(LossKind::Symbolic { spec: spec.clone() }, 40, 0.01, 8);
    schedule.kappa_warmup = true;
    let log = run_schedule(&mut net, &data, &schedule, &OptimizerConfig::default()).unwrap();
    let kappas: Vec<f64> = log.iter().map(|m| m.kappa.unwrap()).collect();
    assert!(kappas.windows(2).all(|w| w[0] <= w[1]));
    assert!(kappas[0] < 0.05);
    assert_eq!(*kappas.last().unwrap(), 0.05);
    let after = symbolic_tolerance_loss(&net, &data, &spec).unwrap().value;
    assert!(after < 0.5 * before, "{before} -> {after}");
}
