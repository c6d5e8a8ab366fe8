//! Acceptance gate. Every criterion runs in sequence inside one test so the
//! timing limits are measured without contention, and each one prints a
//! single PASS/FAIL line to stderr (bypassing libtest's output capture).

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use dpr_core::attack::{compare_models, AttackConfig};
use dpr_core::data::{
    duplicate_rare, normalize_pixel, preprocess, synthetic_dataset, IMAGE_CENTER_X, IMAGE_HEIGHT, IMAGE_WIDTH,
    INPUT_HEIGHT, INPUT_WIDTH,
};
use dpr_core::interval::{suffix_bounds, RobustSpec};
use dpr_core::losses::{
    interval_tolerance_loss, mse_loss, overflow_oracle, symbolic_error, symbolic_tolerance_loss, tolerance_error,
    tolerance_error_clip, ToleranceBand,
};
use dpr_core::network::FEATURE_LAYER;
use dpr_core::training::{init_output_bias, init_weights, run_schedule, OptimizerConfig, Schedule, Stage};
use dpr_core::{LayerSpec, LossKind, Network, Sample, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// A random small network: either a dense stack or a tiny conv net.
fn random_net(r: &mut ChaCha8Rng) -> Network {
    let mut net = if r.gen_bool(0.5) {
        let depth = r.gen_range(1..=4);
        let mut sizes = vec![r.gen_range(1..=6)];
        sizes.extend((0..depth).map(|_| r.gen_range(1..=6)));
        dense_net(&sizes)
    } else {
        conv_net(
            r.gen_range(6..=9),
            r.gen_range(6..=9),
            r.gen_range(1..=2),
            r.gen_range(1..=3),
        )
    };
    randomize(&mut net, r, 0.8);
    net
}

/// `fv + d` with each offset `d` drawn by `offset`.
fn perturb(fv: &Tensor, mut offset: impl FnMut() -> f64) -> Tensor {
    Tensor::new(fv.shape().to_vec(), fv.data().iter().map(|v| v + offset()).collect()).unwrap()
}

fn random_delta(net: &Network, r: &mut ChaCha8Rng, max: f64) -> Vec<f64> {
    (0..net.output_dim()).map(|_| r.gen_range(0.0..max)).collect()
}

fn tolerance_forms_agree() -> Outcome {
    let mut r = rng(101);
    let mut mismatches = 0;
    for _ in 0..100_000 {
        let pred = r.gen_range(-1000.0..=1000.0);
        let band = ToleranceBand::new(r.gen_range(-1000.0..=1000.0), r.gen_range(0.0..=10.0)).unwrap();
        if tolerance_error(pred, band).to_bits() != tolerance_error_clip(pred, band).to_bits() {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} of 100000 triples differ"))
}

fn zero_tolerance_is_mse() -> Outcome {
    let mut r = rng(102);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let net = random_net(&mut r);
        let batch = samples_near(&net, r.gen_range(1..=8), 2.0, &mut r);
        let a = interval_tolerance_loss(&net, &batch, &vec![0.0; net.output_dim()])
            .unwrap()
            .value;
        let b = mse_loss(&net, &batch).unwrap().value;
        worst = worst.max(rel_err(a, b));
    }
    check(worst < 1e-9, format!("max relative error {worst:.3e} over 100 nets"))
}

fn symbolic_error_matches_overflow() -> Outcome {
    let mut r = rng(103);
    let band = ToleranceBand::new(1.5, 2.5).unwrap();
    let worked = [symbolic_error(-2.0, 5.5, band), symbolic_error(5.5, 9.0, band)];
    if worked != [1.25, 3.25] {
        return Err(format!("worked values {worked:?}, want [1.25, 3.25]"));
    }
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let a: f64 = r.gen_range(-1000.0..=1000.0);
        let b: f64 = r.gen_range(-1000.0..=1000.0);
        let band = ToleranceBand::new(r.gen_range(-1000.0..=1000.0), r.gen_range(0.0..=10.0)).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        worst = worst.max((symbolic_error(lo, hi, band) - overflow_oracle(lo, hi, band)).abs());
    }
    check(
        worst < 1e-12,
        format!("max absolute error {worst:.3e} over 100000 triples; worked values 1.25 and 3.25 exact"),
    )
}

fn zero_kappa_is_interval_loss() -> Outcome {
    let mut r = rng(104);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let net = random_net(&mut r);
        let batch = samples_near(&net, r.gen_range(1..=8), 2.0, &mut r);
        let delta = random_delta(&net, &mut r, 1.0);
        let l_tilde = r.gen_range(1..=net.len());
        let spec = RobustSpec::new(delta.clone(), l_tilde, 0.0).unwrap();
        let a = symbolic_tolerance_loss(&net, &batch, &spec).unwrap().value;
        let b = interval_tolerance_loss(&net, &batch, &delta).unwrap().value;
        worst = worst.max(rel_err(a, b));
    }
    check(worst < 1e-9, format!("max relative error {worst:.3e} over 50 nets"))
}

fn bounds_are_sound() -> Outcome {
    let mut r = rng(105);
    let kappas = [0.01, 0.1, 1.0];
    let (mut outside, mut not_nested, mut drawn) = (0usize, 0usize, 0usize);
    for _ in 0..20 {
        let net = random_net(&mut r);
        for _ in 0..10 {
            let x = uniform(net.input_shape(), &mut r, -1.0, 1.0);
            let l_tilde = r.gen_range(1..=net.len());
            let fv = net.forward_to(l_tilde - 1, &x).unwrap();
            let boxes: Vec<_> = kappas
                .iter()
                .map(|&k| suffix_bounds(&net, l_tilde, &fv, k).unwrap())
                .collect();
            not_nested += boxes.windows(2).filter(|w| !w[1].encloses(&w[0])).count();
            for (&kappa, bx) in kappas.iter().zip(&boxes) {
                for _ in 0..1000 {
                    let p = perturb(&fv, || r.gen_range(-kappa..kappa));
                    let out = net.forward_from(l_tilde, &p).unwrap();
                    drawn += 1;
                    if !bx.contains(&out) {
                        outside += 1;
                    }
                }
            }
        }
    }
    check(
        outside == 0 && not_nested == 0,
        format!("{outside} of {drawn} perturbed outputs outside [L, U]; {not_nested} non-nested κ pairs"),
    )
}

fn zero_symbolic_loss_certifies_training_set() -> Outcome {
    const DELTA: f64 = 10.0;
    const KAPPA: f64 = 0.01;
    let data = synthetic_dataset(20, 106).unwrap();
    let mut net = Network::from_specs(
        &[INPUT_HEIGHT, INPUT_WIDTH, 1],
        &[
            LayerSpec::Flatten { name: "flat".into() },
            LayerSpec::Dense {
                name: "hidden".into(),
                units: 64,
            },
            LayerSpec::Relu { name: "relu".into() },
            LayerSpec::Dense {
                name: "out".into(),
                units: 1,
            },
        ],
    )
    .unwrap();
    init_weights(&mut net, 0);
    init_output_bias(&mut net, &data).unwrap();
    let l_tilde = net.perturbation_index_after("hidden").unwrap();
    let spec = RobustSpec::new(vec![DELTA], l_tilde, KAPPA).unwrap();
    let chunk = Schedule {
        stages: vec![Stage {
            loss: LossKind::Symbolic { spec: spec.clone() },
            epochs: 10,
            // Adam moves each of the 40960 input weights by about lr per step,
            // so larger rates push every hidden pre-activation below zero.
            learning_rate: 3e-5,
        }],
        batch_size: 20,
        kappa_warmup: false,
        ..Schedule::default()
    };
    let mut loss = symbolic_tolerance_loss(&net, &data, &spec).unwrap().value;
    let mut epochs = 0;
    while loss >= 1e-12 && epochs < 2000 {
        run_schedule(&mut net, &data, &chunk, &OptimizerConfig::default()).unwrap();
        epochs += 10;
        loss = symbolic_tolerance_loss(&net, &data, &spec).unwrap().value;
    }
    if loss >= 1e-12 {
        return Err(format!("symbolic loss still {loss:.3e} after {epochs} epochs"));
    }
    let mut r = rng(106);
    let mut violations = 0;
    for s in &data {
        let fv = net.forward_to(l_tilde - 1, &s.input).unwrap();
        let (lo, hi) = (s.label[0] - DELTA, s.label[0] + DELTA);
        for i in 0..10_000 {
            // Half the draws are box corners, where the suffix is extremal.
            let p = if i % 2 == 0 {
                perturb(&fv, || if r.gen_bool(0.5) { KAPPA } else { -KAPPA })
            } else {
                perturb(&fv, || r.gen_range(-KAPPA..=KAPPA))
            };
            let y = net.forward_from(l_tilde, &p).unwrap().data()[0];
            if !(lo <= y && y <= hi) {
                violations += 1;
            }
        }
    }
    check(
        violations == 0,
        format!("loss {loss:.1e} after {epochs} epochs; {violations} violations in 200000 perturbations"),
    )
}

fn gradients_match_finite_differences() -> Outcome {
    let mut r = rng(107);
    let (mut accepted, mut kinks, mut worst) = (0usize, 0usize, 0.0f64);
    let mut per_kind = [0usize; 2];
    while accepted < 200 {
        let mut net = if r.gen_bool(0.5) {
            conv_net(8, 7, 1, 2)
        } else {
            dense_net(&[5, 6, 4, 2])
        };
        randomize(&mut net, &mut r, 0.8);
        let batch = samples_near(&net, 4, 2.0, &mut r);
        let which = accepted % 2;
        let delta = random_delta(&net, &mut r, 0.5);
        let kind = if which == 0 {
            LossKind::Interval { delta }
        } else {
            let l_tilde = r.gen_range(1..=net.len());
            LossKind::Symbolic {
                spec: RobustSpec::new(delta, l_tilde, r.gen_range(0.01..0.2)).unwrap(),
            }
        };
        let param = r.gen_range(0..net.parameters().len());
        let coord = r.gen_range(0..net.parameters()[param].len());
        match fd_parameter(&net, &batch, &kind, param, coord, 1e-5) {
            Some(point) => {
                worst = worst.max(point.rel_err());
                accepted += 1;
                per_kind[which] += 1;
            }
            None => kinks += 1,
        }
    }
    check(
        worst < 1e-4,
        format!(
            "max relative error {worst:.3e} over {} interval + {} symbolic points ({kinks} kinks skipped)",
            per_kind[0], per_kind[1]
        ),
    )
}

/// Fraction of samples predicted within `delta` of the label.
fn within_delta(net: &Network, data: &[Sample], delta: f64) -> f64 {
    let hits = data
        .iter()
        .filter(|s| (net.forward(&s.input).unwrap().data()[0] - s.label[0]).abs() <= delta)
        .count();
    hits as f64 / data.len() as f64
}

fn robust_models_resist_attacks_longer() -> Outcome {
    const SEEDS: u64 = 4;
    let train = duplicate_rare(synthetic_dataset(2000, 7).unwrap());
    let eval = synthetic_dataset(200, 8).unwrap();
    let baseline = Schedule {
        stages: vec![
            Stage {
                loss: LossKind::Mse,
                epochs: 4,
                learning_rate: 0.01,
            },
            Stage {
                loss: LossKind::Mse,
                epochs: 2,
                learning_rate: 0.001,
            },
        ],
        ..Schedule::default()
    };
    let attack = AttackConfig::default();
    let (mut trend_seeds, mut accuracy_ok) = (0, true);
    let mut lines = Vec::new();
    for seed in 0..SEEDS {
        let mut base = Network::default_architecture(&[INPUT_HEIGHT, INPUT_WIDTH, 1], 1).unwrap();
        init_weights(&mut base, seed);
        init_output_bias(&mut base, &train).unwrap();
        let config = OptimizerConfig {
            seed,
            ..OptimizerConfig::default()
        };
        run_schedule(&mut base, &train, &baseline, &config).unwrap();
        let mut robust = base.clone();
        let l_tilde = robust.perturbation_index_after(FEATURE_LAYER).unwrap();
        let spec = RobustSpec::new(vec![10.0], l_tilde, 0.01).unwrap();
        let fine_tune = Schedule {
            stages: vec![Stage {
                loss: LossKind::Symbolic { spec },
                epochs: 2,
                learning_rate: 0.001,
            }],
            ..Schedule::default()
        };
        run_schedule(&mut robust, &train, &fine_tune, &config).unwrap();

        let report = compare_models(&robust, &base, &eval, &attack).unwrap();
        let f = report.fractions;
        let trend = f.a_larger > f.b_larger;
        trend_seeds += usize::from(trend);
        let (acc_b, acc_r) = (within_delta(&base, &eval, 10.0), within_delta(&robust, &eval, 10.0));
        let acc_gap = rel_err(acc_b, acc_r);
        accuracy_ok &= acc_gap < 0.2;
        lines.push(format!(
            "seed {seed}: robust larger {:.3}, equal {:.3}, baseline larger {:.3} over {} images; \
             within-10px accuracy {acc_b:.3} vs {acc_r:.3}",
            f.a_larger,
            f.roughly_equal,
            f.b_larger,
            report.rows.len()
        ));
    }
    check(
        trend_seeds >= 3 && accuracy_ok,
        format!(
            "trend on {trend_seeds}/{SEEDS} seeds, accuracy gap < 20% on all seeds: {accuracy_ok}\n    {}",
            lines.join("\n    ")
        ),
    )
}

fn pipeline_is_exact() -> Outcome {
    let mut problems = Vec::new();
    let (h, w) = (IMAGE_HEIGHT, IMAGE_WIDTH);
    // Left half black, right half white, with one grey 4×4 block.
    for channels in [1usize, 3] {
        let mut px = vec![0.0; h * w * channels];
        for y in 0..h {
            for x in w / 2..w {
                for c in 0..channels {
                    px[(y * w + x) * channels + c] = 255.0;
                }
            }
        }
        for y in 208..212 {
            for x in 0..4 {
                for c in 0..channels {
                    px[(y * w + x) * channels + c] = (10 * (y - 208) + x + 50 * c) as f64;
                }
            }
        }
        let out = preprocess(&Tensor::new(vec![h, w, channels], px).unwrap()).unwrap();
        if out.shape() != [INPUT_HEIGHT, INPUT_WIDTH, 1] {
            problems.push(format!("shape {:?}", out.shape()));
            continue;
        }
        let d = out.data();
        let black_ok =
            (0..INPUT_HEIGHT).all(|y| (0..INPUT_WIDTH / 2).all(|x| (y, x) == (0, 0) || d[y * INPUT_WIDTH + x] == -1.0));
        let white_ok = (0..INPUT_HEIGHT).all(|y| (INPUT_WIDTH / 2..INPUT_WIDTH).all(|x| d[y * INPUT_WIDTH + x] == 1.0));
        // Mean of 10·dy + dx over the block, plus the channel offset mean.
        let block_mean = 16.5 + 50.0 * (channels as f64 - 1.0) / 2.0;
        let block_ok = (d[0] - normalize_pixel(block_mean)).abs() < 1e-12;
        if !(black_ok && white_ok && block_ok) {
            problems.push(format!(
                "c={channels}: black {black_ok} white {white_ok} block {block_ok}"
            ));
        }
    }
    if normalize_pixel(0.0) != -1.0 || normalize_pixel(255.0) != 1.0 {
        problems.push("t(0), t(255) not exactly -1, 1".into());
    }
    let labels = [
        IMAGE_CENTER_X - 100.0,
        IMAGE_CENTER_X + 100.0,
        IMAGE_CENTER_X - 99.999,
        IMAGE_CENTER_X + 99.999,
        IMAGE_CENTER_X,
        0.0,
    ];
    let samples: Vec<Sample> = labels
        .iter()
        .map(|&lb| Sample::new(Tensor::vector(vec![0.0]), vec![lb], format!("{lb}")))
        .collect();
    let dup: Vec<f64> = duplicate_rare(samples)
        .iter()
        .filter(|s| s.duplicated)
        .map(|s| s.label[0])
        .collect();
    if dup != [labels[0], labels[1], labels[5]] {
        problems.push(format!("duplicated {dup:?}"));
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            "720×1280×{1,3} → 128×320×1, t(0) = −1, t(255) = 1, ≥100 px rule inclusive".into()
        } else {
            problems.join("; ")
        },
    )
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        (
            "tolerance error equals its clip form",
            Duration::from_secs(5),
            tolerance_forms_agree,
        ),
        (
            "zero tolerance reduces to MSE",
            Duration::from_secs(30),
            zero_tolerance_is_mse,
        ),
        (
            "symbolic error equals overflow",
            Duration::from_secs(5),
            symbolic_error_matches_overflow,
        ),
        (
            "zero κ reduces to the interval loss",
            Duration::from_secs(30),
            zero_kappa_is_interval_loss,
        ),
        (
            "feature bounds are sound and nested",
            Duration::from_secs(120),
            bounds_are_sound,
        ),
        (
            "zero symbolic loss certifies the training set",
            Duration::from_secs(120),
            zero_symbolic_loss_certifies_training_set,
        ),
        (
            "gradients match finite differences",
            Duration::from_secs(60),
            gradients_match_finite_differences,
        ),
        (
            "robust fine-tuning raises the minimal attack step",
            Duration::from_secs(30 * 60),
            robust_models_resist_attacks_longer,
        ),
        ("pipeline is exact", Duration::from_secs(5), pipeline_is_exact),
    ];
    let mut err = std::io::stderr();
    let mut failed = Vec::new();
    for (i, (name, limit, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if took < limit => (true, d),
            Ok(d) => (false, format!("{d}; too slow")),
            Err(d) => (false, d),
        };
        let _ = writeln!(
            err,
            "criterion {} [{}] {name}: {detail} ({:.1} s, limit {} s)",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            limit.as_secs()
        );
        if !pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
