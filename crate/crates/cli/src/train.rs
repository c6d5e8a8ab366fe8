use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use dpr_core::losses::evaluate;
use dpr_core::network::FEATURE_LAYER;
use dpr_core::training::{init_output_bias, init_weights, run_schedule_with, select_top_k, OptimizerConfig};
use dpr_core::{save_model, LossKind, Network, Provenance, Schedule, Stage};
use serde::{Deserialize, Serialize};

use crate::common::{
    check_fits, create_dir, dataset_hash, is_false, load_net, load_samples, resolution_rule, robust_spec, write_json,
    JsonLines,
};
use crate::config::{required, write_copy};
use crate::exit::{Failure, Tag};

pub const MODEL_FILE: &str = "model.dprm";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SELECTION_FILE: &str = "selection.json";

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Output directory; one `seed-N/` subdirectory per seed.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Dataset scoring the final stage for `--top-k` (defaults to the
    /// training set).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
    /// `kind:learning_rate:epochs` with kind one of mse, interval, symbolic;
    /// repeat for several stages. Default: mse:0.01:20 then mse:0.001:10.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage: Vec<String>,
    /// Tolerance Δ in label units, shared by every output (default 10).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Feature perturbation radius κ for symbolic stages (default 0.01).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// Layer whose activated output is perturbed (default fc40).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,
    /// A seed `N` or an inclusive range `A..B` (default 0).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<String>,
    /// Keep this many best seeds by final-stage loss (default 1).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    /// Start from this model instead of fresh weights.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Use the target κ from the first step of symbolic stages.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub no_warmup: bool,
}

/// Parses `A`, `A..B` or `A..=B` (both range forms inclusive).
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let parse = |t: &str| {
        t.trim()
            .parse::<u64>()
            .with_context(|| format!("bad seed `{t}`"))
            .tag(Failure::Config)
    };
    match s.split_once("..") {
        None => Ok(vec![parse(s)?]),
        Some((a, b)) => {
            let (a, b) = (parse(a)?, parse(b.trim_start_matches('='))?);
            if a > b {
                return Err(anyhow::anyhow!("empty seed range `{s}`")).tag(Failure::Config);
            }
            Ok((a..=b).collect())
        }
    }
}

/// Parses `kind:learning_rate:epochs`.
pub fn parse_stage(s: &str, net: &Network, delta: f64, kappa: f64, layer: &str) -> Result<Stage> {
    let bad = || anyhow::anyhow!("stage `{s}` is not kind:learning_rate:epochs");
    let parts: Vec<&str> = s.split(':').collect();
    let [kind, lr, epochs] = parts[..] else {
        return Err(bad()).tag(Failure::Config);
    };
    let learning_rate: f64 = lr.parse().map_err(|_| bad()).tag(Failure::Config)?;
    let epochs: usize = epochs.parse().map_err(|_| bad()).tag(Failure::Config)?;
    let loss = match kind {
        "mse" => LossKind::Mse,
        "interval" => LossKind::Interval {
            delta: vec![delta; net.output_dim()],
        },
        "symbolic" => LossKind::Symbolic {
            spec: robust_spec(net, delta, kappa, layer)?,
        },
        other => {
            return Err(anyhow::anyhow!("unknown loss kind `{other}` (mse, interval, symbolic)")).tag(Failure::Config);
        }
    };
    Ok(Stage {
        loss,
        epochs,
        learning_rate,
    })
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    seed: u64,
    #[serde(flatten)]
    metrics: &'a dpr_core::training::EpochMetrics,
}

#[derive(Serialize)]
struct SeedScore {
    seed: u64,
    final_loss: f64,
    model: PathBuf,
}

pub fn run(args: TrainArgs) -> Result<()> {
    let data_dir = required(&args.data, "data")?;
    let out = required(&args.out, "out")?;
    let train = load_samples(&data_dir, None)?;
    let val = match &args.val {
        Some(dir) => Some(load_samples(dir, None)?),
        None => None,
    };
    let seeds = parse_seeds(args.seed.as_deref().unwrap_or("0"))?;
    let (delta, kappa) = (args.delta.unwrap_or(10.0), args.kappa.unwrap_or(0.01));
    let layer = args.layer.clone().unwrap_or_else(|| FEATURE_LAYER.to_string());
    let stage_specs = if args.stage.is_empty() {
        vec!["mse:0.01:20".to_string(), "mse:0.001:10".to_string()]
    } else {
        args.stage.clone()
    };

    let template = match &args.init {
        Some(path) => load_net(path)?.0,
        None => Network::default_architecture(train[0].input.shape(), train[0].label.len()).tag(Failure::Data)?,
    };
    check_fits(&template, &train)?;
    if let Some(v) = &val {
        check_fits(&template, v)?;
    }
    let stages = stage_specs
        .iter()
        .map(|s| parse_stage(s, &template, delta, kappa, &layer))
        .collect::<Result<Vec<_>>>()?;
    let schedule = Schedule {
        stages,
        batch_size: args.batch_size.unwrap_or(Schedule::default().batch_size),
        kappa_warmup: !args.no_warmup,
        ..Schedule::default()
    };
    schedule.validate_for(&template).tag(Failure::Config)?;
    for stage in &schedule.stages {
        if let LossKind::Symbolic { spec } = &stage.loss {
            eprintln!("{}", resolution_rule(&template, &layer, spec.layer_index));
        }
    }
    let top_k = args.top_k.unwrap_or(1);
    if top_k == 0 || top_k > seeds.len() {
        return Err(anyhow::anyhow!(
            "top-k must be between 1 and the number of seeds ({})",
            seeds.len()
        ))
        .tag(Failure::Config);
    }

    create_dir(&out)?;
    write_copy(&out, "train", &args)?;
    let data_hash = dataset_hash(&data_dir).tag(Failure::Data)?;
    let schedule_json = serde_json::to_value(&schedule)?;
    let final_kind = schedule.stages.last().expect("validated").loss.clone();
    let mut scores = Vec::new();
    for &seed in &seeds {
        let dir = out.join(format!("seed-{seed}"));
        create_dir(&dir)?;
        let mut net = template.clone();
        if args.init.is_none() {
            init_weights(&mut net, seed);
            init_output_bias(&mut net, &train).tag(Failure::Data)?;
        }
        let config = OptimizerConfig {
            seed,
            ..OptimizerConfig::default()
        };
        let mut metrics = JsonLines::create(&dir.join(METRICS_FILE))?;
        let mut write_err = None;
        run_schedule_with(&mut net, &train, &schedule, &config, |m| {
            eprintln!(
                "seed {seed} stage {} epoch {} {} loss {:.6}{} ({:.1} s)",
                m.stage,
                m.epoch,
                m.loss_kind,
                m.loss,
                m.kappa.map(|k| format!(" κ {k}")).unwrap_or_default(),
                m.wall_time_s
            );
            if let Err(e) = metrics.write(&MetricsLine { seed, metrics: m }) {
                write_err.get_or_insert(e);
            }
        })
        .with_context(|| format!("training seed {seed}"))?;
        if let Some(e) = write_err {
            return Err(e);
        }
        metrics.finish()?;
        let provenance = Provenance {
            seed: Some(seed),
            schedule: Some(schedule_json.clone()),
            data_hash: Some(data_hash.clone()),
            note: args.init.as_ref().map(|p| format!("fine-tuned from {}", p.display())),
        };
        let model_path = dir.join(MODEL_FILE);
        save_model(&model_path, &net, &provenance)?;
        let scored = val.as_deref().unwrap_or(&train);
        let final_loss = evaluate(&net, scored, &final_kind)?.value;
        eprintln!(
            "seed {seed}: final-stage loss {final_loss:.6} on the {} set",
            if val.is_some() { "validation" } else { "training" }
        );
        scores.push(SeedScore {
            seed,
            final_loss,
            model: model_path,
        });
    }
    select_and_report(&out, &scores, top_k)
}

fn select_and_report(out: &Path, scores: &[SeedScore], top_k: usize) -> Result<()> {
    let losses: Vec<f64> = scores.iter().map(|s| s.final_loss).collect();
    let chosen = select_top_k(&losses, top_k);
    for (rank, &i) in chosen.iter().enumerate() {
        let dest = out.join(format!("top-{}.dprm", rank + 1));
        fs::copy(&scores[i].model, &dest).with_context(|| format!("writing {}", dest.display()))?;
        println!(
            "top-{}: seed {} (final-stage loss {:.6}) -> {}",
            rank + 1,
            scores[i].seed,
            scores[i].final_loss,
            dest.display()
        );
    }
    let selected: Vec<&SeedScore> = chosen.iter().map(|&i| &scores[i]).collect();
    write_json(
        &out.join(SELECTION_FILE),
        &serde_json::json!({ "scores": scores, "selected": selected }),
    )
}
