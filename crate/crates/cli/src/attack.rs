use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use dpr_core::attack::{compare_models_with, minimal_epsilon, AttackConfig, RAW_PIXEL_SCALE};
use dpr_core::{EpsilonSearch, Network};
use serde::{Deserialize, Serialize};

use crate::common::{check_fits, create_dir, is_false, load_net, load_samples, write_json, JsonLines};
use crate::config::{required, write_copy};
use crate::exit::{Failure, Tag};

pub const EPSILONS_FILE: &str = "epsilons.jsonl";
pub const REPORT_FILE: &str = "comparison.json";
pub const TABLE_FILE: &str = "comparison.txt";
pub const SCATTER_FILE: &str = "scatter.csv";

fn attack_config(
    net: &Network,
    threshold: Option<f64>,
    tolerance: Option<f64>,
    equality_band: Option<f64>,
) -> Result<AttackConfig> {
    let defaults = AttackConfig::default();
    let config = AttackConfig {
        deviation_threshold: threshold.unwrap_or(defaults.deviation_threshold),
        tolerance: vec![tolerance.unwrap_or(defaults.tolerance[0]); net.output_dim()],
        equality_band: equality_band.unwrap_or(defaults.equality_band),
        ..defaults
    };
    config.validate().tag(Failure::Config)?;
    Ok(config)
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct AttackArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Evaluation dataset directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Output directory for reports.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Deviation from the label that counts as a successful attack
    /// (default 80).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Band around the label an unattacked prediction must fall in
    /// (default 10).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    /// Only use the first N images.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    /// Report ε in 8-bit pixel units instead of normalised units.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub raw_units: bool,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct CompareArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_a: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_b: Option<PathBuf>,
    /// ε differences below this count as roughly equal (default 0.05).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equality_band: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_a: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_b: Option<String>,
    /// Evaluation dataset directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Output directory for reports.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Deviation from the label that counts as a successful attack
    /// (default 80).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Band around the label an unattacked prediction must fall in
    /// (default 10).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    /// Only use the first N images.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    /// Report ε in 8-bit pixel units instead of normalised units.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub raw_units: bool,
}

#[derive(Serialize)]
struct EpsilonRecord<'a> {
    id: &'a str,
    #[serde(flatten)]
    result: &'a EpsilonSearch,
}

pub fn run_attack(args: AttackArgs) -> Result<()> {
    let (net, _) = load_net(&required(&args.model, "model")?)?;
    let samples = load_samples(&required(&args.data, "data")?, args.limit)?;
    check_fits(&net, &samples)?;
    let config = attack_config(&net, args.threshold, args.tolerance, None)?;
    let out = required(&args.out, "out")?;
    create_dir(&out)?;
    write_copy(&out, "attack", &args)?;
    let mut records = JsonLines::create(&out.join(EPSILONS_FILE))?;
    let (mut found, mut not_found, mut ineligible) = (Vec::new(), 0, 0);
    for (i, sample) in samples.iter().enumerate() {
        let result = minimal_epsilon(&net, &sample.input, &sample.label, &config)?;
        match result {
            EpsilonSearch::Found { epsilon } => found.push(epsilon),
            EpsilonSearch::NotFound => not_found += 1,
            EpsilonSearch::Ineligible { .. } => ineligible += 1,
        }
        records.write(&EpsilonRecord {
            id: &sample.source_id,
            result: &result,
        })?;
        eprint!("\r{}/{} images", i + 1, samples.len());
    }
    eprintln!();
    records.finish()?;
    let scale = if args.raw_units { RAW_PIXEL_SCALE } else { 1.0 };
    let mean = found.iter().sum::<f64>() / found.len().max(1) as f64 * scale;
    let summary = serde_json::json!({
        "images": samples.len(),
        "found": found.len(),
        "not_found": not_found,
        "ineligible": ineligible,
        "mean_epsilon": mean,
        "units": if args.raw_units { "raw" } else { "normalised" },
    });
    write_json(&out.join("attack-summary.json"), &summary)?;
    println!(
        "{} images: {} attacked (mean ε {mean:.4}), {not_found} never deviated, {ineligible} ineligible",
        samples.len(),
        found.len()
    );
    Ok(())
}

pub fn run_compare(args: CompareArgs) -> Result<()> {
    let path_a = required(&args.model_a, "model-a")?;
    let path_b = required(&args.model_b, "model-b")?;
    let (net_a, _) = load_net(&path_a)?;
    let (net_b, _) = load_net(&path_b)?;
    let samples = load_samples(&required(&args.data, "data")?, args.limit)?;
    check_fits(&net_a, &samples)?;
    check_fits(&net_b, &samples)?;
    let config = attack_config(&net_a, args.threshold, args.tolerance, args.equality_band)?;
    let out = required(&args.out, "out")?;
    create_dir(&out)?;
    write_copy(&out, "compare", &args)?;

    let report = compare_models_with(&net_a, &net_b, &samples, &config, |done, total| {
        eprint!("\r{done}/{total} images");
    })
    .tag(Failure::Data)?;
    eprintln!();
    let label_a = args.label_a.clone().unwrap_or_else(|| path_a.display().to_string());
    let label_b = args.label_b.clone().unwrap_or_else(|| path_b.display().to_string());
    let table = report.to_table(&label_a, &label_b, args.raw_units);
    write_json(&out.join(REPORT_FILE), &report)?;
    fs::write(out.join(TABLE_FILE), &table).context("writing comparison table")?;
    let scale = if args.raw_units { RAW_PIXEL_SCALE } else { 1.0 };
    let mut csv = String::from("eps_a,eps_b\n");
    for (a, b) in report.scatter() {
        csv.push_str(&format!("{},{}\n", a * scale, b * scale));
    }
    fs::write(out.join(SCATTER_FILE), csv).context("writing scatter data")?;
    print!("{table}");
    Ok(())
}
