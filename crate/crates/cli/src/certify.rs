use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use dpr_core::interval::output_bounds;
use dpr_core::network::FEATURE_LAYER;
use dpr_core::ToleranceBand;
use serde::{Deserialize, Serialize};

use crate::common::{
    check_fits, create_dir, load_net, load_samples, resolution_rule, robust_spec, write_json, JsonLines,
};
use crate::config::{required, write_copy};

pub const RECORDS_FILE: &str = "certify.jsonl";
pub const SUMMARY_FILE: &str = "certify-summary.json";

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct CertifyArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Tolerance Δ in label units (default 10).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Feature perturbation radius κ (default 0.01).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// Layer whose activated output is perturbed (default fc40).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,
    /// Directory for per-sample records and the summary.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Record<'a> {
    id: &'a str,
    label: &'a [f64],
    lower: &'a [f64],
    upper: &'a [f64],
    certified: bool,
}

#[derive(Serialize)]
pub struct Summary {
    pub samples: usize,
    pub certified: usize,
    pub certified_fraction: f64,
    pub delta: f64,
    pub kappa: f64,
    pub layer: String,
    pub layer_index: usize,
}

pub fn run(args: CertifyArgs) -> Result<()> {
    let (net, _) = load_net(&required(&args.model, "model")?)?;
    let samples = load_samples(&required(&args.data, "data")?, None)?;
    check_fits(&net, &samples)?;
    let (delta, kappa) = (args.delta.unwrap_or(10.0), args.kappa.unwrap_or(0.01));
    let layer = args.layer.clone().unwrap_or_else(|| FEATURE_LAYER.to_string());
    let spec = robust_spec(&net, delta, kappa, &layer)?;
    eprintln!("{}", resolution_rule(&net, &layer, spec.layer_index));

    let mut records = match &args.out {
        Some(dir) => {
            create_dir(dir)?;
            write_copy(dir, "certify", &args)?;
            Some(JsonLines::create(&dir.join(RECORDS_FILE))?)
        }
        None => None,
    };
    let mut certified = 0;
    for s in &samples {
        let bounds = output_bounds(&net, &s.input, &spec)?;
        let (lo, hi) = (bounds.lower().data(), bounds.upper().data());
        let ok = s.label.iter().enumerate().all(|(j, &lb)| {
            let band = ToleranceBand { lb, delta };
            band.contains(lo[j]) && band.contains(hi[j])
        });
        certified += usize::from(ok);
        if let Some(w) = records.as_mut() {
            w.write(&Record {
                id: &s.source_id,
                label: &s.label,
                lower: lo,
                upper: hi,
                certified: ok,
            })?;
        }
    }
    let summary = Summary {
        samples: samples.len(),
        certified,
        certified_fraction: certified as f64 / samples.len() as f64,
        delta,
        kappa,
        layer: layer.clone(),
        layer_index: spec.layer_index,
    };
    println!(
        "certified {}/{} samples ({:.4}) with Δ = {delta}, κ = {kappa} at `{layer}`",
        summary.certified, summary.samples, summary.certified_fraction
    );
    if certified == samples.len() {
        println!(
            "guarantee: for every sample, any input whose `{layer}` features lie within ±{kappa} of that \
             sample's features is predicted within ±{delta} of its label"
        );
    }
    if let (Some(w), Some(dir)) = (records, &args.out) {
        w.finish()?;
        write_json(&dir.join(SUMMARY_FILE), &summary)?;
    }
    Ok(())
}
