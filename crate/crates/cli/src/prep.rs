use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use dpr_core::data::{duplicate_rare, prepare_records, read_lane_records, synthetic_dataset, write_dataset};
use serde::{Deserialize, Serialize};

use crate::common::{create_dir, is_false, JsonLines};
use crate::config::{require_exists, required, write_copy};
use crate::exit::{Failure, Tag};

pub const SKIP_LOG: &str = "skipped.jsonl";

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct PrepArgs {
    /// Output dataset directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Render this many synthetic lane images instead of reading TuSimple.
    #[arg(long, conflicts_with_all = ["tusimple", "images"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<usize>,
    /// Seed for the synthetic generator.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// TuSimple label file (one JSON record per line).
    #[arg(long, requires = "images")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tusimple: Option<PathBuf>,
    /// Directory that `raw_file` paths are relative to. Images must be PNG
    /// or PGM; convert the original JPEGs first.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    /// Skip duplicating samples whose label is ≥ 100 px off centre (use
    /// for evaluation sets).
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub no_duplicate: bool,
}

pub fn run(args: PrepArgs) -> Result<()> {
    let out = required(&args.out, "out")?;
    let (samples, skipped) = match (&args.synthetic, &args.tusimple) {
        (Some(n), None) => {
            let seed = args.seed.unwrap_or(0);
            eprintln!("rendering {n} synthetic images with seed {seed}");
            (synthetic_dataset(*n, seed).tag(Failure::Config)?, Vec::new())
        }
        (None, Some(labels)) => {
            let images = required(&args.images, "images")?;
            require_exists(labels, "label file")?;
            require_exists(&images, "image directory")?;
            let records = read_lane_records(labels).tag(Failure::Data)?;
            eprintln!("read {} lane records", records.len());
            prepare_records(&records, &images).tag(Failure::Data)?
        }
        _ => {
            return Err(anyhow::anyhow!("give exactly one of `synthetic` or `tusimple`")).tag(Failure::Config);
        }
    };
    let samples = if args.no_duplicate {
        samples
    } else {
        duplicate_rare(samples)
    };
    create_dir(&out)?;
    write_dataset(&out, &samples)
        .with_context(|| format!("writing dataset {}", out.display()))
        .tag(Failure::Data)?;
    if args.tusimple.is_some() {
        let mut log = JsonLines::create(&out.join(SKIP_LOG))?;
        for s in &skipped {
            log.write(s)?;
        }
        log.finish()?;
    }
    write_copy(&out, "data-prep", &args)?;
    let dups = samples.iter().filter(|s| s.duplicated).count();
    println!(
        "wrote {} samples ({} rare duplicates) to {}; skipped {} records",
        samples.len(),
        dups,
        out.display(),
        skipped.len()
    );
    Ok(())
}
