use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use dpr_core::data::{read_dataset, read_index, INDEX_FILE};
use dpr_core::{load_model, Network, Provenance, RobustSpec, Sample};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::require_exists;
use crate::exit::{Failure, Tag};

pub fn is_false(b: &bool) -> bool {
    !*b
}

pub fn load_samples(dir: &Path, limit: Option<usize>) -> Result<Vec<Sample>> {
    require_exists(dir, "dataset directory")?;
    let mut samples = read_dataset(dir)
        .with_context(|| format!("reading dataset {}", dir.display()))
        .tag(Failure::Data)?;
    if let Some(n) = limit {
        samples.truncate(n);
    }
    if samples.is_empty() {
        return Err(anyhow::anyhow!("dataset {} is empty", dir.display())).tag(Failure::Data);
    }
    Ok(samples)
}

pub fn load_net(path: &Path) -> Result<(Network, Provenance)> {
    require_exists(path, "model file")?;
    load_model(path)
        .with_context(|| format!("loading model {}", path.display()))
        .tag(Failure::Data)
}

/// Rejects datasets whose shapes do not fit the model.
pub fn check_fits(net: &Network, samples: &[Sample]) -> Result<()> {
    for s in samples {
        if s.input.shape() != net.input_shape() || s.label.len() != net.output_dim() {
            return Err(anyhow::anyhow!(
                "sample {} has input {:?} and {} labels; the model expects {:?} and {}",
                s.source_id,
                s.input.shape(),
                s.label.len(),
                net.input_shape(),
                net.output_dim()
            ))
            .tag(Failure::Data);
        }
    }
    Ok(())
}

/// SHA-256 over the index file and every tensor file in index order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::read(dir.join(INDEX_FILE))?);
    for entry in read_index(dir)? {
        h.update(fs::read(dir.join(&entry.file))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Builds a spec from a scalar tolerance broadcast over the outputs and a
/// layer name resolved to the perturbation index.
pub fn robust_spec(net: &Network, delta: f64, kappa: f64, layer: &str) -> Result<RobustSpec> {
    let l_tilde = net.perturbation_index_after(layer).tag(Failure::Config)?;
    let spec = RobustSpec::new(vec![delta; net.output_dim()], l_tilde, kappa).tag(Failure::Config)?;
    spec.validate_for(net).tag(Failure::Config)?;
    Ok(spec)
}

/// One line explaining which features a layer name perturbs.
pub fn resolution_rule(net: &Network, layer: &str, l_tilde: usize) -> String {
    let names = net.layer_names();
    format!(
        "layer `{layer}` resolves to l̃ = {l_tilde}: features leaving `{}` (after `{layer}` and its activation) \
         are perturbed by ±κ and propagated through layers {l_tilde}..={} (`{}` onwards)",
        names[l_tilde - 2],
        net.len(),
        names[l_tilde - 1]
    )
}

pub struct JsonLines {
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
