//! Config files mirror the command-line flags: every key is a flag name
//! without the leading dashes, either at the top level or under a table
//! named after the subcommand. Flags given on the command line win.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::exit::{Failure, Tag};

pub const CONFIG_COPY: &str = "config.toml";

/// Overlays the flags in `cli` onto the config file, if any.
pub fn resolve<T>(cli: &T, file: Option<&Path>, command: &str) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let flags = toml::Table::try_from(cli).context("encoding command-line flags")?;
    let Some(path) = file else {
        return cli_only(flags);
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .tag(Failure::Config)?;
    let mut table: toml::Table = toml::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .tag(Failure::Config)?;
    let mut merged = match table.remove(command) {
        Some(toml::Value::Table(t)) => t,
        Some(_) => {
            return Err(anyhow::anyhow!("config key `{command}` must be a table")).tag(Failure::Config);
        }
        None => table,
    };
    for (k, v) in flags {
        merged.insert(k, v);
    }
    toml::Value::Table(merged)
        .try_into()
        .with_context(|| format!("invalid settings in {}", path.display()))
        .tag(Failure::Config)
}

fn cli_only<T: DeserializeOwned>(flags: toml::Table) -> Result<T> {
    toml::Value::Table(flags)
        .try_into()
        .context("invalid flags")
        .tag(Failure::Config)
}

/// Writes the resolved settings under their command table, so the copy can
/// be passed back with `--config` to rerun the command.
pub fn write_copy<T: Serialize>(dir: &Path, command: &str, settings: &T) -> Result<()> {
    let mut root = toml::Table::new();
    root.insert(
        command.to_string(),
        toml::Value::Table(toml::Table::try_from(settings)?),
    );
    let path = dir.join(CONFIG_COPY);
    fs::write(&path, toml::to_string_pretty(&root)?).with_context(|| format!("writing {}", path.display()))
}

/// Fails with a config error when an input path is missing.
pub fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(anyhow::anyhow!("{what} {} does not exist", path.display())).tag(Failure::Config);
    }
    Ok(())
}

/// Takes a required setting that may come from either source.
pub fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| anyhow::anyhow!("missing required setting `{flag}` (flag or config key)"))
        .tag(Failure::Config)
}
