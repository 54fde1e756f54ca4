//! Flat `key = value` configuration text: one setting per line, `#`
//! comments, blank lines ignored. The same dialect configures CLI runs and
//! is embedded canonically (sorted keys) in checkpoint headers.

use std::path::Path;

use crate::attention::{Renorm, SparseMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::training::TrainConfig;

/// Parse `key = value` lines. Later duplicates win, matching override order.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            });
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("{key} expects an integer, got {value:?}")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("{key} expects an integer, got {value:?}")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("{key} expects a number, got {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Usage(format!("{key} expects true or false, got {value:?}"))),
    }
}

/// Apply one setting to a training config. Unknown keys are usage errors so
/// typos surface instead of silently using defaults.
pub fn apply_kv<T: Scalar>(cfg: &mut TrainConfig<T>, key: &str, value: &str) -> Result<()> {
    match key {
        "d" => cfg.d = parse_usize(key, value)?,
        "batch_size" => cfg.batch_size = parse_usize(key, value)?,
        "lr" => cfg.lr = T::from_f64(parse_f64(key, value)?),
        "epochs" => cfg.epochs = parse_usize(key, value)?,
        "patience" => cfg.patience = parse_usize(key, value)?,
        "seed" => cfg.seed = parse_u64(key, value)?,
        "mode" => cfg.sparse.mode = SparseMode::parse(value)?,
        "k" => cfg.sparse.k = T::from_f64(parse_f64(key, value)?),
        "renorm" => cfg.sparse.renorm = Renorm::parse(value)?,
        "dropout" => cfg.dropout = T::from_f64(parse_f64(key, value)?),
        "n_heads" => cfg.flags.n_heads = parse_usize(key, value)?,
        "positions" => cfg.flags.positions = parse_bool(key, value)?,
        "projections" => cfg.flags.projections = parse_bool(key, value)?,
        other => {
            return Err(Error::Usage(format!("unknown config key {other:?}")));
        }
    }
    Ok(())
}

/// Defaults overridden by the file's settings. Validity is checked by the
/// caller after any further command-line overrides.
pub fn load_train_config<T: Scalar>(path: &Path) -> Result<TrainConfig<T>> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = TrainConfig::default();
    for (key, value) in parse_kv_text(&text)? {
        apply_kv(&mut cfg, &key, &value)?;
    }
    Ok(cfg)
}

/// Canonical form: every key, sorted, shortest-round-trip numbers. Parsing
/// this text reproduces the config exactly.
pub fn config_to_text<T: Scalar>(cfg: &TrainConfig<T>) -> String {
    let mut pairs = vec![
        ("batch_size", cfg.batch_size.to_string()),
        ("d", cfg.d.to_string()),
        ("dropout", cfg.dropout.to_f64().to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("k", cfg.sparse.k.to_f64().to_string()),
        ("lr", cfg.lr.to_f64().to_string()),
        ("mode", cfg.sparse.mode.as_str().to_string()),
        ("n_heads", cfg.flags.n_heads.to_string()),
        ("patience", cfg.patience.to_string()),
        ("positions", cfg.flags.positions.to_string()),
        ("projections", cfg.flags.projections.to_string()),
        ("renorm", cfg.sparse.renorm.as_str().to_string()),
        ("seed", cfg.seed.to_string()),
    ];
    pairs.sort_by(|a, b| a.0.cmp(b.0));
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

/// Parse a canonical config text back into a TrainConfig.
pub fn config_from_text<T: Scalar>(text: &str) -> Result<TrainConfig<T>> {
    let mut cfg = TrainConfig::default();
    for (key, value) in parse_kv_text(text)? {
        apply_kv(&mut cfg, &key, &value)?;
    }
    Ok(cfg)
}
