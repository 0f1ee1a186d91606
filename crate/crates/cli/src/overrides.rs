//! `[--config FILE] [--key value]...` resolution into a `ModelConfig`.

use std::path::Path;

use mstnet::ModelConfig;

use crate::Failure;

/// Splits raw arguments into `(key, value)` pairs. Keys accept dashes or
/// underscores; `--key=value` works too, and a key followed by another
/// key (or nothing) is a `true` switch.
pub fn pairs(args: &[String]) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let Some(raw) = args[i].strip_prefix("--").filter(|k| !k.is_empty()) else {
            return Err(Failure::Usage(format!("expected `--key value`, found `{}`", args[i])));
        };
        i += 1;
        let (key, value) = match raw.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => match args.get(i) {
                Some(v) if !v.starts_with("--") => {
                    i += 1;
                    (raw.to_string(), v.clone())
                }
                _ => (raw.to_string(), "true".to_string()),
            },
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

/// Loads `--config` (if any) and applies the remaining pairs in order.
pub fn resolve(args: &[String]) -> Result<ModelConfig, Failure> {
    let pairs = pairs(args)?;
    let mut cfg = match pairs.iter().filter(|(k, _)| k == "config").last() {
        Some((_, path)) => ModelConfig::load(Path::new(path))?,
        None => ModelConfig::default(),
    };
    for (k, v) in pairs.iter().filter(|(k, _)| k != "config") {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}
