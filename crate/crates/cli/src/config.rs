//! `--config FILE`: a JSON object of flag defaults keyed by long flag name.
//! Flags given on the command line win.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::Value;

fn config_path(args: &[String]) -> Option<(usize, String)> {
    args.iter().enumerate().skip(1).find_map(|(i, a)| {
        if a == "--config" {
            args.get(i + 1).map(|p| (i, p.clone()))
        } else {
            a.strip_prefix("--config=").map(|p| (i, p.to_string()))
        }
    })
}

fn value_text(key: &str, v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Array(items) => items
            .iter()
            .map(|i| value_text(key, i))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        _ => bail!("config key {key:?}: expected a string, number or list"),
    })
}

/// Appends config defaults for the chosen subcommand to `args`.
pub fn apply(args: Vec<String>) -> Result<Vec<String>> {
    let Some((_, path)) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .with_context(|| format!("reading config {path}"))?;
    let Value::Object(map) =
        serde_json::from_str::<Value>(&text).with_context(|| format!("parsing config {path}"))?
    else {
        bail!("config {path} must be a JSON object");
    };
    let flags = crate::subcommand_flags();
    let Some((sub_pos, known)) = args
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(i, a)| flags.get(a.as_str()).map(|k| (i, k)))
    else {
        return Ok(args);
    };
    let given = |flag: &str| {
        args[sub_pos + 1..]
            .iter()
            .any(|a| a == &format!("--{flag}") || a.starts_with(&format!("--{flag}=")))
    };
    let mut extra = Vec::new();
    for (key, value) in &map {
        let flag = key.replace('_', "-");
        let Some((_, takes_value)) = known.iter().find(|(l, _)| *l == flag) else {
            continue;
        };
        if flag == "config" || given(&flag) {
            continue;
        }
        if *takes_value {
            extra.push(format!("--{flag}={}", value_text(key, value)?));
        } else {
            match value {
                Value::Bool(true) => extra.push(format!("--{flag}")),
                Value::Bool(false) => {}
                _ => bail!("config key {key:?}: expected true or false"),
            }
        }
    }
    let mut out = args;
    out.extend(extra);
    Ok(out)
}
