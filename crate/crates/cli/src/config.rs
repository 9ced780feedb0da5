//! `--config file.json` support.
//!
//! The file is a JSON object whose keys are long flag names of the chosen
//! subcommand (`batch_size` and `batch-size` are equivalent). Flags given on
//! the command line win over the file.

use std::ffi::OsString;

use serde_json::Value;

/// Removes `--config <path>` from `args` and appends the file's flags that the
/// user did not already pass.
pub fn expand_config(mut args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some((pos, path, width)) = find_config(&args)? else {
        return Ok(args);
    };
    args.drain(pos..pos + width);
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| format!("{path}: {e}"))?;
    let Value::Object(map) = value else {
        return Err(format!("{path}: config must be a JSON object"));
    };
    let given: Vec<String> = args
        .iter()
        .filter_map(|a| a.to_str())
        .filter(|a| a.starts_with("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        if given.contains(&flag) {
            continue;
        }
        let values = match v {
            Value::Bool(true) => {
                args.push(flag.into());
                continue;
            }
            Value::Bool(false) | Value::Null => continue,
            Value::Array(items) => items,
            other => vec![other],
        };
        for item in values {
            let s = match item {
                Value::String(s) => s,
                Value::Number(n) => n.to_string(),
                other => return Err(format!("{path}: unsupported value for `{key}`: {other}")),
            };
            args.push(format!("{flag}={s}").into());
        }
    }
    Ok(args)
}

fn find_config(args: &[OsString]) -> Result<Option<(usize, String, usize)>, String> {
    for (i, a) in args.iter().enumerate().skip(1) {
        let Some(a) = a.to_str() else { continue };
        if a == "--config" {
            let path = args
                .get(i + 1)
                .and_then(|p| p.to_str())
                .ok_or("--config requires a file path")?;
            return Ok(Some((i, path.to_string(), 2)));
        }
        if let Some(path) = a.strip_prefix("--config=") {
            return Ok(Some((i, path.to_string(), 1)));
        }
    }
    Ok(None)
}
