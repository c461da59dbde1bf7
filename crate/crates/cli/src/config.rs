//! `--config FILE` support: `key = value` lines become flags placed ahead of
//! the ones given on the command line, so explicit flags win.

use std::ffi::OsString;
use std::fs;

/// Returns `args` with the contents of any `--config` file spliced in right
/// after the subcommand name.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let table: toml::Table = text.parse().map_err(|e| format!("cannot parse config {path}: {e}"))?;
    let mut flags = Vec::with_capacity(table.len());
    for (key, value) in table {
        let flag = key.replace('_', "-");
        if flag == "config" {
            return Err(format!("{path}: a config file cannot name another config file"));
        }
        let values = match value {
            toml::Value::Array(items) => items,
            other => vec![other],
        };
        for value in values {
            let value = match value {
                toml::Value::String(s) => s,
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                other => return Err(format!("{path}: unsupported value for {key}: {other}")),
            };
            flags.push(OsString::from(format!("--{flag}={value}")));
        }
    }
    let sub = subcommand_position(&args).unwrap_or(args.len() - 1);
    let mut out = args;
    out.splice(sub + 1..sub + 1, flags);
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<String> {
    let mut it = args.iter().map(|a| a.to_string_lossy());
    while let Some(arg) = it.next() {
        if arg == "--config" {
            return it.next().map(|s| s.into_owned());
        }
        if let Some(p) = arg.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

fn subcommand_position(args: &[OsString]) -> Option<usize> {
    let names = ["synth", "train", "encode", "query", "eval"];
    args.iter().position(|a| names.iter().any(|n| a == n))
}
