//! `--config FILE`: TOML-style `key = value` entries turned into flags.
//!
//! Top-level keys apply to every subcommand and a `[name]` table to one
//! subcommand only. The generated flags are inserted before the user's own,
//! and since every subcommand lets later occurrences override earlier ones,
//! explicit flags win.

use std::ffi::OsString;
use std::path::Path;

use toml::{Table, Value};

use crate::commands::Failure;

/// Strip `--config` from `args` and splice in the flags it names.
pub fn expand(mut args: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let mut path = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy().into_owned();
        if a == "--" {
            break;
        }
        if a == "--config" && i + 1 < args.len() {
            path = Some(args.remove(i + 1));
            args.remove(i);
            continue;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(OsString::from(p));
            args.remove(i);
            continue;
        }
        i += 1;
    }
    let Some(path) = path else {
        return Ok(args);
    };
    // The first bare word is the subcommand; without one clap reports usage.
    let Some(sub) = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|p| p + 1) else {
        return Ok(args);
    };
    let name = args[sub].to_string_lossy().into_owned();
    let flags = load(Path::new(&path), &name)?;
    args.splice(sub + 1..sub + 1, flags);
    Ok(args)
}

fn load(path: &Path, subcommand: &str) -> Result<Vec<OsString>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::data(format!("config {}: {e}", path.display())))?;
    let table: Table = text
        .parse()
        .map_err(|e| Failure::data(format!("config {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (k, v) in &table {
        if !v.is_table() {
            push_flag(&mut out, k, v, path)?;
        }
    }
    if let Some(Value::Table(t)) = table.get(subcommand) {
        for (k, v) in t {
            push_flag(&mut out, k, v, path)?;
        }
    }
    Ok(out)
}

fn push_flag(out: &mut Vec<OsString>, key: &str, value: &Value, path: &Path) -> Result<(), Failure> {
    let flag = OsString::from(format!("--{}", key.replace('_', "-")));
    match value {
        Value::Boolean(true) => out.push(flag),
        Value::Boolean(false) => {}
        Value::String(s) => out.extend([flag, s.into()]),
        Value::Integer(n) => out.extend([flag, n.to_string().into()]),
        Value::Float(x) => out.extend([flag, x.to_string().into()]),
        other => {
            return Err(Failure::data(format!(
                "config {}: unsupported value for `{key}`: {other}",
                path.display()
            )))
        }
    }
    Ok(())
}
