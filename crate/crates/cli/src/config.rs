//! JSON configuration: a document of flag values is spliced in front of the
//! command-line flags so that explicit flags win.

use std::fs;

use anyhow::{bail, Context, Result};
use serde_json::Value;

pub const COMMANDS: [&str; 7] = ["env", "simulate", "kernel", "semigroup", "she", "diagnose", "converge"];

/// Expand `--config FILE` into flags. The file is either a flat object of
/// flag values or a run manifest (`{"command": .., "config": {..}}`), whose
/// command is used when none is given on the command line.
pub fn expand_args(argv: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let mut rest = argv.clone();
    let path = if let Some(p) = argv[pos].strip_prefix("--config=") {
        rest.remove(pos);
        p.to_string()
    } else {
        let p = argv.get(pos + 1).context("--config needs a file")?.clone();
        rest.drain(pos..pos + 2);
        p
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let doc: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {path}"))?;
    let (command, values) = match (doc.get("command"), doc.get("config")) {
        (Some(Value::String(c)), Some(cfg)) => (Some(c.clone()), cfg.clone()),
        _ => (None, doc.clone()),
    };
    let flags = to_flags(&values)?;
    let sub = rest.iter().position(|a| COMMANDS.contains(&a.as_str()));
    let at = match (sub, command) {
        (Some(i), _) => i + 1,
        (None, Some(c)) => {
            rest.insert(1, c);
            2
        }
        (None, None) => bail!("no subcommand given and the config does not name one"),
    };
    rest.splice(at..at, flags);
    Ok(rest)
}

/// `{"n": 64, "ladder": [64, 128], "noise-off": true}` →
/// `--n 64 --ladder 64,128 --noise-off`.
pub fn to_flags(values: &Value) -> Result<Vec<String>> {
    let Value::Object(map) = values else {
        bail!("config must be a JSON object");
    };
    let mut out = Vec::new();
    for (key, v) in map {
        let flag = format!("--{key}");
        match v {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => out.push(flag),
            Value::Number(n) => out.extend([flag, n.to_string()]),
            Value::String(s) => out.extend([flag, s.clone()]),
            Value::Array(items) => {
                let parts: Vec<String> = items
                    .iter()
                    .map(|i| match i {
                        Value::String(s) => Ok(s.clone()),
                        Value::Number(n) => Ok(n.to_string()),
                        other => bail!("unsupported list item {other} for {key}"),
                    })
                    .collect::<Result<_>>()?;
                out.extend([flag, parts.join(",")]);
            }
            Value::Object(_) => bail!("nested objects are not flags: {key}"),
        }
    }
    Ok(out)
}
