//! `--settings` file overlay: missing flags are filled in from the TOML table
//! of the invoked command before clap sees the arguments.

use std::ffi::OsString;
use std::fs;

use anyhow::{bail, Context, Result};

const COMMANDS: &[&str] = &["featurize", "synth", "chain", "decode", "score", "lm"];
const GLOBALS: &[&str] = &["seed", "workers"];

pub fn apply(mut argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let Some(path) = flag_value(&args, "settings") else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading settings file {path}"))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing settings file {path}"))?;

    let mut overlay = Vec::new();
    for key in GLOBALS {
        if let Some(v) = table.get(*key) {
            push_flag(&args, &mut overlay, key, v)?;
        }
    }
    if let Some(section) = command_table(&args, &table) {
        for (key, v) in section {
            if v.is_table() {
                continue;
            }
            push_flag(&args, &mut overlay, &key.replace('_', "-"), v)?;
        }
    }
    argv.extend(overlay.into_iter().map(OsString::from));
    Ok(argv)
}

fn flag_value(args: &[String], name: &str) -> Option<String> {
    let long = format!("--{name}");
    let eq = format!("--{name}=");
    args.iter().enumerate().find_map(|(i, a)| {
        if a == &long {
            args.get(i + 1).cloned()
        } else {
            a.strip_prefix(&eq).map(str::to_string)
        }
    })
}

fn given(args: &[String], name: &str) -> bool {
    let long = format!("--{name}");
    args.iter().any(|a| a == &long || a.starts_with(&format!("{long}=")))
}

/// The table for the invoked command; `lm train` reads `[lm.train]`.
fn command_table<'a>(args: &[String], table: &'a toml::Table) -> Option<&'a toml::Table> {
    let pos = args.iter().skip(1).position(|a| COMMANDS.contains(&a.as_str()))? + 1;
    let section = table.get(&args[pos])?.as_table()?;
    if args[pos] == "lm" {
        let sub = args.get(pos + 1)?;
        return section.get(sub)?.as_table();
    }
    Some(section)
}

fn push_flag(args: &[String], overlay: &mut Vec<String>, key: &str, v: &toml::Value) -> Result<()> {
    if given(args, key) {
        return Ok(());
    }
    let flag = format!("--{key}");
    match v {
        toml::Value::Boolean(true) => overlay.push(flag),
        toml::Value::Boolean(false) => {}
        toml::Value::String(s) => overlay.extend([flag, s.clone()]),
        toml::Value::Integer(i) => overlay.extend([flag, i.to_string()]),
        toml::Value::Float(f) => overlay.extend([flag, f.to_string()]),
        other => bail!("settings key {key}: unsupported value {other}"),
    }
    Ok(())
}
