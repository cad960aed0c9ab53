//! `--config` files and the `config.echo` written into run directories.
//!
//! A config file supplies defaults: each `key = value` line becomes the
//! default of the leaf subcommand's `--key` flag, so explicit flags still win.

use std::path::Path;

use clap::{ArgMatches, Command};

/// Flags that do not change results and are left out of `config.echo`.
const NOT_ECHOED: [&str; 5] = ["help", "version", "config", "workers", "out"];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("{path}:{line}: unknown key {key:?} for `{command}`")]
    UnknownKey { path: String, line: usize, key: String, command: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_config_text(text: &str, path: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { path: path.into(), line: i + 1 })?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            return Err(ConfigError::Syntax { path: path.into(), line: i + 1 });
        }
        entries.push(Entry { line: i + 1, key, value: value.trim().to_string() });
    }
    Ok(entries)
}

pub fn read_config(path: &Path) -> Result<Vec<Entry>, ConfigError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: shown.clone(), source })?;
    parse_config_text(&text, &shown)
}

/// Names of the nested subcommands selected in `matches`.
pub fn leaf_path(matches: &ArgMatches) -> Vec<String> {
    let mut path = Vec::new();
    let mut m = matches;
    while let Some((name, sub)) = m.subcommand() {
        path.push(name.to_string());
        m = sub;
    }
    path
}

pub fn leaf_matches<'a>(matches: &'a ArgMatches, path: &[String]) -> &'a ArgMatches {
    path.iter().fold(matches, |m, name| m.subcommand_matches(name).expect("path comes from these matches"))
}

fn find_leaf<'a>(cmd: &'a Command, path: &[String]) -> &'a Command {
    path.iter().fold(cmd, |c, name| c.find_subcommand(name).expect("path comes from this command"))
}

fn arg_id_for(cmd: &Command, key: &str) -> Option<String> {
    cmd.get_arguments().find(|a| a.get_long() == Some(key)).map(|a| a.get_id().to_string())
}

/// Installs config entries as defaults on the leaf subcommand (or on the root
/// for `workers`).
pub fn apply_defaults(cmd: Command, path: &[String], entries: &[Entry], source: &str) -> Result<Command, ConfigError> {
    let leaf = find_leaf(&cmd, path);
    let mut resolved = Vec::new();
    for e in entries {
        if e.key == "workers" {
            resolved.push((Vec::new(), "workers".to_string(), e.value.clone()));
            continue;
        }
        match arg_id_for(leaf, &e.key) {
            Some(id) if !matches!(id.as_str(), "config" | "help") => resolved.push((path.to_vec(), id, e.value.clone())),
            _ => {
                return Err(ConfigError::UnknownKey {
                    path: source.into(),
                    line: e.line,
                    key: e.key.clone(),
                    command: path.join(" "),
                })
            }
        }
    }
    Ok(resolved.into_iter().fold(cmd, |c, (p, id, value)| set_default(c, &p, id, value)))
}

fn set_default(cmd: Command, path: &[String], id: String, value: String) -> Command {
    match path.split_first() {
        None => cmd.mut_arg(id, |a| a.default_value(value).required(false)),
        Some((head, rest)) => {
            let rest = rest.to_vec();
            cmd.mut_subcommand(head.as_str(), move |sc| set_default(sc, &rest, id, value))
        }
    }
}

/// Resolved settings of the leaf subcommand as a config file that reproduces the run.
pub fn echo(cmd: &Command, matches: &ArgMatches, path: &[String]) -> String {
    let leaf = find_leaf(cmd, path);
    let m = leaf_matches(matches, path);
    let mut out = format!("# ddam {}\n", path.join(" "));
    for arg in leaf.get_arguments() {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if NOT_ECHOED.contains(&id) {
            continue;
        }
        if let Ok(Some(values)) = m.try_get_raw(id) {
            let joined: Vec<String> = values.map(|v| v.to_string_lossy().into_owned()).collect();
            out.push_str(&format!("{long} = {}\n", joined.join(",")));
        }
    }
    out
}
