//! `key=value` config files.
//!
//! Each key names a long flag of the chosen subcommand (without the leading
//! dashes). File entries are spliced in ahead of the command-line flags, and
//! since every flag overrides earlier occurrences of itself, flags given on
//! the command line win. Boolean flags take `true` or `false`.

use std::fs;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses the file body. Blank lines and lines starting with `#` are skipped.
pub fn parse(text: &str) -> Result<Vec<Entry>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got '{line}'", i + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        out.push(Entry {
            key,
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<Entry>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse(&text)
}

/// Removes `--config PATH` (or `--config=PATH`) from `args`, returning the path.
pub fn take_config_flag(args: &mut Vec<String>) -> Result<Option<String>, String> {
    let mut found = None;
    let mut i = 1;
    while i < args.len() {
        if args[i] == "--" {
            break;
        }
        if args[i] == "--config" {
            if i + 1 >= args.len() {
                return Err("--config needs a path".into());
            }
            found = Some(args.remove(i + 1));
            args.remove(i);
        } else if let Some(p) = args[i].strip_prefix("--config=") {
            found = Some(p.to_string());
            args.remove(i);
        } else {
            i += 1;
        }
    }
    Ok(found)
}

/// Splices file entries in right after the subcommand name.
///
/// `known` holds the subcommand's long flags with a flag-ness marker; keys
/// not in it are rejected.
pub fn splice(args: &mut Vec<String>, entries: &[Entry], known: &[(String, bool)]) -> Result<(), String> {
    let Some(pos) = args.iter().skip(1).position(|a| !a.starts_with('-')) else {
        return Err("a config file needs a subcommand".into());
    };
    let mut extra = Vec::new();
    for e in entries {
        let Some(&(_, is_switch)) = known.iter().find(|(k, _)| *k == e.key) else {
            return Err(format!("line {}: unknown key '{}'", e.line, e.key));
        };
        if is_switch {
            match e.value.as_str() {
                "true" => extra.push(format!("--{}", e.key)),
                "false" => {}
                other => {
                    return Err(format!(
                        "line {}: '{}' takes true or false, got '{other}'",
                        e.line, e.key
                    ))
                }
            }
        } else {
            extra.push(format!("--{}={}", e.key, e.value));
        }
    }
    let at = pos + 2;
    args.splice(at..at, extra);
    Ok(())
}
