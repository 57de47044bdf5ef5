//! Flag value parsers and `--config` file merging.

use std::ffi::OsString;
use std::fs;
use std::str::FromStr;

use clap::{ArgAction, CommandFactory};

use crate::{Cli, CliError};

/// Comma-separated list, or `start:stop:step` (inclusive) for integers.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let items: Vec<T> = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<T>().map_err(|e| format!("bad list item {p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        if items.is_empty() {
            return Err("empty list".into());
        }
        Ok(List(items))
    }
}

/// Like [`List`] but also accepts `start:stop:step`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntList(pub Vec<usize>);

impl FromStr for IntList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() == 1 {
            return List::<usize>::from_str(s).map(|l| IntList(l.0));
        }
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad range bound {p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        let [start, stop, step] = nums[..] else {
            return Err(format!("range must be start:stop:step, got {s:?}"));
        };
        if step == 0 || start > stop {
            return Err(format!("empty range {s:?}"));
        }
        Ok(IntList((start..=stop).step_by(step).collect()))
    }
}

/// `(length, chains_per_class)` pairs written `100x20,200x20`.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeList(pub Vec<(usize, usize)>);

impl FromStr for SizeList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let pairs = s
            .split(',')
            .map(|p| {
                let (l, n) = p
                    .trim()
                    .split_once('x')
                    .ok_or_else(|| format!("expected LENGTHxCHAINS, got {p:?}"))?;
                let l = l.parse().map_err(|e| format!("bad length {l:?}: {e}"))?;
                let n = n.parse().map_err(|e| format!("bad chain count {n:?}: {e}"))?;
                Ok((l, n))
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(SizeList(pairs))
    }
}

/// `(epsilon, step)` pairs written `0.01:0.001,0.001:0.0001`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairList(pub Vec<(f64, f64)>);

impl FromStr for PairList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let pairs = s
            .split(',')
            .map(|p| {
                let (a, b) = p
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| format!("expected EPS:STEP, got {p:?}"))?;
                let a = a.parse().map_err(|e| format!("bad epsilon {a:?}: {e}"))?;
                let b = b.parse().map_err(|e| format!("bad step {b:?}: {e}"))?;
                Ok((a, b))
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(PairList(pairs))
    }
}

pub fn parse_gamma(s: &str) -> Result<f64, String> {
    let g: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if g > 0.0 && g <= 1.0 {
        Ok(g)
    } else {
        Err(format!("gamma must lie in (0, 1], got {g}"))
    }
}

pub fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

/// Reads `key = value` lines. `#` starts a comment.
fn read_config(path: &str) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("cannot read config {path}: {e}")))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("{path}:{}: expected key=value", i + 1)))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

/// Splices the contents of a `--config` file in as flags placed before the
/// command-line ones, so that explicit flags win.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let strings: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    let mut rest = Vec::with_capacity(strings.len());
    let mut i = 0;
    while i < strings.len() {
        let a = &strings[i];
        if a == "--config" {
            let p = strings
                .get(i + 1)
                .ok_or_else(|| CliError::Validation("--config needs a file".into()))?;
            path = Some(p.clone());
            i += 2;
            continue;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a.clone());
        }
        i += 1;
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    // The subcommand is the first argument after the program name that is
    // not a global flag.
    let Some(sub_pos) = rest.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Err(CliError::Validation("--config needs a subcommand".into()));
    };
    let root = Cli::command();
    let sub = root
        .find_subcommand(&rest[sub_pos])
        .ok_or_else(|| CliError::Validation(format!("unknown subcommand {:?}", rest[sub_pos])))?;

    let mut injected = Vec::new();
    for (key, value) in read_config(&path)? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| CliError::Validation(format!("{path}: unknown key {key:?} for {}", sub.get_name())))?;
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" | "1" | "yes" => injected.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                _ => return Err(CliError::Validation(format!("{path}: {key} expects true or false"))),
            },
            _ => {
                injected.push(format!("--{key}"));
                injected.push(value);
            }
        }
    }
    let mut out: Vec<OsString> = rest[..=sub_pos].iter().map(OsString::from).collect();
    out.extend(injected.into_iter().map(OsString::from));
    out.extend(rest[sub_pos + 1..].iter().map(OsString::from));
    Ok(out)
}
