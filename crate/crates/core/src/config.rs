//! Flat `key=value` configuration files.
//!
//! Each config struct owns a disjoint set of keys named exactly like its
//! fields. Blank lines and `#` comments are ignored; unknown keys are errors.

use crate::error::{Error, Result};
use std::str::FromStr;

/// One group of keys inside a config file.
pub trait ConfigSection {
    /// Applies `key = value`; returns `Ok(false)` when the key belongs elsewhere.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;

    /// Current values in canonical text form, in field order.
    fn entries(&self) -> Vec<(&'static str, String)>;
}

/// Splits config text into `(key, value)` pairs.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got '{line}'", no + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies every pair to the first section that accepts it.
pub fn apply_all(pairs: &[(String, String)], sections: &mut [&mut dyn ConfigSection]) -> Result<()> {
    for (k, v) in pairs {
        let mut taken = false;
        for s in sections.iter_mut() {
            if s.set(k, v)? {
                taken = true;
                break;
            }
        }
        if !taken {
            return Err(Error::Config(format!("unknown key '{k}'")));
        }
    }
    Ok(())
}

/// Renders sections back to config text.
pub fn render(sections: &[&dyn ConfigSection]) -> String {
    let mut s = String::new();
    for sec in sections {
        for (k, v) in sec.entries() {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
    }
    s
}

pub(crate) fn value<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
}

pub(crate) fn list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
    v.split(',').map(|p| value(key, p.trim())).collect()
}

pub(crate) fn pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match list::<f64>(key, v)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Config(format!("'{key}' expects two comma-separated numbers"))),
    }
}
