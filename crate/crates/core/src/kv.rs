//! `key = value` text files, used for suite and run configuration.

use std::path::Path;

use crate::error::{Error, Result};

/// Parse `key = value` lines in order. Blank lines and lines starting with
/// `#` are skipped; a repeated key is an error.
pub fn parse(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::format(
                origin,
                format!("line {}: expected `key = value`", i + 1),
            ));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::format(origin, format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(existing, _)| existing == k) {
            return Err(Error::format(
                origin,
                format!("line {}: duplicate key `{k}`", i + 1),
            ));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str, origin: &Path) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::format(origin, format!("bad value `{value}` for `{key}`")))
}
