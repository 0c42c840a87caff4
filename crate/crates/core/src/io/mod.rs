//! File formats: CSV tables for phantoms, poses and observations, a
//! key-value calibration file, raw volumes with a metadata sidecar, PGM
//! frames and the acquisition manifest.
//!
//! All text is UTF-8 with LF line endings.

mod calibration;
mod manifest;
mod tables;
mod volume;

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub use calibration::{
    calibration_from_str, calibration_to_string, load_calibration, save_calibration,
    StoredCalibration, CALIBRATION_FORMAT_VERSION,
};
pub use manifest::{load_manifest, save_manifest, Manifest, MANIFEST_FORMAT_VERSION};
pub use tables::{
    load_observations, load_phantom, load_poses, observations_from_csv, observations_to_csv,
    phantom_from_csv, phantom_to_csv, poses_from_csv, poses_to_csv, save_observations,
    save_phantom, save_poses, OBSERVATIONS_HEADER, PHANTOM_HEADER, POSES_HEADER,
};
pub use volume::{
    decode_pgm, encode_pgm, load_volume, read_pgm, save_volume, volume_meta_string, write_pgm,
    StoredVolume, VOLUME_ELEMENT_TYPE,
};

/// Rounds to 9 significant digits and prints the shortest text that parses
/// back to the rounded value. Formatting a parsed value again reproduces the
/// same text.
pub fn format_sig9(x: f64) -> String {
    if !x.is_finite() {
        return format_shortest(x);
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    format_shortest(rounded)
}

/// Shortest text that parses back to exactly `x`.
pub fn format_shortest(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let a = x.abs();
    if (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub(crate) fn path_label(path: &Path) -> String {
    path.display().to_string()
}

pub(crate) fn parse_error(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

pub(crate) fn parse_finite(path: &str, line: usize, field: &str, text: &str) -> Result<f64> {
    match text.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_error(
            path,
            line,
            format!("{field}: expected a finite number, got {text:?}"),
        )),
    }
}

pub(crate) fn parse_uint<T: std::str::FromStr>(
    path: &str,
    line: usize,
    field: &str,
    text: &str,
) -> Result<T> {
    text.trim().parse::<T>().map_err(|_| {
        parse_error(
            path,
            line,
            format!("{field}: expected a non-negative integer, got {text:?}"),
        )
    })
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
            Err(parse_error(&path_label(path), 0, "file is not valid UTF-8"))
        }
        Err(e) => Err(e.into()),
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => Err(e.into()),
    }
}

/// `key = value` lines; `#` starts a comment line, blank lines are skipped.
/// Values keep their line number for error reporting.
#[derive(Debug, Default)]
pub(crate) struct KeyValues {
    pub path: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| {
                parse_error(
                    path,
                    line,
                    format!("expected `key = value`, got {trimmed:?}"),
                )
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(parse_error(path, line, "empty key"));
            }
            if entries
                .insert(key.to_string(), (line, value.trim().to_string()))
                .is_some()
            {
                return Err(parse_error(path, line, format!("duplicate key {key:?}")));
            }
        }
        Ok(Self {
            path: path.to_string(),
            entries,
        })
    }

    /// Removes and returns a required key.
    pub fn take(&mut self, key: &str) -> Result<(usize, String)> {
        self.entries
            .remove(key)
            .ok_or_else(|| parse_error(&self.path, 0, format!("missing key {key:?}")))
    }

    pub fn take_opt(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    pub fn take_f64(&mut self, key: &str) -> Result<f64> {
        let (line, v) = self.take(key)?;
        parse_finite(&self.path, line, key, &v)
    }

    /// Whitespace-separated numbers; returns the line number too.
    pub fn take_f64s(&mut self, key: &str, count: usize) -> Result<(usize, Vec<f64>)> {
        let (line, v) = self.take(key)?;
        let values = v
            .split_whitespace()
            .map(|t| parse_finite(&self.path, line, key, t))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != count {
            return Err(parse_error(
                &self.path,
                line,
                format!("{key}: expected {count} values, got {}", values.len()),
            ));
        }
        Ok((line, values))
    }

    pub fn take_uint<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let (line, v) = self.take(key)?;
        parse_uint(&self.path, line, key, &v)
    }

    /// Checks `format_version` and removes it.
    pub fn expect_version(&mut self, expected: u32) -> Result<()> {
        let found: u32 = self.take_uint("format_version")?;
        if found != expected {
            return Err(Error::VersionMismatch {
                path: self.path.clone(),
                found,
                expected,
            });
        }
        Ok(())
    }

    /// Errors on any key not consumed yet.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(parse_error(
                &self.path,
                line,
                format!("unknown key {key:?}"),
            )),
        }
    }
}
