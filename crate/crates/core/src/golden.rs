//! Golden records: named scalar results with tolerances plus digests of the
//! configuration and of every CSV output.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::mollifier::fmt_num;

pub const DEFAULT_TOL: f64 = 1e-12;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Values are stored as shortest round-trip decimal strings so that `inf`
/// and `nan` survive JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenRecord {
    pub config_sha256: String,
    pub values: BTreeMap<String, String>,
    pub tolerances: BTreeMap<String, f64>,
    pub csv_sha256: BTreeMap<String, String>,
}

impl GoldenRecord {
    pub fn new(config_sha256: String) -> Self {
        GoldenRecord { config_sha256, ..Default::default() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        let name = name.into();
        let tol = if value.is_finite() { DEFAULT_TOL * value.abs().max(1.0) } else { 0.0 };
        self.tolerances.insert(name.clone(), tol);
        self.values.insert(name, fmt_num(value));
    }

    pub fn insert_csv(&mut self, file: impl Into<String>, content: &str) {
        self.csv_sha256.insert(file.into(), sha256_hex(content.as_bytes()));
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.values.get(name).and_then(|s| s.parse().ok())
    }

    /// Differences of `new` against this record; empty means a match.
    /// Values match when `|new - old| <= tol`, or when both are the same
    /// non-finite value.
    pub fn compare(&self, new: &GoldenRecord) -> Vec<String> {
        let mut out = Vec::new();
        if self.config_sha256 != new.config_sha256 {
            out.push(format!("config digest {} != {}", new.config_sha256, self.config_sha256));
        }
        for (name, old) in &self.values {
            let old: f64 = old.parse().unwrap_or(f64::NAN);
            match new.value(name) {
                None => out.push(format!("{name}: missing")),
                Some(v) => {
                    let tol = self.tolerances.get(name).copied().unwrap_or(DEFAULT_TOL);
                    let same = if v.is_finite() && old.is_finite() {
                        (v - old).abs() <= tol
                    } else {
                        v.to_bits() == old.to_bits() || (v.is_nan() && old.is_nan())
                    };
                    if !same {
                        out.push(format!("{name}: {} vs recorded {}", fmt_num(v), fmt_num(old)));
                    }
                }
            }
        }
        for name in new.values.keys() {
            if !self.values.contains_key(name) {
                out.push(format!("{name}: not recorded"));
            }
        }
        for (file, digest) in &self.csv_sha256 {
            match new.csv_sha256.get(file) {
                Some(d) if d == digest => {}
                Some(_) => out.push(format!("{file}: CSV bytes differ")),
                None => out.push(format!("{file}: CSV missing")),
            }
        }
        for file in new.csv_sha256.keys() {
            if !self.csv_sha256.contains_key(file) {
                out.push(format!("{file}: CSV not recorded"));
            }
        }
        out
    }
}
