use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub config_hash: String,
    pub code_version: String,
    pub master_seed: u64,
    /// Sorted, disjoint, non-adjacent half-open replica ranges.
    pub completed: Vec<(u64, u64)>,
    /// Whether results have been written for the requested range.
    pub finished: bool,
    pub outputs: Vec<String>,
    pub wall_seconds: f64,
    pub loops_sampled: u64,
    pub path_steps: u64,
    pub loops_per_sec: f64,
    pub path_steps_per_sec: f64,
}

pub const MANIFEST: &str = "manifest.json";

impl RunManifest {
    pub fn new(experiment: &str, hash: String, seed: u64) -> Self {
        Self {
            experiment: experiment.into(),
            config_hash: hash,
            code_version: env!("CARGO_PKG_VERSION").into(),
            master_seed: seed,
            completed: Vec::new(),
            finished: false,
            outputs: Vec::new(),
            wall_seconds: 0.0,
            loops_sampled: 0,
            path_steps: 0,
            loops_per_sec: 0.0,
            path_steps_per_sec: 0.0,
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let p = dir.join(MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
        serde_json::from_str(&text).map(Some).map_err(|e| HarnessError::Malformed {
            path: p.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let p = dir.join(MANIFEST);
        let tmp = dir.join("manifest.json.tmp");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&tmp, text).map_err(|e| HarnessError::io(&tmp, e))?;
        std::fs::rename(&tmp, &p).map_err(|e| HarnessError::io(&p, e))
    }

    pub fn add_range(&mut self, r: (u64, u64)) {
        self.completed.push(r);
        self.completed = normalize(&self.completed);
    }

    pub fn covers(&self, replica: u64) -> bool {
        self.completed.iter().any(|&(a, b)| a <= replica && replica < b)
    }

    pub fn record_throughput(&mut self) {
        if self.wall_seconds > 0.0 {
            self.loops_per_sec = self.loops_sampled as f64 / self.wall_seconds;
            self.path_steps_per_sec = self.path_steps as f64 / self.wall_seconds;
        }
    }
}

/// Sorted union of half-open ranges, merging adjacent ones.
pub fn normalize(ranges: &[(u64, u64)]) -> Vec<(u64, u64)> {
    let mut v: Vec<(u64, u64)> = ranges.iter().copied().filter(|(a, b)| a < b).collect();
    v.sort_unstable();
    let mut out: Vec<(u64, u64)> = Vec::new();
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

pub fn overlap(a: &[(u64, u64)], b: &[(u64, u64)]) -> Option<(u64, u64)> {
    for &(a0, a1) in a {
        for &(b0, b1) in b {
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if lo < hi {
                return Some((lo, hi));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_normalize() {
        assert_eq!(normalize(&[(5, 8), (0, 3), (3, 5), (9, 9)]), vec![(0, 8)]);
        assert_eq!(normalize(&[(4, 6), (0, 2)]), vec![(0, 2), (4, 6)]);
        assert_eq!(overlap(&[(0, 5)], &[(5, 9)]), None);
        assert_eq!(overlap(&[(0, 5)], &[(4, 9)]), Some((4, 5)));
    }
}
