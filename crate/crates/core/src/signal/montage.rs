use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::{Error, Result};

pub const MONTAGE_CHANNELS: usize = 65;

const STANDARD_TABLE: &str = include_str!("../../assets/montage65.tsv");

/// The 65-electrode 10-10 layout every trial is mapped onto.
#[derive(Clone, Debug, PartialEq)]
pub struct Montage65 {
    names: Vec<String>,
    positions: Vec<[f64; 3]>,
}

impl Montage65 {
    /// The bundled layout.
    pub fn standard() -> Self {
        Self::parse(STANDARD_TABLE, Path::new("<bundled montage65.tsv>"))
            .expect("bundled montage table is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses `name x y z` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut names = Vec::new();
        let mut positions = Vec::new();
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(err(i + 1, format!("expected 4 fields, found {}", fields.len())));
            }
            let mut p = [0.0; 3];
            for (slot, f) in p.iter_mut().zip(&fields[1..]) {
                *slot = f
                    .parse()
                    .map_err(|_| err(i + 1, format!("bad coordinate `{f}`")))?;
            }
            names.push(fields[0].to_string());
            positions.push(p);
        }
        let m = Self { names, positions };
        m.validate().map_err(|msg| err(0, msg))?;
        Ok(m)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.names.len() != MONTAGE_CHANNELS {
            return Err(format!(
                "montage must have {MONTAGE_CHANNELS} electrodes, found {}",
                self.names.len()
            ));
        }
        let mut seen = HashSet::new();
        for (n, p) in self.names.iter().zip(&self.positions) {
            if !seen.insert(n.as_str()) {
                return Err(format!("duplicate electrode {n}"));
            }
            let norm = norm(p);
            if (norm - 1.0).abs() > 1e-9 {
                return Err(format!("electrode {n} is off the unit sphere (norm {norm})"));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n.eq_ignore_ascii_case(name))
    }

    pub fn position(&self, name: &str) -> Option<[f64; 3]> {
        self.index_of(name).map(|i| self.positions[i])
    }

    pub fn position_map(&self) -> HashMap<String, [f64; 3]> {
        self.names.iter().cloned().zip(self.positions.iter().copied()).collect()
    }
}

pub(crate) fn norm(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

pub(crate) fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    norm(&d)
}

/// Source distance below which a target is treated as coinciding with it.
const COINCIDENT: f64 = 1e-9;

/// Inverse-distance weights of the (at most) `k` nearest sources for one
/// target position. Returns `(source index, weight)` pairs summing to one.
pub fn idw_weights(target: &[f64; 3], sources: &[[f64; 3]], k: usize) -> Vec<(usize, f64)> {
    let mut by_dist: Vec<(usize, f64)> = sources
        .iter()
        .enumerate()
        .map(|(i, s)| (i, distance(target, s)))
        .collect();
    by_dist.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    by_dist.truncate(k.max(1));
    if by_dist[0].1 < COINCIDENT {
        return vec![(by_dist[0].0, 1.0)];
    }
    let total: f64 = by_dist.iter().map(|(_, d)| 1.0 / d).sum();
    by_dist.into_iter().map(|(i, d)| (i, (1.0 / d) / total)).collect()
}
