//! ETRIAL v1: a directory holding `manifest.json` plus one raw binary per
//! trial (little-endian `f32`, `channels × samples`, row-major).
//!
//! ```json
//! {
//!   "format": "ETRIAL v1",
//!   "trials": [
//!     { "trial_id": "S01-T000", "subject_id": "S01", "label": "Left",
//!       "dataset": "BCIC-IV2a", "channel_names": ["Fp1", ...],
//!       "sample_rate": 200.0, "path": "data/S01-T000.f32" }
//!   ]
//! }
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::RawTrial;
use crate::{Error, Result};

pub const FORMAT_TAG: &str = "ETRIAL v1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    trials: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    trial_id: String,
    subject_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset: Option<String>,
    channel_names: Vec<String>,
    sample_rate: f64,
    path: String,
}

/// Writes the corpus into `dir`, which must exist.
pub fn write_corpus(dir: &Path, trials: &[RawTrial]) -> Result<()> {
    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    let mut entries = Vec::with_capacity(trials.len());
    for t in trials {
        let rel = format!("data/{}.f32", sanitize(&t.trial_id));
        let mut bytes = Vec::with_capacity(t.data.len() * 4);
        for v in t.data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&rel);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(Entry {
            trial_id: t.trial_id.clone(),
            subject_id: t.subject_id.clone(),
            label: t.label.clone(),
            dataset: t.dataset.clone(),
            channel_names: t.channel_names.clone(),
            sample_rate: t.sample_rate,
            path: rel,
        });
    }
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        trials: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads every trial listed in `dir/manifest.json`, in manifest order.
pub fn read_corpus(dir: &Path) -> Result<Vec<RawTrial>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Parse {
            path,
            line: 1,
            msg: format!("expected format `{FORMAT_TAG}`, found `{}`", manifest.format),
        });
    }
    manifest
        .trials
        .into_iter()
        .map(|e| {
            let bin = dir.join(&e.path);
            let bytes = fs::read(&bin).map_err(|err| Error::io(&bin, err))?;
            let channels = e.channel_names.len();
            if channels == 0 || bytes.len() % (4 * channels) != 0 {
                return Err(Error::Shape(format!(
                    "{}: {} bytes is not a whole number of {channels}-channel f32 frames",
                    bin.display(),
                    bytes.len()
                )));
            }
            let samples = bytes.len() / (4 * channels);
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let data = Array2::from_shape_vec((channels, samples), values)
                .map_err(|err| Error::Shape(err.to_string()))?;
            let mut t = RawTrial::new(e.trial_id, e.subject_id, e.label, e.channel_names, e.sample_rate, data)?;
            t.dataset = e.dataset;
            Ok(t)
        })
        .collect()
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
