//! Sentence vectors for instructions and class targets.
//!
//! Vectors come from an EMBTXT v1 store written by an external sentence
//! encoder, or from a deterministic pseudo-embedding when a fallback seed
//! is given.
//!
//! EMBTXT v1 layout (UTF-8):
//!
//! ```text
//! dim=<k> encoder=<tag>
//! "<json-quoted text>"\t<f1> <f2> ... <fk>
//! ```
//!
//! Pseudo-embeddings: `h = fnv1a64(utf8(text)) ^ seed` seeds a splitmix64
//! stream; consecutive pairs of outputs become uniforms in (0, 1] via the
//! top 53 bits, and Box–Muller turns each pair into two standard normals.
//! The first `k` normals are ℓ2-normalized.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_DIM: usize = 768;
pub const FORMAT_NAME: &str = "EMBTXT v1";
pub const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Store,
    Pseudo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub text: String,
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
}

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    encoder_tag: String,
    entries: Vec<(String, Vec<f64>)>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, encoder_tag: impl Into<String>) -> Result<Self> {
        let encoder_tag = encoder_tag.into();
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if encoder_tag.is_empty() || encoder_tag.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("encoder tag {encoder_tag:?} must be a nonempty word")));
        }
        Ok(Self {
            dim,
            encoder_tag,
            entries: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encoder_tag(&self) -> &str {
        &self.encoder_tag
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(t, _)| t.as_str())
    }

    /// Adds a vector, normalizing it. Duplicate texts are rejected.
    pub fn insert(&mut self, text: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let text = text.into();
        if vector.len() != self.dim {
            return Err(Error::Dim {
                what: format!("embedding for {text:?}"),
                expected: self.dim,
                found: vector.len(),
            });
        }
        if self.index.contains_key(&text) {
            return Err(Error::invalid(format!("duplicate text {text:?} in embedding store")));
        }
        let vector = normalize(vector).ok_or_else(|| Error::invalid(format!("embedding for {text:?} has zero or non-finite norm")))?;
        self.index.insert(text.clone(), self.entries.len());
        self.entries.push((text, vector));
        Ok(())
    }

    pub fn get(&self, text: &str) -> Option<&[f64]> {
        self.index.get(text).map(|&i| self.entries[i].1.as_slice())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty store file".into()))?;
        let (dim, tag) = parse_header(header).map_err(|m| err(1, m))?;
        let mut store = Self::new(dim, tag).map_err(|e| err(1, e.to_string()))?;
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut stream = serde_json::Deserializer::from_str(line).into_iter::<String>();
            let key = match stream.next() {
                Some(Ok(k)) => k,
                _ => return Err(err(lineno, "expected a quoted text".into())),
            };
            let rest = &line[stream.byte_offset()..];
            let rest = rest
                .strip_prefix('\t')
                .ok_or_else(|| err(lineno, "expected a tab after the quoted text".into()))?;
            let vector = rest
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|e| err(lineno, format!("bad float {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if vector.len() != dim {
                return Err(err(lineno, format!("entry has {} values, header declares dim={dim}", vector.len())));
            }
            store.insert(key, vector).map_err(|e| err(lineno, e.to_string()))?;
        }
        Ok(store)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dim={} encoder={}\n", self.dim, self.encoder_tag);
        for (text, v) in &self.entries {
            out.push_str(&serde_json::to_string(text).expect("string serialization"));
            out.push('\t');
            for (j, x) in v.iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn parse_header(line: &str) -> std::result::Result<(usize, String), String> {
    let mut dim = None;
    let mut tag = None;
    for field in line.split_whitespace() {
        match field.split_once('=') {
            Some(("dim", v)) => dim = Some(v.parse::<usize>().map_err(|e| format!("bad dim {v:?}: {e}"))?),
            Some(("encoder", v)) => tag = Some(v.to_string()),
            _ => return Err(format!("unexpected header field {field:?}")),
        }
    }
    match (dim, tag) {
        (Some(d), Some(t)) => Ok((d, t)),
        _ => Err("header must be `dim=<k> encoder=<tag>`".into()),
    }
}

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n.is_finite() && n > 0.0) {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Unit-norm Gaussian direction determined by `(text, seed)`.
pub fn pseudo_embed(text: &str, seed: u64, dim: usize) -> Result<TextEmbedding> {
    if text.is_empty() {
        return Err(Error::invalid("cannot embed empty text"));
    }
    if dim == 0 {
        return Err(Error::invalid("embedding dimension must be positive"));
    }
    let mut state = fnv1a64(text.as_bytes()) ^ seed;
    let mut unit = || ((splitmix64(&mut state) >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
    let mut v = Vec::with_capacity(dim + 1);
    while v.len() < dim {
        let (u1, u2) = (unit(), unit());
        let r = (-2.0 * u1.ln()).sqrt();
        let a = std::f64::consts::TAU * u2;
        v.push(r * a.cos());
        v.push(r * a.sin());
    }
    v.truncate(dim);
    let vector = normalize(v).expect("gaussian draw has positive norm");
    Ok(TextEmbedding {
        text: text.to_string(),
        vector,
        source: EmbeddingSource::Pseudo,
    })
}

/// Store lookup with an optional pseudo-embedding fallback. Without a store
/// every lookup is a miss; the fallback then uses `dim`.
pub fn embed(text: &str, store: Option<&EmbeddingStore>, fallback_seed: Option<u64>, dim: usize) -> Result<TextEmbedding> {
    if text.is_empty() {
        return Err(Error::invalid("cannot embed empty text"));
    }
    if let Some(v) = store.and_then(|s| s.get(text)) {
        return Ok(TextEmbedding {
            text: text.to_string(),
            vector: v.to_vec(),
            source: EmbeddingSource::Store,
        });
    }
    match fallback_seed {
        Some(seed) => pseudo_embed(text, seed, store.map_or(dim, |s| s.dim())),
        None => Err(Error::MissingText(text.to_string())),
    }
}

/// Resolves texts through a store and/or fallback seed.
#[derive(Clone, Debug, Default)]
pub struct Embedder {
    pub store: Option<EmbeddingStore>,
    pub fallback_seed: Option<u64>,
    pub dim: usize,
}

impl Embedder {
    pub fn new(store: Option<EmbeddingStore>, fallback_seed: Option<u64>, dim: usize) -> Self {
        let dim = store.as_ref().map_or(dim, |s| s.dim());
        Self { store, fallback_seed, dim }
    }

    pub fn pseudo(seed: u64, dim: usize) -> Self {
        Self::new(None, Some(seed), dim)
    }

    pub fn embed(&self, text: &str) -> Result<TextEmbedding> {
        embed(text, self.store.as_ref(), self.fallback_seed, self.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn parse(s: &str) -> Result<EmbeddingStore> {
        EmbeddingStore::parse(s, Path::new("mem.embtxt"))
    }

    fn row(text: &str, v: &[f64]) -> String {
        let nums: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        format!("{}\t{}\n", serde_json::to_string(text).unwrap(), nums.join(" "))
    }

    #[test]
    fn loads_and_normalizes() {
        let mut v = vec![0.0; 768];
        v[3] = 2.0;
        let s = parse(&format!("dim=768 encoder=sbert_mean\n{}", row("Left", &v))).unwrap();
        assert_eq!(s.dim(), 768);
        assert_eq!(s.encoder_tag(), "sbert_mean");
        let got = s.get("Left").unwrap();
        assert!((norm(got) - 1.0).abs() < 1e-5);
        assert_eq!(got[3], 1.0);
    }

    #[test]
    fn rejects_duplicates_and_bad_rows() {
        let dup = format!("dim=2 encoder=t\n{}{}", row("Left", &[1.0, 0.0]), row("Left", &[0.0, 1.0]));
        assert!(matches!(parse(&dup), Err(Error::Parse { line: 3, .. })));
        let short = format!("dim=3 encoder=t\n{}{}", row("A", &[1.0, 0.0, 0.0]), row("B", &[1.0, 0.0]));
        match parse(&short) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("dim=3"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        assert!(parse("dim=2\n").is_err());
        assert!(parse("dim=2 encoder=t\nLeft\t1 0\n").is_err());
        assert!(parse("dim=2 encoder=t\n\"Left\" 1 0\n").is_err());
    }

    #[test]
    fn quoted_texts_survive_round_trip() {
        let mut s = EmbeddingStore::new(3, "bert_cls").unwrap();
        s.insert("Decode motor imagery", vec![1.0, 2.0, 3.0]).unwrap();
        s.insert("tab\there \"quoted\" ünï", vec![-1.0, 0.5, 0.25]).unwrap();
        let text = s.to_text();
        let back = parse(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn embed_resolution_order() {
        let mut s = EmbeddingStore::new(4, "t").unwrap();
        s.insert("Decode motor imagery", vec![0.0, 3.0, 0.0, 4.0]).unwrap();
        let hit = embed("Decode motor imagery", Some(&s), None, 4).unwrap();
        assert_eq!(hit.source, EmbeddingSource::Store);
        assert_eq!(hit.vector, vec![0.0, 0.6, 0.0, 0.8]);
        let miss = embed("Foot", Some(&s), Some(7), 768).unwrap();
        assert_eq!(miss, pseudo_embed("Foot", 7, 4).unwrap());
        assert!(matches!(embed("Foot", Some(&s), None, 4), Err(Error::MissingText(t)) if t == "Foot"));
        assert!(embed("", Some(&s), Some(1), 4).is_err());
    }

    #[test]
    fn pseudo_embedding_is_deterministic_unit_norm() {
        let a = pseudo_embed("Left", 7, 768).unwrap();
        let b = pseudo_embed("Left", 7, 768).unwrap();
        assert_eq!(a, b);
        assert!((norm(&a.vector) - 1.0).abs() < 1e-7);
        assert_ne!(a.vector, pseudo_embed("Left", 8, 768).unwrap().vector);
        assert_eq!(pseudo_embed("x", 1, 5).unwrap().dim(), 5);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn distinct_texts_are_nearly_orthogonal() {
        let pairs = 10_000;
        let mut within = 0;
        for i in 0..pairs {
            let a = pseudo_embed(&format!("text-a-{i}"), 7, 768).unwrap();
            let b = pseudo_embed(&format!("text-b-{i}"), 7, 768).unwrap();
            let cos: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
            if cos.abs() < 0.2 {
                within += 1;
            }
        }
        assert!(within as f64 / pairs as f64 >= 0.99);
    }
}
