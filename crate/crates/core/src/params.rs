//! Named parameter storage shared by every network block.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

/// Optimizer parameter groups. Learning-rate scaling and freezing are
/// configured per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Tokenizer,
    /// Both transformer stacks (bidirectional and causal).
    Transformer,
    Positional,
    MaskEmbedding,
    Decoder,
    Film,
    QFormer,
    Head,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

impl ParamGroup {
    pub const TRAINABLE: [ParamGroup; 8] = [
        ParamGroup::Tokenizer,
        ParamGroup::Transformer,
        ParamGroup::Positional,
        ParamGroup::MaskEmbedding,
        ParamGroup::Decoder,
        ParamGroup::Film,
        ParamGroup::QFormer,
        ParamGroup::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Tokenizer => "tokenizer",
            ParamGroup::Transformer => "transformer",
            ParamGroup::Positional => "positional",
            ParamGroup::MaskEmbedding => "mask_embedding",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Film => "film",
            ParamGroup::QFormer => "qformer",
            ParamGroup::Head => "head",
            ParamGroup::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::TRAINABLE
            .into_iter()
            .chain([ParamGroup::Buffer])
            .find(|g| g.as_str() == s)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        ParamId(id)
    }

    pub fn zeros(&mut self, name: impl Into<String>, group: ParamGroup, rows: usize, cols: usize) -> ParamId {
        self.add(name, group, Matrix::zeros(rows, cols))
    }

    pub fn filled(&mut self, name: impl Into<String>, group: ParamGroup, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, group, Matrix::filled(rows, cols, v))
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let m = Matrix::from_fn(rows, cols, |_, _| dist.sample(rng));
        self.add(name, group, m)
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.group != ParamGroup::Buffer)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copies values from `other` by name. Both stores must describe the
    /// same architecture.
    pub fn load_values_from(&mut self, other: &ParamStore) -> crate::Result<()> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .map(|id| other.value(id))
                .ok_or_else(|| crate::Error::Corrupt(format!("missing parameter {}", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(crate::Error::Shape(format!(
                    "parameter {}: {:?} vs {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradients, indexed like the store they came from.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn new(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.all_finite())
    }
}
