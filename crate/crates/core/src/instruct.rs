//! Instruction-conditioned alignment head.
//!
//! Encoder states are modulated by the instruction embedding (FiLM), read
//! by a small query transformer, mean-pooled and projected into the text
//! embedding space, where they are compared with class prototypes.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::nn::{Attention, Dropout, LayerNorm, Linear, Mlp};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::textembed::Embedder;
use crate::{Error, Result};

/// Instruction used when no task context is given.
pub const DEFAULT_INSTRUCTION: &str = "Default";

/// Initial bias of the γ half, so that FiLM starts close to identity
/// scaling rather than zeroing its input.
const FILM_GAMMA_BIAS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `(1/|C|)(1 − cos(h, e_tgt^y))`.
    #[default]
    Cosine,
    /// Linear classifier over `h` with softmax cross-entropy.
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstructConfig {
    /// Text embedding width `k`.
    pub text_dim: usize,
    pub queries: usize,
    pub layers: usize,
    /// Heads of the query self-attention; cross-attention is single-head.
    pub heads: usize,
    pub ff_scale: usize,
    pub query_self_attention: bool,
    pub objective: Objective,
    /// Instruction level paired with every trial during tuning.
    pub train_level: InstructionLevel,
}

impl Default for InstructConfig {
    fn default() -> Self {
        Self {
            text_dim: crate::textembed::DEFAULT_DIM,
            queries: 8,
            layers: 4,
            heads: 8,
            ff_scale: 4,
            query_self_attention: true,
            objective: Objective::Cosine,
            train_level: InstructionLevel::TaskAndTargets,
        }
    }
}

impl InstructConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { section: "instruct".into(), msg });
        if self.queries == 0 || self.layers == 0 || self.text_dim == 0 || self.ff_scale == 0 {
            return bad("queries, layers, text_dim and ff_scale must be positive".into());
        }
        if self.query_self_attention && (self.heads == 0 || !dim.is_multiple_of(self.heads)) {
            return bad(format!("dim {dim} is not divisible by heads {}", self.heads));
        }
        Ok(())
    }
}

/// `(γ, β) = tanh(e·W + b)`, `W ∈ ℝ^{k×2d}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Film {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl Film {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, text_dim: usize, dim: usize, rng: &mut R) -> Self {
        let std = (1.0 / text_dim as f64).sqrt();
        let weight = store.normal("film.weight", ParamGroup::Film, text_dim, 2 * dim, std, rng);
        let bias = Matrix::from_fn(1, 2 * dim, |_, j| if j < dim { FILM_GAMMA_BIAS } else { 0.0 });
        let bias = store.add("film.bias", ParamGroup::Film, bias);
        Self { weight, bias, dim }
    }

    /// Returns `(γ, β)` as `1 × d` rows.
    pub fn coefficients(&self, tape: &mut Tape, e_ins: &[f64]) -> Result<(Var, Var)> {
        let k = tape.store().value(self.weight).rows();
        if e_ins.len() != k {
            return Err(Error::Dim {
                what: "instruction embedding".into(),
                expected: k,
                found: e_ins.len(),
            });
        }
        let e = tape.constant(Matrix::row_vector(e_ins.to_vec()));
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let z = tape.matmul(e, w);
        let z = tape.add(z, b);
        let z = tape.tanh(z);
        Ok((tape.slice_cols(z, 0, self.dim), tape.slice_cols(z, self.dim, self.dim)))
    }

    /// `m̃ = γ ⊙ m + β`, broadcast over rows.
    pub fn condition(&self, tape: &mut Tape, m: Var, e_ins: &[f64]) -> Result<Var> {
        let cols = tape.value(m).cols();
        if cols != self.dim {
            return Err(Error::Dim {
                what: "encoder state width".into(),
                expected: self.dim,
                found: cols,
            });
        }
        let (gamma, beta) = self.coefficients(tape, e_ins)?;
        let y = tape.mul_row(m, gamma);
        Ok(tape.add_row(y, beta))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QFormerLayer {
    pub self_attn: Option<(LayerNorm, Attention)>,
    pub cross_norm: LayerNorm,
    pub cross_attn: Attention,
    pub ff_norm: LayerNorm,
    pub ffn: Mlp,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QFormer {
    /// `N_q × d` learnable queries.
    pub queries: ParamId,
    pub layers: Vec<QFormerLayer>,
}

impl QFormer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &InstructConfig, dim: usize, rng: &mut R) -> Self {
        let g = ParamGroup::QFormer;
        let queries = store.normal("qformer.queries", g, cfg.queries, dim, 0.02, rng);
        let layers = (0..cfg.layers)
            .map(|i| {
                let name = format!("qformer.layer{i}");
                QFormerLayer {
                    self_attn: cfg.query_self_attention.then(|| {
                        (
                            LayerNorm::new(store, &format!("{name}.self_norm"), g, dim),
                            Attention::new(store, &format!("{name}.self_attn"), g, dim, cfg.heads, true, rng),
                        )
                    }),
                    cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), g, dim),
                    cross_attn: Attention::new(store, &format!("{name}.cross_attn"), g, dim, 1, false, rng),
                    ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), g, dim),
                    ffn: Mlp::new(store, &format!("{name}.ffn"), g, dim, dim * cfg.ff_scale, dim, rng),
                }
            })
            .collect();
        Self { queries, layers }
    }

    /// Returns the `N_q × d` query outputs and each layer's cross-attention
    /// matrix.
    pub fn forward_with_weights(&self, tape: &mut Tape, m: Var, drop: &mut Dropout) -> Result<(Var, Vec<Var>)> {
        if tape.value(m).rows() == 0 {
            return Err(Error::invalid("Q-Former needs at least one encoder state"));
        }
        let mut q = tape.param(self.queries);
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if let Some((norm, attn)) = &layer.self_attn {
                let h = norm.forward(tape, q);
                let a = attn.forward(tape, h, h, false);
                let a = drop.apply(tape, a);
                q = tape.add(q, a);
            }
            let h = layer.cross_norm.forward(tape, q);
            let (a, mut w) = layer.cross_attn.forward_with_weights(tape, h, m, false);
            weights.push(w.remove(0));
            let a = drop.apply(tape, a);
            q = tape.add(q, a);
            let h = layer.ff_norm.forward(tape, q);
            let f = layer.ffn.forward(tape, h);
            let f = drop.apply(tape, f);
            q = tape.add(q, f);
        }
        Ok((q, weights))
    }

    pub fn forward(&self, tape: &mut Tape, m: Var, drop: &mut Dropout) -> Result<Var> {
        Ok(self.forward_with_weights(tape, m, drop)?.0)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstructHead {
    pub config: InstructConfig,
    pub film: Film,
    pub qformer: QFormer,
    /// `d → d → k` projection applied to the mean query.
    pub head: Mlp,
    /// Per-dataset linear classifiers over `h`, used by the cross-entropy
    /// objective.
    pub classifiers: Vec<(String, Linear)>,
}

impl InstructHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: InstructConfig, dim: usize, rng: &mut R) -> Self {
        Self {
            film: Film::new(store, config.text_dim, dim, rng),
            qformer: QFormer::new(store, &config, dim, rng),
            head: Mlp::new(store, "head", ParamGroup::Head, dim, dim, config.text_dim, rng),
            classifiers: Vec::new(),
            config,
        }
    }

    /// Adds a classifier for `dataset` with `classes` outputs.
    pub fn add_classifier<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, dataset: &str, classes: usize, rng: &mut R) {
        if self.classifier(dataset).is_some() {
            return;
        }
        let name = format!("classifier.{dataset}");
        let lin = Linear::new(store, &name, ParamGroup::Head, self.config.text_dim, classes, true, rng);
        self.classifiers.push((dataset.to_string(), lin));
    }

    pub fn classifier(&self, dataset: &str) -> Option<&Linear> {
        self.classifiers.iter().find(|(d, _)| d == dataset).map(|(_, l)| l)
    }

    /// `h = MLP(mean_i Q_i)`; not normalized.
    pub fn aggregate(&self, tape: &mut Tape, q: Var) -> Var {
        let pooled = tape.mean_rows(q);
        self.head.forward(tape, pooled)
    }

    /// Full head: FiLM, Q-Former, aggregation. Returns `h` as `1 × k`.
    pub fn forward(&self, tape: &mut Tape, m: Var, e_ins: &[f64], drop: &mut Dropout) -> Result<Var> {
        let cond = self.film.condition(tape, m, e_ins)?;
        let q = self.qformer.forward(tape, cond, drop)?;
        Ok(self.aggregate(tape, q))
    }
}

/// Ordered class names with unit-norm target embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub classes: Vec<String>,
    /// `|C| × k`, one unit-norm row per class.
    pub vectors: Matrix,
}

impl PrototypeBank {
    pub fn new(classes: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::invalid("prototype bank needs at least one class"));
        }
        if classes.len() != vectors.len() {
            return Err(Error::invalid(format!("{} classes but {} vectors", classes.len(), vectors.len())));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &classes {
            if !seen.insert(c) {
                return Err(Error::invalid(format!("duplicate class {c:?} in prototype bank")));
            }
        }
        let k = vectors[0].len();
        let mut data = Vec::with_capacity(k * vectors.len());
        for (c, v) in classes.iter().zip(&vectors) {
            if v.len() != k {
                return Err(Error::Dim {
                    what: format!("prototype for {c:?}"),
                    expected: k,
                    found: v.len(),
                });
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::invalid(format!("prototype for {c:?} has zero norm")));
            }
            data.extend(v.iter().map(|x| x / n));
        }
        Ok(Self {
            vectors: Matrix::from_vec(classes.len(), k, data),
            classes,
        })
    }

    /// Embeds each class name as its target text.
    pub fn from_targets(targets: &[String], embedder: &Embedder) -> Result<Self> {
        let vectors = targets
            .iter()
            .map(|t| embedder.embed(t).map(|e| e.vector))
            .collect::<Result<Vec<_>>>()?;
        Self::new(targets.to_vec(), vectors)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn prototype(&self, class: &str) -> Result<&[f64]> {
        self.index_of(class)
            .map(|i| self.vectors.row(i))
            .ok_or_else(|| Error::MissingLabel(class.to_string()))
    }
}

fn check_nonzero(h: &[f64]) -> Result<()> {
    let n = h.iter().map(|x| x * x).sum::<f64>();
    if !n.is_finite() {
        return Err(Error::NonFinite("head output".into()));
    }
    if n == 0.0 {
        return Err(Error::invalid("head output has zero norm"));
    }
    Ok(())
}

/// `(1/|C|)·(1 − cos(h, e_tgt^y))`.
pub fn alignment_loss(tape: &mut Tape, h: Var, label: &str, bank: &PrototypeBank) -> Result<Var> {
    let target = bank.prototype(label)?.to_vec();
    let hv = tape.value(h);
    if hv.shape() != (1, bank.dim()) {
        return Err(Error::Dim {
            what: "head output".into(),
            expected: bank.dim(),
            found: hv.len(),
        });
    }
    check_nonzero(hv.data())?;
    let cos = tape.cosine(h, &target);
    let one_minus = tape.scale(cos, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    Ok(tape.scale(one_minus, 1.0 / bank.len() as f64))
}

/// Softmax cross-entropy of `classifier(h)` against the label's bank index.
pub fn cross_entropy_loss(tape: &mut Tape, h: Var, classifier: &Linear, label: &str, bank: &PrototypeBank) -> Result<Var> {
    let idx = bank.index_of(label).ok_or_else(|| Error::MissingLabel(label.to_string()))?;
    let logits = classifier.forward(tape, h);
    Ok(tape.softmax_xent(logits, idx))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: String,
    pub index: usize,
    /// Per-class score in bank order: cosine, or logit for the
    /// cross-entropy variant.
    pub scores: Vec<f64>,
}

fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Nearest prototype by cosine; ties go to the earlier class.
pub fn predict(h: &[f64], bank: &PrototypeBank) -> Result<Prediction> {
    if h.len() != bank.dim() {
        return Err(Error::Dim {
            what: "head output".into(),
            expected: bank.dim(),
            found: h.len(),
        });
    }
    check_nonzero(h)?;
    let hn = h.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scores: Vec<f64> = (0..bank.len())
        .map(|c| bank.vectors.row(c).iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / hn)
        .collect();
    let index = argmax_first(&scores);
    Ok(Prediction {
        class: bank.classes[index].clone(),
        index,
        scores,
    })
}

/// Argmax over classifier logits.
pub fn predict_logits(logits: &[f64], bank: &PrototypeBank) -> Result<Prediction> {
    if logits.len() != bank.len() {
        return Err(Error::Dim {
            what: "classifier logits".into(),
            expected: bank.len(),
            found: logits.len(),
        });
    }
    let index = argmax_first(logits);
    Ok(Prediction {
        class: bank.classes[index].clone(),
        index,
        scores: logits.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionLevel {
    None,
    Task,
    TaskAndTargets,
}

impl InstructionLevel {
    pub const ALL: [InstructionLevel; 3] = [Self::None, Self::Task, Self::TaskAndTargets];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Task => "task",
            Self::TaskAndTargets => "task_and_targets",
        }
    }
}

impl fmt::Display for InstructionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InstructionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown instruction level {s:?} (none, task, task_and_targets)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogEntry {
    pub name: String,
    pub task: String,
    pub task_and_targets: String,
    pub targets: Vec<String>,
}

impl CatalogEntry {
    pub fn instruction(&self, level: InstructionLevel) -> &str {
        match level {
            InstructionLevel::None => DEFAULT_INSTRUCTION,
            InstructionLevel::Task => &self.task,
            InstructionLevel::TaskAndTargets => &self.task_and_targets,
        }
    }
}

/// Instruction and target texts per dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    entries: Vec<CatalogEntry>,
    index: HashMap<String, usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    dataset: Vec<CatalogEntry>,
}

impl Catalog {
    pub fn bundled() -> Self {
        Self::parse(include_str!("../assets/catalog.toml"), Path::new("<bundled catalog>")).expect("bundled catalog is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let file: CatalogFile = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            msg: e.message().to_string(),
        })?;
        let mut index = HashMap::new();
        for (i, e) in file.dataset.iter().enumerate() {
            if e.targets.is_empty() {
                return Err(Error::invalid(format!("catalog entry {:?} has no targets", e.name)));
            }
            if index.insert(e.name.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate catalog entry {:?}", e.name)));
            }
        }
        Ok(Self {
            entries: file.dataset,
            index,
        })
    }

    pub fn get(&self, dataset: &str) -> Result<&CatalogEntry> {
        self.index
            .get(dataset)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::MissingCatalog(dataset.to_string()))
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    /// Every distinct instruction and target text, in catalog order.
    pub fn all_texts(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        let mut push = |s: &str| {
            if seen.insert(s.to_string()) {
                out.push(s.to_string());
            }
        };
        push(DEFAULT_INSTRUCTION);
        for e in &self.entries {
            push(&e.task);
            push(&e.task_and_targets);
            for t in &e.targets {
                push(t);
            }
        }
        out
    }
}

/// Where text vectors came from, so evaluation can reproduce them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextSource {
    pub encoder_tag: Option<String>,
    pub fallback_seed: Option<u64>,
    pub dim: usize,
}

impl TextSource {
    pub fn of(embedder: &Embedder) -> Self {
        Self {
            encoder_tag: embedder.store.as_ref().map(|s| s.encoder_tag().to_string()),
            fallback_seed: embedder.fallback_seed,
            dim: embedder.dim,
        }
    }

    /// Rebuilds the embedder, checking that a supplied store matches.
    pub fn embedder(&self, store: Option<crate::textembed::EmbeddingStore>) -> Result<Embedder> {
        match (&self.encoder_tag, &store) {
            (Some(tag), Some(s)) if s.encoder_tag() != tag => Err(Error::invalid(format!(
                "embedding store was produced by `{}`, the model was tuned with `{tag}`",
                s.encoder_tag()
            ))),
            (Some(tag), None) => Err(Error::invalid(format!("model was tuned with text store `{tag}`; pass it with --store"))),
            (None, Some(_)) => Err(Error::invalid("model was tuned with pseudo-embeddings; do not pass a store")),
            _ => {
                let e = Embedder::new(store, self.fallback_seed, self.dim);
                if e.dim != self.dim {
                    return Err(Error::Dim {
                        what: "text store".into(),
                        expected: self.dim,
                        found: e.dim,
                    });
                }
                Ok(e)
            }
        }
    }
}

/// Catalog entry, prototype bank and resolved instruction vectors for one
/// dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBinding {
    pub dataset: String,
    pub entry: CatalogEntry,
    pub bank: PrototypeBank,
    /// Indexed like `InstructionLevel::ALL`.
    pub instructions: Vec<Vec<f64>>,
}

impl TaskBinding {
    pub fn instruction(&self, level: InstructionLevel) -> &[f64] {
        let i = InstructionLevel::ALL.iter().position(|&l| l == level).expect("level listed");
        &self.instructions[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub source: TextSource,
    pub tasks: Vec<TaskBinding>,
}

impl TaskSet {
    /// Resolves every dataset through the catalog and embedder.
    pub fn build(datasets: &[String], catalog: &Catalog, embedder: &Embedder) -> Result<Self> {
        let mut tasks = Vec::new();
        for d in datasets {
            if tasks.iter().any(|t: &TaskBinding| &t.dataset == d) {
                continue;
            }
            let entry = catalog.get(d)?.clone();
            let bank = PrototypeBank::from_targets(&entry.targets, embedder)?;
            let instructions = InstructionLevel::ALL
                .iter()
                .map(|&l| embedder.embed(entry.instruction(l)).map(|e| e.vector))
                .collect::<Result<Vec<_>>>()?;
            tasks.push(TaskBinding {
                dataset: d.clone(),
                entry,
                bank,
                instructions,
            });
        }
        Ok(Self {
            source: TextSource::of(embedder),
            tasks,
        })
    }

    pub fn get(&self, dataset: &str) -> Result<&TaskBinding> {
        self.tasks
            .iter()
            .find(|t| t.dataset == dataset)
            .ok_or_else(|| Error::MissingCatalog(dataset.to_string()))
    }

    pub fn banks(&self) -> Vec<(String, PrototypeBank)> {
        self.tasks.iter().map(|t| (t.dataset.clone(), t.bank.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gelu;
    use crate::textembed::pseudo_embed;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 8;
    const K: usize = 6;

    fn cfg(self_attn: bool) -> InstructConfig {
        InstructConfig {
            text_dim: K,
            queries: 3,
            layers: 2,
            heads: 2,
            ff_scale: 2,
            query_self_attention: self_attn,
            objective: Objective::Cosine,
            train_level: InstructionLevel::TaskAndTargets,
        }
    }

    fn setup(self_attn: bool) -> (ParamStore, InstructHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let head = InstructHead::new(&mut store, cfg(self_attn), D, &mut rng);
        (store, head)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn unit(seed: u64) -> Vec<f64> {
        pseudo_embed("instr", seed, K).unwrap().vector
    }

    #[test]
    fn film_zero_params_zero_output() {
        let (mut store, head) = setup(true);
        *store.value_mut(head.film.weight) = Matrix::zeros(K, 2 * D);
        *store.value_mut(head.film.bias) = Matrix::zeros(1, 2 * D);
        let mut tape = Tape::new(&store);
        let m = tape.constant(random(4, D, 1));
        let y = head.film.condition(&mut tape, m, &unit(1)).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn film_matches_direct_product_and_difference_identity() {
        let (store, head) = setup(true);
        let w = store.value(head.film.weight);
        let b = store.value(head.film.bias);
        let e1 = unit(1);
        let e2 = unit(2);
        let oracle = |e: &[f64]| -> Vec<f64> {
            (0..2 * D)
                .map(|j| ((0..K).map(|i| e[i] * w.get(i, j)).sum::<f64>() + b.get(0, j)).tanh())
                .collect()
        };
        let mut tape = Tape::new(&store);
        for e in [&e1, &e2] {
            let (g, bt) = head.film.coefficients(&mut tape, e).unwrap();
            let want = oracle(e);
            for j in 0..D {
                assert!((tape.value(g).data()[j] - want[j]).abs() < 1e-12);
                assert!((tape.value(bt).data()[j] - want[D + j]).abs() < 1e-12);
            }
        }
        assert_ne!(oracle(&e1), oracle(&e2));

        let m1 = random(5, D, 3);
        let m2 = random(5, D, 4);
        let a = tape.constant(m1.clone());
        let bb = tape.constant(m2.clone());
        let y1 = head.film.condition(&mut tape, a, &e1).unwrap();
        let y2 = head.film.condition(&mut tape, bb, &e1).unwrap();
        let gamma = oracle(&e1);
        for r in 0..5 {
            for c in 0..D {
                let lhs = tape.value(y1).get(r, c) - tape.value(y2).get(r, c);
                let rhs = gamma[c] * (m1.get(r, c) - m2.get(r, c));
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
        assert!(matches!(head.film.condition(&mut tape, a, &[1.0; 3]), Err(Error::Dim { .. })));
    }

    #[test]
    fn qformer_single_token_closed_form() {
        let (store, head) = setup(false);
        let token = random(1, D, 5);
        let mut tape = Tape::new(&store);
        let m = tape.constant(token.clone());
        let (q, ws) = head.qformer.forward_with_weights(&mut tape, m, &mut Dropout::off()).unwrap();
        for w in &ws {
            assert!(tape.value(*w).data().iter().all(|&v| v == 1.0));
        }

        let ln = |n: &LayerNorm, x: &[f64]| -> Vec<f64> {
            let mu = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / x.len() as f64;
            let g = store.value(n.gain).data();
            let s = store.value(n.shift).data();
            (0..x.len()).map(|i| (x[i] - mu) / (var + 1e-5).sqrt() * g[i] + s[i]).collect()
        };
        let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
            let w = store.value(l.weight);
            (0..w.cols())
                .map(|j| {
                    (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>()
                        + l.bias.map_or(0.0, |b| store.value(b).data()[j])
                })
                .collect()
        };
        let queries = store.value(head.qformer.queries);
        for r in 0..3 {
            let mut x = queries.row(r).to_vec();
            for layer in &head.qformer.layers {
                let v = lin(&layer.cross_attn.value, token.row(0));
                x = x.iter().zip(&v).map(|(a, b)| a + b).collect();
                let h = ln(&layer.ff_norm, &x);
                let f1: Vec<f64> = lin(&layer.ffn.fc1, &h).into_iter().map(gelu).collect();
                let f = lin(&layer.ffn.fc2, &f1);
                x = x.iter().zip(&f).map(|(a, b)| a + b).collect();
            }
            for c in 0..D {
                assert!((tape.value(q).get(r, c) - x[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn qformer_is_key_permutation_invariant() {
        for self_attn in [false, true] {
            let (store, head) = setup(self_attn);
            let m = random(7, D, 6);
            let perm = [4usize, 2, 6, 0, 1, 5, 3];
            let mut tape = Tape::new(&store);
            let a = tape.constant(m.clone());
            let b = tape.constant(m.select_rows(&perm));
            let (qa, ws) = head.qformer.forward_with_weights(&mut tape, a, &mut Dropout::off()).unwrap();
            let qb = head.qformer.forward(&mut tape, b, &mut Dropout::off()).unwrap();
            for (x, y) in tape.value(qa).data().iter().zip(tape.value(qb).data()) {
                assert!((x - y).abs() < 1e-6);
            }
            assert_eq!(tape.value(qa).shape(), (3, D));
            for w in ws {
                let w = tape.value(w);
                for r in 0..w.rows() {
                    assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn full_scale_output_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let qf = QFormer::new(&mut store, &InstructConfig::default(), 256, &mut rng);
        let mut tape = Tape::new(&store);
        let m = tape.constant(random(4, 256, 2));
        let q = qf.forward(&mut tape, m, &mut Dropout::off()).unwrap();
        assert_eq!(tape.value(q).shape(), (8, 256));
    }

    #[test]
    fn aggregate_of_identical_queries() {
        let (mut store, head) = setup(true);
        let v = random(1, D, 9);
        let mut tape = Tape::new(&store);
        let qs = tape.constant(Matrix::vstack(&[&v, &v, &v]));
        let h = head.aggregate(&mut tape, qs);
        let single = tape.constant(v.clone());
        let h1 = head.head.forward(&mut tape, single);
        for (a, b) in tape.value(h).data().iter().zip(tape.value(h1).data()) {
            assert!((a - b).abs() < 1e-15);
        }
        drop(tape);

        *store.value_mut(head.head.fc1.bias.unwrap()) = Matrix::zeros(1, D);
        *store.value_mut(head.head.fc2.bias.unwrap()) = Matrix::zeros(1, K);
        let mut tape = Tape::new(&store);
        let z = tape.constant(Matrix::zeros(3, D));
        let h = head.aggregate(&mut tape, z);
        assert!(tape.value(h).data().iter().all(|&x| x == 0.0));
    }

    fn bank(n: usize) -> PrototypeBank {
        let classes: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let vectors = classes.iter().map(|c| pseudo_embed(c, 3, K).unwrap().vector).collect();
        PrototypeBank::new(classes, vectors).unwrap()
    }

    #[test]
    fn alignment_loss_closed_forms() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let b3 = bank(3);
        let h = tape.constant(Matrix::row_vector(b3.prototype("c1").unwrap().to_vec()));
        let l = alignment_loss(&mut tape, h, "c1", &b3).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);

        let b2 = bank(2);
        let neg: Vec<f64> = b2.prototype("c0").unwrap().iter().map(|x| -x).collect();
        let h = tape.constant(Matrix::row_vector(neg));
        let l = alignment_loss(&mut tape, h, "c0", &b2).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);

        let b5 = bank(5);
        let hv = random(1, K, 10);
        let e = b5.prototype("c3").unwrap();
        let hn = hv.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let oracle = (1.0 - hv.data().iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / hn) / 5.0;
        let h = tape.constant(hv);
        let l = alignment_loss(&mut tape, h, "c3", &b5).unwrap();
        assert!((tape.value(l).item() - oracle).abs() < 1e-12);

        assert!(matches!(alignment_loss(&mut tape, h, "nope", &b5), Err(Error::MissingLabel(_))));
        let z = tape.constant(Matrix::zeros(1, K));
        assert!(alignment_loss(&mut tape, z, "c0", &b5).is_err());
    }

    #[test]
    fn prediction_rules() {
        let b = bank(4);
        let p = predict(b.prototype("c2").unwrap(), &b).unwrap();
        assert_eq!(p.class, "c2");
        let h: Vec<f64> = random(1, K, 11).into_vec();
        let scaled: Vec<f64> = h.iter().map(|x| x * 3.7).collect();
        let (a, s) = (predict(&h, &b).unwrap(), predict(&scaled, &b).unwrap());
        assert_eq!(a.class, s.class);
        for (x, y) in a.scores.iter().zip(&s.scores) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut eye = vec![vec![0.0; K]; 3];
        for (i, row) in eye.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let ortho = PrototypeBank::new(vec!["a".into(), "b".into(), "c".into()], eye).unwrap();
        let mut h = vec![0.0; K];
        h[0] = 0.9;
        h[1] = 0.1;
        assert_eq!(predict(&h, &ortho).unwrap().class, "a");
        // tie goes to the first class
        let tie = vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(predict(&tie, &ortho).unwrap().class, "a");
        assert!(predict(&[0.0; K], &ortho).is_err());
    }

    #[test]
    fn bank_rejects_duplicates() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(PrototypeBank::new(vec!["a".into(), "a".into()], v).is_err());
    }

    #[test]
    fn catalog_contents() {
        let cat = Catalog::bundled();
        assert_eq!(cat.entries().len(), 20);
        let e = cat.get("BCIC-IV2a").unwrap();
        assert_eq!(e.targets, ["Left", "Right", "Foot", "Tongue"]);
        assert_eq!(e.instruction(InstructionLevel::None), "Default");
        assert_eq!(e.instruction(InstructionLevel::Task), "Decode motor imagery");
        assert_eq!(
            e.instruction(InstructionLevel::TaskAndTargets),
            "Decode (Left vs Right vs Foot vs Tongue) motor imagery"
        );
        assert_eq!(cat.get("SEED").unwrap().targets, ["Positive", "Neutral", "Negative"]);
        let beta = cat.get("BETA").unwrap();
        assert_eq!(beta.targets.len(), 40);
        assert_eq!(beta.targets[0], "08.0");
        assert_eq!(beta.targets[39], "15.8");
        assert!(matches!(cat.get("Nope"), Err(Error::MissingCatalog(_))));
        assert!(cat.all_texts().contains(&"Decode SSVEP".to_string()));

        let emb = Embedder::pseudo(7, 16);
        let tasks = TaskSet::build(&["BCIC-IV2a".into(), "SEED".into(), "BCIC-IV2a".into()], &cat, &emb).unwrap();
        assert_eq!(tasks.tasks.len(), 2);
        let mi = tasks.get("BCIC-IV2a").unwrap();
        assert_eq!(mi.instruction(InstructionLevel::None), emb.embed("Default").unwrap().vector.as_slice());
        assert_eq!(mi.bank.classes, ["Left", "Right", "Foot", "Tongue"]);
        assert!(tasks.get("FACED").is_err());
        assert_eq!(tasks.source.embedder(None).unwrap().embed("x").unwrap(), emb.embed("x").unwrap());
        for l in InstructionLevel::ALL {
            assert_eq!(l.as_str().parse::<InstructionLevel>().unwrap(), l);
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let (mut store, head) = setup(true);
        let m = random(5, D, 12);
        let e = unit(4);
        let b = bank(3);
        let loss_of = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new(store);
            let mv = tape.constant(m.clone());
            let h = head.forward(&mut tape, mv, &e, &mut Dropout::off()).unwrap();
            let l = alignment_loss(&mut tape, h, "c1", &b).unwrap();
            tape.value(l).item()
        };
        let grads = {
            let mut tape = Tape::new(&store);
            let mv = tape.constant(m.clone());
            let h = head.forward(&mut tape, mv, &e, &mut Dropout::off()).unwrap();
            let l = alignment_loss(&mut tape, h, "c1", &b).unwrap();
            tape.backward(l)
        };
        let ids: Vec<ParamId> = store.ids().collect();
        let mut checked = 0;
        for id in ids {
            let n = store.value(id).len();
            for idx in [0, n / 2, n - 1] {
                let orig = store.value(id).data()[idx];
                let eps = 1e-5;
                store.value_mut(id).data_mut()[idx] = orig + eps;
                let up = loss_of(&store);
                store.value_mut(id).data_mut()[idx] = orig - eps;
                let down = loss_of(&store);
                store.value_mut(id).data_mut()[idx] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grads.get(id).map_or(0.0, |g| g.data()[idx]);
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(rel < 1e-3, "{} [{idx}]: {analytic} vs {numeric}", store.param(id).name);
                checked += 1;
            }
        }
        assert!(checked > 30);
    }
}
