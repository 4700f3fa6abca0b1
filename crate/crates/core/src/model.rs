//! The assembled network: tokenizer, dual encoder and instruction head
//! over one parameter store, plus trial preparation.

use std::collections::HashMap;

use rand::SeedableRng;
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::RunConfig;
use crate::encoder::DualEncoder;
use crate::instruct::{InstructHead, Objective, Prediction, PrototypeBank};
use crate::nn::Dropout;
use crate::params::ParamStore;
use crate::signal::{self, Montage65, RawTrial, Segment};
use crate::tensor::Matrix;
use crate::tokenizer::{segment_matrix, Tokenizer};
use crate::{Error, Result};

/// Seed offset for the parameter initialization stream.
const INIT_STREAM: u64 = 0x1_0000;

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    pub encoder: DualEncoder,
    pub instruct: InstructHead,
    /// Samples per token slice (`window / tokens_per_segment`).
    pub slice_width: usize,
    pub window: usize,
    pub data_scale: f64,
}

/// A preprocessed trial split into segments, with its reconstruction
/// targets.
#[derive(Clone, Debug)]
pub struct PreparedTrial {
    pub trial_id: String,
    pub subject_id: String,
    pub label: Option<String>,
    pub dataset: Option<String>,
    /// Unscaled 65 × t segments, for spectral masking.
    pub segments: Vec<Segment>,
    /// Scaled model inputs, one per segment.
    pub inputs: Vec<Matrix>,
    /// `N × (65·slice_width)`: token `j` of segment `s` targets columns
    /// `[w·j, w·j + w)` of that segment, channel-major.
    pub targets: Matrix,
}

impl PreparedTrial {
    pub fn n_tokens(&self, per_segment: usize) -> usize {
        self.inputs.len() * per_segment
    }
}

impl Model {
    /// Builds a freshly initialized model. Initialization draws from its own
    /// ChaCha8 stream of `seed`, so it does not disturb training streams.
    pub fn new(config: &RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let tok_cfg = config.tokenizer.clone();
        let window = config.signal.window_samples;
        let per = tok_cfg.tokens_per_segment(window);
        let slice_width = window / per;
        let tokenizer = Tokenizer::new(&mut store, tok_cfg.clone(), &mut rng);
        let encoder = DualEncoder::new(&mut store, config.encoder.clone(), tok_cfg.channels * slice_width, &mut rng);
        let instruct = InstructHead::new(&mut store, config.instruct.clone(), config.encoder.dim, &mut rng);
        Ok(Self {
            store,
            tokenizer,
            encoder,
            instruct,
            slice_width,
            window,
            data_scale: config.signal.data_scale,
        })
    }

    /// Adds classifier heads for the cross-entropy objective, in bank order.
    pub fn attach_classifiers(&mut self, banks: &[(String, PrototypeBank)], seed: u64) {
        if self.instruct.config.objective != Objective::CrossEntropy {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM + 1);
        for (dataset, bank) in banks {
            self.instruct.add_classifier(&mut self.store, dataset, bank.len(), &mut rng);
        }
    }

    pub fn tokens_per_segment(&self) -> usize {
        self.tokenizer.config.tokens_per_segment(self.window)
    }

    /// Preprocesses, segments and scales one trial.
    pub fn prepare(&self, trial: &RawTrial, montage: &Montage65, cfg: &signal::SignalConfig) -> Result<PreparedTrial> {
        let clean = signal::preprocess(trial, montage, &HashMap::new(), cfg)?;
        let segments = signal::segment(&clean, self.window)?;
        if segments.is_empty() {
            return Err(Error::invalid(format!(
                "trial {} has {} samples, shorter than one {}-sample window",
                trial.trial_id,
                clean.n_samples(),
                self.window
            )));
        }
        let per = self.tokens_per_segment();
        let w = self.slice_width;
        let channels = self.tokenizer.config.channels;
        let inputs: Vec<Matrix> = segments.iter().map(|s| segment_matrix(&s.data, self.data_scale)).collect();
        let mut targets = Matrix::zeros(segments.len() * per, channels * w);
        for (si, x) in inputs.iter().enumerate() {
            for j in 0..per {
                let row = targets.row_mut(si * per + j);
                for ch in 0..channels {
                    row[ch * w..(ch + 1) * w].copy_from_slice(&x.row(ch)[j * w..(j + 1) * w]);
                }
            }
        }
        Ok(PreparedTrial {
            trial_id: trial.trial_id.clone(),
            subject_id: trial.subject_id.clone(),
            label: trial.label.clone(),
            dataset: trial.dataset.clone(),
            segments,
            inputs,
            targets,
        })
    }

    /// `prepare` over a corpus; runs in parallel and keeps input order.
    pub fn prepare_all(&self, trials: &[RawTrial], montage: &Montage65, cfg: &signal::SignalConfig) -> Result<Vec<PreparedTrial>> {
        trials.par_iter().map(|t| self.prepare(t, montage, cfg)).collect()
    }

    /// Head output `h` (1 × k) for one trial's tokens.
    pub fn head_output(&self, tape: &mut Tape, tokens: Var, e_ins: &[f64], drop: &mut Dropout) -> Result<Var> {
        let m = self.encoder.encode_for_tuning(tape, tokens, drop)?;
        self.instruct.forward(tape, m, e_ins, drop)
    }

    /// Inference-mode `h` for a prepared trial.
    pub fn embed_trial(&self, trial: &PreparedTrial, e_ins: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store);
        let refs: Vec<&Matrix> = trial.inputs.iter().collect();
        let (tokens, _) = self.tokenizer.forward(&mut tape, &refs, false)?;
        let h = self.head_output(&mut tape, tokens, e_ins, &mut Dropout::off())?;
        let h = tape.value(h);
        if !h.all_finite() {
            return Err(Error::NonFinite(format!("head output for trial {}", trial.trial_id)));
        }
        Ok(h.data().to_vec())
    }

    /// Classifies `h` against the bank, or through the dataset classifier
    /// under the cross-entropy objective.
    pub fn classify(&self, h: &[f64], dataset: &str, bank: &PrototypeBank) -> Result<Prediction> {
        match self.instruct.config.objective {
            Objective::Cosine => crate::instruct::predict(h, bank),
            Objective::CrossEntropy => {
                let lin = self
                    .instruct
                    .classifier(dataset)
                    .ok_or_else(|| Error::MissingCatalog(dataset.to_string()))?;
                let mut tape = Tape::new(&self.store);
                let hv = tape.constant(Matrix::row_vector(h.to_vec()));
                let logits = lin.forward(&mut tape, hv);
                crate::instruct::predict_logits(tape.value(logits).data(), bank)
            }
        }
    }
}

/// Tag written into checkpoints for the decoder and transformer
/// nonlinearity.
pub const NONLINEARITY_TAG: &str = "gelu_tanh";
/// Tag for the tokenizer layout.
pub const TOKENIZER_TAG: &str = "spatial_temporal_bn_avgpool";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantTags {
    pub nonlinearity: String,
    pub tokenizer: String,
}

impl Default for VariantTags {
    fn default() -> Self {
        Self {
            nonlinearity: NONLINEARITY_TAG.into(),
            tokenizer: TOKENIZER_TAG.into(),
        }
    }
}
