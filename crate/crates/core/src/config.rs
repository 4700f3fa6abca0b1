//! Run configuration: a TOML file with sections `[signal]`, `[tokenizer]`,
//! `[encoder]`, `[instruct]`, `[train]` and `[data]`. Every key is
//! optional; missing keys take their defaults.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::encoder::EncoderConfig;
use crate::instruct::InstructConfig;
use crate::signal::SignalConfig;
use crate::tokenizer::TokenizerConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub signal: SignalConfig,
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub instruct: InstructConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

pub const SECTIONS: [&str; 6] = ["signal", "tokenizer", "encoder", "instruct", "train", "data"];

/// `(section, key, description)` for every configuration key.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("signal", "target_rate", "resampling rate in Hz"),
    ("signal", "bandpass_lo", "band-pass lower edge in Hz"),
    ("signal", "bandpass_hi", "band-pass upper edge in Hz"),
    ("signal", "window_samples", "segment length in samples"),
    ("signal", "mask_cutoff_lo", "lowest frequency a spectral mask band may start at"),
    ("signal", "mask_cutoff_hi", "highest frequency a spectral mask band may end at"),
    ("signal", "mask_band_width", "width of the masked band in Hz"),
    ("signal", "data_scale", "multiplier from microvolts to model units"),
    ("tokenizer", "dim", "token width d, must equal encoder.dim"),
    ("tokenizer", "channels", "input channels (montage size)"),
    ("tokenizer", "temporal_kernel", "temporal convolution width"),
    ("tokenizer", "temporal_padding", "zero padding on each side in time"),
    ("tokenizer", "pool_width", "average-pooling width and stride"),
    ("tokenizer", "bn_eps", "batch-norm epsilon"),
    ("tokenizer", "bn_momentum", "running-statistics momentum"),
    ("encoder", "layers", "transformer blocks per branch"),
    ("encoder", "dim", "model width d"),
    ("encoder", "heads", "attention heads"),
    ("encoder", "ff_scale", "feed-forward width multiplier"),
    ("encoder", "dropout", "dropout probability"),
    ("encoder", "mask_ratio", "fraction of tokens replaced by the mask embedding"),
    ("encoder", "lambda_ctx", "weight of the masked reconstruction loss"),
    ("encoder", "lambda_cau", "weight of the next-slice loss"),
    ("encoder", "max_tokens", "length of the positional table"),
    ("encoder", "decoder_hidden", "hidden width of the reconstruction decoder"),
    ("instruct", "text_dim", "text embedding width k"),
    ("instruct", "queries", "learnable queries N_q"),
    ("instruct", "layers", "Q-Former layers"),
    ("instruct", "heads", "heads of the query self-attention"),
    ("instruct", "ff_scale", "Q-Former feed-forward width multiplier"),
    ("instruct", "query_self_attention", "self-attention among queries in each layer"),
    ("instruct", "objective", "cosine | cross_entropy"),
    ("instruct", "train_level", "instruction level used for tuning: none | task | task_and_targets"),
    ("train", "batch_size", "trials per optimizer step"),
    ("train", "peak_lr", "learning rate at the start of the cosine schedule"),
    ("train", "min_lr", "learning rate at the end of the cosine schedule"),
    ("train", "weight_decay", "decoupled weight decay"),
    ("train", "beta1", "AdamW first-moment decay"),
    ("train", "beta2", "AdamW second-moment decay"),
    ("train", "adam_eps", "AdamW denominator epsilon"),
    ("train", "pretrain_epochs", "epochs of reconstruction pretraining"),
    ("train", "tune_epochs", "epochs of instruction tuning"),
    ("train", "transformer_lr_scale", "learning-rate scale of transformer parameters during tuning"),
    ("train", "other_lr_scale", "learning-rate scale of all other parameters"),
    ("train", "seed", "run seed (overridden by --seed)"),
    ("train", "spectral_mask", "pretraining: perturb segments with a spectral band mask"),
    ("train", "random_mask", "pretraining: masked-token reconstruction in the bidirectional branch"),
    ("train", "causal_mask", "pretraining: next-slice prediction in the causal branch"),
    ("train", "grad_clip", "clip gradients to global norm grad_clip_norm"),
    ("train", "grad_clip_norm", "clipping threshold"),
    ("train", "freeze", "parameter groups excluded from updates during tuning"),
    ("train", "text_seed", "seed of pseudo text embeddings when no store is given"),
    ("data", "preset", "synthetic corpus: motor_imagery | emotion | mixed"),
    ("data", "corpus", "ETRIAL directory to read instead of synthesizing"),
    ("data", "default_dataset", "dataset tag for corpus trials without one"),
    ("data", "subjects", "synthetic subjects per dataset"),
    ("data", "trials_per_subject_per_class", "synthetic trials per subject and class"),
    ("data", "duration_s", "synthetic trial length in seconds"),
    ("data", "amplitude", "synthetic carrier amplitude in microvolts"),
    ("data", "noise_sigma", "synthetic white-noise standard deviation in microvolts"),
    ("data", "gain_min", "lower bound of the per-trial gain"),
    ("data", "gain_max", "upper bound of the per-trial gain"),
    ("data", "split", "cross_subject | multi_subject"),
    ("data", "test_subjects", "held-out subjects per dataset (0: use test_fraction)"),
    ("data", "test_fraction", "fraction of subjects held out when test_subjects = 0"),
    ("data", "val_fraction", "fraction of train/val subjects or trials used for validation"),
];

fn section_of<T: DeserializeOwned + Default>(root: &toml::Table, name: &str) -> Result<T> {
    match root.get(name) {
        None => Ok(T::default()),
        Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| Error::Config {
            section: name.into(),
            msg: e.message().to_string(),
        }),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            section: "<file>".into(),
            msg: e.message().to_string(),
        })?;
        let known = Self::default().to_table();
        for (section, body) in &root {
            let Some(known_keys) = known.get(section).and_then(|v| v.as_table()) else {
                return Err(Error::Config {
                    section: section.clone(),
                    msg: format!("unknown section (expected one of {})", SECTIONS.join(", ")),
                });
            };
            let Some(body) = body.as_table() else {
                return Err(Error::Config {
                    section: section.clone(),
                    msg: "must be a table".into(),
                });
            };
            for key in body.keys() {
                if !known_keys.contains_key(key) {
                    return Err(Error::Config {
                        section: section.clone(),
                        msg: format!("unknown key `{key}`"),
                    });
                }
            }
        }
        let cfg = Self {
            signal: section_of(&root, "signal")?,
            tokenizer: section_of(&root, "tokenizer")?,
            encoder: section_of(&root, "encoder")?,
            instruct: section_of(&root, "instruct")?,
            train: section_of(&root, "train")?,
            data: section_of(&root, "data")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes to a table")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        self.encoder.validate()?;
        self.instruct.validate(self.encoder.dim)?;
        self.train.validate()?;
        self.data.validate()?;
        let tok = &self.tokenizer;
        let bad = |section: &str, msg: String| Err(Error::Config { section: section.into(), msg });
        if tok.dim != self.encoder.dim {
            return bad("tokenizer", format!("dim {} differs from encoder.dim {}", tok.dim, self.encoder.dim));
        }
        if tok.channels != crate::signal::MONTAGE_CHANNELS {
            return bad("tokenizer", format!("channels must be {}", crate::signal::MONTAGE_CHANNELS));
        }
        if tok.pool_width == 0 || tok.temporal_kernel == 0 || tok.temporal_kernel > self.signal.window_samples + 2 * tok.temporal_padding {
            return bad("tokenizer", "kernel and pool widths must fit the window".into());
        }
        let per = tok.tokens_per_segment(self.signal.window_samples);
        if per == 0 || !self.signal.window_samples.is_multiple_of(per) {
            return bad(
                "tokenizer",
                format!("window of {} samples must split evenly into {per} token slices", self.signal.window_samples),
            );
        }
        if !(tok.bn_eps > 0.0) || !(0.0..=1.0).contains(&tok.bn_momentum) {
            return bad("tokenizer", "bn_eps must be > 0 and bn_momentum in [0, 1]".into());
        }
        Ok(())
    }

    /// Small model used by tests and the acceptance suite: d = 16, two
    /// layers per branch, two queries, 1 s trials.
    pub fn tiny() -> Self {
        let mut cfg = Self::default();
        cfg.tokenizer.dim = 16;
        cfg.encoder.dim = 16;
        cfg.encoder.layers = 2;
        cfg.encoder.heads = 2;
        cfg.encoder.ff_scale = 2;
        cfg.encoder.max_tokens = 64;
        cfg.encoder.decoder_hidden = 16;
        cfg.instruct.queries = 2;
        cfg.instruct.layers = 1;
        cfg.instruct.heads = 2;
        cfg.instruct.ff_scale = 2;
        cfg
    }

    /// Rendered key reference for `--help`.
    pub fn key_reference() -> String {
        let defaults = Self::default().to_table();
        let mut out = String::new();
        let mut current = "";
        for (section, key, doc) in CONFIG_KEYS {
            if *section != current {
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            let default = defaults[*section][*key].to_string();
            out.push_str(&format!("  {key} = {default}\n      {doc}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn documented_keys_match_schema() {
        let table = RunConfig::default().to_table();
        let schema: BTreeSet<(String, String)> = table
            .iter()
            .flat_map(|(s, v)| v.as_table().unwrap().keys().map(move |k| (s.clone(), k.clone())))
            .collect();
        let documented: BTreeSet<(String, String)> = CONFIG_KEYS.iter().map(|(s, k, _)| (s.to_string(), k.to_string())).collect();
        assert_eq!(schema, documented);
        assert_eq!(CONFIG_KEYS.len(), documented.len());
        let reference = RunConfig::key_reference();
        for (s, k, _) in CONFIG_KEYS {
            assert!(reference.contains(&format!("[{s}]")));
            assert!(reference.contains(&format!("  {k} = ")));
        }
    }

    #[test]
    fn unknown_keys_name_section_and_key() {
        match RunConfig::parse("[train]\npeak_lr = 0.01\nbogus = 1\n") {
            Err(Error::Config { section, msg }) => {
                assert_eq!(section, "train");
                assert!(msg.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("[nope]\nx = 1\n") {
            Err(Error::Config { section, .. }) => assert_eq!(section, "nope"),
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("[encoder]\nlayers = \"two\"\n") {
            Err(Error::Config { section, .. }) => assert_eq!(section, "encoder"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip_and_partial_files() {
        let cfg = RunConfig::parse("[train]\npeak_lr = 0.01\n[data]\npreset = \"mixed\"\n").unwrap();
        assert_eq!(cfg.train.peak_lr, 0.01);
        assert_eq!(cfg.data.preset, crate::data::Preset::Mixed);
        assert_eq!(cfg.encoder, EncoderConfig::default());
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        let tiny = RunConfig::tiny();
        assert_eq!(RunConfig::parse(&tiny.to_toml()).unwrap(), tiny);
    }

    #[test]
    fn cross_section_validation() {
        let err = RunConfig::parse("[tokenizer]\ndim = 32\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref section, .. } if section == "tokenizer"), "{err}");
        assert!(RunConfig::parse("[encoder]\nmask_ratio = 1.5\n").is_err());
    }
}
