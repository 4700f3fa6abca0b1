//! Classification metrics, instruction-level evaluation, embedding dumps and
//! the end-to-end synthetic experiment.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{load_corpus, split_corpus};
use crate::instruct::{Catalog, InstructionLevel, TaskSet};
use crate::model::{Model, PreparedTrial};
use crate::signal::Montage65;
use crate::textembed::Embedder;
use crate::train::{run_pretrain, run_tune, Checkpoint, RunOptions};
use crate::{Error, Result};

/// Counts indexed `[true][predicted]` in class order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new<S: AsRef<str>>(y_true: &[S], y_pred: &[S], classes: &[String]) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::invalid(format!(
                "{} true labels but {} predictions",
                y_true.len(),
                y_pred.len()
            )));
        }
        if y_true.is_empty() {
            return Err(Error::invalid("metrics need at least one sample"));
        }
        let index = |s: &str| classes.iter().position(|c| c == s).ok_or_else(|| Error::MissingLabel(s.to_string()));
        let mut counts = vec![vec![0; classes.len()]; classes.len()];
        for (t, p) in y_true.iter().zip(y_pred) {
            counts[index(t.as_ref())?][index(p.as_ref())?] += 1;
        }
        Ok(Self {
            classes: classes.to_vec(),
            counts,
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> usize {
        self.counts[class].iter().sum()
    }

    /// Recall per class; `None` for classes absent from `y_true`.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        (0..self.classes.len())
            .map(|c| {
                let n = self.support(c);
                (n > 0).then(|| self.counts[c][c] as f64 / n as f64)
            })
            .collect()
    }

    /// Mean recall over classes with nonzero support.
    pub fn balanced_accuracy(&self) -> f64 {
        let r: Vec<f64> = self.recalls().into_iter().flatten().collect();
        r.iter().sum::<f64>() / r.len() as f64
    }

    pub fn kappa(&self) -> Kappa {
        let n = self.total() as f64;
        let k = self.classes.len();
        let p_o = (0..k).map(|c| self.counts[c][c]).sum::<usize>() as f64 / n;
        let p_e = (0..k)
            .map(|c| {
                let row = self.support(c) as f64;
                let col = (0..k).map(|r| self.counts[r][c]).sum::<usize>() as f64;
                row * col
            })
            .sum::<f64>()
            / (n * n);
        if p_e >= 1.0 {
            Kappa {
                value: 0.0,
                degenerate: true,
            }
        } else {
            Kappa {
                value: (p_o - p_e) / (1.0 - p_e),
                degenerate: false,
            }
        }
    }
}

/// Cohen's kappa. `degenerate` marks `p_e = 1`, where the value is
/// defined as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    pub degenerate: bool,
}

pub fn balanced_accuracy<S: AsRef<str>>(y_true: &[S], y_pred: &[S], classes: &[String]) -> Result<f64> {
    Ok(ConfusionMatrix::new(y_true, y_pred, classes)?.balanced_accuracy())
}

pub fn cohens_kappa<S: AsRef<str>>(y_true: &[S], y_pred: &[S], classes: &[String]) -> Result<Kappa> {
    Ok(ConfusionMatrix::new(y_true, y_pred, classes)?.kappa())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub level: InstructionLevel,
    pub balanced_accuracy: f64,
    pub kappa: f64,
    pub kappa_degenerate: bool,
    pub recalls: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn from_predictions(dataset: &str, level: InstructionLevel, y_true: &[String], y_pred: &[String], classes: &[String]) -> Result<Self> {
        let confusion = ConfusionMatrix::new(y_true, y_pred, classes)?;
        let kappa = confusion.kappa();
        if kappa.degenerate {
            log::warn!("{dataset}/{level}: chance agreement is 1, kappa reported as 0");
        }
        Ok(Self {
            dataset: dataset.to_string(),
            level,
            balanced_accuracy: confusion.balanced_accuracy(),
            kappa: kappa.value,
            kappa_degenerate: kappa.degenerate,
            recalls: confusion.recalls(),
            n_samples: confusion.total(),
            confusion,
        })
    }
}

pub fn reports_to_json(reports: &[EvalReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)?)
}

/// One summary row per report.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("dataset,level,n_samples,balanced_accuracy,kappa,kappa_degenerate\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.dataset, r.level, r.n_samples, r.balanced_accuracy, r.kappa, r.kappa_degenerate
        );
    }
    out
}

/// Test trials grouped by dataset tag, in first-appearance order.
fn by_dataset(trials: &[PreparedTrial]) -> Result<Vec<(&str, Vec<&PreparedTrial>)>> {
    let mut groups: Vec<(&str, Vec<&PreparedTrial>)> = Vec::new();
    for t in trials {
        let d = t
            .dataset
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("trial {} has no dataset tag", t.trial_id)))?;
        match groups.iter_mut().find(|(k, _)| *k == d) {
            Some((_, v)) => v.push(t),
            None => groups.push((d, vec![t])),
        }
    }
    Ok(groups)
}

/// Scores every labelled trial under each level against its dataset's
/// prototypes. Only the instruction vector changes between levels.
pub fn evaluate_instruction_levels(
    model: &Model,
    tasks: &TaskSet,
    test: &[PreparedTrial],
    levels: &[InstructionLevel],
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    for (dataset, trials) in by_dataset(test)? {
        let binding = tasks.get(dataset)?;
        let y_true = trials
            .iter()
            .map(|t| {
                t.label
                    .clone()
                    .ok_or_else(|| Error::invalid(format!("trial {} has no label", t.trial_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        for &level in levels {
            let e = binding.instruction(level);
            let y_pred = trials
                .par_iter()
                .map(|t| {
                    let h = model.embed_trial(t, e)?;
                    Ok(model.classify(&h, dataset, &binding.bank)?.class)
                })
                .collect::<Result<Vec<_>>>()?;
            reports.push(EvalReport::from_predictions(dataset, level, &y_true, &y_pred, &binding.bank.classes)?);
        }
    }
    Ok(reports)
}

/// CSV of head outputs: one row per trial and level, then one row per
/// prototype (`level` = `prototype`). Values use 9 significant digits.
pub fn embeddings_csv(model: &Model, tasks: &TaskSet, trials: &[PreparedTrial], levels: &[InstructionLevel]) -> Result<String> {
    let k = model.instruct.config.text_dim;
    let mut out = String::from("id,label,level");
    for i in 0..k {
        let _ = write!(out, ",h{i}");
    }
    out.push('\n');
    let push_row = |out: &mut String, id: &str, label: &str, level: &str, v: &[f64]| {
        out.push_str(&format!("{id},{label},{level}"));
        for x in v {
            let _ = write!(out, ",{x:.8e}");
        }
        out.push('\n');
    };
    for &level in levels {
        let rows = trials
            .par_iter()
            .map(|t| {
                let dataset = t
                    .dataset
                    .as_deref()
                    .ok_or_else(|| Error::invalid(format!("trial {} has no dataset tag", t.trial_id)))?;
                model.embed_trial(t, tasks.get(dataset)?.instruction(level))
            })
            .collect::<Result<Vec<_>>>()?;
        for (t, h) in trials.iter().zip(rows) {
            push_row(&mut out, &t.trial_id, t.label.as_deref().unwrap_or(""), level.as_str(), &h);
        }
    }
    let mut seen = Vec::new();
    for t in trials {
        let Some(d) = t.dataset.as_deref() else { continue };
        if seen.contains(&d) {
            continue;
        }
        seen.push(d);
        let bank = &tasks.get(d)?.bank;
        for (c, class) in bank.classes.iter().enumerate() {
            push_row(&mut out, &format!("prototype:{d}"), class, "prototype", bank.vectors.row(c));
        }
    }
    Ok(out)
}

pub fn dump_embeddings(
    model: &Model,
    tasks: &TaskSet,
    trials: &[PreparedTrial],
    levels: &[InstructionLevel],
    path: &Path,
) -> Result<()> {
    let csv = embeddings_csv(model, tasks, trials, levels)?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}

/// Prepared splits of the configured corpus.
pub struct PreparedSplit {
    pub train: Vec<PreparedTrial>,
    pub val: Vec<PreparedTrial>,
    pub test: Vec<PreparedTrial>,
}

/// Loads or synthesizes the `[data]` corpus with `seed`, splits it and
/// preprocesses every trial.
pub fn prepare_corpus(config: &RunConfig, seed: u64) -> Result<PreparedSplit> {
    let raw = load_corpus(&config.data, config.signal.target_rate, seed)?;
    let split = split_corpus(&raw, &config.data.split_plan())?;
    let model = Model::new(config, seed)?;
    let montage = Montage65::standard();
    Ok(PreparedSplit {
        train: model.prepare_all(&split.train, &montage, &config.signal)?,
        val: model.prepare_all(&split.val, &montage, &config.signal)?,
        test: model.prepare_all(&split.test, &montage, &config.signal)?,
    })
}

/// Dataset tags of the trials, in first-appearance order.
pub fn datasets_of(trials: &[PreparedTrial]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for d in trials.iter().filter_map(|t| t.dataset.as_ref()) {
        if !out.contains(d) {
            out.push(d.clone());
        }
    }
    out
}

pub struct Experiment {
    pub pretrained: Checkpoint,
    pub tuned: Checkpoint,
    pub reports: Vec<EvalReport>,
}

impl Experiment {
    pub fn report(&self, dataset: &str, level: InstructionLevel) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.dataset == dataset && r.level == level)
    }
}

/// Synthesize, pretrain, tune and evaluate at every instruction level, all
/// under one seed and with pseudo text embeddings.
pub fn run_experiment(config: &RunConfig, seed: u64) -> Result<Experiment> {
    let mut config = config.clone();
    config.train.seed = seed;
    let data = prepare_corpus(&config, seed)?;
    let pretrained = run_pretrain(&data.train, &data.val, &config, RunOptions::default())?;
    let embedder = Embedder::pseudo(config.train.text_seed, config.instruct.text_dim);
    let tasks = TaskSet::build(&datasets_of(&data.train), &Catalog::bundled(), &embedder)?;
    let tuned = run_tune(&data.train, &data.val, Some(&pretrained), &tasks, &config, RunOptions::default())?;
    let model = tuned.model()?;
    let reports = evaluate_instruction_levels(&model, &tasks, &data.test, &InstructionLevel::ALL)?;
    Ok(Experiment {
        pretrained,
        tuned,
        reports,
    })
}
