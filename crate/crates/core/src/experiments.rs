//! Adaptation sweeps over speakers, budgets and folds.
//!
//! Each (speaker, budget, fold, method) cell is an independent job with its own
//! seed, so results do not depend on the execution policy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapt::{
    accuracy_of, adapt_self_training, adapt_speaker_code, adapt_supervised, finetune_all, predict,
    word_error_percent, EvalOptions, MetricRecord, SpeakerCodeAdapter, TrainOptions,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{fnv1a64, RecognizerModel, Task};
use crate::padding::{init_padding, UserPadding};
use crate::synthdata::{budget_subset, AdaptBudget, BudgetMode, Clip, DataSplit, SynthConfig};

/// Every setting that determines an experiment's outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub preset_layers: usize,
    pub task: Task,
    pub data: SynthConfig,
    pub budgets: Vec<BudgetMode>,
    pub folds: usize,
    pub seed: u64,
    pub threshold: Option<f64>,
    pub adapt: TrainOptions,
    pub finetune: TrainOptions,
    pub paths: BTreeMap<String, String>,
}

impl RunConfig {
    /// JSON with sorted keys.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_value(self)?.to_string())
    }

    pub fn run_id(&self) -> Result<String> {
        Ok(format!(
            "{:016x}",
            fnv1a64(self.canonical_json()?.as_bytes())
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Udp,
    Finetune,
    SpeakerCode,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Udp => "udp",
            Method::Finetune => "finetune",
            Method::SpeakerCode => "speaker_code",
        }
    }
}

pub struct Sweep<'a> {
    pub config: &'a RunConfig,
    pub methods: Vec<Method>,
    /// Required by [`Method::SpeakerCode`].
    pub adapter: Option<&'a SpeakerCodeAdapter>,
    pub eval: EvalOptions,
    /// Prefix for method names in the records, e.g. the padded layer count.
    pub tag: String,
}

struct Job<'s> {
    speaker: &'s str,
    budget: Option<BudgetMode>,
    fold: usize,
    method: Method,
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    fnv1a64(format!("{seed}/{fold}").as_bytes())
}

/// Accuracy of `model` on `clips` and, for sequences, word error rate.
fn score(
    task: Task,
    clips: &[&Clip],
    padding: Option<&UserPadding>,
    model: &RecognizerModel,
    eval: &EvalOptions,
) -> Result<Vec<(&'static str, f64)>> {
    let preds = predict(model, clips, padding, eval)?;
    let mut out = vec![("accuracy", accuracy_of(&preds, clips))];
    if task == Task::CtcSequence {
        out.push(("wer", word_error_percent(&preds, clips)));
    }
    Ok(out)
}

impl Sweep<'_> {
    /// Runs every method on every speaker, budget and fold; a single baseline
    /// record set per speaker.
    pub fn run(
        &self,
        model: &RecognizerModel,
        split: &DataSplit,
        speakers: &[String],
        exec: Exec,
    ) -> Result<Vec<MetricRecord>> {
        let cfg = self.config;
        if self.methods.contains(&Method::SpeakerCode) && self.adapter.is_none() {
            return Err(Error::Contract(
                "speaker-code sweep needs a trained adapter".into(),
            ));
        }
        let mut jobs = Vec::new();
        for s in speakers {
            split.speaker(s)?;
            for &method in &self.methods {
                if method == Method::Baseline {
                    jobs.push(Job {
                        speaker: s,
                        budget: None,
                        fold: 0,
                        method,
                    });
                    continue;
                }
                for &b in &cfg.budgets {
                    for fold in 0..cfg.folds {
                        jobs.push(Job {
                            speaker: s,
                            budget: Some(b),
                            fold,
                            method,
                        });
                    }
                }
            }
        }
        let run_id = cfg.run_id()?;
        let inner = EvalOptions {
            exec: Exec::Sequential,
            ..self.eval
        };
        let results = exec.map(&jobs, |job| -> Result<Vec<MetricRecord>> {
            let h = split.speaker(job.speaker)?;
            let test: Vec<&Clip> = h.test.iter().collect();
            let seed = fold_seed(cfg.seed, job.fold);
            let (label, scores) = match job.budget {
                None => (
                    "none".to_string(),
                    score(model.config().task, &test, None, model, &inner)?,
                ),
                Some(mode) => {
                    let budget = AdaptBudget::new(mode, cfg.seed, cfg.folds);
                    let subset = budget_subset(split, job.speaker, &budget, job.fold)?;
                    let scores = match job.method {
                        Method::Udp => {
                            let opts = TrainOptions {
                                exec: Exec::Sequential,
                                ..cfg.adapt
                            }
                            .with_seed(seed);
                            let (p, _) = adapt_supervised(
                                model,
                                &init_padding(model, job.speaker),
                                &subset,
                                &opts,
                            )?;
                            score(model.config().task, &test, Some(&p), model, &inner)?
                        }
                        Method::Finetune => {
                            let opts = TrainOptions {
                                exec: Exec::Sequential,
                                ..cfg.finetune
                            }
                            .with_seed(seed);
                            let (m, _) = finetune_all(model, &subset, &opts)?;
                            score(model.config().task, &test, None, &m, &inner)?
                        }
                        Method::SpeakerCode => {
                            let adapter = self.adapter.expect("checked above");
                            let opts = TrainOptions {
                                exec: Exec::Sequential,
                                ..cfg.adapt
                            }
                            .with_seed(seed);
                            let (code, _) = adapt_speaker_code(model, adapter, &subset, &opts)?;
                            let preds = adapter.predict(model, &test, &code, &inner)?;
                            let mut s = vec![("accuracy", accuracy_of(&preds, &test))];
                            if model.config().task == Task::CtcSequence {
                                s.push(("wer", word_error_percent(&preds, &test)));
                            }
                            s
                        }
                        Method::Baseline => unreachable!("baseline jobs carry no budget"),
                    };
                    (budget.label(), scores)
                }
            };
            Ok(scores
                .into_iter()
                .map(|(name, value)| MetricRecord {
                    run_id: run_id.clone(),
                    method: format!("{}{}", self.tag, job.method.name()),
                    speaker: job.speaker.to_string(),
                    budget: label.clone(),
                    fold: job.fold,
                    seed,
                    metric_name: name.to_string(),
                    value,
                    config: serde_json::to_value(cfg).unwrap_or_default(),
                })
                .collect())
        });
        let mut out = Vec::new();
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

/// Mean of `metric` per (method, budget), averaged over speakers and folds.
pub fn summarize(records: &[MetricRecord], metric: &str) -> BTreeMap<(String, String), f64> {
    let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.metric_name == metric) {
        let e = acc.entry((r.method.clone(), r.budget.clone())).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

/// Plain-text table of `metric` by speaker, budget and method.
pub fn render_table(records: &[MetricRecord], metric: &str) -> String {
    let mut cells: BTreeMap<(String, String, String), (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.metric_name == metric) {
        let e = cells
            .entry((r.speaker.clone(), r.budget.clone(), r.method.clone()))
            .or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    let mut s = format!(
        "{:<10} {:<8} {:<16} {:>8} {:>6}\n",
        "speaker", "budget", "method", metric, "folds"
    );
    for ((spk, b, m), (sum, n)) in cells {
        let _ = writeln!(s, "{spk:<10} {b:<8} {m:<16} {:>8.2} {n:>6}", sum / n as f64);
    }
    s
}

/// Mean accuracy for each padded-layer count (rows) and budget (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub layers: Vec<usize>,
    pub budgets: Vec<String>,
    pub accuracy: Vec<Vec<f64>>,
}

impl AblationGrid {
    pub fn row_nondecreasing(&self, row: usize) -> bool {
        self.accuracy[row].windows(2).all(|w| w[0] <= w[1])
    }

    pub fn max(&self) -> f64 {
        self.accuracy
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<8}", "layers");
        for b in &self.budgets {
            let _ = write!(s, " {b:>8}");
        }
        s.push('\n');
        for (n, row) in self.layers.iter().zip(&self.accuracy) {
            let _ = write!(s, "{n:<8}");
            for v in row {
                let _ = write!(s, " {v:>8.2}");
            }
            s.push('\n');
        }
        s
    }
}

/// Padding adaptation with rings on the first `n` convolutions, for each `n` in `layers`.
pub fn ablate_layers(
    model: &RecognizerModel,
    split: &DataSplit,
    speakers: &[String],
    layers: &[usize],
    config: &RunConfig,
    eval: EvalOptions,
    exec: Exec,
) -> Result<(AblationGrid, Vec<MetricRecord>)> {
    let mut records = Vec::new();
    let mut grid = AblationGrid {
        layers: layers.to_vec(),
        budgets: config
            .budgets
            .iter()
            .map(|&b| AdaptBudget::new(b, config.seed, config.folds).label())
            .collect(),
        accuracy: Vec::new(),
    };
    for &n in layers {
        let variant = model.with_udp_prefix(n)?;
        let sweep = Sweep {
            config,
            methods: vec![Method::Udp],
            adapter: None,
            eval,
            tag: format!("{n}layers_"),
        };
        let recs = sweep.run(&variant, split, speakers, exec)?;
        let means = summarize(&recs, "accuracy");
        grid.accuracy.push(
            grid.budgets
                .iter()
                .map(|b| means[&(format!("{n}layers_udp"), b.clone())])
                .collect(),
        );
        records.extend(recs);
    }
    Ok((grid, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainOutcome {
    pub speaker: String,
    pub baseline: f64,
    pub adapted: f64,
    pub pseudo_labels: usize,
    pub precision: Option<f64>,
    pub precision_unfiltered: Option<f64>,
}

/// Transductive self-training: every clip of the speaker is pseudo-labeled
/// with labels withheld, and the same clips are scored.
#[allow(clippy::too_many_arguments)]
pub fn self_training_eval(
    model: &RecognizerModel,
    split: &DataSplit,
    speakers: &[String],
    threshold: f64,
    rounds: usize,
    opts: &TrainOptions,
    eval: EvalOptions,
    exec: Exec,
) -> Result<Vec<SelfTrainOutcome>> {
    let inner = EvalOptions {
        exec: Exec::Sequential,
        ..eval
    };
    let out = exec.map(speakers, |s| -> Result<SelfTrainOutcome> {
        let h = split.speaker(s)?;
        let pool: Vec<&Clip> = h.adapt.iter().chain(&h.test).collect();
        let test = &pool;
        let o = TrainOptions {
            exec: Exec::Sequential,
            ..*opts
        };
        let (p, rep) = adapt_self_training(
            model,
            &init_padding(model, s),
            &pool,
            threshold,
            rounds,
            &o,
            &inner,
        )?;
        let first = rep.rounds.first().cloned().unwrap_or_default();
        Ok(SelfTrainOutcome {
            speaker: s.clone(),
            baseline: accuracy_of(&predict(model, test, None, &inner)?, test),
            adapted: accuracy_of(&predict(model, test, Some(&p), &inner)?, test),
            pseudo_labels: first.pseudo_labels,
            precision: first.precision,
            precision_unfiltered: first.precision_unfiltered,
        })
    });
    out.into_iter().collect()
}
