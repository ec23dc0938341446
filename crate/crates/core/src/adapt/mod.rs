//! Training and adaptation engines.
//!
//! Pretraining fits every weight on the seen speakers. Padding adaptation then
//! fits only the rings of a [`UserPadding`], either from labels or from the
//! model's own confident predictions. Full finetuning, speaker codes and
//! speaker-adversarial training are provided as baselines.

mod finetune;
mod grl;
pub mod metrics;
mod optim;
mod pretrain;
mod speaker_code;
mod udp;

pub use finetune::{finetune_all, param_report, ParamReport};
pub use grl::{speaker_probe_accuracy, train_speaker_invariant, SpeakerClassifier};
pub use metrics::{MetricRecord, MetricsWriter};
pub use optim::{AdamWConfig, OptimState};
pub use pretrain::{pretrain, TrainReport};
pub use speaker_code::{adapt_speaker_code, train_adapter, SpeakerCodeAdapter};
pub use udp::{adapt_self_training, adapt_supervised, AdaptReport, SelfTrainReport};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::{
    beam_confidence, beam_decode, class_confidence, ctc_loss_batch, word_error_rate,
};
use crate::model::{stack_clips, NormUse, RecognizerModel, Task};
use crate::padding::UserPadding;
use crate::synthdata::{Clip, Label};
use crate::tensor::{Graph, Tensor, Var};

/// Loop settings shared by every trainer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub optimizer: AdamWConfig,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a lower mean loss; `0` disables.
    pub patience: usize,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl TrainOptions {
    pub fn pretrain() -> Self {
        TrainOptions {
            optimizer: AdamWConfig::pretrain(),
            max_epochs: 12,
            batch_size: 16,
            patience: 0,
            seed: 0,
            exec: Exec::default(),
        }
    }

    /// Padding adaptation defaults (these epoch and batch values are not from the method itself).
    pub fn adaptation() -> Self {
        TrainOptions {
            optimizer: AdamWConfig::padding(),
            max_epochs: 15,
            batch_size: 10,
            patience: 5,
            seed: 0,
            exec: Exec::default(),
        }
    }

    /// Full-model finetuning: adaptation loop with the pretraining optimizer.
    pub fn finetune() -> Self {
        TrainOptions {
            optimizer: AdamWConfig::pretrain(),
            ..Self::adaptation()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Seeded mini-batches of indices into `n` items.
pub(crate) fn batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    idx.shuffle(&mut rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Task loss of model outputs `out` against the clips' labels.
pub(crate) fn task_loss(g: &mut Graph, task: Task, out: Var, labels: &[&Label]) -> Result<Var> {
    match task {
        Task::Classification => {
            let targets: Vec<usize> = labels
                .iter()
                .map(|l| {
                    l.class().ok_or_else(|| {
                        Error::Contract("sequence label on a classification model".into())
                    })
                })
                .collect::<Result<_>>()?;
            g.cross_entropy(out, &targets)
        }
        Task::CtcSequence => {
            let targets: Vec<Vec<usize>> = labels.iter().map(|l| l.tokens()).collect();
            ctc_loss_batch(g, out, &targets)
        }
    }
}

pub(crate) fn frames_of(clips: &[&Clip]) -> Result<Tensor> {
    let t: Vec<&Tensor> = clips.iter().map(|c| &c.frames).collect();
    stack_clips(&t)
}

pub(crate) fn check_loss(
    g: &Graph,
    loss: Var,
    what: &str,
    epoch: usize,
    step: usize,
) -> Result<f64> {
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!(
            "{what} diverged: loss {v} at epoch {epoch}, step {step}"
        )));
    }
    Ok(v)
}

/// Epoch-loss bookkeeping for early stopping.
pub(crate) struct Plateau {
    best: f64,
    since: usize,
    patience: usize,
}

impl Plateau {
    pub fn new(patience: usize) -> Self {
        Plateau {
            best: f64::INFINITY,
            since: 0,
            patience,
        }
    }

    /// Records an epoch loss; returns `(improved, stop)`.
    pub fn observe(&mut self, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.since = 0;
            (true, false)
        } else {
            self.since += 1;
            (false, self.patience > 0 && self.since >= self.patience)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub beam_width: usize,
    pub batch_size: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            beam_width: 100,
            batch_size: 50,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: Label,
    /// Max class probability, or the top beam's share of the final beam mass.
    pub confidence: f64,
}

/// Decodes every clip; classification takes the argmax class, sequences the top beam.
pub fn predict(
    model: &RecognizerModel,
    clips: &[&Clip],
    padding: Option<&UserPadding>,
    opts: &EvalOptions,
) -> Result<Vec<Prediction>> {
    if clips.is_empty() {
        return Ok(Vec::new());
    }
    let chunks: Vec<&[&Clip]> = clips.chunks(opts.batch_size.max(1)).collect();
    let outs = opts.exec.map(&chunks, |chunk| -> Result<Vec<Prediction>> {
        let frames: Vec<&Tensor> = chunk.iter().map(|c| &c.frames).collect();
        let out = model.forward_batch(&frames, padding, Exec::Sequential)?;
        decode_outputs(model.config().task, &out, opts.beam_width)
    });
    let mut all = Vec::with_capacity(clips.len());
    for o in outs {
        all.extend(o?);
    }
    Ok(all)
}

/// Turns batched model outputs into predictions.
pub fn decode_outputs(task: Task, out: &Tensor, beam_width: usize) -> Result<Vec<Prediction>> {
    let n = out.shape()[0];
    let per = out.numel() / n.max(1);
    let s = out.shape();
    out.data()
        .chunks(per)
        .map(|row| match task {
            Task::Classification => {
                let (c, p) = class_confidence(row);
                Ok(Prediction {
                    label: Label::Class(c),
                    confidence: p,
                })
            }
            Task::CtcSequence => {
                let lp = Tensor::new(&s[1..], row.to_vec())?;
                let beams = beam_decode(&lp, beam_width);
                Ok(Prediction {
                    label: Label::Seq(beams[0].prefix.clone()),
                    confidence: beam_confidence(&beams),
                })
            }
        })
        .collect()
}

/// Accuracy in percent: class accuracy, or word accuracy `100 (1 - WER)` for sequences.
pub fn accuracy_of(predictions: &[Prediction], clips: &[&Clip]) -> f64 {
    if clips.is_empty() {
        return 0.0;
    }
    match predictions.first().map(|p| &p.label) {
        Some(Label::Seq(_)) => {
            let pairs: Vec<(Vec<usize>, Vec<usize>)> = predictions
                .iter()
                .zip(clips)
                .map(|(p, c)| (p.label.tokens(), c.label.tokens()))
                .collect();
            100.0 * (1.0 - word_error_rate(&pairs))
        }
        _ => {
            let hits = predictions
                .iter()
                .zip(clips)
                .filter(|(p, c)| p.label == c.label)
                .count();
            100.0 * hits as f64 / clips.len() as f64
        }
    }
}

pub fn evaluate(
    model: &RecognizerModel,
    clips: &[&Clip],
    padding: Option<&UserPadding>,
    opts: &EvalOptions,
) -> Result<f64> {
    Ok(accuracy_of(&predict(model, clips, padding, opts)?, clips))
}

/// Word error rate in percent over sequence clips.
pub fn word_error_percent(predictions: &[Prediction], clips: &[&Clip]) -> f64 {
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = predictions
        .iter()
        .zip(clips)
        .map(|(p, c)| (p.label.tokens(), c.label.tokens()))
        .collect();
    100.0 * word_error_rate(&pairs)
}

/// Frozen front-end features `[N, T, C]` of every clip (running statistics, no padding).
pub fn frontend_features(model: &RecognizerModel, clips: &[&Clip], exec: Exec) -> Result<Tensor> {
    let chunks: Vec<&[&Clip]> = clips.chunks(50).collect();
    let parts = exec.map(&chunks, |chunk| -> Result<Tensor> {
        let mut g = Graph::with_exec(Exec::Sequential);
        let p = model.bind(&mut g, false);
        let x = g.constant(frames_of(chunk)?);
        let fe = model.frontend(&mut g, &p, x, chunk.len(), None, NormUse::Running)?;
        Ok(g.value(fe.features).clone())
    });
    let mut data = Vec::new();
    let mut shape = vec![0, 0, 0];
    for part in parts {
        let part = part?;
        shape[1] = part.shape()[1];
        shape[2] = part.shape()[2];
        shape[0] += part.shape()[0];
        data.extend_from_slice(part.data());
    }
    Tensor::new(&shape, data)
}
