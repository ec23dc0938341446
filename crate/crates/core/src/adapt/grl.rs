use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::pretrain::{pretrain_with, AuxObjective};
use super::{frontend_features, AdamWConfig, OptimState, TrainOptions, TrainReport};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::RecognizerModel;
use crate::synthdata::Clip;
use crate::tensor::{Graph, Tensor, Var};

/// Linear speaker classifier over time-pooled front-end features.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerClassifier {
    pub speakers: Vec<String>,
    /// `[S, C]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl SpeakerClassifier {
    fn new(speakers: Vec<String>, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, (1.0 / channels as f64).sqrt()).expect("finite std");
        let s = speakers.len();
        SpeakerClassifier {
            weight: Tensor::new(
                &[s, channels],
                (0..s * channels).map(|_| d.sample(&mut rng)).collect(),
            )
            .expect("shape"),
            bias: Tensor::zeros(&[s]),
            speakers,
        }
    }

    fn index(&self, id: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::Contract(format!("clip from unknown training speaker '{id}'")))
    }
}

struct Adversary {
    clf: SpeakerClassifier,
    state: OptimState,
    grl_weight: f64,
    vars: Option<(Var, Var)>,
}

impl AuxObjective for Adversary {
    fn loss(&mut self, g: &mut Graph, features: Var, clips: &[&Clip]) -> Result<Option<Var>> {
        let targets: Vec<usize> = clips
            .iter()
            .map(|c| self.clf.index(&c.speaker_id))
            .collect::<Result<_>>()?;
        let pooled = g.time_mean(features)?;
        let reversed = g.grad_reverse(pooled, self.grl_weight)?;
        let w = g.param(self.clf.weight.clone());
        let b = g.param(self.clf.bias.clone());
        self.vars = Some((w, b));
        let logits = g.linear(reversed, w, Some(b))?;
        Ok(Some(g.cross_entropy(logits, &targets)?))
    }

    fn step(&mut self, g: &Graph) -> Result<()> {
        let (w, b) = self.vars.take().expect("loss precedes step");
        self.state.update(
            &mut [&mut self.clf.weight, &mut self.clf.bias],
            &[g.grad(w), g.grad(b)],
        )
    }
}

/// Pretraining with an auxiliary speaker classifier whose gradient reaches the
/// front-end negated and scaled by `grl_weight`.
pub fn train_speaker_invariant(
    model: &mut RecognizerModel,
    train: &[&Clip],
    grl_weight: f64,
    opts: &TrainOptions,
) -> Result<(TrainReport, SpeakerClassifier)> {
    let mut speakers: Vec<String> = train.iter().map(|c| c.speaker_id.clone()).collect();
    speakers.sort();
    speakers.dedup();
    if speakers.len() < 2 {
        return Err(Error::Contract(
            "speaker-invariant training needs at least two speakers".into(),
        ));
    }
    let channels = model.config().convs.last().map_or(0, |c| c.out_channels);
    let clf = SpeakerClassifier::new(speakers, channels, opts.seed ^ 0x5eed_5bea_0000_0001);
    let state = OptimState::new(opts.optimizer, &[&clf.weight, &clf.bias]);
    let mut adv = Adversary {
        clf,
        state,
        grl_weight,
        vars: None,
    };
    let report = pretrain_with(model, train, opts, &mut adv)?;
    Ok((report, adv.clf))
}

/// Accuracy (percent) of a linear probe predicting the speaker from frozen,
/// time-pooled front-end features; fit on `train`, scored on `test`.
pub fn speaker_probe_accuracy(
    model: &RecognizerModel,
    train: &[&Clip],
    test: &[&Clip],
    steps: usize,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    let mut speakers: Vec<String> = train.iter().map(|c| c.speaker_id.clone()).collect();
    speakers.sort();
    speakers.dedup();
    let pooled = |clips: &[&Clip]| -> Result<Tensor> {
        let f = frontend_features(model, clips, exec)?;
        let mut g = Graph::new();
        let v = g.constant(f);
        let p = g.time_mean(v)?;
        Ok(g.value(p).clone())
    };
    let (xtr, xte) = (pooled(train)?, pooled(test)?);
    let c = xtr.shape()[1];
    let n = xtr.shape()[0];
    let mut mean = vec![0.0; c];
    let mut sd = vec![0.0; c];
    for row in xtr.data().chunks(c) {
        for j in 0..c {
            mean[j] += row[j] / n as f64;
        }
    }
    for row in xtr.data().chunks(c) {
        for j in 0..c {
            sd[j] += (row[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let standardize = |x: &Tensor| -> Tensor {
        let d = x
            .data()
            .chunks(c)
            .flat_map(|row| {
                (0..c)
                    .map(|j| (row[j] - mean[j]) / (sd[j].sqrt() + 1e-6))
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(x.shape(), d).expect("shape")
    };
    let (xtr, xte) = (standardize(&xtr), standardize(&xte));
    let label = |clips: &[&Clip]| -> Vec<Option<usize>> {
        clips
            .iter()
            .map(|c| speakers.iter().position(|s| *s == c.speaker_id))
            .collect()
    };
    let ytr: Vec<usize> = label(train)
        .into_iter()
        .map(|y| y.expect("train speaker"))
        .collect();
    let mut clf = SpeakerClassifier::new(speakers.clone(), c, seed);
    let cfg = AdamWConfig {
        lr: 0.01,
        weight_decay: 0.0,
        ..AdamWConfig::pretrain()
    };
    let mut state = OptimState::new(cfg, &[&clf.weight, &clf.bias]);
    for _ in 0..steps {
        let mut g = Graph::new();
        let x = g.constant(xtr.clone());
        let w = g.param(clf.weight.clone());
        let b = g.param(clf.bias.clone());
        let logits = g.linear(x, w, Some(b))?;
        let loss = g.cross_entropy(logits, &ytr)?;
        g.backward(loss)?;
        state.update(
            &mut [&mut clf.weight, &mut clf.bias],
            &[g.grad(w), g.grad(b)],
        )?;
    }
    let mut g = Graph::new();
    let x = g.constant(xte);
    let w = g.constant(clf.weight.clone());
    let b = g.constant(clf.bias.clone());
    let logits = g.linear(x, w, Some(b))?;
    let s = clf.speakers.len();
    let yte = label(test);
    let hits = g
        .value(logits)
        .data()
        .chunks(s)
        .zip(&yte)
        .filter(|(row, y)| Some(crate::tensor::argmax(row)) == **y)
        .count();
    Ok(100.0 * hits as f64 / test.len().max(1) as f64)
}
