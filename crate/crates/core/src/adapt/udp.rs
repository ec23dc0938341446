use serde::{Deserialize, Serialize};

use super::{
    batches, check_loss, frames_of, predict, task_loss, EvalOptions, OptimState, Plateau,
    TrainOptions,
};
use crate::error::{Error, Result};
use crate::losses::is_feasible;
use crate::model::{NormUse, RecognizerModel};
use crate::padding::UserPadding;
use crate::synthdata::{Clip, Label};
use crate::tensor::Graph;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub epoch_losses: Vec<f64>,
    /// Epoch whose rings were returned.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Fits the rings of `padding` on labeled clips; every model weight stays frozen.
///
/// Returns the rings from the epoch with the lowest mean adaptation loss.
pub fn adapt_supervised(
    model: &RecognizerModel,
    padding: &UserPadding,
    adapt: &[&Clip],
    opts: &TrainOptions,
) -> Result<(UserPadding, AdaptReport)> {
    padding.check_compatible(model)?;
    let mut current = padding.clone();
    let mut best = padding.clone();
    let mut report = AdaptReport::default();
    if adapt.is_empty() || opts.max_epochs == 0 {
        return Ok((best, report));
    }
    let ring_refs: Vec<_> = current.rings.iter().map(|(_, r)| r).collect();
    let mut state = OptimState::new(opts.optimizer, &ring_refs);
    let mut plateau = Plateau::new(opts.patience);
    for epoch in 0..opts.max_epochs {
        let mut total = 0.0;
        for (step, idx) in batches(adapt.len(), opts.batch_size, opts.seed, epoch)
            .iter()
            .enumerate()
        {
            let clips: Vec<&Clip> = idx.iter().map(|&i| adapt[i]).collect();
            let mut g = Graph::with_exec(opts.exec);
            let p = model.bind(&mut g, false);
            let rings = current.bind(&mut g);
            let x = g.constant(frames_of(&clips)?);
            let fe = model.frontend(&mut g, &p, x, clips.len(), Some(&rings), NormUse::Running)?;
            let out = model.backend(&mut g, &p, fe.features)?;
            let labels: Vec<_> = clips.iter().map(|c| &c.label).collect();
            let loss = task_loss(&mut g, model.config().task, out, &labels)?;
            total += check_loss(&g, loss, "padding adaptation", epoch, step)? * clips.len() as f64;
            g.backward(loss)?;
            let grads: Vec<_> = rings.iter().map(|&v| g.grad(v)).collect();
            let mut params: Vec<_> = current.rings.iter_mut().map(|(_, r)| r).collect();
            state.update(&mut params, &grads)?;
        }
        let mean = total / adapt.len() as f64;
        report.epoch_losses.push(mean);
        let (improved, stop) = plateau.observe(mean);
        if improved {
            best = current.clone();
            report.best_epoch = Some(epoch);
        }
        if stop {
            report.stopped_early = true;
            break;
        }
    }
    Ok((best, report))
}

/// A decoded sequence can only train CTC when it is non-empty and alignable.
fn usable(label: &Label, clip: &Clip) -> bool {
    match label {
        Label::Class(_) => true,
        Label::Seq(t) => !t.is_empty() && is_feasible(clip.frames.shape()[0], t),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainRound {
    pub candidates: usize,
    pub pseudo_labels: usize,
    /// Share of pseudo-labels equal to the hidden truth, when known.
    pub precision: Option<f64>,
    /// Same share over every prediction, ignoring the threshold.
    pub precision_unfiltered: Option<f64>,
    pub adapt: AdaptReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainReport {
    pub rounds: Vec<SelfTrainRound>,
}

/// Pseudo-labels `unlabeled` with the current padding, keeps predictions whose
/// confidence exceeds `threshold`, and adapts on them; repeated `rounds` times.
///
/// Clip labels are never used for training; they only feed the precision report.
pub fn adapt_self_training(
    model: &RecognizerModel,
    padding: &UserPadding,
    unlabeled: &[&Clip],
    threshold: f64,
    rounds: usize,
    opts: &TrainOptions,
    eval: &EvalOptions,
) -> Result<(UserPadding, SelfTrainReport)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Contract(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    padding.check_compatible(model)?;
    let mut current = padding.clone();
    let mut report = SelfTrainReport::default();
    for round in 0..rounds {
        let preds = predict(model, unlabeled, Some(&current), eval)?;
        let correct = |i: usize| preds[i].label == unlabeled[i].label;
        let kept: Vec<usize> = (0..preds.len())
            .filter(|&i| preds[i].confidence > threshold && usable(&preds[i].label, unlabeled[i]))
            .collect();
        let share = |idx: &[usize]| {
            (!idx.is_empty())
                .then(|| idx.iter().filter(|&&i| correct(i)).count() as f64 / idx.len() as f64)
        };
        let all: Vec<usize> = (0..preds.len()).collect();
        let mut r = SelfTrainRound {
            candidates: preds.len(),
            pseudo_labels: kept.len(),
            precision: share(&kept),
            precision_unfiltered: share(&all),
            adapt: AdaptReport::default(),
        };
        if kept.is_empty() {
            log::warn!(
                "self-training round {round}: no prediction above {threshold}; padding unchanged"
            );
            report.rounds.push(r);
            break;
        }
        let pseudo: Vec<Clip> = kept
            .iter()
            .map(|&i| Clip {
                frames: unlabeled[i].frames.clone(),
                label: preds[i].label.clone(),
                speaker_id: unlabeled[i].speaker_id.clone(),
            })
            .collect();
        let refs: Vec<&Clip> = pseudo.iter().collect();
        let round_opts = TrainOptions {
            seed: opts.seed.wrapping_add(round as u64),
            ..*opts
        };
        let (next, a) = adapt_supervised(model, &current, &refs, &round_opts)?;
        current = next;
        r.adapt = a;
        report.rounds.push(r);
    }
    Ok((current, report))
}
