use serde::{Deserialize, Serialize};

use super::{batches, check_loss, frames_of, task_loss, OptimState, TrainOptions};
use crate::error::Result;
use crate::model::{NormUse, RecognizerModel};
use crate::synthdata::Clip;
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean task loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Extra objective on the `[B, T, C]` front-end features during pretraining.
pub(crate) trait AuxObjective {
    fn loss(&mut self, g: &mut Graph, features: Var, clips: &[&Clip]) -> Result<Option<Var>>;
    /// Called once per step after the backward sweep.
    fn step(&mut self, g: &Graph) -> Result<()>;
}

struct NoAux;

impl AuxObjective for NoAux {
    fn loss(&mut self, _: &mut Graph, _: Var, _: &[&Clip]) -> Result<Option<Var>> {
        Ok(None)
    }

    fn step(&mut self, _: &Graph) -> Result<()> {
        Ok(())
    }
}

/// Fits every weight of `model` on `train` with zero padding.
pub fn pretrain(
    model: &mut RecognizerModel,
    train: &[&Clip],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    pretrain_with(model, train, opts, &mut NoAux)
}

pub(crate) fn pretrain_with(
    model: &mut RecognizerModel,
    train: &[&Clip],
    opts: &TrainOptions,
    aux: &mut dyn AuxObjective,
) -> Result<TrainReport> {
    let mut state = OptimState::new(opts.optimizer, &model.params());
    let mut report = TrainReport::default();
    for epoch in 0..opts.max_epochs {
        let mut total = 0.0;
        let order = batches(train.len(), opts.batch_size, opts.seed, epoch);
        for (step, idx) in order.iter().enumerate() {
            let clips: Vec<&Clip> = idx.iter().map(|&i| train[i]).collect();
            let mut g = Graph::with_exec(opts.exec);
            let p = model.bind(&mut g, true);
            let x = g.constant(frames_of(&clips)?);
            let fe = model.frontend(&mut g, &p, x, clips.len(), None, NormUse::Batch)?;
            let out = model.backend(&mut g, &p, fe.features)?;
            let labels: Vec<_> = clips.iter().map(|c| &c.label).collect();
            let mut loss = task_loss(&mut g, model.config().task, out, &labels)?;
            let task_value = check_loss(&g, loss, "pretraining", epoch, step)?;
            if let Some(extra) = aux.loss(&mut g, fe.features, &clips)? {
                loss = g.add(loss, extra)?;
                check_loss(&g, loss, "pretraining (auxiliary)", epoch, step)?;
            }
            g.backward(loss)?;
            let grads: Vec<_> = p.vars.iter().map(|&v| g.grad(v)).collect();
            state.update(&mut model.params_mut(), &grads)?;
            aux.step(&g)?;
            let counts: Vec<usize> = fe
                .conv_outputs
                .iter()
                .map(|&v| {
                    let s = g.shape(v);
                    s[0] * s[2] * s[3]
                })
                .collect();
            model.update_running_stats(&fe.batch_stats, &counts);
            total += task_value * clips.len() as f64;
        }
        let mean = total / train.len().max(1) as f64;
        log::debug!("pretrain epoch {epoch}: loss {mean:.4}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}
