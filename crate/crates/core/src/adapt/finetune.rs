use serde::{Deserialize, Serialize};

use super::{
    batches, check_loss, frames_of, task_loss, AdaptReport, OptimState, Plateau, TrainOptions,
};
use crate::error::Result;
use crate::model::{ModelConfig, NormUse, RecognizerModel};
use crate::synthdata::Clip;
use crate::tensor::Graph;

/// Updates every weight of a copy of `model` on the adaptation clips.
///
/// Normalization keeps its pretrained running statistics.
pub fn finetune_all(
    model: &RecognizerModel,
    adapt: &[&Clip],
    opts: &TrainOptions,
) -> Result<(RecognizerModel, AdaptReport)> {
    let mut current = model.clone();
    let mut best = model.clone();
    let mut report = AdaptReport::default();
    if adapt.is_empty() {
        return Ok((best, report));
    }
    let mut state = OptimState::new(opts.optimizer, &current.params());
    let mut plateau = Plateau::new(opts.patience);
    for epoch in 0..opts.max_epochs {
        let mut total = 0.0;
        for (step, idx) in batches(adapt.len(), opts.batch_size, opts.seed, epoch)
            .iter()
            .enumerate()
        {
            let clips: Vec<&Clip> = idx.iter().map(|&i| adapt[i]).collect();
            let mut g = Graph::with_exec(opts.exec);
            let p = current.bind(&mut g, true);
            let x = g.constant(frames_of(&clips)?);
            let fe = current.frontend(&mut g, &p, x, clips.len(), None, NormUse::Running)?;
            let out = current.backend(&mut g, &p, fe.features)?;
            let labels: Vec<_> = clips.iter().map(|c| &c.label).collect();
            let loss = task_loss(&mut g, current.config().task, out, &labels)?;
            total += check_loss(&g, loss, "finetuning", epoch, step)? * clips.len() as f64;
            g.backward(loss)?;
            let grads: Vec<_> = p.vars.iter().map(|&v| g.grad(v)).collect();
            state.update(&mut current.params_mut(), &grads)?;
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

/// Per-speaker storage of padding adaptation against full finetuning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub udp_per_speaker: usize,
    pub model_params: usize,
    pub ratio: f64,
}

pub fn param_report(config: &ModelConfig) -> Result<ParamReport> {
    let udp = config.ring_param_count()?;
    let total = config.param_count()?;
    Ok(ParamReport {
        udp_per_speaker: udp,
        model_params: total,
        ratio: udp as f64 / total as f64,
    })
}
