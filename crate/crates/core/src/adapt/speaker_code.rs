use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    check_loss, decode_outputs, frontend_features, task_loss, AdaptReport, EvalOptions, OptimState,
    Plateau, Prediction, TrainOptions,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::RecognizerModel;
use crate::synthdata::Clip;
use crate::tensor::{Graph, Tensor, Var};

/// Three fully connected layers between front-end and back-end, each fed a
/// segment of a per-speaker code: `h ← relu(A h + B c + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerCodeAdapter {
    pub code_dims: Vec<usize>,
    /// Per layer: `A: [C, C]`, `B: [C, d]`, `b: [C]`.
    pub layers: Vec<(Tensor, Tensor, Tensor)>,
    /// Code segments per speaker.
    pub codes: BTreeMap<String, Vec<Tensor>>,
}

impl SpeakerCodeAdapter {
    /// Identity `A`, zero bias, small random `B`: a zero code reproduces the bare model.
    pub fn new(channels: usize, code_dims: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = code_dims
            .iter()
            .map(|&d| {
                let n = Normal::new(0.0, (1.0 / d as f64).sqrt() * 0.1).expect("finite std");
                (
                    Tensor::eye(channels),
                    Tensor::new(
                        &[channels, d],
                        (0..channels * d).map(|_| n.sample(&mut rng)).collect(),
                    )
                    .expect("shape"),
                    Tensor::zeros(&[channels]),
                )
            })
            .collect();
        SpeakerCodeAdapter {
            code_dims: code_dims.to_vec(),
            layers,
            codes: BTreeMap::new(),
        }
    }

    /// Default schedule of code widths per adapter layer.
    pub const SMALL_CODES: [usize; 3] = [128, 64, 32];
    pub const LARGE_CODES: [usize; 3] = [256, 128, 64];

    pub fn zero_code(&self) -> Vec<Tensor> {
        self.code_dims
            .iter()
            .map(|&d| Tensor::zeros(&[d]))
            .collect()
    }

    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|(a, b, c)| [a, b, c]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|(a, b, c)| [a, b, c])
            .collect()
    }

    /// Applies the adapter to `features: [B, T, C]` on the tape.
    pub fn apply(
        &self,
        g: &mut Graph,
        features: Var,
        layer_vars: &[Var],
        code: &[Var],
    ) -> Result<Var> {
        let s = g.shape(features).to_vec();
        let mut h = g.reshape(features, &[s[0] * s[1], s[2]])?;
        for (i, &d) in self.code_dims.iter().enumerate() {
            let (a, b, bias) = (
                layer_vars[3 * i],
                layer_vars[3 * i + 1],
                layer_vars[3 * i + 2],
            );
            let lin = g.linear(h, a, Some(bias))?;
            let c = g.reshape(code[i], &[d, 1])?;
            let proj = g.matmul(b, c)?;
            let proj = g.reshape(proj, &[s[2]])?;
            let z = g.add_row(lin, proj)?;
            h = g.relu(z)?;
        }
        g.reshape(h, &s)
    }

    /// Back-end outputs for cached features `[N, T, C]` under `code`.
    pub fn forward_features(
        &self,
        model: &RecognizerModel,
        features: &Tensor,
        code: &[Tensor],
    ) -> Result<Tensor> {
        let mut g = Graph::with_exec(Exec::Sequential);
        let p = model.bind(&mut g, false);
        let lv: Vec<Var> = self
            .params()
            .into_iter()
            .map(|t| g.constant(t.clone()))
            .collect();
        let cv: Vec<Var> = code.iter().map(|t| g.constant(t.clone())).collect();
        let f = g.constant(features.clone());
        let h = self.apply(&mut g, f, &lv, &cv)?;
        let out = model.backend(&mut g, &p, h)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(
        &self,
        model: &RecognizerModel,
        clips: &[&Clip],
        code: &[Tensor],
        opts: &EvalOptions,
    ) -> Result<Vec<Prediction>> {
        let f = frontend_features(model, clips, opts.exec)?;
        let out = self.forward_features(model, &f, code)?;
        decode_outputs(model.config().task, &out, opts.beam_width)
    }
}

fn rows(features: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let s = features.shape();
    let per = s[1] * s[2];
    let mut d = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        d.extend_from_slice(&features.data()[i * per..(i + 1) * per]);
    }
    Tensor::new(&[idx.len(), s[1], s[2]], d)
}

/// Stage 2: trains the adapter and one code per training speaker against the frozen model.
pub fn train_adapter(
    model: &RecognizerModel,
    adapter: &mut SpeakerCodeAdapter,
    train: &[&Clip],
    opts: &TrainOptions,
) -> Result<Vec<f64>> {
    let feats = frontend_features(model, train, opts.exec)?;
    let mut by_speaker: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, c) in train.iter().enumerate() {
        by_speaker.entry(c.speaker_id.clone()).or_default().push(i);
    }
    if by_speaker.len() < 2 {
        return Err(Error::Contract(
            "adapter training needs at least two labeled speakers".into(),
        ));
    }
    let speakers: Vec<String> = by_speaker.keys().cloned().collect();
    for s in &speakers {
        let z = adapter.zero_code();
        adapter.codes.entry(s.clone()).or_insert(z);
    }
    let mut layer_state = OptimState::new(opts.optimizer, &adapter.params());
    let mut code_state: BTreeMap<String, OptimState> = speakers
        .iter()
        .map(|s| {
            (
                s.clone(),
                OptimState::new(opts.optimizer, &adapter.codes[s].iter().collect::<Vec<_>>()),
            )
        })
        .collect();
    let mut losses = Vec::new();
    for epoch in 0..opts.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(
            opts.seed ^ (epoch as u64 + 1).wrapping_mul(0x2545_f491_4f6c_dd1d),
        );
        let mut plan: Vec<(String, Vec<usize>)> = Vec::new();
        for (s, idx) in &by_speaker {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            for chunk in idx.chunks(opts.batch_size.max(1)) {
                plan.push((s.clone(), chunk.to_vec()));
            }
        }
        plan.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, (spk, idx)) in plan.iter().enumerate() {
            let mut g = Graph::with_exec(opts.exec);
            let p = model.bind(&mut g, false);
            let lv: Vec<Var> = adapter
                .params()
                .into_iter()
                .map(|t| g.param(t.clone()))
                .collect();
            let cv: Vec<Var> = adapter.codes[spk]
                .iter()
                .map(|t| g.param(t.clone()))
                .collect();
            let f = g.constant(rows(&feats, idx)?);
            let h = adapter.apply(&mut g, f, &lv, &cv)?;
            let out = model.backend(&mut g, &p, h)?;
            let labels: Vec<_> = idx.iter().map(|&i| &train[i].label).collect();
            let loss = task_loss(&mut g, model.config().task, out, &labels)?;
            total += check_loss(&g, loss, "adapter training", epoch, step)? * idx.len() as f64;
            g.backward(loss)?;
            let lg: Vec<_> = lv.iter().map(|&v| g.grad(v)).collect();
            layer_state.update(&mut adapter.params_mut(), &lg)?;
            let cg: Vec<_> = cv.iter().map(|&v| g.grad(v)).collect();
            let code = adapter.codes.get_mut(spk).expect("speaker code");
            code_state
                .get_mut(spk)
                .expect("code state")
                .update(&mut code.iter_mut().collect::<Vec<_>>(), &cg)?;
        }
        losses.push(total / train.len() as f64);
    }
    Ok(losses)
}

/// Stage 3: fits a fresh code for `speaker_id` on its adaptation clips; only the code moves.
pub fn adapt_speaker_code(
    model: &RecognizerModel,
    adapter: &SpeakerCodeAdapter,
    adapt: &[&Clip],
    opts: &TrainOptions,
) -> Result<(Vec<Tensor>, AdaptReport)> {
    let mut code = adapter.zero_code();
    let mut best = code.clone();
    let mut report = AdaptReport::default();
    if adapt.is_empty() {
        return Ok((best, report));
    }
    let feats = frontend_features(model, adapt, opts.exec)?;
    let mut state = OptimState::new(opts.optimizer, &code.iter().collect::<Vec<_>>());
    let mut plateau = Plateau::new(opts.patience);
    for epoch in 0..opts.max_epochs {
        let mut total = 0.0;
        for (step, idx) in super::batches(adapt.len(), opts.batch_size, opts.seed, epoch)
            .iter()
            .enumerate()
        {
            let mut g = Graph::with_exec(opts.exec);
            let p = model.bind(&mut g, false);
            let lv: Vec<Var> = adapter
                .params()
                .into_iter()
                .map(|t| g.constant(t.clone()))
                .collect();
            let cv: Vec<Var> = code.iter().map(|t| g.param(t.clone())).collect();
            let f = g.constant(rows(&feats, idx)?);
            let h = adapter.apply(&mut g, f, &lv, &cv)?;
            let out = model.backend(&mut g, &p, h)?;
            let labels: Vec<_> = idx.iter().map(|&i| &adapt[i].label).collect();
            let loss = task_loss(&mut g, model.config().task, out, &labels)?;
            total +=
                check_loss(&g, loss, "speaker-code adaptation", epoch, step)? * idx.len() as f64;
            g.backward(loss)?;
            let cg: Vec<_> = cv.iter().map(|&v| g.grad(v)).collect();
            state.update(&mut code.iter_mut().collect::<Vec<_>>(), &cg)?;
        }
        let mean = total / adapt.len() as f64;
        report.epoch_losses.push(mean);
        let (improved, stop) = plateau.observe(mean);
        if improved {
            best = code.clone();
            report.best_epoch = Some(epoch);
        }
        if stop {
            report.stopped_early = true;
            break;
        }
    }
    Ok((best, report))
}
