//! Recognizer architecture: a per-frame convolution front-end whose padded
//! layers accept external border rings, a temporal-convolution back-end, and a
//! classification or CTC head.

pub mod checkpoint;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use layers::{
    assemble_padded_input, conv2d_forward, conv_out_hw, BaseFill, PaddedConv2d, PaddingMode,
    PaddingSource,
};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// One label per clip; output `[vocab]` logits.
    Classification,
    /// Token sequence per clip; output `[T, vocab + 1]` log-posteriors, index 0 is the blank.
    CtcSequence,
}

/// Architecture depth: number of padded convolutions in the front-end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Small,
    Medium,
    Full,
}

impl Preset {
    pub fn conv_layers(self) -> usize {
        match self {
            Preset::Small => 5,
            Preset::Medium => 11,
            Preset::Full => 17,
        }
    }

    pub fn from_layers(n: usize) -> Result<Self> {
        match n {
            5 => Ok(Preset::Small),
            11 => Ok(Preset::Medium),
            17 => Ok(Preset::Full),
            other => Err(Error::Config(format!(
                "no preset with {other} layers (expected 5, 11 or 17)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub max_frames: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    fn k3(out_channels: usize, stride: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: InputSpec,
    pub convs: Vec<ConvSpec>,
    /// Front-end conv indices whose rings come from a user padding.
    pub udp_layers: Vec<usize>,
    /// Output channels of each temporal convolution.
    pub backend_channels: Vec<usize>,
    pub backend_kernel: usize,
    pub task: Task,
    pub vocab: usize,
    pub norm_eps: f64,
    pub norm_momentum: f64,
}

impl ModelConfig {
    /// Preset architecture for `1 × 32 × 32` frames, every padded conv UDP-enabled.
    pub fn preset(preset: Preset, task: Task, vocab: usize) -> Self {
        let input = InputSpec {
            channels: 1,
            height: 32,
            width: 32,
            max_frames: 8,
        };
        let (convs, backend_channels) = match preset {
            Preset::Small => (
                vec![
                    ConvSpec::k3(8, 2),
                    ConvSpec::k3(16, 1),
                    ConvSpec::k3(16, 2),
                    ConvSpec::k3(32, 1),
                    ConvSpec::k3(32, 2),
                ],
                vec![64],
            ),
            Preset::Medium => {
                let mut c = vec![ConvSpec::k3(8, 2)];
                c.extend([ConvSpec::k3(8, 1); 2]);
                c.push(ConvSpec::k3(16, 2));
                c.extend([ConvSpec::k3(16, 1); 2]);
                c.push(ConvSpec::k3(32, 2));
                c.extend([ConvSpec::k3(32, 1); 2]);
                c.push(ConvSpec::k3(64, 2));
                c.push(ConvSpec::k3(64, 1));
                (c, vec![256, 256])
            }
            Preset::Full => {
                // stem + four stages of four, downsampling at the head of stages 2-4
                let mut c = vec![ConvSpec::k3(4, 2)];
                c.extend([ConvSpec::k3(4, 1); 4]);
                for ch in [8, 16, 32] {
                    c.push(ConvSpec::k3(ch, 2));
                    c.extend([ConvSpec::k3(ch, 1); 3]);
                }
                (c, vec![896, 896])
            }
        };
        let udp_layers = (0..convs.len()).collect();
        ModelConfig {
            input,
            convs,
            udp_layers,
            backend_channels,
            backend_kernel: 3,
            task,
            vocab,
            norm_eps: 1e-5,
            norm_momentum: 0.1,
        }
    }

    /// Same architecture with UDP limited to the first `n` convolutions.
    pub fn with_udp_prefix(mut self, n: usize) -> Result<Self> {
        if n == 0 || n > self.convs.len() {
            return Err(Error::Config(format!(
                "cannot enable UDP on {n} of {} layers",
                self.convs.len()
            )));
        }
        self.udp_layers = (0..n).collect();
        Ok(self)
    }

    pub fn output_classes(&self) -> usize {
        match self.task {
            Task::Classification => self.vocab,
            Task::CtcSequence => self.vocab + 1,
        }
    }

    /// Declared `(C, H, W)` input of every front-end conv.
    pub fn layer_inputs(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut cur = (self.input.channels, self.input.height, self.input.width);
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, c) in self.convs.iter().enumerate() {
            if c.kernel == 0
                || c.stride == 0
                || cur.1 + 2 * c.padding < c.kernel
                || cur.2 + 2 * c.padding < c.kernel
            {
                return Err(Error::Config(format!(
                    "conv {i} geometry is infeasible for {cur:?}"
                )));
            }
            out.push(cur);
            let (h, w) = conv_out_hw(cur.1, cur.2, c.kernel, c.stride, c.padding);
            cur = (c.out_channels, h, w);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_inputs()?;
        if self.convs.is_empty() {
            return Err(Error::Config("front-end needs at least one conv".into()));
        }
        if self.udp_layers.is_empty() {
            return Err(Error::Config("udp_layers must be non-empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &l in &self.udp_layers {
            if l >= self.convs.len() || !seen.insert(l) {
                return Err(Error::Config(format!("invalid or duplicate udp layer {l}")));
            }
        }
        if self.backend_kernel.is_multiple_of(2) {
            return Err(Error::Config("backend kernel must be odd".into()));
        }
        if self.vocab == 0 {
            return Err(Error::Config("vocab must be positive".into()));
        }
        Ok(())
    }

    /// Compact JSON in field-declaration order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// 64-bit FNV-1a of [`ModelConfig::canonical_json`].
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.canonical_json().as_bytes())
    }

    /// Ring elements per UDP layer, in `udp_layers` order.
    pub fn ring_lens(&self) -> Result<Vec<(usize, usize)>> {
        let inputs = self.layer_inputs()?;
        Ok(self
            .udp_layers
            .iter()
            .map(|&l| {
                let (c, h, w) = inputs[l];
                (l, c * crate::tensor::ring_len(h, w, self.convs[l].padding))
            })
            .collect())
    }

    pub fn ring_param_count(&self) -> Result<usize> {
        Ok(self.ring_lens()?.iter().map(|(_, n)| n).sum())
    }

    /// Trainable weights (running statistics excluded).
    pub fn param_count(&self) -> Result<usize> {
        let inputs = self.layer_inputs()?;
        let mut n = 0;
        for (c, &(cin, _, _)) in self.convs.iter().zip(&inputs) {
            n += c.out_channels * cin * c.kernel * c.kernel + c.out_channels + 2 * c.out_channels;
        }
        let mut prev = self.convs.last().map_or(0, |c| c.out_channels);
        for &ch in &self.backend_channels {
            n += ch * prev * self.backend_kernel + ch;
            prev = ch;
        }
        n += self.output_classes() * prev + self.output_classes();
        Ok(n)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-channel affine normalization with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalConv {
    /// `[O, C, k]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[O, K]`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// The pretrained network. Weights are never touched by padding adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct RecognizerModel {
    config: ModelConfig,
    fingerprint: u64,
    pub convs: Vec<PaddedConv2d>,
    pub norms: Vec<Norm>,
    pub backend: Vec<TemporalConv>,
    pub head: Linear,
}

/// Model parameters registered on a tape, in declared order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// How normalization layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormUse {
    /// Batch statistics (pretraining).
    Batch,
    /// Frozen running statistics (adaptation and inference).
    Running,
}

pub struct FrontendOut {
    /// `[B, T, C]` per-frame features.
    pub features: Var,
    /// Batch mean and variance per norm layer when run with [`NormUse::Batch`].
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
    /// Pre-normalization output of every conv, `[B*T, C, H, W]`.
    pub conv_outputs: Vec<Var>,
}

impl RecognizerModel {
    /// Randomly initialized model (He-normal convs, zero biases, unit norms).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = config.layer_inputs()?;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for (spec, &decl) in config.convs.iter().zip(&inputs) {
            let fan_in = decl.0 * spec.kernel * spec.kernel;
            let shape = [spec.out_channels, decl.0, spec.kernel, spec.kernel];
            convs.push(PaddedConv2d {
                weight: normal(&mut rng, &shape, (2.0 / fan_in as f64).sqrt()),
                bias: Tensor::zeros(&[spec.out_channels]),
                stride: spec.stride,
                padding: spec.padding,
                fill: BaseFill::Zero,
                declared_input: decl,
            });
            norms.push(Norm {
                gamma: Tensor::full(&[spec.out_channels], 1.0),
                beta: Tensor::zeros(&[spec.out_channels]),
                running_mean: Tensor::zeros(&[spec.out_channels]),
                running_var: Tensor::full(&[spec.out_channels], 1.0),
            });
        }
        let mut prev = config.convs.last().unwrap().out_channels;
        let mut backend = Vec::new();
        for &ch in &config.backend_channels {
            let fan_in = prev * config.backend_kernel;
            backend.push(TemporalConv {
                weight: normal(
                    &mut rng,
                    &[ch, prev, config.backend_kernel],
                    (2.0 / fan_in as f64).sqrt(),
                ),
                bias: Tensor::zeros(&[ch]),
            });
            prev = ch;
        }
        let out = config.output_classes();
        let head = Linear {
            weight: normal(&mut rng, &[out, prev], (1.0 / prev as f64).sqrt()),
            bias: Tensor::zeros(&[out]),
        };
        let fingerprint = config.fingerprint();
        Ok(RecognizerModel {
            config,
            fingerprint,
            convs,
            norms,
            backend,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Same weights with user padding on the first `n` convolutions only.
    pub fn with_udp_prefix(&self, n: usize) -> Result<Self> {
        let config = self.config.clone().with_udp_prefix(n)?;
        Ok(RecognizerModel {
            fingerprint: config.fingerprint(),
            config,
            ..self.clone()
        })
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Trainable tensors in declared order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for (c, n) in self.convs.iter().zip(&self.norms) {
            v.extend([&c.weight, &c.bias, &n.gamma, &n.beta]);
        }
        for b in &self.backend {
            v.extend([&b.weight, &b.bias]);
        }
        v.extend([&self.head.weight, &self.head.bias]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for (c, n) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            v.extend([&mut c.weight, &mut c.bias, &mut n.gamma, &mut n.beta]);
        }
        for b in self.backend.iter_mut() {
            v.extend([&mut b.weight, &mut b.bias]);
        }
        v.extend([&mut self.head.weight, &mut self.head.bias]);
        v
    }

    /// Registers every parameter on `g`; `trainable` decides whether they collect gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params()
            .into_iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        BoundParams { vars }
    }

    fn backend_offset(&self) -> usize {
        4 * self.convs.len()
    }

    /// Runs the conv stack over `frames: [B*T, C, H, W]` and returns `[B, T, C']` features.
    ///
    /// `rings` must hold one `[Cin, ring_len]` var per UDP layer, in `udp_layers` order.
    pub fn frontend(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        frames: Var,
        batch: usize,
        rings: Option<&[Var]>,
        norm: NormUse,
    ) -> Result<FrontendOut> {
        let s = g.shape(frames).to_vec();
        let inp = self.config.input;
        if s.len() != 4 || s[1..] != [inp.channels, inp.height, inp.width] {
            return Err(Error::Dimension(format!(
                "frames {s:?} do not match declared input ({}, {}, {})",
                inp.channels, inp.height, inp.width
            )));
        }
        if batch == 0 || !s[0].is_multiple_of(batch) {
            return Err(Error::Dimension(format!(
                "{} frames cannot split into {batch} clips",
                s[0]
            )));
        }
        let t = s[0] / batch;
        if t > inp.max_frames || t == 0 {
            return Err(Error::Contract(format!(
                "clip length {t} outside 1..={}",
                inp.max_frames
            )));
        }
        if let Some(r) = rings {
            if r.len() != self.config.udp_layers.len() {
                return Err(Error::Contract(format!(
                    "{} rings supplied for {} UDP layers",
                    r.len(),
                    self.config.udp_layers.len()
                )));
            }
        }
        let mut h = frames;
        let mut batch_stats = Vec::new();
        let mut conv_outputs = Vec::new();
        for (i, (conv, norm_layer)) in self.convs.iter().zip(&self.norms).enumerate() {
            let ring = rings.and_then(|r| {
                self.config
                    .udp_layers
                    .iter()
                    .position(|&l| l == i)
                    .map(|k| r[k])
            });
            let base = 4 * i;
            let y = conv.apply(g, h, p.vars[base], p.vars[base + 1], ring)?;
            conv_outputs.push(y);
            let y = match norm {
                NormUse::Batch => {
                    let (y, m, v) = g.batch_norm_train(
                        y,
                        p.vars[base + 2],
                        p.vars[base + 3],
                        self.config.norm_eps,
                    )?;
                    batch_stats.push((m, v));
                    y
                }
                NormUse::Running => g.batch_norm_eval(
                    y,
                    p.vars[base + 2],
                    p.vars[base + 3],
                    norm_layer.running_mean.data(),
                    norm_layer.running_var.data(),
                    self.config.norm_eps,
                )?,
            };
            h = g.relu(y)?;
        }
        let pooled = g.spatial_mean(h)?;
        let c = g.shape(pooled)[1];
        let features = g.reshape(pooled, &[batch, t, c])?;
        Ok(FrontendOut {
            features,
            batch_stats,
            conv_outputs,
        })
    }

    /// Temporal stack and head over `[B, T, C]` features.
    ///
    /// Classification returns `[B, vocab]` logits; CTC returns `[B, T, vocab + 1]` log-posteriors.
    pub fn backend(&self, g: &mut Graph, p: &BoundParams, features: Var) -> Result<Var> {
        let mut h = features;
        let off = self.backend_offset();
        for j in 0..self.backend.len() {
            h = g.temporal_conv(h, p.vars[off + 2 * j], p.vars[off + 2 * j + 1])?;
            h = g.relu(h)?;
        }
        let hw = p.vars[off + 2 * self.backend.len()];
        let hb = p.vars[off + 2 * self.backend.len() + 1];
        match self.config.task {
            Task::Classification => {
                let pooled = g.time_mean(h)?;
                g.linear(pooled, hw, Some(hb))
            }
            Task::CtcSequence => {
                let s = g.shape(h).to_vec();
                let flat = g.reshape(h, &[s[0] * s[1], s[2]])?;
                let logits = g.linear(flat, hw, Some(hb))?;
                let logp = g.log_softmax(logits)?;
                let k = self.config.output_classes();
                g.reshape(logp, &[s[0], s[1], k])
            }
        }
    }

    /// Batched inference with frozen statistics; `clips` are `[T, C, H, W]` each with equal `T`.
    pub fn forward_batch(
        &self,
        clips: &[&Tensor],
        padding: Option<&crate::padding::UserPadding>,
        exec: Exec,
    ) -> Result<Tensor> {
        if let Some(u) = padding {
            u.check_compatible(self)?;
        }
        let frames = stack_clips(clips)?;
        let mut g = Graph::with_exec(exec);
        let p = self.bind(&mut g, false);
        let x = g.constant(frames);
        let rings: Option<Vec<Var>> =
            padding.map(|u| u.rings.iter().map(|(_, r)| g.constant(r.clone())).collect());
        let fe = self.frontend(
            &mut g,
            &p,
            x,
            clips.len(),
            rings.as_deref(),
            NormUse::Running,
        )?;
        let out = self.backend(&mut g, &p, fe.features)?;
        Ok(g.value(out).clone())
    }

    /// Single-clip inference: `[vocab]` logits or `[T, vocab + 1]` log-posteriors.
    pub fn forward(
        &self,
        clip: &Tensor,
        padding: Option<&crate::padding::UserPadding>,
    ) -> Result<Tensor> {
        let out = self.forward_batch(&[clip], padding, Exec::Sequential)?;
        let s = out.shape()[1..].to_vec();
        out.reshape(&s)
    }

    /// Folds batch statistics into the running estimates; `counts[i]` is the
    /// number of values behind layer `i`'s statistics.
    pub fn update_running_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)], counts: &[usize]) {
        let m = self.config.norm_momentum;
        for ((norm, (mean, var)), &n) in self.norms.iter_mut().zip(stats).zip(counts) {
            let unbias = if n > 1 {
                n as f64 / (n as f64 - 1.0)
            } else {
                1.0
            };
            for (r, v) in norm.running_mean.data_mut().iter_mut().zip(mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in norm.running_var.data_mut().iter_mut().zip(var) {
                *r = (1.0 - m) * *r + m * v * unbias;
            }
        }
    }

    pub(crate) fn from_parts(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut model = RecognizerModel::new(config, 0)?;
        let mut slots: Vec<&mut Tensor> = Vec::new();
        for (c, n) in model.convs.iter_mut().zip(model.norms.iter_mut()) {
            slots.extend([
                &mut c.weight,
                &mut c.bias,
                &mut n.gamma,
                &mut n.beta,
                &mut n.running_mean,
                &mut n.running_var,
            ]);
        }
        for b in model.backend.iter_mut() {
            slots.extend([&mut b.weight, &mut b.bias]);
        }
        slots.extend([&mut model.head.weight, &mut model.head.bias]);
        if slots.len() != tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, config declares {}",
                tensors.len(),
                slots.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {:?} does not match declared {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    /// Every persisted tensor (parameters and running statistics) in declared order.
    pub fn state_tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for (c, n) in self.convs.iter().zip(&self.norms) {
            v.extend([
                &c.weight,
                &c.bias,
                &n.gamma,
                &n.beta,
                &n.running_mean,
                &n.running_var,
            ]);
        }
        for b in &self.backend {
            v.extend([&b.weight, &b.bias]);
        }
        v.extend([&self.head.weight, &self.head.bias]);
        v
    }
}

/// Concatenates equal-length clips `[T, C, H, W]` into `[B*T, C, H, W]`.
pub fn stack_clips(clips: &[&Tensor]) -> Result<Tensor> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let s = first.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "clip must be [T, C, H, W], got {s:?}"
        )));
    }
    let mut data = Vec::with_capacity(first.numel() * clips.len());
    for c in clips {
        if c.shape() != s.as_slice() {
            return Err(Error::Dimension(format!(
                "clip {:?} differs from batch shape {s:?}",
                c.shape()
            )));
        }
        data.extend_from_slice(c.data());
    }
    Tensor::new(&[s[0] * clips.len(), s[1], s[2], s[3]], data)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape, (0..n).map(|_| d.sample(rng)).collect()).expect("shape matches")
}
