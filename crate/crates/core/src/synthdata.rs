//! Deterministic multi-speaker glyph-video dataset.
//!
//! Every class is a fixed binary glyph. A speaker renders glyphs through its own
//! affine warp, background level, contrast, smooth texture field and sensor
//! noise, so models trained on some speakers see a shifted input distribution
//! on others.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{fnv1a64, Task};
use crate::tensor::{udtf, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub task: Task,
    pub num_speakers: usize,
    pub holdout_ids: Vec<usize>,
    pub vocab: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Training clips per seen speaker.
    pub clips_per_speaker: usize,
    /// Test clips per seen speaker.
    pub seen_test_clips: usize,
    /// Adaptation pool per held-out speaker.
    pub adapt_clips: usize,
    /// Test clips per held-out speaker.
    pub test_clips: usize,
    /// Classes held out of each held-out speaker's adaptation pool.
    pub adapt_missing_classes: usize,
    /// Classes held out of each held-out speaker's test set.
    pub test_missing_classes: usize,
    /// Clip count that corresponds to one minute of speech.
    pub clips_per_minute: usize,
    pub glyph_cells: usize,
    pub cell_px: usize,
    /// Scales every speaker's deviation from the neutral style.
    pub style_strength: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Default classification task: 8 seen and 2 held-out speakers.
    pub fn classification() -> Self {
        SynthConfig {
            task: Task::Classification,
            num_speakers: 10,
            holdout_ids: vec![8, 9],
            vocab: 10,
            frames: 8,
            height: 32,
            width: 32,
            clips_per_speaker: 120,
            seen_test_clips: 30,
            adapt_clips: 200,
            test_clips: 100,
            adapt_missing_classes: 1,
            test_missing_classes: 0,
            clips_per_minute: 20,
            glyph_cells: 5,
            cell_px: 3,
            style_strength: 1.0,
            seed: 7,
        }
    }

    /// Default sentence task: each clip shows 2 or 3 tokens in sequence.
    pub fn sequence() -> Self {
        SynthConfig {
            task: Task::CtcSequence,
            vocab: 8,
            num_speakers: 20,
            holdout_ids: vec![18, 19],
            ..Self::classification()
        }
    }

    pub fn speaker_name(i: usize) -> String {
        format!("spk{i:02}")
    }

    pub fn validate(&self) -> Result<()> {
        let glyph = self.glyph_cells * self.cell_px;
        let st = self.style_strength.abs();
        let rot = (0.35 * st).min(std::f64::consts::FRAC_PI_4);
        // worst case: largest scale and rotation, speaker and clip offsets, motion
        let reach =
            glyph as f64 / 2.0 * (1.0 + 0.15 * st) * (rot.cos() + rot.sin()) + 2.0 * st + 2.75;
        if self.vocab == 0 || self.glyph_cells == 0 || self.cell_px == 0 {
            return Err(Error::Config(
                "vocab and glyph size must be positive".into(),
            ));
        }
        if 2.0 * reach > self.height.min(self.width) as f64 {
            return Err(Error::Config(format!(
                "{glyph}px glyphs do not fit a {}x{} canvas",
                self.height, self.width
            )));
        }
        if self.vocab > 64 {
            return Err(Error::Config("vocab too large for the glyph grid".into()));
        }
        if self.holdout_ids.iter().any(|&h| h >= self.num_speakers)
            || self.holdout_ids.iter().collect::<BTreeSet<_>>().len() != self.holdout_ids.len()
            || self.holdout_ids.len() >= self.num_speakers
        {
            return Err(Error::Config(
                "holdout ids must be distinct seen-speaker indices".into(),
            ));
        }
        let min_cover = (0.6 * self.vocab as f64).ceil() as usize;
        if self.vocab - self.adapt_missing_classes < min_cover
            || self.vocab - self.test_missing_classes < min_cover
        {
            return Err(Error::Config(
                "label sets must cover at least 60% of the vocab".into(),
            ));
        }
        if self.frames == 0 || (self.task == Task::CtcSequence && self.frames < 4) {
            return Err(Error::Config("too few frames for the task".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Seq(Vec<usize>),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Seq(_) => None,
        }
    }

    pub fn tokens(&self) -> Vec<usize> {
        match self {
            Label::Class(c) => vec![*c],
            Label::Seq(s) => s.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    /// `[T, 1, H, W]` in `[0, 1]`.
    pub frames: Tensor,
    pub label: Label,
    pub speaker_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeldOutSpeaker {
    pub speaker_id: String,
    pub adapt: Vec<Clip>,
    pub test: Vec<Clip>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub config: SynthConfig,
    pub train: Vec<Clip>,
    /// Unseen clips of the training speakers.
    pub seen_test: Vec<Clip>,
    pub heldout: Vec<HeldOutSpeaker>,
}

impl DataSplit {
    pub fn speaker(&self, id: &str) -> Result<&HeldOutSpeaker> {
        self.heldout
            .iter()
            .find(|h| h.speaker_id == id)
            .ok_or_else(|| Error::Contract(format!("'{id}' is not a held-out speaker")))
    }

    pub fn train_speakers(&self) -> Vec<String> {
        (0..self.config.num_speakers)
            .filter(|i| !self.config.holdout_ids.contains(i))
            .map(SynthConfig::speaker_name)
            .collect()
    }

    pub fn clip_count(&self) -> usize {
        self.train.len()
            + self.seen_test.len()
            + self
                .heldout
                .iter()
                .map(|h| h.adapt.len() + h.test.len())
                .sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerStyle {
    pub speaker_id: String,
    pub scale: f64,
    pub rotation: f64,
    pub translation: (f64, f64),
    pub background: f64,
    pub contrast: f64,
    /// Additive `[H, W]` bias field.
    pub texture: Vec<f64>,
    pub noise: f64,
}

fn mix(parts: &[u64]) -> u64 {
    let mut bytes = Vec::with_capacity(parts.len() * 8);
    for p in parts {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fnv1a64(&bytes)
}

fn speaker_key(speaker_id: &str) -> u64 {
    fnv1a64(speaker_id.as_bytes())
}

/// Style of one speaker, a pure function of `(seed, speaker_id)`.
pub fn speaker_style(cfg: &SynthConfig, speaker_id: &str) -> SpeakerStyle {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 1, speaker_key(speaker_id)]));
    let s = cfg.style_strength;
    let scale = 1.0 + s * rng.random_range(-0.15..0.15);
    let rotation = s * rng.random_range(-0.35..0.35);
    let translation = (
        s * rng.random_range(-2.0..2.0),
        s * rng.random_range(-2.0..2.0),
    );
    let background = 0.2 + s * rng.random_range(-0.1..0.1);
    let contrast = 0.65 + s * rng.random_range(-0.2..0.2);
    let noise = 0.04 + s * rng.random_range(0.0..0.04);
    let (h, w) = (cfg.height, cfg.width);
    let mut texture = vec![0.0; h * w];
    for _ in 0..3 {
        let amp = s * rng.random_range(0.04..0.12);
        let freq = rng.random_range(0.5..2.5);
        let angle = rng.random_range(0.0..PI);
        let phase = rng.random_range(0.0..2.0 * PI);
        let (ky, kx) = (angle.sin() * freq, angle.cos() * freq);
        for y in 0..h {
            for x in 0..w {
                let arg = 2.0 * PI * (ky * y as f64 / h as f64 + kx * x as f64 / w as f64) + phase;
                texture[y * w + x] += amp * arg.sin();
            }
        }
    }
    SpeakerStyle {
        speaker_id: speaker_id.to_string(),
        scale,
        rotation,
        translation,
        background,
        contrast,
        texture,
        noise,
    }
}

/// Binary `glyph_cells²` patterns, pairwise Hamming distance at least a third of the grid.
pub fn glyphs(cfg: &SynthConfig) -> Vec<Vec<bool>> {
    let n = cfg.glyph_cells * cfg.glyph_cells;
    let min_dist = n / 3;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 2]));
    let mut out: Vec<Vec<bool>> = Vec::new();
    let mut tries = 0;
    while out.len() < cfg.vocab {
        tries += 1;
        let g: Vec<bool> = (0..n).map(|_| rng.random_bool(0.45)).collect();
        let ones = g.iter().filter(|&&b| b).count();
        if ones < n / 4 {
            continue;
        }
        let far = out
            .iter()
            .all(|o| o.iter().zip(&g).filter(|(a, b)| a != b).count() >= min_dist);
        if far || tries > 100_000 {
            out.push(g);
        }
    }
    out
}

fn glyph_value(pattern: &[bool], cells: usize, cell_px: usize, u: f64, v: f64) -> f64 {
    // u, v in glyph pixels relative to the glyph center
    let half = (cells * cell_px) as f64 / 2.0;
    let (gx, gy) = (u + half, v + half);
    if gx < 0.0 || gy < 0.0 {
        return 0.0;
    }
    let (cx, cy) = (
        (gx / cell_px as f64) as usize,
        (gy / cell_px as f64) as usize,
    );
    if cx >= cells || cy >= cells {
        return 0.0;
    }
    f64::from(u8::from(pattern[cy * cells + cx]))
}

struct Segment {
    glyph: usize,
    start: usize,
    len: usize,
}

fn render_clip(
    cfg: &SynthConfig,
    style: &SpeakerStyle,
    patterns: &[Vec<bool>],
    segments: &[Segment],
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let (t_len, h, w) = (cfg.frames, cfg.height, cfg.width);
    let noise = Normal::new(0.0, style.noise).expect("finite noise");
    let (cos, sin) = (style.rotation.cos(), style.rotation.sin());
    let mut data = vec![0.0; t_len * h * w];
    let sub = [0.25, 0.75];
    for seg in segments {
        let start = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let vel = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        for t in seg.start..seg.start + seg.len {
            let dt = t as f64 - seg.start as f64 - (seg.len as f64 - 1.0) / 2.0;
            let cx = w as f64 / 2.0 + style.translation.0 + start.0 + vel.0 * dt;
            let cy = h as f64 / 2.0 + style.translation.1 + start.1 + vel.1 * dt;
            let frame = &mut data[t * h * w..(t + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for oy in sub {
                        for ox in sub {
                            let (dx, dy) = (x as f64 + ox - cx, y as f64 + oy - cy);
                            let u = (cos * dx + sin * dy) / style.scale;
                            let v = (-sin * dx + cos * dy) / style.scale;
                            acc += glyph_value(
                                &patterns[seg.glyph],
                                cfg.glyph_cells,
                                cfg.cell_px,
                                u,
                                v,
                            );
                        }
                    }
                    frame[y * w + x] = acc / 4.0;
                }
            }
        }
    }
    for t in 0..t_len {
        for i in 0..h * w {
            let v = &mut data[t * h * w + i];
            let px = style.background + style.contrast * *v + style.texture[i] + noise.sample(rng);
            *v = px.clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[t_len, 1, h, w], data).expect("frame shape")
}

/// Renders clip `index` of `speaker_id` drawing its label from `classes`.
fn make_clip(
    cfg: &SynthConfig,
    style: &SpeakerStyle,
    patterns: &[Vec<bool>],
    classes: &[usize],
    index: usize,
) -> Clip {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[
        cfg.seed,
        3,
        speaker_key(&style.speaker_id),
        index as u64,
    ]));
    let (label, segments) = match cfg.task {
        Task::Classification => {
            let c = classes[rng.random_range(0..classes.len())];
            (
                Label::Class(c),
                vec![Segment {
                    glyph: c,
                    start: 0,
                    len: cfg.frames,
                }],
            )
        }
        Task::CtcSequence => {
            let max_len = (cfg.frames / 2).min(3);
            let n = rng.random_range(2..=max_len.max(2));
            let mut toks: Vec<usize> = Vec::with_capacity(n);
            while toks.len() < n {
                let c = classes[rng.random_range(0..classes.len())];
                if toks.last() != Some(&c) || classes.len() == 1 {
                    toks.push(c);
                }
            }
            // split frames into n runs of at least two frames each
            let mut lens = vec![2; n];
            for _ in 0..cfg.frames - 2 * n {
                let i = rng.random_range(0..n);
                lens[i] += 1;
            }
            let mut start = 0;
            let segs = toks
                .iter()
                .zip(&lens)
                .map(|(&g, &len)| {
                    let s = Segment {
                        glyph: g,
                        start,
                        len,
                    };
                    start += len;
                    s
                })
                .collect();
            (Label::Seq(toks), segs)
        }
    };
    Clip {
        frames: render_clip(cfg, style, patterns, &segments, &mut rng),
        label,
        speaker_id: style.speaker_id.clone(),
    }
}

fn class_subset(cfg: &SynthConfig, speaker_id: &str, role: u64, missing: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 4, speaker_key(speaker_id), role]));
    let mut all: Vec<usize> = (0..cfg.vocab).collect();
    all.shuffle(&mut rng);
    let mut keep = all[missing..].to_vec();
    keep.sort_unstable();
    keep
}

/// Generates the full split.
pub fn generate(cfg: &SynthConfig) -> Result<DataSplit> {
    generate_with(cfg, Exec::default())
}

pub fn generate_with(cfg: &SynthConfig, exec: Exec) -> Result<DataSplit> {
    cfg.validate()?;
    let patterns = glyphs(cfg);
    let all: Vec<usize> = (0..cfg.vocab).collect();
    let mut train = Vec::new();
    let mut seen_test = Vec::new();
    let mut heldout = Vec::new();
    for s in 0..cfg.num_speakers {
        let id = SynthConfig::speaker_name(s);
        let style = speaker_style(cfg, &id);
        if cfg.holdout_ids.contains(&s) {
            let mut adapt_cls = class_subset(cfg, &id, 0, cfg.adapt_missing_classes);
            let mut test_cls = class_subset(cfg, &id, 1, cfg.test_missing_classes);
            if adapt_cls == test_cls && cfg.adapt_missing_classes + cfg.test_missing_classes > 0 {
                // force partial overlap
                if cfg.adapt_missing_classes > 0 {
                    let gone: Vec<usize> = all
                        .iter()
                        .copied()
                        .filter(|c| !adapt_cls.contains(c))
                        .collect();
                    test_cls[0] = gone[0];
                    test_cls.sort_unstable();
                } else {
                    adapt_cls.pop();
                }
            }
            let adapt = exec.map_range(cfg.adapt_clips, |i| {
                make_clip(cfg, &style, &patterns, &adapt_cls, i)
            });
            let test = exec.map_range(cfg.test_clips, |i| {
                make_clip(cfg, &style, &patterns, &test_cls, cfg.adapt_clips + i)
            });
            heldout.push(HeldOutSpeaker {
                speaker_id: id,
                adapt,
                test,
            });
        } else {
            let n = cfg.clips_per_speaker;
            train.extend(exec.map_range(n, |i| make_clip(cfg, &style, &patterns, &all, i)));
            seen_test.extend(exec.map_range(cfg.seen_test_clips, |i| {
                make_clip(cfg, &style, &patterns, &all, n + i)
            }));
        }
    }
    Ok(DataSplit {
        config: cfg.clone(),
        train,
        seen_test,
        heldout,
    })
}

/// How much adaptation data an experiment may use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    Minutes(f64),
    Fraction(f64),
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptBudget {
    pub mode: BudgetMode,
    pub seed: u64,
    pub folds: usize,
}

impl AdaptBudget {
    pub fn new(mode: BudgetMode, seed: u64, folds: usize) -> Self {
        AdaptBudget { mode, seed, folds }
    }

    /// Clip count implied by the budget for a pool of `pool` clips.
    pub fn clip_count(&self, pool: usize, clips_per_minute: usize) -> Result<usize> {
        let n = match self.mode {
            BudgetMode::Minutes(m) if m > 0.0 => (m * clips_per_minute as f64).round() as usize,
            BudgetMode::Fraction(r) if r > 0.0 && r <= 1.0 => (r * pool as f64).round() as usize,
            BudgetMode::All => pool,
            other => return Err(Error::Contract(format!("invalid budget {other:?}"))),
        };
        if n == 0 || n > pool {
            return Err(Error::Contract(format!(
                "budget needs {n} clips but the pool holds {pool}"
            )));
        }
        Ok(n)
    }

    pub fn label(&self) -> String {
        match self.mode {
            BudgetMode::Minutes(m) => format!("{m}min"),
            BudgetMode::Fraction(r) => format!("{}%", (r * 100.0).round()),
            BudgetMode::All => "all".into(),
        }
    }
}

/// Seeded permutation of the pool reordered round-robin over strata, so every
/// prefix and every contiguous block is as balanced as the pool allows.
fn stratified_order(strata: &[usize], seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..strata.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut seen: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    let mut keyed: Vec<(usize, usize, usize)> = idx
        .into_iter()
        .enumerate()
        .map(|(pos, i)| {
            let r = seen.entry(strata[i]).or_insert(0);
            *r += 1;
            (*r, pos, i)
        })
        .collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, _, i)| i).collect()
}

/// Indices into a pool of adaptation clips for `fold`; `strata` holds one
/// stratum per pool clip (the class, or the first token of a sequence).
///
/// Folds are disjoint blocks of one seeded stratified order while
/// `folds * n` fits the pool; otherwise each fold draws its own order.
pub fn fold_indices(
    strata: &[usize],
    n: usize,
    budget: &AdaptBudget,
    fold: usize,
) -> Result<Vec<usize>> {
    let pool_len = strata.len();
    if budget.folds == 0 || fold >= budget.folds {
        return Err(Error::Contract(format!("fold {fold} of {}", budget.folds)));
    }
    if n == 0 || n > pool_len {
        return Err(Error::Contract(format!(
            "{n} clips from a pool of {pool_len}"
        )));
    }
    let mut out = if n * budget.folds <= pool_len {
        stratified_order(strata, mix(&[budget.seed, 5]))[fold * n..(fold + 1) * n].to_vec()
    } else {
        let mut o = stratified_order(strata, mix(&[budget.seed, 6, fold as u64]));
        o.truncate(n);
        o
    };
    out.sort_unstable();
    Ok(out)
}

/// Stratum of a clip for budget sampling.
pub fn stratum(label: &Label) -> usize {
    match label {
        Label::Class(c) => *c,
        Label::Seq(t) => t.first().copied().unwrap_or(0),
    }
}

/// Adaptation clips of `speaker` for `fold` under `budget`.
pub fn budget_subset<'a>(
    split: &'a DataSplit,
    speaker: &str,
    budget: &AdaptBudget,
    fold: usize,
) -> Result<Vec<&'a Clip>> {
    let h = split.speaker(speaker)?;
    let n = budget.clip_count(h.adapt.len(), split.config.clips_per_minute)?;
    let strata: Vec<usize> = h.adapt.iter().map(|c| stratum(&c.label)).collect();
    Ok(fold_indices(&strata, n, budget, fold)?
        .into_iter()
        .map(|i| &h.adapt[i])
        .collect())
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    path: String,
    label: Label,
    speaker_id: String,
    split: String,
}

pub const MANIFEST: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "dataset.json";

/// Writes UDTF clip files, `manifest.jsonl` and `dataset.json` under `dir`.
pub fn export(split: &DataSplit, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("clips"))?;
    let mut manifest = std::io::BufWriter::new(fs::File::create(dir.join(MANIFEST))?);
    let mut groups: Vec<(String, &[Clip])> = vec![
        ("train".into(), &split.train),
        ("seen_test".into(), &split.seen_test),
    ];
    for h in &split.heldout {
        groups.push(("adapt".into(), &h.adapt));
        groups.push(("test".into(), &h.test));
    }
    for (name, clips) in groups {
        for (i, c) in clips.iter().enumerate() {
            let rel = format!("clips/{}_{name}_{i:04}.udtf", c.speaker_id);
            let mut f = std::io::BufWriter::new(fs::File::create(dir.join(&rel))?);
            udtf::write_tensor(&mut f, &c.frames)?;
            f.flush()?;
            let line = ManifestLine {
                path: rel,
                label: c.label.clone(),
                speaker_id: c.speaker_id.clone(),
                split: name.clone(),
            };
            serde_json::to_writer(&mut manifest, &line)?;
            manifest.write_all(b"\n")?;
        }
    }
    manifest.flush()?;
    fs::write(
        dir.join(CONFIG_FILE),
        serde_json::to_vec_pretty(&split.config)?,
    )?;
    Ok(dir.to_path_buf())
}

/// Reads a directory written by [`export`].
pub fn load(dir: &Path) -> Result<DataSplit> {
    let cfg_path = dir.join(CONFIG_FILE);
    let config: SynthConfig = serde_json::from_slice(
        &fs::read(&cfg_path).map_err(|_| Error::MissingFile(cfg_path.clone()))?,
    )?;
    let man_path = dir.join(MANIFEST);
    let file = fs::File::open(&man_path).map_err(|_| Error::MissingFile(man_path.clone()))?;
    let mut split = DataSplit {
        config,
        train: Vec::new(),
        seen_test: Vec::new(),
        heldout: Vec::new(),
    };
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line)?;
        let path = dir.join(&m.path);
        let bytes = fs::read(&path).map_err(|_| Error::MissingFile(path.clone()))?;
        let clip = Clip {
            frames: udtf::decode(&bytes)?,
            label: m.label,
            speaker_id: m.speaker_id.clone(),
        };
        match m.split.as_str() {
            "train" => split.train.push(clip),
            "seen_test" => split.seen_test.push(clip),
            "adapt" | "test" => {
                let pos = match split
                    .heldout
                    .iter()
                    .position(|h| h.speaker_id == m.speaker_id)
                {
                    Some(p) => p,
                    None => {
                        split.heldout.push(HeldOutSpeaker {
                            speaker_id: m.speaker_id.clone(),
                            adapt: Vec::new(),
                            test: Vec::new(),
                        });
                        split.heldout.len() - 1
                    }
                };
                if m.split == "adapt" {
                    split.heldout[pos].adapt.push(clip);
                } else {
                    split.heldout[pos].test.push(clip);
                }
            }
            other => {
                return Err(Error::Format(format!(
                    "unknown split '{other}' in manifest"
                )))
            }
        }
    }
    Ok(split)
}
