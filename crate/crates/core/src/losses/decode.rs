use std::collections::HashMap;

use super::ctc::{collapse, BLANK};
use crate::tensor::{log_add_exp, Tensor};

/// A label prefix with its blank-ending and label-ending path masses.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Token ids in `0..vocab`.
    pub prefix: Vec<usize>,
    pub log_prob_blank: f64,
    pub log_prob_nonblank: f64,
}

impl BeamHypothesis {
    pub fn log_mass(&self) -> f64 {
        log_add_exp(self.log_prob_blank, self.log_prob_nonblank)
    }
}

/// Per-frame argmax, repeats merged, blanks dropped.
pub fn greedy_decode(log_posteriors: &Tensor) -> Vec<usize> {
    let k = log_posteriors.shape()[1];
    let path: Vec<usize> = log_posteriors
        .data()
        .chunks(k)
        .map(crate::tensor::argmax)
        .collect();
    collapse(&path)
}

/// Prefix beam search over `[T, vocab + 1]` log-posteriors.
///
/// Returns at most `beam_width` hypotheses sorted by descending mass, ties
/// broken by prefix order.
pub fn beam_decode(log_posteriors: &Tensor, beam_width: usize) -> Vec<BeamHypothesis> {
    assert!(beam_width >= 1, "beam width must be positive");
    let (t_len, k) = (log_posteriors.shape()[0], log_posteriors.shape()[1]);
    let lp = log_posteriors.data();
    let ninf = f64::NEG_INFINITY;
    let mut beams = vec![BeamHypothesis {
        prefix: Vec::new(),
        log_prob_blank: 0.0,
        log_prob_nonblank: ninf,
    }];
    for t in 0..t_len {
        let row = &lp[t * k..(t + 1) * k];
        let mut next: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        let mut add = |prefix: Vec<usize>, pb: f64, pnb: f64| {
            let e = next.entry(prefix).or_insert((ninf, ninf));
            e.0 = log_add_exp(e.0, pb);
            e.1 = log_add_exp(e.1, pnb);
        };
        for b in &beams {
            let total = b.log_mass();
            add(b.prefix.clone(), total + row[BLANK], ninf);
            if let Some(&last) = b.prefix.last() {
                add(b.prefix.clone(), ninf, b.log_prob_nonblank + row[last + 1]);
            }
            for (j, &lp) in row.iter().enumerate().take(k).skip(1) {
                let tok = j - 1;
                let from = if b.prefix.last() == Some(&tok) {
                    b.log_prob_blank
                } else {
                    total
                };
                if from == ninf || lp == ninf {
                    continue;
                }
                let mut p = b.prefix.clone();
                p.push(tok);
                add(p, ninf, from + lp);
            }
        }
        let mut all: Vec<BeamHypothesis> = next
            .into_iter()
            .map(|(prefix, (pb, pnb))| BeamHypothesis {
                prefix,
                log_prob_blank: pb,
                log_prob_nonblank: pnb,
            })
            .filter(|h| h.log_mass() > ninf)
            .collect();
        sort_beams(&mut all);
        all.truncate(beam_width);
        beams = all;
    }
    beams
}

fn sort_beams(beams: &mut [BeamHypothesis]) {
    beams.sort_by(|a, b| {
        b.log_mass()
            .total_cmp(&a.log_mass())
            .then_with(|| a.prefix.cmp(&b.prefix))
    });
}

/// Share of the top hypothesis in the total mass of the surviving beams.
pub fn beam_confidence(beams: &[BeamHypothesis]) -> f64 {
    let masses: Vec<f64> = beams.iter().map(BeamHypothesis::log_mass).collect();
    confidence_from_masses(&masses)
}

pub fn confidence_from_masses(log_masses: &[f64]) -> f64 {
    assert!(!log_masses.is_empty(), "confidence of an empty beam list");
    let top = log_masses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = log_masses.iter().map(|m| (m - top).exp()).sum();
    1.0 / z
}

/// Largest softmax probability of a logit vector.
pub fn class_confidence(logits: &[f64]) -> (usize, f64) {
    let best = crate::tensor::argmax(logits);
    let m = logits[best];
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    (best, 1.0 / z)
}

/// Levenshtein distance between token sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate: summed edit distance over summed reference length.
pub fn word_error_rate(pairs: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let (mut e, mut n) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        e += edit_distance(hyp, reference);
        n += reference.len();
    }
    if n == 0 {
        0.0
    } else {
        e as f64 / n as f64
    }
}
