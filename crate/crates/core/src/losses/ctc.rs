use crate::error::{Error, Result};
use crate::tensor::{log_add_exp, log_sum_exp, Graph, Tensor, Var};

/// Index of the blank label in every posterior row.
pub const BLANK: usize = 0;

/// Minimum frame count for `tokens` to have an alignment.
pub fn min_frames(tokens: &[usize]) -> usize {
    tokens.len() + tokens.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(frames: usize, tokens: &[usize]) -> bool {
    frames >= min_frames(tokens)
}

/// Loss and gradient of one sequence.
#[derive(Clone, Debug)]
pub struct CtcResult {
    pub loss: f64,
    /// `d loss / d log_posteriors`, shape `[T, K]`.
    pub grad: Tensor,
}

fn check(log_posteriors: &Tensor, tokens: &[usize]) -> Result<(usize, usize)> {
    let s = log_posteriors.shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::Dimension(format!(
            "ctc expects [T, vocab + 1] posteriors, got {s:?}"
        )));
    }
    let (t, k) = (s[0], s[1]);
    if let Some(&bad) = tokens.iter().find(|&&x| x + 1 >= k) {
        return Err(Error::Contract(format!(
            "token {bad} outside vocabulary of {}",
            k - 1
        )));
    }
    if !is_feasible(t, tokens) {
        return Err(Error::Contract(format!(
            "{} tokens need at least {} frames, got {t}",
            tokens.len(),
            min_frames(tokens)
        )));
    }
    Ok((t, k))
}

/// Negative log-likelihood of `tokens` (ids in `0..vocab`, no blanks) under
/// per-frame log-posteriors `[T, vocab + 1]`, with its gradient.
pub fn ctc_loss(log_posteriors: &Tensor, tokens: &[usize]) -> Result<CtcResult> {
    let (t_len, k) = check(log_posteriors, tokens)?;
    let lp = log_posteriors.data();
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(tokens.iter().flat_map(|&x| [x + 1, BLANK]))
        .collect();
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add_exp(a, prev[s - 1]);
            }
            if skip(s) {
                a = log_add_exp(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf {
                ninf
            } else {
                a + lp[t * k + ext[s]]
            };
        }
    }
    let last = (t_len - 1) * s_len;
    let log_z = if s_len > 1 {
        log_add_exp(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if !log_z.is_finite() {
        return Err(Error::Numeric("ctc likelihood underflowed".into()));
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = lp[(t_len - 1) * k + ext[s_len - 1]];
    if s_len > 1 {
        beta[last + s_len - 2] = lp[(t_len - 1) * k + ext[s_len - 2]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add_exp(b, next[s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_add_exp(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf {
                ninf
            } else {
                b + lp[t * k + ext[s]]
            };
        }
    }

    // Occupancy of label j at frame t: sum over extended states carrying j of
    // alpha * beta / y, normalized by the total likelihood.
    let mut grad = vec![0.0; t_len * k];
    let mut acc = vec![ninf; k];
    for t in 0..t_len {
        acc.fill(ninf);
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            if v > ninf {
                acc[ext[s]] = log_add_exp(acc[ext[s]], v);
            }
        }
        for j in 0..k {
            if acc[j] > ninf {
                grad[t * k + j] = -(acc[j] - lp[t * k + j] - log_z).exp();
            }
        }
    }
    Ok(CtcResult {
        loss: -log_z,
        grad: Tensor::new(&[t_len, k], grad)?,
    })
}

/// Mean CTC loss of a batch `[B, T, K]` on the tape.
pub fn ctc_loss_batch(g: &mut Graph, log_posteriors: Var, targets: &[Vec<usize>]) -> Result<Var> {
    let s = g.shape(log_posteriors).to_vec();
    if s.len() != 3 || s[0] != targets.len() || s[0] == 0 {
        return Err(Error::Dimension(format!(
            "ctc batch {s:?} with {} targets",
            targets.len()
        )));
    }
    let (b, t, k) = (s[0], s[1], s[2]);
    let values = g.value(log_posteriors).data();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * t * k);
    for (i, tgt) in targets.iter().enumerate() {
        let row = Tensor::new(&[t, k], values[i * t * k..(i + 1) * t * k].to_vec())?;
        let r = ctc_loss(&row, tgt)?;
        loss += r.loss;
        grad.extend(r.grad.data().iter().map(|v| v / b as f64));
    }
    g.external_scalar(log_posteriors, loss / b as f64, grad)
}

/// Log-probability of every alignment-collapsed label sequence, by enumeration.
///
/// Exponential in `T`; intended for small instances and tests.
pub fn enumerate_sequences(log_posteriors: &Tensor) -> Vec<(Vec<usize>, f64)> {
    let (t_len, k) = (log_posteriors.shape()[0], log_posteriors.shape()[1]);
    let lp = log_posteriors.data();
    let mut out: std::collections::BTreeMap<Vec<usize>, Vec<f64>> = Default::default();
    let mut path = vec![0usize; t_len];
    loop {
        let score: f64 = path.iter().enumerate().map(|(t, &j)| lp[t * k + j]).sum();
        out.entry(collapse(&path)).or_default().push(score);
        let mut i = 0;
        while i < t_len {
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == t_len {
            break;
        }
    }
    out.into_iter().map(|(s, v)| (s, log_sum_exp(&v))).collect()
}

/// Merges repeats and drops blanks; returns token ids in `0..vocab`.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &j in path {
        if Some(j) != prev && j != BLANK {
            out.push(j - 1);
        }
        prev = Some(j);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_rows(rows: &[&[f64]]) -> Tensor {
        let k = rows[0].len();
        let data = rows
            .iter()
            .flat_map(|r| {
                let z: f64 = r.iter().sum();
                r.iter().map(move |p| (p / z).ln())
            })
            .collect();
        Tensor::new(&[rows.len(), k], data).unwrap()
    }

    #[test]
    fn single_frame_single_token() {
        let lp = log_rows(&[&[0.2, 0.5, 0.3]]);
        let r = ctc_loss(&lp, &[1]).unwrap();
        assert!((r.loss + 0.3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn two_frames_three_alignments() {
        let lp = log_rows(&[&[0.3, 0.7], &[0.4, 0.6]]);
        let (b1, a1, b2, a2): (f64, f64, f64, f64) = (0.3, 0.7, 0.4, 0.6);
        let expect = -(a1 * a2 + a1 * b2 + b1 * a2).ln();
        let r = ctc_loss(&lp, &[0]).unwrap();
        assert!((r.loss - expect).abs() < 1e-14);
    }

    #[test]
    fn infeasible_is_contract_error() {
        let lp = log_rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!(matches!(ctc_loss(&lp, &[0, 0]), Err(Error::Contract(_))));
        assert_eq!(min_frames(&[0, 0, 1, 1, 1]), 8);
    }

    #[test]
    fn collapse_rule() {
        assert_eq!(collapse(&[1, 1, 0, 2]), vec![0, 1]);
        assert_eq!(collapse(&[0, 0, 0]), Vec::<usize>::new());
        assert_eq!(collapse(&[1, 0, 1]), vec![0, 0]);
    }
}
