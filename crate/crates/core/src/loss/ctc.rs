//! CTC loss: exact negative log marginal over all blank-augmented
//! alignments, computed with the forward (alpha) recursion in log space.
//! The gradient uses the matching beta recursion, so the whole op is a
//! single tape node with an analytic backward rule.

use super::{GlossSequence, LossError, Result, BLANK};
use crate::tensor::{Graph, Scalar, TensorData, Var};

/// Extended label sequence: blank, l1, blank, l2, ..., blank.
fn extend(target: &GlossSequence) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &id in target.ids() {
        ext.push(id);
        ext.push(BLANK);
    }
    ext
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// alpha[t][s]: log prob of all prefixes ending in extended state `s` at
/// frame `t`, including the emission at `t`.
fn forward_alphas(lp: &[f64], frames: usize, classes: usize, ext: &[usize]) -> Vec<f64> {
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let row = &lp[t * classes..(t + 1) * classes];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                acc = lse2(acc, prev[s - 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + row[ext[s]] };
        }
    }
    alpha
}

/// beta[t][s]: log prob of all suffixes from frame `t+1` on, given state `s`
/// at `t`; the emission at `t` itself is excluded.
fn backward_betas(lp: &[f64], frames: usize, classes: usize, ext: &[usize]) -> Vec<f64> {
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let mut beta = vec![ninf; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(frames - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        let row_next = &lp[(t + 1) * classes..(t + 2) * classes];
        for s in 0..s_len {
            let stay = beta[(t + 1) * s_len + s] + row_next[ext[s]];
            let mut acc = stay;
            if s + 1 < s_len {
                acc = lse2(acc, beta[(t + 1) * s_len + s + 1] + row_next[ext[s + 1]]);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                acc = lse2(acc, beta[(t + 1) * s_len + s + 2] + row_next[ext[s + 2]]);
            }
            beta[t * s_len + s] = acc;
        }
    }
    beta
}

/// Negative log marginal probability of `target` under per-frame log
/// probabilities `log_probs` of shape `[frames, vocab+1]` (blank id 0).
///
/// Errors when the target cannot fit into the frame count, or an id lies
/// outside the class axis. An empty target is valid (all-blank path).
pub fn ctc_loss<F: Scalar>(
    g: &mut Graph<F>,
    log_probs: Var,
    target: &GlossSequence,
) -> Result<Var> {
    let shape = g.shape(log_probs).to_vec();
    if shape.len() != 2 {
        return Err(LossError::LogitShapeMismatch {
            teacher: shape,
            student: vec![],
        });
    }
    let (frames, classes) = (shape[0], shape[1]);
    if let Some(&bad) = target.ids().iter().find(|&&id| id >= classes) {
        return Err(LossError::GlossOutOfVocab {
            id: bad,
            vocab: classes - 1,
        });
    }
    let min_frames = target.min_frames();
    if frames < min_frames || frames == 0 {
        return Err(LossError::TargetTooLong {
            target_len: target.len(),
            min_frames,
            frames,
        });
    }
    let ext = extend(target);
    let s_len = ext.len();
    let lp: Vec<f64> = g.data(log_probs).iter().map(|v| v.to_f64()).collect();
    let alpha = forward_alphas(&lp, frames, classes, &ext);
    let tail = &alpha[(frames - 1) * s_len..];
    let log_p = if s_len > 1 {
        lse2(tail[s_len - 1], tail[s_len - 2])
    } else {
        tail[0]
    };
    let loss = -log_p;

    let ext_b = ext.clone();
    let needs = g.requires_grad(log_probs);
    let out = g.push_op(TensorData::scalar(F::from_f64(loss)), needs, || {
        Box::new(move |_node, gout, prefix| {
            let upstream = gout[0].to_f64();
            let lp: Vec<f64> = prefix[log_probs.0]
                .value
                .data()
                .iter()
                .map(|v| v.to_f64())
                .collect();
            let alpha = forward_alphas(&lp, frames, classes, &ext_b);
            let beta = backward_betas(&lp, frames, classes, &ext_b);
            let s_len = ext_b.len();
            let tail = &alpha[(frames - 1) * s_len..];
            let log_p = if s_len > 1 {
                lse2(tail[s_len - 1], tail[s_len - 2])
            } else {
                tail[0]
            };
            // dL/d lp[t][k] = -sum_{s: ext[s]=k} exp(alpha + beta - logP)
            let mut grad = vec![F::ZERO; frames * classes];
            for t in 0..frames {
                let mut per_class = vec![f64::NEG_INFINITY; classes];
                for s in 0..s_len {
                    let ab = alpha[t * s_len + s] + beta[t * s_len + s];
                    let k = ext_b[s];
                    per_class[k] = lse2(per_class[k], ab);
                }
                for k in 0..classes {
                    if per_class[k] != f64::NEG_INFINITY {
                        let v = -((per_class[k] - log_p).exp()) * upstream;
                        grad[t * classes + k] = F::from_f64(v);
                    }
                }
            }
            prefix[log_probs.0].accumulate(grad.into_iter());
        })
    });
    Ok(out)
}

/// Brute-force oracle: total probability of `target` as the sum over all
/// `classes^frames` label paths that collapse to it. Exponential; only for
/// tiny shapes in tests and the acceptance suite.
pub fn ctc_bruteforce_prob(log_probs: &TensorData<f64>, target: &GlossSequence) -> f64 {
    let shape = log_probs.shape();
    let (frames, classes) = (shape[0], shape[1]);
    let lp = log_probs.data();
    let mut total = 0.0f64;
    let mut path = vec![0usize; frames];
    loop {
        // collapse: drop repeats then blanks
        let mut collapsed = Vec::new();
        let mut prev = usize::MAX;
        for &c in &path {
            if c != prev && c != BLANK {
                collapsed.push(c);
            }
            prev = c;
        }
        if collapsed == target.ids() {
            let logp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &c)| lp[t * classes + c])
                .sum();
            total += logp.exp();
        }
        // next path in lexicographic order
        let mut i = frames;
        loop {
            if i == 0 {
                return total;
            }
            i -= 1;
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
        }
    }
}
