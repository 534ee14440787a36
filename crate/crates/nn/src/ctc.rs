//! CTC loss as a single tape op with the forward-backward gradient.

use ndarray::Array2;

use crate::graph::{Graph, NodeId};

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Extended label sequence with blanks interleaved: [b, l1, b, l2, ..., lL, b].
fn extend(targets: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * targets.len() + 1);
    ext.push(blank);
    for &t in targets {
        ext.push(t);
        ext.push(blank);
    }
    ext
}

/// Sum over alignments in log space. `log_probs` is (T x V) of per-frame
/// log posteriors; returns (loss, d loss / d log_probs).
pub(crate) fn ctc_forward_backward(
    log_probs: &Array2<f64>,
    targets: &[usize],
    blank: usize,
) -> (f64, Array2<f64>) {
    let (t_len, v) = log_probs.dim();
    assert!(blank < v, "blank id outside vocabulary");
    for &l in targets {
        assert!(l < v, "target label outside vocabulary");
        assert_ne!(l, blank, "target labels must not contain the blank");
    }
    let ext = extend(targets, blank);
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;

    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = Array2::from_elem((t_len, s_len), ninf);
    alpha[[0, 0]] = log_probs[[0, ext[0]]];
    if s_len > 1 {
        alpha[[0, 1]] = log_probs[[0, ext[1]]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = lse2(acc, alpha[[t - 1, s - 1]]);
            }
            if skip_ok(s) {
                acc = lse2(acc, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = if acc == ninf {
                ninf
            } else {
                acc + log_probs[[t, ext[s]]]
            };
        }
    }
    let log_p = if s_len > 1 {
        lse2(alpha[[t_len - 1, s_len - 1]], alpha[[t_len - 1, s_len - 2]])
    } else {
        alpha[[t_len - 1, s_len - 1]]
    };
    assert!(
        log_p > ninf,
        "CTC alignment infeasible: {} frames cannot emit {} labels",
        t_len,
        targets.len()
    );

    let mut beta = Array2::from_elem((t_len, s_len), ninf);
    beta[[t_len - 1, s_len - 1]] = log_probs[[t_len - 1, ext[s_len - 1]]];
    if s_len > 1 {
        beta[[t_len - 1, s_len - 2]] = log_probs[[t_len - 1, ext[s_len - 2]]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[[t + 1, s]];
            if s + 1 < s_len {
                acc = lse2(acc, beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = lse2(acc, beta[[t + 1, s + 2]]);
            }
            beta[[t, s]] = if acc == ninf {
                ninf
            } else {
                acc + log_probs[[t, ext[s]]]
            };
        }
    }

    // d(-logP)/d lp[t][k] = -sum_{s: ext[s]=k} exp(alpha + beta - lp - logP);
    // alpha and beta both include the frame-t emission, hence the -lp term.
    let mut grad = Array2::zeros((t_len, v));
    for t in 0..t_len {
        for s in 0..s_len {
            let a = alpha[[t, s]];
            let b = beta[[t, s]];
            if a == ninf || b == ninf {
                continue;
            }
            let lp = log_probs[[t, ext[s]]];
            grad[[t, ext[s]]] -= (a + b - lp - log_p).exp();
        }
    }
    (-log_p, grad)
}

impl Graph {
    /// CTC negative log-likelihood of `targets` under per-frame log
    /// posteriors (T x V, blank included in V). Scalar output.
    pub fn ctc_loss(&mut self, log_probs: NodeId, targets: &[usize], blank: usize) -> NodeId {
        let (loss, grad) = ctc_forward_backward(self.val(log_probs), targets, blank);
        let v = Array2::from_elem((1, 1), loss);
        self.push_op(v, move |_, g, sink| {
            sink(log_probs, &grad * g[[0, 0]]);
        })
    }
}

/// Greedy (best-path) CTC decode: per-frame argmax, collapse repeats, drop blanks.
pub fn ctc_greedy_decode(log_probs: &Array2<f64>, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for row in log_probs.rows() {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (k, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        if best != prev && best != blank {
            out.push(best);
        }
        prev = best;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive path-sum oracle: enumerate every V^T alignment, collapse,
    /// and accumulate the probability of those matching the target.
    fn ctc_brute_force(log_probs: &Array2<f64>, targets: &[usize], blank: usize) -> f64 {
        let (t_len, v) = log_probs.dim();
        let mut total = f64::NEG_INFINITY;
        let n_paths = v.pow(t_len as u32);
        for code in 0..n_paths {
            let mut c = code;
            let mut lp = 0.0;
            let mut collapsed: Vec<usize> = Vec::new();
            let mut prev = usize::MAX;
            for t in 0..t_len {
                let sym = c % v;
                c /= v;
                lp += log_probs[[t, sym]];
                if sym != prev && sym != blank {
                    collapsed.push(sym);
                }
                prev = sym;
            }
            if collapsed == targets {
                total = lse2(total, lp);
            }
        }
        -total
    }

    fn random_log_probs(t: usize, v: usize, seed: u64) -> Array2<f64> {
        // tiny xorshift so the test has no RNG dependency
        let mut s = seed.wrapping_add(0x9e3779b97f4a7c15);
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let raw = Array2::from_shape_fn((t, v), |_| next() * 4.0 - 2.0);
        crate::ops::row_log_softmax_value(&raw)
    }

    #[test]
    fn matches_brute_force_on_small_instances() {
        let cases: &[(usize, usize, &[usize])] = &[
            (3, 3, &[1]),
            (4, 3, &[1, 2]),
            (5, 4, &[1, 1]),
            (6, 5, &[1, 2, 3]),
            (6, 4, &[2, 2, 1]),
            (6, 5, &[4, 3, 2, 1]),
        ];
        for (i, &(t, v, tgt)) in cases.iter().enumerate() {
            let lp = random_log_probs(t, v, i as u64 + 1);
            let (loss, _) = ctc_forward_backward(&lp, tgt, 0);
            let oracle = ctc_brute_force(&lp, tgt, 0);
            assert!(
                (loss - oracle).abs() < 1e-10,
                "case {}: {} vs oracle {}",
                i,
                loss,
                oracle
            );
        }
    }

    #[test]
    fn one_hot_single_label_is_free() {
        let mut lp = Array2::from_elem((1, 3), -1e9);
        lp[[0, 1]] = 0.0;
        let (loss, _) = ctc_forward_backward(&lp, &[1], 0);
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn greedy_decode_collapses() {
        let rows = [
            [0.0, -1.0, -2.0],
            [0.0, -1.0, -2.0],
            [-3.0, 0.0, -2.0],
            [-3.0, 0.0, -2.0],
            [0.0, -1.0, -2.0],
            [-3.0, -2.0, 0.0],
        ];
        let lp = Array2::from_shape_fn((6, 3), |(r, c)| rows[r][c]);
        assert_eq!(ctc_greedy_decode(&lp, 0), vec![1, 2]);
    }
}
