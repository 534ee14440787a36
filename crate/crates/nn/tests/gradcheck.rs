//! Finite-difference verification of every tape op's analytic gradient.
//!
//! Each case builds a scalar loss from one op (plus a quadratic readout so the
//! upstream gradient is non-uniform), backprops, and probes every input entry
//! with central differences. f64 central differences at h=1e-5 are accurate to
//! ~1e-10, so a 1e-6 relative tolerance is a sharp check.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revoice_nn::check::{assert_close, finite_diff_input};
use revoice_nn::graph::{Graph, NodeId};

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// Weighted sum-of-squares readout: collapses any tensor to a scalar with a
/// position-dependent upstream gradient.
fn readout(g: &mut Graph, x: NodeId) -> NodeId {
    let (r, c) = g.shape(x);
    let w = g.leaf(Array2::from_shape_fn((r, c), |(i, j)| {
        0.3 + 0.1 * i as f64 + 0.07 * j as f64
    }));
    let sq = g.sqr(x);
    let wsq = g.mul(sq, w);
    g.sum(wsq)
}

/// Check d(loss)/d(x) for a single-input op at every entry of x.
fn check_unary(name: &str, x0: Array2<f64>, build: impl Fn(&mut Graph, NodeId) -> NodeId) {
    let loss_of = |x: &Array2<f64>| -> f64 {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let y = build(&mut g, xid);
        let l = readout(&mut g, y);
        g.scalar_value(l)
    };
    let mut g = Graph::new();
    let xid = g.leaf(x0.clone());
    let y = build(&mut g, xid);
    let l = readout(&mut g, y);
    let grads = g.backward(l);
    let gx = grads.expect(xid, name).clone();
    let mut x = x0;
    for i in 0..x.dim().0 {
        for j in 0..x.dim().1 {
            let num = finite_diff_input(&mut x, (i, j), 1e-5, loss_of);
            assert_close(gx[[i, j]], num, 1e-6, &format!("{name} d/dx[{i},{j}]"));
        }
    }
}

/// Check both inputs of a binary op.
fn check_binary(
    name: &str,
    a0: Array2<f64>,
    b0: Array2<f64>,
    build: impl Fn(&mut Graph, NodeId, NodeId) -> NodeId,
) {
    let loss_of = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
        let mut g = Graph::new();
        let aid = g.leaf(a.clone());
        let bid = g.leaf(b.clone());
        let y = build(&mut g, aid, bid);
        let l = readout(&mut g, y);
        g.scalar_value(l)
    };
    let mut g = Graph::new();
    let aid = g.leaf(a0.clone());
    let bid = g.leaf(b0.clone());
    let y = build(&mut g, aid, bid);
    let l = readout(&mut g, y);
    let grads = g.backward(l);
    let ga = grads.expect(aid, name).clone();
    let gb = grads.expect(bid, name).clone();
    let mut a = a0.clone();
    let b_fixed = b0.clone();
    for i in 0..a.dim().0 {
        for j in 0..a.dim().1 {
            let num = finite_diff_input(&mut a, (i, j), 1e-5, |a| loss_of(a, &b_fixed));
            assert_close(ga[[i, j]], num, 1e-6, &format!("{name} d/da[{i},{j}]"));
        }
    }
    let a_fixed = a0;
    let mut b = b0;
    for i in 0..b.dim().0 {
        for j in 0..b.dim().1 {
            let num = finite_diff_input(&mut b, (i, j), 1e-5, |b| loss_of(&a_fixed, b));
            assert_close(gb[[i, j]], num, 1e-6, &format!("{name} d/db[{i},{j}]"));
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&mut rng, 3, 4);
    let y = randn(&mut rng, 3, 4);
    check_binary("add", x.clone(), y.clone(), |g, a, b| g.add(a, b));
    check_binary("sub", x.clone(), y.clone(), |g, a, b| g.sub(a, b));
    check_binary("mul", x.clone(), y.clone(), |g, a, b| g.mul(a, b));
    check_unary("scale", x.clone(), |g, a| g.scale(a, -1.7));
    check_unary("add_scalar", x.clone(), |g, a| g.add_scalar(a, 0.9));
    check_unary("sqr", x.clone(), |g, a| g.sqr(a));
    // abs/relu are non-differentiable at 0; keep probes away from it.
    let mut xa = x.clone();
    xa.mapv_inplace(|v| if v.abs() < 0.2 { v.signum() * 0.5 } else { v });
    check_unary("abs", xa.clone(), |g, a| g.abs(a));
    check_unary("tanh", x.clone(), |g, a| g.tanh(a));
    check_unary("sigmoid", x.clone(), |g, a| g.sigmoid(a));
    check_unary("relu", xa.clone(), |g, a| g.relu(a));
    check_unary("elu", xa, |g, a| g.elu(a, 1.0));
}

#[test]
fn matmul_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = randn(&mut rng, 3, 5);
    let b = randn(&mut rng, 5, 2);
    check_binary("matmul", a, b, |g, a, b| g.matmul(a, b));
    let a = randn(&mut rng, 3, 5);
    let bt = randn(&mut rng, 4, 5);
    check_binary("matmul_nt", a, bt, |g, a, b| g.matmul_nt(a, b));
}

#[test]
fn broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randn(&mut rng, 4, 3);
    let row = randn(&mut rng, 1, 3);
    check_binary("add_row", x.clone(), row, |g, a, b| g.add_row(a, b));
    // Divisor column bounded away from zero.
    let mut col = randn(&mut rng, 4, 1);
    col.mapv_inplace(|v| v.abs() + 0.5);
    check_binary("div_col", x, col, |g, a, b| g.div_col(a, b));
}

#[test]
fn softmax_and_norm_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = randn(&mut rng, 3, 5);
    check_unary("row_softmax", x.clone(), |g, a| g.row_softmax(a));
    check_unary("row_log_softmax", x.clone(), |g, a| g.row_log_softmax(a));
    check_unary("row_norms", x.clone(), |g, a| g.row_norms(a, 1e-9));
    check_unary("l2_normalize_rows", x.clone(), |g, a| {
        g.l2_normalize_rows(a, 1e-9)
    });
    // layer_norm: check x, gain, and bias paths.
    let gain0 = randn(&mut rng, 1, 5);
    let bias0 = randn(&mut rng, 1, 5);
    {
        let (gn, bn) = (gain0.clone(), bias0.clone());
        check_unary("layer_norm x", x.clone(), move |g, a| {
            let gain = g.leaf(gn.clone());
            let bias = g.leaf(bn.clone());
            g.layer_norm(a, gain, bias, 1e-5)
        });
    }
    {
        let xc = x.clone();
        check_binary("layer_norm gain/bias", gain0, bias0, move |g, gain, bias| {
            let x = g.leaf(xc.clone());
            g.layer_norm(x, gain, bias, 1e-5)
        });
    }
}

#[test]
fn reduction_and_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = randn(&mut rng, 4, 3);
    check_unary("sum", x.clone(), |g, a| {
        // Feed through sqr so the readout isn't linear in the scalar.
        let s = g.sum(a);
        g.sqr(s)
    });
    check_unary("mean", x.clone(), |g, a| {
        let m = g.mean(a);
        g.sqr(m)
    });
    check_unary("mean_rows", x.clone(), |g, a| g.mean_rows(a));
    check_unary("transpose", x.clone(), |g, a| g.transpose(a));
    check_unary("slice_rows", x.clone(), |g, a| g.slice_rows(a, 1, 3));
    let y = randn(&mut rng, 2, 3);
    check_binary("concat_rows", x.clone(), y, |g, a, b| g.concat_rows(&[a, b]));
    let z = randn(&mut rng, 4, 2);
    check_binary("concat_cols", x.clone(), z, |g, a, b| g.concat_cols(&[a, b]));
    check_unary("gather_rows", x.clone(), |g, a| g.gather_rows(a, &[2, 0, 2]));
    check_unary("gather_entries", x, |g, a| {
        g.gather_entries(a, &[(0, 1), (3, 2), (3, 2)])
    });
}

#[test]
fn nll_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let logits = randn(&mut rng, 4, 6);
    let targets = [(0usize, 1usize), (1, 5), (2, 0), (3, 3)];
    let loss_of = |x: &Array2<f64>| -> f64 {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let lp = g.row_log_softmax(xid);
        let l = g.nll_mean(lp, &targets);
        g.scalar_value(l)
    };
    let mut g = Graph::new();
    let xid = g.leaf(logits.clone());
    let lp = g.row_log_softmax(xid);
    let l = g.nll_mean(lp, &targets);
    let grads = g.backward(l);
    let gx = grads.expect(xid, "nll").clone();
    let mut x = logits;
    for i in 0..4 {
        for j in 0..6 {
            let num = finite_diff_input(&mut x, (i, j), 1e-5, loss_of);
            assert_close(gx[[i, j]], num, 1e-6, &format!("nll d/dx[{i},{j}]"));
        }
    }
}

#[test]
fn conv_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // conv1d over length 7, 2 in-channels, kernel 3, at stride 1 and 2.
    for stride in [1usize, 2] {
        let x = randn(&mut rng, 7, 2);
        let w = randn(&mut rng, 3 * 2, 3); // (k*C_in) x C_out
        let name = format!("conv1d s{stride}");
        check_binary(&name, x, w, move |g, x, w| {
            let b = g.leaf(Array2::from_shape_fn((1, 3), |(_, j)| 0.1 * j as f64));
            g.conv1d(x, w, b, 3, stride)
        });
    }
    // Bias path.
    {
        let x = randn(&mut rng, 6, 2);
        let w = randn(&mut rng, 3 * 2, 3);
        let b0 = randn(&mut rng, 1, 3);
        check_unary("conv1d bias", b0, move |g, b| {
            let x = g.leaf(x.clone());
            let w = g.leaf(w.clone());
            g.conv1d(x, w, b, 3, 1)
        });
    }
    // Transposed conv: upsample factor 2, kernel 4.
    let x = randn(&mut rng, 5, 2);
    let w = randn(&mut rng, 4 * 2, 3);
    check_binary("conv_transpose1d", x, w, |g, x, w| {
        let b = g.leaf(Array2::zeros((1, 3)));
        g.conv_transpose1d(x, w, b, 4, 2)
    });
}

#[test]
fn stft_mag_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    // Random noise keeps all bin magnitudes safely away from zero.
    let x = randn(&mut rng, 96, 1);
    let build = |g: &mut Graph, x: &Array2<f64>| -> (NodeId, NodeId) {
        let xid = g.leaf(x.clone());
        let m = g.stft_mag(xid, 32, 32, 16);
        let (r, c) = g.shape(m);
        let w = g.leaf(Array2::from_shape_fn((r, c), |(i, j)| {
            0.2 + 0.05 * i as f64 + 0.03 * j as f64
        }));
        let wm = g.mul(m, w);
        (xid, g.sum(wm))
    };
    let loss_of = |x: &Array2<f64>| -> f64 {
        let mut g = Graph::new();
        let (_, l) = build(&mut g, x);
        g.scalar_value(l)
    };
    let mut g = Graph::new();
    let (xid, l) = build(&mut g, &x);
    let grads = g.backward(l);
    let gx = grads.expect(xid, "stft").clone();
    let mut xm = x;
    // Probe a spread of sample positions (head, frame joins, interior, tail).
    for &i in &[0usize, 5, 16, 31, 32, 47, 63, 80, 95] {
        let num = finite_diff_input(&mut xm, (i, 0), 1e-6, loss_of);
        assert_close(gx[[i, 0]], num, 1e-5, &format!("stft d/dx[{i}]"));
    }
}

#[test]
fn ctc_loss_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let logits = randn(&mut rng, 6, 5);
    let targets = [1usize, 2, 2, 4];
    let blank = 0usize;
    let loss_of = |x: &Array2<f64>| -> f64 {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let lp = g.row_log_softmax(xid);
        let l = g.ctc_loss(lp, &targets, blank);
        g.scalar_value(l)
    };
    let mut g = Graph::new();
    let xid = g.leaf(logits.clone());
    let lp = g.row_log_softmax(xid);
    let l = g.ctc_loss(lp, &targets, blank);
    let grads = g.backward(l);
    let gx = grads.expect(xid, "ctc").clone();
    let mut x = logits;
    for i in 0..6 {
        for j in 0..5 {
            let num = finite_diff_input(&mut x, (i, j), 1e-5, loss_of);
            assert_close(gx[[i, j]], num, 1e-6, &format!("ctc d/dlogits[{i},{j}]"));
        }
    }
}

#[test]
fn composite_attention_block() {
    // A realistic composite: one pre-LN self-attention + FFN block, checked
    // end to end so op chaining (softmax over matmul_nt, masks, residuals)
    // is validated jointly, not just per-op.
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let t = 4usize;
    let d = 6usize;
    let x0 = randn(&mut rng, t, d);
    let wq = randn(&mut rng, d, d) * 0.4;
    let wk = randn(&mut rng, d, d) * 0.4;
    let wv = randn(&mut rng, d, d) * 0.4;
    let w1 = randn(&mut rng, d, 2 * d) * 0.4;
    let w2 = randn(&mut rng, 2 * d, d) * 0.4;
    let gain = Array2::from_elem((1, d), 1.0);
    let bias = Array2::zeros((1, d));

    check_unary("attention_block", x0, move |g, x| {
        let wq = g.leaf(wq.clone());
        let wk = g.leaf(wk.clone());
        let wv = g.leaf(wv.clone());
        let w1 = g.leaf(w1.clone());
        let w2 = g.leaf(w2.clone());
        let gain = g.leaf(gain.clone());
        let bias = g.leaf(bias.clone());
        let xn = g.layer_norm(x, gain, bias, 1e-5);
        let q = g.matmul(xn, wq);
        let k = g.matmul(xn, wk);
        let v = g.matmul(xn, wv);
        let scores = g.matmul_nt(q, k);
        let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
        let mask = g.leaf(revoice_nn::ops::causal_mask(t));
        let masked = g.add(scaled, mask);
        let attn = g.row_softmax(masked);
        let ctx = g.matmul(attn, v);
        let res1 = g.add(x, ctx);
        let rn = g.layer_norm(res1, gain, bias, 1e-5);
        let h = g.matmul(rn, w1);
        let ha = g.relu(h);
        let out = g.matmul(ha, w2);
        g.add(res1, out)
    });
}
