//! Differentiable operations on `Graph` nodes.

use ndarray::{s, Array2, Axis};

use crate::graph::{Graph, NodeId};

impl Graph {
    /// Id the next pushed node will receive; lets a backward closure read its
    /// own forward output.
    fn next_id(&self) -> NodeId {
        NodeId(self.len())
    }

    // ---- elementwise arithmetic ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a.0] + &self.vals[b.0];
        self.push_op(v, move |_, g, sink| {
            sink(a, g.clone());
            sink(b, g.clone());
        })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a.0] - &self.vals[b.0];
        self.push_op(v, move |_, g, sink| {
            sink(a, g.clone());
            sink(b, -g.clone());
        })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a.0] * &self.vals[b.0];
        self.push_op(v, move |vals, g, sink| {
            sink(a, g * &vals[b.0]);
            sink(b, g * &vals[a.0]);
        })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.vals[a.0] * c;
        self.push_op(v, move |_, g, sink| sink(a, g * c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.vals[a.0] + c;
        self.push_op(v, move |_, g, sink| sink(a, g.clone()))
    }

    pub fn sqr(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].mapv(|x| x * x);
        self.push_op(v, move |vals, g, sink| sink(a, 2.0 * g * &vals[a.0]))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].mapv(f64::abs);
        self.push_op(v, move |vals, g, sink| {
            sink(a, g * &vals[a.0].mapv(|x| if x == 0.0 { 0.0 } else { x.signum() }))
        })
    }

    // ---- matrix products ----

    /// a (MxK) @ b (KxN) -> MxN
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dims");
        let v = va.dot(vb);
        self.push_op(v, move |vals, g, sink| {
            sink(a, g.dot(&vals[b.0].t()));
            sink(b, vals[a.0].t().dot(g));
        })
    }

    /// a (MxK) @ b^T (NxK) -> MxN
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(va.ncols(), vb.ncols(), "matmul_nt inner dims");
        let v = va.dot(&vb.t());
        self.push_op(v, move |vals, g, sink| {
            sink(a, g.dot(&vals[b.0]));
            sink(b, g.t().dot(&vals[a.0]));
        })
    }

    // ---- broadcasts ----

    /// a (MxN) + r (1xN) broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, r: NodeId) -> NodeId {
        let (va, vr) = (&self.vals[a.0], &self.vals[r.0]);
        assert_eq!(vr.nrows(), 1, "add_row rhs must be 1xN");
        assert_eq!(va.ncols(), vr.ncols(), "add_row width");
        let v = va + vr;
        self.push_op(v, move |_, g, sink| {
            sink(a, g.clone());
            sink(r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
        })
    }

    /// a (MxN) / c (Mx1) broadcast over columns.
    pub fn div_col(&mut self, a: NodeId, c: NodeId) -> NodeId {
        let (va, vc) = (&self.vals[a.0], &self.vals[c.0]);
        assert_eq!(vc.ncols(), 1, "div_col rhs must be Mx1");
        assert_eq!(va.nrows(), vc.nrows(), "div_col height");
        let v = va / vc;
        self.push_op(v, move |vals, g, sink| {
            let vc = &vals[c.0];
            sink(a, g / vc);
            let num = (g * &vals[a.0]).sum_axis(Axis(1)).insert_axis(Axis(1));
            sink(c, -num / vc.mapv(|x| x * x));
        })
    }

    // ---- activations ----

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].mapv(f64::tanh);
        let id = self.next_id();
        self.push_op(v, move |vals, g, sink| {
            sink(a, g * &vals[id.0].mapv(|t| 1.0 - t * t));
        })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let id = self.next_id();
        self.push_op(v, move |vals, g, sink| {
            sink(a, g * &vals[id.0].mapv(|s| s * (1.0 - s)));
        })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].mapv(|x| x.max(0.0));
        self.push_op(v, move |vals, g, sink| {
            sink(a, g * &vals[a.0].mapv(|x| f64::from(x > 0.0)))
        })
    }

    pub fn elu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let v = self.vals[a.0].mapv(|x| if x > 0.0 { x } else { alpha * (x.exp() - 1.0) });
        let id = self.next_id();
        self.push_op(v, move |vals, g, sink| {
            let x = &vals[a.0];
            let y = &vals[id.0];
            let mut d = Array2::zeros(x.dim());
            ndarray::Zip::from(&mut d).and(x).and(y).for_each(|d, &x, &y| {
                *d = if x > 0.0 { 1.0 } else { y + alpha };
            });
            sink(a, g * &d);
        })
    }

    // ---- softmax family ----

    /// Softmax along each row.
    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let v = row_softmax_value(&self.vals[a.0]);
        let id = self.next_id();
        self.push_op(v, move |vals, g, sink| {
            let y = &vals[id.0];
            let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
            sink(a, y * &(g - &dot));
        })
    }

    /// Log-softmax along each row.
    pub fn row_log_softmax(&mut self, a: NodeId) -> NodeId {
        let v = row_log_softmax_value(&self.vals[a.0]);
        let id = self.next_id();
        self.push_op(v, move |vals, g, sink| {
            let sm = vals[id.0].mapv(f64::exp);
            let rows = g.sum_axis(Axis(1)).insert_axis(Axis(1));
            sink(a, g - &(sm * &rows));
        })
    }

    // ---- normalization ----

    /// Per-row layer norm with learned gain and bias (both 1xD).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let vx = &self.vals[x.0];
        let d = vx.ncols() as f64;
        let mean = vx.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        let centered = vx - &mean;
        let var = centered
            .mapv(|v| v * v)
            .mean_axis(Axis(1))
            .unwrap()
            .insert_axis(Axis(1));
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let v = &xhat * &self.vals[gain.0] + &self.vals[bias.0];
        self.push_op(v, move |vals, g, sink| {
            let vx = &vals[x.0];
            let mean = vx.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
            let centered = vx - &mean;
            let var = centered
                .mapv(|v| v * v)
                .mean_axis(Axis(1))
                .unwrap()
                .insert_axis(Axis(1));
            let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
            let xhat = &centered * &inv_std;
            sink(gain, (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
            sink(bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            let dxhat = g * &vals[gain.0];
            let m1 = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
            let m2 = (&dxhat * &xhat).sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
            sink(x, (&dxhat - &m1 - &(&xhat * &m2)) * &inv_std);
        })
    }

    /// Row-wise euclidean norms as Mx1: sqrt(sum x^2 + eps).
    pub fn row_norms(&mut self, a: NodeId, eps: f64) -> NodeId {
        let v = self.vals[a.0]
            .map_axis(Axis(1), |r| (r.dot(&r) + eps).sqrt())
            .insert_axis(Axis(1));
        let id = self.next_id();
        self.push_op(v, move |vals, g, sink| {
            sink(a, &vals[a.0] * &(g / &vals[id.0]));
        })
    }

    /// Rows scaled to unit euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let norms = self.row_norms(a, eps);
        self.div_col(a, norms)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let shape = self.vals[a.0].dim();
        let v = Array2::from_elem((1, 1), self.vals[a.0].sum());
        self.push_op(v, move |_, g, sink| {
            sink(a, Array2::from_elem(shape, g[[0, 0]]))
        })
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = {
            let d = self.vals[a.0].dim();
            (d.0 * d.1) as f64
        };
        let total = self.sum(a);
        self.scale(total, 1.0 / n)
    }

    /// Column means as 1xN.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let m = self.vals[a.0].nrows();
        let v = self.vals[a.0]
            .mean_axis(Axis(0))
            .unwrap()
            .insert_axis(Axis(0));
        self.push_op(v, move |_, g, sink| {
            let mut out = Array2::zeros((m, g.ncols()));
            let scaled = g.row(0).mapv(|x| x / m as f64);
            for mut r in out.rows_mut() {
                r.assign(&scaled);
            }
            sink(a, out);
        })
    }

    // ---- shape ops ----

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].t().to_owned();
        self.push_op(v, move |_, g, sink| sink(a, g.t().to_owned()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.vals[p.0].view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows widths");
        let parts = parts.to_vec();
        let sizes: Vec<usize> = parts.iter().map(|p| self.vals[p.0].nrows()).collect();
        self.push_op(v, move |_, g, sink| {
            let mut row = 0;
            for (p, n) in parts.iter().zip(&sizes) {
                sink(*p, g.slice(s![row..row + n, ..]).to_owned());
                row += n;
            }
        })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.vals[p.0].view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols heights");
        let parts = parts.to_vec();
        let sizes: Vec<usize> = parts.iter().map(|p| self.vals[p.0].ncols()).collect();
        self.push_op(v, move |_, g, sink| {
            let mut col = 0;
            for (p, n) in parts.iter().zip(&sizes) {
                sink(*p, g.slice(s![.., col..col + n]).to_owned());
                col += n;
            }
        })
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let full = self.vals[a.0].dim();
        assert!(start <= end && end <= full.0, "slice_rows bounds");
        let v = self.vals[a.0].slice(s![start..end, ..]).to_owned();
        self.push_op(v, move |_, g, sink| {
            let mut out = Array2::zeros(full);
            out.slice_mut(s![start..end, ..]).assign(g);
            sink(a, out);
        })
    }

    /// Select rows by index (with repetition allowed).
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let src = &self.vals[a.0];
        let dim = src.dim();
        let mut v = Array2::zeros((idx.len(), dim.1));
        for (out_r, &i) in idx.iter().enumerate() {
            assert!(i < dim.0, "gather_rows index out of range");
            v.row_mut(out_r).assign(&src.row(i));
        }
        let idx = idx.to_vec();
        self.push_op(v, move |_, g, sink| {
            let mut out = Array2::zeros(dim);
            for (out_r, &i) in idx.iter().enumerate() {
                let mut row = out.row_mut(i);
                row += &g.row(out_r);
            }
            sink(a, out);
        })
    }

    /// Pick individual entries (r, c) as a Kx1 column.
    pub fn gather_entries(&mut self, a: NodeId, picks: &[(usize, usize)]) -> NodeId {
        let src = &self.vals[a.0];
        let dim = src.dim();
        let mut v = Array2::zeros((picks.len(), 1));
        for (k, &(r, c)) in picks.iter().enumerate() {
            assert!(r < dim.0 && c < dim.1, "gather_entries index out of range");
            v[[k, 0]] = src[[r, c]];
        }
        let picks = picks.to_vec();
        self.push_op(v, move |_, g, sink| {
            let mut out = Array2::zeros(dim);
            for (k, &(r, c)) in picks.iter().enumerate() {
                out[[r, c]] += g[[k, 0]];
            }
            sink(a, out);
        })
    }

    /// Rows of an embedding table (VxD) selected by token id.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        self.gather_rows(table, ids)
    }

    // ---- losses ----

    /// Mean negative log-likelihood of the given (row, class) targets taken
    /// from a log-probability matrix.
    pub fn nll_mean(&mut self, log_probs: NodeId, targets: &[(usize, usize)]) -> NodeId {
        let picked = self.gather_entries(log_probs, targets);
        let total = self.sum(picked);
        self.scale(total, -1.0 / targets.len() as f64)
    }
}

pub(crate) fn row_softmax_value(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (mut orow, xrow) in out.rows_mut().into_iter().zip(x.rows()) {
        let m = xrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = (v - m).exp();
            z += *o;
        }
        orow.mapv_inplace(|v| v / z);
    }
    out
}

pub(crate) fn row_log_softmax_value(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (mut orow, xrow) in out.rows_mut().into_iter().zip(x.rows()) {
        let m = xrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = xrow.iter().map(|&v| (v - m).exp()).sum();
        let lz = m + z.ln();
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = v - lz;
        }
    }
    out
}

/// Additive attention mask: 0 on and below the diagonal, a large negative
/// value above it, so position t attends to positions <= t.
pub fn causal_mask(len: usize) -> Array2<f64> {
    let mut m = Array2::zeros((len, len));
    for i in 0..len {
        for j in (i + 1)..len {
            m[[i, j]] = -1e30;
        }
    }
    m
}
