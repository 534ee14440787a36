//! 1-D convolution ops, time-major: signals are (time x channels).
//!
//! conv1d is built from an im2col gather followed by a matmul so the heavy
//! lifting stays inside the blocked matrix product.

use ndarray::Array2;

use crate::graph::{Graph, NodeId};

impl Graph {
    /// Unfold a (L x C) signal into (L_out x k*C) patch rows.
    ///
    /// Patch row t covers input rows `t*stride - pad_left .. + k`, zero padded
    /// outside the signal. `l_out` is chosen by the caller; rows whose window
    /// lies fully outside the input are all-zero.
    pub fn im2col(
        &mut self,
        x: NodeId,
        k: usize,
        stride: usize,
        pad_left: usize,
        l_out: usize,
    ) -> NodeId {
        let src = self.val(x);
        let (l_in, c) = src.dim();
        let mut v = Array2::zeros((l_out, k * c));
        for t in 0..l_out {
            let base = (t * stride) as isize - pad_left as isize;
            for j in 0..k {
                let r = base + j as isize;
                if r >= 0 && (r as usize) < l_in {
                    let r = r as usize;
                    for ch in 0..c {
                        v[[t, j * c + ch]] = src[[r, ch]];
                    }
                }
            }
        }
        self.push_op(v, move |_, g, sink| {
            let mut out = Array2::zeros((l_in, c));
            for t in 0..l_out {
                let base = (t * stride) as isize - pad_left as isize;
                for j in 0..k {
                    let r = base + j as isize;
                    if r >= 0 && (r as usize) < l_in {
                        let r = r as usize;
                        for ch in 0..c {
                            out[[r, ch]] += g[[t, j * c + ch]];
                        }
                    }
                }
            }
            sink(x, out);
        })
    }

    /// Strided 1-D convolution: x (L x C_in), w (k*C_in x C_out), bias (1 x C_out).
    ///
    /// Output length is ceil(L / stride) with centred zero padding
    /// (pad_left = (k - stride) / 2 when k >= stride), so stacking layers whose
    /// strides divide L keeps lengths exact at every stage.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        k: usize,
        stride: usize,
    ) -> NodeId {
        let l_in = self.val(x).nrows();
        let c_in = self.val(x).ncols();
        assert_eq!(self.val(w).nrows(), k * c_in, "conv1d weight rows");
        let l_out = l_in.div_ceil(stride);
        let pad_left = k.saturating_sub(stride) / 2;
        let cols = self.im2col(x, k, stride, pad_left, l_out);
        let y = self.matmul(cols, w);
        self.add_row(y, bias)
    }

    /// Insert (factor - 1) zero rows after each input row: (L x C) -> (L*factor x C).
    /// Input row i lands at output row i*factor.
    pub fn upsample_zeros(&mut self, x: NodeId, factor: usize) -> NodeId {
        assert!(factor >= 1);
        let src = self.val(x);
        let (l, c) = src.dim();
        let mut v = Array2::zeros((l * factor, c));
        for i in 0..l {
            v.row_mut(i * factor).assign(&src.row(i));
        }
        self.push_op(v, move |_, g, sink| {
            let mut out = Array2::zeros((l, c));
            for i in 0..l {
                out.row_mut(i).assign(&g.row(i * factor));
            }
            sink(x, out);
        })
    }

    /// Transposed convolution as zero-stuffing followed by a stride-1 conv,
    /// sized so a (L x C_in) input yields exactly (L*factor x C_out).
    pub fn conv_transpose1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        k: usize,
        factor: usize,
    ) -> NodeId {
        let up = self.upsample_zeros(x, factor);
        self.conv1d(up, w, bias, k, 1)
    }
}
