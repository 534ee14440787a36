//! Magnitude STFT as a differentiable op (used by spectral reconstruction
//! losses). Waveform nodes are (N x 1).

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::graph::{Graph, NodeId};

pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

fn frame_spectra(
    x: &Array2<f64>,
    window: &[f64],
    fft_size: usize,
    hop: usize,
    fft: &dyn rustfft::Fft<f64>,
) -> Vec<Vec<Complex<f64>>> {
    let n = x.nrows();
    let win_len = window.len();
    let n_frames = 1 + (n - win_len) / hop;
    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
        for (j, w) in window.iter().enumerate() {
            buf[j] = Complex::new(x[[f * hop + j, 0]] * w, 0.0);
        }
        fft.process(&mut buf);
        out.push(buf);
    }
    out
}

impl Graph {
    /// Magnitude spectrogram (frames x fft_size/2+1) of a waveform node with a
    /// Hann window of `win_len` samples zero-padded to `fft_size`.
    pub fn stft_mag(&mut self, x: NodeId, fft_size: usize, win_len: usize, hop: usize) -> NodeId {
        assert!(win_len <= fft_size);
        assert_eq!(self.val(x).ncols(), 1, "waveform node must be Nx1");
        let n = self.val(x).nrows();
        assert!(
            n >= win_len,
            "waveform shorter ({n}) than analysis window ({win_len})"
        );
        let window = hann_window(win_len);
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(fft_size);
        let inv = planner.plan_fft_inverse(fft_size);

        let spectra = frame_spectra(self.val(x), &window, fft_size, hop, fwd.as_ref());
        let bins = fft_size / 2 + 1;
        let n_frames = spectra.len();
        let mut mags = Array2::zeros((n_frames, bins));
        for (f, spec) in spectra.iter().enumerate() {
            for k in 0..bins {
                mags[[f, k]] = spec[k].norm();
            }
        }

        self.push_op(mags, move |vals, g, sink| {
            // Recompute spectra; cheaper than holding every frame's FFT.
            let spectra = frame_spectra(&vals[x.0], &window, fft_size, hop, fwd.as_ref());
            let mut grad = Array2::zeros(vals[x.0].dim());
            let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
            for (f, spec) in spectra.iter().enumerate() {
                for c in buf.iter_mut() {
                    *c = Complex::new(0.0, 0.0);
                }
                for k in 0..bins {
                    let mag = spec[k].norm();
                    if mag > 1e-300 {
                        buf[k] = spec[k] * (g[[f, k]] / mag);
                    }
                }
                // Upper bins stay zero: only bins 0..=N/2 enter the loss, and
                // Re(unnormalized inverse) of the half-filled spectrum is
                // exactly sum_k g_k d|X_k|/dx_n without double counting.
                inv.process(&mut buf);
                for (j, w) in window.iter().enumerate() {
                    grad[[f * hop + j, 0]] += buf[j].re * w;
                }
            }
            sink(x, grad);
        })
    }
}
