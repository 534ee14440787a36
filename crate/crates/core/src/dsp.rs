//! Signal-processing primitives: STFT analysis/synthesis, mel filter banks,
//! delta features, an autocorrelation pitch tracker, and SNR/spectral
//! distance measures.
//!
//! The pitch tracker here is the single prosody reference for the whole
//! project: every F0-related claim (speaker pitch ratios, contour flattening,
//! prosody statistics in evaluation) is measured through it.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Periodic Hann window (matches the differentiable STFT in revoice-nn).
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Magnitude-and-phase STFT with centered frames: frame t covers
/// `[t*hop - win/2, t*hop + win/2)`, out-of-range samples are zero.
/// Frame count is `ceil(n / hop)`, so a 1 s signal at a 10 ms hop gives
/// exactly 100 frames.
pub struct Stft {
    pub fft_size: usize,
    pub win_len: usize,
    pub hop: usize,
    window: Vec<f64>,
}

impl Stft {
    pub fn new(fft_size: usize, win_len: usize, hop: usize) -> Self {
        assert!(win_len <= fft_size && hop > 0 && hop <= win_len);
        Stft {
            fft_size,
            win_len,
            hop,
            window: hann(win_len),
        }
    }

    pub fn num_frames(&self, n: usize) -> usize {
        n.div_ceil(self.hop)
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Complex half-spectra, one row of `fft_size/2 + 1` bins per frame.
    pub fn analyze(&self, x: &[f64]) -> Array2<Complex<f64>> {
        let frames = self.num_frames(x.len());
        let bins = self.num_bins();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(self.fft_size);
        let mut out = Array2::from_elem((frames, bins), Complex::new(0.0, 0.0));
        let half = (self.win_len / 2) as isize;
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        for t in 0..frames {
            let start = t as isize * self.hop as isize - half;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(0.0, 0.0);
                if i < self.win_len {
                    let src = start + i as isize;
                    if src >= 0 && (src as usize) < x.len() {
                        *b = Complex::new(x[src as usize] * self.window[i], 0.0);
                    }
                }
            }
            fft.process(&mut buf);
            for k in 0..bins {
                out[[t, k]] = buf[k];
            }
        }
        out
    }

    /// Weighted overlap-add inverse of `analyze`, trimmed/padded to `n`
    /// output samples. Normalizes by the summed squared window so the
    /// round trip is the identity wherever the window coverage is nonzero.
    pub fn synthesize(&self, spectra: &Array2<Complex<f64>>, n: usize) -> Vec<f64> {
        let frames = spectra.nrows();
        let bins = self.num_bins();
        assert_eq!(bins, spectra.ncols());
        let mut planner = FftPlanner::new();
        let ifft = planner.plan_fft_inverse(self.fft_size);
        let mut y = vec![0.0; n];
        let mut norm = vec![0.0; n];
        let half = (self.win_len / 2) as isize;
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        for t in 0..frames {
            for b in buf.iter_mut() {
                *b = Complex::new(0.0, 0.0);
            }
            for k in 0..bins {
                buf[k] = spectra[[t, k]];
                // Hermitian mirror for a real output signal.
                if k > 0 && k < self.fft_size - k {
                    buf[self.fft_size - k] = spectra[[t, k]].conj();
                }
            }
            ifft.process(&mut buf);
            let start = t as isize * self.hop as isize - half;
            for i in 0..self.win_len {
                let dst = start + i as isize;
                if dst >= 0 && (dst as usize) < n {
                    let w = self.window[i];
                    y[dst as usize] += buf[i].re / self.fft_size as f64 * w;
                    norm[dst as usize] += w * w;
                }
            }
        }
        for (s, &m) in y.iter_mut().zip(&norm) {
            if m > 1e-12 {
                *s /= m;
            }
        }
        y
    }
}

/// Mel filter bank: `n_mels` triangular filters on the mel scale between
/// `fmin` and `fmax`, over `fft_size/2 + 1` linear bins.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Array2<f64> {
    fn to_mel(hz: f64) -> f64 {
        2595.0 * (1.0 + hz / 700.0).log10()
    }
    fn from_mel(m: f64) -> f64 {
        700.0 * (10f64.powf(m / 2595.0) - 1.0)
    }
    let bins = fft_size / 2 + 1;
    let mel_lo = to_mel(fmin);
    let mel_hi = to_mel(fmax);
    // n_mels + 2 edge frequencies, converted back to bin positions.
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| {
            let m = mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64;
            from_mel(m) * fft_size as f64 / sample_rate as f64
        })
        .collect();
    let mut fb = Array2::zeros((n_mels, bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64;
            let v = if f < lo || f > hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo).max(1e-9)
            } else {
                (hi - f) / (hi - mid).max(1e-9)
            };
            fb[[m, k]] = v;
        }
    }
    fb
}

/// Log floor inside `log_mel`: silence maps exactly to `ln(LOG_MEL_FLOOR)`.
pub const LOG_MEL_FLOOR: f64 = 1e-10;

/// Log mel-filter-bank energies: T x n_mels, frames from `stft`.
pub fn log_mel(stft: &Stft, fb: &Array2<f64>, x: &[f64]) -> Array2<f64> {
    let spec = stft.analyze(x);
    let (frames, bins) = spec.dim();
    let n_mels = fb.nrows();
    assert_eq!(fb.ncols(), bins);
    let mut out = Array2::zeros((frames, n_mels));
    for t in 0..frames {
        for m in 0..n_mels {
            let mut acc = 0.0;
            for k in 0..bins {
                let w = fb[[m, k]];
                if w > 0.0 {
                    acc += w * spec[[t, k]].norm();
                }
            }
            out[[t, m]] = (acc + LOG_MEL_FLOOR).ln();
        }
    }
    out
}

/// First-order delta features by linear regression over +/-2 neighbors with
/// edge replication; a time-constant input yields exactly zero.
pub fn deltas(feat: &Array2<f64>) -> Array2<f64> {
    let (t_len, d) = feat.dim();
    let mut out = Array2::zeros((t_len, d));
    let denom = 2.0 * (1.0 + 4.0); // 2 * sum n^2 for n in 1..=2
    for t in 0..t_len {
        for j in 0..d {
            let mut acc = 0.0;
            for n in 1..=2usize {
                let fwd = feat[[(t + n).min(t_len - 1), j]];
                let bwd = feat[[t.saturating_sub(n), j]];
                acc += n as f64 * (fwd - bwd);
            }
            out[[t, j]] = acc / denom;
        }
    }
    out
}

/// One pitch-tracker frame: F0 estimate (None = unvoiced) and frame RMS.
#[derive(Debug, Clone, Copy)]
pub struct PitchFrame {
    pub f0: Option<f64>,
    pub rms: f64,
}

/// Autocorrelation pitch tracker over 40 ms windows at a 10 ms hop.
///
/// For each frame the normalized autocorrelation is scanned over lags
/// covering 60-400 Hz; the smallest lag whose local peak reaches 92% of the
/// global peak wins (guards against octave-down errors on periodic signals),
/// refined by parabolic interpolation. Frames with weak periodicity or low
/// energy are unvoiced.
pub fn pitch_track(x: &[f64], sample_rate: u32) -> Vec<PitchFrame> {
    let sr = sample_rate as f64;
    let win = (0.040 * sr) as usize;
    let hop = (0.010 * sr) as usize;
    let lag_min = (sr / 400.0).floor() as usize;
    let lag_max = ((sr / 60.0).ceil() as usize).min(win.saturating_sub(2));
    let mut frames = Vec::new();
    if x.len() < win || lag_min + 2 >= lag_max {
        return frames;
    }
    let peak_rms = {
        let mut best: f64 = 0.0;
        let mut t = 0;
        while t + win <= x.len() {
            let f = &x[t..t + win];
            best = best.max(rms(f));
            t += hop;
        }
        best
    };
    let mut t = 0;
    while t + win <= x.len() {
        let f = &x[t..t + win];
        let frame_rms = rms(f);
        // Energy gates: absolute (digital silence) and relative to the
        // loudest frame (pauses within an utterance).
        if frame_rms < 1e-5 || frame_rms < 0.05 * peak_rms {
            frames.push(PitchFrame { f0: None, rms: frame_rms });
            t += hop;
            continue;
        }
        let mut r = vec![0.0; lag_max + 1];
        for lag in lag_min..=lag_max {
            let m = win - lag;
            let mut num = 0.0;
            let mut e0 = 0.0;
            let mut e1 = 0.0;
            for i in 0..m {
                num += f[i] * f[i + lag];
                e0 += f[i] * f[i];
                e1 += f[i + lag] * f[i + lag];
            }
            r[lag] = num / (e0 * e1).sqrt().max(1e-12);
        }
        let pmax = r[lag_min..=lag_max].iter().cloned().fold(f64::MIN, f64::max);
        if pmax < 0.5 {
            frames.push(PitchFrame { f0: None, rms: frame_rms });
            t += hop;
            continue;
        }
        // Smallest acceptable local maximum.
        let mut chosen = None;
        for lag in (lag_min + 1)..lag_max {
            if r[lag] >= 0.92 * pmax && r[lag] >= r[lag - 1] && r[lag] >= r[lag + 1] {
                chosen = Some(lag);
                break;
            }
        }
        let f0 = chosen.map(|lag| {
            // Parabolic refinement around the peak.
            let (a, b, c) = (r[lag - 1], r[lag], r[lag + 1]);
            let denom = a - 2.0 * b + c;
            let delta = if denom.abs() > 1e-12 {
                (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            sr / (lag as f64 + delta)
        });
        frames.push(PitchFrame { f0, rms: frame_rms });
        t += hop;
    }
    frames
}

/// Summary statistics of a pitch track.
#[derive(Debug, Clone, Copy, Default)]
pub struct PitchStats {
    pub f0_mean: f64,
    pub f0_std: f64,
    pub voiced_fraction: f64,
}

pub fn pitch_stats(frames: &[PitchFrame]) -> PitchStats {
    let voiced: Vec<f64> = frames.iter().filter_map(|f| f.f0).collect();
    if voiced.is_empty() || frames.is_empty() {
        return PitchStats::default();
    }
    let mean = voiced.iter().sum::<f64>() / voiced.len() as f64;
    let var = voiced.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / voiced.len() as f64;
    PitchStats {
        f0_mean: mean,
        f0_std: var.sqrt(),
        voiced_fraction: voiced.len() as f64 / frames.len() as f64,
    }
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// SNR in dB of `test` against `reference`; the noise is their difference.
/// Lengths must match. Returns +inf for a zero noise residual.
pub fn snr_db(reference: &[f64], test: &[f64]) -> f64 {
    assert_eq!(reference.len(), test.len());
    let sig: f64 = reference.iter().map(|v| v * v).sum();
    let noise: f64 = reference
        .iter()
        .zip(test)
        .map(|(r, t)| (t - r) * (t - r))
        .sum();
    if noise <= 0.0 {
        return f64::INFINITY;
    }
    10.0 * (sig / noise).log10()
}

/// The STFT resolutions used by both the codec's training loss and the
/// evaluation-side spectral distance.
pub const SPECTRAL_RESOLUTIONS: [(usize, usize); 3] = [(512, 128), (1024, 256), (2048, 512)];

/// Multi-resolution spectral L1 distance: mean absolute difference of STFT
/// magnitudes, averaged over the standard resolutions. Signals are zero-padded
/// to the longer length so mild length mismatches are penalized, not fatal.
pub fn spectral_l1(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(b.len());
    let mut pa = a.to_vec();
    let mut pb = b.to_vec();
    pa.resize(n, 0.0);
    pb.resize(n, 0.0);
    let mut total = 0.0;
    for &(fft, hop) in &SPECTRAL_RESOLUTIONS {
        let stft = Stft::new(fft, fft, hop);
        let sa = stft.analyze(&pa);
        let sb = stft.analyze(&pb);
        let mut acc = 0.0;
        for (x, y) in sa.iter().zip(sb.iter()) {
            acc += (x.norm() - y.norm()).abs();
        }
        total += acc / sa.len() as f64;
    }
    total / SPECTRAL_RESOLUTIONS.len() as f64
}
