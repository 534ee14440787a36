//! Front-end features for the content encoder: 80-band log filter-bank
//! energies with deltas on the audio side, and a DCT→LDA reduction of the
//! lip trajectory on the visual side, with linear-interpolation alignment
//! between the two frame rates.

use ndarray::{Array1, Array2};

use crate::dsp::{self, Stft};
use crate::error::{invalid_input, Result};

/// Audio feature geometry: 80 mels over 25 ms windows at a 10 ms hop.
pub const NUM_MELS: usize = 80;
pub const AUDIO_DIM: usize = 2 * NUM_MELS;
const WIN_SEC: f64 = 0.025;
const HOP_SEC: f64 = 0.010;

/// Log mel energies + first-order deltas: T x 160, one row per 10 ms.
pub fn extract_audio_features(waveform: &[f64], sample_rate: u32) -> Result<Array2<f64>> {
    if waveform.is_empty() {
        return Err(invalid_input("empty waveform"));
    }
    let win = (sample_rate as f64 * WIN_SEC) as usize;
    let hop = (sample_rate as f64 * HOP_SEC) as usize;
    let fft = win.next_power_of_two();
    let stft = Stft::new(fft, win, hop);
    let fb = dsp::mel_filterbank(NUM_MELS, fft, sample_rate, 0.0, sample_rate as f64 / 2.0);
    let mel = dsp::log_mel(&stft, &fb, waveform);
    let delta = dsp::deltas(&mel);
    let t = mel.nrows();
    let mut out = Array2::zeros((t, AUDIO_DIM));
    for i in 0..t {
        for j in 0..NUM_MELS {
            out[[i, j]] = mel[[i, j]];
            out[[i, NUM_MELS + j]] = delta[[i, j]];
        }
    }
    Ok(out)
}

/// Number of audio frames a waveform of `n` samples produces.
pub fn audio_frames(n: usize, sample_rate: u32) -> usize {
    n.div_ceil((sample_rate as f64 * HOP_SEC) as usize)
}

/// Orthonormal DCT-II of a real vector.
pub fn dct(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    assert!(n > 0);
    let mut out = vec![0.0; n];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, &v) in x.iter().enumerate() {
            acc += v * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        *o = acc * scale;
    }
    out
}

/// Windowed DCT of a multi-channel trajectory: for each window of `window`
/// frames advanced by `hop`, the first `coeffs` DCT coefficients of every
/// channel, concatenated channel-major. Returns the feature matrix and each
/// window's center frame index in the source trajectory.
pub fn dct_windows(
    traj: &Array2<f64>,
    window: usize,
    hop: usize,
    coeffs: usize,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let (t, channels) = traj.dim();
    assert!(window > 0 && hop > 0 && coeffs > 0 && coeffs <= window);
    if t < window {
        return Err(invalid_input(format!(
            "trajectory of {t} frames is shorter than one {window}-frame window"
        )));
    }
    let num = (t - window) / hop + 1;
    let mut out = Array2::zeros((num, channels * coeffs));
    let mut centers = Vec::with_capacity(num);
    let mut buf = vec![0.0; window];
    for w in 0..num {
        let start = w * hop;
        centers.push(start + window / 2);
        for c in 0..channels {
            for i in 0..window {
                buf[i] = traj[[start + i, c]];
            }
            let d = dct(&buf);
            for k in 0..coeffs {
                out[[w, c * coeffs + k]] = d[k];
            }
        }
    }
    Ok((out, centers))
}

/// Fisher linear discriminant analysis: projection onto the top-K
/// generalized eigenvectors of (within-scatter + eps I)^-1 * between-scatter.
#[derive(Debug, Clone)]
pub struct Lda {
    /// Global mean, subtracted before projection.
    pub mean: Array1<f64>,
    /// D x K projection.
    pub w: Array2<f64>,
}

impl Lda {
    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    /// Project rows of `x` (N x D) to N x K.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let (n, d) = x.dim();
        assert_eq!(d, self.mean.len());
        let k = self.k();
        let mut out = Array2::zeros((n, k));
        for i in 0..n {
            for j in 0..k {
                let mut acc = 0.0;
                for m in 0..d {
                    acc += (x[[i, m]] - self.mean[m]) * self.w[[m, j]];
                }
                out[[i, j]] = acc;
            }
        }
        out
    }
}

/// Class-conditional scatter matrices: (within, between, global mean).
fn scatter(x: &Array2<f64>, labels: &[usize]) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let (n, d) = x.dim();
    assert_eq!(n, labels.len());
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; num_classes];
    let mut means = Array2::<f64>::zeros((num_classes, d));
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for j in 0..d {
            means[[c, j]] += x[[i, j]];
        }
    }
    for c in 0..num_classes {
        if counts[c] > 0 {
            for j in 0..d {
                means[[c, j]] /= counts[c] as f64;
            }
        }
    }
    let mut global = Array1::<f64>::zeros(d);
    for i in 0..n {
        for j in 0..d {
            global[j] += x[[i, j]];
        }
    }
    global.mapv_inplace(|v| v / n as f64);

    let mut sw = Array2::<f64>::zeros((d, d));
    for (i, &c) in labels.iter().enumerate() {
        for a in 0..d {
            let da = x[[i, a]] - means[[c, a]];
            for b in a..d {
                let v = da * (x[[i, b]] - means[[c, b]]);
                sw[[a, b]] += v;
            }
        }
    }
    let mut sb = Array2::<f64>::zeros((d, d));
    for c in 0..num_classes {
        if counts[c] == 0 {
            continue;
        }
        let w = counts[c] as f64;
        for a in 0..d {
            let da = means[[c, a]] - global[a];
            for b in a..d {
                sb[[a, b]] += w * da * (means[[c, b]] - global[b]);
            }
        }
    }
    // Mirror the upper triangles.
    for a in 0..d {
        for b in 0..a {
            sw[[a, b]] = sw[[b, a]];
            sb[[a, b]] = sb[[b, a]];
        }
    }
    (sw, sb, global)
}

/// Cholesky factor L of a symmetric positive-definite matrix (A = L L^T).
fn cholesky(a: &Array2<f64>) -> Array2<f64> {
    let d = a.nrows();
    assert_eq!(d, a.ncols());
    let mut l = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                assert!(sum > 0.0, "matrix not positive definite at {i}");
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    l
}

/// Solve L y = b for lower-triangular L.
fn solve_lower(l: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let d = b.len();
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l[[i, k]] * y[k];
        }
        y[i] = acc / l[[i, i]];
    }
    y
}

/// Solve L^T y = b for lower-triangular L.
fn solve_upper_t(l: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let d = b.len();
    let mut y = vec![0.0; d];
    for i in (0..d).rev() {
        let mut acc = b[i];
        for k in i + 1..d {
            acc -= l[[k, i]] * y[k];
        }
        y[i] = acc / l[[i, i]];
    }
    y
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix: eigenvalues in
/// descending order with matching eigenvector columns.
fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let d = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(d);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in p + 1..d {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..d).collect();
    let vals: Vec<f64> = (0..d).map(|i| m[[i, i]]).collect();
    idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let sorted_vals: Vec<f64> = idx.iter().map(|&i| vals[i]).collect();
    let mut sorted_vecs = Array2::<f64>::zeros((d, d));
    for (col, &i) in idx.iter().enumerate() {
        for r in 0..d {
            sorted_vecs[[r, col]] = v[[r, i]];
        }
    }
    (sorted_vals, sorted_vecs)
}

/// Fit Fisher LDA on labeled rows. `k` must be at most classes - 1; the
/// within-class scatter is regularized by `eps * I`.
pub fn fit_lda(x: &Array2<f64>, labels: &[usize], k: usize, eps: f64) -> Result<Lda> {
    let (n, d) = x.dim();
    if n != labels.len() || n < 2 {
        return Err(invalid_input("LDA needs matching features and labels, n >= 2"));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(invalid_input("LDA needs at least 2 classes"));
    }
    if k > present.len() - 1 {
        return Err(invalid_input(format!(
            "LDA dimension {k} exceeds classes-1 = {}",
            present.len() - 1
        )));
    }
    if k == 0 || k > d {
        return Err(invalid_input("LDA dimension must be in 1..=feature dim"));
    }
    let (mut sw, sb, mean) = scatter(x, labels);
    for i in 0..d {
        sw[[i, i]] += eps;
    }
    // Generalized symmetric eigenproblem via Cholesky whitening:
    // Sw = L L^T, eigen(L^-1 Sb L^-T) -> u, directions w = L^-T u.
    let l = cholesky(&sw);
    let mut white = Array2::<f64>::zeros((d, d));
    // Columns of L^-1 Sb: solve L z = Sb[:, j].
    for j in 0..d {
        let col: Vec<f64> = (0..d).map(|i| sb[[i, j]]).collect();
        let z = solve_lower(&l, &col);
        for i in 0..d {
            white[[i, j]] = z[i];
        }
    }
    // Right-multiply by L^-T: solve row-wise L z = white[i, :] (symmetry).
    let mut sym = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        let row: Vec<f64> = (0..d).map(|j| white[[i, j]]).collect();
        let z = solve_lower(&l, &row);
        for j in 0..d {
            sym[[i, j]] = z[j];
        }
    }
    // Numerical symmetrization before Jacobi.
    for i in 0..d {
        for j in i + 1..d {
            let v = 0.5 * (sym[[i, j]] + sym[[j, i]]);
            sym[[i, j]] = v;
            sym[[j, i]] = v;
        }
    }
    let (_vals, vecs) = jacobi_eigen(&sym);
    let mut w = Array2::<f64>::zeros((d, k));
    for col in 0..k {
        let u: Vec<f64> = (0..d).map(|i| vecs[[i, col]]).collect();
        let dir = solve_upper_t(&l, &u);
        // Canonical sign: largest-magnitude entry positive.
        let lead = dir
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(1.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            w[[i, col]] = dir[i] * sign;
        }
    }
    Ok(Lda { mean, w })
}

/// Mean per-dimension class discriminability: tr((Sw + eps I)^-1 Sb) / D.
pub fn fisher_ratio(x: &Array2<f64>, labels: &[usize], eps: f64) -> f64 {
    let (_, d) = x.dim();
    let (mut sw, sb, _) = scatter(x, labels);
    for i in 0..d {
        sw[[i, i]] += eps;
    }
    let l = cholesky(&sw);
    let mut trace = 0.0;
    for j in 0..d {
        let col: Vec<f64> = (0..d).map(|i| sb[[i, j]]).collect();
        let y = solve_lower(&l, &col);
        let z = solve_upper_t(&l, &y);
        trace += z[j];
    }
    trace / d as f64
}

/// Resample rows of `v` (sampled at `src_times`, seconds, ascending) onto
/// `dst_times` by linear interpolation, clamping beyond the ends.
pub fn resample_linear(v: &Array2<f64>, src_times: &[f64], dst_times: &[f64]) -> Array2<f64> {
    let (n, d) = v.dim();
    assert_eq!(n, src_times.len());
    assert!(n > 0);
    let mut out = Array2::zeros((dst_times.len(), d));
    let mut j = 0usize;
    for (r, &t) in dst_times.iter().enumerate() {
        while j + 1 < n && src_times[j + 1] < t {
            j += 1;
        }
        if t <= src_times[0] {
            for c in 0..d {
                out[[r, c]] = v[[0, c]];
            }
        } else if t >= src_times[n - 1] {
            for c in 0..d {
                out[[r, c]] = v[[n - 1, c]];
            }
        } else {
            let (t0, t1) = (src_times[j], src_times[j + 1]);
            let a = (t - t0) / (t1 - t0);
            for c in 0..d {
                out[[r, c]] = v[[j, c]] * (1.0 - a) + v[[j + 1, c]] * a;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn one_second_gives_about_100_audio_frames() {
        let x = vec![0.01; 24000];
        let f = extract_audio_features(&x, 24000).unwrap();
        assert!((98..=101).contains(&f.nrows()), "got {}", f.nrows());
        assert_eq!(f.ncols(), 160);
        assert_eq!(audio_frames(24000, 24000), f.nrows());
    }

    #[test]
    fn silence_hits_the_log_floor_with_zero_deltas() {
        let f = extract_audio_features(&vec![0.0; 12000], 24000).unwrap();
        let floor = crate::dsp::LOG_MEL_FLOOR.ln();
        for r in 0..f.nrows() {
            for c in 0..80 {
                assert!((f[[r, c]] - floor).abs() < 1e-9);
                assert_eq!(f[[r, 80 + c]], 0.0);
            }
        }
        assert!(extract_audio_features(&[], 24000).is_err());
    }

    #[test]
    fn dct_of_constant_concentrates_in_coefficient_zero() {
        let d = dct(&[2.5; 16]);
        assert!((d[0] - 2.5 * 4.0).abs() < 1e-12); // 2.5 * sqrt(16)
        for &c in &d[1..] {
            assert!(c.abs() < 1e-12);
        }
        // Parseval: orthonormal DCT preserves energy.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() - 0.5).collect();
        let e_time: f64 = x.iter().map(|v| v * v).sum();
        let e_freq: f64 = dct(&x).iter().map(|v| v * v).sum();
        assert!((e_time - e_freq).abs() < 1e-10);
    }

    #[test]
    fn dct_windows_shape_and_short_input_error() {
        let traj = Array2::from_shape_fn((20, 3), |(i, c)| i as f64 * 0.1 + c as f64);
        let (f, centers) = dct_windows(&traj, 8, 2, 6).unwrap();
        assert_eq!(f.dim(), ((20 - 8) / 2 + 1, 18));
        assert_eq!(centers[0], 4);
        assert_eq!(centers[1], 6);
        let short = Array2::zeros((5, 3));
        assert!(dct_windows(&short, 8, 2, 6).is_err());
    }

    #[test]
    fn lda_separates_two_gaussians() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut x = Array2::zeros((400, 10));
        let mut labels = Vec::new();
        for i in 0..400 {
            let class = i % 2;
            labels.push(class);
            for j in 0..10 {
                let mean = if j == 3 {
                    if class == 0 { -4.0 } else { 4.0 }
                } else {
                    0.0
                };
                let u: f64 = rng.gen();
                let v: f64 = rng.gen();
                x[[i, j]] = mean + (-2.0 * u.max(1e-12).ln()).sqrt()
                    * (2.0 * std::f64::consts::PI * v).cos();
            }
        }
        let lda = fit_lda(&x, &labels, 1, 1e-6).unwrap();
        let y = lda.apply(&x);
        let c0: Vec<f64> = (0..400).filter(|i| i % 2 == 0).map(|i| y[[i, 0]]).collect();
        let c1: Vec<f64> = (0..400).filter(|i| i % 2 == 1).map(|i| y[[i, 0]]).collect();
        let m0 = c0.iter().sum::<f64>() / c0.len() as f64;
        let m1 = c1.iter().sum::<f64>() / c1.len() as f64;
        let var = |v: &[f64], m: f64| v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64;
        let pooled = (0.5 * (var(&c0, m0) + var(&c1, m1))).sqrt();
        assert!(
            (m0 - m1).abs() >= 5.0 * pooled,
            "separation {} vs pooled std {pooled}",
            (m0 - m1).abs()
        );
    }

    #[test]
    fn lda_dimension_bound_and_permutation_invariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((60, 6), |_| rng.gen::<f64>());
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        // K must respect classes - 1.
        assert!(fit_lda(&x, &labels, 3, 1e-6).is_err());
        let lda = fit_lda(&x, &labels, 2, 1e-6).unwrap();
        // Permute sample order: same subspace (projection equal up to sign,
        // and the canonical sign fix makes it exactly equal).
        let perm: Vec<usize> = (0..60).rev().collect();
        let xp = Array2::from_shape_fn((60, 6), |(i, j)| x[[perm[i], j]]);
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let lda_p = fit_lda(&xp, &lp, 2, 1e-6).unwrap();
        for i in 0..6 {
            for j in 0..2 {
                assert!(
                    (lda.w[[i, j]] - lda_p.w[[i, j]]).abs() < 1e-6,
                    "subspace changed under permutation"
                );
            }
        }
    }

    #[test]
    fn lda_projection_raises_fisher_ratio() {
        // Three classes separated in a low-variance subspace, plus loud
        // isotropic nuisance dimensions: projection should concentrate
        // discriminability.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut x = Array2::zeros((300, 12));
        let mut labels = Vec::new();
        for i in 0..300 {
            let c = i % 3;
            labels.push(c);
            for j in 0..12 {
                let mean = match (c, j) {
                    (0, 0) => 1.5,
                    (1, 0) => -1.5,
                    (2, 1) => 1.5,
                    _ => 0.0,
                };
                let scale = if j < 2 { 0.4 } else { 2.0 };
                let u: f64 = rng.gen();
                let v: f64 = rng.gen();
                x[[i, j]] = mean + scale * (-2.0 * u.max(1e-12).ln()).sqrt()
                    * (2.0 * std::f64::consts::PI * v).cos();
            }
        }
        let raw_ratio = fisher_ratio(&x, &labels, 1e-6);
        let lda = fit_lda(&x, &labels, 2, 1e-6).unwrap();
        let y = lda.apply(&x);
        let lda_ratio = fisher_ratio(&y, &labels, 1e-6);
        assert!(
            lda_ratio >= raw_ratio,
            "LDA ratio {lda_ratio} < raw ratio {raw_ratio}"
        );
    }

    #[test]
    fn linear_resampling_is_exact_on_linear_signals() {
        let src_times: Vec<f64> = (0..10).map(|i| 0.02 * i as f64).collect();
        let v = Array2::from_shape_fn((10, 2), |(i, c)| src_times[i] * (c as f64 + 1.0));
        let dst_times: Vec<f64> = (0..37).map(|i| 0.005 * i as f64).collect();
        let out = resample_linear(&v, &src_times, &dst_times);
        assert_eq!(out.nrows(), 37);
        for (r, &t) in dst_times.iter().enumerate() {
            let tt = t.clamp(src_times[0], src_times[9]);
            for c in 0..2 {
                assert!((out[[r, c]] - tt * (c as f64 + 1.0)).abs() < 1e-12);
            }
        }
    }
}
