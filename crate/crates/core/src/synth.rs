//! Parametric speech synthesizer, speaker sampling, dysarthria simulation,
//! and a spectral-gating denoiser.
//!
//! Speech is rendered from explicit articulatory parameters: a harmonic
//! source whose per-harmonic amplitudes follow a formant envelope, plus a
//! spectrally shaped noise source for frication and bursts. Because every
//! acoustic property is a known function of the inputs, ground truth for
//! pitch, timbre, tempo, SNR, and phoneme identity is available by
//! construction — which is what makes the evaluation criteria checkable.
//!
//! The dysarthria simulation re-renders the same underlying utterance
//! (same phonemes, same prosodic accents, same random streams) with slowed
//! tempo, flattened + jittered pitch, probabilistic formant distortions, and
//! additive noise at an exact SNR. The lip trajectory always follows the
//! *intended* phoneme sequence — articulation targets remain intact while
//! the acoustics degrade, so the visual stream carries complementary
//! evidence about what was meant.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, Stft};
use crate::phonemes::{self, Kind};
use crate::seeds;

/// Leading/trailing silence, seconds (gives denoising an honest noise floor).
pub const SILENCE_SEC: f64 = 0.06;
/// Control-track step, seconds (200 frames per second).
const CTRL_SEC: f64 = 0.005;
/// Lip-trajectory step, seconds (100 frames per second).
pub const LIP_SEC: f64 = 0.01;
/// Peak amplitude after normalization.
const PEAK_TARGET: f64 = 0.6;
/// Ceiling on rendered harmonics.
const MAX_HARMONICS: usize = 220;
/// Relative level of the noise source against the harmonic source.
const NOISE_GAIN: f64 = 0.9;

/// A synthetic speaker: pitch, vocal-tract scale, and speaking rate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SpeakerProfile {
    pub id: u32,
    /// Mean F0, Hz.
    pub base_f0: f64,
    /// Multiplier on all formant frequencies (vocal-tract length proxy).
    pub formant_scale: f64,
    /// Phonemes per second before any tempo transform.
    pub speaking_rate: f64,
    /// Whether this speaker's test material gets the dysarthria transform.
    pub dysarthric: bool,
}

/// Draw `total` speakers, the last `dysarthric` of which are flagged.
///
/// Rejection sampling keeps every pair separated in (log-F0, formant-scale)
/// space so that nearest-neighbor speaker retrieval has an unambiguous
/// ground truth.
pub fn sample_speakers(total: usize, dysarthric: usize, seed: u64) -> Vec<SpeakerProfile> {
    assert!(dysarthric <= total);
    let mut rng = seeds::rng_for(seed, "speakers", 0);
    let mut out: Vec<SpeakerProfile> = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while out.len() < total {
        attempts += 1;
        assert!(attempts < 200_000, "speaker sampling failed to separate");
        let base_f0 = (80f64.ln() + rng.gen::<f64>() * (300f64 / 80f64).ln()).exp();
        let formant_scale = 0.7 + rng.gen::<f64>() * 0.6;
        let speaking_rate = 7.0 + rng.gen::<f64>() * 4.0;
        let separated = out.iter().all(|p| {
            (p.base_f0 / base_f0).ln().abs() + (p.formant_scale - formant_scale).abs() >= 0.06
        });
        if separated {
            let id = out.len() as u32;
            out.push(SpeakerProfile {
                id,
                base_f0,
                formant_scale,
                speaking_rate,
                dysarthric: out.len() >= total - dysarthric,
            });
        }
    }
    out
}

/// The dysarthria simulation parameters. `identity()` reproduces the normal
/// rendering bit for bit, so one code path serves both conditions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DysarthriaTransform {
    /// Duration divisor; < 1 slows speech down.
    pub tempo_factor: f64,
    /// Fraction of the pitch contour's deviation from its mean to remove.
    pub pitch_flatten: f64,
    /// Stationary std, in semitones, of an added AR(1) pitch wobble.
    pub pitch_jitter_std: f64,
    /// Per-phoneme probability of blending formant targets toward a random
    /// other phoneme (articulatory imprecision). Lips are never affected.
    pub distortion_prob: f64,
    /// Exact SNR of white noise added to the final waveform; None = clean.
    pub noise_snr_db: Option<f64>,
}

impl DysarthriaTransform {
    pub fn identity() -> Self {
        DysarthriaTransform {
            tempo_factor: 1.0,
            pitch_flatten: 0.0,
            pitch_jitter_std: 0.0,
            distortion_prob: 0.0,
            noise_snr_db: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self == &Self::identity()
    }
}

/// Draw a dysarthria severity: slow tempo, strong flattening, audible jitter,
/// frequent articulation errors, moderate noise.
pub fn sample_transform(rng: &mut impl Rng) -> DysarthriaTransform {
    DysarthriaTransform {
        tempo_factor: 0.45 + rng.gen::<f64>() * 0.25,
        pitch_flatten: 0.6 + rng.gen::<f64>() * 0.3,
        pitch_jitter_std: 0.3 + rng.gen::<f64>() * 0.5,
        distortion_prob: 0.25 + rng.gen::<f64>() * 0.2,
        noise_snr_db: Some(8.0 + rng.gen::<f64>() * 7.0),
    }
}

/// One rendered utterance.
pub struct SynthOutput {
    pub wav: Vec<f64>,
    /// Per-phoneme (start, len) sample spans in `wav`.
    pub durations: Vec<(usize, usize)>,
    /// Lip trajectory at 100 frames/s: rows of (opening, width, protrusion).
    pub lips: Array2<f64>,
}

fn randn(rng: &mut impl Rng) -> f64 {
    // Box-Muller; rejects the measure-zero log(0) corner.
    loop {
        let u: f64 = rng.gen();
        if u > 1e-300 {
            let v: f64 = rng.gen();
            return (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos();
        }
    }
}

/// Formant envelope: sum of Lorentzian resonances with a broadband floor,
/// a gentle low-pass, and source tilt.
fn envelope(f: f64, formants: &[f64; 3], bws: &[f64; 3], amps: &[f64; 3]) -> f64 {
    let mut e = 0.0;
    for m in 0..3 {
        let d = (f - formants[m]) / bws[m];
        e += amps[m] / (1.0 + d * d);
    }
    let lp = 1.0 / (1.0 + (f / 4200.0).powi(4));
    let tilt = 1.0 / (1.0 + f / 5000.0);
    (e + 0.002) * lp * tilt
}

/// Per-control-frame targets, before smoothing.
#[derive(Clone, Copy)]
struct FrameTarget {
    formants: [f64; 3],
    bws: [f64; 3],
    amps: [f64; 3],
    voiced_amp: f64,
    noise_amp: f64,
    noise_center: f64,
    noise_bw: f64,
}

impl FrameTarget {
    fn silence() -> Self {
        FrameTarget {
            formants: [500.0, 1500.0, 2500.0],
            bws: [90.0, 130.0, 180.0],
            amps: [0.0; 3],
            voiced_amp: 0.0,
            noise_amp: 0.0,
            noise_center: 1000.0,
            noise_bw: 1000.0,
        }
    }
}

/// Audio realization of one phoneme after optional distortion. Lip targets
/// intentionally live elsewhere: they always come from the clean definition.
#[derive(Clone, Copy)]
struct AudioDef {
    kind: Kind,
    voiced: bool,
    frication: f64,
    formants: [f64; 3],
    glide_to: Option<[f64; 3]>,
    bws: [f64; 3],
    amps: [f64; 3],
    noise_center: f64,
    noise_bw: f64,
}

fn lerp3(a: &[f64; 3], b: &[f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Render one utterance. Fully deterministic in its arguments; the identity
/// transform with the same `utt_seed` reproduces the paired normal version
/// of a dysarthric utterance exactly.
pub fn synthesize(
    profile: &SpeakerProfile,
    sentence: &[usize],
    tf: &DysarthriaTransform,
    sample_rate: u32,
    utt_seed: u64,
) -> SynthOutput {
    assert!(!sentence.is_empty());
    assert!(
        sample_rate % 200 == 0,
        "sample rate must be divisible by 200 for the 5 ms control grid"
    );
    let sr = sample_rate as f64;
    let ctrl_hop = (sr * CTRL_SEC) as usize;
    let lip_hop = (sr * LIP_SEC) as usize;
    let num_ph = sentence.len();

    // --- Durations: relative units, scaled to the speaking rate, then tempo.
    let mut rng_dur = seeds::rng_for(utt_seed, "durations", 0);
    let units: Vec<f64> = sentence
        .iter()
        .map(|&p| phonemes::def(p).base_dur * (0.08 * randn(&mut rng_dur)).exp())
        .collect();
    let unit_sum: f64 = units.iter().sum();
    let speech_sec = num_ph as f64 / profile.speaking_rate / tf.tempo_factor;
    let secs: Vec<f64> = units.iter().map(|u| u / unit_sum * speech_sec).collect();

    // Sample boundaries.
    let mut starts = Vec::with_capacity(num_ph + 1);
    let mut acc = SILENCE_SEC;
    for s in &secs {
        starts.push((acc * sr).round() as usize);
        acc += s;
    }
    starts.push((acc * sr).round() as usize);
    let n = starts[num_ph] + (SILENCE_SEC * sr).round() as usize;
    let durations: Vec<(usize, usize)> = (0..num_ph)
        .map(|i| (starts[i], starts[i + 1] - starts[i]))
        .collect();

    // --- Articulatory imprecision: blend audio targets toward a random other
    // phoneme. All random draws happen regardless of the outcome so the
    // stream stays aligned across transform settings.
    let mut rng_dist = seeds::rng_for(utt_seed, "distortion", 0);
    let audio_defs: Vec<AudioDef> = sentence
        .iter()
        .map(|&p| {
            let d = phonemes::def(p);
            let u: f64 = rng_dist.gen();
            let other = phonemes::def(rng_dist.gen_range(0..phonemes::NUM_PHONEMES));
            let alpha = 0.6 + 0.4 * rng_dist.gen::<f64>();
            let mut def = AudioDef {
                kind: d.kind,
                voiced: d.voiced,
                frication: d.frication,
                formants: d.formants,
                glide_to: d.glide_to,
                bws: d.bandwidths,
                amps: d.amps,
                noise_center: d.noise_center,
                noise_bw: d.noise_bw,
            };
            if u < tf.distortion_prob {
                def.formants = lerp3(&d.formants, &other.formants, alpha);
                def.glide_to = None; // glides collapse under imprecision
                def.amps = lerp3(&d.amps, &other.amps, alpha);
                def.noise_center = d.noise_center + (other.noise_center - d.noise_center) * alpha;
                def.frication *= 1.0 - 0.6 * alpha;
            }
            def
        })
        .collect();

    // --- Control tracks at 5 ms.
    let ctrl_frames = n.div_ceil(ctrl_hop);
    let phoneme_at = |sample: usize| -> Option<usize> {
        if sample < starts[0] || sample >= starts[num_ph] {
            return None;
        }
        // Linear scan is fine: ~10 phonemes.
        (0..num_ph).find(|&i| sample >= starts[i] && sample < starts[i + 1])
    };

    let mut targets = Vec::with_capacity(ctrl_frames);
    for k in 0..ctrl_frames {
        let sample = k * ctrl_hop;
        let Some(i) = phoneme_at(sample) else {
            targets.push(FrameTarget::silence());
            continue;
        };
        let def = &audio_defs[i];
        let frac = (sample - starts[i]) as f64 / (starts[i + 1] - starts[i]).max(1) as f64;
        let sec_in = (sample - starts[i]) as f64 / sr;
        let sec_left = (starts[i + 1] - sample) as f64 / sr;
        // De-click edges: 12 ms linear ramps at segment boundaries.
        let edge = (sec_in / 0.012).min(sec_left / 0.012).clamp(0.0, 1.0);

        let mut formants = match def.glide_to {
            Some(to) => lerp3(&def.formants, &to, frac),
            None => def.formants,
        };
        for f in &mut formants {
            *f *= profile.formant_scale;
        }
        let noise_center = def.noise_center * profile.formant_scale;

        let (voiced_target, noise_target) = match def.kind {
            Kind::Vowel => (1.0, 0.0),
            Kind::Nasal => (0.85, 0.0),
            Kind::Approximant => (0.95, 0.0),
            Kind::Fricative => (if def.voiced { 0.55 } else { 0.0 }, def.frication),
            Kind::Stop => {
                // Closure, burst, release phases within the segment.
                if frac < 0.45 {
                    (if def.voiced { 0.15 } else { 0.0 }, 0.0)
                } else if frac < 0.58 {
                    (if def.voiced { 0.15 } else { 0.0 }, def.frication)
                } else {
                    (if def.voiced { 0.8 } else { 0.0 }, 0.3 * def.frication)
                }
            }
        };
        targets.push(FrameTarget {
            formants,
            bws: def.bws,
            amps: def.amps,
            voiced_amp: voiced_target * edge,
            noise_amp: noise_target * edge,
            noise_center,
            noise_bw: def.noise_bw,
        });
    }

    // Coarticulation: exponential smoothing, slow for spectral shape, fast
    // for source amplitudes (stop bursts must stay sharp).
    let alpha_formant = 1.0 - (-CTRL_SEC / 0.02).exp();
    let alpha_amp = 1.0 - (-CTRL_SEC / 0.004).exp();
    let mut tracks = Vec::with_capacity(ctrl_frames);
    let mut state = FrameTarget::silence();
    state.formants = [
        500.0 * profile.formant_scale,
        1500.0 * profile.formant_scale,
        2500.0 * profile.formant_scale,
    ];
    for t in &targets {
        for m in 0..3 {
            state.formants[m] += alpha_formant * (t.formants[m] - state.formants[m]);
            state.bws[m] += alpha_formant * (t.bws[m] - state.bws[m]);
            state.amps[m] += alpha_formant * (t.amps[m] - state.amps[m]);
        }
        state.noise_center += alpha_formant * (t.noise_center - state.noise_center);
        state.noise_bw += alpha_formant * (t.noise_bw - state.noise_bw);
        state.voiced_amp += alpha_amp * (t.voiced_amp - state.voiced_amp);
        state.noise_amp += alpha_amp * (t.noise_amp - state.noise_amp);
        tracks.push(state);
    }

    // --- F0 contour in semitones around the speaker's base pitch.
    let mut rng_acc = seeds::rng_for(utt_seed, "accents", 0);
    let accents: Vec<f64> = (0..num_ph).map(|_| 0.8 * randn(&mut rng_acc)).collect();
    let lfo_freq = 4.0 + 2.0 * rng_acc.gen::<f64>();
    let lfo_phase = 2.0 * std::f64::consts::PI * rng_acc.gen::<f64>();
    let centers: Vec<f64> = (0..num_ph)
        .map(|i| (starts[i] + starts[i + 1]) as f64 / 2.0)
        .collect();
    let contour_at = |sample: f64| -> f64 {
        let speech_pos =
            ((sample - starts[0] as f64) / (starts[num_ph] - starts[0]) as f64).clamp(0.0, 1.0);
        let declination = 0.8 - 2.0 * speech_pos;
        let accent = if sample <= centers[0] {
            accents[0]
        } else if sample >= centers[num_ph - 1] {
            accents[num_ph - 1]
        } else {
            let j = (0..num_ph - 1)
                .find(|&j| sample >= centers[j] && sample < centers[j + 1])
                .unwrap();
            let t = (sample - centers[j]) / (centers[j + 1] - centers[j]);
            accents[j] + (accents[j + 1] - accents[j]) * t
        };
        let lfo = 0.2 * (2.0 * std::f64::consts::PI * lfo_freq * sample / sr + lfo_phase).sin();
        declination + accent + lfo
    };
    let mut contour_st: Vec<f64> = (0..ctrl_frames)
        .map(|k| contour_at((k * ctrl_hop) as f64))
        .collect();
    // Flatten relative to the utterance mean.
    let mean_st = contour_st.iter().sum::<f64>() / ctrl_frames as f64;
    for c in &mut contour_st {
        *c = mean_st + (1.0 - tf.pitch_flatten) * (*c - mean_st);
    }
    // AR(1) jitter with exact stationary std (not flattened: the wobble is
    // part of the disorder, not of the intended prosody).
    if tf.pitch_jitter_std > 0.0 {
        let mut rng_jit = seeds::rng_for(utt_seed, "jitter", 0);
        let rho: f64 = 0.96;
        let sigma_e = tf.pitch_jitter_std * (1.0 - rho * rho).sqrt();
        let mut j = tf.pitch_jitter_std * randn(&mut rng_jit);
        for c in &mut contour_st {
            *c += j;
            j = rho * j + sigma_e * randn(&mut rng_jit);
        }
    }
    let f0_track: Vec<f64> = contour_st
        .iter()
        .map(|st| profile.base_f0 * (st / 12.0).exp2())
        .collect();

    // --- Harmonic source: additive synthesis with per-block amplitudes and
    // per-sample phase integration (phase-continuous across blocks).
    let mut wav = vec![0.0f64; n];
    let mut phases = [0.0f64; MAX_HARMONICS + 1];
    let nyq_guard = 0.47 * sr;
    let amps_for = |k: usize| -> (Vec<f64>, f64) {
        let k = k.min(ctrl_frames - 1);
        let tr = &tracks[k];
        let f0 = f0_track[k];
        let hmax = ((nyq_guard / f0) as usize).min(MAX_HARMONICS);
        let mut a = vec![0.0; hmax + 1];
        for (h, slot) in a.iter_mut().enumerate().skip(1) {
            *slot = envelope(h as f64 * f0, &tr.formants, &tr.bws, &tr.amps);
        }
        (a, tr.voiced_amp)
    };
    let mut cur = amps_for(0);
    for k in 0..ctrl_frames {
        let next = amps_for(k + 1);
        let f0a = f0_track[k];
        let f0b = f0_track[(k + 1).min(ctrl_frames - 1)];
        let hmax = cur.0.len().max(next.0.len()) - 1;
        let base = k * ctrl_hop;
        for i in 0..ctrl_hop {
            let t = base + i;
            if t >= n {
                break;
            }
            let frac = i as f64 / ctrl_hop as f64;
            let f0 = f0a + (f0b - f0a) * frac;
            let vamp = cur.1 + (next.1 - cur.1) * frac;
            let mut s = 0.0;
            if vamp > 1e-6 {
                for h in 1..=hmax {
                    let a0 = cur.0.get(h).copied().unwrap_or(0.0);
                    let a1 = next.0.get(h).copied().unwrap_or(0.0);
                    let a = a0 + (a1 - a0) * frac;
                    if a > 1e-7 {
                        s += a * phases[h].sin();
                    }
                    phases[h] += 2.0 * std::f64::consts::PI * h as f64 * f0 / sr;
                }
            } else {
                // Keep phases advancing through unvoiced spans so voicing
                // re-onsets are continuous.
                for (h, p) in phases.iter_mut().enumerate().take(hmax + 1).skip(1) {
                    *p += 2.0 * std::f64::consts::PI * h as f64 * f0 / sr;
                }
            }
            wav[t] += vamp * s;
        }
        // Wrap phases to keep precision over long renders.
        for p in &mut phases {
            *p %= 2.0 * std::f64::consts::PI;
        }
        cur = next;
    }

    // --- Noise source: white noise spectrally shaped per control frame.
    {
        let mut rng_noise = seeds::rng_for(utt_seed, "noise_source", 0);
        let white: Vec<f64> = (0..n).map(|_| rng_noise.gen::<f64>() * 2.0 - 1.0).collect();
        let win = 4 * ctrl_hop;
        let stft = Stft::new(win.next_power_of_two(), win, ctrl_hop);
        let mut spec = stft.analyze(&white);
        let (frames, bins) = spec.dim();
        assert_eq!(frames, ctrl_frames);
        let bin_hz = sr / stft.fft_size as f64;
        for t in 0..frames {
            let tr = &tracks[t];
            for b in 0..bins {
                let f = b as f64 * bin_hz;
                let d = (f - tr.noise_center) / tr.noise_bw;
                let shape = 1.0 / (1.0 + d * d) + 0.04;
                let lp = 1.0 / (1.0 + (f / 9000.0).powi(4));
                spec[[t, b]] *= tr.noise_amp * shape * lp;
            }
        }
        let shaped = stft.synthesize(&spec, n);
        for (w, s) in wav.iter_mut().zip(&shaped) {
            *w += NOISE_GAIN * s;
        }
    }

    // --- Normalize, then add noise at an exact SNR against the speech span.
    let peak = wav.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for w in &mut wav {
            *w *= PEAK_TARGET / peak;
        }
    }
    if let Some(snr) = tf.noise_snr_db {
        let speech_rms = dsp::rms(&wav[starts[0]..starts[num_ph]]);
        let target_rms = speech_rms * 10f64.powf(-snr / 20.0);
        let mut rng_add = seeds::rng_for(utt_seed, "add_noise", 0);
        let mut noise: Vec<f64> = (0..n).map(|_| randn(&mut rng_add)).collect();
        let raw_rms = dsp::rms(&noise);
        if raw_rms > 0.0 {
            let scale = target_rms / raw_rms;
            for v in &mut noise {
                *v *= scale;
            }
        }
        for (w, v) in wav.iter_mut().zip(&noise) {
            *w += v;
        }
    }
    for w in &mut wav {
        *w = w.clamp(-0.95, 0.95);
    }

    // --- Lip trajectory from the *intended* phonemes (never distorted).
    let lip_frames = n.div_ceil(lip_hop);
    let alpha_lip = 1.0 - (-LIP_SEC / 0.03).exp();
    let mut rng_lips = seeds::rng_for(utt_seed, "lips", 0);
    let mut lips = Array2::zeros((lip_frames, 3));
    let mut lip_state = [0.05, 0.5, 0.1];
    for k in 0..lip_frames {
        let target = match phoneme_at(k * lip_hop) {
            Some(i) => phonemes::def(sentence[i]).lips,
            None => [0.05, 0.5, 0.1],
        };
        for m in 0..3 {
            lip_state[m] += alpha_lip * (target[m] - lip_state[m]);
            lips[[k, m]] = (lip_state[m] + 0.012 * randn(&mut rng_lips)).clamp(0.0, 1.0);
        }
    }

    SynthOutput { wav, durations, lips }
}

/// Spectral-gating denoiser: estimates a per-bin noise floor from the
/// lowest-energy tenth of the frames, then applies magnitude subtraction
/// with a spectral floor. Phase is preserved.
pub fn denoise(x: &[f64], sample_rate: u32) -> Vec<f64> {
    let hop = sample_rate as usize / 200;
    let win = 4 * hop;
    let stft = Stft::new(win.next_power_of_two(), win, hop);
    let mut spec = stft.analyze(x);
    let (frames, bins) = spec.dim();
    if frames < 8 {
        return x.to_vec();
    }
    // Frame energies -> indices of the quietest tenth (at least 4 frames).
    let mut order: Vec<usize> = (0..frames).collect();
    let energy: Vec<f64> = (0..frames)
        .map(|t| (0..bins).map(|b| spec[[t, b]].norm_sqr()).sum())
        .collect();
    order.sort_by(|&a, &b| energy[a].total_cmp(&energy[b]));
    let quiet = &order[..(frames / 10).max(4).min(frames)];
    let mut floor = vec![0.0f64; bins];
    for &t in quiet {
        for (b, fl) in floor.iter_mut().enumerate() {
            *fl += spec[[t, b]].norm();
        }
    }
    for fl in &mut floor {
        *fl /= quiet.len() as f64;
    }
    // Magnitude subtraction with a relative floor.
    for t in 0..frames {
        for b in 0..bins {
            let mag = spec[[t, b]].norm();
            if mag > 1e-12 {
                let cleaned = (mag - 1.8 * floor[b]).max(0.08 * mag);
                spec[[t, b]] *= cleaned / mag;
            }
        }
    }
    stft.synthesize(&spec, x.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{pitch_stats, pitch_track};
    use rand::SeedableRng;

    const SR: u32 = 24000;

    fn test_profile() -> SpeakerProfile {
        SpeakerProfile {
            id: 0,
            base_f0: 180.0,
            formant_scale: 1.0,
            speaking_rate: 9.0,
            dysarthric: false,
        }
    }

    fn vowel_sentence() -> Vec<usize> {
        // All monophthong vowels: fully voiced, good for pitch measurements.
        vec![4, 0, 5, 2, 7, 9, 4, 1]
    }

    #[test]
    fn synthesis_is_deterministic() {
        let p = test_profile();
        let s = vowel_sentence();
        let tf = DysarthriaTransform::identity();
        let a = synthesize(&p, &s, &tf, SR, 123);
        let b = synthesize(&p, &s, &tf, SR, 123);
        assert_eq!(a.wav, b.wav);
        assert_eq!(a.durations, b.durations);
        assert_eq!(a.lips, b.lips);
        let c = synthesize(&p, &s, &tf, SR, 124);
        assert_ne!(a.wav, c.wav, "different utterance seeds must differ");
    }

    #[test]
    fn durations_match_speaking_rate_and_tempo() {
        let p = test_profile();
        let s = vowel_sentence();
        let normal = synthesize(&p, &s, &DysarthriaTransform::identity(), SR, 7);
        let speech: usize = normal.durations.iter().map(|d| d.1).sum();
        let expect = s.len() as f64 / p.speaking_rate * SR as f64;
        assert!(
            (speech as f64 - expect).abs() < 0.01 * expect,
            "speech span {speech} vs expected {expect}"
        );

        let mut slow_tf = DysarthriaTransform::identity();
        slow_tf.tempo_factor = 0.5;
        let slow = synthesize(&p, &s, &slow_tf, SR, 7);
        let slow_span: usize = slow.durations.iter().map(|d| d.1).sum();
        let ratio = slow_span as f64 / speech as f64;
        assert!((ratio - 2.0).abs() < 0.01, "tempo 0.5 should double spans, got {ratio}");
        // Phoneme count and order are preserved.
        assert_eq!(slow.durations.len(), normal.durations.len());
    }

    #[test]
    fn rendered_pitch_tracks_the_profile() {
        let p = test_profile();
        let out = synthesize(&p, &vowel_sentence(), &DysarthriaTransform::identity(), SR, 11);
        let stats = pitch_stats(&pitch_track(&out.wav, SR));
        assert!(stats.voiced_fraction > 0.5, "vowels should be mostly voiced");
        let ratio = stats.f0_mean / p.base_f0;
        assert!((ratio - 1.0).abs() < 0.06, "mean F0 {} vs base {}", stats.f0_mean, p.base_f0);
    }

    #[test]
    fn flattening_shrinks_contour_variation() {
        let p = test_profile();
        let s = vowel_sentence();
        let plain = synthesize(&p, &s, &DysarthriaTransform::identity(), SR, 21);
        let mut tf = DysarthriaTransform::identity();
        tf.pitch_flatten = 0.85;
        let flat = synthesize(&p, &s, &tf, SR, 21);
        let sd_plain = pitch_stats(&pitch_track(&plain.wav, SR)).f0_std;
        let sd_flat = pitch_stats(&pitch_track(&flat.wav, SR)).f0_std;
        assert!(
            sd_flat < 0.5 * sd_plain,
            "flatten 0.85: std {sd_flat} vs plain {sd_plain}"
        );
    }

    #[test]
    fn jitter_raises_contour_variation() {
        let p = test_profile();
        let s = vowel_sentence();
        let mut flat = DysarthriaTransform::identity();
        flat.pitch_flatten = 1.0;
        let mut jit = flat.clone();
        jit.pitch_jitter_std = 0.8;
        let sd_flat = pitch_stats(&pitch_track(&synthesize(&p, &s, &flat, SR, 31).wav, SR)).f0_std;
        let sd_jit = pitch_stats(&pitch_track(&synthesize(&p, &s, &jit, SR, 31).wav, SR)).f0_std;
        assert!(
            sd_jit > sd_flat + 1.0,
            "jitter should add variation: {sd_jit} vs {sd_flat}"
        );
    }

    #[test]
    fn added_noise_hits_the_exact_snr() {
        let p = test_profile();
        let s = vowel_sentence();
        let clean = synthesize(&p, &s, &DysarthriaTransform::identity(), SR, 41);
        let mut tf = DysarthriaTransform::identity();
        tf.noise_snr_db = Some(10.0);
        let noisy = synthesize(&p, &s, &tf, SR, 41);
        // Same seed, same transform apart from noise: difference is the noise.
        let diff: Vec<f64> = noisy.wav.iter().zip(&clean.wav).map(|(a, b)| a - b).collect();
        let (s0, s1) = (clean.durations[0].0, {
            let last = clean.durations.last().unwrap();
            last.0 + last.1
        });
        let snr = 20.0 * (dsp::rms(&clean.wav[s0..s1]) / dsp::rms(&diff)).log10();
        assert!((snr - 10.0).abs() < 0.05, "constructed SNR {snr}");
    }

    #[test]
    fn formant_scale_moves_the_first_formant() {
        // Long open vowel; estimate the F1 center as the energy-weighted
        // centroid of the band. A raw argmax bin snaps to whichever harmonic
        // of f0 is strongest, which quantizes the estimate by +-f0/2; the
        // centroid averages over all harmonics under the resonance curve.
        // Both search bands are symmetric around the expected F1, so any
        // residual centroid bias cancels in the ratio.
        let peak_near = |scale: f64, lo: f64, hi: f64| -> f64 {
            let p = SpeakerProfile { formant_scale: scale, ..test_profile() };
            let out = synthesize(&p, &[4, 4, 4, 4], &DysarthriaTransform::identity(), SR, 51);
            let mid = out.wav.len() / 2;
            let seg = &out.wav[mid - 4096..mid + 4096];
            let stft = Stft::new(8192, 8192, 8192);
            let spec = stft.analyze(&seg[..8192]);
            let bin_hz = SR as f64 / 8192.0;
            let (mut wsum, mut esum) = (0.0, 0.0);
            for b in (lo / bin_hz) as usize..(hi / bin_hz) as usize {
                let e = spec[[0, b]].norm_sqr();
                wsum += b as f64 * bin_hz * e;
                esum += e;
            }
            assert!(esum > 0.0, "no energy in the search band");
            wsum / esum
        };
        // Vowel "aa": F1 = 800 Hz. The peak search bands scale with the test.
        let f_small = peak_near(1.0, 500.0, 1100.0);
        let f_big = peak_near(1.3, 650.0, 1430.0);
        let ratio = f_big / f_small;
        assert!(
            (ratio - 1.3).abs() < 0.12,
            "formant scale 1.3 moved F1 by {ratio} ({f_small} -> {f_big})"
        );
    }

    #[test]
    fn lips_close_for_bilabials_and_ignore_distortion() {
        let p = test_profile();
        // m, p, b surrounded by open vowels.
        let s = vec![4, 16, 4, 28, 4, 29, 4];
        let id = DysarthriaTransform::identity();
        let clean = synthesize(&p, &s, &id, SR, 61);
        // Opening must dip low inside each bilabial segment.
        for (i, &ph) in s.iter().enumerate() {
            if matches!(ph, 16 | 28 | 29) {
                let (start, len) = clean.durations[i];
                let lo = (start + len / 2) / 240;
                let hi = ((start + len) / 240).min(clean.lips.nrows() - 1);
                let min_open = (lo..=hi).map(|k| clean.lips[[k, 0]]).fold(1.0f64, f64::min);
                assert!(min_open < 0.15, "phoneme {i} opening {min_open}");
            }
        }
        // Distortion-only transform: audio changes, lips do not.
        let mut tf = DysarthriaTransform::identity();
        tf.distortion_prob = 1.0;
        let distorted = synthesize(&p, &s, &tf, SR, 61);
        assert_eq!(clean.lips, distorted.lips, "lips must track intended phonemes");
        assert_ne!(clean.wav, distorted.wav, "audio must reflect the distortion");
        assert_eq!(clean.durations, distorted.durations);
    }

    #[test]
    fn fricative_energy_sits_near_its_noise_resonance() {
        let p = test_profile();
        // s-s-s-s: high-frequency frication around 5.8 kHz.
        let out = synthesize(&p, &[19, 19, 19, 19], &DysarthriaTransform::identity(), SR, 71);
        let stft = Stft::new(2048, 2048, 512);
        let spec = stft.analyze(&out.wav);
        let bin_hz = SR as f64 / 2048.0;
        // Average spectrum over the middle frames.
        let t0 = spec.nrows() / 3;
        let t1 = 2 * spec.nrows() / 3;
        let lo_band: f64 = (t0..t1)
            .map(|t| {
                ((500.0 / bin_hz) as usize..(2000.0 / bin_hz) as usize)
                    .map(|b| spec[[t, b]].norm())
                    .sum::<f64>()
            })
            .sum();
        let hi_band: f64 = (t0..t1)
            .map(|t| {
                ((4800.0 / bin_hz) as usize..(6800.0 / bin_hz) as usize)
                    .map(|b| spec[[t, b]].norm())
                    .sum::<f64>()
            })
            .sum();
        assert!(hi_band > 2.0 * lo_band, "frication band {hi_band} vs low band {lo_band}");
    }

    #[test]
    fn speaker_sampling_is_separated_and_deterministic() {
        let a = sample_speakers(20, 4, 99);
        let b = sample_speakers(20, 4, 99);
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert_eq!(a.iter().filter(|p| p.dysarthric).count(), 4);
        assert!(a.iter().take(16).all(|p| !p.dysarthric));
        for i in 0..20 {
            assert_eq!(a[i].id, i as u32);
            assert!(a[i].base_f0 >= 80.0 && a[i].base_f0 <= 300.0);
            for j in 0..i {
                let sep = (a[i].base_f0 / a[j].base_f0).ln().abs()
                    + (a[i].formant_scale - a[j].formant_scale).abs();
                assert!(sep >= 0.06, "speakers {i}/{j} too close");
            }
        }
    }

    #[test]
    fn transform_sampling_stays_in_range() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let tf = sample_transform(&mut rng);
            assert!(tf.tempo_factor >= 0.45 && tf.tempo_factor <= 0.7);
            assert!(tf.pitch_flatten >= 0.6 && tf.pitch_flatten <= 0.9);
            assert!(tf.pitch_jitter_std >= 0.3 && tf.pitch_jitter_std <= 0.8);
            assert!(tf.distortion_prob >= 0.25 && tf.distortion_prob <= 0.45);
            let snr = tf.noise_snr_db.unwrap();
            assert!((8.0..=15.0).contains(&snr));
            assert!(!tf.is_identity());
        }
        assert!(DysarthriaTransform::identity().is_identity());
    }

    #[test]
    fn denoiser_improves_snr_and_spares_clean_speech() {
        let p = test_profile();
        let s = vowel_sentence();
        let clean = synthesize(&p, &s, &DysarthriaTransform::identity(), SR, 81);
        let mut tf = DysarthriaTransform::identity();
        tf.noise_snr_db = Some(8.0);
        let noisy = synthesize(&p, &s, &tf, SR, 81);
        let den = denoise(&noisy.wav, SR);
        let span = clean.durations[0].0..{
            let last = clean.durations.last().unwrap();
            last.0 + last.1
        };
        let snr_before = dsp::snr_db(&clean.wav[span.clone()], &noisy.wav[span.clone()]);
        let snr_after = dsp::snr_db(&clean.wav[span.clone()], &den[span.clone()]);
        assert!(
            snr_after > snr_before + 5.0,
            "denoise gain too small: {snr_before} -> {snr_after}"
        );
        // A clean signal should pass nearly untouched.
        let den_clean = denoise(&clean.wav, SR);
        let snr_clean = dsp::snr_db(&clean.wav[span.clone()], &den_clean[span]);
        assert!(snr_clean > 12.0, "clean passthrough SNR {snr_clean}");
    }
}
