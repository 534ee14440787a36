//! The fixed 40-phoneme inventory (plus CTC blank).
//!
//! Each phoneme carries everything the rest of the system needs: source type
//! and spectral shape for the synthesizer, a relative duration, and a lip
//! configuration (opening, width, protrusion) for the visual stream. Values
//! are loosely modeled on English phonetics — close enough that formant
//! patterns separate the classes, which is all the pipeline requires.

use rand::Rng;

/// CTC blank id; not a real phoneme, never appears in transcripts.
pub const BLANK: usize = 40;
/// Posterior vocabulary size: 40 phonemes + blank.
pub const VOCAB: usize = 41;
/// Number of real phonemes.
pub const NUM_PHONEMES: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Vowel,
    Nasal,
    Fricative,
    Stop,
    Approximant,
}

#[derive(Debug, Clone, Copy)]
pub struct PhonemeDef {
    pub name: &'static str,
    pub kind: Kind,
    /// Periodic (glottal) source present.
    pub voiced: bool,
    /// Noise-source amplitude in [0,1] (fricatives, stop bursts).
    pub frication: f64,
    /// Steady-state formant frequencies, Hz.
    pub formants: [f64; 3],
    /// Diphthongs/glides move toward these targets over the segment.
    pub glide_to: Option<[f64; 3]>,
    /// Formant bandwidths, Hz.
    pub bandwidths: [f64; 3],
    /// Per-formant amplitudes (linear).
    pub amps: [f64; 3],
    /// Center/width of the frication noise resonance, Hz.
    pub noise_center: f64,
    pub noise_bw: f64,
    /// Relative duration (1.0 = average); absolute durations come from the
    /// speaker's phonemes-per-second rate.
    pub base_dur: f64,
    /// Lip configuration: opening, width, protrusion, each in [0,1].
    pub lips: [f64; 3],
}

const VOWEL_BW: [f64; 3] = [70.0, 90.0, 140.0];
const VOWEL_AMPS: [f64; 3] = [1.0, 0.6, 0.25];
const NASAL_BW: [f64; 3] = [110.0, 160.0, 220.0];
const NASAL_AMPS: [f64; 3] = [1.0, 0.32, 0.14];
const APPROX_AMPS: [f64; 3] = [1.0, 0.55, 0.2];

const fn vowel(
    name: &'static str,
    f: [f64; 3],
    lips: [f64; 3],
) -> PhonemeDef {
    PhonemeDef {
        name,
        kind: Kind::Vowel,
        voiced: true,
        frication: 0.0,
        formants: f,
        glide_to: None,
        bandwidths: VOWEL_BW,
        amps: VOWEL_AMPS,
        noise_center: 0.0,
        noise_bw: 1.0,
        base_dur: 1.2,
        lips,
    }
}

const fn diphthong(
    name: &'static str,
    f: [f64; 3],
    to: [f64; 3],
    lips: [f64; 3],
) -> PhonemeDef {
    PhonemeDef {
        glide_to: Some(to),
        base_dur: 1.5,
        ..vowel(name, f, lips)
    }
}

const fn nasal(name: &'static str, f: [f64; 3], lips: [f64; 3]) -> PhonemeDef {
    PhonemeDef {
        name,
        kind: Kind::Nasal,
        voiced: true,
        frication: 0.0,
        formants: f,
        glide_to: None,
        bandwidths: NASAL_BW,
        amps: NASAL_AMPS,
        noise_center: 0.0,
        noise_bw: 1.0,
        base_dur: 0.8,
        lips,
    }
}

const fn fricative(
    name: &'static str,
    voiced: bool,
    noise_center: f64,
    noise_bw: f64,
    noise_amp: f64,
    lips: [f64; 3],
) -> PhonemeDef {
    PhonemeDef {
        name,
        kind: Kind::Fricative,
        voiced,
        frication: noise_amp,
        formants: [320.0, 1600.0, 2600.0],
        glide_to: None,
        bandwidths: [100.0, 150.0, 200.0],
        // A voiced fricative keeps a weak low-frequency voice component.
        amps: [0.5, 0.12, 0.05],
        noise_center,
        noise_bw,
        base_dur: 0.9,
        lips,
    }
}

const fn stop(
    name: &'static str,
    voiced: bool,
    burst_center: f64,
    burst_bw: f64,
    lips: [f64; 3],
) -> PhonemeDef {
    PhonemeDef {
        name,
        kind: Kind::Stop,
        voiced,
        frication: 1.0,
        formants: [480.0, 1500.0, 2500.0],
        glide_to: None,
        bandwidths: [90.0, 130.0, 180.0],
        amps: [0.8, 0.4, 0.15],
        noise_center: burst_center,
        noise_bw: burst_bw,
        base_dur: 0.7,
        lips,
    }
}

const fn approximant(name: &'static str, f: [f64; 3], lips: [f64; 3]) -> PhonemeDef {
    PhonemeDef {
        name,
        kind: Kind::Approximant,
        voiced: true,
        frication: 0.0,
        formants: f,
        glide_to: None,
        bandwidths: [90.0, 120.0, 170.0],
        amps: APPROX_AMPS,
        noise_center: 0.0,
        noise_bw: 1.0,
        base_dur: 0.8,
        lips,
    }
}

/// The inventory, indexed by phoneme id 0..40.
pub const INVENTORY: [PhonemeDef; NUM_PHONEMES] = [
    // Monophthong vowels.
    vowel("iy", [280.0, 2250.0, 2900.0], [0.25, 0.85, 0.10]),
    vowel("ih", [400.0, 2000.0, 2750.0], [0.30, 0.70, 0.10]),
    vowel("eh", [550.0, 1850.0, 2600.0], [0.45, 0.65, 0.10]),
    vowel("ae", [700.0, 1700.0, 2550.0], [0.65, 0.70, 0.05]),
    vowel("aa", [800.0, 1150.0, 2500.0], [0.80, 0.45, 0.10]),
    vowel("ao", [570.0, 850.0, 2450.0], [0.55, 0.30, 0.45]),
    vowel("ow", [470.0, 800.0, 2400.0], [0.40, 0.25, 0.60]),
    vowel("uw", [310.0, 750.0, 2300.0], [0.20, 0.15, 0.85]),
    vowel("uh", [430.0, 1050.0, 2350.0], [0.30, 0.30, 0.50]),
    vowel("ah", [620.0, 1250.0, 2500.0], [0.50, 0.50, 0.15]),
    vowel("er", [500.0, 1400.0, 1750.0], [0.35, 0.40, 0.30]),
    vowel("ax", [520.0, 1500.0, 2500.0], [0.35, 0.50, 0.15]),
    // Diphthongs.
    diphthong("ey", [480.0, 1900.0, 2650.0], [330.0, 2150.0, 2800.0], [0.35, 0.70, 0.10]),
    diphthong("ay", [750.0, 1250.0, 2550.0], [350.0, 2050.0, 2750.0], [0.60, 0.60, 0.10]),
    diphthong("oy", [520.0, 880.0, 2450.0], [360.0, 2000.0, 2700.0], [0.40, 0.35, 0.50]),
    diphthong("aw", [720.0, 1350.0, 2500.0], [350.0, 800.0, 2350.0], [0.60, 0.40, 0.40]),
    // Nasals. Bilabial closure for m; tongue closures leave the lips freer.
    nasal("m", [250.0, 1000.0, 2200.0], [0.00, 0.50, 0.20]),
    nasal("n", [280.0, 1450.0, 2400.0], [0.25, 0.55, 0.10]),
    nasal("ng", [280.0, 2000.0, 2600.0], [0.30, 0.50, 0.10]),
    // Fricatives.
    fricative("s", false, 5800.0, 1800.0, 1.0, [0.15, 0.80, 0.05]),
    fricative("sh", false, 3200.0, 1600.0, 1.0, [0.20, 0.40, 0.70]),
    fricative("f", false, 4500.0, 3500.0, 0.55, [0.10, 0.55, 0.25]),
    fricative("th", false, 5200.0, 3200.0, 0.45, [0.20, 0.60, 0.10]),
    fricative("hh", false, 1800.0, 2500.0, 0.50, [0.40, 0.50, 0.20]),
    fricative("z", true, 5800.0, 1800.0, 0.65, [0.15, 0.80, 0.05]),
    fricative("zh", true, 3200.0, 1600.0, 0.65, [0.20, 0.40, 0.70]),
    fricative("v", true, 4500.0, 3500.0, 0.40, [0.10, 0.55, 0.25]),
    fricative("dh", true, 5200.0, 3200.0, 0.35, [0.20, 0.60, 0.10]),
    // Stops (and the two affricates, realized as long-burst stops).
    stop("p", false, 1000.0, 1500.0, [0.00, 0.50, 0.30]),
    stop("b", true, 900.0, 1400.0, [0.00, 0.50, 0.30]),
    stop("t", false, 3800.0, 2200.0, [0.25, 0.65, 0.05]),
    stop("d", true, 3500.0, 2000.0, [0.25, 0.65, 0.05]),
    stop("k", false, 2200.0, 1500.0, [0.40, 0.50, 0.10]),
    stop("g", true, 2100.0, 1400.0, [0.40, 0.50, 0.10]),
    stop("ch", false, 3000.0, 1800.0, [0.20, 0.40, 0.60]),
    stop("jh", true, 2800.0, 1700.0, [0.20, 0.40, 0.60]),
    // Approximants.
    approximant("l", [360.0, 1100.0, 2700.0], [0.30, 0.55, 0.10]),
    approximant("r", [330.0, 1250.0, 1650.0], [0.25, 0.40, 0.45]),
    approximant("w", [320.0, 720.0, 2300.0], [0.12, 0.20, 0.90]),
    approximant("y", [290.0, 2150.0, 2850.0], [0.25, 0.75, 0.08]),
];

pub fn def(id: usize) -> &'static PhonemeDef {
    &INVENTORY[id]
}

pub fn name(id: usize) -> &'static str {
    if id == BLANK {
        "<b>"
    } else {
        INVENTORY[id].name
    }
}

/// Random phrase: uniform phoneme ids without immediate repeats.
pub fn random_sentence(rng: &mut impl Rng, len: usize) -> Vec<usize> {
    assert!(len >= 1);
    let mut out = Vec::with_capacity(len);
    let mut prev = usize::MAX;
    for _ in 0..len {
        loop {
            let id = rng.gen_range(0..NUM_PHONEMES);
            if id != prev {
                out.push(id);
                prev = id;
                break;
            }
        }
    }
    out
}
