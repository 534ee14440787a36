//! End-to-end dysarthric speech reconstruction.
//!
//! For one dysarthric utterance: denoise and extract phoneme posteriors,
//! encode the audio to codes, retrieve the nearest normal speaker prompt in
//! the speaker-verification space, generate a fresh code matrix with the
//! hierarchical language model, and decode it back to a waveform. Every run
//! emits a provenance record naming the matched prompt and timing each
//! stage.

use std::fs::File;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecMatrix, CodecModel};
use crate::codecset::{self, CodecSet};
use crate::config::LmConfig;
use crate::content::{self, ContentModel};
use crate::corpus::{Condition, Corpus, ManifestEntry};
use crate::error::{invalid_input, invalid_state, Error, Result};
use crate::features;
use crate::lm::{self, ArModel, NarModel, ReconstructionRequest};
use crate::sv::SvEstimator;
use crate::synth;

/// Everything the reconstruction pipeline needs, borrowed immutably so
/// utterances can be processed concurrently.
pub struct Pipeline<'a> {
    /// Content encoder for the input speaker (fine-tuned instance if any).
    pub content: &'a ContentModel,
    pub sv: &'a SvEstimator,
    pub set: &'a CodecSet,
    pub ar: &'a ArModel,
    pub nar: &'a NarModel,
    pub codec: &'a CodecModel,
    pub lm_cfg: &'a LmConfig,
}

/// Where the acoustic prompt for generation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptSource {
    /// Nearest normal utterance retrieved in the SV space.
    Normalized,
    /// The input's own dysarthric codes (ablation arm).
    Dysarthric,
}

/// Structured record of one reconstruction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub utt_id: String,
    pub speaker_id: u32,
    pub prompt_source: PromptSource,
    pub prompt_utt_id: String,
    pub prompt_speaker_id: u32,
    /// L1 distance between the input's SV embedding and the prompt's.
    pub sv_distance: f64,
    pub truncated: bool,
    /// (stage name, milliseconds) in execution order.
    pub stage_ms: Vec<(String, f64)>,
}

pub struct Reconstruction {
    pub wav: Vec<f64>,
    pub provenance: Provenance,
}

/// Posterior extraction shared by reconstruction and evaluation: denoise,
/// audio features, and the visual stream when the model carries one.
pub fn utterance_posteriors(
    model: &ContentModel,
    corpus: &Corpus,
    entry: &ManifestEntry,
) -> Result<Array2<f64>> {
    let wav = corpus.load_wav(entry)?;
    let clean = synth::denoise(&wav, corpus.sample_rate);
    let audio = features::extract_audio_features(&clean, corpus.sample_rate)?;
    let visual = if model.visual_dim > 0 {
        let rendered = corpus.regenerate(entry);
        Some(content::extract_visual_features(model, &rendered.lips, audio.nrows())?)
    } else {
        None
    };
    model.phoneme_embeddings(&audio, visual.as_ref())
}

/// Expected first-stage code length for a normal-paced rendering: decoded
/// phoneme count over the speaker's phonemes-per-second, plus the leading
/// and trailing silence the synthesizer always adds.
fn expected_frames(
    posteriors: &Array2<f64>,
    speaking_rate: f64,
    sample_rate: u32,
    frame_hop: usize,
) -> usize {
    let decoded = revoice_nn::ctc::ctc_greedy_decode(posteriors, crate::phonemes::BLANK);
    let n_ph = decoded.len().max(1);
    let secs = n_ph as f64 / speaking_rate + 2.0 * synth::SILENCE_SEC;
    ((secs * sample_rate as f64 / frame_hop as f64).ceil() as usize).max(4)
}

fn timed<T>(
    stage: &'static str,
    log: &mut Vec<(String, f64)>,
    f: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let t0 = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage));
    log.push((stage.to_string(), t0.elapsed().as_secs_f64() * 1e3));
    out
}

/// Reconstruct with an explicit prompt (the ablation entry point). The
/// public `reconstruct` retrieves the normalized prompt first; the ablation
/// arm passes the utterance's own dysarthric codes instead.
pub fn reconstruct_with_prompt(
    pipe: &Pipeline,
    corpus: &Corpus,
    entry: &ManifestEntry,
    posteriors: &Array2<f64>,
    prompt: &CodecMatrix,
    prompt_info: (PromptSource, String, u32, f64),
    seed: u64,
    stage_ms: Vec<(String, f64)>,
) -> Result<Reconstruction> {
    let mut stage_ms = stage_ms;
    let (source, prompt_utt_id, prompt_speaker_id, sv_distance) = prompt_info;

    let speaking_rate = corpus.speaker(entry.speaker_id).speaking_rate;
    let expect = expected_frames(
        posteriors,
        speaking_rate,
        corpus.sample_rate,
        pipe.codec.frame_hop(),
    );
    let budget = (pipe.lm_cfg.max_len_factor * expect as f64).ceil() as usize;
    let req = ReconstructionRequest {
        posteriors,
        prompt,
        temperature: pipe.lm_cfg.temperature,
        top_k: pipe.lm_cfg.top_k,
        max_len: prompt.frames() + budget,
        seed,
    };

    let (stage1, truncated) = timed("stage1", &mut stage_ms, || {
        let (codes, truncated) = lm::generate_stage1(pipe.ar, &req)?;
        if codes.is_empty() {
            return Err(invalid_state("first-stage generation produced no codes"));
        }
        Ok((codes, truncated))
    })?;

    let full = timed("upper-stages", &mut stage_ms, || {
        lm::generate_upper_stages(pipe.nar, &stage1, &req)
    })?;

    let wav = timed("decode", &mut stage_ms, || pipe.codec.decode(&full))?;

    Ok(Reconstruction {
        wav,
        provenance: Provenance {
            utt_id: entry.utt_id(),
            speaker_id: entry.speaker_id,
            prompt_source: source,
            prompt_utt_id,
            prompt_speaker_id,
            sv_distance,
            truncated,
            stage_ms,
        },
    })
}

/// Full reconstruction of one dysarthric utterance.
pub fn reconstruct(
    pipe: &Pipeline,
    corpus: &Corpus,
    entry: &ManifestEntry,
    seed: u64,
) -> Result<Reconstruction> {
    if entry.condition != Condition::Dysarthric {
        return Err(invalid_input("reconstruction expects a dysarthric utterance"));
    }
    let mut stage_ms: Vec<(String, f64)> = Vec::new();

    let posteriors = timed("content", &mut stage_ms, || {
        utterance_posteriors(pipe.content, corpus, entry)
    })?;

    let own_codes = timed("encode", &mut stage_ms, || {
        let wav = corpus.load_wav(entry)?;
        let clean = synth::denoise(&wav, corpus.sample_rate);
        pipe.codec.encode(&clean, corpus.sample_rate)
    })?;

    let (prompt, info) = timed("normalize", &mut stage_ms, || {
        codecset::normalize(pipe.sv, pipe.set, &own_codes)
    })?;

    reconstruct_with_prompt(
        pipe,
        corpus,
        entry,
        &posteriors,
        &prompt,
        (
            PromptSource::Normalized,
            info.utt_id.clone(),
            info.speaker_id,
            info.distance,
        ),
        seed,
        stage_ms,
    )
}

/// One provenance record per line, as JSON.
pub fn save_provenance(path: &Path, records: &[Provenance]) -> Result<()> {
    let mut f = File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::format(format!("provenance serialization failed: {e}")))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn load_provenance(path: &Path) -> Result<Vec<Provenance>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Provenance = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("bad provenance line: {e}")))?;
        out.push(r);
    }
    Ok(out)
}
