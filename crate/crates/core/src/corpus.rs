//! Corpus construction and access: renders every utterance to WAV, writes a
//! line-delimited manifest, and loads it all back for the training stages.
//!
//! Partition layout:
//! - `normal-train`: typical speakers, normal condition — trains the codec,
//!   content encoder, speaker embedder, and language models.
//! - `normal-codecset`: every speaker's normal-condition utterances — the
//!   retrieval pool the speaker-normalization stage searches.
//! - `dysarthric-adapt`: held-out speakers, dysarthric condition — the small
//!   per-speaker adaptation set for the content encoder.
//! - `dysarthric-test`: held-out speakers, dysarthric condition — evaluation
//!   inputs, never touched by any training stage.
//!
//! Each manifest line records the utterance seed, so any rendered variant of
//! the same speech act (in particular the paired normal-condition reference
//! for a dysarthric utterance) can be regenerated bit-identically on demand.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio;
use crate::config::CorpusConfig;
use crate::error::{invalid_input, Error, Result};
use crate::par;
use crate::phonemes;
use crate::seeds;
use crate::synth::{self, DysarthriaTransform, SpeakerProfile, SynthOutput};

/// The four corpus partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub enum Partition {
    #[serde(rename = "normal-train")]
    NormalTrain,
    #[serde(rename = "normal-codecset")]
    NormalCodecset,
    #[serde(rename = "dysarthric-adapt")]
    DysarthricAdapt,
    #[serde(rename = "dysarthric-test")]
    DysarthricTest,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::NormalTrain,
        Partition::NormalCodecset,
        Partition::DysarthricAdapt,
        Partition::DysarthricTest,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::NormalTrain => "normal-train",
            Partition::NormalCodecset => "normal-codecset",
            Partition::DysarthricAdapt => "dysarthric-adapt",
            Partition::DysarthricTest => "dysarthric-test",
        }
    }

    fn code(&self) -> u64 {
        match self {
            Partition::NormalTrain => 0,
            Partition::NormalCodecset => 1,
            Partition::DysarthricAdapt => 2,
            Partition::DysarthricTest => 3,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Normal,
    Dysarthric,
}

/// One manifest line. Field order is fixed: wav, speaker_id, condition,
/// phonemes, transform, then the regeneration seed and the partition tag.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// WAV path relative to the corpus root.
    pub wav: String,
    pub speaker_id: u32,
    pub condition: Condition,
    /// Intended phoneme ids (the transcript).
    pub phonemes: Vec<usize>,
    pub transform: DysarthriaTransform,
    /// Utterance seed: regenerates audio and lips for any transform.
    pub seed: u64,
    pub partition: Partition,
}

impl ManifestEntry {
    /// Stable per-utterance identifier (doubles as the codec-set entry id).
    pub fn utt_id(&self) -> String {
        format!(
            "{}/spk{:02}/{:016x}",
            self.partition.as_str(),
            self.speaker_id,
            self.seed
        )
    }
}

/// A corpus on disk: speakers, manifest, and the audio next to them.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub sample_rate: u32,
    pub speakers: Vec<SpeakerProfile>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    seed: u64,
    sample_rate: u32,
    speakers: Vec<SpeakerProfile>,
}

const MANIFEST_FILE: &str = "manifest.jsonl";
const HEADER_FILE: &str = "corpus.json";

/// Build the full corpus under `root`. Deterministic in `cfg`: the same
/// configuration produces byte-identical manifests and WAV files.
pub fn build_corpus(cfg: &CorpusConfig, root: &Path) -> Result<Corpus> {
    cfg.validate()?;
    let speakers = synth::sample_speakers(cfg.num_speakers, cfg.dysarthric_speakers, cfg.seed);
    // One dysarthria severity per affected speaker: a speaker's condition is
    // a stable property, shared by their adapt and test material.
    let severities: Vec<DysarthriaTransform> = speakers
        .iter()
        .map(|s| synth::sample_transform(&mut seeds::rng_for(cfg.seed, "severity", s.id as u64)))
        .collect();

    let mut plan: Vec<ManifestEntry> = Vec::new();
    for part in Partition::ALL {
        let (speaker_ids, count, condition): (Vec<u32>, usize, Condition) = match part {
            Partition::NormalTrain => (
                cfg.train_speakers().map(|i| i as u32).collect(),
                cfg.train_utts,
                Condition::Normal,
            ),
            Partition::NormalCodecset => (
                (0..cfg.num_speakers as u32).collect(),
                cfg.codecset_utts,
                Condition::Normal,
            ),
            Partition::DysarthricAdapt => (
                cfg.heldout_speakers().map(|i| i as u32).collect(),
                cfg.adapt_utts,
                Condition::Dysarthric,
            ),
            Partition::DysarthricTest => (
                cfg.heldout_speakers().map(|i| i as u32).collect(),
                cfg.test_utts,
                Condition::Dysarthric,
            ),
        };
        for &spk in &speaker_ids {
            for idx in 0..count {
                let utt_seed = seeds::derive(
                    cfg.seed,
                    "utt",
                    spk as u64 * 1_000_000 + part.code() * 10_000 + idx as u64,
                );
                let mut rng = seeds::rng_for(utt_seed, "sentence", 0);
                let len = rng.gen_range(cfg.phonemes_min..=cfg.phonemes_max);
                let sentence = phonemes::random_sentence(&mut rng, len);
                let transform = match condition {
                    Condition::Normal => DysarthriaTransform::identity(),
                    Condition::Dysarthric => severities[spk as usize].clone(),
                };
                plan.push(ManifestEntry {
                    wav: format!("wav/{}/spk{:02}_{:016x}.wav", part.as_str(), spk, utt_seed),
                    speaker_id: spk,
                    condition,
                    phonemes: sentence,
                    transform,
                    seed: utt_seed,
                    partition: part,
                });
            }
        }
    }

    for part in Partition::ALL {
        fs::create_dir_all(root.join("wav").join(part.as_str()))?;
    }
    // Rendering dominates; one task per utterance.
    let speakers_ref = &speakers;
    let rendered: Vec<Result<()>> = par::map(&plan, |entry| {
        let profile = &speakers_ref[entry.speaker_id as usize];
        let out = synth::synthesize(
            profile,
            &entry.phonemes,
            &entry.transform,
            cfg.sample_rate,
            entry.seed,
        );
        audio::write_wav(&root.join(&entry.wav), &out.wav, cfg.sample_rate)
    });
    for r in rendered {
        r?;
    }

    let mut manifest = fs::File::create(root.join(MANIFEST_FILE))?;
    for entry in &plan {
        let line = serde_json::to_string(entry).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(manifest, "{line}")?;
    }
    let header = CorpusHeader {
        seed: cfg.seed,
        sample_rate: cfg.sample_rate,
        speakers: speakers.clone(),
    };
    fs::write(
        root.join(HEADER_FILE),
        serde_json::to_string_pretty(&header).map_err(|e| Error::Format(e.to_string()))?,
    )?;

    Ok(Corpus {
        root: root.to_path_buf(),
        sample_rate: cfg.sample_rate,
        speakers,
        entries: plan,
    })
}

/// True when `root` holds a finished corpus. The header is written after
/// every waveform and the manifest, so its presence implies completeness.
pub fn corpus_exists(root: &Path) -> bool {
    root.join(HEADER_FILE).exists() && root.join(MANIFEST_FILE).exists()
}

/// Load a corpus previously written by [`build_corpus`].
pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let header: CorpusHeader = serde_json::from_str(&fs::read_to_string(root.join(HEADER_FILE))?)
        .map_err(|e| Error::Format(format!("corpus header: {e}")))?;
    let file = fs::File::open(root.join(MANIFEST_FILE))?;
    let mut entries = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", ln + 1)))?;
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(invalid_input("manifest has no entries"));
    }
    Ok(Corpus {
        root: root.to_path_buf(),
        sample_rate: header.sample_rate,
        speakers: header.speakers,
        entries,
    })
}

impl Corpus {
    pub fn partition(&self, part: Partition) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.partition == part).collect()
    }

    pub fn speaker(&self, id: u32) -> &SpeakerProfile {
        &self.speakers[id as usize]
    }

    /// Read an entry's stored waveform.
    pub fn load_wav(&self, entry: &ManifestEntry) -> Result<Vec<f64>> {
        let (samples, sr) = audio::read_wav(&self.root.join(&entry.wav))?;
        if sr != self.sample_rate {
            return Err(invalid_input(format!(
                "{}: sample rate {sr} != corpus rate {}",
                entry.wav, self.sample_rate
            )));
        }
        Ok(samples)
    }

    /// Re-render an entry exactly as stored (same transform, same seed).
    pub fn regenerate(&self, entry: &ManifestEntry) -> SynthOutput {
        synth::synthesize(
            self.speaker(entry.speaker_id),
            &entry.phonemes,
            &entry.transform,
            self.sample_rate,
            entry.seed,
        )
    }

    /// Render the paired normal-condition version of an entry: the same
    /// speech act without the dysarthria — the reconstruction target.
    pub fn regenerate_normal(&self, entry: &ManifestEntry) -> SynthOutput {
        synth::synthesize(
            self.speaker(entry.speaker_id),
            &entry.phonemes,
            &DysarthriaTransform::identity(),
            self.sample_rate,
            entry.seed,
        )
    }
}
