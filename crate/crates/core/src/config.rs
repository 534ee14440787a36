//! TOML experiment configuration.
//!
//! One file configures the whole pipeline; each stage reads its own section.
//! Unknown keys anywhere are a hard error so typos can't silently fall back
//! to defaults. Every field has a default tuned to complete the full run on
//! a single CPU core.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    /// All artifacts (corpus, checkpoints, reconstructions, reports) land here.
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub codec: CodecConfig,
    pub content: ContentConfig,
    pub sv: SvConfig,
    pub lm: LmConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 17,
            out_dir: PathBuf::from("out"),
            corpus: CorpusConfig::default(),
            codec: CodecConfig::default(),
            content: ContentConfig::default(),
            sv: SvConfig::default(),
            lm: LmConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.codec.validate()?;
        self.content.validate()?;
        self.sv.validate()?;
        self.lm.validate()?;
        Ok(())
    }
}

/// Synthetic-corpus layout: which speakers exist, how many utterances each
/// partition holds, and how long the spoken phrases are.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Total speakers; ids run 0..num_speakers.
    pub num_speakers: usize,
    /// The last `dysarthric_speakers` ids are held out of all training and
    /// appear only with dysarthric test/adapt material (plus their normal
    /// utterances in the retrieval partition).
    pub dysarthric_speakers: usize,
    /// Normal utterances per non-held-out speaker (train partition).
    pub train_utts: usize,
    /// Normal utterances per speaker (retrieval-set partition, all speakers).
    pub codecset_utts: usize,
    /// Dysarthric utterances per held-out speaker for per-speaker fine-tuning.
    pub adapt_utts: usize,
    /// Dysarthric utterances per held-out speaker for testing.
    pub test_utts: usize,
    pub phonemes_min: usize,
    pub phonemes_max: usize,
    pub sample_rate: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 42,
            num_speakers: 20,
            dysarthric_speakers: 4,
            train_utts: 10,
            codecset_utts: 6,
            adapt_utts: 6,
            test_utts: 8,
            phonemes_min: 6,
            phonemes_max: 9,
            sample_rate: 24000,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 {
            return Err(Error::Config("corpus.num_speakers must be >= 2".into()));
        }
        if self.dysarthric_speakers >= self.num_speakers {
            return Err(Error::Config(
                "corpus.dysarthric_speakers must leave at least one normal speaker".into(),
            ));
        }
        if self.train_utts < 1 || self.codecset_utts < 1 {
            return Err(Error::Config("corpus needs >= 1 utterance per partition".into()));
        }
        if self.phonemes_min < 1 || self.phonemes_min > self.phonemes_max {
            return Err(Error::Config("corpus phoneme count range is empty".into()));
        }
        Ok(())
    }

    /// Speaker ids that participate in model training.
    pub fn train_speakers(&self) -> std::ops::Range<usize> {
        0..self.num_speakers - self.dysarthric_speakers
    }

    /// Held-out speaker ids evaluated in the dysarthric condition.
    pub fn heldout_speakers(&self) -> std::ops::Range<usize> {
        self.num_speakers - self.dysarthric_speakers..self.num_speakers
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub quantizers: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    /// Encoder stride per block; the product is the codec frame hop.
    pub strides: Vec<usize>,
    /// Channel width after each encoder block (last = latent_dim).
    pub channels: Vec<usize>,
    pub steps: usize,
    pub lr: f64,
    /// Random crop length per training step, seconds.
    pub crop_seconds: f64,
    pub commit_weight: f64,
    pub spectral_weight: f64,
    pub ema_decay: f64,
    /// Codebook entries unused for this many steps are reseeded from batch latents.
    pub dead_code_steps: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            quantizers: 8,
            codebook_size: 1024,
            latent_dim: 64,
            strides: vec![4, 4, 5, 4],
            channels: vec![16, 24, 32, 64],
            steps: 1500,
            lr: 1e-3,
            crop_seconds: 0.5,
            commit_weight: 0.25,
            spectral_weight: 1.0,
            ema_decay: 0.99,
            dead_code_steps: 100,
        }
    }
}

impl CodecConfig {
    pub fn frame_hop(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.quantizers == 0 || self.codebook_size == 0 {
            return Err(Error::Config("codec.quantizers/codebook_size must be > 0".into()));
        }
        if self.strides.len() != self.channels.len() || self.strides.is_empty() {
            return Err(Error::Config(
                "codec.strides and codec.channels must be equal-length and non-empty".into(),
            ));
        }
        if *self.channels.last().unwrap() != self.latent_dim {
            return Err(Error::Config(
                "codec.channels must end at codec.latent_dim".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContentConfig {
    /// Transformer width (also the fused feature dimension).
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// LDA output dimension of the visual stream.
    pub visual_dim: usize,
    /// DCT coefficients kept per lip channel.
    pub dct_coeffs: usize,
    /// DCT window / hop in visual samples.
    pub dct_window: usize,
    pub dct_hop: usize,
    /// CTC weight in the joint loss; the attention branch gets 1 - this.
    pub ctc_weight: f64,
    /// Steps of multi-speaker dysarthric training.
    pub stage1_steps: usize,
    /// Steps of per-speaker fine-tuning.
    pub finetune_steps: usize,
    /// Steps for the separate normal-speech reference recognizer.
    pub recognizer_steps: usize,
    pub lr: f64,
    /// Probability of zeroing the visual stream during training, so the
    /// audio-only evaluation path stays in-distribution.
    pub visual_dropout: f64,
    /// Decoder LSTM width and attention internals.
    pub attn_dim: usize,
    pub attn_conv_filters: usize,
    pub attn_conv_kernel: usize,
}

impl Default for ContentConfig {
    fn default() -> Self {
        ContentConfig {
            hidden_dim: 96,
            layers: 4,
            heads: 4,
            ffn_mult: 2,
            visual_dim: 16,
            dct_coeffs: 6,
            dct_window: 8,
            dct_hop: 2,
            ctc_weight: 0.3,
            stage1_steps: 2600,
            finetune_steps: 300,
            recognizer_steps: 2200,
            lr: 1e-3,
            visual_dropout: 0.2,
            attn_dim: 64,
            attn_conv_filters: 8,
            attn_conv_kernel: 11,
        }
    }
}

impl ContentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config("content.hidden_dim must divide by heads".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::Config("content.ctc_weight must be in [0,1]".into()));
        }
        if self.attn_conv_kernel % 2 == 0 {
            return Err(Error::Config("content.attn_conv_kernel must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvConfig {
    /// Per-quantizer code-embedding width (summed across quantizers).
    pub code_embed_dim: usize,
    pub rnn_dim: usize,
    pub rnn_layers: usize,
    /// Output speaker-embedding dimension.
    pub embed_dim: usize,
    pub steps: usize,
    pub speakers_per_batch: usize,
    pub utts_per_speaker: usize,
    pub lr: f64,
}

impl Default for SvConfig {
    fn default() -> Self {
        SvConfig {
            code_embed_dim: 32,
            rnn_dim: 48,
            rnn_layers: 2,
            embed_dim: 64,
            steps: 900,
            speakers_per_batch: 4,
            utts_per_speaker: 3,
            lr: 2e-3,
        }
    }
}

impl SvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers_per_batch < 2 || self.utts_per_speaker < 2 {
            return Err(Error::Config(
                "sv batch needs >= 2 speakers and >= 2 utterances each".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub ar_steps: usize,
    pub nar_steps: usize,
    pub lr: f64,
    /// Phoneme-posterior frames are mean-pooled by this stride before
    /// conditioning, shrinking the attention span.
    pub pool_stride: usize,
    /// Training prompts are prefixes up to this fraction of the utterance.
    pub prompt_frac_max: f64,
    /// Sampling controls for first-quantizer generation (0 temperature = greedy).
    pub temperature: f64,
    pub top_k: usize,
    /// Generation length cap as a multiple of the expected length.
    pub max_len_factor: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            dim: 96,
            layers: 4,
            heads: 4,
            ffn_mult: 2,
            ar_steps: 2600,
            nar_steps: 2000,
            lr: 1e-3,
            pool_stride: 4,
            prompt_frac_max: 0.5,
            temperature: 0.8,
            top_k: 50,
            max_len_factor: 2.0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::Config("lm.dim must divide by heads".into()));
        }
        if self.temperature < 0.0 {
            return Err(Error::Config("lm.temperature must be >= 0".into()));
        }
        if self.max_len_factor < 1.0 {
            return Err(Error::Config("lm.max_len_factor must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generation temperature used for test-set reconstruction (0 = greedy,
    /// which keeps evaluation deterministic and content-faithful).
    pub temperature: f64,
    /// Number of different-speaker trials per utterance in the EER list.
    pub eer_diff_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            temperature: 0.0,
            eer_diff_trials: 8,
        }
    }
}
