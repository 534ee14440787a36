//! Staged pipeline driver: each stage writes its artifact under the output
//! directory and is skipped on the next run if that artifact already exists.
//! A stage failure carries the stage name outward so callers can map it to
//! a distinct process exit code.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;

use crate::codec::{train_codec, CodecMatrix, CodecModel};
use crate::codecset::{build_codec_set, CodecSet};
use crate::config::ExperimentConfig;
use crate::content::{
    train_content, train_reference_recognizer, ContentModel, TrainedContent,
};
use crate::corpus::{self, Corpus, Partition};
use crate::error::{Error, Result};
use crate::eval::{self, AblationReport, EvalInputs, EvalReport};
use crate::lm::{train_ar, train_nar, ArModel, NarModel};
use crate::reconstruct::{self, Pipeline, Provenance};
use crate::seeds;
use crate::sv::{train_sv, SvEstimator};

/// Top-level stages in execution order. Every fallible stage carries exactly
/// one of these names on failure.
pub const STAGES: [&str; 9] = [
    "synth-data",
    "train-codec",
    "train-content",
    "train-sv",
    "build-codecset",
    "train-lm",
    "reconstruct",
    "evaluate",
    "ablate-prompts",
];

/// Paths of every artifact below the experiment output directory.
pub struct Artifacts {
    root: PathBuf,
}

impl Artifacts {
    pub fn new(root: &Path) -> Self {
        Artifacts {
            root: root.to_path_buf(),
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn codec(&self) -> PathBuf {
        self.root.join("codec.rvct")
    }
    pub fn content_base(&self) -> PathBuf {
        self.root.join("content.rvct")
    }
    pub fn content_speaker(&self, id: u32) -> PathBuf {
        self.root.join(format!("content-spk{id:03}.rvct"))
    }
    pub fn recognizer(&self) -> PathBuf {
        self.root.join("recognizer.rvct")
    }
    pub fn sv(&self) -> PathBuf {
        self.root.join("sv.rvct")
    }
    pub fn codec_set(&self) -> PathBuf {
        self.root.join("codecset.rvcs")
    }
    pub fn lm_ar(&self) -> PathBuf {
        self.root.join("lm-ar.rvct")
    }
    pub fn lm_nar(&self) -> PathBuf {
        self.root.join("lm-nar.rvct")
    }
    pub fn recon_dir(&self) -> PathBuf {
        self.root.join("recon")
    }
    pub fn recon_wav(&self, utt_id: &str) -> PathBuf {
        self.recon_dir().join(format!("{utt_id}.wav"))
    }
    pub fn provenance(&self) -> PathBuf {
        self.recon_dir().join("provenance.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.toml")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.txt")
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation.toml")
    }
}

/// Run `work` under a stage label, logging the decision and the elapsed time.
fn staged<T>(stage: &'static str, work: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    log::info!("stage {stage}: running");
    let out = work().map_err(|e| e.wrap_stage(stage))?;
    log::info!("stage {stage}: done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(out)
}

/// Synthesize the corpus, or load it when the output directory already holds
/// a complete one.
pub fn ensure_corpus(cfg: &ExperimentConfig, arts: &Artifacts) -> Result<Corpus> {
    let dir = arts.corpus_dir();
    if corpus::corpus_exists(&dir) {
        log::info!("stage synth-data: reusing {}", dir.display());
        return corpus::load_corpus(&dir).map_err(|e| e.wrap_stage("synth-data"));
    }
    staged("synth-data", || {
        std::fs::create_dir_all(&dir)?;
        corpus::build_corpus(&cfg.corpus, &dir)
    })
}

pub fn ensure_codec(cfg: &ExperimentConfig, arts: &Artifacts) -> Result<CodecModel> {
    let path = arts.codec();
    if path.exists() {
        log::info!("stage train-codec: reusing {}", path.display());
        return CodecModel::load(&path).map_err(|e| e.wrap_stage("train-codec"));
    }
    let corpus = ensure_corpus(cfg, arts)?;
    staged("train-codec", || {
        let model = train_codec(&corpus, &cfg.codec, seeds::derive(cfg.seed, "stage-codec", 0))?;
        model.save(&path)?;
        Ok(model)
    })
}

/// The content stage's outputs: the shared encoder, its per-speaker
/// fine-tuned copies, and the normal-speech reference recognizer used only
/// for scoring.
pub struct ContentArtifacts {
    pub trained: TrainedContent,
    pub recognizer: ContentModel,
}

pub fn ensure_content(cfg: &ExperimentConfig, arts: &Artifacts) -> Result<ContentArtifacts> {
    let corpus = ensure_corpus(cfg, arts)?;
    let heldout: Vec<u32> = corpus
        .speakers
        .iter()
        .filter(|s| s.dysarthric)
        .map(|s| s.id)
        .collect();
    let complete = arts.content_base().exists()
        && arts.recognizer().exists()
        && heldout.iter().all(|&id| arts.content_speaker(id).exists());
    if complete {
        log::info!("stage train-content: reusing {}", arts.content_base().display());
        let load = || -> Result<ContentArtifacts> {
            let base = ContentModel::load(&arts.content_base())?;
            let mut speaker_models = Vec::new();
            for &id in &heldout {
                speaker_models.push((id, ContentModel::load(&arts.content_speaker(id))?));
            }
            Ok(ContentArtifacts {
                trained: TrainedContent {
                    base,
                    speaker_models,
                },
                recognizer: ContentModel::load(&arts.recognizer())?,
            })
        };
        return load().map_err(|e| e.wrap_stage("train-content"));
    }
    staged("train-content", || {
        let trained = train_content(
            &corpus,
            &cfg.content,
            seeds::derive(cfg.seed, "stage-content", 0),
        )?;
        let recognizer = train_reference_recognizer(
            &corpus,
            &cfg.content,
            seeds::derive(cfg.seed, "stage-recognizer", 0),
        )?;
        trained.base.save(&arts.content_base())?;
        for (id, model) in &trained.speaker_models {
            model.save(&arts.content_speaker(*id))?;
        }
        recognizer.save(&arts.recognizer())?;
        Ok(ContentArtifacts {
            trained,
            recognizer,
        })
    })
}

pub fn ensure_sv(cfg: &ExperimentConfig, arts: &Artifacts) -> Result<SvEstimator> {
    let path = arts.sv();
    if path.exists() {
        log::info!("stage train-sv: reusing {}", path.display());
        return SvEstimator::load(&path).map_err(|e| e.wrap_stage("train-sv"));
    }
    let corpus = ensure_corpus(cfg, arts)?;
    let codec = ensure_codec(cfg, arts)?;
    staged("train-sv", || {
        let est = train_sv(&corpus, &codec, &cfg.sv, seeds::derive(cfg.seed, "stage-sv", 0))?;
        est.save(&path)?;
        Ok(est)
    })
}

pub fn ensure_codec_set(cfg: &ExperimentConfig, arts: &Artifacts) -> Result<CodecSet> {
    let est = ensure_sv(cfg, arts)?;
    let path = arts.codec_set();
    if path.exists() {
        log::info!("stage build-codecset: reusing {}", path.display());
        return CodecSet::load(&path, &est).map_err(|e| e.wrap_stage("build-codecset"));
    }
    let corpus = ensure_corpus(cfg, arts)?;
    let codec = ensure_codec(cfg, arts)?;
    staged("build-codecset", || {
        let set = build_codec_set(&corpus, &codec, &est)?;
        set.save(&path)?;
        Ok(set)
    })
}

/// Training pairs for both language models: phoneme posteriors and codec
/// codes of every normal-train utterance.
fn lm_pairs(
    corpus: &Corpus,
    content: &ContentModel,
    codec: &CodecModel,
) -> Result<Vec<(Array2<f64>, CodecMatrix)>> {
    let mut pairs = Vec::new();
    for entry in corpus.partition(Partition::NormalTrain) {
        let posteriors = reconstruct::utterance_posteriors(content, corpus, entry)?;
        let wav = corpus.load_wav(entry)?;
        let codes = codec.encode(&wav, corpus.sample_rate)?;
        pairs.push((posteriors, codes));
    }
    Ok(pairs)
}

pub fn ensure_lm(cfg: &ExperimentConfig, arts: &Artifacts) -> Result<(ArModel, NarModel)> {
    let ar_path = arts.lm_ar();
    let nar_path = arts.lm_nar();
    if ar_path.exists() && nar_path.exists() {
        log::info!("stage train-lm: reusing {}", ar_path.display());
        let load = || Ok((ArModel::load(&ar_path)?, NarModel::load(&nar_path)?));
        return load().map_err(|e: Error| e.wrap_stage("train-lm"));
    }
    let corpus = ensure_corpus(cfg, arts)?;
    let codec = ensure_codec(cfg, arts)?;
    let content = ensure_content(cfg, arts)?;
    staged("train-lm", || {
        let pairs = lm_pairs(&corpus, &content.trained.base, &codec)?;
        let ar = train_ar(
            &pairs,
            &cfg.lm,
            codec.codebook_size,
            seeds::derive(cfg.seed, "stage-lm-ar", 0),
        )?;
        let nar = train_nar(
            &pairs,
            &cfg.lm,
            codec.codebook_size,
            codec.quantizers,
            seeds::derive(cfg.seed, "stage-lm-nar", 0),
        )?;
        ar.save(&ar_path)?;
        nar.save(&nar_path)?;
        Ok((ar, nar))
    })
}

/// Everything reconstruction and scoring need, loaded or trained.
pub struct LoadedPipeline {
    pub corpus: Corpus,
    pub codec: CodecModel,
    pub content: ContentArtifacts,
    pub sv: SvEstimator,
    pub set: CodecSet,
    pub ar: ArModel,
    pub nar: NarModel,
}

pub fn ensure_models(cfg: &ExperimentConfig, arts: &Artifacts) -> Result<LoadedPipeline> {
    let corpus = ensure_corpus(cfg, arts)?;
    let codec = ensure_codec(cfg, arts)?;
    let content = ensure_content(cfg, arts)?;
    let sv = ensure_sv(cfg, arts)?;
    let set = ensure_codec_set(cfg, arts)?;
    let (ar, nar) = ensure_lm(cfg, arts)?;
    Ok(LoadedPipeline {
        corpus,
        codec,
        content,
        sv,
        set,
        ar,
        nar,
    })
}

/// The generation settings used at test time: the trained language-model
/// geometry with the evaluation temperature.
fn eval_lm_cfg(cfg: &ExperimentConfig) -> crate::config::LmConfig {
    let mut lm = cfg.lm.clone();
    lm.temperature = cfg.eval.temperature;
    lm
}

/// Reconstruct every test utterance, writing one waveform per utterance and
/// a provenance line describing how it was produced.
pub fn ensure_reconstructions(cfg: &ExperimentConfig, arts: &Artifacts) -> Result<Vec<Provenance>> {
    let models = ensure_models(cfg, arts)?;
    let entries = models.corpus.partition(Partition::DysarthricTest);
    // Complete iff the provenance file lists exactly the test set and every
    // listed waveform is present; anything partial is redone from scratch
    // (regeneration is deterministic per seed).
    if arts.provenance().exists() {
        if let Ok(records) = reconstruct::load_provenance(&arts.provenance()) {
            let ids: Vec<String> = entries.iter().map(|e| e.utt_id()).collect();
            let recorded: Vec<&str> = records.iter().map(|r| r.utt_id.as_str()).collect();
            let all_wavs = records.iter().all(|r| arts.recon_wav(&r.utt_id).exists());
            if recorded == ids && all_wavs {
                log::info!("stage reconstruct: reusing {}", arts.provenance().display());
                return Ok(records);
            }
        }
        log::info!("stage reconstruct: artifacts incomplete, redoing the stage");
    }
    staged("reconstruct", || {
        std::fs::create_dir_all(arts.recon_dir())?;
        let lm_cfg = eval_lm_cfg(cfg);
        let mut records = Vec::with_capacity(entries.len());
        for (i, entry) in entries.iter().enumerate() {
            let pipe = Pipeline {
                content: models.content.trained.for_speaker(entry.speaker_id),
                sv: &models.sv,
                set: &models.set,
                ar: &models.ar,
                nar: &models.nar,
                codec: &models.codec,
                lm_cfg: &lm_cfg,
            };
            let seed = seeds::derive(cfg.seed, "reconstruct-utt", i as u64);
            let rec = reconstruct::reconstruct(&pipe, &models.corpus, entry, seed)?;
            crate::audio::write_wav(
                &arts.recon_wav(&entry.utt_id()),
                &rec.wav,
                models.corpus.sample_rate,
            )?;
            log::info!(
                "stage reconstruct: {} ({}/{})",
                entry.utt_id(),
                i + 1,
                entries.len()
            );
            records.push(rec.provenance);
        }
        reconstruct::save_provenance(&arts.provenance(), &records)?;
        Ok(records)
    })
}

/// Score the reconstructions and write the report plus a flat metrics file.
pub fn ensure_report(cfg: &ExperimentConfig, arts: &Artifacts) -> Result<EvalReport> {
    let records = ensure_reconstructions(cfg, arts)?;
    if arts.report().exists() {
        if let Ok(report) = EvalReport::load(&arts.report()) {
            log::info!("stage evaluate: reusing {}", arts.report().display());
            return Ok(report);
        }
        log::info!("stage evaluate: report unreadable, redoing the stage");
    }
    let models = ensure_models(cfg, arts)?;
    staged("evaluate", || {
        let report = eval::evaluate(&EvalInputs {
            corpus: &models.corpus,
            recognizer: &models.content.recognizer,
            sv: &models.sv,
            codec: &models.codec,
            set: &models.set,
            recon_dir: &arts.recon_dir(),
            provenance: &records,
        })?;
        report.save(&arts.report())?;
        std::fs::write(arts.metrics(), report.flat_summary())?;
        Ok(report)
    })
}

/// The full pipeline, corpus to report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let arts = Artifacts::new(&cfg.out_dir);
    ensure_report(cfg, &arts)
}

/// Reconstruct the test set twice — normalized prompts against the
/// utterance's own dysarthric codes — and write the paired comparison.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationReport> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let arts = Artifacts::new(&cfg.out_dir);
    if arts.ablation().exists() {
        if let Ok(report) = AblationReport::load(&arts.ablation()) {
            log::info!("stage ablate-prompts: reusing {}", arts.ablation().display());
            return Ok(report);
        }
        log::info!("stage ablate-prompts: report unreadable, redoing the stage");
    }
    let models = ensure_models(cfg, &arts)?;
    staged("ablate-prompts", || {
        let lm_cfg = eval_lm_cfg(cfg);
        let pipe_for = |speaker_id: u32| Pipeline {
            content: models.content.trained.for_speaker(speaker_id),
            sv: &models.sv,
            set: &models.set,
            ar: &models.ar,
            nar: &models.nar,
            codec: &models.codec,
            lm_cfg: &lm_cfg,
        };
        let report = eval::ablation_prompt_source(
            &pipe_for,
            &models.content.recognizer,
            &models.corpus,
            seeds::derive(cfg.seed, "stage-ablation", 0),
        )?;
        report.save(&arts.ablation())?;
        Ok(report)
    })
}

/// Exit code for a failed run: one distinct value per pipeline stage.
pub fn exit_code_for(err: &Error) -> i32 {
    match err.stage_name() {
        Some(stage) => match STAGES.iter().position(|s| *s == stage) {
            Some(i) => 10 + i as i32,
            None => 9,
        },
        None => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::invalid_state;

    #[test]
    fn artifact_paths_are_distinct_and_rooted() {
        let arts = Artifacts::new(Path::new("/tmp/x"));
        let all = [
            arts.corpus_dir(),
            arts.codec(),
            arts.content_base(),
            arts.content_speaker(7),
            arts.recognizer(),
            arts.sv(),
            arts.codec_set(),
            arts.lm_ar(),
            arts.lm_nar(),
            arts.recon_dir(),
            arts.provenance(),
            arts.report(),
            arts.metrics(),
            arts.ablation(),
        ];
        for (i, a) in all.iter().enumerate() {
            assert!(a.starts_with("/tmp/x"));
            for b in &all[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert_eq!(arts.content_speaker(7).file_name().unwrap(), "content-spk007.rvct");
    }

    #[test]
    fn exit_codes_are_distinct_per_stage() {
        let mut seen = std::collections::HashSet::new();
        for stage in STAGES {
            let err = invalid_state("x").wrap_stage(stage);
            let code = exit_code_for(&err);
            assert!(code >= 10, "stage {stage} code {code}");
            assert!(seen.insert(code), "duplicate exit code {code}");
        }
        assert_eq!(exit_code_for(&invalid_state("x")), 1);
        // Inner sub-stage labels stay inside; the outermost wins.
        let nested = invalid_state("x").in_stage("stage1").wrap_stage("reconstruct");
        assert_eq!(nested.stage_name(), Some("reconstruct"));
        assert_eq!(exit_code_for(&nested), 10 + 6);
    }
}
