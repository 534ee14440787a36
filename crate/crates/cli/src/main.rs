//! `revoice` — drive the dysarthric speech reconstruction pipeline.
//!
//! Every subcommand is resumable: stages whose artifacts already exist under
//! the output directory are reused, so `run-all` after an interrupted run
//! picks up where it stopped. Failures exit with a stage-specific code
//! (see `exit_code_for`); 0 means success.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use revoice_core::config::ExperimentConfig;
use revoice_core::corpus::Partition;
use revoice_core::experiment::{self, Artifacts};
use revoice_core::Error;

#[derive(Parser)]
#[command(
    name = "revoice",
    version,
    about = "Reconstruct dysarthric speech in the speaker's own voice"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Arguments shared by every subcommand.
#[derive(Args)]
struct Common {
    /// TOML experiment configuration; built-in defaults apply when omitted.
    config: Option<PathBuf>,
    /// Override the configuration's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configuration's artifact output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn materialize(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the speech corpus (waveforms, lip traces, manifest).
    SynthData(Common),
    /// Train the residual-vector-quantized waveform codec.
    TrainCodec(Common),
    /// Train the phoneme encoder, its per-speaker copies, and the scoring
    /// recognizer.
    TrainContent(Common),
    /// Train the speaker-embedding estimator on codec code matrices.
    TrainSv(Common),
    /// Embed every normal reference utterance into the retrieval set.
    BuildCodecset(Common),
    /// Train the two code-sequence generators (first stage, upper stages).
    TrainLm(Common),
    /// Reconstruct every held-out test utterance.
    Reconstruct(Common),
    /// Score the reconstructions and write the report.
    Evaluate(Common),
    /// Compare normalized prompts against raw dysarthric prompts.
    AblatePrompts(Common),
    /// Run every stage from corpus synthesis to the final report.
    RunAll(Common),
}

fn run(cmd: &Cmd) -> Result<(), Error> {
    let common = match cmd {
        Cmd::SynthData(c)
        | Cmd::TrainCodec(c)
        | Cmd::TrainContent(c)
        | Cmd::TrainSv(c)
        | Cmd::BuildCodecset(c)
        | Cmd::TrainLm(c)
        | Cmd::Reconstruct(c)
        | Cmd::Evaluate(c)
        | Cmd::AblatePrompts(c)
        | Cmd::RunAll(c) => c,
    };
    let cfg = common.materialize()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let arts = Artifacts::new(&cfg.out_dir);

    match cmd {
        Cmd::SynthData(_) => {
            let corpus = experiment::ensure_corpus(&cfg, &arts)?;
            println!("corpus: {} utterances at {}", corpus.entries.len(), arts.corpus_dir().display());
            for part in Partition::ALL {
                println!("  {:?}: {}", part, corpus.partition(part).len());
            }
        }
        Cmd::TrainCodec(_) => {
            let codec = experiment::ensure_codec(&cfg, &arts)?;
            println!(
                "codec: {} quantizers x {} entries, hop {}, validation floor {:.4} -> {}",
                codec.quantizers,
                codec.codebook_size,
                codec.frame_hop(),
                codec.validation_floor,
                arts.codec().display()
            );
        }
        Cmd::TrainContent(_) => {
            let content = experiment::ensure_content(&cfg, &arts)?;
            println!(
                "content: base + {} speaker copies + recognizer -> {}",
                content.trained.speaker_models.len(),
                arts.content_base().display()
            );
        }
        Cmd::TrainSv(_) => {
            experiment::ensure_sv(&cfg, &arts)?;
            println!("speaker estimator -> {}", arts.sv().display());
        }
        Cmd::BuildCodecset(_) => {
            let set = experiment::ensure_codec_set(&cfg, &arts)?;
            println!(
                "codec set: {} entries, dim {} -> {}",
                set.entries.len(),
                set.embed_dim,
                arts.codec_set().display()
            );
        }
        Cmd::TrainLm(_) => {
            experiment::ensure_lm(&cfg, &arts)?;
            println!("code generators -> {} / {}", arts.lm_ar().display(), arts.lm_nar().display());
        }
        Cmd::Reconstruct(_) => {
            let records = experiment::ensure_reconstructions(&cfg, &arts)?;
            let truncated = records.iter().filter(|r| r.truncated).count();
            println!(
                "reconstructed {} utterances ({} truncated) -> {}",
                records.len(),
                truncated,
                arts.recon_dir().display()
            );
        }
        Cmd::Evaluate(_) | Cmd::RunAll(_) => {
            let report = experiment::ensure_report(&cfg, &arts)?;
            print!("{}", report.flat_summary());
            println!("report -> {}", arts.report().display());
        }
        Cmd::AblatePrompts(_) => {
            let report = experiment::run_ablation(&cfg)?;
            println!(
                "f0 variability ratio: normalized {:.4} vs dysarthric {:.4}",
                report.normalized_f0_ratio_mean, report.dysarthric_f0_ratio_mean
            );
            println!(
                "speaker distance:     normalized {:.4} vs dysarthric {:.4}",
                report.normalized_sv_distance_mean, report.dysarthric_sv_distance_mean
            );
            println!(
                "phoneme error rate:   normalized {:.4} vs dysarthric {:.4}",
                report.normalized_error_rate_mean, report.dysarthric_error_rate_mean
            );
            println!("ablation -> {}", arts.ablation().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    match run(&cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(experiment::exit_code_for(&e) as u8)
        }
    }
}
