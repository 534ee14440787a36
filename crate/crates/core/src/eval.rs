//! Objective evaluation: speaker-similarity distances, phoneme error rates,
//! prosody statistics, the corpus-level report, and the prompt-source
//! ablation comparing normalized against raw dysarthric prompts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::CodecModel;
use crate::codecset::CodecSet;
use crate::content::ContentModel;
use crate::corpus::{Corpus, ManifestEntry, Partition};
use crate::dsp;
use crate::error::{invalid_input, Error, Result};
use crate::features;
use crate::reconstruct::{self, Pipeline, PromptSource, Provenance, Reconstruction};
use crate::sv::SvEstimator;
use crate::synth;

/// Edit-distance fraction: substitutions, insertions, and deletions all cost
/// one, divided by the reference length.
pub fn error_rate(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(invalid_input("empty reference sequence"));
    }
    let n = hyp.len();
    let m = reference.len();
    // Rolling two-row Levenshtein.
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m] as f64 / m as f64)
}

/// Summary prosody measures of one waveform.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ProsodyStats {
    pub f0_mean: f64,
    pub f0_std: f64,
    pub voiced_fraction: f64,
    pub duration_sec: f64,
}

pub fn prosody_stats(wav: &[f64], sample_rate: u32) -> Result<ProsodyStats> {
    if wav.is_empty() {
        return Err(invalid_input("empty waveform"));
    }
    let frames = dsp::pitch_track(wav, sample_rate);
    let stats = dsp::pitch_stats(&frames);
    Ok(ProsodyStats {
        f0_mean: stats.f0_mean,
        f0_std: stats.f0_std,
        voiced_fraction: stats.voiced_fraction,
        duration_sec: wav.len() as f64 / sample_rate as f64,
    })
}

/// Mean L1 distance between the reconstruction's SV embedding and each
/// reference waveform's, all embedded through the same codec.
pub fn speaker_similarity(
    sv: &SvEstimator,
    codec: &CodecModel,
    recon: &[f64],
    refs: &[Vec<f64>],
    sample_rate: u32,
) -> Result<f64> {
    if refs.is_empty() {
        return Err(invalid_input("no reference waveforms"));
    }
    let e = sv.embed(&codec.encode(recon, sample_rate)?)?;
    let mut total = 0.0;
    for r in refs {
        let er = sv.embed(&codec.encode(r, sample_rate)?)?;
        total += e
            .iter()
            .zip(er.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    Ok(total / refs.len() as f64)
}

/// Per-speaker slice of the evaluation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpeakerReport {
    pub speaker_id: u32,
    pub utterances: usize,
    /// Mean L1 between reconstruction embeddings and the target speaker's
    /// normal-reference embeddings.
    pub sv_distance_recon_vs_target: f64,
    /// Same, against every other speaker's references.
    pub sv_distance_recon_vs_others: f64,
    /// Fraction of utterances whose reconstruction is closest to the target.
    pub closest_fraction: f64,
    /// Reference-recognizer error rate of the reconstructions.
    pub phoneme_error_rate: f64,
    /// Same metric on the raw dysarthric inputs.
    pub raw_phoneme_error_rate: f64,
    /// Reconstruction pitch variability over the speaker's normal reference.
    pub f0_contour_std_ratio: f64,
    pub truncation_rate: f64,
}

/// Corpus-level evaluation result.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub utterances: usize,
    pub sv_distance_recon_vs_target: f64,
    pub sv_distance_recon_vs_others: f64,
    pub closest_fraction: f64,
    pub phoneme_error_rate: f64,
    pub raw_phoneme_error_rate: f64,
    pub f0_contour_std_ratio: f64,
    pub truncation_rate: f64,
    pub per_speaker: Vec<SpeakerReport>,
}

impl EvalReport {
    /// Range checks on everything the schema promises.
    pub fn validate(&self) -> Result<()> {
        let rate = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid_state(format!("{name} = {v} outside [0,1]")));
            }
            Ok(())
        };
        let dist = |name: &str, v: f64| -> Result<()> {
            if !(v >= 0.0) {
                return Err(Error::invalid_state(format!("{name} = {v} negative")));
            }
            Ok(())
        };
        rate("closest_fraction", self.closest_fraction)?;
        rate("phoneme_error_rate", self.phoneme_error_rate)?;
        rate("raw_phoneme_error_rate", self.raw_phoneme_error_rate)?;
        rate("truncation_rate", self.truncation_rate)?;
        dist("sv_distance_recon_vs_target", self.sv_distance_recon_vs_target)?;
        dist("sv_distance_recon_vs_others", self.sv_distance_recon_vs_others)?;
        dist("f0_contour_std_ratio", self.f0_contour_std_ratio)?;
        for s in &self.per_speaker {
            rate("per-speaker closest_fraction", s.closest_fraction)?;
            rate("per-speaker phoneme_error_rate", s.phoneme_error_rate)?;
            rate("per-speaker raw_phoneme_error_rate", s.raw_phoneme_error_rate)?;
            rate("per-speaker truncation_rate", s.truncation_rate)?;
            dist("per-speaker sv target distance", s.sv_distance_recon_vs_target)?;
            dist("per-speaker sv others distance", s.sv_distance_recon_vs_others)?;
            dist("per-speaker f0 ratio", s.f0_contour_std_ratio)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::format(format!("report serialization failed: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::format(format!("bad report file: {e}")))
    }

    /// One `name value` line per corpus-level metric, for regression diffing.
    pub fn flat_summary(&self) -> String {
        format!(
            "utterances {}\nsv_distance_recon_vs_target {}\nsv_distance_recon_vs_others {}\nclosest_fraction {}\nphoneme_error_rate {}\nraw_phoneme_error_rate {}\nf0_contour_std_ratio {}\ntruncation_rate {}\n",
            self.utterances,
            self.sv_distance_recon_vs_target,
            self.sv_distance_recon_vs_others,
            self.closest_fraction,
            self.phoneme_error_rate,
            self.raw_phoneme_error_rate,
            self.f0_contour_std_ratio,
            self.truncation_rate,
        )
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Transcribe a waveform with the audio-only reference recognizer.
fn recognize(recognizer: &ContentModel, wav: &[f64], sample_rate: u32) -> Result<Vec<usize>> {
    let clean = synth::denoise(wav, sample_rate);
    let audio = features::extract_audio_features(&clean, sample_rate)?;
    recognizer.transcribe(&audio, None)
}

/// L1 distance between two embedding vectors.
fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Everything `evaluate` consumes. Reconstructed waveforms are read from
/// `recon_dir` as `<utt-id>.wav`, matched to `provenance` entries by id.
pub struct EvalInputs<'a> {
    pub corpus: &'a Corpus,
    pub recognizer: &'a ContentModel,
    pub sv: &'a SvEstimator,
    pub codec: &'a CodecModel,
    pub set: &'a CodecSet,
    pub recon_dir: &'a Path,
    pub provenance: &'a [Provenance],
}

/// Score the reconstructed test set.
pub fn evaluate(inp: &EvalInputs) -> Result<EvalReport> {
    let entries = inp.corpus.partition(Partition::DysarthricTest);
    if entries.is_empty() {
        return Err(invalid_input("corpus has no test utterances"));
    }
    // Speaker references come straight from the codec set's stored
    // embeddings (the SV embeddings of every speaker's normal utterances).
    let mut refs: BTreeMap<u32, Vec<&Vec<f64>>> = BTreeMap::new();
    for e in &inp.set.entries {
        refs.entry(e.speaker_id).or_default().push(&e.embedding);
    }
    if refs.len() < 2 {
        return Err(invalid_input("speaker references cover fewer than two speakers"));
    }
    // Normal prosody reference per speaker: mean pitch variability over
    // their normal utterances.
    let mut f0_ref: BTreeMap<u32, f64> = BTreeMap::new();
    for entry in inp.corpus.partition(Partition::NormalCodecset) {
        let wav = inp.corpus.load_wav(entry)?;
        let stats = prosody_stats(&wav, inp.corpus.sample_rate)?;
        let slot = f0_ref.entry(entry.speaker_id).or_insert(0.0);
        *slot += stats.f0_std;
    }
    let mut f0_count: BTreeMap<u32, usize> = BTreeMap::new();
    for entry in inp.corpus.partition(Partition::NormalCodecset) {
        *f0_count.entry(entry.speaker_id).or_insert(0) += 1;
    }
    for (spk, total) in f0_ref.iter_mut() {
        *total /= f0_count[spk] as f64;
    }

    struct UttScore {
        speaker_id: u32,
        d_target: f64,
        d_others: f64,
        closest: bool,
        per_recon: f64,
        per_raw: f64,
        f0_ratio: f64,
        truncated: bool,
    }

    let mut scores: Vec<UttScore> = Vec::new();
    for entry in &entries {
        let utt_id = entry.utt_id();
        let prov = inp
            .provenance
            .iter()
            .find(|p| p.utt_id == utt_id)
            .ok_or_else(|| invalid_input(format!("no provenance for {utt_id}")))?;
        let (recon, sr) = crate::audio::read_wav(&inp.recon_dir.join(format!("{utt_id}.wav")))?;
        if sr != inp.corpus.sample_rate {
            return Err(invalid_input("reconstruction sample rate mismatches the corpus"));
        }

        let e_recon = inp.sv.embed(&inp.codec.encode(&recon, sr)?)?;
        let mut per_speaker_dist: BTreeMap<u32, f64> = BTreeMap::new();
        for (&spk, embeds) in &refs {
            let d = embeds.iter().map(|r| l1(&e_recon, r)).sum::<f64>() / embeds.len() as f64;
            per_speaker_dist.insert(spk, d);
        }
        let d_target = *per_speaker_dist
            .get(&entry.speaker_id)
            .ok_or_else(|| invalid_input("target speaker missing from references"))?;
        let others: Vec<f64> = per_speaker_dist
            .iter()
            .filter(|(&s, _)| s != entry.speaker_id)
            .map(|(_, &d)| d)
            .collect();
        let d_others = mean(&others);
        let closest = others.iter().all(|&d| d_target < d);

        let hyp = recognize(inp.recognizer, &recon, sr)?;
        let per_recon = error_rate(&hyp, &entry.phonemes)?;
        let raw = inp.corpus.load_wav(entry)?;
        let hyp_raw = recognize(inp.recognizer, &raw, inp.corpus.sample_rate)?;
        let per_raw = error_rate(&hyp_raw, &entry.phonemes)?;

        let recon_stats = prosody_stats(&recon, sr)?;
        let reference_std = f0_ref
            .get(&entry.speaker_id)
            .copied()
            .ok_or_else(|| invalid_input("no normal prosody reference for speaker"))?;
        let f0_ratio = if reference_std > 1e-9 {
            recon_stats.f0_std / reference_std
        } else {
            0.0
        };

        scores.push(UttScore {
            speaker_id: entry.speaker_id,
            d_target,
            d_others,
            closest,
            per_recon,
            per_raw,
            f0_ratio,
            truncated: prov.truncated,
        });
    }

    let mut speakers: Vec<u32> = scores.iter().map(|s| s.speaker_id).collect();
    speakers.sort_unstable();
    speakers.dedup();
    let per_speaker: Vec<SpeakerReport> = speakers
        .iter()
        .map(|&spk| {
            let ss: Vec<&UttScore> = scores.iter().filter(|s| s.speaker_id == spk).collect();
            let n = ss.len() as f64;
            SpeakerReport {
                speaker_id: spk,
                utterances: ss.len(),
                sv_distance_recon_vs_target: ss.iter().map(|s| s.d_target).sum::<f64>() / n,
                sv_distance_recon_vs_others: ss.iter().map(|s| s.d_others).sum::<f64>() / n,
                closest_fraction: ss.iter().filter(|s| s.closest).count() as f64 / n,
                phoneme_error_rate: ss.iter().map(|s| s.per_recon).sum::<f64>() / n,
                raw_phoneme_error_rate: ss.iter().map(|s| s.per_raw).sum::<f64>() / n,
                f0_contour_std_ratio: ss.iter().map(|s| s.f0_ratio).sum::<f64>() / n,
                truncation_rate: ss.iter().filter(|s| s.truncated).count() as f64 / n,
            }
        })
        .collect();

    let n = scores.len() as f64;
    let report = EvalReport {
        utterances: scores.len(),
        sv_distance_recon_vs_target: scores.iter().map(|s| s.d_target).sum::<f64>() / n,
        sv_distance_recon_vs_others: scores.iter().map(|s| s.d_others).sum::<f64>() / n,
        closest_fraction: scores.iter().filter(|s| s.closest).count() as f64 / n,
        phoneme_error_rate: scores.iter().map(|s| s.per_recon).sum::<f64>() / n,
        raw_phoneme_error_rate: scores.iter().map(|s| s.per_raw).sum::<f64>() / n,
        f0_contour_std_ratio: scores.iter().map(|s| s.f0_ratio).sum::<f64>() / n,
        truncation_rate: scores.iter().filter(|s| s.truncated).count() as f64 / n,
        per_speaker,
    };
    report.validate()?;
    Ok(report)
}

/// One arm of the prompt-source ablation for one utterance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AblationArm {
    pub f0_contour_std_ratio: f64,
    pub sv_distance_to_target: f64,
    pub phoneme_error_rate: f64,
    pub truncated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AblationUtt {
    pub utt_id: String,
    pub speaker_id: u32,
    pub normalized: AblationArm,
    pub dysarthric: AblationArm,
}

/// Paired comparison of normalized vs raw dysarthric prompts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AblationReport {
    pub utts: Vec<AblationUtt>,
    pub normalized_f0_ratio_mean: f64,
    pub dysarthric_f0_ratio_mean: f64,
    pub normalized_sv_distance_mean: f64,
    pub dysarthric_sv_distance_mean: f64,
    pub normalized_error_rate_mean: f64,
    pub dysarthric_error_rate_mean: f64,
}

impl AblationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::format(format!("ablation serialization failed: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::format(format!("bad ablation file: {e}")))
    }
}

/// Context for scoring one ablation arm.
struct ArmScorer<'a> {
    recognizer: &'a ContentModel,
    refs: &'a BTreeMap<u32, Vec<&'a Vec<f64>>>,
    f0_ref: &'a BTreeMap<u32, f64>,
    sample_rate: u32,
}

impl ArmScorer<'_> {
    fn score(
        &self,
        pipe: &Pipeline,
        entry: &ManifestEntry,
        recon: &Reconstruction,
    ) -> Result<AblationArm> {
        let e = pipe
            .sv
            .embed(&pipe.codec.encode(&recon.wav, self.sample_rate)?)?;
        let embeds = self
            .refs
            .get(&entry.speaker_id)
            .ok_or_else(|| invalid_input("no references for speaker"))?;
        let d = embeds.iter().map(|r| l1(&e, r)).sum::<f64>() / embeds.len() as f64;
        let hyp = recognize(self.recognizer, &recon.wav, self.sample_rate)?;
        let per = error_rate(&hyp, &entry.phonemes)?;
        let stats = prosody_stats(&recon.wav, self.sample_rate)?;
        let ref_std = self.f0_ref[&entry.speaker_id];
        let ratio = if ref_std > 1e-9 { stats.f0_std / ref_std } else { 0.0 };
        Ok(AblationArm {
            f0_contour_std_ratio: ratio,
            sv_distance_to_target: d,
            phoneme_error_rate: per,
            truncated: recon.provenance.truncated,
        })
    }
}

/// Reconstruct every test utterance twice — once with the retrieved normal
/// prompt, once with the utterance's own dysarthric codes — and report the
/// paired metrics.
pub fn ablation_prompt_source<'a>(
    pipe_for: &dyn Fn(u32) -> Pipeline<'a>,
    recognizer: &ContentModel,
    corpus: &Corpus,
    seed: u64,
) -> Result<AblationReport> {
    let entries = corpus.partition(Partition::DysarthricTest);
    if entries.is_empty() {
        return Err(invalid_input("corpus has no test utterances"));
    }
    let first = pipe_for(entries[0].speaker_id);
    let mut refs: BTreeMap<u32, Vec<&Vec<f64>>> = BTreeMap::new();
    for e in &first.set.entries {
        refs.entry(e.speaker_id).or_default().push(&e.embedding);
    }
    let mut f0_ref: BTreeMap<u32, f64> = BTreeMap::new();
    let mut f0_count: BTreeMap<u32, usize> = BTreeMap::new();
    for entry in corpus.partition(Partition::NormalCodecset) {
        let wav = corpus.load_wav(entry)?;
        let stats = prosody_stats(&wav, corpus.sample_rate)?;
        *f0_ref.entry(entry.speaker_id).or_insert(0.0) += stats.f0_std;
        *f0_count.entry(entry.speaker_id).or_insert(0) += 1;
    }
    for (spk, total) in f0_ref.iter_mut() {
        *total /= f0_count[spk] as f64;
    }
    let scorer = ArmScorer {
        recognizer,
        refs: &refs,
        f0_ref: &f0_ref,
        sample_rate: corpus.sample_rate,
    };

    let mut utts = Vec::new();
    for (i, entry) in entries.iter().enumerate() {
        let pipe = pipe_for(entry.speaker_id);
        let utt_seed = crate::seeds::derive(seed, "ablation", i as u64);
        let normal = reconstruct::reconstruct(&pipe, corpus, entry, utt_seed)?;
        let arm_a = scorer.score(&pipe, entry, &normal)?;

        // Dysarthric arm: same posteriors, but the prompt is the input's own
        // encoded code matrix.
        let posteriors = reconstruct::utterance_posteriors(pipe.content, corpus, entry)?;
        let wav = corpus.load_wav(entry)?;
        let clean = synth::denoise(&wav, corpus.sample_rate);
        let own = pipe.codec.encode(&clean, corpus.sample_rate)?;
        let dys = reconstruct::reconstruct_with_prompt(
            &pipe,
            corpus,
            entry,
            &posteriors,
            &own,
            (PromptSource::Dysarthric, entry.utt_id(), entry.speaker_id, 0.0),
            utt_seed,
            Vec::new(),
        )?;
        let arm_b = scorer.score(&pipe, entry, &dys)?;

        utts.push(AblationUtt {
            utt_id: entry.utt_id(),
            speaker_id: entry.speaker_id,
            normalized: arm_a,
            dysarthric: arm_b,
        });
    }

    let na: Vec<f64> = utts.iter().map(|u| u.normalized.f0_contour_std_ratio).collect();
    let nb: Vec<f64> = utts.iter().map(|u| u.dysarthric.f0_contour_std_ratio).collect();
    let sa: Vec<f64> = utts.iter().map(|u| u.normalized.sv_distance_to_target).collect();
    let sb: Vec<f64> = utts.iter().map(|u| u.dysarthric.sv_distance_to_target).collect();
    let ea: Vec<f64> = utts.iter().map(|u| u.normalized.phoneme_error_rate).collect();
    let eb: Vec<f64> = utts.iter().map(|u| u.dysarthric.phoneme_error_rate).collect();
    Ok(AblationReport {
        utts,
        normalized_f0_ratio_mean: mean(&na),
        dysarthric_f0_ratio_mean: mean(&nb),
        normalized_sv_distance_mean: mean(&sa),
        dysarthric_sv_distance_mean: mean(&sb),
        normalized_error_rate_mean: mean(&ea),
        dysarthric_error_rate_mean: mean(&eb),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent edit-distance oracle: plain recursion with memoization,
    /// structured nothing like the rolling-row version above.
    fn oracle_distance(
        hyp: &[usize],
        reference: &[usize],
        memo: &mut std::collections::HashMap<(usize, usize), usize>,
    ) -> usize {
        fn go(
            h: &[usize],
            r: &[usize],
            i: usize,
            j: usize,
            memo: &mut std::collections::HashMap<(usize, usize), usize>,
        ) -> usize {
            if i == h.len() {
                return r.len() - j;
            }
            if j == r.len() {
                return h.len() - i;
            }
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let mut best = usize::MAX;
            if h[i] == r[j] {
                best = best.min(go(h, r, i + 1, j + 1, memo));
            } else {
                best = best.min(go(h, r, i + 1, j + 1, memo) + 1);
            }
            best = best.min(go(h, r, i + 1, j, memo) + 1);
            best = best.min(go(h, r, i, j + 1, memo) + 1);
            memo.insert((i, j), best);
            best
        }
        go(hyp, reference, 0, 0, memo)
    }

    #[test]
    fn error_rate_basics() {
        assert_eq!(error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(error_rate(&[], &[1, 2, 3, 4, 5]).unwrap(), 1.0);
        let r = error_rate(&[1, 2, 4], &[1, 3, 4]).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-12);
        assert!(error_rate(&[1], &[]).is_err());
        // Insertions can push the rate above 1; the function reports it.
        let heavy = error_rate(&[9, 9, 9, 9, 9], &[1]).unwrap();
        assert!(heavy > 1.0);
    }

    #[test]
    fn error_rate_matches_recursive_oracle_on_1000_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let n = rng.gen_range(0..=20);
            let m = rng.gen_range(1..=20);
            let hyp: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
            let reference: Vec<usize> = (0..m).map(|_| rng.gen_range(0..10)).collect();
            let mut memo = std::collections::HashMap::new();
            let expect = oracle_distance(&hyp, &reference, &mut memo) as f64 / m as f64;
            let got = error_rate(&hyp, &reference).unwrap();
            assert_eq!(got, expect, "hyp {hyp:?} ref {reference:?}");
        }
    }

    #[test]
    fn prosody_of_known_signals() {
        let sr = 24000u32;
        // Harmonic tone at 150 Hz: fundamental plus two overtones.
        let tone: Vec<f64> = (0..sr as usize)
            .map(|i| {
                let t = i as f64 / sr as f64;
                (2.0 * std::f64::consts::PI * 150.0 * t).sin()
                    + 0.4 * (2.0 * std::f64::consts::PI * 300.0 * t).sin()
                    + 0.2 * (2.0 * std::f64::consts::PI * 450.0 * t).sin()
            })
            .collect();
        let s = prosody_stats(&tone, sr).unwrap();
        assert!((s.f0_mean - 150.0).abs() < 3.0, "f0_mean {}", s.f0_mean);
        assert!(s.voiced_fraction > 0.9);
        assert!((s.duration_sec - 1.0).abs() < 1e-9);

        let silence = vec![0.0; 12000];
        let s = prosody_stats(&silence, sr).unwrap();
        assert_eq!(s.voiced_fraction, 0.0);

        assert!(prosody_stats(&[], sr).is_err());
    }

    #[test]
    fn pitch_flattening_collapses_f0_variability() {
        let profile = synth::SpeakerProfile {
            id: 0,
            base_f0: 140.0,
            formant_scale: 1.0,
            speaking_rate: 7.0,
            dysarthric: true,
        };
        let sentence = [3usize, 11, 7, 19, 5, 23, 14, 9];
        let normal = synth::synthesize(
            &profile,
            &sentence,
            &synth::DysarthriaTransform::identity(),
            24000,
            99,
        );
        let mut tf = synth::DysarthriaTransform::identity();
        tf.pitch_flatten = 0.9;
        let flat = synth::synthesize(&profile, &sentence, &tf, 24000, 99);
        let sn = prosody_stats(&normal.wav, 24000).unwrap();
        let sf = prosody_stats(&flat.wav, 24000).unwrap();
        assert!(sn.f0_std > 1e-3, "normal speech has pitch movement");
        let ratio = sf.f0_std / sn.f0_std;
        assert!(ratio <= 0.3, "flattened/normal f0_std ratio {ratio}");
    }

    #[test]
    fn report_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let report = EvalReport {
            utterances: 8,
            sv_distance_recon_vs_target: 0.31,
            sv_distance_recon_vs_others: 0.62,
            closest_fraction: 0.875,
            phoneme_error_rate: 0.12,
            raw_phoneme_error_rate: 0.4,
            f0_contour_std_ratio: 0.85,
            truncation_rate: 0.0,
            per_speaker: vec![SpeakerReport {
                speaker_id: 16,
                utterances: 8,
                sv_distance_recon_vs_target: 0.31,
                sv_distance_recon_vs_others: 0.62,
                closest_fraction: 0.875,
                phoneme_error_rate: 0.12,
                raw_phoneme_error_rate: 0.4,
                f0_contour_std_ratio: 0.85,
                truncation_rate: 0.0,
            }],
        };
        report.validate().unwrap();
        let path = dir.path().join("report.toml");
        report.save(&path).unwrap();
        let back = EvalReport::load(&path).unwrap();
        assert_eq!(back, report);

        let mut bad = report.clone();
        bad.closest_fraction = 1.4;
        assert!(bad.validate().is_err());
        let mut neg = report;
        neg.sv_distance_recon_vs_target = -0.1;
        assert!(neg.validate().is_err());
    }

    #[test]
    fn ablation_report_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let arm = |x: f64| AblationArm {
            f0_contour_std_ratio: x,
            sv_distance_to_target: x * 2.0,
            phoneme_error_rate: x / 2.0,
            truncated: false,
        };
        let report = AblationReport {
            utts: vec![AblationUtt {
                utt_id: "spk016-dysarthric-test-000".into(),
                speaker_id: 16,
                normalized: arm(0.9),
                dysarthric: arm(0.3),
            }],
            normalized_f0_ratio_mean: 0.9,
            dysarthric_f0_ratio_mean: 0.3,
            normalized_sv_distance_mean: 1.8,
            dysarthric_sv_distance_mean: 0.6,
            normalized_error_rate_mean: 0.45,
            dysarthric_error_rate_mean: 0.15,
        };
        let path = dir.path().join("ablation.toml");
        report.save(&path).unwrap();
        assert_eq!(AblationReport::load(&path).unwrap(), report);
    }
}
