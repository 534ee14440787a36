//! Speaker-verification embedder over codec matrices, trained with the
//! generalized end-to-end (GE2E) contrastive objective.
//!
//! Architecture: one code-embedding table per quantizer, summed per frame,
//! passed through a 2-layer tanh recurrence, mean-pooled over time,
//! projected, and L2-normalized. The resulting unit vectors place utterances
//! of one speaker close together, which is what the codec-normalization
//! retrieval stage relies on.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use revoice_nn::{Adam, Binder, Graph, NodeId, ParamStore};

use crate::codec::{CodecMatrix, CodecModel};
use crate::config::SvConfig;
use crate::container::Container;
use crate::corpus::{Corpus, Partition};
use crate::error::{invalid_input, Result};
use crate::seeds;

/// Frames per training example: shorter sequences wrap around.
const TRAIN_CROP: usize = 50;
/// Floor applied to the learned GE2E scale after every optimizer step.
const MIN_SCALE: f64 = 1e-3;

const CHECKPOINT_KIND: &str = "sv-estimator";

pub struct SvEstimator {
    pub quantizers: usize,
    pub codebook_size: usize,
    pub code_embed_dim: usize,
    pub rnn_dim: usize,
    pub rnn_layers: usize,
    pub embed_dim: usize,
    pub store: ParamStore,
    /// Equal error rate measured on held-out speakers after training.
    pub eer: f64,
    pub trained: bool,
}

impl SvEstimator {
    pub fn init(cfg: &SvConfig, quantizers: usize, codebook_size: usize, seed: u64) -> Self {
        let mut rng = seeds::rng_for(seed, "sv-init", 0);
        let mut store = ParamStore::new();
        for q in 0..quantizers {
            store.init_normal(
                &format!("emb.q{q}"),
                codebook_size,
                cfg.code_embed_dim,
                0.08,
                &mut rng,
            );
        }
        for l in 0..cfg.rnn_layers {
            let in_dim = if l == 0 { cfg.code_embed_dim } else { cfg.rnn_dim };
            store.init_xavier(&format!("rnn{l}.wx"), in_dim, cfg.rnn_dim, &mut rng);
            store.init_xavier(&format!("rnn{l}.wh"), cfg.rnn_dim, cfg.rnn_dim, &mut rng);
            store.init_zeros(&format!("rnn{l}.b"), 1, cfg.rnn_dim);
        }
        store.init_xavier("proj.w", cfg.rnn_dim, cfg.embed_dim, &mut rng);
        store.init_const("ge2e.w", 1, 1, 10.0);
        store.init_const("ge2e.b", 1, 1, -5.0);
        SvEstimator {
            quantizers,
            codebook_size,
            code_embed_dim: cfg.code_embed_dim,
            rnn_dim: cfg.rnn_dim,
            rnn_layers: cfg.rnn_layers,
            embed_dim: cfg.embed_dim,
            store,
            eer: f64::NAN,
            trained: false,
        }
    }

    /// Shared forward pass: a batch of equal-length frame-index selections
    /// over their code matrices -> (B x E) unit-norm embeddings.
    fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        seqs: &[(&CodecMatrix, Vec<usize>)],
    ) -> NodeId {
        let b = seqs.len();
        assert!(b > 0);
        let t_len = seqs[0].1.len();
        assert!(seqs.iter().all(|(_, idx)| idx.len() == t_len));
        // Per-sequence frame features: summed code embeddings.
        let mut feats = Vec::with_capacity(b);
        for (codes, idx) in seqs {
            assert_eq!(codes.quantizers(), self.quantizers);
            let mut acc: Option<NodeId> = None;
            for q in 0..self.quantizers {
                let ids: Vec<usize> = idx.iter().map(|&t| codes.codes[[t, q]] as usize).collect();
                let table = binder.bind(g, &self.store, &format!("emb.q{q}"));
                let rows = g.embedding(table, &ids);
                acc = Some(match acc {
                    None => rows,
                    Some(a) => g.add(a, rows),
                });
            }
            feats.push(acc.unwrap());
        }
        let all = g.concat_rows(&feats); // (B*T x D)

        // Two stacked tanh recurrences over the whole batch at once.
        let mut layer_in_rows = all;
        let mut pooled: Option<NodeId> = None;
        for l in 0..self.rnn_layers {
            let wx = binder.bind(g, &self.store, &format!("rnn{l}.wx"));
            let wh = binder.bind(g, &self.store, &format!("rnn{l}.wh"));
            let bias = binder.bind(g, &self.store, &format!("rnn{l}.b"));
            let mut h = g.leaf(Array2::zeros((b, self.rnn_dim)));
            let mut outputs = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let idx: Vec<usize> = (0..b).map(|s| s * t_len + t).collect();
                let x_t = g.gather_rows(layer_in_rows, &idx);
                let xw = g.matmul(x_t, wx);
                let hw = g.matmul(h, wh);
                let s = g.add(xw, hw);
                let sb = g.add_row(s, bias);
                h = g.tanh(sb);
                outputs.push(h);
            }
            if l + 1 == self.rnn_layers {
                // Mean-pool the top layer over time.
                let mut acc = outputs[0];
                for &o in &outputs[1..] {
                    acc = g.add(acc, o);
                }
                pooled = Some(g.scale(acc, 1.0 / t_len as f64));
            } else {
                // Re-stack as (B*T x H) for the next layer, batch-major.
                let mut stacked = Vec::with_capacity(b * t_len);
                for s in 0..b {
                    for &o in &outputs {
                        let row = g.slice_rows(o, s, s + 1);
                        stacked.push(row);
                    }
                }
                layer_in_rows = g.concat_rows(&stacked);
            }
        }
        let proj = binder.bind(g, &self.store, "proj.w");
        let e = g.matmul(pooled.unwrap(), proj);
        g.l2_normalize_rows(e, 1e-12)
    }

    /// Embed one code matrix (full length) to a unit-norm vector.
    pub fn embed(&self, codes: &CodecMatrix) -> Result<Vec<f64>> {
        if codes.quantizers() != self.quantizers {
            return Err(invalid_input(format!(
                "code matrix width {} != estimator quantizers {}",
                codes.quantizers(),
                self.quantizers
            )));
        }
        if codes.codes.iter().any(|&c| c as usize >= self.codebook_size) {
            return Err(invalid_input("code out of range for estimator"));
        }
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let idx: Vec<usize> = (0..codes.frames()).collect();
        let out = self.forward(&mut g, &mut binder, &[(codes, idx)]);
        Ok(g.val(out).row(0).to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(CHECKPOINT_KIND);
        c.set_int("quantizers", self.quantizers as i64);
        c.set_int("codebook_size", self.codebook_size as i64);
        c.set_int("code_embed_dim", self.code_embed_dim as i64);
        c.set_int("rnn_dim", self.rnn_dim as i64);
        c.set_int("rnn_layers", self.rnn_layers as i64);
        c.set_int("embed_dim", self.embed_dim as i64);
        c.set_int("trained", i64::from(self.trained));
        c.set_float("eer", self.eer);
        c.put_params(&self.store);
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path, CHECKPOINT_KIND)?;
        Ok(SvEstimator {
            quantizers: c.int("quantizers")? as usize,
            codebook_size: c.int("codebook_size")? as usize,
            code_embed_dim: c.int("code_embed_dim")? as usize,
            rnn_dim: c.int("rnn_dim")? as usize,
            rnn_layers: c.int("rnn_layers")? as usize,
            embed_dim: c.int("embed_dim")? as usize,
            store: c.params(""),
            eer: c.float("eer")?,
            trained: c.int("trained")? != 0,
        })
    }
}

/// GE2E loss over a flat (N*M x E) embedding matrix laid out speaker-major:
/// scaled cosine similarities against speaker centroids (own centroid
/// leave-one-out), softmax-contrasted, summed over all N*M embeddings.
pub fn ge2e_loss(
    embeddings: &Array2<f64>,
    n_speakers: usize,
    utts_per_speaker: usize,
    w: f64,
    b: f64,
) -> Result<f64> {
    if n_speakers < 2 || utts_per_speaker < 2 {
        return Err(invalid_input("GE2E needs at least 2 speakers x 2 utterances"));
    }
    if embeddings.nrows() != n_speakers * utts_per_speaker {
        return Err(invalid_input("embedding rows != N*M"));
    }
    let mut g = Graph::new();
    let emb = g.leaf(embeddings.clone());
    let w_node = g.leaf(Array2::from_elem((1, 1), w));
    let b_node = g.leaf(Array2::from_elem((1, 1), b));
    let loss = ge2e_loss_graph(&mut g, emb, n_speakers, utts_per_speaker, w_node, b_node);
    Ok(g.val(loss)[[0, 0]])
}

/// Graph construction of the GE2E loss (shared by training and `ge2e_loss`).
fn ge2e_loss_graph(
    g: &mut Graph,
    emb: NodeId,
    n: usize,
    m: usize,
    w_node: NodeId,
    b_node: NodeId,
) -> NodeId {
    // Speaker centroids.
    let mut centroids = Vec::with_capacity(n);
    for j in 0..n {
        let rows = g.slice_rows(emb, j * m, (j + 1) * m);
        centroids.push(g.mean_rows(rows));
    }
    let c = g.concat_rows(&centroids);
    let c_hat = g.l2_normalize_rows(c, 1e-12);

    let mut sim_rows = Vec::with_capacity(n * m);
    let mut targets = Vec::with_capacity(n * m);
    for j in 0..n {
        // Masks to splice the leave-one-out similarity into column j.
        let mut keep = Array2::ones((1, n));
        keep[[0, j]] = 0.0;
        let mut only = Array2::zeros((1, n));
        only[[0, j]] = 1.0;
        let keep = g.leaf(keep);
        let only = g.leaf(only);
        for i in 0..m {
            let e = g.slice_rows(emb, j * m + i, j * m + i + 1);
            let base = g.matmul_nt(e, c_hat); // (1 x n) cosines (rows unit)
            let scaled_c = g.scale(centroids[j], m as f64);
            let loo_sum = g.sub(scaled_c, e);
            let loo = g.scale(loo_sum, 1.0 / (m as f64 - 1.0));
            let loo_hat = g.l2_normalize_rows(loo, 1e-12);
            let own = g.matmul_nt(e, loo_hat); // (1 x 1)
            let own_row = g.matmul(own, only);
            let masked = g.mul(base, keep);
            sim_rows.push(g.add(masked, own_row));
            targets.push((j * m + i, j));
        }
    }
    let s = g.concat_rows(&sim_rows); // (n*m x n)
    let ones_col = g.leaf(Array2::ones((n * m, 1)));
    let ones_row = g.leaf(Array2::ones((1, n)));
    let w_col = g.matmul(ones_col, w_node);
    let w_full = g.matmul(w_col, ones_row);
    let b_col = g.matmul(ones_col, b_node);
    let b_full = g.matmul(b_col, ones_row);
    let s_scaled = g.mul(s, w_full);
    let s_aff = g.add(s_scaled, b_full);
    let lp = g.row_log_softmax(s_aff);
    let mean_nll = g.nll_mean(lp, &targets);
    // GE2E is a sum over embeddings, not a mean.
    g.scale(mean_nll, (n * m) as f64)
}

/// Train the estimator on normal-train speakers' code matrices and measure
/// EER on the held-out speakers' normal utterances. Deterministic per seed.
pub fn train_sv(
    corpus: &Corpus,
    codec: &CodecModel,
    cfg: &SvConfig,
    seed: u64,
) -> Result<SvEstimator> {
    // Group training code matrices by speaker.
    let train = corpus.partition(Partition::NormalTrain);
    let mut by_speaker: Vec<(u32, Vec<CodecMatrix>)> = Vec::new();
    for entry in &train {
        let wav = corpus.load_wav(entry)?;
        let codes = codec.encode(&wav, corpus.sample_rate)?;
        match by_speaker.iter_mut().find(|(id, _)| *id == entry.speaker_id) {
            Some((_, v)) => v.push(codes),
            None => by_speaker.push((entry.speaker_id, vec![codes])),
        }
    }
    if by_speaker.len() < 8 || by_speaker.iter().any(|(_, v)| v.len() < 4) {
        return Err(invalid_input(
            "speaker-verification training needs >= 8 speakers with >= 4 utterances each",
        ));
    }
    if by_speaker.len() < cfg.speakers_per_batch
        || by_speaker.iter().any(|(_, v)| v.len() < cfg.utts_per_speaker)
    {
        return Err(invalid_input("batch shape exceeds available speakers/utterances"));
    }

    let mut est = SvEstimator::init(cfg, codec.quantizers, codec.codebook_size, seed);
    let mut adam = Adam::new(cfg.lr);
    let mut rng = seeds::rng_for(seed, "sv-train", 0);
    for _step in 0..cfg.steps {
        // Sample N speakers x M utterances, crop each to TRAIN_CROP frames.
        let mut speaker_idx: Vec<usize> = (0..by_speaker.len()).collect();
        speaker_idx.shuffle(&mut rng);
        speaker_idx.truncate(cfg.speakers_per_batch);
        let mut batch: Vec<(&CodecMatrix, Vec<usize>)> = Vec::new();
        for &s in &speaker_idx {
            let utts = &by_speaker[s].1;
            let mut utt_idx: Vec<usize> = (0..utts.len()).collect();
            utt_idx.shuffle(&mut rng);
            utt_idx.truncate(cfg.utts_per_speaker);
            for &u in &utt_idx {
                let codes = &utts[u];
                let t = codes.frames();
                let start = rng.gen_range(0..t);
                let idx: Vec<usize> = (0..TRAIN_CROP).map(|k| (start + k) % t).collect();
                batch.push((codes, idx));
            }
        }
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let emb = est.forward(&mut g, &mut binder, &batch);
        let w_node = binder.bind(&mut g, &est.store, "ge2e.w");
        let b_node = binder.bind(&mut g, &est.store, "ge2e.b");
        let loss = ge2e_loss_graph(
            &mut g,
            emb,
            cfg.speakers_per_batch,
            cfg.utts_per_speaker,
            w_node,
            b_node,
        );
        let mut grads = g.backward(loss);
        let grad_list = binder.collect_grads(&mut grads);
        adam.step(&mut est.store, grad_list, Some(3.0));
        // Keep the similarity scale positive.
        let w = est.store.get_mut("ge2e.w");
        if w[[0, 0]] < MIN_SCALE {
            w[[0, 0]] = MIN_SCALE;
        }
    }
    est.trained = true;

    // Held-out EER: normal utterances of the dysarthric-flagged speakers,
    // none of which were seen in training.
    let heldout: Vec<(String, u32, Vec<f64>)> = {
        let mut v = Vec::new();
        for entry in corpus.partition(Partition::NormalCodecset) {
            if corpus.speaker(entry.speaker_id).dysarthric {
                let wav = corpus.load_wav(entry)?;
                let codes = codec.encode(&wav, corpus.sample_rate)?;
                v.push((entry.utt_id(), entry.speaker_id, est.embed(&codes)?));
            }
        }
        v
    };
    est.eer = if heldout.len() >= 4 {
        let trials = make_trials(
            &heldout.iter().map(|(id, spk, _)| (id.clone(), *spk)).collect::<Vec<_>>(),
        );
        let lookup = |id: &str| -> &[f64] {
            &heldout.iter().find(|(i, _, _)| i == id).unwrap().2
        };
        let mut same = Vec::new();
        let mut diff = Vec::new();
        for t in &trials {
            let score = cosine(lookup(&t.utt_a), lookup(&t.utt_b));
            if t.same {
                same.push(score);
            } else {
                diff.push(score);
            }
        }
        compute_eer(&same, &diff)
    } else {
        f64::NAN
    };
    Ok(est)
}

/// One verification trial: two utterance ids and the ground-truth label.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub utt_a: String,
    pub utt_b: String,
    pub same: bool,
}

/// All within-speaker pairs as `same`, all cross-speaker pairs as `diff`.
pub fn make_trials(utts: &[(String, u32)]) -> Vec<Trial> {
    let mut out = Vec::new();
    for i in 0..utts.len() {
        for j in i + 1..utts.len() {
            out.push(Trial {
                utt_a: utts[i].0.clone(),
                utt_b: utts[j].0.clone(),
                same: utts[i].1 == utts[j].1,
            });
        }
    }
    out
}

/// Serialize trials as tab-separated `utt-a  utt-b  same|diff` lines.
pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    for t in trials {
        writeln!(
            f,
            "{}\t{}\t{}",
            t.utt_a,
            t.utt_b,
            if t.same { "same" } else { "diff" }
        )?;
    }
    Ok(())
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 || !matches!(parts[2], "same" | "diff") {
            return Err(crate::error::format_err(format!(
                "trial list line {}: expected 'a<TAB>b<TAB>same|diff'",
                ln + 1
            )));
        }
        out.push(Trial {
            utt_a: parts[0].to_string(),
            utt_b: parts[1].to_string(),
            same: parts[2] == "same",
        });
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Equal error rate: threshold sweep over all observed scores, returning the
/// midpoint of false-accept and false-reject rates where they cross.
pub fn compute_eer(same_scores: &[f64], diff_scores: &[f64]) -> f64 {
    assert!(!same_scores.is_empty() && !diff_scores.is_empty());
    let mut thresholds: Vec<f64> = same_scores.iter().chain(diff_scores).cloned().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut best = (f64::INFINITY, 0.5);
    for &th in &thresholds {
        let far = diff_scores.iter().filter(|&&s| s >= th).count() as f64
            / diff_scores.len() as f64;
        let frr =
            same_scores.iter().filter(|&&s| s < th).count() as f64 / same_scores.len() as f64;
        let gap = (far - frr).abs();
        if gap < best.0 {
            best = (gap, 0.5 * (far + frr));
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Naive double-loop GE2E evaluation, structured independently of the
    /// graph implementation.
    fn ge2e_oracle(emb: &Array2<f64>, n: usize, m: usize, w: f64, b: f64) -> f64 {
        let e_dim = emb.ncols();
        let row = |j: usize, i: usize| -> Vec<f64> { emb.row(j * m + i).to_vec() };
        let mut loss = 0.0;
        for j in 0..n {
            for i in 0..m {
                let e = row(j, i);
                let mut sims = Vec::with_capacity(n);
                for k in 0..n {
                    let mut c = vec![0.0; e_dim];
                    let mut count = 0.0;
                    for ii in 0..m {
                        if k == j && ii == i {
                            continue; // leave-one-out on the own centroid
                        }
                        for (cd, vd) in c.iter_mut().zip(row(k, ii)) {
                            *cd += vd;
                        }
                        count += 1.0;
                    }
                    for cd in c.iter_mut() {
                        *cd /= count;
                    }
                    sims.push(w * cosine(&e, &c) + b);
                }
                let mx = sims.iter().cloned().fold(f64::MIN, f64::max);
                let lse = mx + sims.iter().map(|s| (s - mx).exp()).sum::<f64>().ln();
                loss += lse - sims[j];
            }
        }
        loss
    }

    #[test]
    fn ge2e_matches_the_orthogonal_closed_form() {
        // Speaker A embeddings identical, orthogonal to speaker B's.
        let mut emb = Array2::zeros((4, 4));
        emb[[0, 0]] = 1.0;
        emb[[1, 0]] = 1.0;
        emb[[2, 1]] = 1.0;
        emb[[3, 1]] = 1.0;
        let loss = ge2e_loss(&emb, 2, 2, 1.0, 0.0).unwrap();
        let expected = 4.0 * (-(1f64.exp() / (1f64.exp() + 1.0)).ln());
        assert!((loss - expected).abs() < 1e-6, "{loss} vs {expected}");
    }

    #[test]
    fn ge2e_matches_naive_oracle_and_speaker_permutation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for trial in 0..5 {
            let (n, m, e) = ([2, 3, 4][trial % 3], [2, 3, 4][(trial + 1) % 3], 6);
            let mut emb = Array2::from_shape_simple_fn((n * m, e), || rng.gen::<f64>() - 0.5);
            // Unit-normalize rows, as the estimator guarantees.
            for mut r in emb.rows_mut() {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.mapv_inplace(|v| v / norm);
            }
            let (w, b) = (3.0 + trial as f64, -1.0);
            let loss = ge2e_loss(&emb, n, m, w, b).unwrap();
            let oracle = ge2e_oracle(&emb, n, m, w, b);
            assert!((loss - oracle).abs() < 1e-5, "{loss} vs oracle {oracle}");

            // Permute speaker blocks: loss unchanged.
            let mut perm = Array2::zeros((n * m, e));
            for j in 0..n {
                let src = (j + 1) % n;
                for i in 0..m {
                    for d in 0..e {
                        perm[[j * m + i, d]] = emb[[src * m + i, d]];
                    }
                }
            }
            let loss_p = ge2e_loss(&perm, n, m, w, b).unwrap();
            assert!((loss - loss_p).abs() < 1e-9);
        }
        // Degenerate batch shapes are rejected.
        let emb = Array2::zeros((2, 4));
        assert!(ge2e_loss(&emb, 1, 2, 1.0, 0.0).is_err());
        assert!(ge2e_loss(&emb, 2, 1, 1.0, 0.0).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let cfg = SvConfig {
            code_embed_dim: 6,
            rnn_dim: 8,
            rnn_layers: 2,
            embed_dim: 10,
            steps: 0,
            speakers_per_batch: 2,
            utts_per_speaker: 2,
            lr: 1e-3,
        };
        let est = SvEstimator::init(&cfg, 2, 16, 7);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let codes = CodecMatrix {
            codes: Array2::from_shape_simple_fn((23, 2), || rng.gen_range(0..16u16)),
            frame_hop: 4,
        };
        let a = est.embed(&codes).unwrap();
        let b = est.embed(&codes).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert_eq!(a.len(), 10);
        // Out-of-range codes and wrong width are rejected.
        let bad = CodecMatrix { codes: Array2::from_elem((5, 2), 99u16), frame_hop: 4 };
        assert!(est.embed(&bad).is_err());
        let wrong = CodecMatrix { codes: Array2::zeros((5, 3)), frame_hop: 4 };
        assert!(est.embed(&wrong).is_err());
    }

    #[test]
    fn eer_of_separated_scores_is_zero_and_of_swapped_is_one() {
        let same = vec![0.9, 0.8, 0.95];
        let diff = vec![0.1, 0.2, 0.05, 0.15];
        assert_eq!(compute_eer(&same, &diff), 0.0);
        assert_eq!(compute_eer(&diff, &same), 1.0);
        // Fully mixed scores sit near one half.
        let eer = compute_eer(&[0.1, 0.9], &[0.1, 0.9]);
        assert!((eer - 0.5).abs() <= 0.5);
    }

    #[test]
    fn trial_list_round_trips_and_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let utts = vec![
            ("a/1".to_string(), 0u32),
            ("a/2".to_string(), 0),
            ("b/1".to_string(), 1),
        ];
        let trials = make_trials(&utts);
        assert_eq!(trials.len(), 3);
        assert_eq!(trials.iter().filter(|t| t.same).count(), 1);
        let path = dir.path().join("trials.tsv");
        write_trials(&path, &trials).unwrap();
        let back = read_trials(&path).unwrap();
        assert_eq!(back, trials);
        std::fs::write(&path, "one\ttwo\n").unwrap();
        assert!(read_trials(&path).is_err());
    }
}
