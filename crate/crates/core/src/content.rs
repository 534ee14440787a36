//! Multi-modal phoneme recognizer.
//!
//! Audio filter-bank features and a DCT→LDA-reduced lip trajectory are fused
//! per frame by a linear layer, encoded by a small transformer, and trained
//! with a joint objective: a CTC head over the frame sequence plus an
//! attention LSTM decoder scored with cross-entropy. The per-frame CTC
//! posterior matrix is the content representation consumed downstream.
//!
//! The same architecture with `visual_dim = 0` (audio features only) serves
//! as the reference recognizer that scores reconstruction intelligibility.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use revoice_nn::ctc::ctc_greedy_decode;
use revoice_nn::{Adam, Binder, Graph, NodeId, ParamStore};

use crate::config::ContentConfig;
use crate::container::Container;
use crate::corpus::{Corpus, ManifestEntry, Partition};
use crate::error::{invalid_input, invalid_state, Result};
use crate::features::{self, Lda, AUDIO_DIM};
use crate::phonemes::{BLANK, NUM_PHONEMES, VOCAB};
use crate::seeds;
use crate::synth;

const CHECKPOINT_KIND: &str = "content-encoder";
/// Container kind for per-utterance posterior dumps.
pub const POSTERIOR_KIND: &str = "phoneme-posteriors";
const LN_EPS: f64 = 1e-5;
/// Decoder start symbol: reuses the blank slot of the embedding table,
/// since transcripts never contain the blank.
const SOS: usize = BLANK;
/// Decoder end-of-sequence output class, likewise in the blank slot.
const EOS: usize = BLANK;
/// Within-class scatter regularizer for the lip-feature LDA.
const LDA_EPS: f64 = 1e-4;

pub struct ContentModel {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Visual feature width after LDA; 0 = audio-only model.
    pub visual_dim: usize,
    pub dct_coeffs: usize,
    pub dct_window: usize,
    pub dct_hop: usize,
    pub attn_dim: usize,
    pub attn_conv_filters: usize,
    pub attn_conv_kernel: usize,
    /// Lip-feature projection; present iff `visual_dim > 0`.
    pub lda: Option<Lda>,
    pub store: ParamStore,
    pub trained: bool,
    pub loss_curve: Vec<f64>,
}

impl ContentModel {
    /// Fresh model. `visual_dim` is passed explicitly (not read from config)
    /// because it must equal the fitted LDA's output dimension, which the
    /// available classes can cap below the configured value.
    pub fn init(cfg: &ContentConfig, visual_dim: usize, seed: u64) -> Self {
        let mut rng = seeds::rng_for(seed, "content-init", 0);
        let h = cfg.hidden_dim;
        let a = cfg.attn_dim;
        let mut store = ParamStore::new();
        store.init_xavier("fuse.w", AUDIO_DIM + visual_dim, h, &mut rng);
        store.init_zeros("fuse.b", 1, h);
        let head_dim = h / cfg.heads;
        for l in 0..cfg.layers {
            store.init_const(&format!("enc{l}.ln1.g"), 1, h, 1.0);
            store.init_zeros(&format!("enc{l}.ln1.b"), 1, h);
            for hd in 0..cfg.heads {
                store.init_xavier(&format!("enc{l}.h{hd}.wq"), h, head_dim, &mut rng);
                store.init_xavier(&format!("enc{l}.h{hd}.wk"), h, head_dim, &mut rng);
                store.init_xavier(&format!("enc{l}.h{hd}.wv"), h, head_dim, &mut rng);
            }
            store.init_xavier(&format!("enc{l}.wo"), h, h, &mut rng);
            store.init_const(&format!("enc{l}.ln2.g"), 1, h, 1.0);
            store.init_zeros(&format!("enc{l}.ln2.b"), 1, h);
            store.init_xavier(&format!("enc{l}.ff1.w"), h, h * cfg.ffn_mult, &mut rng);
            store.init_zeros(&format!("enc{l}.ff1.b"), 1, h * cfg.ffn_mult);
            store.init_xavier(&format!("enc{l}.ff2.w"), h * cfg.ffn_mult, h, &mut rng);
            store.init_zeros(&format!("enc{l}.ff2.b"), 1, h);
        }
        store.init_const("enc.lnf.g", 1, h, 1.0);
        store.init_zeros("enc.lnf.b", 1, h);
        store.init_xavier("ctc.w", h, VOCAB, &mut rng);
        store.init_zeros("ctc.b", 1, VOCAB);

        // Attention LSTM decoder (trains the encoder; not used at inference).
        store.init_normal("dec.emb", VOCAB, a, 0.1, &mut rng);
        for l in 0..2 {
            let in_dim = if l == 0 { a + h } else { a };
            for gate in ["i", "f", "g", "o"] {
                store.init_xavier(&format!("dec.lstm{l}.wx.{gate}"), in_dim, a, &mut rng);
                store.init_xavier(&format!("dec.lstm{l}.wh.{gate}"), a, a, &mut rng);
                store.init_zeros(&format!("dec.lstm{l}.b.{gate}"), 1, a);
            }
        }
        store.init_xavier("att.ws", a, a, &mut rng);
        store.init_xavier("att.vh", h, a, &mut rng);
        store.init_xavier("att.uf", cfg.attn_conv_filters, a, &mut rng);
        store.init_zeros("att.b", 1, a);
        store.init_xavier("att.w", a, 1, &mut rng);
        store.init_xavier("att.conv.w", cfg.attn_conv_kernel, cfg.attn_conv_filters, &mut rng);
        store.init_zeros("att.conv.b", 1, cfg.attn_conv_filters);
        store.init_xavier("dec.out.w", a + h, VOCAB, &mut rng);
        store.init_zeros("dec.out.b", 1, VOCAB);

        ContentModel {
            hidden_dim: h,
            layers: cfg.layers,
            heads: cfg.heads,
            ffn_mult: cfg.ffn_mult,
            visual_dim,
            dct_coeffs: cfg.dct_coeffs,
            dct_window: cfg.dct_window,
            dct_hop: cfg.dct_hop,
            attn_dim: a,
            attn_conv_filters: cfg.attn_conv_filters,
            attn_conv_kernel: cfg.attn_conv_kernel,
            lda: None,
            store,
            trained: false,
            loss_curve: Vec::new(),
        }
    }

    /// Per-frame linear fusion of aligned audio and visual features.
    /// For an audio-only model pass a zero-column visual matrix.
    pub fn fuse(&self, audio: &Array2<f64>, visual: &Array2<f64>) -> Result<Array2<f64>> {
        if audio.nrows() != visual.nrows() {
            return Err(invalid_input(format!(
                "audio has {} frames but visual has {}",
                audio.nrows(),
                visual.nrows()
            )));
        }
        if audio.ncols() != AUDIO_DIM || visual.ncols() != self.visual_dim {
            return Err(invalid_input("fusion input dimensions do not match the model"));
        }
        let t = audio.nrows();
        let d = AUDIO_DIM + self.visual_dim;
        let mut cat = Array2::zeros((t, d));
        for r in 0..t {
            for c in 0..AUDIO_DIM {
                cat[[r, c]] = audio[[r, c]];
            }
            for c in 0..self.visual_dim {
                cat[[r, AUDIO_DIM + c]] = visual[[r, c]];
            }
        }
        let w = self.store.get("fuse.w");
        let b = self.store.get("fuse.b");
        let mut out = cat.dot(w);
        for mut row in out.rows_mut() {
            for (o, &bias) in row.iter_mut().zip(b.row(0)) {
                *o += bias;
            }
        }
        Ok(out)
    }

    /// Assemble the fused (T x 160+K) input matrix, zero-filling a missing
    /// visual stream.
    fn fused_input(&self, audio: &Array2<f64>, visual: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        let t = audio.nrows();
        let zero;
        let v = match visual {
            Some(v) => v,
            None => {
                zero = Array2::zeros((t, self.visual_dim));
                &zero
            }
        };
        let mut cat = Array2::zeros((t, AUDIO_DIM + self.visual_dim));
        if v.nrows() != t {
            return Err(invalid_input("visual frames do not match audio frames"));
        }
        if audio.ncols() != AUDIO_DIM || v.ncols() != self.visual_dim {
            return Err(invalid_input("feature dimensions do not match the model"));
        }
        for r in 0..t {
            for c in 0..AUDIO_DIM {
                cat[[r, c]] = audio[[r, c]];
            }
            for c in 0..self.visual_dim {
                cat[[r, AUDIO_DIM + c]] = v[[r, c]];
            }
        }
        Ok(cat)
    }

    /// Sinusoidal position code added to fused features.
    fn positional(&self, t: usize) -> Array2<f64> {
        let h = self.hidden_dim;
        Array2::from_shape_fn((t, h), |(pos, d)| {
            let pair = (d / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / h as f64);
            if d % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
    }

    /// Transformer encoder over fused features: (T x 160+K) -> (T x H).
    fn encode(&self, g: &mut Graph, binder: &mut Binder, cat: &Array2<f64>) -> NodeId {
        let t = cat.nrows();
        let feats = g.leaf(cat.clone());
        let fw = binder.bind(g, &self.store, "fuse.w");
        let fb = binder.bind(g, &self.store, "fuse.b");
        let projected = g.matmul(feats, fw);
        let fused = g.add_row(projected, fb);
        let pe = g.leaf(self.positional(t));
        let mut x = g.add(fused, pe);
        let head_dim = self.hidden_dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        for l in 0..self.layers {
            let g1 = binder.bind(g, &self.store, &format!("enc{l}.ln1.g"));
            let b1 = binder.bind(g, &self.store, &format!("enc{l}.ln1.b"));
            let normed = g.layer_norm(x, g1, b1, LN_EPS);
            let mut heads = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let wq = binder.bind(g, &self.store, &format!("enc{l}.h{hd}.wq"));
                let wk = binder.bind(g, &self.store, &format!("enc{l}.h{hd}.wk"));
                let wv = binder.bind(g, &self.store, &format!("enc{l}.h{hd}.wv"));
                let q = g.matmul(normed, wq);
                let k = g.matmul(normed, wk);
                let v = g.matmul(normed, wv);
                let raw = g.matmul_nt(q, k);
                let scaled = g.scale(raw, scale);
                let att = g.row_softmax(scaled);
                heads.push(g.matmul(att, v));
            }
            let cat_heads = g.concat_cols(&heads);
            let wo = binder.bind(g, &self.store, &format!("enc{l}.wo"));
            let mixed = g.matmul(cat_heads, wo);
            x = g.add(x, mixed);

            let g2 = binder.bind(g, &self.store, &format!("enc{l}.ln2.g"));
            let b2 = binder.bind(g, &self.store, &format!("enc{l}.ln2.b"));
            let normed2 = g.layer_norm(x, g2, b2, LN_EPS);
            let f1w = binder.bind(g, &self.store, &format!("enc{l}.ff1.w"));
            let f1b = binder.bind(g, &self.store, &format!("enc{l}.ff1.b"));
            let f2w = binder.bind(g, &self.store, &format!("enc{l}.ff2.w"));
            let f2b = binder.bind(g, &self.store, &format!("enc{l}.ff2.b"));
            let a1 = g.matmul(normed2, f1w);
            let a1b = g.add_row(a1, f1b);
            let act = g.elu(a1b, 1.0);
            let a2 = g.matmul(act, f2w);
            let a2b = g.add_row(a2, f2b);
            x = g.add(x, a2b);
        }
        let gf = binder.bind(g, &self.store, "enc.lnf.g");
        let bf = binder.bind(g, &self.store, "enc.lnf.b");
        g.layer_norm(x, gf, bf, LN_EPS)
    }

    /// CTC branch: (T x H) -> (T x V) log posteriors.
    fn ctc_branch(&self, g: &mut Graph, binder: &mut Binder, enc: NodeId) -> NodeId {
        let w = binder.bind(g, &self.store, "ctc.w");
        let b = binder.bind(g, &self.store, "ctc.b");
        let logits = g.matmul(enc, w);
        let shifted = g.add_row(logits, b);
        g.row_log_softmax(shifted)
    }

    /// One LSTM layer step; returns the new (h, c).
    #[allow(clippy::too_many_arguments)]
    fn lstm_step(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        layer: usize,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> (NodeId, NodeId) {
        let gate = |g: &mut Graph, binder: &mut Binder, name: &str| -> NodeId {
            let wx = binder.bind(g, &self.store, &format!("dec.lstm{layer}.wx.{name}"));
            let wh = binder.bind(g, &self.store, &format!("dec.lstm{layer}.wh.{name}"));
            let b = binder.bind(g, &self.store, &format!("dec.lstm{layer}.b.{name}"));
            let xs = g.matmul(x, wx);
            let hs = g.matmul(h, wh);
            let s = g.add(xs, hs);
            g.add_row(s, b)
        };
        let i_raw = gate(g, binder, "i");
        let i_g = g.sigmoid(i_raw);
        let f_raw = gate(g, binder, "f");
        let f_g = g.sigmoid(f_raw);
        let g_raw = gate(g, binder, "g");
        let g_g = g.tanh(g_raw);
        let o_raw = gate(g, binder, "o");
        let o_g = g.sigmoid(o_raw);
        let keep = g.mul(f_g, c);
        let write = g.mul(i_g, g_g);
        let c_new = g.add(keep, write);
        let c_act = g.tanh(c_new);
        let h_new = g.mul(o_g, c_act);
        (h_new, c_new)
    }

    /// Teacher-forced attention-decoder cross-entropy (summed over tokens).
    fn decoder_ce(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        enc: NodeId,
        targets: &[usize],
    ) -> NodeId {
        let t = g.val(enc).nrows();
        let a = self.attn_dim;
        let vh = binder.bind(g, &self.store, "att.vh");
        let enc_proj = g.matmul(enc, vh); // (T x A), shared across steps

        let mut h0 = g.leaf(Array2::zeros((1, a)));
        let mut c0 = g.leaf(Array2::zeros((1, a)));
        let mut h1 = g.leaf(Array2::zeros((1, a)));
        let mut c1 = g.leaf(Array2::zeros((1, a)));
        let mut alpha = g.leaf(Array2::from_elem((t, 1), 1.0 / t as f64));
        let alpha_row0 = g.transpose(alpha);
        let mut ctx = g.matmul(alpha_row0, enc); // (1 x H)

        let emb_table = binder.bind(g, &self.store, "dec.emb");
        let mut inputs = vec![SOS];
        inputs.extend_from_slice(targets);
        let mut logit_rows = Vec::with_capacity(inputs.len());
        for &id in &inputs {
            let emb = g.embedding(emb_table, &[id]);
            let x = g.concat_cols(&[emb, ctx]);
            let (nh0, nc0) = self.lstm_step(g, binder, 0, x, h0, c0);
            h0 = nh0;
            c0 = nc0;
            let (nh1, nc1) = self.lstm_step(g, binder, 1, h0, h1, c1);
            h1 = nh1;
            c1 = nc1;
            let s = h1;

            // Location-aware attention: previous weights feed a conv feature.
            let cw = binder.bind(g, &self.store, "att.conv.w");
            let cb = binder.bind(g, &self.store, "att.conv.b");
            let f = g.conv1d(alpha, cw, cb, self.attn_conv_kernel, 1); // (T x F)
            let uf = binder.bind(g, &self.store, "att.uf");
            let loc = g.matmul(f, uf); // (T x A)
            let ws = binder.bind(g, &self.store, "att.ws");
            let sq = g.matmul(s, ws); // (1 x A)
            let summed = g.add(enc_proj, loc);
            let with_state = g.add_row(summed, sq);
            let ab = binder.bind(g, &self.store, "att.b");
            let with_bias = g.add_row(with_state, ab);
            let tan = g.tanh(with_bias);
            let aw = binder.bind(g, &self.store, "att.w");
            let scores = g.matmul(tan, aw); // (T x 1)
            let scores_row = g.transpose(scores);
            let alpha_row = g.row_softmax(scores_row); // (1 x T)
            alpha = g.transpose(alpha_row);
            ctx = g.matmul(alpha_row, enc); // (1 x H)

            let so = g.concat_cols(&[s, ctx]);
            let ow = binder.bind(g, &self.store, "dec.out.w");
            let ob = binder.bind(g, &self.store, "dec.out.b");
            let logits = g.matmul(so, ow);
            logit_rows.push(g.add_row(logits, ob));
        }
        let all = g.concat_rows(&logit_rows);
        let lp = g.row_log_softmax(all);
        let mut pairs = Vec::with_capacity(inputs.len());
        for (i, &y) in targets.iter().enumerate() {
            pairs.push((i, y));
        }
        pairs.push((targets.len(), EOS));
        let mean_nll = g.nll_mean(lp, &pairs);
        g.scale(mean_nll, pairs.len() as f64)
    }

    /// Joint training loss: ctc_weight * CTC + (1 - ctc_weight) * decoder CE.
    /// Returns the loss node (the scalar value is read off the graph).
    fn joint_loss(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        cat: &Array2<f64>,
        targets: &[usize],
        ctc_weight: f64,
    ) -> Result<NodeId> {
        check_targets(targets)?;
        let t = cat.nrows();
        if t < min_ctc_frames(targets) {
            return Err(invalid_input(format!(
                "{t} frames cannot align {} labels",
                targets.len()
            )));
        }
        let enc = self.encode(g, binder, cat);
        let lp = self.ctc_branch(g, binder, enc);
        let ctc = g.ctc_loss(lp, targets, BLANK);
        let ce = self.decoder_ce(g, binder, enc, targets);
        let ctc_part = g.scale(ctc, ctc_weight);
        let ce_part = g.scale(ce, 1.0 - ctc_weight);
        Ok(g.add(ctc_part, ce_part))
    }

    /// Per-frame phoneme posteriors (the content representation). Rows are
    /// softmax distributions over the inventory including the blank.
    pub fn phoneme_embeddings(
        &self,
        audio: &Array2<f64>,
        visual: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        if !self.trained {
            return Err(invalid_state("content encoder has not been trained"));
        }
        let cat = self.fused_input(audio, visual)?;
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let enc = self.encode(&mut g, &mut binder, &cat);
        let lp = self.ctc_branch(&mut g, &mut binder, enc);
        let post = g.row_softmax(lp); // softmax of log-softmax = softmax
        Ok(g.val(post).clone())
    }

    /// Greedy CTC transcription: per-frame argmax, collapse repeats, drop
    /// blanks.
    pub fn transcribe(
        &self,
        audio: &Array2<f64>,
        visual: Option<&Array2<f64>>,
    ) -> Result<Vec<usize>> {
        let post = self.phoneme_embeddings(audio, visual)?;
        Ok(ctc_greedy_decode(&post, BLANK))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(CHECKPOINT_KIND);
        c.set_int("hidden_dim", self.hidden_dim as i64);
        c.set_int("layers", self.layers as i64);
        c.set_int("heads", self.heads as i64);
        c.set_int("ffn_mult", self.ffn_mult as i64);
        c.set_int("visual_dim", self.visual_dim as i64);
        c.set_int("dct_coeffs", self.dct_coeffs as i64);
        c.set_int("dct_window", self.dct_window as i64);
        c.set_int("dct_hop", self.dct_hop as i64);
        c.set_int("attn_dim", self.attn_dim as i64);
        c.set_int("attn_conv_filters", self.attn_conv_filters as i64);
        c.set_int("attn_conv_kernel", self.attn_conv_kernel as i64);
        c.set_int("trained", i64::from(self.trained));
        c.put_params(&self.store);
        if let Some(lda) = &self.lda {
            let mean = Array2::from_shape_fn((1, lda.mean.len()), |(_, j)| lda.mean[j]);
            c.tensors.insert("lda.mean".into(), mean);
            c.tensors.insert("lda.w".into(), lda.w.clone());
        }
        if !self.loss_curve.is_empty() {
            let curve =
                Array2::from_shape_vec((self.loss_curve.len(), 1), self.loss_curve.clone())
                    .unwrap();
            c.tensors.insert("loss_curve".into(), curve);
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path, CHECKPOINT_KIND)?;
        let mut store = ParamStore::new();
        for (name, v) in &c.tensors {
            if name.starts_with("lda.") || name == "loss_curve" {
                continue;
            }
            store.insert(name, v.clone());
        }
        let lda = match (c.tensors.get("lda.mean"), c.tensors.get("lda.w")) {
            (Some(mean), Some(w)) => Some(Lda {
                mean: mean.row(0).to_owned(),
                w: w.clone(),
            }),
            _ => None,
        };
        let loss_curve = c
            .tensors
            .get("loss_curve")
            .map(|t| t.column(0).to_vec())
            .unwrap_or_default();
        Ok(ContentModel {
            hidden_dim: c.int("hidden_dim")? as usize,
            layers: c.int("layers")? as usize,
            heads: c.int("heads")? as usize,
            ffn_mult: c.int("ffn_mult")? as usize,
            visual_dim: c.int("visual_dim")? as usize,
            dct_coeffs: c.int("dct_coeffs")? as usize,
            dct_window: c.int("dct_window")? as usize,
            dct_hop: c.int("dct_hop")? as usize,
            attn_dim: c.int("attn_dim")? as usize,
            attn_conv_filters: c.int("attn_conv_filters")? as usize,
            attn_conv_kernel: c.int("attn_conv_kernel")? as usize,
            lda,
            store,
            trained: c.int("trained")? != 0,
            loss_curve,
        })
    }
}

/// Transcripts may only contain real phonemes, never the blank.
fn check_targets(targets: &[usize]) -> Result<()> {
    if targets.is_empty() {
        return Err(invalid_input("empty transcript"));
    }
    if targets.iter().any(|&t| t >= NUM_PHONEMES) {
        return Err(invalid_input("transcript contains out-of-inventory ids"));
    }
    Ok(())
}

/// Minimum frames a CTC alignment needs: one per label plus one separator
/// between adjacent repeats.
fn min_ctc_frames(targets: &[usize]) -> usize {
    let repeats = targets.windows(2).filter(|w| w[0] == w[1]).count();
    targets.len() + repeats
}

/// Project lip-trajectory DCT windows with the model's LDA and linearly
/// resample to the audio frame grid (both run at fixed known rates).
pub fn extract_visual_features(
    model: &ContentModel,
    lips: &Array2<f64>,
    audio_frames: usize,
) -> Result<Array2<f64>> {
    let lda = model
        .lda
        .as_ref()
        .ok_or_else(|| invalid_state("model has no visual projection"))?;
    let (windows, centers) =
        features::dct_windows(lips, model.dct_window, model.dct_hop, model.dct_coeffs)?;
    let proj = lda.apply(&windows);
    let src_times: Vec<f64> = centers.iter().map(|&c| c as f64 * synth::LIP_SEC).collect();
    let dst_times: Vec<f64> = (0..audio_frames).map(|t| t as f64 * 0.010).collect();
    Ok(features::resample_linear(&proj, &src_times, &dst_times))
}

/// One utterance prepared for training/eval: features plus transcript.
pub struct PreparedUtt {
    pub speaker_id: u32,
    pub audio: Array2<f64>,
    pub visual: Option<Array2<f64>>,
    pub targets: Vec<usize>,
}

/// DCT windows of an entry's lip trajectory labeled with the phoneme active
/// at each window's center (blank for silence); used for fitting the LDA.
fn lip_windows_labeled(
    corpus: &Corpus,
    entry: &ManifestEntry,
    window: usize,
    hop: usize,
    coeffs: usize,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let rendered = corpus.regenerate(entry);
    let (feats, centers) = features::dct_windows(&rendered.lips, window, hop, coeffs)?;
    let samples_per_lip = (corpus.sample_rate as f64 * synth::LIP_SEC) as usize;
    let labels = centers
        .iter()
        .map(|&c| {
            let sample = c * samples_per_lip;
            rendered
                .durations
                .iter()
                .position(|&(start, len)| sample >= start && sample < start + len)
                .map_or(BLANK, |k| entry.phonemes[k])
        })
        .collect();
    Ok((feats, labels))
}

/// Denoise, extract audio features, and (for multi-modal models) visual
/// features for one corpus entry.
fn prepare_utt(corpus: &Corpus, entry: &ManifestEntry, model: &ContentModel) -> Result<PreparedUtt> {
    let wav = corpus.load_wav(entry)?;
    let clean = synth::denoise(&wav, corpus.sample_rate);
    let audio = features::extract_audio_features(&clean, corpus.sample_rate)?;
    let visual = if model.visual_dim > 0 {
        let rendered = corpus.regenerate(entry);
        Some(extract_visual_features(model, &rendered.lips, audio.nrows())?)
    } else {
        None
    };
    Ok(PreparedUtt {
        speaker_id: entry.speaker_id,
        audio,
        visual,
        targets: entry.phonemes.clone(),
    })
}

/// SGD loop over prepared utterances; returns the per-step loss curve.
fn train_loop(
    model: &mut ContentModel,
    utts: &[PreparedUtt],
    steps: usize,
    lr: f64,
    ctc_weight: f64,
    visual_dropout: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    assert!(!utts.is_empty());
    let mut adam = Adam::new(lr);
    let mut curve = Vec::with_capacity(steps);
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..steps {
        if order.is_empty() {
            order = (0..utts.len()).collect();
            order.shuffle(rng);
        }
        let utt = &utts[order.pop().unwrap()];
        // Visual dropout keeps the audio-only path in-distribution; the draw
        // happens every step so the RNG stream is stable across models.
        let drop_visual = rng.gen::<f64>() < visual_dropout;
        let visual = if drop_visual { None } else { utt.visual.as_ref() };
        let cat = model.fused_input(&utt.audio, visual)?;
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let loss = model.joint_loss(&mut g, &mut binder, &cat, &utt.targets, ctc_weight)?;
        curve.push(g.val(loss)[[0, 0]]);
        let mut grads = g.backward(loss);
        let grad_list = binder.collect_grads(&mut grads);
        adam.step(&mut model.store, grad_list, Some(5.0));
    }
    Ok(curve)
}

/// The two-stage trained system: one multi-speaker base model plus one
/// fine-tuned model per held-out speaker.
pub struct TrainedContent {
    pub base: ContentModel,
    pub speaker_models: Vec<(u32, ContentModel)>,
}

impl TrainedContent {
    /// The model evaluated for a given speaker: their fine-tuned instance if
    /// present, otherwise the base model.
    pub fn for_speaker(&self, speaker_id: u32) -> &ContentModel {
        self.speaker_models
            .iter()
            .find(|(id, _)| *id == speaker_id)
            .map(|(_, m)| m)
            .unwrap_or(&self.base)
    }
}

/// Two-stage training: fit the lip LDA, train on every speaker's training
/// material (normal speakers' train partition + held-out speakers' adaptation
/// utterances), then fine-tune a copy per held-out speaker.
pub fn train_content(corpus: &Corpus, cfg: &ContentConfig, seed: u64) -> Result<TrainedContent> {
    let mut stage1: Vec<&ManifestEntry> = corpus.partition(Partition::NormalTrain);
    let adapt = corpus.partition(Partition::DysarthricAdapt);
    stage1.extend(adapt.iter().copied());
    if stage1.is_empty() {
        return Err(invalid_input("corpus has no training utterances"));
    }

    // Fit the visual LDA on pooled labeled lip windows.
    let mut labels: Vec<usize> = Vec::new();
    let mut rows: Vec<Array2<f64>> = Vec::new();
    for entry in &stage1 {
        let (w, l) = lip_windows_labeled(corpus, entry, cfg.dct_window, cfg.dct_hop, cfg.dct_coeffs)?;
        rows.push(w);
        labels.extend(l);
    }
    let total: usize = rows.iter().map(|r| r.nrows()).sum();
    let dim = rows[0].ncols();
    let mut x = Array2::zeros((total, dim));
    let mut at = 0;
    for r in &rows {
        for row in r.rows() {
            for (j, &v) in row.iter().enumerate() {
                x[[at, j]] = v;
            }
            at += 1;
        }
    }
    let mut classes: Vec<usize> = labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let k = cfg.visual_dim.min(classes.len().saturating_sub(1)).max(1);
    let lda = features::fit_lda(&x, &labels, k, LDA_EPS)?;

    let mut model = ContentModel::init(cfg, lda.k(), seed);
    model.lda = Some(lda);

    let prepared: Vec<PreparedUtt> = stage1
        .iter()
        .map(|e| prepare_utt(corpus, e, &model))
        .collect::<Result<_>>()?;
    let mut rng = seeds::rng_for(seed, "content-train", 0);
    let curve = train_loop(
        &mut model,
        &prepared,
        cfg.stage1_steps,
        cfg.lr,
        cfg.ctc_weight,
        cfg.visual_dropout,
        &mut rng,
    )?;
    model.loss_curve = curve;
    model.trained = true;

    // Stage 2: per-speaker fine-tuning on adaptation utterances.
    let mut speaker_models = Vec::new();
    let mut heldout: Vec<u32> = adapt.iter().map(|e| e.speaker_id).collect();
    heldout.sort_unstable();
    heldout.dedup();
    for spk in heldout {
        let utts: Vec<PreparedUtt> = adapt
            .iter()
            .filter(|e| e.speaker_id == spk)
            .map(|e| prepare_utt(corpus, e, &model))
            .collect::<Result<_>>()?;
        if utts.is_empty() {
            continue;
        }
        let mut tuned = ContentModel {
            hidden_dim: model.hidden_dim,
            layers: model.layers,
            heads: model.heads,
            ffn_mult: model.ffn_mult,
            visual_dim: model.visual_dim,
            dct_coeffs: model.dct_coeffs,
            dct_window: model.dct_window,
            dct_hop: model.dct_hop,
            attn_dim: model.attn_dim,
            attn_conv_filters: model.attn_conv_filters,
            attn_conv_kernel: model.attn_conv_kernel,
            lda: model.lda.clone(),
            store: model.store.clone(),
            trained: true,
            loss_curve: Vec::new(),
        };
        let mut rng = seeds::rng_for(seed, "content-finetune", u64::from(spk));
        let curve = train_loop(
            &mut tuned,
            &utts,
            cfg.finetune_steps,
            cfg.lr * 0.3,
            cfg.ctc_weight,
            cfg.visual_dropout,
            &mut rng,
        )?;
        tuned.loss_curve = curve;
        speaker_models.push((spk, tuned));
    }
    Ok(TrainedContent {
        base: model,
        speaker_models,
    })
}

/// Audio-only recognizer trained on normal speech only; the evaluation
/// harness scores raw and reconstructed audio with it.
pub fn train_reference_recognizer(
    corpus: &Corpus,
    cfg: &ContentConfig,
    seed: u64,
) -> Result<ContentModel> {
    let entries = corpus.partition(Partition::NormalTrain);
    if entries.is_empty() {
        return Err(invalid_input("corpus has no normal training utterances"));
    }
    let mut model = ContentModel::init(cfg, 0, seed);
    let prepared: Vec<PreparedUtt> = entries
        .iter()
        .map(|e| prepare_utt(corpus, e, &model))
        .collect::<Result<_>>()?;
    let mut rng = seeds::rng_for(seed, "recognizer-train", 0);
    let curve = train_loop(
        &mut model,
        &prepared,
        cfg.recognizer_steps,
        cfg.lr,
        cfg.ctc_weight,
        0.0,
        &mut rng,
    )?;
    model.loss_curve = curve;
    model.trained = true;
    Ok(model)
}

/// Write a posterior matrix with a (T, V) header for external consumption.
pub fn save_posteriors(path: &Path, posteriors: &Array2<f64>) -> Result<()> {
    let mut c = Container::new(POSTERIOR_KIND);
    c.set_int("frames", posteriors.nrows() as i64);
    c.set_int("vocab", posteriors.ncols() as i64);
    c.tensors.insert("posteriors".into(), posteriors.clone());
    c.save(path)
}

pub fn load_posteriors(path: &Path) -> Result<Array2<f64>> {
    let c = Container::load(path, POSTERIOR_KIND)?;
    let p = c
        .tensors
        .get("posteriors")
        .ok_or_else(|| crate::error::format_err("posterior file missing its matrix"))?;
    if p.nrows() != c.int("frames")? as usize || p.ncols() != c.int("vocab")? as usize {
        return Err(crate::error::format_err("posterior header mismatches matrix"));
    }
    Ok(p.clone())
}
