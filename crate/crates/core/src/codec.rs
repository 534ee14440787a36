//! Trainable residual-vector-quantized audio codec: a strided convolutional
//! encoder to 75 Hz latents, an 8-stage RVQ with EMA-learned codebooks, and
//! a transposed-convolution decoder back to the waveform.
//!
//! Training minimizes time-domain L1 plus multi-resolution spectral L1 on
//! random crops, with a commitment term tying the encoder output to its
//! quantization; the quantizer passes gradients straight through. Codebooks
//! learn by exponential moving average with dead-entry reseeding.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use revoice_nn::{Adam, Binder, Graph, NodeId, ParamStore};

use crate::config::CodecConfig;
use crate::container::Container;
use crate::corpus::{Corpus, Partition};
use crate::dsp;
use crate::error::{invalid_input, invalid_state, Result};
use crate::seeds;

/// A quantized utterance: T x Q codes plus the sample geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodecMatrix {
    /// T x Q, each entry a codebook index.
    pub codes: Array2<u16>,
    /// Samples per frame in the source waveform.
    pub frame_hop: usize,
}

impl CodecMatrix {
    pub fn frames(&self) -> usize {
        self.codes.nrows()
    }

    pub fn quantizers(&self) -> usize {
        self.codes.ncols()
    }
}

/// The trained codec: encoder/decoder parameters plus one codebook per
/// residual stage, and the fidelity statistics recorded at train time.
pub struct CodecModel {
    pub quantizers: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub strides: Vec<usize>,
    pub channels: Vec<usize>,
    pub sample_rate: u32,
    pub store: ParamStore,
    /// One (codebook_size x D) table per stage.
    pub codebooks: Vec<Array2<f64>>,
    /// Mean round-trip spectral L1 on the held validation utterances.
    pub validation_floor: f64,
    /// Per-step total training loss.
    pub loss_curve: Vec<f64>,
}

const CHECKPOINT_KIND: &str = "rvq-codec";

impl CodecModel {
    /// Samples per latent frame: the product of the encoder strides.
    pub fn frame_hop(&self) -> usize {
        self.strides.iter().product()
    }

    fn conv_kernel(stride: usize) -> usize {
        2 * stride
    }

    /// Fresh randomly initialized model with the configured geometry.
    pub fn init(cfg: &CodecConfig, sample_rate: u32, seed: u64) -> Self {
        let mut rng = seeds::rng_for(seed, "codec-init", 0);
        let mut store = ParamStore::new();
        // Encoder: strided conv blocks from 1 channel up to the latent dim.
        let mut c_in = 1usize;
        for (i, (&s, &c_out)) in cfg.strides.iter().zip(&cfg.channels).enumerate() {
            let k = Self::conv_kernel(s);
            store.init_xavier(&format!("enc{i}.w"), k * c_in, c_out, &mut rng);
            store.init_zeros(&format!("enc{i}.b"), 1, c_out);
            c_in = c_out;
        }
        // Decoder: transposed convs mirroring the encoder, ending in 1 channel.
        let mut dec_channels: Vec<usize> = cfg.channels.clone();
        dec_channels.pop();
        dec_channels.reverse();
        dec_channels.push(1);
        let mut strides_rev = cfg.strides.clone();
        strides_rev.reverse();
        let mut c_in = cfg.latent_dim;
        for (i, (&f, &c_out)) in strides_rev.iter().zip(&dec_channels).enumerate() {
            let k = Self::conv_kernel(f);
            store.init_xavier(&format!("dec{i}.w"), k * c_in, c_out, &mut rng);
            store.init_zeros(&format!("dec{i}.b"), 1, c_out);
            c_in = c_out;
        }
        // Entry 0 of every codebook is pinned to the zero vector and never
        // trained. Nearest-entry selection can then always fall back to
        // "add nothing", which guarantees the per-frame residual norm never
        // grows from one stage to the next.
        let codebooks = (0..cfg.quantizers)
            .map(|q| {
                let mut rng_q = seeds::rng_for(seed, "codebook", q as u64);
                let mut book =
                    Array2::from_shape_simple_fn((cfg.codebook_size, cfg.latent_dim), || {
                        0.1 * (rng_q.gen::<f64>() - 0.5)
                    });
                book.row_mut(0).fill(0.0);
                book
            })
            .collect();
        CodecModel {
            quantizers: cfg.quantizers,
            codebook_size: cfg.codebook_size,
            latent_dim: cfg.latent_dim,
            strides: cfg.strides.clone(),
            channels: cfg.channels.clone(),
            sample_rate,
            store,
            codebooks,
            validation_floor: f64::INFINITY,
            loss_curve: Vec::new(),
        }
    }

    /// Encoder forward pass on the graph: (L x 1) waveform -> (T x D) latent.
    fn encode_graph(&self, g: &mut Graph, binder: &mut Binder, x: NodeId) -> NodeId {
        let mut h = x;
        let n = self.strides.len();
        for (i, &s) in self.strides.iter().enumerate() {
            let w = binder.bind(g, &self.store, &format!("enc{i}.w"));
            let b = binder.bind(g, &self.store, &format!("enc{i}.b"));
            h = g.conv1d(h, w, b, Self::conv_kernel(s), s);
            if i + 1 < n {
                h = g.elu(h, 1.0);
            }
        }
        h
    }

    /// Decoder forward pass: (T x D) quantized latent -> (T*hop x 1) waveform.
    fn decode_graph(&self, g: &mut Graph, binder: &mut Binder, q: NodeId) -> NodeId {
        let mut strides_rev = self.strides.clone();
        strides_rev.reverse();
        let mut h = q;
        let n = strides_rev.len();
        for (i, &f) in strides_rev.iter().enumerate() {
            let w = binder.bind(g, &self.store, &format!("dec{i}.w"));
            let b = binder.bind(g, &self.store, &format!("dec{i}.b"));
            h = g.conv_transpose1d(h, w, b, Self::conv_kernel(f), f);
            if i + 1 < n {
                h = g.elu(h, 1.0);
            }
        }
        h
    }

    /// Latents for a waveform, outside any training graph.
    fn latents(&self, waveform: &[f64]) -> Array2<f64> {
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let x = g.leaf(Array2::from_shape_vec((waveform.len(), 1), waveform.to_vec()).unwrap());
        let z = self.encode_graph(&mut g, &mut binder, x);
        g.val(z).clone()
    }

    /// Quantize a waveform to its code matrix.
    pub fn encode(&self, waveform: &[f64], sample_rate: u32) -> Result<CodecMatrix> {
        if sample_rate != self.sample_rate {
            return Err(invalid_input(format!(
                "waveform rate {sample_rate} != codec rate {}",
                self.sample_rate
            )));
        }
        if waveform.is_empty() {
            return Err(invalid_input("cannot encode an empty waveform"));
        }
        let z = self.latents(waveform);
        let (codes, _) = rvq_quantize(&z, &self.codebooks)?;
        Ok(CodecMatrix { codes, frame_hop: self.frame_hop() })
    }

    /// Decode a code matrix to a waveform of exactly T * frame_hop samples,
    /// using only the first `stages` quantizer stages (None = all).
    pub fn decode_stages(&self, codes: &CodecMatrix, stages: Option<usize>) -> Result<Vec<f64>> {
        let (t, q) = codes.codes.dim();
        if q != self.quantizers {
            return Err(invalid_input(format!(
                "code matrix has {q} quantizers, model expects {}",
                self.quantizers
            )));
        }
        let use_stages = stages.unwrap_or(self.quantizers).min(self.quantizers);
        if use_stages == 0 {
            return Err(invalid_input("need at least one quantizer stage"));
        }
        let mut latent = Array2::<f64>::zeros((t, self.latent_dim));
        for frame in 0..t {
            for stage in 0..use_stages {
                let code = codes.codes[[frame, stage]] as usize;
                if code >= self.codebook_size {
                    return Err(invalid_input(format!(
                        "code {code} out of range (codebook size {})",
                        self.codebook_size
                    )));
                }
                for d in 0..self.latent_dim {
                    latent[[frame, d]] += self.codebooks[stage][[code, d]];
                }
            }
        }
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let qn = g.leaf(latent);
        let y = self.decode_graph(&mut g, &mut binder, qn);
        Ok(g.val(y).column(0).to_vec())
    }

    pub fn decode(&self, codes: &CodecMatrix) -> Result<Vec<f64>> {
        self.decode_stages(codes, None)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(CHECKPOINT_KIND);
        c.set_int("quantizers", self.quantizers as i64);
        c.set_int("codebook_size", self.codebook_size as i64);
        c.set_int("latent_dim", self.latent_dim as i64);
        c.set_int("frame_hop", self.frame_hop() as i64);
        c.set_int("sample_rate", self.sample_rate as i64);
        c.set_int("num_blocks", self.strides.len() as i64);
        for (i, (&s, &ch)) in self.strides.iter().zip(&self.channels).enumerate() {
            c.set_int(&format!("stride.{i}"), s as i64);
            c.set_int(&format!("channel.{i}"), ch as i64);
        }
        c.set_float("validation_floor", self.validation_floor);
        c.put_params(&self.store);
        for (q, book) in self.codebooks.iter().enumerate() {
            c.tensors.insert(format!("codebook.{q}"), book.clone());
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
        let quantizers = c.int("quantizers")? as usize;
        let num_blocks = c.int("num_blocks")? as usize;
        let mut strides = Vec::with_capacity(num_blocks);
        let mut channels = Vec::with_capacity(num_blocks);
        for i in 0..num_blocks {
            strides.push(c.int(&format!("stride.{i}"))? as usize);
            channels.push(c.int(&format!("channel.{i}"))? as usize);
        }
        let mut store = ParamStore::new();
        let mut codebooks = Vec::with_capacity(quantizers);
        for (name, v) in &c.tensors {
            if name.starts_with("codebook.") || name == "loss_curve" {
                continue;
            }
            store.insert(name, v.clone());
        }
        for q in 0..quantizers {
            codebooks.push(
                c.tensors
                    .get(&format!("codebook.{q}"))
                    .ok_or_else(|| invalid_state(format!("checkpoint missing codebook {q}")))?
                    .clone(),
            );
        }
        let loss_curve = c
            .tensors
            .get("loss_curve")
            .map(|t| t.column(0).to_vec())
            .unwrap_or_default();
        Ok(CodecModel {
            quantizers,
            codebook_size: c.int("codebook_size")? as usize,
            latent_dim: c.int("latent_dim")? as usize,
            strides,
            channels,
            sample_rate: c.int("sample_rate")? as i64 as u32,
            store,
            codebooks,
            validation_floor: c.float("validation_floor")?,
            loss_curve,
        })
    }
}

/// Residual vector quantization: stage j picks the nearest entry (squared
/// Euclidean) of codebook j to the running residual; returns the T x Q code
/// matrix and the summed quantized latent.
pub fn rvq_quantize(
    latent: &Array2<f64>,
    codebooks: &[Array2<f64>],
) -> Result<(Array2<u16>, Array2<f64>)> {
    let (t, d) = latent.dim();
    for book in codebooks {
        if book.ncols() != d {
            return Err(invalid_input(format!(
                "codebook dim {} != latent dim {d}",
                book.ncols()
            )));
        }
    }
    let q = codebooks.len();
    let mut codes = Array2::<u16>::zeros((t, q));
    let mut quantized = Array2::<f64>::zeros((t, d));
    let mut residual = latent.clone();
    for (stage, book) in codebooks.iter().enumerate() {
        let entries = book.nrows();
        for frame in 0..t {
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for e in 0..entries {
                let mut dist = 0.0;
                for j in 0..d {
                    let diff = residual[[frame, j]] - book[[e, j]];
                    dist += diff * diff;
                }
                if dist < best_dist {
                    best_dist = dist;
                    best = e;
                }
            }
            codes[[frame, stage]] = best as u16;
            for j in 0..d {
                let v = book[[best, j]];
                quantized[[frame, j]] += v;
                residual[[frame, j]] -= v;
            }
        }
    }
    Ok((codes, quantized))
}

/// Per-frame residual norms after each stage — the monotonicity witness.
pub fn rvq_residual_norms(latent: &Array2<f64>, codebooks: &[Array2<f64>]) -> Vec<Vec<f64>> {
    let (t, d) = latent.dim();
    let mut residual = latent.clone();
    let mut norms = vec![Vec::with_capacity(codebooks.len()); t];
    for book in codebooks {
        let entries = book.nrows();
        for frame in 0..t {
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for e in 0..entries {
                let mut dist = 0.0;
                for j in 0..d {
                    let diff = residual[[frame, j]] - book[[e, j]];
                    dist += diff * diff;
                }
                if dist < best_dist {
                    best_dist = dist;
                    best = e;
                }
            }
            for j in 0..d {
                residual[[frame, j]] -= book[[best, j]];
            }
            let norm = (0..d).map(|j| residual[[frame, j]].powi(2)).sum::<f64>().sqrt();
            norms[frame].push(norm);
        }
    }
    norms
}

/// EMA codebook state: per-entry counts, vector sums, and last-used step.
struct EmaState {
    counts: Vec<Vec<f64>>,
    sums: Vec<Array2<f64>>,
    last_used: Vec<Vec<usize>>,
}

impl EmaState {
    fn new(q: usize, entries: usize, d: usize) -> Self {
        EmaState {
            counts: vec![vec![0.0; entries]; q],
            sums: vec![Array2::zeros((entries, d)); q],
            last_used: vec![vec![0; entries]; q],
        }
    }
}

/// Train the codec on the normal-train partition. Deterministic per seed.
pub fn train_codec(corpus: &Corpus, cfg: &CodecConfig, seed: u64) -> Result<CodecModel> {
    let train = corpus.partition(Partition::NormalTrain);
    if train.is_empty() {
        return Err(invalid_input("normal-train partition is empty"));
    }
    let wavs: Vec<Vec<f64>> = {
        let loaded: Vec<Result<Vec<f64>>> =
            train.iter().map(|e| corpus.load_wav(e)).collect();
        let mut out = Vec::with_capacity(loaded.len());
        for w in loaded {
            out.push(w?);
        }
        out
    };
    let mut model = CodecModel::init(cfg, corpus.sample_rate, seed);
    let hop = model.frame_hop();
    let crop_len = ((cfg.crop_seconds * corpus.sample_rate as f64) as usize / hop).max(1) * hop;
    let mut adam = Adam::new(cfg.lr);
    let mut ema = EmaState::new(cfg.quantizers, cfg.codebook_size, cfg.latent_dim);
    let mut rng = seeds::rng_for(seed, "codec-train", 0);
    let mut reseed_rng = seeds::rng_for(seed, "codec-reseed", 0);
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        // Random crop of a random utterance.
        let wav = &wavs[rng.gen_range(0..wavs.len())];
        let crop: Vec<f64> = if wav.len() <= crop_len {
            wav.clone()
        } else {
            let start = rng.gen_range(0..wav.len() - crop_len);
            wav[start..start + crop_len].to_vec()
        };
        let l = crop.len();

        let mut g = Graph::new();
        let mut binder = Binder::new();
        let x = g.leaf(Array2::from_shape_vec((l, 1), crop).unwrap());
        let z = model.encode_graph(&mut g, &mut binder, x);
        let z_val = g.val(z).clone();
        let (codes, quantized) = rvq_quantize(&z_val, &model.codebooks)?;

        // EMA codebook update from this batch of latents.
        update_codebooks(&mut model, &mut ema, &z_val, &codes, step, cfg, &mut reseed_rng);

        // Straight-through: decoder sees the quantized latent, encoder
        // receives the decoder gradient unchanged.
        let st_gap = g.leaf(&quantized - &z_val);
        let qlat = g.add(z, st_gap);
        let y_full = model.decode_graph(&mut g, &mut binder, qlat);
        let y = g.slice_rows(y_full, 0, l);

        let diff = g.sub(y, x);
        let abs_diff = g.abs(diff);
        let time_l1 = g.mean(abs_diff);
        let mut spec_terms = Vec::new();
        for &(fft, shop) in dsp::SPECTRAL_RESOLUTIONS.iter() {
            if fft <= l {
                let my = g.stft_mag(y, fft, fft, shop);
                let mx = g.stft_mag(x, fft, fft, shop);
                let d = g.sub(my, mx);
                let ad = g.abs(d);
                spec_terms.push(g.mean(ad));
            }
        }
        let mut total = time_l1;
        if !spec_terms.is_empty() {
            let mut spec_sum = spec_terms[0];
            for &term in &spec_terms[1..] {
                spec_sum = g.add(spec_sum, term);
            }
            let spec_mean = g.scale(spec_sum, cfg.spectral_weight / spec_terms.len() as f64);
            total = g.add(total, spec_mean);
        }
        let q_leaf = g.leaf(quantized);
        let commit_diff = g.sub(z, q_leaf);
        let commit_sq = g.sqr(commit_diff);
        let commit = g.mean(commit_sq);
        let commit_w = g.scale(commit, cfg.commit_weight);
        total = g.add(total, commit_w);

        curve.push(g.val(total)[[0, 0]]);
        let mut grads = g.backward(total);
        let grad_list = binder.collect_grads(&mut grads);
        adam.step(&mut model.store, grad_list, Some(5.0));
    }
    model.loss_curve = curve;

    // Validation floor: full-utterance round trips on a fixed subset.
    let val_count = wavs.len().min(8);
    let mut acc = 0.0;
    for wav in wavs.iter().take(val_count) {
        let codes = model.encode(wav, corpus.sample_rate)?;
        let recon = model.decode(&codes)?;
        acc += dsp::spectral_l1(wav, &recon);
    }
    model.validation_floor = acc / val_count as f64;
    Ok(model)
}

fn update_codebooks(
    model: &mut CodecModel,
    ema: &mut EmaState,
    latent: &Array2<f64>,
    codes: &Array2<u16>,
    step: usize,
    cfg: &CodecConfig,
    reseed_rng: &mut impl Rng,
) {
    let (t, d) = latent.dim();
    let gamma = cfg.ema_decay;
    // Stage-wise residuals must be rebuilt to know what each stage saw.
    let mut residual = latent.clone();
    for stage in 0..model.quantizers {
        // Accumulate batch statistics for this stage.
        let mut batch_count = vec![0.0f64; model.codebook_size];
        let mut batch_sum = Array2::<f64>::zeros((model.codebook_size, d));
        for frame in 0..t {
            let code = codes[[frame, stage]] as usize;
            batch_count[code] += 1.0;
            for j in 0..d {
                batch_sum[[code, j]] += residual[[frame, j]];
            }
            ema.last_used[stage][code] = step;
        }
        // Entry 0 stays the zero vector (the residual-monotonicity anchor),
        // so it is exempt from both the EMA update and reseeding.
        for e in 1..model.codebook_size {
            ema.counts[stage][e] = gamma * ema.counts[stage][e] + (1.0 - gamma) * batch_count[e];
            for j in 0..d {
                ema.sums[stage][[e, j]] =
                    gamma * ema.sums[stage][[e, j]] + (1.0 - gamma) * batch_sum[[e, j]];
            }
            if ema.counts[stage][e] > 1e-3 {
                for j in 0..d {
                    model.codebooks[stage][[e, j]] =
                        ema.sums[stage][[e, j]] / ema.counts[stage][e];
                }
            }
            // Dead-entry reseeding: unused too long -> jump to a batch latent.
            if step >= cfg.dead_code_steps
                && step - ema.last_used[stage][e] >= cfg.dead_code_steps
            {
                let src = reseed_rng.gen_range(0..t);
                for j in 0..d {
                    let v = residual[[src, j]] + 0.01 * (reseed_rng.gen::<f64>() - 0.5);
                    model.codebooks[stage][[e, j]] = v;
                    ema.sums[stage][[e, j]] = v;
                }
                ema.counts[stage][e] = 1.0;
                ema.last_used[stage][e] = step;
            }
        }
        // Advance the residual past this stage for the next one.
        for frame in 0..t {
            let code = codes[[frame, stage]] as usize;
            for j in 0..d {
                residual[[frame, j]] -= model.codebooks[stage][[code, j]];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_cfg() -> CodecConfig {
        CodecConfig {
            quantizers: 2,
            codebook_size: 16,
            latent_dim: 8,
            strides: vec![2, 2],
            channels: vec![6, 8],
            steps: 60,
            lr: 2e-3,
            crop_seconds: 0.05,
            commit_weight: 0.25,
            spectral_weight: 1.0,
            ema_decay: 0.95,
            dead_code_steps: 30,
        }
    }

    #[test]
    fn rvq_reproduces_an_exactly_representable_latent() {
        // Codebook 1 entry 5 plus codebook 2 entry 17 (wider books so index
        // 17 exists); every later book contains a zero vector at index 0.
        let d = 4;
        let mut book1 = Array2::from_elem((32, d), 9.0);
        let mut book2 = Array2::from_elem((32, d), 9.0);
        let book3 = Array2::zeros((32, d));
        for j in 0..d {
            book1[[5, j]] = 1.0 + j as f64;
            book2[[17, j]] = -0.5 * j as f64;
        }
        let mut latent = Array2::zeros((1, d));
        for j in 0..d {
            latent[[0, j]] = book1[[5, j]] + book2[[17, j]];
        }
        let books = vec![book1, book2, book3];
        let (codes, quantized) = rvq_quantize(&latent, &books).unwrap();
        assert_eq!(codes[[0, 0]], 5);
        assert_eq!(codes[[0, 1]], 17);
        assert_eq!(codes[[0, 2]], 0, "zero vector must win on a zero residual");
        for j in 0..d {
            assert!((quantized[[0, j]] - latent[[0, j]]).abs() < 1e-12);
        }
        let norms = rvq_residual_norms(&latent, &books);
        assert!(norms[0][1] < 1e-12, "residual must vanish after stage 2");
    }

    #[test]
    fn rvq_residuals_never_increase_and_stage1_matches_exhaustive_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        // Books follow the model's convention: entry 0 is the zero vector,
        // which is exactly what makes the monotonicity claim provable.
        let books: Vec<Array2<f64>> = (0..8)
            .map(|_| {
                let mut b = Array2::from_shape_simple_fn((64, 6), || rng.gen::<f64>() - 0.5);
                b.row_mut(0).fill(0.0);
                b
            })
            .collect();
        let latent = Array2::from_shape_simple_fn((10, 6), || 2.0 * rng.gen::<f64>() - 1.0);
        let (codes, _) = rvq_quantize(&latent, &books).unwrap();
        // Independent exhaustive scan for stage 1.
        for frame in 0..10 {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for e in 0..64 {
                let d: f64 = (0..6)
                    .map(|j| (latent[[frame, j]] - books[0][[e, j]]).powi(2))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = e;
                }
            }
            assert_eq!(codes[[frame, 0]] as usize, best);
        }
        for frame_norms in rvq_residual_norms(&latent, &books) {
            for w in frame_norms.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "residual grew: {w:?}");
            }
        }
        // Dimension mismatch is rejected.
        let bad = vec![Array2::<f64>::zeros((4, 5))];
        assert!(rvq_quantize(&latent, &bad).is_err());
    }

    #[test]
    fn encode_shapes_follow_the_ceil_rule() {
        let cfg = tiny_cfg();
        let model = CodecModel::init(&cfg, 24000, 3);
        assert_eq!(model.frame_hop(), 4);
        for n in [1usize, 3, 4, 5, 399, 400, 401] {
            let wav = vec![0.1; n];
            let m = model.encode(&wav, 24000).unwrap();
            assert_eq!(m.frames(), n.div_ceil(4), "length {n}");
            assert_eq!(m.quantizers(), 2);
            assert!(m.codes.iter().all(|&c| (c as usize) < cfg.codebook_size));
        }
        assert!(model.encode(&[0.1], 16000).is_err(), "sample-rate mismatch");
        assert!(model.encode(&[], 24000).is_err(), "empty waveform");
    }

    #[test]
    fn decode_length_is_frames_times_hop_and_rejects_bad_codes() {
        let model = CodecModel::init(&tiny_cfg(), 24000, 4);
        let wav: Vec<f64> = (0..402).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
        let codes = model.encode(&wav, 24000).unwrap();
        let recon = model.decode(&codes).unwrap();
        assert_eq!(recon.len(), codes.frames() * 4);
        assert!((recon.len() as isize - wav.len() as isize).unsigned_abs() < 4);

        let mut bad = codes.clone();
        bad.codes[[0, 0]] = 999; // codebook_size is 16
        assert!(model.decode(&bad).is_err());
    }

    #[test]
    fn training_learns_and_is_deterministic() {
        // Tiny corpus, tiny model: loss must drop and reruns must agree.
        let dir = tempfile::tempdir().unwrap();
        let ccfg = crate::config::CorpusConfig {
            seed: 5,
            num_speakers: 2,
            dysarthric_speakers: 1,
            train_utts: 2,
            codecset_utts: 1,
            adapt_utts: 1,
            test_utts: 1,
            phonemes_min: 3,
            phonemes_max: 4,
            sample_rate: 24000,
        };
        let corpus = crate::corpus::build_corpus(&ccfg, dir.path()).unwrap();
        let cfg = tiny_cfg();
        let model = train_codec(&corpus, &cfg, 11).unwrap();
        assert_eq!(model.loss_curve.len(), cfg.steps);
        let head: f64 = model.loss_curve[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = model.loss_curve[cfg.steps - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss did not drop: {head} -> {tail}");
        assert!(model.validation_floor.is_finite());
        for book in &model.codebooks {
            assert!(
                book.row(0).iter().all(|&v| v == 0.0),
                "entry 0 must stay the zero vector through training"
            );
        }

        let again = train_codec(&corpus, &cfg, 11).unwrap();
        assert_eq!(model.loss_curve, again.loss_curve);
        for (a, b) in model.codebooks.iter().zip(&again.codebooks) {
            assert_eq!(a, b);
        }
        for (name, v) in model.store.iter() {
            assert_eq!(v, again.store.get(name), "{name} differs across reruns");
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_behavior() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = CodecModel::init(&tiny_cfg(), 24000, 6);
        model.validation_floor = 0.125;
        model.loss_curve = vec![3.0, 2.0, 1.0];
        let path = dir.path().join("codec.rvct");
        model.save(&path).unwrap();
        let loaded = CodecModel::load(&path).unwrap();
        assert_eq!(loaded.quantizers, model.quantizers);
        assert_eq!(loaded.strides, model.strides);
        assert_eq!(loaded.channels, model.channels);
        assert_eq!(loaded.validation_floor, 0.125);
        assert_eq!(loaded.loss_curve, model.loss_curve);
        let wav: Vec<f64> = (0..500).map(|i| (i as f64 * 0.03).sin() * 0.2).collect();
        let a = model.encode(&wav, 24000).unwrap();
        let b = loaded.encode(&wav, 24000).unwrap();
        assert_eq!(a.codes, b.codes);
        assert_eq!(model.decode(&a).unwrap(), loaded.decode(&b).unwrap());
    }
}
