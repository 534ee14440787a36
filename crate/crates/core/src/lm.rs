//! Hierarchical codec language model.
//!
//! Two models cooperate to produce a full code matrix from phoneme
//! posteriors and an acoustic prompt:
//!
//! * an autoregressive transformer decoder generates the first-quantizer
//!   code sequence (with an end-of-sequence symbol) conditioned on the
//!   posteriors and the prompt's first-quantizer codes;
//! * a bidirectional transformer fills quantizers 2..Q one stage at a time,
//!   each pass conditioned on all lower stages, the posteriors, and the
//!   full prompt matrix.
//!
//! Training builds the forward pass on the autodiff graph; generation runs a
//! plain-matrix replica of the same computation (incremental with a KV cache
//! for the AR model), which also serves as an independent check that the two
//! paths agree on sequence likelihoods.

use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::Rng;
use revoice_nn::{Adam, Binder, Graph, NodeId, ParamStore};

use crate::codec::CodecMatrix;
use crate::config::LmConfig;
use crate::container::Container;
use crate::error::{invalid_input, invalid_state, Result};
use crate::phonemes::VOCAB;
use crate::seeds;

const AR_KIND: &str = "lm-ar";
const NAR_KIND: &str = "lm-nar";
const LN_EPS: f64 = 1e-5;
/// Additive attention-mask value; drives masked scores to exactly zero
/// weight after the stabilized softmax.
const MASK_NEG: f64 = -1e9;
const GRAD_CLIP: f64 = 3.0;

/// Everything generation needs besides the models themselves.
pub struct ReconstructionRequest<'a> {
    /// Phoneme posteriors from the content encoder, T x 41.
    pub posteriors: &'a Array2<f64>,
    /// The matched normal speaker's code matrix (acoustic prompt).
    pub prompt: &'a CodecMatrix,
    /// 0 = greedy decoding.
    pub temperature: f64,
    pub top_k: usize,
    /// Cap on total first-stage length, prompt included.
    pub max_len: usize,
    pub seed: u64,
}

impl ReconstructionRequest<'_> {
    fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid_input("temperature must be finite and >= 0"));
        }
        if self.max_len < self.prompt.frames() {
            return Err(invalid_input(format!(
                "max length {} is shorter than the {}-frame prompt",
                self.max_len,
                self.prompt.frames()
            )));
        }
        if self.top_k == 0 {
            return Err(invalid_input("top_k must be at least 1"));
        }
        if self.posteriors.ncols() != VOCAB {
            return Err(invalid_input("posterior width does not match the phoneme inventory"));
        }
        if self.posteriors.nrows() == 0 {
            return Err(invalid_input("empty posteriors"));
        }
        Ok(())
    }
}

/// Mean-pool posterior rows by a fixed stride (last window may be partial);
/// shortens the conditioning segment without aligning it to code frames.
fn pool_posteriors(p: &Array2<f64>, stride: usize) -> Result<Array2<f64>> {
    if p.nrows() == 0 {
        return Err(invalid_input("empty posteriors"));
    }
    assert!(stride >= 1);
    let t = p.nrows();
    let rows = t.div_ceil(stride);
    let mut out = Array2::zeros((rows, p.ncols()));
    for r in 0..rows {
        let lo = r * stride;
        let hi = (lo + stride).min(t);
        let span = (hi - lo) as f64;
        for src in lo..hi {
            for c in 0..p.ncols() {
                out[[r, c]] += p[[src, c]] / span;
            }
        }
    }
    Ok(out)
}

/// Sinusoidal position code over absolute sequence positions.
fn sinusoidal(t: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, dim), |(pos, d)| {
        let pair = (d / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        if d % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Strictly-causal additive mask: position i may attend to j <= i.
fn causal_mask(s: usize) -> Array2<f64> {
    Array2::from_shape_fn((s, s), |(i, j)| if j <= i { 0.0 } else { MASK_NEG })
}

/// Shared geometry of both transformer stacks.
#[derive(Clone, Copy)]
struct Dims {
    dim: usize,
    layers: usize,
    heads: usize,
    ffn_mult: usize,
}

impl Dims {
    fn from_cfg(cfg: &LmConfig) -> Self {
        Dims {
            dim: cfg.dim,
            layers: cfg.layers,
            heads: cfg.heads,
            ffn_mult: cfg.ffn_mult,
        }
    }
}

/// Initialize one pre-norm transformer stack's parameters under `prefix`.
fn init_stack(store: &mut ParamStore, prefix: &str, d: Dims, rng: &mut impl Rng) {
    let head_dim = d.dim / d.heads;
    for l in 0..d.layers {
        store.init_const(&format!("{prefix}{l}.ln1.g"), 1, d.dim, 1.0);
        store.init_zeros(&format!("{prefix}{l}.ln1.b"), 1, d.dim);
        for h in 0..d.heads {
            store.init_xavier(&format!("{prefix}{l}.h{h}.wq"), d.dim, head_dim, rng);
            store.init_xavier(&format!("{prefix}{l}.h{h}.wk"), d.dim, head_dim, rng);
            store.init_xavier(&format!("{prefix}{l}.h{h}.wv"), d.dim, head_dim, rng);
        }
        store.init_xavier(&format!("{prefix}{l}.wo"), d.dim, d.dim, rng);
        store.init_const(&format!("{prefix}{l}.ln2.g"), 1, d.dim, 1.0);
        store.init_zeros(&format!("{prefix}{l}.ln2.b"), 1, d.dim);
        store.init_xavier(&format!("{prefix}{l}.ff1.w"), d.dim, d.dim * d.ffn_mult, rng);
        store.init_zeros(&format!("{prefix}{l}.ff1.b"), 1, d.dim * d.ffn_mult);
        store.init_xavier(&format!("{prefix}{l}.ff2.w"), d.dim * d.ffn_mult, d.dim, rng);
        store.init_zeros(&format!("{prefix}{l}.ff2.b"), 1, d.dim);
    }
    store.init_const(&format!("{prefix}.lnf.g"), 1, d.dim, 1.0);
    store.init_zeros(&format!("{prefix}.lnf.b"), 1, d.dim);
}

/// Pre-norm transformer stack on the autodiff graph, final layer norm
/// included. `mask` is added to every head's scaled scores.
#[allow(clippy::too_many_arguments)]
fn stack_graph(
    g: &mut Graph,
    binder: &mut Binder,
    store: &ParamStore,
    prefix: &str,
    mut x: NodeId,
    d: Dims,
    mask: Option<NodeId>,
) -> NodeId {
    let head_dim = d.dim / d.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    for l in 0..d.layers {
        let g1 = binder.bind(g, store, &format!("{prefix}{l}.ln1.g"));
        let b1 = binder.bind(g, store, &format!("{prefix}{l}.ln1.b"));
        let normed = g.layer_norm(x, g1, b1, LN_EPS);
        let mut heads = Vec::with_capacity(d.heads);
        for h in 0..d.heads {
            let wq = binder.bind(g, store, &format!("{prefix}{l}.h{h}.wq"));
            let wk = binder.bind(g, store, &format!("{prefix}{l}.h{h}.wk"));
            let wv = binder.bind(g, store, &format!("{prefix}{l}.h{h}.wv"));
            let q = g.matmul(normed, wq);
            let k = g.matmul(normed, wk);
            let v = g.matmul(normed, wv);
            let raw = g.matmul_nt(q, k);
            let mut scores = g.scale(raw, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let att = g.row_softmax(scores);
            heads.push(g.matmul(att, v));
        }
        let cat = g.concat_cols(&heads);
        let wo = binder.bind(g, store, &format!("{prefix}{l}.wo"));
        let mixed = g.matmul(cat, wo);
        x = g.add(x, mixed);

        let g2 = binder.bind(g, store, &format!("{prefix}{l}.ln2.g"));
        let b2 = binder.bind(g, store, &format!("{prefix}{l}.ln2.b"));
        let normed2 = g.layer_norm(x, g2, b2, LN_EPS);
        let f1w = binder.bind(g, store, &format!("{prefix}{l}.ff1.w"));
        let f1b = binder.bind(g, store, &format!("{prefix}{l}.ff1.b"));
        let f2w = binder.bind(g, store, &format!("{prefix}{l}.ff2.w"));
        let f2b = binder.bind(g, store, &format!("{prefix}{l}.ff2.b"));
        let a1 = g.matmul(normed2, f1w);
        let a1b = g.add_row(a1, f1b);
        let act = g.elu(a1b, 1.0);
        let a2 = g.matmul(act, f2w);
        let a2b = g.add_row(a2, f2b);
        x = g.add(x, a2b);
    }
    let gf = binder.bind(g, store, &format!("{prefix}.lnf.g"));
    let bf = binder.bind(g, store, &format!("{prefix}.lnf.b"));
    g.layer_norm(x, gf, bf, LN_EPS)
}

// ---- plain-matrix replicas of the graph numerics ----

fn plain_layer_norm(x: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain[[0, j]] + bias[[0, j]];
        }
    }
    out
}

fn plain_softmax_inplace(row: &mut Array1<f64>) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn plain_elu(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { v.exp() - 1.0 });
}

fn plain_log_softmax(row: &Array1<f64>) -> Array1<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    let lz = m + z.ln();
    row.mapv(|v| v - lz)
}

/// Whole-sequence plain forward of one stack, final layer norm included.
fn plain_stack(store: &ParamStore, prefix: &str, mut x: Array2<f64>, d: Dims, causal: bool) -> Array2<f64> {
    let s = x.nrows();
    let head_dim = d.dim / d.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    for l in 0..d.layers {
        let normed = plain_layer_norm(
            &x,
            store.get(&format!("{prefix}{l}.ln1.g")),
            store.get(&format!("{prefix}{l}.ln1.b")),
        );
        let mut cat = Array2::zeros((s, d.dim));
        for h in 0..d.heads {
            let q = normed.dot(store.get(&format!("{prefix}{l}.h{h}.wq")));
            let k = normed.dot(store.get(&format!("{prefix}{l}.h{h}.wk")));
            let v = normed.dot(store.get(&format!("{prefix}{l}.h{h}.wv")));
            let mut scores = q.dot(&k.t());
            scores.mapv_inplace(|v| v * scale);
            if causal {
                for i in 0..s {
                    for j in (i + 1)..s {
                        scores[[i, j]] += MASK_NEG;
                    }
                }
            }
            for i in 0..s {
                let mut row = scores.row(i).to_owned();
                plain_softmax_inplace(&mut row);
                let ctx = row.dot(&v);
                for j in 0..head_dim {
                    cat[[i, h * head_dim + j]] = ctx[j];
                }
            }
        }
        let mixed = cat.dot(store.get(&format!("{prefix}{l}.wo")));
        x += &mixed;

        let normed2 = plain_layer_norm(
            &x,
            store.get(&format!("{prefix}{l}.ln2.g")),
            store.get(&format!("{prefix}{l}.ln2.b")),
        );
        let mut a1 = normed2.dot(store.get(&format!("{prefix}{l}.ff1.w")));
        let f1b = store.get(&format!("{prefix}{l}.ff1.b"));
        for mut row in a1.rows_mut() {
            for (v, &b) in row.iter_mut().zip(f1b.row(0)) {
                *v += b;
            }
        }
        plain_elu(&mut a1);
        let mut a2 = a1.dot(store.get(&format!("{prefix}{l}.ff2.w")));
        let f2b = store.get(&format!("{prefix}{l}.ff2.b"));
        for mut row in a2.rows_mut() {
            for (v, &b) in row.iter_mut().zip(f2b.row(0)) {
                *v += b;
            }
        }
        x += &a2;
    }
    plain_layer_norm(
        &x,
        store.get(&format!("{prefix}.lnf.g")),
        store.get(&format!("{prefix}.lnf.b")),
    )
}

// ---- autoregressive first-stage model ----

pub struct ArModel {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub pool_stride: usize,
    /// Codebook size; the end-of-sequence symbol is this id.
    pub codebook: usize,
    pub store: ParamStore,
    pub trained: bool,
    pub loss_curve: Vec<f64>,
}

impl ArModel {
    pub fn init(cfg: &LmConfig, codebook: usize, seed: u64) -> Self {
        let mut rng = seeds::rng_for(seed, "lm-ar-init", 0);
        let d = Dims::from_cfg(cfg);
        let mut store = ParamStore::new();
        store.init_xavier("p_proj.w", VOCAB, d.dim, &mut rng);
        store.init_zeros("p_proj.b", 1, d.dim);
        store.init_normal("emb", codebook + 1, d.dim, 0.05, &mut rng);
        init_stack(&mut store, "dec", d, &mut rng);
        store.init_xavier("out.w", d.dim, codebook + 1, &mut rng);
        store.init_zeros("out.b", 1, codebook + 1);
        ArModel {
            dim: d.dim,
            layers: d.layers,
            heads: d.heads,
            ffn_mult: d.ffn_mult,
            pool_stride: cfg.pool_stride,
            codebook,
            store,
            trained: false,
            loss_curve: Vec::new(),
        }
    }

    /// The end-of-sequence output symbol (one past the last code id).
    pub fn eos(&self) -> usize {
        self.codebook
    }

    fn dims(&self) -> Dims {
        Dims {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
        }
    }

    /// Graph forward over [pooled posteriors | codes]: logits for every
    /// position (each position predicts the next symbol).
    fn logits_graph(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        pooled: &Array2<f64>,
        codes: &[u16],
    ) -> NodeId {
        let p_rows = pooled.nrows();
        let s = p_rows + codes.len();
        let p_leaf = g.leaf(pooled.clone());
        let pw = binder.bind(g, &self.store, "p_proj.w");
        let pb = binder.bind(g, &self.store, "p_proj.b");
        let proj = g.matmul(p_leaf, pw);
        let proj_b = g.add_row(proj, pb);
        let emb_table = binder.bind(g, &self.store, "emb");
        let ids: Vec<usize> = codes.iter().map(|&c| c as usize).collect();
        let x = if ids.is_empty() {
            proj_b
        } else {
            let code_rows = g.embedding(emb_table, &ids);
            g.concat_rows(&[proj_b, code_rows])
        };
        let pos = g.leaf(sinusoidal(s, self.dim));
        let x = g.add(x, pos);
        let mask = g.leaf(causal_mask(s));
        let h = stack_graph(g, binder, &self.store, "dec", x, self.dims(), Some(mask));
        let ow = binder.bind(g, &self.store, "out.w");
        let ob = binder.bind(g, &self.store, "out.b");
        let logits = g.matmul(h, ow);
        g.add_row(logits, ob)
    }

    /// Teacher-forced mean NLL of the continuation (prompt positions are
    /// excluded from the loss) plus the token count it averages over.
    pub fn loss(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        posteriors: &Array2<f64>,
        codes: &[u16],
        prompt_len: usize,
    ) -> Result<(NodeId, usize)> {
        if codes.is_empty() {
            return Err(invalid_input("empty code sequence"));
        }
        if codes.iter().any(|&c| (c as usize) >= self.codebook) {
            return Err(invalid_input("code id outside the codebook"));
        }
        if prompt_len == 0 || prompt_len >= codes.len() {
            return Err(invalid_input("prompt must be a proper nonempty prefix"));
        }
        let pooled = pool_posteriors(posteriors, self.pool_stride)?;
        if pooled.ncols() != VOCAB {
            return Err(invalid_input("posterior width does not match the phoneme inventory"));
        }
        let p_rows = pooled.nrows();
        let lp_node = self.logits_graph(g, binder, &pooled, codes);
        let lp = g.row_log_softmax(lp_node);
        // Position p_rows - 1 + t predicts symbol t (code t, or EOS at t = T).
        let mut pairs = Vec::new();
        for t in prompt_len..=codes.len() {
            let class = if t == codes.len() { self.eos() } else { codes[t] as usize };
            pairs.push((p_rows - 1 + t, class));
        }
        let count = pairs.len();
        Ok((g.nll_mean(lp, &pairs), count))
    }

    /// Incremental plain-matrix teacher-forced total NLL over the same
    /// positions as `loss`; the independent per-step accumulation path.
    pub fn sequence_nll(
        &self,
        posteriors: &Array2<f64>,
        codes: &[u16],
        prompt_len: usize,
    ) -> Result<f64> {
        if prompt_len == 0 || prompt_len >= codes.len() {
            return Err(invalid_input("prompt must be a proper nonempty prefix"));
        }
        let pooled = pool_posteriors(posteriors, self.pool_stride)?;
        let p_rows = pooled.nrows();
        let mut dec = ArDecoder::new(self, p_rows + codes.len());
        let proj = self.project_posteriors(&pooled);
        let pos = sinusoidal(p_rows + codes.len(), self.dim);
        let mut logits = Array1::zeros(self.codebook + 1);
        for r in 0..p_rows {
            let row = &proj.row(r).to_owned() + &pos.row(r);
            logits = dec.push(row);
        }
        let mut total = 0.0;
        let emb = self.store.get("emb");
        for t in 0..=codes.len() {
            let class = if t == codes.len() { self.eos() } else { codes[t] as usize };
            if t >= prompt_len {
                let lp = plain_log_softmax(&logits);
                total -= lp[class];
            }
            if t < codes.len() {
                let row = &emb.row(codes[t] as usize).to_owned() + &pos.row(p_rows + t);
                logits = dec.push(row);
            }
        }
        Ok(total)
    }

    fn project_posteriors(&self, pooled: &Array2<f64>) -> Array2<f64> {
        let mut proj = pooled.dot(self.store.get("p_proj.w"));
        let b = self.store.get("p_proj.b");
        for mut row in proj.rows_mut() {
            for (v, &bias) in row.iter_mut().zip(b.row(0)) {
                *v += bias;
            }
        }
        proj
    }

    /// Whole-sequence plain logits; used by invariants that probe positions.
    pub fn plain_logits(&self, posteriors: &Array2<f64>, codes: &[u16]) -> Result<Array2<f64>> {
        let pooled = pool_posteriors(posteriors, self.pool_stride)?;
        let p_rows = pooled.nrows();
        let s = p_rows + codes.len();
        let mut x = Array2::zeros((s, self.dim));
        let proj = self.project_posteriors(&pooled);
        for r in 0..p_rows {
            x.row_mut(r).assign(&proj.row(r));
        }
        let emb = self.store.get("emb");
        for (i, &c) in codes.iter().enumerate() {
            x.row_mut(p_rows + i).assign(&emb.row(c as usize));
        }
        x += &sinusoidal(s, self.dim);
        let h = plain_stack(&self.store, "dec", x, self.dims(), true);
        let mut logits = h.dot(self.store.get("out.w"));
        let b = self.store.get("out.b");
        for mut row in logits.rows_mut() {
            for (v, &bias) in row.iter_mut().zip(b.row(0)) {
                *v += bias;
            }
        }
        Ok(logits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(AR_KIND);
        c.set_int("dim", self.dim as i64);
        c.set_int("layers", self.layers as i64);
        c.set_int("heads", self.heads as i64);
        c.set_int("ffn_mult", self.ffn_mult as i64);
        c.set_int("pool_stride", self.pool_stride as i64);
        c.set_int("codebook", self.codebook as i64);
        c.set_int("trained", i64::from(self.trained));
        c.put_params(&self.store);
        if !self.loss_curve.is_empty() {
            let curve = Array2::from_shape_vec((self.loss_curve.len(), 1), self.loss_curve.clone())
                .unwrap();
            c.tensors.insert("loss_curve".into(), curve);
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path, AR_KIND)?;
        let mut store = ParamStore::new();
        for (name, v) in &c.tensors {
            if name == "loss_curve" {
                continue;
            }
            store.insert(name, v.clone());
        }
        Ok(ArModel {
            dim: c.int("dim")? as usize,
            layers: c.int("layers")? as usize,
            heads: c.int("heads")? as usize,
            ffn_mult: c.int("ffn_mult")? as usize,
            pool_stride: c.int("pool_stride")? as usize,
            codebook: c.int("codebook")? as usize,
            store,
            trained: c.int("trained")? != 0,
            loss_curve: c
                .tensors
                .get("loss_curve")
                .map(|t| t.column(0).to_vec())
                .unwrap_or_default(),
        })
    }
}

/// Incremental causal decoder over the AR parameters with per-layer,
/// per-head key/value caches. Numerically replicates the graph forward.
struct ArDecoder<'a> {
    m: &'a ArModel,
    keys: Vec<Vec<Array2<f64>>>,
    vals: Vec<Vec<Array2<f64>>>,
    t: usize,
}

impl<'a> ArDecoder<'a> {
    fn new(m: &'a ArModel, capacity: usize) -> Self {
        let head_dim = m.dim / m.heads;
        let keys = (0..m.layers)
            .map(|_| (0..m.heads).map(|_| Array2::zeros((capacity, head_dim))).collect())
            .collect();
        let vals = (0..m.layers)
            .map(|_| (0..m.heads).map(|_| Array2::zeros((capacity, head_dim))).collect())
            .collect();
        ArDecoder { m, keys, vals, t: 0 }
    }

    /// Feed one embedded-and-positioned input row; returns that position's
    /// output logits.
    fn push(&mut self, row: Array1<f64>) -> Array1<f64> {
        let m = self.m;
        let head_dim = m.dim / m.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let store = &m.store;
        let mut x = row;
        for l in 0..m.layers {
            let n = ln_row(
                &x,
                store.get(&format!("dec{l}.ln1.g")),
                store.get(&format!("dec{l}.ln1.b")),
            );
            let mut cat = Array1::zeros(m.dim);
            for h in 0..m.heads {
                let q = n.dot(store.get(&format!("dec{l}.h{h}.wq")));
                let k = n.dot(store.get(&format!("dec{l}.h{h}.wk")));
                let v = n.dot(store.get(&format!("dec{l}.h{h}.wv")));
                self.keys[l][h].row_mut(self.t).assign(&k);
                self.vals[l][h].row_mut(self.t).assign(&v);
                let kv = self.keys[l][h].slice(s![..=self.t, ..]);
                let mut scores = kv.dot(&q);
                scores.mapv_inplace(|v| v * scale);
                plain_softmax_inplace(&mut scores);
                let vv = self.vals[l][h].slice(s![..=self.t, ..]);
                let ctx = scores.dot(&vv);
                for j in 0..head_dim {
                    cat[h * head_dim + j] = ctx[j];
                }
            }
            x = &x + &cat.dot(store.get(&format!("dec{l}.wo")));
            let n2 = ln_row(
                &x,
                store.get(&format!("dec{l}.ln2.g")),
                store.get(&format!("dec{l}.ln2.b")),
            );
            let mut a1 = n2.dot(store.get(&format!("dec{l}.ff1.w")));
            let f1b = store.get(&format!("dec{l}.ff1.b"));
            for (v, &b) in a1.iter_mut().zip(f1b.row(0)) {
                *v += b;
            }
            a1.mapv_inplace(|v| if v > 0.0 { v } else { v.exp() - 1.0 });
            let mut a2 = a1.dot(store.get(&format!("dec{l}.ff2.w")));
            let f2b = store.get(&format!("dec{l}.ff2.b"));
            for (v, &b) in a2.iter_mut().zip(f2b.row(0)) {
                *v += b;
            }
            x = &x + &a2;
        }
        let fin = ln_row(&x, store.get("dec.lnf.g"), store.get("dec.lnf.b"));
        let mut logits = fin.dot(store.get("out.w"));
        let ob = store.get("out.b");
        for (v, &b) in logits.iter_mut().zip(ob.row(0)) {
            *v += b;
        }
        self.t += 1;
        logits
    }
}

fn ln_row(x: &Array1<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> Array1<f64> {
    let d = x.len() as f64;
    let mean = x.sum() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    Array1::from_shape_fn(x.len(), |j| (x[j] - mean) * inv * gain[[0, j]] + bias[[0, j]])
}

/// Sample one symbol from logits: temperature 0 is argmax (lowest index on
/// ties); otherwise softmax over the top-k logits at the given temperature.
fn sample_token(logits: &Array1<f64>, temperature: f64, top_k: usize, rng: &mut impl Rng) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for i in 1..logits.len() {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    order.truncate(top_k.min(logits.len()));
    let mut probs: Array1<f64> = Array1::from_iter(order.iter().map(|&i| logits[i] / temperature));
    plain_softmax_inplace(&mut probs);
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for (slot, &idx) in order.iter().enumerate() {
        acc += probs[slot];
        if r < acc {
            return idx;
        }
    }
    *order.last().unwrap()
}

/// Train the AR model on (posteriors, code matrix) pairs from normal
/// utterances. Each step teacher-forces one utterance with a random prefix
/// of its own first-quantizer codes as the prompt.
pub fn train_ar(
    pairs: &[(Array2<f64>, CodecMatrix)],
    cfg: &LmConfig,
    codebook: usize,
    seed: u64,
) -> Result<ArModel> {
    if pairs.is_empty() {
        return Err(invalid_input("no training pairs"));
    }
    for (p, c) in pairs {
        if c.frames() < 2 {
            return Err(invalid_input("code sequence too short to split into prompt and target"));
        }
        if p.nrows() == 0 || p.ncols() != VOCAB {
            return Err(invalid_input("bad posterior shape in training pair"));
        }
    }
    let mut model = ArModel::init(cfg, codebook, seed);
    let mut rng = seeds::rng_for(seed, "lm-ar-train", 0);
    let mut adam = Adam::new(cfg.lr);
    for _ in 0..cfg.ar_steps {
        let (p, c) = &pairs[rng.gen_range(0..pairs.len())];
        let t = c.frames();
        let codes: Vec<u16> = c.codes.column(0).to_vec();
        let k_max = ((t as f64 * cfg.prompt_frac_max) as usize).clamp(1, t - 1);
        let k = rng.gen_range(1..=k_max);
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let (loss, _) = model.loss(&mut g, &mut binder, p, &codes, k)?;
        model.loss_curve.push(g.val(loss)[[0, 0]]);
        let mut grads = g.backward(loss);
        let grad_list = binder.collect_grads(&mut grads);
        adam.step(&mut model.store, grad_list, Some(GRAD_CLIP));
    }
    model.trained = true;
    Ok(model)
}

/// Generate the first-quantizer continuation after the prompt. Returns the
/// continuation codes (never containing the end symbol) and whether the
/// length cap cut generation off before the end symbol appeared.
pub fn generate_stage1(ar: &ArModel, req: &ReconstructionRequest) -> Result<(Vec<u16>, bool)> {
    if !ar.trained {
        return Err(invalid_state("first-stage model has not been trained"));
    }
    req.validate()?;
    if req
        .prompt
        .codes
        .column(0)
        .iter()
        .any(|&c| (c as usize) >= ar.codebook)
    {
        return Err(invalid_input("prompt code id outside the codebook"));
    }
    let pooled = pool_posteriors(req.posteriors, ar.pool_stride)?;
    let p_rows = pooled.nrows();
    let prompt_len = req.prompt.frames();
    let budget = req.max_len - prompt_len;
    if budget == 0 {
        return Ok((Vec::new(), true));
    }
    let mut dec = ArDecoder::new(ar, p_rows + req.max_len);
    let proj = ar.project_posteriors(&pooled);
    let pos = sinusoidal(p_rows + req.max_len, ar.dim);
    let mut logits = Array1::zeros(ar.codebook + 1);
    for r in 0..p_rows {
        let row = &proj.row(r).to_owned() + &pos.row(r);
        logits = dec.push(row);
    }
    let emb = ar.store.get("emb");
    for (i, &c) in req.prompt.codes.column(0).iter().enumerate() {
        let row = &emb.row(c as usize).to_owned() + &pos.row(p_rows + i);
        logits = dec.push(row);
    }
    let mut rng = seeds::rng_for(req.seed, "stage1-sample", 0);
    let mut out: Vec<u16> = Vec::new();
    let mut truncated = true;
    loop {
        let tok = sample_token(&logits, req.temperature, req.top_k, &mut rng);
        if tok == ar.eos() {
            truncated = false;
            break;
        }
        out.push(tok as u16);
        if out.len() == budget {
            break;
        }
        let idx = prompt_len + out.len() - 1;
        let row = &emb.row(tok).to_owned() + &pos.row(p_rows + idx);
        logits = dec.push(row);
    }
    Ok((out, truncated))
}

// ---- non-autoregressive upper-stage model ----

pub struct NarModel {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub pool_stride: usize,
    pub codebook: usize,
    pub quantizers: usize,
    pub store: ParamStore,
    pub trained: bool,
    pub loss_curve: Vec<f64>,
}

impl NarModel {
    pub fn init(cfg: &LmConfig, codebook: usize, quantizers: usize, seed: u64) -> Self {
        assert!(quantizers >= 2);
        let mut rng = seeds::rng_for(seed, "lm-nar-init", 0);
        let d = Dims::from_cfg(cfg);
        let mut store = ParamStore::new();
        store.init_xavier("p_proj.w", VOCAB, d.dim, &mut rng);
        store.init_zeros("p_proj.b", 1, d.dim);
        for q in 1..=quantizers {
            store.init_normal(&format!("emb.q{q}"), codebook, d.dim, 0.05, &mut rng);
        }
        store.init_normal("stage.emb", quantizers - 1, d.dim, 0.05, &mut rng);
        init_stack(&mut store, "enc", d, &mut rng);
        store.init_xavier("out.w", d.dim, codebook, &mut rng);
        store.init_zeros("out.b", 1, codebook);
        NarModel {
            dim: d.dim,
            layers: d.layers,
            heads: d.heads,
            ffn_mult: d.ffn_mult,
            pool_stride: cfg.pool_stride,
            codebook,
            quantizers,
            store,
            trained: false,
            loss_curve: Vec::new(),
        }
    }

    fn dims(&self) -> Dims {
        Dims {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
        }
    }

    fn check_stage(&self, stage: usize) -> Result<()> {
        if stage < 2 || stage > self.quantizers {
            return Err(invalid_input(format!(
                "stage {stage} outside the refinable range 2..={}",
                self.quantizers
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy of stage-`stage` codes over the target region
    /// (frames `split..`), conditioned on ground-truth lower stages, the
    /// full-depth prompt region (frames `..split`), and the posteriors.
    pub fn loss(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        posteriors: &Array2<f64>,
        codes: &Array2<u16>,
        split: usize,
        stage: usize,
    ) -> Result<(NodeId, usize)> {
        self.check_stage(stage)?;
        if codes.ncols() != self.quantizers {
            return Err(invalid_input("code matrix width does not match the model"));
        }
        if codes.iter().any(|&c| (c as usize) >= self.codebook) {
            return Err(invalid_input("code id outside the codebook"));
        }
        let t = codes.nrows();
        if split == 0 || split >= t {
            return Err(invalid_input("split must leave both a prompt and a target region"));
        }
        let pooled = pool_posteriors(posteriors, self.pool_stride)?;
        if pooled.ncols() != VOCAB {
            return Err(invalid_input("posterior width does not match the phoneme inventory"));
        }
        let p_rows = pooled.nrows();
        let p_leaf = g.leaf(pooled);
        let pw = binder.bind(g, &self.store, "p_proj.w");
        let pb = binder.bind(g, &self.store, "p_proj.b");
        let proj = g.matmul(p_leaf, pw);
        let proj_b = g.add_row(proj, pb);

        // Prompt region: sum of all quantizers' embeddings.
        let mut prompt_sum: Option<NodeId> = None;
        for q in 1..=self.quantizers {
            let table = binder.bind(g, &self.store, &format!("emb.q{q}"));
            let ids: Vec<usize> = (0..split).map(|r| codes[[r, q - 1]] as usize).collect();
            let rows = g.embedding(table, &ids);
            prompt_sum = Some(match prompt_sum {
                None => rows,
                Some(acc) => g.add(acc, rows),
            });
        }
        // Target region: sum of stages strictly below the predicted one.
        let mut target_sum: Option<NodeId> = None;
        for q in 1..stage {
            let table = binder.bind(g, &self.store, &format!("emb.q{q}"));
            let ids: Vec<usize> = (split..t).map(|r| codes[[r, q - 1]] as usize).collect();
            let rows = g.embedding(table, &ids);
            target_sum = Some(match target_sum {
                None => rows,
                Some(acc) => g.add(acc, rows),
            });
        }
        let x0 = g.concat_rows(&[proj_b, prompt_sum.unwrap(), target_sum.unwrap()]);
        let stage_table = binder.bind(g, &self.store, "stage.emb");
        let stage_row = g.embedding(stage_table, &[stage - 2]);
        let x1 = g.add_row(x0, stage_row);
        let pos = g.leaf(sinusoidal(p_rows + t, self.dim));
        let x = g.add(x1, pos);
        let h = stack_graph(g, binder, &self.store, "enc", x, self.dims(), None);
        let ow = binder.bind(g, &self.store, "out.w");
        let ob = binder.bind(g, &self.store, "out.b");
        let logits = g.matmul(h, ow);
        let shifted = g.add_row(logits, ob);
        let lp = g.row_log_softmax(shifted);
        let pairs: Vec<(usize, usize)> = (split..t)
            .map(|r| (p_rows + r, codes[[r, stage - 1]] as usize))
            .collect();
        let count = pairs.len();
        Ok((g.nll_mean(lp, &pairs), count))
    }

    /// Pool the frame-rate posteriors and project them into the model width;
    /// the conditioning block `stage_logits` expects as its first argument.
    pub fn pooled_projection(&self, posteriors: &Array2<f64>) -> Result<Array2<f64>> {
        let pooled = pool_posteriors(posteriors, self.pool_stride)?;
        let mut proj = pooled.dot(self.store.get("p_proj.w"));
        let b = self.store.get("p_proj.b");
        for mut row in proj.rows_mut() {
            for (v, &bias) in row.iter_mut().zip(b.row(0)) {
                *v += bias;
            }
        }
        Ok(proj)
    }

    /// Plain-matrix logits for one stage at generation time: prompt region
    /// embeds the full-depth prompt matrix, target region embeds the already
    /// generated stages (columns `..stage-1` of `partial`). Public so
    /// invariant checks can probe which inputs a stage's output depends on.
    pub fn stage_logits(
        &self,
        pooled_proj: &Array2<f64>,
        prompt: &Array2<u16>,
        partial: &Array2<u16>,
        stage: usize,
    ) -> Array2<f64> {
        let p_rows = pooled_proj.nrows();
        let lp = prompt.nrows();
        let l = partial.nrows();
        let s = p_rows + lp + l;
        let mut x = Array2::zeros((s, self.dim));
        for r in 0..p_rows {
            x.row_mut(r).assign(&pooled_proj.row(r));
        }
        for q in 1..=self.quantizers {
            let table = self.store.get(&format!("emb.q{q}"));
            for r in 0..lp {
                let id = prompt[[r, q - 1]] as usize;
                for j in 0..self.dim {
                    x[[p_rows + r, j]] += table[[id, j]];
                }
            }
        }
        for q in 1..stage {
            let table = self.store.get(&format!("emb.q{q}"));
            for r in 0..l {
                let id = partial[[r, q - 1]] as usize;
                for j in 0..self.dim {
                    x[[p_rows + lp + r, j]] += table[[id, j]];
                }
            }
        }
        let stage_emb = self.store.get("stage.emb");
        for mut row in x.rows_mut() {
            for j in 0..self.dim {
                row[j] += stage_emb[[stage - 2, j]];
            }
        }
        x += &sinusoidal(s, self.dim);
        let h = plain_stack(&self.store, "enc", x, self.dims(), false);
        let mut logits = h.dot(self.store.get("out.w"));
        let b = self.store.get("out.b");
        for mut row in logits.rows_mut() {
            for (v, &bias) in row.iter_mut().zip(b.row(0)) {
                *v += bias;
            }
        }
        logits
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(NAR_KIND);
        c.set_int("dim", self.dim as i64);
        c.set_int("layers", self.layers as i64);
        c.set_int("heads", self.heads as i64);
        c.set_int("ffn_mult", self.ffn_mult as i64);
        c.set_int("pool_stride", self.pool_stride as i64);
        c.set_int("codebook", self.codebook as i64);
        c.set_int("quantizers", self.quantizers as i64);
        c.set_int("trained", i64::from(self.trained));
        c.put_params(&self.store);
        if !self.loss_curve.is_empty() {
            let curve = Array2::from_shape_vec((self.loss_curve.len(), 1), self.loss_curve.clone())
                .unwrap();
            c.tensors.insert("loss_curve".into(), curve);
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path, NAR_KIND)?;
        let mut store = ParamStore::new();
        for (name, v) in &c.tensors {
            if name == "loss_curve" {
                continue;
            }
            store.insert(name, v.clone());
        }
        Ok(NarModel {
            dim: c.int("dim")? as usize,
            layers: c.int("layers")? as usize,
            heads: c.int("heads")? as usize,
            ffn_mult: c.int("ffn_mult")? as usize,
            pool_stride: c.int("pool_stride")? as usize,
            codebook: c.int("codebook")? as usize,
            quantizers: c.int("quantizers")? as usize,
            store,
            trained: c.int("trained")? != 0,
            loss_curve: c
                .tensors
                .get("loss_curve")
                .map(|t| t.column(0).to_vec())
                .unwrap_or_default(),
        })
    }
}

/// Train the upper-stage model; each step picks one utterance, a random
/// prompt/target split, and a uniform stage in 2..=Q.
pub fn train_nar(
    pairs: &[(Array2<f64>, CodecMatrix)],
    cfg: &LmConfig,
    codebook: usize,
    quantizers: usize,
    seed: u64,
) -> Result<NarModel> {
    if pairs.is_empty() {
        return Err(invalid_input("no training pairs"));
    }
    for (p, c) in pairs {
        if c.frames() < 2 {
            return Err(invalid_input("code sequence too short to split into prompt and target"));
        }
        if c.quantizers() != quantizers {
            return Err(invalid_input("code matrix width does not match the configured depth"));
        }
        if p.nrows() == 0 || p.ncols() != VOCAB {
            return Err(invalid_input("bad posterior shape in training pair"));
        }
    }
    let mut model = NarModel::init(cfg, codebook, quantizers, seed);
    let mut rng = seeds::rng_for(seed, "lm-nar-train", 0);
    let mut adam = Adam::new(cfg.lr);
    for _ in 0..cfg.nar_steps {
        let (p, c) = &pairs[rng.gen_range(0..pairs.len())];
        let t = c.frames();
        let k_max = ((t as f64 * cfg.prompt_frac_max) as usize).clamp(1, t - 1);
        let split = rng.gen_range(1..=k_max);
        let stage = rng.gen_range(2..=quantizers);
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let (loss, _) = model.loss(&mut g, &mut binder, p, &c.codes, split, stage)?;
        model.loss_curve.push(g.val(loss)[[0, 0]]);
        let mut grads = g.backward(loss);
        let grad_list = binder.collect_grads(&mut grads);
        adam.step(&mut model.store, grad_list, Some(GRAD_CLIP));
    }
    model.trained = true;
    Ok(model)
}

/// Fill stages 2..=Q by argmax, one bidirectional pass per stage, each
/// conditioned on everything generated so far. The result prepends the given
/// first-stage codes unchanged; its length equals theirs.
pub fn generate_upper_stages(
    nar: &NarModel,
    stage1: &[u16],
    req: &ReconstructionRequest,
) -> Result<CodecMatrix> {
    if !nar.trained {
        return Err(invalid_state("upper-stage model has not been trained"));
    }
    req.validate()?;
    if stage1.is_empty() {
        return Err(invalid_input("empty first-stage sequence"));
    }
    if stage1.iter().any(|&c| (c as usize) >= nar.codebook) {
        return Err(invalid_input("first-stage code id outside the codebook"));
    }
    if req.prompt.quantizers() != nar.quantizers {
        return Err(invalid_input("prompt depth does not match the model"));
    }
    if req.prompt.codes.iter().any(|&c| (c as usize) >= nar.codebook) {
        return Err(invalid_input("prompt code id outside the codebook"));
    }
    let proj = nar.pooled_projection(req.posteriors)?;
    let l = stage1.len();
    let mut codes = Array2::<u16>::zeros((l, nar.quantizers));
    for (r, &c) in stage1.iter().enumerate() {
        codes[[r, 0]] = c;
    }
    let p_rows = proj.nrows();
    let lp = req.prompt.frames();
    for stage in 2..=nar.quantizers {
        let logits = nar.stage_logits(&proj, &req.prompt.codes, &codes, stage);
        for r in 0..l {
            let row = logits.row(p_rows + lp + r);
            let mut best = 0;
            for i in 1..nar.codebook {
                if row[i] > row[best] {
                    best = i;
                }
            }
            codes[[r, stage - 1]] = best as u16;
        }
    }
    Ok(CodecMatrix {
        codes,
        frame_hop: req.prompt.frame_hop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> LmConfig {
        LmConfig {
            dim: 32,
            layers: 2,
            heads: 2,
            ffn_mult: 2,
            ar_steps: 1000,
            nar_steps: 1000,
            lr: 3e-3,
            pool_stride: 2,
            prompt_frac_max: 0.5,
            temperature: 0.8,
            top_k: 5,
            max_len_factor: 2.0,
        }
    }

    const BOOK: usize = 24;
    const QS: usize = 4;

    /// Random but fixed posterior matrix with stochastic rows.
    fn fake_posteriors(rng: &mut impl Rng, t: usize) -> Array2<f64> {
        let mut p = Array2::from_shape_simple_fn((t, VOCAB), || rng.gen::<f64>());
        for mut row in p.rows_mut() {
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        p
    }

    fn fake_codes(rng: &mut impl Rng, t: usize, q: usize) -> CodecMatrix {
        CodecMatrix {
            codes: Array2::from_shape_simple_fn((t, q), || rng.gen_range(0..BOOK as u16)),
            frame_hop: 320,
        }
    }

    #[test]
    fn ar_output_rows_are_distributions() {
        let cfg = tiny_cfg();
        let model = ArModel::init(&cfg, BOOK, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = fake_posteriors(&mut rng, 9);
        let codes: Vec<u16> = (0..7).map(|_| rng.gen_range(0..BOOK as u16)).collect();
        let logits = model.plain_logits(&p, &codes).unwrap();
        assert_eq!(logits.ncols(), BOOK + 1);
        for row in logits.rows() {
            let mut r = row.to_owned();
            plain_softmax_inplace(&mut r);
            let s: f64 = r.sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn graph_nll_matches_incremental_decoder() {
        let cfg = tiny_cfg();
        let model = ArModel::init(&cfg, BOOK, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = fake_posteriors(&mut rng, 9);
        let codes: Vec<u16> = (0..11).map(|_| rng.gen_range(0..BOOK as u16)).collect();
        let k = 3;
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let (loss, count) = model.loss(&mut g, &mut binder, &p, &codes, k).unwrap();
        let graph_total = g.val(loss)[[0, 0]] * count as f64;
        let oracle_total = model.sequence_nll(&p, &codes, k).unwrap();
        assert!(
            (graph_total - oracle_total).abs() < 1e-5,
            "graph {graph_total} vs incremental {oracle_total}"
        );
        assert_eq!(count, codes.len() - k + 1);
    }

    #[test]
    fn perturbing_a_token_leaves_earlier_logits_unchanged() {
        let cfg = tiny_cfg();
        let model = ArModel::init(&cfg, BOOK, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = fake_posteriors(&mut rng, 8);
        let codes: Vec<u16> = (0..10).map(|_| rng.gen_range(0..BOOK as u16)).collect();
        let base = model.plain_logits(&p, &codes).unwrap();
        let mut changed = codes.clone();
        let t = 5;
        changed[t] = (changed[t] + 1) % BOOK as u16;
        let after = model.plain_logits(&p, &changed).unwrap();
        let p_rows = p.nrows().div_ceil(model.pool_stride);
        let boundary = p_rows + t;
        for r in 0..boundary {
            for c in 0..base.ncols() {
                assert!(
                    (base[[r, c]] - after[[r, c]]).abs() < 1e-12,
                    "position {r} changed"
                );
            }
        }
        // The perturbed position itself must differ somewhere downstream.
        let mut any = false;
        for r in boundary..base.nrows() {
            for c in 0..base.ncols() {
                if (base[[r, c]] - after[[r, c]]).abs() > 1e-9 {
                    any = true;
                }
            }
        }
        assert!(any, "perturbation had no downstream effect");
    }

    #[test]
    fn ar_overfits_one_utterance_and_replays_it() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = fake_posteriors(&mut rng, 8);
        let c = fake_codes(&mut rng, 16, 1);
        let pairs = vec![(p.clone(), c.clone())];
        let model = train_ar(&pairs, &cfg, BOOK, 11).unwrap();
        assert!(model.trained);
        assert_eq!(model.loss_curve.len(), cfg.ar_steps);
        let head: f64 = model.loss_curve[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = model.loss_curve[cfg.ar_steps - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head * 0.2, "loss did not collapse: {head} -> {tail}");

        // Greedy decode from this utterance's own prefix reproduces the rest,
        // ending exactly at the end symbol (no truncation).
        let k = 8;
        let prompt = CodecMatrix {
            codes: c.codes.slice(s![..k, ..]).to_owned(),
            frame_hop: c.frame_hop,
        };
        let req = ReconstructionRequest {
            posteriors: &p,
            prompt: &prompt,
            temperature: 0.0,
            top_k: 1,
            max_len: c.frames() + 10,
            seed: 0,
        };
        let (cont, truncated) = generate_stage1(&model, &req).unwrap();
        assert!(!truncated);
        let expect: Vec<u16> = c.codes.column(0).iter().copied().skip(k).collect();
        assert_eq!(cont, expect);
        assert!(cont.iter().all(|&t| (t as usize) < BOOK));

        // Greedy decoding is deterministic; seeded sampling is reproducible.
        let (again, _) = generate_stage1(&model, &req).unwrap();
        assert_eq!(cont, again);
        let sampled_req = ReconstructionRequest {
            temperature: 0.8,
            top_k: 5,
            seed: 42,
            ..req
        };
        let (s1, _) = generate_stage1(&model, &sampled_req).unwrap();
        let (s2, _) = generate_stage1(&model, &sampled_req).unwrap();
        assert_eq!(s1, s2);
        assert!(s1.iter().all(|&t| (t as usize) < BOOK));
    }

    #[test]
    fn ar_rejects_bad_inputs() {
        let cfg = tiny_cfg();
        let model = ArModel::init(&cfg, BOOK, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = fake_posteriors(&mut rng, 6);
        assert!(train_ar(&[], &cfg, BOOK, 1).is_err());
        let mut g = Graph::new();
        let mut b = Binder::new();
        // Out-of-book code.
        assert!(model.loss(&mut g, &mut b, &p, &[1, BOOK as u16], 1).is_err());
        // Degenerate prompt splits.
        let codes = [1u16, 2, 3];
        let mut g2 = Graph::new();
        let mut b2 = Binder::new();
        assert!(model.loss(&mut g2, &mut b2, &p, &codes, 0).is_err());
        let mut g3 = Graph::new();
        let mut b3 = Binder::new();
        assert!(model.loss(&mut g3, &mut b3, &p, &codes, 3).is_err());
        // Untrained generation and invalid request parameters.
        let prompt = fake_codes(&mut rng, 4, 1);
        let req = ReconstructionRequest {
            posteriors: &p,
            prompt: &prompt,
            temperature: 0.0,
            top_k: 1,
            max_len: 10,
            seed: 0,
        };
        assert!(generate_stage1(&model, &req).is_err());
        let mut trained = ArModel::init(&cfg, BOOK, 13);
        trained.trained = true;
        let bad_temp = ReconstructionRequest {
            temperature: -1.0,
            ..req
        };
        assert!(generate_stage1(&trained, &bad_temp).is_err());
        let bad_len = ReconstructionRequest { max_len: 2, ..req };
        assert!(generate_stage1(&trained, &bad_len).is_err());
    }

    #[test]
    fn nar_overfits_and_recovers_upper_stages_exactly() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = fake_posteriors(&mut rng, 8);
        let c = fake_codes(&mut rng, 14, QS);
        let pairs = vec![(p.clone(), c.clone())];
        let model = train_nar(&pairs, &cfg, BOOK, QS, 17).unwrap();
        assert!(model.trained);

        // Given the true first stage and a prefix prompt, every upper stage
        // comes back exactly; output geometry follows the first stage.
        let k = 7;
        let prompt = CodecMatrix {
            codes: c.codes.slice(s![..k, ..]).to_owned(),
            frame_hop: c.frame_hop,
        };
        let stage1: Vec<u16> = c.codes.column(0).iter().copied().skip(k).collect();
        let req = ReconstructionRequest {
            posteriors: &p,
            prompt: &prompt,
            temperature: 0.0,
            top_k: 1,
            max_len: c.frames() + 10,
            seed: 0,
        };
        let out = generate_upper_stages(&model, &stage1, &req).unwrap();
        assert_eq!(out.quantizers(), QS);
        assert_eq!(out.frames(), stage1.len());
        assert_eq!(out.frame_hop, c.frame_hop);
        // First column passes through untouched.
        for (r, &s1) in stage1.iter().enumerate() {
            assert_eq!(out.codes[[r, 0]], s1);
        }
        for r in 0..stage1.len() {
            for q in 1..QS {
                assert_eq!(
                    out.codes[[r, q]],
                    c.codes[[k + r, q]],
                    "stage {} frame {r} not recovered",
                    q + 1
                );
            }
        }
        // Deterministic.
        let again = generate_upper_stages(&model, &stage1, &req).unwrap();
        assert_eq!(out.codes, again.codes);

        // Conditioning matters: scrambling the lower-stage inputs raises the
        // trained model's stage loss.
        let mut g = Graph::new();
        let mut b = Binder::new();
        let (loss, _) = model.loss(&mut g, &mut b, &p, &c.codes, k, 3).unwrap();
        let clean = g.val(loss)[[0, 0]];
        let mut scrambled = c.codes.clone();
        let t = scrambled.nrows();
        for r in 0..t {
            for q in 0..2 {
                scrambled[[r, q]] = c.codes[[(r * 5 + 3) % t, q]];
            }
        }
        let mut g2 = Graph::new();
        let mut b2 = Binder::new();
        let (loss2, _) = model.loss(&mut g2, &mut b2, &p, &scrambled, k, 3).unwrap();
        let messy = g2.val(loss2)[[0, 0]];
        assert!(
            clean < messy,
            "scrambled conditioning did not hurt: {clean} vs {messy}"
        );
    }

    #[test]
    fn nar_stage_output_ignores_higher_stage_inputs() {
        let cfg = tiny_cfg();
        let model = NarModel::init(&cfg, BOOK, QS, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = fake_posteriors(&mut rng, 6);
        let pooled = pool_posteriors(&p, model.pool_stride).unwrap();
        let mut proj = pooled.dot(model.store.get("p_proj.w"));
        let b = model.store.get("p_proj.b");
        for mut row in proj.rows_mut() {
            for (v, &bias) in row.iter_mut().zip(b.row(0)) {
                *v += bias;
            }
        }
        let prompt = fake_codes(&mut rng, 5, QS);
        let mut partial = fake_codes(&mut rng, 6, QS).codes;
        let base = model.stage_logits(&proj, &prompt.codes, &partial, 3);
        // Stage 3 may only read columns 1..2; scrambling columns 3..Q of the
        // target region must not move a single logit.
        for r in 0..partial.nrows() {
            for q in 2..QS {
                partial[[r, q]] = (partial[[r, q]] + 7) % BOOK as u16;
            }
        }
        let after = model.stage_logits(&proj, &prompt.codes, &partial, 3);
        assert_eq!(base, after);
    }

    #[test]
    fn nar_rejects_bad_stages_and_shapes() {
        let cfg = tiny_cfg();
        let model = NarModel::init(&cfg, BOOK, QS, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = fake_posteriors(&mut rng, 6);
        let c = fake_codes(&mut rng, 9, QS);
        for bad in [0, 1, QS + 1] {
            let mut g = Graph::new();
            let mut b = Binder::new();
            assert!(model.loss(&mut g, &mut b, &p, &c.codes, 3, bad).is_err());
        }
        let narrow = fake_codes(&mut rng, 9, QS - 1);
        let mut g = Graph::new();
        let mut b = Binder::new();
        assert!(model.loss(&mut g, &mut b, &p, &narrow.codes, 3, 2).is_err());
        assert!(train_nar(&[], &cfg, BOOK, QS, 1).is_err());
    }

    #[test]
    fn checkpoints_round_trip_both_models() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = fake_posteriors(&mut rng, 7);
        let codes: Vec<u16> = (0..9).map(|_| rng.gen_range(0..BOOK as u16)).collect();

        let mut ar = ArModel::init(&cfg, BOOK, 29);
        ar.trained = true;
        ar.loss_curve = vec![3.0, 2.0, 1.0];
        let ar_path = dir.path().join("ar.rvct");
        ar.save(&ar_path).unwrap();
        let ar2 = ArModel::load(&ar_path).unwrap();
        assert_eq!(ar2.codebook, BOOK);
        assert!(ar2.trained);
        assert_eq!(ar2.loss_curve, ar.loss_curve);
        let a = ar.plain_logits(&p, &codes).unwrap();
        let b = ar2.plain_logits(&p, &codes).unwrap();
        assert_eq!(a, b);

        let mut nar = NarModel::init(&cfg, BOOK, QS, 31);
        nar.trained = true;
        let nar_path = dir.path().join("nar.rvct");
        nar.save(&nar_path).unwrap();
        let nar2 = NarModel::load(&nar_path).unwrap();
        assert_eq!(nar2.quantizers, QS);
        let c = fake_codes(&mut rng, 8, QS);
        let mut g1 = Graph::new();
        let mut b1 = Binder::new();
        let (l1, _) = nar.loss(&mut g1, &mut b1, &p, &c.codes, 3, 2).unwrap();
        let mut g2 = Graph::new();
        let mut b2 = Binder::new();
        let (l2, _) = nar2.loss(&mut g2, &mut b2, &p, &c.codes, 3, 2).unwrap();
        assert_eq!(g1.val(l1)[[0, 0]], g2.val(l2)[[0, 0]]);

        // Wrong-kind load is refused.
        assert!(NarModel::load(&ar_path).is_err());
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let mut cfg = tiny_cfg();
        cfg.ar_steps = 30;
        cfg.nar_steps = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pairs: Vec<(Array2<f64>, CodecMatrix)> = (0..3)
            .map(|_| {
                let p = fake_posteriors(&mut rng, 7);
                let c = fake_codes(&mut rng, 10, QS);
                (p, c)
            })
            .collect();
        let a1 = train_ar(&pairs, &cfg, BOOK, 3).unwrap();
        let a2 = train_ar(&pairs, &cfg, BOOK, 3).unwrap();
        assert_eq!(a1.loss_curve, a2.loss_curve);
        let n1 = train_nar(&pairs, &cfg, BOOK, QS, 3).unwrap();
        let n2 = train_nar(&pairs, &cfg, BOOK, QS, 3).unwrap();
        assert_eq!(n1.loss_curve, n2.loss_curve);
    }
}
