//! Normal codec set: a database of normal-speech code matrices keyed by
//! speaker-verification embeddings, and nearest-neighbor retrieval over it.
//!
//! A dysarthric utterance is "normalized" by embedding its code matrix and
//! returning the stored normal code matrix whose embedding is closest in L1
//! distance — the result is always a verbatim member of the set, never a
//! blend, so decoding it yields natural normal speech.

use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::codec::{CodecMatrix, CodecModel};
use crate::corpus::{Corpus, Partition};
use crate::error::{format_err, invalid_input, invalid_state, Result};
use crate::par;
use crate::sv::SvEstimator;

const MAGIC: &[u8; 4] = b"RVCS";
const VERSION: u32 = 1;
/// Entries re-embedded and compared against their stored vectors on load.
const LOAD_SPOT_CHECKS: usize = 10;

pub struct CodecSetEntry {
    pub utt_id: String,
    pub speaker_id: u32,
    pub codes: CodecMatrix,
    pub embedding: Vec<f64>,
}

pub struct CodecSet {
    pub embed_dim: usize,
    pub quantizers: usize,
    pub frame_hop: usize,
    pub entries: Vec<CodecSetEntry>,
}

/// Metadata about one retrieval: which entry won and how far away it was.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchInfo {
    pub index: usize,
    pub utt_id: String,
    pub speaker_id: u32,
    pub distance: f64,
}

/// Encode and embed every normal-codecset utterance of the corpus.
pub fn build_codec_set(
    corpus: &Corpus,
    codec: &CodecModel,
    est: &SvEstimator,
) -> Result<CodecSet> {
    if !est.trained {
        return Err(invalid_state("speaker estimator has not been trained"));
    }
    let entries_meta = corpus.partition(Partition::NormalCodecset);
    if entries_meta.is_empty() {
        return Err(invalid_input("corpus has no normal-codecset utterances"));
    }
    let mut entries = Vec::with_capacity(entries_meta.len());
    for entry in entries_meta {
        let wav = corpus.load_wav(entry)?;
        let codes = codec.encode(&wav, corpus.sample_rate)?;
        let embedding = est.embed(&codes)?;
        entries.push(CodecSetEntry {
            utt_id: entry.utt_id(),
            speaker_id: entry.speaker_id,
            codes,
            embedding,
        });
    }
    Ok(CodecSet {
        embed_dim: est.embed_dim,
        quantizers: est.quantizers,
        frame_hop: codec.frame_hop(),
        entries,
    })
}

impl CodecSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.embed_dim as u32)?;
        w.write_u32::<LittleEndian>(self.quantizers as u32)?;
        w.write_u32::<LittleEndian>(self.frame_hop as u32)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for e in &self.entries {
            assert_eq!(e.embedding.len(), self.embed_dim);
            assert_eq!(e.codes.quantizers(), self.quantizers);
            let id = e.utt_id.as_bytes();
            w.write_u32::<LittleEndian>(id.len() as u32)?;
            w.write_all(id)?;
            w.write_u32::<LittleEndian>(e.speaker_id)?;
            w.write_u32::<LittleEndian>(e.codes.frames() as u32)?;
            for &c in e.codes.codes.iter() {
                w.write_u16::<LittleEndian>(c)?;
            }
            for &v in &e.embedding {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(())
    }

    /// Load and spot-check: a sample of stored embeddings must match what the
    /// estimator computes from the stored code matrices.
    pub fn load(path: &Path, est: &SvEstimator) -> Result<CodecSet> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(format_err("codec-set file: bad magic"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(format_err(format!(
                "codec-set file: unsupported version {version}"
            )));
        }
        let embed_dim = r.read_u32::<LittleEndian>()? as usize;
        let quantizers = r.read_u32::<LittleEndian>()? as usize;
        let frame_hop = r.read_u32::<LittleEndian>()? as usize;
        let n = r.read_u32::<LittleEndian>()? as usize;
        if n == 0 {
            return Err(format_err("codec-set file: empty set"));
        }
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let id_len = r.read_u32::<LittleEndian>()? as usize;
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id)?;
            let utt_id = String::from_utf8(id)
                .map_err(|_| format_err("codec-set file: utterance id is not UTF-8"))?;
            let speaker_id = r.read_u32::<LittleEndian>()?;
            let frames = r.read_u32::<LittleEndian>()? as usize;
            let mut codes = Array2::zeros((frames, quantizers));
            for t in 0..frames {
                for q in 0..quantizers {
                    codes[[t, q]] = r.read_u16::<LittleEndian>()?;
                }
            }
            let mut embedding = Vec::with_capacity(embed_dim);
            for _ in 0..embed_dim {
                embedding.push(r.read_f32::<LittleEndian>()? as f64);
            }
            entries.push(CodecSetEntry {
                utt_id,
                speaker_id,
                codes: CodecMatrix { codes, frame_hop },
                embedding,
            });
        }
        let set = CodecSet {
            embed_dim,
            quantizers,
            frame_hop,
            entries,
        };
        if est.embed_dim != embed_dim || est.quantizers != quantizers {
            return Err(format_err(
                "codec-set file does not match the estimator's dimensions",
            ));
        }
        // Spot-check a spread of entries (f32 storage rounds at ~1e-7).
        let checks = LOAD_SPOT_CHECKS.min(set.entries.len());
        for k in 0..checks {
            let i = k * set.entries.len() / checks;
            let e = &set.entries[i];
            let fresh = est.embed(&e.codes)?;
            let ok = fresh
                .iter()
                .zip(&e.embedding)
                .all(|(a, b)| (a - b).abs() < 1e-6);
            if !ok {
                return Err(format_err(format!(
                    "codec-set entry {i} ({}) fails the embedding spot-check",
                    e.utt_id
                )));
            }
        }
        Ok(set)
    }
}

/// Map a dysarthric code matrix to the closest stored normal code matrix:
/// L1 argmin in embedding space, ties broken by lowest entry index.
pub fn normalize(
    est: &SvEstimator,
    set: &CodecSet,
    dysarthric: &CodecMatrix,
) -> Result<(CodecMatrix, MatchInfo)> {
    if set.entries.is_empty() {
        return Err(invalid_state("normal codec set is empty"));
    }
    let query = est.embed(dysarthric)?;
    let idx = par::argmin_by_key(&set.entries, |_, e| l1(&query, &e.embedding))
        .expect("non-empty set");
    let e = &set.entries[idx];
    Ok((
        CodecMatrix {
            codes: e.codes.codes.clone(),
            frame_hop: e.codes.frame_hop,
        },
        MatchInfo {
            index: idx,
            utt_id: e.utt_id.clone(),
            speaker_id: e.speaker_id,
            distance: l1(&query, &e.embedding),
        },
    ))
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
