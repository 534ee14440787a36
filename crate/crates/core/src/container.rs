//! Versioned binary container for model checkpoints.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic "RVCT" | version u32 | kind (u32 len + utf8)
//! | n_int_meta u32  | { key, i64 } ...
//! | n_float_meta u32| { key, f64 } ...
//! | n_tensors u32   | { name, rows u64, cols u64, f64 data row-major } ...
//! ```
//! Strings are u32 length + bytes. `kind` identifies the model family so a
//! codec checkpoint can't be loaded where an LM checkpoint is expected.
//! Mismatched magic, version, or kind is an explicit format error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use revoice_nn::ParamStore;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RVCT";
const VERSION: u32 = 1;
/// Sanity bound on counts/lengths read from headers, to fail fast on
/// corrupted files instead of attempting huge allocations.
const SANE_MAX: u64 = 1 << 33;

#[derive(Default)]
pub struct Container {
    pub kind: String,
    pub int_meta: BTreeMap<String, i64>,
    pub float_meta: BTreeMap<String, f64>,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Container {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn set_int(&mut self, key: &str, v: i64) {
        self.int_meta.insert(key.to_string(), v);
    }

    pub fn set_float(&mut self, key: &str, v: f64) {
        self.float_meta.insert(key.to_string(), v);
    }

    pub fn int(&self, key: &str) -> Result<i64> {
        self.int_meta
            .get(key)
            .copied()
            .ok_or_else(|| Error::format(format!("checkpoint missing int field '{key}'")))
    }

    pub fn float(&self, key: &str) -> Result<f64> {
        self.float_meta
            .get(key)
            .copied()
            .ok_or_else(|| Error::format(format!("checkpoint missing float field '{key}'")))
    }

    /// Copy all parameters of a store into the container.
    pub fn put_params(&mut self, store: &ParamStore) {
        for (name, v) in store.iter() {
            self.tensors.insert(name.to_string(), v.clone());
        }
    }

    /// Rebuild a parameter store from all tensors with the given prefix
    /// (empty prefix = everything).
    pub fn params(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, v) in &self.tensors {
            if name.starts_with(prefix) {
                store.insert(name, v.clone());
            }
        }
        store
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        write_str(&mut w, &self.kind)?;
        w.write_u32::<LittleEndian>(self.int_meta.len() as u32)?;
        for (k, v) in &self.int_meta {
            write_str(&mut w, k)?;
            w.write_i64::<LittleEndian>(*v)?;
        }
        w.write_u32::<LittleEndian>(self.float_meta.len() as u32)?;
        for (k, v) in &self.float_meta {
            write_str(&mut w, k)?;
            w.write_f64::<LittleEndian>(*v)?;
        }
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            write_str(&mut w, name)?;
            w.write_u64::<LittleEndian>(t.nrows() as u64)?;
            w.write_u64::<LittleEndian>(t.ncols() as u64)?;
            for &x in t.iter() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Load and verify magic/version; `expected_kind` guards against loading
    /// the wrong model family.
    pub fn load(path: &Path, expected_kind: &str) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format(format!(
                "{}: not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::format(format!(
                "{}: checkpoint version {version}, expected {VERSION}",
                path.display()
            )));
        }
        let kind = read_str(&mut r)?;
        if kind != expected_kind {
            return Err(Error::format(format!(
                "{}: checkpoint kind '{kind}', expected '{expected_kind}'",
                path.display()
            )));
        }
        let mut c = Container::new(&kind);
        for _ in 0..read_count(&mut r)? {
            let k = read_str(&mut r)?;
            let v = r.read_i64::<LittleEndian>()?;
            c.int_meta.insert(k, v);
        }
        for _ in 0..read_count(&mut r)? {
            let k = read_str(&mut r)?;
            let v = r.read_f64::<LittleEndian>()?;
            c.float_meta.insert(k, v);
        }
        for _ in 0..read_count(&mut r)? {
            let name = read_str(&mut r)?;
            let rows = r.read_u64::<LittleEndian>()?;
            let cols = r.read_u64::<LittleEndian>()?;
            if rows > SANE_MAX || cols > SANE_MAX || rows.saturating_mul(cols) > SANE_MAX {
                return Err(Error::format(format!(
                    "{}: tensor '{name}' has implausible shape {rows}x{cols}",
                    path.display()
                )));
            }
            let mut data = vec![0.0; (rows * cols) as usize];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            let t = Array2::from_shape_vec((rows as usize, cols as usize), data)
                .expect("shape matches data length by construction");
            c.tensors.insert(name, t);
        }
        Ok(c)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_count(r)?;
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::format("non-utf8 string in checkpoint"))
}

fn read_count(r: &mut impl Read) -> Result<u32> {
    let n = r.read_u32::<LittleEndian>()?;
    if n as u64 > SANE_MAX {
        return Err(Error::format("implausible count in checkpoint"));
    }
    Ok(n)
}
