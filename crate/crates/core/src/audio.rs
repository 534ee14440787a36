//! Mono 16-bit PCM WAV reading and writing.
//!
//! Samples are f64 in [-1, 1] in memory; writing quantizes to i16 with
//! clamping, so write-then-read is lossy only at the 1/32767 level.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let data_len = (samples.len() * 2) as u32;
    w.write_all(b"RIFF")?;
    w.write_u32::<LittleEndian>(36 + data_len)?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_u32::<LittleEndian>(16)?;
    w.write_u16::<LittleEndian>(1)?; // PCM
    w.write_u16::<LittleEndian>(1)?; // mono
    w.write_u32::<LittleEndian>(sample_rate)?;
    w.write_u32::<LittleEndian>(sample_rate * 2)?; // byte rate
    w.write_u16::<LittleEndian>(2)?; // block align
    w.write_u16::<LittleEndian>(16)?; // bits per sample
    w.write_all(b"data")?;
    w.write_u32::<LittleEndian>(data_len)?;
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_i16::<LittleEndian>(q)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut four = [0u8; 4];
    r.read_exact(&mut four)?;
    if &four != b"RIFF" {
        return Err(Error::format(format!("{}: not a RIFF file", path.display())));
    }
    r.read_u32::<LittleEndian>()?; // riff size, unchecked
    r.read_exact(&mut four)?;
    if &four != b"WAVE" {
        return Err(Error::format(format!("{}: not a WAVE file", path.display())));
    }

    let mut sample_rate = None;
    let mut samples = None;
    // Walk chunks; unknown ones are skipped.
    loop {
        if r.read_exact(&mut four).is_err() {
            break;
        }
        let size = r.read_u32::<LittleEndian>()?;
        match &four {
            b"fmt " => {
                let format = r.read_u16::<LittleEndian>()?;
                let channels = r.read_u16::<LittleEndian>()?;
                let rate = r.read_u32::<LittleEndian>()?;
                r.read_u32::<LittleEndian>()?; // byte rate
                r.read_u16::<LittleEndian>()?; // block align
                let bits = r.read_u16::<LittleEndian>()?;
                if format != 1 || channels != 1 || bits != 16 {
                    return Err(Error::format(format!(
                        "{}: need mono 16-bit PCM, got format={format} channels={channels} bits={bits}",
                        path.display()
                    )));
                }
                sample_rate = Some(rate);
                // Skip any fmt extension bytes.
                skip(&mut r, size as usize - 16)?;
            }
            b"data" => {
                let n = size as usize / 2;
                let mut buf = Vec::with_capacity(n);
                for _ in 0..n {
                    buf.push(r.read_i16::<LittleEndian>()? as f64 / 32767.0);
                }
                if size % 2 == 1 {
                    skip(&mut r, 1)?; // pad byte
                }
                samples = Some(buf);
            }
            _ => skip(&mut r, size as usize + (size % 2) as usize)?,
        }
    }
    match (samples, sample_rate) {
        (Some(s), Some(rate)) => Ok((s, rate)),
        _ => Err(Error::format(format!(
            "{}: missing fmt or data chunk",
            path.display()
        ))),
    }
}

fn skip(r: &mut impl Read, n: usize) -> Result<()> {
    std::io::copy(&mut r.take(n as u64), &mut std::io::sink())?;
    Ok(())
}
