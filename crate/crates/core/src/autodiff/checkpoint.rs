//! Checkpoint blob: little-endian, magic `NSGC`, version, then
//! `(name, shape, f32 data)` records for every parameter tensor plus the
//! optimizer moments and step counter.

use super::{AdamState, ParamStore, Real};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"NSGC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic, not a checkpoint file")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("record {0}: shape mismatch (expected {1}x{2}, found {3}x{4})")]
    ShapeMismatch(String, usize, usize, usize, usize),
    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),
    #[error("malformed record: {0}")]
    Malformed(String),
}

fn write_record<W: Write>(w: &mut W, name: &str, rows: usize, cols: usize, data: &[f32]) -> io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&2u32.to_le_bytes())?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Record {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

fn read_record<R: Read>(r: &mut R) -> Result<Record, CheckpointError> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let name_len = u32::from_le_bytes(b4) as usize;
    if name_len > 4096 {
        return Err(CheckpointError::Malformed("name too long".into()));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed("name not utf8".into()))?;
    r.read_exact(&mut b4)?;
    let ndim = u32::from_le_bytes(b4);
    if ndim != 2 {
        return Err(CheckpointError::Malformed(format!("ndim {ndim}")));
    }
    r.read_exact(&mut b4)?;
    let rows = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let cols = u32::from_le_bytes(b4) as usize;
    let mut data = vec![0f32; rows * cols];
    let mut buf = vec![0u8; rows * cols * 4];
    r.read_exact(&mut buf)?;
    for (i, c) in buf.chunks_exact(4).enumerate() {
        data[i] = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    }
    Ok(Record { name, rows, cols, data })
}

/// Serializes parameters, optimizer moments, and the step counter.
pub fn write_checkpoint<F: Real>(
    path: &Path,
    store: &ParamStore<F>,
    adam: Option<&AdamState<F>>,
    step: u64,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let n_records = store.len() * if adam.is_some() { 3 } else { 1 } + 1;
    w.write_all(&(n_records as u32).to_le_bytes())?;
    write_record(&mut w, "meta.step", 1, 1, &[step as f32])?;
    let to_f32 = |d: &[F]| d.iter().map(|v| v.f64() as f32).collect::<Vec<_>>();
    for (id, e) in store.iter() {
        write_record(&mut w, &e.name, e.rows, e.cols, &to_f32(&e.data))?;
        if let Some(a) = adam {
            write_record(&mut w, &format!("adam.m.{}", e.name), e.rows, e.cols, &to_f32(&a.m[id.0 as usize]))?;
            write_record(&mut w, &format!("adam.v.{}", e.name), e.rows, e.cols, &to_f32(&a.v[id.0 as usize]))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint into an existing store (matched by name); returns the
/// stored step counter. Moments are restored when `adam` is given and the
/// checkpoint carries them.
pub fn read_checkpoint<F: Real>(
    path: &Path,
    store: &mut ParamStore<F>,
    mut adam: Option<&mut AdamState<F>>,
) -> Result<u64, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if &b4 != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    r.read_exact(&mut b4)?;
    let n_records = u32::from_le_bytes(b4) as usize;
    let mut step = 0u64;
    let mut loaded = std::collections::HashSet::new();
    for _ in 0..n_records {
        let rec = read_record(&mut r)?;
        if rec.name == "meta.step" {
            step = rec.data[0] as u64;
            continue;
        }
        let (target, kind) = if let Some(rest) = rec.name.strip_prefix("adam.m.") {
            (rest.to_string(), 1)
        } else if let Some(rest) = rec.name.strip_prefix("adam.v.") {
            (rest.to_string(), 2)
        } else {
            (rec.name.clone(), 0)
        };
        let Some(pid) = store.id_of(&target) else {
            // tolerate extra records (e.g. moments when resuming without them)
            continue;
        };
        let e = store.get(pid);
        if (e.rows, e.cols) != (rec.rows, rec.cols) {
            return Err(CheckpointError::ShapeMismatch(
                rec.name, e.rows, e.cols, rec.rows, rec.cols,
            ));
        }
        match kind {
            0 => {
                let e = store.get_mut(pid);
                for (d, s) in e.data.iter_mut().zip(rec.data.iter()) {
                    *d = F::of(*s as f64);
                }
                loaded.insert(target);
            }
            1 => {
                if let Some(a) = adam.as_deref_mut() {
                    for (d, s) in a.m[pid.0 as usize].iter_mut().zip(rec.data.iter()) {
                        *d = F::of(*s as f64);
                    }
                }
            }
            _ => {
                if let Some(a) = adam.as_deref_mut() {
                    for (d, s) in a.v[pid.0 as usize].iter_mut().zip(rec.data.iter()) {
                        *d = F::of(*s as f64);
                    }
                }
            }
        }
    }
    for (_, e) in store.iter() {
        if !loaded.contains(&e.name) {
            return Err(CheckpointError::MissingParam(e.name.clone()));
        }
    }
    if let Some(a) = adam {
        a.step = step;
    }
    Ok(step)
}
