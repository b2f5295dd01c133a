//! Checkpoint file: magic, the config as canonical text, then every named
//! parameter tensor as `(name, shape, little-endian f64 data)`.
//!
//! Layout (all integers u64 little-endian):
//! `MAGIC | len | config text | count | { len | name | rank | dims.. | data.. }*`

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::pool::{read_f64, read_u64};

const MAGIC: &[u8; 8] = b"SEGTCKP1";

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u64(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("bad utf-8 in checkpoint: {e}")))
}

pub fn write_checkpoint<W: Write>(mut w: W, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    w.write_all(MAGIC)?;
    write_str(&mut w, &cfg.to_text())?;
    let named = params.named();
    write_u64(&mut w, named.len() as u64)?;
    for (name, t) in named {
        write_str(&mut w, &name)?;
        write_u64(&mut w, t.shape().len() as u64)?;
        for &d in t.shape() {
            write_u64(&mut w, d as u64)?;
        }
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ModelConfig, ModelParams)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let cfg = ModelConfig::from_text(&read_str(&mut r)?)?;
    let mut params = ModelParams::init(&cfg)?;
    let expected: Vec<(String, Vec<usize>)> =
        params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let count = read_u64(&mut r)? as usize;
    if count != expected.len() {
        return Err(Error::Format(format!("checkpoint has {count} tensors, config implies {}", expected.len())));
    }
    let mut flat = Vec::with_capacity(params.num_params());
    for (want_name, want_shape) in &expected {
        let name = read_str(&mut r)?;
        let rank = read_u64(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &name != want_name || &shape != want_shape {
            return Err(Error::Format(format!("expected {want_name} {want_shape:?}, found {name} {shape:?}")));
        }
        for _ in 0..shape.iter().product::<usize>() {
            flat.push(read_f64(&mut r)?);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    params.set_flat(&flat)?;
    Ok((cfg, params))
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), cfg, params)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
