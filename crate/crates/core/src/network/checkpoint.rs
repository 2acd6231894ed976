//! Model checkpoints.
//!
//! ```text
//! magic     8 bytes  "STTRCKPT"
//! version   u32
//! config    u32 length, then JSON-encoded NetworkConfig
//! params    u32 count, then per tensor: u32 name length, name, u32 ndim, ndim × u32 dims, f32 data
//! buffers   same layout as params
//! ```
//!
//! Integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::NetworkConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STTRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        msg: msg.into(),
    }
}

fn put_u32<W: Write>(w: &mut W, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| fmt_err(format!("{x} does not fit in u32")))?;
    w.write_all(&x.to_le_bytes()).map_err(|e| fmt_err(e.to_string()))
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| fmt_err("truncated"))?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|_| fmt_err("truncated"))?;
    Ok(b)
}

fn put_tensors<W: Write, F: Scalar>(w: &mut W, items: &[Param<F>]) -> Result<()> {
    put_u32(w, items.len())?;
    for p in items {
        put_u32(w, p.name.len())?;
        w.write_all(p.name.as_bytes()).map_err(|e| fmt_err(e.to_string()))?;
        put_u32(w, p.value.ndim())?;
        for &d in p.value.shape() {
            put_u32(w, d)?;
        }
        let mut buf = Vec::with_capacity(p.value.numel() * 4);
        for x in p.value.data() {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| fmt_err(e.to_string()))?;
    }
    Ok(())
}

fn get_tensors<R: Read, F: Scalar>(r: &mut R, into: &mut [Param<F>], what: &str) -> Result<()> {
    let n = get_u32(r)?;
    if n != into.len() {
        return Err(fmt_err(format!("{n} {what} stored, model has {}", into.len())));
    }
    for p in into.iter_mut() {
        let len = get_u32(r)?;
        let name = String::from_utf8(get_bytes(r, len)?).map_err(|_| fmt_err("name is not UTF-8"))?;
        if name != p.name {
            return Err(fmt_err(format!("expected {what} {:?}, found {name:?}", p.name)));
        }
        let ndim = get_u32(r)?;
        let shape = (0..ndim).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        if shape != p.value.shape() {
            return Err(fmt_err(format!("{name}: stored shape {shape:?}, model shape {:?}", p.value.shape())));
        }
        let bytes = get_bytes(r, p.value.numel() * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| F::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        p.value = Tensor::new(shape, data)?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write, F: Scalar>(mut w: W, model: &Model<F>) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC).map_err(|e| fmt_err(e.to_string()))?;
    put_u32(&mut w, CHECKPOINT_VERSION as usize)?;
    let cfg = serde_json::to_vec(&model.net.config).map_err(|e| fmt_err(e.to_string()))?;
    put_u32(&mut w, cfg.len())?;
    w.write_all(&cfg).map_err(|e| fmt_err(e.to_string()))?;
    put_tensors(&mut w, model.store.params())?;
    put_tensors(&mut w, model.store.buffers())?;
    w.flush().map_err(|e| fmt_err(e.to_string()))
}

pub fn read_checkpoint<R: Read, F: Scalar>(mut r: R) -> Result<Model<F>> {
    let magic = get_bytes(&mut r, 8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(fmt_err("bad magic, not a checkpoint"));
    }
    let version = get_u32(&mut r)? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let len = get_u32(&mut r)?;
    let cfg: NetworkConfig = serde_json::from_slice(&get_bytes(&mut r, len)?).map_err(|e| fmt_err(format!("config: {e}")))?;
    let mut model = Model::<F>::new(cfg, 0)?;
    get_tensors(&mut r, model.store.params_mut(), "parameter")?;
    get_tensors(&mut r, model.store.buffers_mut(), "buffer")?;
    Ok(model)
}

pub fn save_checkpoint<F: Scalar>(path: &Path, model: &Model<F>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), model)
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Model<F>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Stream;

    #[test]
    fn round_trip_restores_parameters() {
        let model = Model::<f32>::new(NetworkConfig::tiny(Stream::TTr, 3).unwrap(), 42).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model).unwrap();
        let back: Model<f32> = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.net.config, model.net.config);
        for (a, b) in model.store.params().iter().zip(back.store.params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn corrupt_inputs_fail() {
        let model = Model::<f32>::new(NetworkConfig::tiny(Stream::STr, 3).unwrap(), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint::<_, f32>(bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(read_checkpoint::<_, f32>(bad.as_slice()).is_err());
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_checkpoint::<_, f32>(buf.as_slice()), Err(Error::Format { .. })));
    }
}
