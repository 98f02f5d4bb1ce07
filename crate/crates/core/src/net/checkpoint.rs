//! Little-endian binary checkpoints of named tensors.
//!
//! Layout: magic, `u32` version, `u64` seed, `u64` step, `u32` tensor count,
//! then per tensor: `u32` name length and UTF-8 name, `u8` kind (0 fixed,
//! 1 float), `u32` rank and `u64` dims, then for fixed tensors `u32` IL,
//! `u32` FL and `i32` mantissas, for float tensors `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use super::NetError;
use crate::fxp::FxFormat;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"FXNETCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorRecord {
    Fixed { shape: Vec<usize>, format: FxFormat, data: Vec<i32> },
    Float { shape: Vec<usize>, data: Vec<f64> },
}

impl TensorRecord {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorRecord::Fixed { shape, .. } | TensorRecord::Float { shape, .. } => shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<(String, TensorRecord)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self, w: &mut impl Write) -> Result<(), NetError> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let kind: u8 = match t {
                TensorRecord::Fixed { .. } => 0,
                TensorRecord::Float { .. } => 1,
            };
            w.write_all(&[kind])?;
            let shape = t.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match t {
                TensorRecord::Fixed { format, data, .. } => {
                    w.write_all(&format.il().to_le_bytes())?;
                    w.write_all(&format.fl().to_le_bytes())?;
                    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
                    w.write_all(&bytes)?;
                }
                TensorRecord::Float { data, .. } => {
                    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
                    w.write_all(&bytes)?;
                }
            }
        }
        Ok(())
    }

    pub fn decode(r: &mut impl Read) -> Result<Self, NetError> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(NetError::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NetError::Checkpoint(format!("unsupported version {version}")));
        }
        let seed = read_u64(r)?;
        let step = read_u64(r)?;
        let count = read_u32(r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| NetError::Checkpoint("tensor name is not UTF-8".into()))?;
            let mut kind = [0u8];
            read_exact(r, &mut kind)?;
            let rank = read_u32(r)?;
            if rank > MAX_RANK {
                return Err(NetError::Checkpoint(format!("tensor {name}: rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(usize::try_from(read_u64(r)?).map_err(|_| NetError::Checkpoint("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| NetError::Checkpoint(format!("tensor {name}: size overflow")))?;
            let record = match kind[0] {
                0 => {
                    let il = read_u32(r)?;
                    let fl = read_u32(r)?;
                    let format = FxFormat::new(il, fl)?;
                    let bytes = read_vec(r, n, 4)?;
                    let data: Vec<i32> = bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
                    if let Some(m) = data.iter().find(|&&m| !format.contains_mantissa(m as i64)) {
                        return Err(NetError::Checkpoint(format!("tensor {name}: mantissa {m} outside {format}")));
                    }
                    TensorRecord::Fixed { shape, format, data }
                }
                1 => {
                    let bytes = read_vec(r, n, 8)?;
                    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    TensorRecord::Float { shape, data }
                }
                k => return Err(NetError::Checkpoint(format!("tensor {name}: unknown kind {k}"))),
            };
            tensors.push((name, record));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(NetError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { seed, step, tensors })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), NetError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => NetError::Checkpoint("truncated file".into()),
        _ => NetError::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, NetError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, NetError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads `n` elements of `size` bytes without trusting `n` for the initial
/// allocation.
fn read_vec(r: &mut impl Read, n: usize, size: usize) -> Result<Vec<u8>, NetError> {
    let total = n.checked_mul(size).ok_or_else(|| NetError::Checkpoint("size overflow".into()))?;
    let mut buf = Vec::new();
    r.take(total as u64).read_to_end(&mut buf)?;
    if buf.len() != total {
        return Err(NetError::Checkpoint("truncated file".into()));
    }
    Ok(buf)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), NetError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    ck.encode(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, NetError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    Checkpoint::decode(&mut r)
}
