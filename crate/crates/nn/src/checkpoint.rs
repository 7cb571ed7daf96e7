//! Binary checkpoint format.
//!
//! ```text
//! "DVC1"
//! u32 header length, header bytes (UTF-8, caller-defined, JSON in practice)
//! u32 tensor count, then per tensor:
//!     u16 name length, name (UTF-8), u8 rank, rank × u32 dims,
//!     product(dims) × f32 values
//! "OPT1"
//! u64 optimizer step count
//! u32 record count, records as above named "<param>#m" / "<param>#v"
//! ```
//!
//! All integers and floats are little-endian. Values are always written as
//! `f32` whatever the in-memory precision.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"DVC1";
pub const OPT_MAGIC: &[u8; 4] = b"OPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    pub header: String,
    pub tensors: Vec<NamedTensor>,
    pub step_count: u64,
    pub adam: Vec<NamedTensor>,
}

fn to_f32<F: Scalar>(xs: &[F]) -> Vec<f32> {
    xs.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()
}

fn write_tensor<W: Write>(w: &mut W, name: &str, shape: &[usize], values: &[f32]) -> Result<()> {
    let bytes = name.as_bytes();
    let len = u16::try_from(bytes.len()).map_err(|_| NnError::Format(format!("name too long: {name}")))?;
    w.write_u16::<LittleEndian>(len)?;
    w.write_all(bytes)?;
    let rank = u8::try_from(shape.len()).map_err(|_| NnError::Format(format!("rank too large: {name}")))?;
    w.write_u8(rank)?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| NnError::Format(format!("dimension too large: {name}")))?;
        w.write_u32::<LittleEndian>(d)?;
    }
    for &v in values {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<NamedTensor> {
    let len = r.read_u16::<LittleEndian>()? as usize;
    let mut name = vec![0u8; len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| NnError::Format("tensor name is not UTF-8".into()))?;
    let rank = r.read_u8()? as usize;
    let shape = (0..rank)
        .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut values = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut values)?;
    Ok(NamedTensor { name, shape, values })
}

fn read_magic<R: Read>(r: &mut R, expected: &[u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != expected {
        return Err(NnError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(expected)
        )));
    }
    Ok(())
}

pub fn write_checkpoint<W: Write, F: Scalar>(w: &mut W, header: &str, store: &ParamStore<F>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(header.len() as u32)?;
    w.write_all(header.as_bytes())?;
    w.write_u32::<LittleEndian>(store.len() as u32)?;
    for p in store.iter() {
        write_tensor(w, &p.name, &p.shape, &to_f32(&p.value))?;
    }
    w.write_all(OPT_MAGIC)?;
    let step = store.iter().filter(|p| p.trainable).map(|p| p.step_count).max().unwrap_or(0);
    w.write_u64::<LittleEndian>(step)?;
    let trainable: Vec<_> = store.iter().filter(|p| p.trainable).collect();
    w.write_u32::<LittleEndian>(2 * trainable.len() as u32)?;
    for p in trainable {
        write_tensor(w, &format!("{}#m", p.name), &p.shape, &to_f32(&p.adam_m))?;
        write_tensor(w, &format!("{}#v", p.name), &p.shape, &to_f32(&p.adam_v))?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<CheckpointData> {
    read_magic(r, MAGIC)?;
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header = String::from_utf8(header).map_err(|_| NnError::Format("header is not UTF-8".into()))?;
    let count = r.read_u32::<LittleEndian>()?;
    let tensors = (0..count).map(|_| read_tensor(r)).collect::<Result<Vec<_>>>()?;
    read_magic(r, OPT_MAGIC)?;
    let step_count = r.read_u64::<LittleEndian>()?;
    let count = r.read_u32::<LittleEndian>()?;
    let adam = (0..count).map(|_| read_tensor(r)).collect::<Result<Vec<_>>>()?;
    Ok(CheckpointData {
        header,
        tensors,
        step_count,
        adam,
    })
}

pub fn save_checkpoint<F: Scalar>(path: impl AsRef<Path>, header: &str, store: &ParamStore<F>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, header, store)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointData> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

impl CheckpointData {
    /// Copies weights, buffers and optimizer state into a store built with
    /// the same architecture. Every store entry must be present with the
    /// same shape.
    pub fn restore_into<F: Scalar>(&self, store: &mut ParamStore<F>) -> Result<()> {
        let by_name: HashMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let adam: HashMap<&str, &NamedTensor> = self.adam.iter().map(|t| (t.name.as_str(), t)).collect();
        if by_name.len() != store.len() {
            return Err(NnError::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                by_name.len(),
                store.len()
            )));
        }
        let lookup = |map: &HashMap<&str, &NamedTensor>, name: &str, shape: &[usize]| -> Result<Vec<F>> {
            let t = map
                .get(name)
                .ok_or_else(|| NnError::Format(format!("missing tensor {name}")))?;
            if t.shape != shape {
                return Err(NnError::Format(format!("{name}: shape {:?}, expected {shape:?}", t.shape)));
            }
            Ok(t.values.iter().map(|&v| F::lit(v as f64)).collect())
        };
        for p in store.iter_mut() {
            p.value = lookup(&by_name, &p.name, &p.shape)?;
            p.grad = None;
            if p.trainable {
                p.adam_m = lookup(&adam, &format!("{}#m", p.name), &p.shape)?;
                p.adam_v = lookup(&adam, &format!("{}#v", p.name), &p.shape)?;
                p.step_count = self.step_count;
            }
        }
        Ok(())
    }
}
