//! Named parameter collections and the binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"FDCK"
//! version u32
//! count   u32
//! entry*  name_len u32, name utf-8, dtype u8 (0 = f32),
//!         rank u32, shape u64 * rank, payload f32 * numel
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FDCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// An ordered set of named parameter tensors. Order is insertion order and
/// fixed, so optimizer sweeps and checkpoint files are reproducible.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under `name`, marks it trainable, and returns a
    /// handle to it. Names must be unique.
    pub fn register(&mut self, name: &str, t: Tensor) -> Tensor {
        assert!(
            self.get(name).is_none(),
            "parameter {name:?} registered twice"
        );
        let t = t.requires_grad(true);
        self.entries.push((name.to_string(), t.clone()));
        t
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Tensors whose name starts with `prefix`.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Vec<Tensor> {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_requires_grad(&self, flag: bool) {
        for (_, t) in &self.entries {
            t.set_requires_grad(flag);
        }
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// FNV-1a hash over every value's bit pattern, in registration order.
    /// Bitwise-stable across runs; used to assert that frozen parameters
    /// never move.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.entries {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
            for v in t.data().iter() {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(&str, &Tensor)> = self.iter().collect();
        write_checkpoint(path, &named)
    }

    /// Loads a checkpoint written by [`ParamSet::save`]. Every file entry
    /// must match a registered parameter in name and shape, and every
    /// parameter must be present.
    pub fn load(&self, path: &Path) -> Result<()> {
        let entries = read_checkpoint(path)?;
        let mut seen: HashSet<String> = HashSet::new();
        for entry in &entries {
            let param = self.get(&entry.name).ok_or_else(|| {
                Error::Checkpoint(format!("unknown parameter {:?} in {}", entry.name, path.display()))
            })?;
            if param.shape() != entry.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?}: checkpoint shape {:?} does not match model shape {:?}",
                    entry.name,
                    entry.shape,
                    param.shape()
                )));
            }
            param.set_data(&entry.values);
            seen.insert(entry.name.clone());
        }
        for (name, _) in &self.entries {
            if !seen.contains(name) {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} missing from {}",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn write_checkpoint(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F32])?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint(format!("{}: non-utf8 name", path.display())))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "{}: entry {name:?} has unsupported dtype {}",
                path.display(),
                dtype[0]
            )));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            shape.push(u64::from_le_bytes(buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload)?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(CheckpointEntry { name, shape, values });
    }
    Ok(entries)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
