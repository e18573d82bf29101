//! `BSCK` checkpoint files: little-endian, f32 tensor payloads.

use std::fs;
use std::path::Path;

use super::params::{ArchConfig, ModelParams, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"BSCK";
const VERSION: u32 = 1;
const ARCH_TENSOR: &str = "meta.arch";

pub fn encode_checkpoint(arch: &ArchConfig, params: &ModelParams) -> Vec<u8> {
    let arch_values = arch.encode();
    let meta = Tensor {
        name: ARCH_TENSOR.to_string(),
        shape: vec![arch_values.len()],
        data: arch_values,
    };
    let tensors: Vec<&Tensor> = std::iter::once(&meta).chain(params.tensors()).collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &t.data {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode_tensors(bytes: &[u8]) -> std::result::Result<Vec<Tensor>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or("tensor too large")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push(Tensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes after last tensor".into());
    }
    Ok(tensors)
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<(ArchConfig, ModelParams), String> {
    let mut tensors = decode_tensors(bytes)?;
    if tensors.first().map(|t| t.name.as_str()) != Some(ARCH_TENSOR) {
        return Err(format!("first tensor must be {ARCH_TENSOR}"));
    }
    let meta = tensors.remove(0);
    let arch = ArchConfig::decode(&meta.data).map_err(|e| e.to_string())?;
    let params = ModelParams::from_tensors(&arch, tensors).map_err(|e| e.to_string())?;
    Ok((arch, params))
}

pub fn save_checkpoint(path: &Path, arch: &ArchConfig, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(arch, params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ArchConfig, ModelParams)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|msg| Error::format(path, msg))
}
