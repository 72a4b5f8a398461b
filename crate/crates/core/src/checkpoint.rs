//! Little-endian parameter checkpoints.
//!
//! ```text
//! "USPL" | u32 version | u32 arch id | u32 split depth | u64 seed | u64 step
//!        | u32 tensor count | tensors...
//! tensor = u32 name length | name bytes | u8 ndim | u32 dims... | f32 data...
//! ```
//!
//! A checkpoint may hold a subset of the network (one party's part). Loading
//! rebuilds the architecture from the seed and overwrites the stored tensors.

use crate::error::{Error, Result};
use crate::model::{Arch, LayerStack, SplitModel};
use crate::tensor::Tensor;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"USPL";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub arch: Arch,
    pub split_depth: u32,
    pub seed: u64,
    pub step: u64,
}

fn named_tensors(stack: &LayerStack) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for layer in &stack.layers {
        for (p, suffix) in layer.params.iter().zip(["weight", "bias"]) {
            out.push((format!("{}.{suffix}", layer.name), &p.value));
        }
    }
    out
}

pub fn encode_checkpoint(header: &CheckpointHeader, stack: &LayerStack) -> Vec<u8> {
    let tensors = named_tensors(stack);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&header.arch.id().to_le_bytes());
    buf.extend_from_slice(&header.split_depth.to_le_bytes());
    buf.extend_from_slice(&header.seed.to_le_bytes());
    buf.extend_from_slice(&header.step.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Saves the whole model.
pub fn save_checkpoint(model: &SplitModel, step: u64, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        arch: model.arch,
        split_depth: model.split_depth as u32,
        seed: model.seed,
        step,
    };
    save_part(&header, &model.net, path)
}

/// Saves only the layers of `stack` (one party's part).
pub fn save_part(header: &CheckpointHeader, stack: &LayerStack, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(header, stack))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, SplitModel)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let arch = Arch::from_id(c.u32()?)?;
    let split_depth = c.u32()?;
    let seed = c.u64()?;
    let step = c.u64()?;
    let count = c.u32()?;

    let mut model = SplitModel::build(arch, seed);
    if split_depth != 0 {
        model = model.with_split_depth(split_depth as usize)?;
    }
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32()? as usize);
        }
        let (layer_name, suffix) = name
            .rsplit_once('.')
            .ok_or_else(|| Error::Format(format!("bad tensor name '{name}'")))?;
        let slot = match suffix {
            "weight" => 0,
            "bias" => 1,
            _ => return Err(Error::Format(format!("bad tensor name '{name}'"))),
        };
        let param = model
            .net
            .layers
            .iter_mut()
            .find(|l| l.name == layer_name)
            .and_then(|l| l.params.get_mut(slot))
            .ok_or_else(|| Error::Format(format!("tensor '{name}' does not belong to a {arch} network")))?;
        if param.value.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor '{name}' has shape {shape:?}, {arch} expects {:?}",
                param.value.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        for (dst, chunk) in param.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((
        CheckpointHeader {
            arch,
            split_depth,
            seed,
            step,
        },
        model,
    ))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, SplitModel)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_mnist_net;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = build_mnist_net(11).with_split_depth(3).unwrap();
        m.net.layers[0].params[0].value.data_mut()[0] = 0.123;
        save_checkpoint(&m, 42, &path).unwrap();
        let (h, back) = load_checkpoint(&path).unwrap();
        assert_eq!(h.step, 42);
        assert_eq!(h.split_depth, 3);
        assert_eq!(back, m);
        let x = Tensor::uniform(&[2, 1, 28, 28], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(back.predict(&x).unwrap().bits_eq(&m.predict(&x).unwrap()));
    }

    #[test]
    fn size_is_header_plus_params() {
        let m = build_mnist_net(0);
        let bytes = encode_checkpoint(
            &CheckpointHeader {
                arch: Arch::Mnist,
                split_depth: 1,
                seed: 0,
                step: 0,
            },
            &m.net,
        );
        let meta: usize = named_tensors(&m.net)
            .iter()
            .map(|(n, t)| 4 + n.len() + 1 + 4 * t.shape().len())
            .sum();
        assert_eq!(bytes.len(), 36 + meta + 4 * m.net.param_count());
    }

    #[test]
    fn rejects_corruption() {
        let m = build_mnist_net(0);
        let header = CheckpointHeader {
            arch: Arch::Mnist,
            split_depth: 1,
            seed: 0,
            step: 0,
        };
        let good = encode_checkpoint(&header, &m.net);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        assert!(decode_checkpoint(&good[..good.len() - 3]).is_err());
        let mut wrong_arch = good.clone();
        wrong_arch[8..12].copy_from_slice(&Arch::Tiny.id().to_le_bytes());
        assert!(decode_checkpoint(&wrong_arch).is_err());
    }

    #[test]
    fn untrained_checkpoint_matches_seeded_init() {
        let (_, m) = decode_checkpoint(&encode_checkpoint(
            &CheckpointHeader {
                arch: Arch::Mnist,
                split_depth: 2,
                seed: 77,
                step: 0,
            },
            &LayerStack::default(),
        ))
        .unwrap();
        assert_eq!(m.net, build_mnist_net(77).net);
    }
}
