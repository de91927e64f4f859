//! SAQW weight files: magic `SAQW`, u32 version, u32 tensor count, then per
//! tensor a u16-length UTF-8 name, u8 rank, u64 dims and a u64 byte offset
//! into a trailing blob of little-endian f64 values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

use super::{Model, ModelConfig};

const MAGIC: &[u8; 4] = b"SAQW";
const VERSION: u32 = 1;
const CONFIG_TENSOR: &str = "__config__";

/// Serializes named tensors.
pub fn write_saqw<T: Scalar, W: Write>(out: &mut W, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    header.extend_from_slice(&count.to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        header.extend_from_slice(&len.to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank of {name}")))?;
        header.push(rank);
        for &d in t.shape() {
            header.extend_from_slice(&(d as u64).to_le_bytes());
        }
        header.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.numel() as u64;
    }
    out.write_all(&header)?;
    for (_, t) in tensors {
        for v in t.data() {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated SAQW header".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a SAQW byte stream into named tensors, in file order.
pub fn read_saqw<T: Scalar, R: Read>(input: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a SAQW file".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported SAQW version {version}")));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u8()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = c.u64()? as usize;
        entries.push((name, shape, offset));
    }
    let blob = &buf[c.pos..];
    entries
        .into_iter()
        .map(|(name, shape, offset)| {
            let n: usize = shape.iter().product();
            let bytes = offset
                .checked_add(8 * n)
                .and_then(|end| blob.get(offset..end))
                .ok_or_else(|| Error::Format(format!("data of {name} outside the blob")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect();
            Ok((name.clone(), Tensor::new(shape, data)?))
        })
        .collect()
}

fn config_tensor<T: Scalar>(cfg: &ModelConfig) -> Tensor<T> {
    let mut v = vec![
        cfg.image_size,
        cfg.in_channels,
        cfg.patch_size,
        cfg.embed_dim,
        cfg.num_heads,
        cfg.mlp_ratio,
        cfg.encoder_layers,
        cfg.window_size,
        cfg.decoder_layers,
        cfg.decoder_mlp_dim,
        cfg.neck_dim,
        (cfg.seed & 0xffff_ffff) as usize,
        (cfg.seed >> 32) as usize,
    ];
    v.extend(&cfg.global_layer_indices);
    let data: Vec<T> = v.into_iter().map(|x| T::lit(x as f64)).collect();
    Tensor::from_parts(vec![data.len()], data)
}

fn config_from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<ModelConfig> {
    let v: Vec<usize> = t.data().iter().map(|x| x.as_f64() as usize).collect();
    if v.len() < 13 {
        return Err(Error::Format("config record too short".into()));
    }
    Ok(ModelConfig {
        image_size: v[0],
        in_channels: v[1],
        patch_size: v[2],
        embed_dim: v[3],
        num_heads: v[4],
        mlp_ratio: v[5],
        encoder_layers: v[6],
        window_size: v[7],
        decoder_layers: v[8],
        decoder_mlp_dim: v[9],
        neck_dim: v[10],
        seed: v[11] as u64 | ((v[12] as u64) << 32),
        global_layer_indices: v[13..].to_vec(),
    })
}

pub fn save_weights<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut m = model.clone();
    let cfg = config_tensor::<T>(&m.cfg);
    let mut list: Vec<(String, &Tensor<T>)> = vec![(CONFIG_TENSOR.into(), &cfg)];
    let named = m.tensors_mut();
    list.extend(named.into_iter().map(|(n, t)| (n, &*t)));
    let mut buf = Vec::new();
    write_saqw(&mut buf, &list)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let mut f = fs::File::open(path)?;
    let entries = read_saqw::<T, _>(&mut f)?;
    let (first, rest) = entries
        .split_first()
        .filter(|(c, _)| c.0 == CONFIG_TENSOR)
        .ok_or_else(|| Error::Format("SAQW file lacks a model config".into()))?;
    let cfg = config_from_tensor(&first.1)?;
    let mut model = Model::build(&cfg)?;
    let mut slots = model.tensors_mut();
    if slots.len() != rest.len() {
        return Err(Error::Format(format!("{} tensors in file, model has {}", rest.len(), slots.len())));
    }
    for ((name, t), (sname, slot)) in rest.iter().zip(slots.iter_mut()) {
        if name != sname || t.shape() != slot.shape() {
            return Err(Error::Format(format!("tensor {name} {:?} does not match {sname} {:?}", t.shape(), slot.shape())));
        }
        **slot = t.clone();
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_magic_rejected() {
        let mut r: &[u8] = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00";
        assert!(matches!(read_saqw::<f64, _>(&mut r), Err(Error::Format(_))));
    }

    #[test]
    fn tensors_round_trip() {
        let a: Tensor<f64> = Tensor::from_f64(&[2, 2], &[1.5, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap();
        let mut buf = Vec::new();
        write_saqw(&mut buf, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let back = read_saqw::<f64, _>(&mut buf.as_slice()).unwrap();
        assert_eq!(back[0].1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(back[1].1, b);
        assert_eq!(&buf[..4], b"SAQW");
    }
}
