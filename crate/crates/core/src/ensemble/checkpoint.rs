//! Versioned binary model container: header with the net geometry and the
//! class registry, followed by shape-tagged parameter blobs. Writes are
//! byte-stable for identical nets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EnsembleNet, NetConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"FSCL";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serialize a net to its on-disk image.
pub fn encode<T: Scalar>(net: &EnsembleNet<T>) -> Vec<u8> {
    let cfg = net.config();
    let width = std::mem::size_of::<T>() as u8;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(width);
    out.push(cfg.ensemble as u8);
    put_u32(&mut out, cfg.in_channels as u32);
    put_u32(&mut out, cfg.branch_channels as u32);
    put_u32(&mut out, cfg.stages.len() as u32);
    for &s in &cfg.stages {
        put_u32(&mut out, s as u32);
    }
    put_u32(&mut out, cfg.group_size as u32);
    put_f64(&mut out, cfg.cosine_scale);
    put_u32(&mut out, net.classes().len() as u32);
    for &c in net.classes() {
        put_u32(&mut out, c as u32);
    }
    put_u32(&mut out, net.params().len() as u32);
    for (_, name, p) in net.params().iter() {
        let bytes = name.as_bytes();
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in p.value.data() {
            if width == 4 {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    out
}

pub fn save<T: Scalar>(net: &EnsembleNet<T>, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode(net))?;
    f.flush()?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decode a checkpoint image back into a net.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<EnsembleNet<T>> {
    let mut c = Cursor { data: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let width = c.u8()?;
    if width as usize != std::mem::size_of::<T>() {
        return Err(Error::Format(format!(
            "checkpoint stores {}-byte scalars, runtime uses {}",
            width,
            std::mem::size_of::<T>()
        )));
    }
    let ensemble = c.u8()? != 0;
    let in_channels = c.u32()? as usize;
    let branch_channels = c.u32()? as usize;
    let n_stages = c.u32()? as usize;
    let mut stages = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        stages.push(c.u32()? as usize);
    }
    let group_size = c.u32()? as usize;
    let cosine_scale = c.f64()?;
    let n_classes = c.u32()? as usize;
    let mut classes = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        classes.push(c.u32()? as usize);
    }
    let cfg = NetConfig { in_channels, branch_channels, stages, group_size, cosine_scale, ensemble };

    // Build the structure, then overwrite every parameter from the blobs.
    let mut rng = crate::rng::stream(0, "checkpoint-load", 0);
    let mut net = EnsembleNet::new(cfg, &classes, &mut rng)?;
    let n_blobs = c.u32()? as usize;
    if n_blobs != net.params().len() {
        return Err(Error::Format(format!(
            "checkpoint has {} blobs, net expects {}",
            n_blobs,
            net.params().len()
        )));
    }
    for i in 0..n_blobs {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Format("blob name is not utf-8".into()))?
            .to_string();
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let v = if width == 4 {
                f32::from_le_bytes(c.take(4)?.try_into().unwrap()) as f64
            } else {
                c.f64()?
            };
            data.push(T::from_f64(v));
        }
        let r = crate::tensor::ParamRef(i);
        if net.params().name(r) != name {
            return Err(Error::Format(format!(
                "blob {} is `{}`, expected `{}`",
                i,
                name,
                net.params().name(r)
            )));
        }
        if net.params().get(r).value.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "blob `{}` has shape {:?}, expected {:?}",
                name,
                shape,
                net.params().get(r).value.shape()
            )));
        }
        let p = net.params_mut().get_mut(r);
        p.value = Tensor::new(shape.clone(), data)?;
        p.grad = Tensor::zeros(shape);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - c.pos)));
    }
    Ok(net)
}

pub fn load<T: Scalar>(path: &Path) -> Result<EnsembleNet<T>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(&bytes)
}
