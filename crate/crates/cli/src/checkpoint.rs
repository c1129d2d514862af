//! Binary checkpoint: parameters, iteration counter and optional Adam state.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CEN1" | version u32 | iteration u64
//! count u32 | count x record                      parameters
//! has_optimizer u8 [| step u64 | count u32 | count x record]
//! crc32 u32                                        over all preceding bytes
//!
//! record = name_len u32 | name | ndim u8 | ndim x dim u64 | numel x f32
//! ```
//!
//! Optimizer records are named `m.<param>` and `v.<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use ctxnet_core::optim::{Adam, Moments};
use ctxnet_core::{ParamStore, Shape, Tensor};

use crate::error::{io, Error, Result};

pub const MAGIC: &[u8; 4] = b"CEN1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam>,
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(4);
    for d in t.shape().0 {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt(format!("truncated {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let start = self.pos;
        let len = self.u32("record name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "record name")?)
            .map_err(|_| Error::Corrupt(format!("record name at byte {start} is not UTF-8")))?
            .to_owned();
        let ndim = self.u8("rank")? as usize;
        if ndim > 4 {
            return Err(Error::Corrupt(format!("`{name}` has rank {ndim}, at most 4 is supported")));
        }
        let mut dims = [1usize; 4];
        for i in 0..ndim {
            dims[4 - ndim + i] = usize::try_from(self.u64("dimension")?)
                .map_err(|_| Error::Corrupt(format!("dimension of `{name}` overflows")))?;
        }
        let shape = Shape(dims);
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corrupt(format!("`{name}` is too large")))?;
        let raw = self.take(numel, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::from_vec(shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.params.numel() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_record(&mut out, name, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.step_count().to_le_bytes());
                out.extend_from_slice(&(2 * adam.moments().len() as u32).to_le_bytes());
                for (name, m) in adam.moments() {
                    put_record(&mut out, &format!("m.{name}"), &m.m);
                    put_record(&mut out, &format!("v.{name}"), &m.v);
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 8 + 4 + 1 + 4 {
            return Err(Error::Corrupt(format!("file is only {} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("bad magic, not a checkpoint".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Corrupt(format!(
                "CRC mismatch (stored {stored:08x}, computed {actual:08x})"
            )));
        }

        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported format version {version}")));
        }
        let iteration = r.u64("iteration")?;
        let count = r.u32("record count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let (name, t) = r.record()?;
            if params.insert(name.clone(), t).is_some() {
                return Err(Error::Corrupt(format!("duplicate parameter `{name}`")));
            }
        }

        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                let count = r.u32("optimizer record count")?;
                let mut first = BTreeMap::new();
                let mut second = BTreeMap::new();
                for _ in 0..count {
                    let (name, t) = r.record()?;
                    let slot = if let Some(p) = name.strip_prefix("m.") {
                        first.insert(p.to_owned(), t)
                    } else if let Some(p) = name.strip_prefix("v.") {
                        second.insert(p.to_owned(), t)
                    } else {
                        return Err(Error::Corrupt(format!("unexpected optimizer record `{name}`")));
                    };
                    if slot.is_some() {
                        return Err(Error::Corrupt(format!("duplicate optimizer record `{name}`")));
                    }
                }
                let mut moments = BTreeMap::new();
                for (name, m) in first {
                    let v = second
                        .remove(&name)
                        .ok_or_else(|| Error::Corrupt(format!("no second moment for `{name}`")))?;
                    moments.insert(name, Moments { m, v });
                }
                if let Some(name) = second.keys().next() {
                    return Err(Error::Corrupt(format!("no first moment for `{name}`")));
                }
                Some(Adam::from_parts(step, moments))
            }
            f => return Err(Error::Corrupt(format!("bad optimizer flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after byte {}",
                body.len() - r.pos,
                r.pos
            )));
        }
        Ok(Checkpoint {
            iteration,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Sidecar holding the run configuration next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> std::path::PathBuf {
    checkpoint.with_extension("cfg")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.weight", Tensor::from_fn(Shape::new(2, 1, 3, 3), |[o, _, y, x]| (o * 9 + y * 3 + x) as f32 * 0.1));
        params.insert("a.bias", Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let mut grads = params.clone();
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v = 0.3;
            }
        }
        let mut adam = Adam::new();
        adam.step(&mut params, &mut grads, 1e-3).unwrap();
        params.insert("a.bias", Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![f32::MIN_POSITIVE, -0.0]).unwrap());
        Checkpoint {
            iteration: 7,
            params,
            optimizer: Some(adam),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.iteration, 7);
        assert_eq!(back.optimizer.as_ref().unwrap().step_count(), 1);
        let bias = back.params.get("a.bias").unwrap().data();
        assert_eq!(bias[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn flipped_bit_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[30] ^= 0x04;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt(m)) if m.contains("CRC")));
    }

    #[test]
    fn without_optimizer() {
        let mut c = sample();
        c.optimizer = None;
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }
}
