//! Portable weights file.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! "SNRW" | version | tensor count |
//!   { name length | UTF-8 name | rank | dims[rank] | f32 payload } * count |
//! CRC32 of every preceding byte
//! ```
//!
//! Parameters are written first in network order, then batch-norm running
//! statistics.

use std::collections::HashMap;
use std::path::Path;

use super::Network;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"SNRW";
pub const VERSION: u32 = 1;

/// Serializes named tensors into the weights format.
pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::WeightsCorrupt(format!("unexpected end of data reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses and integrity-checks a weights file image.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::WeightsMagic);
    }
    if bytes.len() < 16 {
        return Err(Error::WeightsCorrupt("file shorter than header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::WeightsVersion(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::WeightsCrc { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 8 };
    let count = r.u32("tensor count")?;
    // every tensor needs at least 12 bytes of header, which bounds the count
    let mut out = Vec::with_capacity((count as usize).min(body.len() / 12));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::WeightsCorrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(body.len() / 4));
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let bytes = shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::WeightsCorrupt(format!("{name}: shape {shape:?} overflows")))?;
        let payload = r.take(bytes, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::WeightsCorrupt(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::WeightsCorrupt("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

impl<T: Real> Network<T> {
    /// Every stored tensor in file order, converted to single precision.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.params()
            .iter()
            .map(|p| (p.name.clone(), p.value.cast()))
            .chain(self.buffers().iter().map(|b| (b.name.clone(), b.value.cast())))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.named_tensors())
    }

    /// Overwrites parameters and running statistics from a weights image.
    /// The image must contain exactly this architecture's tensors.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let mut by_name: HashMap<String, Tensor<f32>> = HashMap::new();
        for (name, t) in decode(bytes)? {
            if by_name.contains_key(&name) {
                return Err(Error::WeightsCorrupt(format!("tensor `{name}` appears twice")));
            }
            by_name.insert(name, t);
        }
        let mut slots: Vec<(&str, &mut Tensor<T>)> = Vec::new();
        let (params, buffers) = self.params_and_buffers_mut();
        slots.extend(params.iter_mut().map(|p| (p.name.as_str(), &mut p.value)));
        slots.extend(buffers.iter_mut().map(|b| (b.name.as_str(), &mut b.value)));
        let mut staged = Vec::with_capacity(slots.len());
        for (name, slot) in &slots {
            let t = by_name
                .remove(*name)
                .ok_or_else(|| Error::WeightsMissingTensor(name.to_string()))?;
            if t.shape() != slot.shape() {
                return Err(Error::WeightsShape {
                    name: name.to_string(),
                    expected: slot.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            staged.push(t);
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::WeightsUnexpectedTensor(extra.clone()));
        }
        for ((_, slot), t) in slots.into_iter().zip(staged) {
            *slot = t.cast();
        }
        Ok(())
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("a".into(), Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap()),
            ("b.c".into(), Tensor::scalar(7.25)),
        ]
    }

    fn recrc(mut b: Vec<u8>) -> Vec<u8> {
        let n = b.len() - 4;
        let crc = crc32fast::hash(&b[..n]);
        b[n..].copy_from_slice(&crc.to_le_bytes());
        b
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let back = decode(&encode(&sample())).unwrap();
        for ((n1, t1), (n2, t2)) in sample().iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn header_layout() {
        let b = encode(&sample());
        assert_eq!(&b[..4], b"SNRW");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(b[16], b'a');
        // header, then (len, name, rank, dims, payload) per tensor, then CRC
        assert_eq!(b.len(), 12 + (4 + 1 + 4 + 8 + 24) + (4 + 3 + 4 + 4 + 4) + 4);
    }

    #[test]
    fn distinct_errors() {
        let good = encode(&sample());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::WeightsMagic)));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode(&recrc(bad)), Err(Error::WeightsVersion(2))));

        let mut bad = good.clone();
        bad[30] ^= 0x40;
        assert!(matches!(decode(&bad), Err(Error::WeightsCrc { .. })));

        let mut bad = good.clone();
        bad.truncate(good.len() - 9);
        bad.extend_from_slice(&[0; 4]);
        assert!(matches!(decode(&recrc(bad)), Err(Error::WeightsCorrupt(_))));
    }

    #[test]
    fn duplicates_and_overflow_rejected() {
        let dup = encode(&[("x".into(), Tensor::scalar(1.0)), ("x".into(), Tensor::scalar(2.0))]);
        let mut net = crate::model::Network::<f32>::build(&crate::model::NetworkConfig::tiny()).unwrap();
        assert!(matches!(net.load_bytes(&dup), Err(Error::WeightsCorrupt(_))));

        let mut huge = Vec::new();
        huge.extend_from_slice(MAGIC);
        huge.extend_from_slice(&VERSION.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&1u32.to_le_bytes());
        huge.push(b'z');
        huge.extend_from_slice(&3u32.to_le_bytes());
        for _ in 0..3 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        huge.extend_from_slice(&[0; 4]);
        assert!(matches!(decode(&recrc(huge)), Err(Error::WeightsCorrupt(_))));
    }
}
