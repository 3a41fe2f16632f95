//! Binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DPPV"  u32 version (=1)  u32 layer count
//! per layer: u32 name length, UTF-8 name, u64 value count, values as f64
//! ```
//!
//! Values are stored bit-for-bit, so a decode of an encode is exact.

use std::fs;
use std::path::Path;

use dpfed_core::{Layer, ParamVector};

use crate::error::{DpfedError, IoContext, Result};

const MAGIC: &[u8; 4] = b"DPPV";
const VERSION: u32 = 1;

pub fn encode(params: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.num_params() * 8 + params.num_layers() * 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.num_layers() as u32).to_le_bytes());
    for layer in params.layers() {
        out.extend_from_slice(&(layer.name.len() as u32).to_le_bytes());
        out.extend_from_slice(layer.name.as_bytes());
        out.extend_from_slice(&(layer.values.len() as u64).to_le_bytes());
        for v in &layer.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.bytes.len() < n {
            return Err(format!("truncated: wanted {n} more bytes, {} left", self.bytes.len()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_inner(bytes: &[u8]) -> Result<ParamVector, String> {
    let mut r = Reader { bytes };
    if r.take(4)? != MAGIC {
        return Err("not a parameter file (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| format!("layer name: {e}"))?
            .to_owned();
        let n = usize::try_from(r.u64()?).map_err(|_| "layer too large".to_string())?;
        let raw = r.take(n.checked_mul(8).ok_or("layer too large")?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        layers.push(Layer { name, values });
    }
    if !r.bytes.is_empty() {
        return Err(format!("{} trailing bytes", r.bytes.len()));
    }
    ParamVector::new(layers).map_err(|e| e.to_string())
}

pub fn decode(bytes: &[u8]) -> Result<ParamVector> {
    decode_inner(bytes).map_err(|message| DpfedError::Format {
        path: "<bytes>".into(),
        message,
    })
}

pub fn write_params(path: &Path, params: &ParamVector) -> Result<()> {
    fs::write(path, encode(params)).at(path)
}

pub fn read_params(path: &Path) -> Result<ParamVector> {
    let bytes = fs::read(path).at(path)?;
    decode_inner(&bytes).map_err(|message| DpfedError::Format {
        path: path.to_owned(),
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamVector {
        ParamVector::from_pairs(vec![
            ("embedding", vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]),
            ("bias", vec![0.1 + 0.2]),
        ])
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let back = decode(&encode(&p)).unwrap();
        assert_eq!(back.shape(), p.shape());
        let a: Vec<u64> = p.values().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.values().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
