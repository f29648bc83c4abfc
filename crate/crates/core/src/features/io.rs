//! Binary feature files, all little-endian:
//!
//! ```text
//! "DGVC" | u32 version | u32 Q | u32 T | f64 frame_rate | u32 sample_rate
//! | mcep f32[Q*T] (row-major) | logf0 f32[T] | voiced u8[T] | u32 ap_len | ap u8[ap_len]
//! ```

use std::path::Path;

use super::FeatureSequence;
use crate::error::{Error, FormatError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DGVC";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes a sequence. Values are stored as `f32`.
pub fn encode<T: Scalar>(seq: &FeatureSequence<T>) -> Vec<u8> {
    let (q, t) = (seq.order(), seq.frames());
    let mut out = Vec::with_capacity(28 + 4 * q * t + 5 * t + 4 + seq.ap().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(q as u32).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&seq.frame_rate().to_le_bytes());
    out.extend_from_slice(&seq.sample_rate().to_le_bytes());
    for v in seq.mcep().data().iter().chain(seq.logf0()) {
        out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
    }
    out.extend(seq.voiced().iter().map(|&v| v as u8));
    out.extend_from_slice(&(seq.ap().len() as u32).to_le_bytes());
    out.extend_from_slice(seq.ap());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let have = self.bytes.len() - self.pos;
        if n > have {
            return Err(FormatError::Truncated { offset: self.pos, needed: n, have });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, field: &'static str) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(n.checked_mul(4).ok_or(FormatError::Header("size overflow".into()))?)?;
        let vals: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(index) = vals.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite { field, index });
        }
        Ok(vals)
    }
}

/// Parses a feature file image.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<FeatureSequence<T>, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(FormatError::Magic(magic));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version(version));
    }
    let q = r.u32()? as usize;
    let t = r.u32()? as usize;
    if q == 0 || t == 0 {
        return Err(FormatError::Header(format!("empty feature matrix {q}x{t}")));
    }
    let frame_rate = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    if !(frame_rate.is_finite() && frame_rate > 0.0) {
        return Err(FormatError::Header(format!("frame rate {frame_rate}")));
    }
    let sample_rate = r.u32()?;
    if sample_rate == 0 {
        return Err(FormatError::Header("sample rate 0".into()));
    }
    let n = q.checked_mul(t).ok_or(FormatError::Header("size overflow".into()))?;
    let mcep = r.f32s(n, "mcep")?;
    let logf0 = r.f32s(t, "logf0")?;
    let mask = r.take(t)?;
    if let Some(i) = mask.iter().position(|&b| b > 1) {
        return Err(FormatError::Header(format!("voiced mask byte {} at frame {i}", mask[i])));
    }
    let ap_len = r.u32()? as usize;
    let ap = r.take(ap_len)?.to_vec();
    if r.pos != bytes.len() {
        return Err(FormatError::Trailing(bytes.len() - r.pos));
    }
    let lift = |v: Vec<f32>| v.into_iter().map(|x| T::from_f64_lossy(x as f64)).collect::<Vec<T>>();
    let mcep = Tensor::new(vec![q, t], lift(mcep)).map_err(|e| FormatError::Header(e.to_string()))?;
    FeatureSequence::new(mcep, lift(logf0), mask.iter().map(|&b| b == 1).collect(), ap, frame_rate, sample_rate)
        .map_err(|e| FormatError::Header(e.to_string()))
}

pub fn write_features<T: Scalar>(seq: &FeatureSequence<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_features<T: Scalar>(path: &Path) -> Result<FeatureSequence<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|source| Error::Format { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Stream};

    fn sample() -> FeatureSequence<f32> {
        let mut rng = Stream::new(2, Purpose::Corpus);
        let t = 6;
        let voiced: Vec<bool> = (0..t).map(|i| i % 3 != 0).collect();
        let logf0 = (0..t).map(|i| if voiced[i] { 5.0 + rng.normal() as f32 * 0.1 } else { -1e10 }).collect();
        FeatureSequence::new(rng.normal_tensor(&[4, t]), logf0, voiced, vec![9, 8, 7, 6, 5], 200.0, 16000).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let bytes = encode(&s);
        let back: FeatureSequence<f32> = decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode(&sample());
        let mut m = bytes.clone();
        m[1] = b'X';
        assert!(matches!(decode::<f32>(&m), Err(FormatError::Magic(_))));
        let mut v = bytes.clone();
        v[4] = 2;
        assert_eq!(decode::<f32>(&v), Err(FormatError::Version(2)));
        assert!(matches!(decode::<f32>(&bytes[..bytes.len() - 2]), Err(FormatError::Truncated { .. })));
        let mut nan = bytes.clone();
        nan[28..32].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(decode::<f32>(&nan), Err(FormatError::NonFinite { field: "mcep", index: 0 }));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(decode::<f32>(&extra), Err(FormatError::Trailing(1)));
        let mut empty = bytes.clone();
        empty[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode::<f32>(&empty), Err(FormatError::Header(_))));
    }

    #[test]
    fn every_header_byte_mutation_is_rejected_or_changes_content() {
        let s = sample();
        let bytes = encode(&s);
        for i in 0..28 {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            match decode::<f32>(&b) {
                Err(_) => {}
                Ok(other) => assert_ne!(other, s, "mutation at byte {i} went unnoticed"),
            }
        }
    }
}
