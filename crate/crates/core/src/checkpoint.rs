//! Versioned binary container for named parameter groups.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  4 bytes  "RFK1"
//! count  u32      number of parameter groups
//! per group:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, extents (u32 each)
//!   values   product(extents) f64, IEEE-754 little-endian bit patterns
//! ```
//!
//! Values round-trip bit-exactly (negative zero and denormals included).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RFK1";

/// Serialises named tensors in the given order.
pub fn encode(groups: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for (name, tensor) in groups {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::invalid(
                "checkpoint::decode",
                format!(
                    "truncated container: wanted {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a container produced by [`encode`]. Rejects bad magic, truncation
/// and trailing bytes; no partial result is returned.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::invalid(
            "checkpoint::decode",
            "bad magic (expected RFK1)",
        ));
    }
    let count = r.u32()? as usize;
    let mut groups = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::invalid("checkpoint::decode", "group name is not UTF-8"))?
            .into();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut n = 1usize;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            n = n
                .checked_mul(d)
                .ok_or_else(|| Error::invalid("checkpoint::decode", "extent overflow"))?;
            shape.push(d);
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let b = r.take(8)?;
            data.push(f64::from_bits(u64::from_le_bytes([
                b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
            ])));
        }
        groups.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::invalid(
            "checkpoint::decode",
            format!("{} trailing bytes after last group", bytes.len() - r.pos),
        ));
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn round_trip_preserves_bits_including_negative_zero_and_denormals() {
        let denormal = f64::from_bits(0x0000_0000_0000_0001);
        let t = Tensor::new(
            vec![2, 3],
            vec![-0.0, denormal, -denormal, 1.5, f64::MIN_POSITIVE, -2.25e-308],
        )
        .unwrap();
        let groups = vec![("weights".to_string(), t)];
        let decoded = decode(&encode(&groups)).unwrap();
        assert_eq!(decoded.len(), 1);
        assert_eq!(decoded[0].0, "weights");
        for (a, b) in decoded[0].1.data().iter().zip(groups[0].1.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn round_trip_many_random_groups() {
        let mut rng = Rng::new(123);
        let mut groups = Vec::new();
        for i in 0..50 {
            let shape = [1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(3)];
            groups.push((
                alloc::format!("group.{i}"),
                Tensor::random_uniform(&shape, -10.0, 10.0, &mut rng),
            ));
        }
        let decoded = decode(&encode(&groups)).unwrap();
        assert_eq!(decoded.len(), groups.len());
        for ((na, ta), (nb, tb)) in decoded.iter().zip(&groups) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            for (a, b) in ta.data().iter().zip(tb.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let groups = vec![("x".to_string(), Tensor::scalar(1.0))];
        let mut bytes = encode(&groups);
        bytes[0] = b'Q';
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let groups = vec![("x".to_string(), Tensor::scalar(1.0))];
        let bytes = encode(&groups);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(decode(&extended).is_err());
    }

    #[test]
    fn empty_container_round_trips() {
        let decoded = decode(&encode(&[])).unwrap();
        assert!(decoded.is_empty());
    }
}
