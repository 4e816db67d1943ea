//! Little-endian binary container for parameter sets.
//!
//! ```text
//! u32 entry_count
//! repeated entry_count times:
//!   u32 name_len, name (UTF-8)
//!   u32 rank, rank x u64 dims
//!   product(dims) x f64 payload
//! ```

use super::{ParameterSet, Result, Tensor, TensorError};

/// Size in bytes of the encoded container.
pub fn encoded_len(params: &ParameterSet) -> usize {
    4 + params
        .iter()
        .map(|(n, t)| 8 + n.len() + 8 * t.shape().len() + 8 * t.len())
        .sum::<usize>()
}

pub fn encode_parameter_set(params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(params));
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TensorError::Decode(format!("truncated at byte {}", self.pos)))?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_parameter_set(bytes: &[u8]) -> Result<ParameterSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| TensorError::Decode(format!("entry name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut len: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?)
                .map_err(|_| TensorError::Decode("dimension overflow".into()))?;
            len = len
                .checked_mul(d)
                .ok_or_else(|| TensorError::Decode("dimension overflow".into()))?;
            shape.push(d);
        }
        let byte_len = len
            .checked_mul(8)
            .ok_or_else(|| TensorError::Decode("payload overflow".into()))?;
        let data = r
            .take(byte_len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(TensorError::Decode(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    ParameterSet::new(entries)
}
