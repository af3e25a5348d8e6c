//! Big-endian byte helpers shared by the wire formats.

use num_bigint::BigUint;

use crate::error::{Error, Result};

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_bits().to_be_bytes());
}

/// Writes `v` as a 4-byte big-endian length followed by its minimal
/// big-endian magnitude. Zero is written with length 0.
pub fn put_biguint(out: &mut Vec<u8>, v: &BigUint) {
    if v.bits() == 0 {
        put_u32(out, 0);
        return;
    }
    let bytes = v.to_bytes_be();
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(&bytes);
}

/// Writes the low `width` bytes of `v` big-endian.
pub fn put_uint_be(out: &mut Vec<u8>, v: u128, width: usize) {
    let bytes = v.to_be_bytes();
    out.extend_from_slice(&bytes[16 - width..]);
}

/// Cursor over a byte slice. Every read is bounds-checked.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Codec(format!(
                "truncated input: need {n} bytes, have {}",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn biguint(&mut self) -> Result<BigUint> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        Ok(BigUint::from_bytes_be(bytes))
    }

    pub fn uint_be(&mut self, width: usize) -> Result<u128> {
        debug_assert!(width <= 16);
        let bytes = self.take(width)?;
        let mut v = 0u128;
        for &b in bytes {
            v = (v << 8) | b as u128;
        }
        Ok(v)
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Codec(format!(
                "{} trailing bytes after payload",
                self.remaining()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn biguint_roundtrip_and_zero() {
        for v in [BigUint::from(0u32), BigUint::from(1u32), BigUint::from(u128::MAX) << 7] {
            let mut out = Vec::new();
            put_biguint(&mut out, &v);
            let mut r = Reader::new(&out);
            assert_eq!(r.biguint().unwrap(), v);
            r.finish().unwrap();
        }
    }

    #[test]
    fn truncated_reads_fail() {
        let mut r = Reader::new(&[0, 0, 0, 5, 1]);
        assert!(r.biguint().is_err());
    }

    #[test]
    fn fixed_width_uint() {
        let mut out = Vec::new();
        put_uint_be(&mut out, 0x0102_0304, 3);
        assert_eq!(out, vec![2, 3, 4]);
        assert_eq!(Reader::new(&out).uint_be(3).unwrap(), 0x020304);
    }
}
