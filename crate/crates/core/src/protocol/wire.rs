//! Byte-level helpers shared by the record and genesis encodings.

use num_bigint::BigInt;

use super::{ProtocolError, Result};
use crate::crypto::{PublicKey, Signature, PUBLIC_KEY_LEN, SIGNATURE_LEN};
use crate::fixedpoint::FpVector;

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ProtocolError::Decode(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("N bytes"))
    }

    pub fn vector(&mut self) -> Result<FpVector> {
        let at = self.pos;
        let (v, used) = FpVector::decode_prefix(&self.bytes[self.pos..])
            .map_err(|e| ProtocolError::Decode(format!("vector at byte {at}: {e}")))?;
        self.pos += used;
        Ok(v)
    }

    pub fn signature(&mut self) -> Result<Signature> {
        Ok(Signature(self.fixed::<SIGNATURE_LEN>()?))
    }

    pub fn public_key(&mut self) -> Result<PublicKey> {
        Ok(PublicKey(self.fixed::<PUBLIC_KEY_LEN>()?))
    }

    /// Signed big-endian two's-complement integer with a `u32` length.
    pub fn big_int(&mut self) -> Result<BigInt> {
        let len = self.u32()? as usize;
        Ok(BigInt::from_signed_bytes_be(self.take(len)?))
    }

    pub fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| ProtocolError::Decode("invalid utf-8".into()))
    }

    pub fn finish(&self) -> Result<()> {
        if !self.is_empty() {
            return Err(ProtocolError::Decode(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn put_big_int(out: &mut Vec<u8>, value: &BigInt) {
    let bytes = value.to_signed_bytes_be();
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&bytes);
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}
