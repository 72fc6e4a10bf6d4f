use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};

pub(super) struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.out.write_all(b)?;
        Ok(())
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub fn u16(&mut self, v: u16) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64s(&mut self, v: &[f64]) -> Result<()> {
        v.iter().try_for_each(|x| self.f64(*x))
    }

    pub fn f32s(&mut self, v: &[f64]) -> Result<()> {
        v.iter().try_for_each(|x| self.bytes(&(*x as f32).to_le_bytes()))
    }

    /// `u32` length prefix then the values.
    pub fn len_f64s(&mut self, v: &[f64]) -> Result<()> {
        self.u32(v.len() as u32)?;
        self.f64s(v)
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub(super) struct Reader<R: Read> {
    input: R,
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::format("file is truncated")
    } else {
        Error::Io(e)
    }
}

impl<R: Read> Reader<R> {
    pub fn new(input: R) -> Self {
        Self { input }
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.input.read_exact(&mut b).map_err(truncated)?;
        Ok(b)
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let got = (&mut self.input).take(n as u64).read_to_end(&mut out)?;
        if got != n {
            return Err(Error::format("file is truncated"));
        }
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// A `u32` count that must not exceed `max`.
    pub fn count(&mut self, max: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > max {
            return Err(Error::format(format!("count {n} exceeds limit {max}")));
        }
        Ok(n)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| Error::format("array too large"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| Error::format("array too large"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn len_f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.count(1 << 24)?;
        self.f64s(n)
    }

    pub fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.input.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::format("trailing bytes after payload")),
        }
    }
}
