//! Little-endian binary checkpoint encoding shared by all model files.
//!
//! Every file starts with an 8-byte magic and a `u32` format version.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{DenseMatrix, Layer, MlpParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8]) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(FORMAT_VERSION);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn usizes(&mut self, vs: &[usize]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.u64(*v as u64);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn mlp(&mut self, mlp: &MlpParams) {
        self.usizes(&mlp.layer_sizes());
        for layer in mlp.layers() {
            self.f64s(layer.weight.as_slice());
            self.f64s(&layer.bias);
            if let Some(s) = &layer.prelu {
                self.f64s(s);
            }
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.buf)?;
        Ok(())
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], magic: &[u8; 8], origin: &'a Path) -> Result<Self> {
        let mut r = Self { buf, pos: 0, origin };
        let head = r.take(8)?;
        if head != magic {
            return Err(r.err(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(head)
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.err(format!("unsupported format version {version}")));
        }
        Ok(r)
    }

    pub fn err(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.origin.to_owned(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err("truncated file")),
        }
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| self.err(format!("implausible length {v}")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(self.err("truncated file"));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len()?;
        (0..n).map(|_| self.len()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }

    pub fn mlp(&mut self) -> Result<MlpParams> {
        let sizes = self.usizes()?;
        if sizes.len() < 2 {
            return Err(self.err("MLP needs at least two sizes"));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (k, w) in sizes.windows(2).enumerate() {
            let weight = DenseMatrix::from_vec(w[1], w[0], self.f64s(w[0] * w[1])?)
                .map_err(|e| self.err(e.to_string()))?;
            let bias = self.f64s(w[1])?;
            let prelu = if k + 2 < sizes.len() { Some(self.f64s(w[1])?) } else { None };
            layers.push(Layer { weight, bias, prelu });
        }
        MlpParams::from_layers(layers).map_err(|e| self.err(e.to_string()))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Hex-encoded SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
