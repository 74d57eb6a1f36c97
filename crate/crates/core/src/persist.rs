//! Versioned binary persistence with whole-file checksums.
//!
//! Layout shared by model and store files: an 8-byte magic, a u32 version,
//! the payload, and a trailing SHA-256 over everything before it. A load
//! either returns the complete object or an error; a flipped byte anywhere
//! fails the checksum before any parsing happens.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{EccwModel, ModelConfig};
use crate::params::Param;

pub const MODEL_MAGIC: &[u8; 8] = b"VDXMODEL";
pub const MODEL_VERSION: u32 = 1;

/// Append-only buffer for building checksummed files.
pub(crate) struct FileWriter {
    buf: Vec<u8>,
}

impl FileWriter {
    pub fn new(magic: &[u8; 8], version: u32) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        FileWriter { buf }
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn f64_slice(&mut self, values: &[f64]) {
        self.u64(values.len() as u64);
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, data: &[u8]) {
        self.u64(data.len() as u64);
        self.buf.extend_from_slice(data);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        std::fs::write(path, &self.buf)?;
        Ok(())
    }
}

/// Checksum-verified reader over a loaded file.
pub(crate) struct FileReader {
    data: Vec<u8>,
    pos: usize,
}

impl FileReader {
    pub fn open(path: &Path, magic: &[u8; 8], version: u32) -> Result<Self> {
        let data = std::fs::read(path)
            .map_err(|e| Error::Persist(format!("cannot read {}: {e}", path.display())))?;
        if data.len() < 8 + 4 + 32 {
            return Err(Error::Persist(format!(
                "{} is truncated ({} bytes)",
                path.display(),
                data.len()
            )));
        }
        let (payload, stored) = data.split_at(data.len() - 32);
        let digest = Sha256::digest(payload);
        if digest.as_slice() != stored {
            return Err(Error::Persist(format!(
                "{} failed its checksum",
                path.display()
            )));
        }
        if &payload[..8] != magic {
            return Err(Error::Persist(format!(
                "{} has wrong magic bytes",
                path.display()
            )));
        }
        let got_version = u32::from_le_bytes(payload[8..12].try_into().unwrap());
        if got_version != version {
            return Err(Error::Persist(format!(
                "{} is version {got_version}, expected {version}",
                path.display()
            )));
        }
        let len = payload.len();
        let mut reader = FileReader { data, pos: 12 };
        reader.data.truncate(len);
        Ok(reader)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Persist("unexpected end of file".into()));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn f64_slice(&mut self) -> Result<Vec<f64>> {
        let len = self.u64()? as usize;
        let raw = self.take(len * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let len = self.u64()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    pub fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?)
            .map_err(|_| Error::Persist("invalid UTF-8 string".into()))
    }

    pub fn done(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Persist(format!(
                "{} trailing bytes after payload",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Write config and every parameter block.
pub fn save_model(model: &EccwModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = FileWriter::new(MODEL_MAGIC, MODEL_VERSION);
    let config =
        serde_json::to_string(&model.config).map_err(|e| Error::Persist(e.to_string()))?;
    w.str(&config);
    let params = model.params();
    w.u64(params.len() as u64);
    for p in params {
        w.str(&p.name);
        w.u64(p.shape.len() as u64);
        for &extent in &p.shape {
            w.u64(extent as u64);
        }
        w.u8(p.trainable as u8);
        w.f64_slice(&p.data);
    }
    w.finish(path.as_ref())
}

/// Rebuild a model from its file. Configuration travels with the weights;
/// every stored parameter must match the rebuilt architecture exactly.
pub fn load_model(path: impl AsRef<Path>) -> Result<EccwModel> {
    let mut r = FileReader::open(path.as_ref(), MODEL_MAGIC, MODEL_VERSION)?;
    let config: ModelConfig = serde_json::from_str(&r.str()?)
        .map_err(|e| Error::Persist(format!("invalid model config: {e}")))?;

    let mut stored: Vec<Param> = Vec::new();
    let count = r.u64()? as usize;
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let trainable = r.u8()? != 0;
        let data = r.f64_slice()?;
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Persist(format!(
                "parameter {name} has {} values for shape {shape:?}",
                data.len()
            )));
        }
        stored.push(Param {
            name,
            shape,
            data,
            trainable,
        });
    }
    r.done()?;

    // Seed value is irrelevant: every parameter is overwritten below.
    let mut model = EccwModel::new(config, 0)?;
    let mut remaining: std::collections::HashMap<String, Param> =
        stored.into_iter().map(|p| (p.name.clone(), p)).collect();
    for param in model.params_mut() {
        let loaded = remaining.remove(&param.name).ok_or_else(|| {
            Error::Persist(format!("model file is missing parameter {}", param.name))
        })?;
        if loaded.shape != param.shape {
            return Err(Error::Persist(format!(
                "parameter {} has shape {:?}, expected {:?}",
                param.name, loaded.shape, param.shape
            )));
        }
        param.data = loaded.data;
        param.trainable = loaded.trainable;
    }
    if let Some(name) = remaining.keys().next() {
        return Err(Error::Persist(format!(
            "model file has unexpected parameter {name}"
        )));
    }
    Ok(model)
}
