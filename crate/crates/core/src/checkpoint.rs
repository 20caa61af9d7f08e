//! Binary checkpoint container for [`ModelBundle`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "DSCKPT\0\0"
//! format     u32       FORMAT_VERSION
//! header     u64 len + UTF-8 JSON (configs, bundle version, metadata)
//! tensors    u32 count, then per tensor:
//!              u32 name len + UTF-8 name
//!              u32 rank + u64 per dim
//!              f64 per value (row-major)
//! checksum   32 bytes  SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::PreprocessConfig;
use crate::encoder::{EncoderConfig, EncoderParams, TextEmbedderSpec};
use crate::error::{Error, Result};
use crate::model::{FusionParams, ModelBundle, TrainMetadata};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"DSCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    bundle_version: u64,
    visual: EncoderConfig,
    audio: EncoderConfig,
    fusion_dims: (usize, usize, usize),
    text: TextEmbedderSpec,
    preprocess: PreprocessConfig,
    train: TrainConfig,
    metadata: TrainMetadata,
}

pub fn to_bytes(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        bundle_version: bundle.version,
        visual: *bundle.visual.config(),
        audio: *bundle.audio.config(),
        fusion_dims: bundle.fusion.dims(),
        text: bundle.text,
        preprocess: bundle.preprocess,
        train: bundle.train,
        metadata: bundle.metadata.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let tensors: Vec<(String, &Tensor)> = bundle.named_tensors().collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
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
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, wide: bool) -> Result<usize> {
        let n = if wide { self.u64()? } else { u64::from(self.u32()?) };
        usize::try_from(n).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found,
            supported: FORMAT_VERSION,
        });
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(Error::Checksum);
    }
    let mut r = Reader { buf: body, pos: 12 };
    let header_len = r.len(true)?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)?;
    let count = r.len(false)?;
    let (mut visual, mut audio, mut fusion) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..count {
        let name_len = r.len(false)?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.len(false)?;
        let shape = (0..rank).map(|_| r.len(true)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= body.len()))
            .ok_or_else(|| Error::Checkpoint(format!("bad shape for {name}")))?;
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        if let Some(n) = name.strip_prefix("visual.") {
            visual.push((n.to_string(), tensor));
        } else if let Some(n) = name.strip_prefix("audio.") {
            audio.push((n.to_string(), tensor));
        } else if name.starts_with("fusion.") {
            fusion.push((name, tensor));
        } else {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    let (fi, fh, fo) = header.fusion_dims;
    Ok(ModelBundle {
        version: header.bundle_version,
        visual: EncoderParams::from_tensors(header.visual, visual)?,
        audio: EncoderParams::from_tensors(header.audio, audio)?,
        fusion: FusionParams::from_tensors(fi, fh, fo, fusion)?,
        text: header.text,
        preprocess: header.preprocess,
        train: header.train,
        metadata: header.metadata,
    })
}

/// Writes via a temporary file and rename so readers never see a partial
/// checkpoint.
pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let bytes = to_bytes(bundle)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
