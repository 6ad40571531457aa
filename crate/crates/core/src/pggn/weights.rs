//! Binary weight file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PGGN" | u16 version | u32 tensor count
//! per tensor: u16 name length | name (utf-8) | u8 rank | u32 dims... | u64 data offset
//! data: f32 arrays, offsets relative to the start of this section
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Generator tensors are named `gen.*`, discriminator tensors `disc.*`.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{DiscriminatorWeights, GeneratorWeights, PggnError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PGGN";
pub const WEIGHT_FILE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum WeightFileError {
    #[error("cannot read or write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("weight file truncated")]
    Truncated,
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Layout(#[from] PggnError),
}

/// Generator plus, when saved after training, its discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct PggnBundle {
    pub generator: GeneratorWeights,
    pub discriminator: Option<DiscriminatorWeights>,
}

pub fn save_weights(path: &Path, bundle: &PggnBundle) -> Result<(), WeightFileError> {
    let mut named: Vec<&(String, Tensor<f32>)> = bundle.generator.named().iter().collect();
    if let Some(d) = &bundle.discriminator {
        named.extend(d.named());
    }
    let bytes = encode(&named);
    fs::write(path, bytes).map_err(|source| WeightFileError::Io { path: path.to_path_buf(), source })
}

pub fn load_weights(path: &Path) -> Result<PggnBundle, WeightFileError> {
    let bytes = fs::read(path).map_err(|source| WeightFileError::Io { path: path.to_path_buf(), source })?;
    let named = decode(&bytes)?;
    let (gen, disc): (Vec<_>, Vec<_>) = named.into_iter().partition(|(n, _)| n.starts_with("gen."));
    if let Some((name, _)) = disc.iter().find(|(n, _)| !n.starts_with("disc.")) {
        return Err(WeightFileError::Malformed(format!("unknown tensor {name}")));
    }
    let generator = GeneratorWeights::from_named(gen)?;
    let discriminator = if disc.is_empty() { None } else { Some(DiscriminatorWeights::from_named(disc)?) };
    Ok(PggnBundle { generator, discriminator })
}

fn encode(named: &[&(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&WEIGHT_FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in named.iter().map(|e| (&e.0, &e.1)) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.numel() as u64;
    }
    for (_, t) in named.iter().map(|e| (&e.0, &e.1)) {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightFileError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(WeightFileError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], WeightFileError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, WeightFileError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(WeightFileError::BadMagic);
    }
    if bytes.len() < 4 + 2 + 4 + 4 {
        return Err(WeightFileError::Truncated);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != WEIGHT_FILE_VERSION {
        return Err(WeightFileError::UnsupportedVersion(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(WeightFileError::Checksum { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 6 };
    let count = u32::from_le_bytes(r.array()?) as usize;
    let mut manifest = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| WeightFileError::Malformed("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.array::<1>()?[0] as usize;
        let shape = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(r.array()?) as usize))
            .collect::<Result<Vec<_>, WeightFileError>>()?;
        let offset = u64::from_le_bytes(r.array()?);
        manifest.push((name, shape, offset));
    }
    let data = &body[r.pos..];
    manifest
        .into_iter()
        .map(|(name, shape, offset)| {
            let numel: usize = shape.iter().product();
            let start = usize::try_from(offset).map_err(|_| WeightFileError::Truncated)?;
            let end = start.checked_add(4 * numel).filter(|&e| e <= data.len()).ok_or(WeightFileError::Truncated)?;
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, values).map_err(|e| WeightFileError::Malformed(e.to_string()))?;
            Ok((name, t))
        })
        .collect()
}
