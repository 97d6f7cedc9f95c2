//! The cached pool of frame embeddings and its on-disk `UVEB` format.
//!
//! Layout (little-endian throughout):
//!
//! | offset | size      | field                                   |
//! |--------|-----------|-----------------------------------------|
//! | 0      | 4         | magic `UVEB`                            |
//! | 4      | 4         | version, `u32` = 1                      |
//! | 8      | 4         | frame count `N`, `u32`                  |
//! | 12     | 4         | dimension `d`, `u32`                    |
//! | 16     | 4         | flags, `u32` (bit 0: rows unit-norm)    |
//! | 20     | `4·N·d`   | `f32` embeddings, row-major             |
//! | ...    | `8·N`     | `f64` timestamps in seconds             |
//!
//! Rows are held in memory as `f64` but are always `f32`-representable, so a
//! save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::vecmath;

pub const MAGIC: [u8; 4] = *b"UVEB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;
pub const FLAG_NORMALIZED: u32 = 1;

pub const DEFAULT_POOL_SIZE: usize = 64;
pub const DEFAULT_DIM: usize = 768;

/// Rows shorter than this are treated as zero vectors.
pub const MIN_NORM: f64 = 1e-12;
/// Allowed deviation from unit norm for rows flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Anything that can hand out per-frame embeddings.
///
/// The question loop reads every frame from its source exactly once and then
/// works on an [`EmbeddingStore`] cache.
pub trait FrameSource {
    fn n_frames(&self) -> usize;
    fn timestamp(&self, frame: usize) -> f64;
    fn embedding(&self, frame: usize) -> Result<Vec<f64>>;
}

/// Immutable pool of unit-norm frame embeddings with strictly increasing
/// timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: Vec<f64>,
    timestamps: Vec<f64>,
}

/// Byte size of a store file with `n_frames` rows of `dim` floats.
pub fn file_size(n_frames: usize, dim: usize) -> usize {
    HEADER_LEN + n_frames * dim * 4 + n_frames * 8
}

/// L2-normalize a vector.
pub fn normalize(vector: &[f64]) -> Result<Vec<f64>> {
    let n = vecmath::norm(vector);
    if !(n > MIN_NORM) {
        return Err(Error::validation(format!(
            "cannot normalize vector with norm {n:e}"
        )));
    }
    Ok(vector.iter().map(|v| v / n).collect())
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Quantize a row to `f32`, normalizing it first unless it already sits
/// within tolerance of unit norm after quantization.
fn unit_row(row: &[f64], index: usize) -> Result<Vec<f64>> {
    let q: Vec<f64> = row.iter().copied().map(quantize).collect();
    let n = vecmath::norm(&q);
    if !n.is_finite() || n < MIN_NORM {
        return Err(Error::validation(format!(
            "frame {index} has norm {n:e}, below {MIN_NORM:e}"
        )));
    }
    if (n - 1.0).abs() <= UNIT_NORM_TOL {
        return Ok(q);
    }
    let out: Vec<f64> = q.iter().map(|v| quantize(v / n)).collect();
    debug_assert!((vecmath::norm(&out) - 1.0).abs() <= UNIT_NORM_TOL);
    Ok(out)
}

impl EmbeddingStore {
    /// Build a store from raw rows, normalizing each row.
    pub fn from_rows(rows: &[Vec<f64>], timestamps: Vec<f64>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::validation("store needs at least one frame"));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::validation("embedding dimension must be at least 1"));
        }
        let mut vectors = Vec::with_capacity(n * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::validation(format!(
                    "frame {i} has dimension {}, expected {dim}",
                    row.len()
                )));
            }
            vectors.extend(unit_row(row, i)?);
        }
        Self::from_parts(dim, vectors, timestamps)
    }

    fn from_parts(dim: usize, vectors: Vec<f64>, timestamps: Vec<f64>) -> Result<Self> {
        let n = timestamps.len();
        if vectors.len() != n * dim {
            return Err(Error::validation(format!(
                "{} timestamps for {} frames",
                n,
                vectors.len() / dim.max(1)
            )));
        }
        check_timestamps(&timestamps)?;
        Ok(Self {
            dim,
            vectors,
            timestamps,
        })
    }

    /// Read every frame of `source` exactly once into a cached store.
    pub fn cache_from(source: &dyn FrameSource) -> Result<Self> {
        let n = source.n_frames();
        let mut rows = Vec::with_capacity(n);
        let mut timestamps = Vec::with_capacity(n);
        for i in 0..n {
            rows.push(source.embedding(i)?);
            timestamps.push(source.timestamp(i));
        }
        Self::from_rows(&rows, timestamps)
    }

    pub fn n_frames(&self) -> usize {
        self.timestamps.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unit-norm embedding of `frame`.
    ///
    /// Panics if `frame` is out of range; use [`EmbeddingStore::check_index`]
    /// first for untrusted input.
    pub fn row(&self, frame: usize) -> &[f64] {
        &self.vectors[frame * self.dim..(frame + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.chunks_exact(self.dim)
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn check_index(&self, frame: usize) -> Result<()> {
        if frame < self.n_frames() {
            Ok(())
        } else {
            Err(Error::Bounds {
                index: frame,
                len: self.n_frames(),
            })
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.n_frames();
        let mut out = Vec::with_capacity(file_size(n, self.dim));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&FLAG_NORMALIZED.to_le_bytes());
        for &v in &self.vectors {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &t in &self.timestamps {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n = word(8) as usize;
        let dim = word(12) as usize;
        let flags = word(16);
        if n == 0 || dim == 0 {
            return Err(Error::validation(format!(
                "store shape {n}x{dim} must be at least 1x1"
            )));
        }
        let expected = n
            .checked_mul(dim)
            .and_then(|nd| nd.checked_mul(4))
            .and_then(|b| b.checked_add(n * 8 + HEADER_LEN))
            .ok_or_else(|| Error::Format(format!("store shape {n}x{dim} overflows")))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} bytes for {n}x{dim}, found {}",
                bytes.len()
            )));
        }

        let body = &bytes[HEADER_LEN..];
        let (floats, stamps) = body.split_at(n * dim * 4);
        let raw: Vec<f64> = floats
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let timestamps: Vec<f64> = stamps
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let vectors = if flags & FLAG_NORMALIZED != 0 {
            for (i, row) in raw.chunks_exact(dim).enumerate() {
                let norm = vecmath::norm(row);
                if !(norm >= MIN_NORM) {
                    return Err(Error::validation(format!("frame {i} has zero norm")));
                }
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::validation(format!(
                        "frame {i} flagged unit-norm but has norm {norm}"
                    )));
                }
            }
            raw
        } else {
            let mut out = Vec::with_capacity(raw.len());
            for (i, row) in raw.chunks_exact(dim).enumerate() {
                out.extend(unit_row(row, i)?);
            }
            out
        };
        Self::from_parts(dim, vectors, timestamps)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

impl FrameSource for EmbeddingStore {
    fn n_frames(&self) -> usize {
        EmbeddingStore::n_frames(self)
    }

    fn timestamp(&self, frame: usize) -> f64 {
        self.timestamps[frame]
    }

    fn embedding(&self, frame: usize) -> Result<Vec<f64>> {
        self.check_index(frame)?;
        Ok(self.row(frame).to_vec())
    }
}

fn check_timestamps(timestamps: &[f64]) -> Result<()> {
    if let Some(i) = timestamps.iter().position(|t| !t.is_finite()) {
        return Err(Error::validation(format!("timestamp {i} is not finite")));
    }
    if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::validation(format!(
            "timestamps not strictly increasing at frame {}: {} then {}",
            i + 1,
            timestamps[i],
            timestamps[i + 1]
        )));
    }
    Ok(())
}

/// Free-function alias of [`EmbeddingStore::load`].
pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    EmbeddingStore::load(path)
}

/// Free-function alias of [`EmbeddingStore::save`].
pub fn save_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    store.save(path)
}

/// The current search text and its unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub text: String,
    embedding: Vec<f64>,
}

impl SearchState {
    pub fn new(text: impl Into<String>, embedding: &[f64]) -> Result<Self> {
        Ok(Self {
            text: text.into(),
            embedding: normalize(embedding)?,
        })
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }
}
