//! Acoustic log-likelihood matrices and their binary wire format.
//!
//! A matrix holds one row of `f32` log-likelihoods per frame, indexed by
//! input label. Column 0 belongs to epsilon and is never read by the
//! decoder. On disk: magic `LXP1`, then `num_frames` and `num_ilabels` as
//! little-endian u32, then the rows as little-endian f32, row-major.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"LXP1";

#[derive(Debug, Error)]
pub enum PosteriorError {
    #[error("bad magic: expected LXP1")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes of values, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("non-finite value at frame {frame}, ilabel {ilabel}")]
    NonFinite { frame: u32, ilabel: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-frame log-likelihoods, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    num_frames: u32,
    num_ilabels: u32,
    values: Vec<f32>,
}

impl PosteriorMatrix {
    pub fn from_rows(num_ilabels: u32, rows: &[Vec<f32>]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * num_ilabels as usize);
        for row in rows {
            assert_eq!(row.len(), num_ilabels as usize, "row width mismatch");
            values.extend_from_slice(row);
        }
        PosteriorMatrix { num_frames: rows.len() as u32, num_ilabels, values }
    }

    /// Deterministic synthetic scores: background noise per label plus one
    /// peaked label per frame whose magnitude scales with `sharpness`.
    pub fn synthetic(num_frames: u32, num_ilabels: u32, seed: u64, sharpness: f64) -> Self {
        assert!(num_ilabels >= 1, "need at least the epsilon column");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity((num_frames * num_ilabels) as usize);
        for _ in 0..num_frames {
            let peak = if num_ilabels > 1 { rng.gen_range(1..num_ilabels) } else { 0 };
            let base = values.len();
            for _ in 0..num_ilabels {
                values.push(rng.gen_range(-1.0f32..1.0f32));
            }
            if num_ilabels > 1 {
                values[base + peak as usize] += sharpness as f32;
            }
        }
        PosteriorMatrix { num_frames, num_ilabels, values }
    }

    pub fn read<R: Read>(reader: &mut R) -> Result<Self, PosteriorError> {
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(PosteriorError::BadMagic);
        }
        let mut head = [0u8; 8];
        reader.read_exact(&mut head)?;
        let num_frames = u32::from_le_bytes(head[0..4].try_into().unwrap());
        let num_ilabels = u32::from_le_bytes(head[4..8].try_into().unwrap());
        let count = num_frames as usize * num_ilabels as usize;
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        if bytes.len() < count * 4 {
            return Err(PosteriorError::Truncated { expected: count * 4, got: bytes.len() });
        }
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let v = f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(PosteriorError::NonFinite {
                    frame: (i / num_ilabels as usize) as u32,
                    ilabel: (i % num_ilabels as usize) as u32,
                });
            }
            values.push(v);
        }
        Ok(PosteriorMatrix { num_frames, num_ilabels, values })
    }

    pub fn write<W: Write>(&self, writer: &mut W) -> std::io::Result<()> {
        writer.write_all(&MAGIC)?;
        writer.write_all(&self.num_frames.to_le_bytes())?;
        writer.write_all(&self.num_ilabels.to_le_bytes())?;
        for v in &self.values {
            writer.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_path<P: AsRef<Path>>(path: P) -> Result<Self, PosteriorError> {
        let file = std::fs::File::open(path)?;
        Self::read(&mut std::io::BufReader::new(file))
    }

    pub fn write_path<P: AsRef<Path>>(&self, path: P) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w)
    }

    pub fn num_frames(&self) -> u32 {
        self.num_frames
    }

    pub fn num_ilabels(&self) -> u32 {
        self.num_ilabels
    }

    #[inline]
    pub fn row(&self, frame: u32) -> &[f32] {
        let w = self.num_ilabels as usize;
        &self.values[frame as usize * w..(frame as usize + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.num_ilabels.max(1) as usize).take(self.num_frames as usize)
    }

    /// Copies a contiguous frame range into a new matrix, for chunked feeds.
    pub fn slice(&self, range: std::ops::Range<u32>) -> PosteriorMatrix {
        assert!(range.start <= range.end && range.end <= self.num_frames);
        let w = self.num_ilabels as usize;
        PosteriorMatrix {
            num_frames: range.end - range.start,
            num_ilabels: self.num_ilabels,
            values: self.values[range.start as usize * w..range.end as usize * w].to_vec(),
        }
    }
}
