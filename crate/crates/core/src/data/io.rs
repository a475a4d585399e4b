//! Dataset container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes "E2EMILDS"
//! version   u32     1
//! n_slides  u64
//! d         u64
//! n_slides × {
//!   id u64, t u64, label u8,
//!   witness bitmap ⌈t/8⌉ bytes, tile k at bit k%8 of byte k/8,
//!   tiles f32 × t·d, row-major
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, SyntheticSlide};
use crate::autodiff::Tensor;

const MAGIC: &[u8; 8] = b"E2EMILDS";
const VERSION: u32 = 1;

pub fn encode_dataset(slides: &[SyntheticSlide]) -> Vec<u8> {
    let d = slides.first().map_or(0, |s| s.tiles.cols());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(slides.len() as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for s in slides {
        let t = s.n_tiles();
        out.extend_from_slice(&s.id.to_le_bytes());
        out.extend_from_slice(&(t as u64).to_le_bytes());
        out.push(s.label);
        let mut bitmap = vec![0u8; t.div_ceil(8)];
        for (k, _) in s.witness.iter().enumerate().filter(|(_, &w)| w) {
            bitmap[k / 8] |= 1 << (k % 8);
        }
        out.extend_from_slice(&bitmap);
        for &v in s.tiles.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.bytes.len() < n {
            return Err(DataError::Format("truncated dataset".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SyntheticSlide>, DataError> {
    let mut c = Cursor { bytes };
    if c.take(8)? != MAGIC {
        return Err(DataError::Format("not a dataset file".into()));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4"));
    if version != VERSION {
        return Err(DataError::Format(format!("unsupported dataset version {version}")));
    }
    let n = c.u64()? as usize;
    let d = c.u64()? as usize;
    let mut slides = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let id = c.u64()?;
        let t = c.u64()? as usize;
        let label = c.take(1)?[0];
        if label > 1 {
            return Err(DataError::Format(format!("slide {id} has label {label}")));
        }
        let bitmap = c.take(t.div_ceil(8))?;
        let witness = (0..t).map(|k| bitmap[k / 8] >> (k % 8) & 1 == 1).collect();
        let len = t
            .checked_mul(d)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| DataError::Format("slide too large".into()))?;
        let data = c
            .take(len)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4")) as f64)
            .collect();
        let slide = SyntheticSlide {
            id,
            tiles: Tensor::new(&[t, d], data).expect("sized"),
            label,
            witness,
        };
        if !slide.is_consistent() {
            return Err(DataError::Format(format!("slide {id} label disagrees with witnesses")));
        }
        slides.push(slide);
    }
    if !c.bytes.is_empty() {
        return Err(DataError::Format("trailing bytes in dataset".into()));
    }
    Ok(slides)
}

pub fn write_dataset(slides: &[SyntheticSlide], path: &Path) -> Result<(), DataError> {
    std::fs::write(path, encode_dataset(slides))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SyntheticSlide>, DataError> {
    decode_dataset(&std::fs::read(path)?)
}

/// Human-readable overview of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_slides: usize,
    pub d: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    /// Share of positive slides.
    pub label_balance: f64,
    pub tiles_total: usize,
    pub witness_total: usize,
    /// Tile-count quantiles at 0, 10, 25, 50, 75, 90 and 100 percent.
    pub tile_quantiles: Vec<(f64, usize)>,
    /// `(lower edge, count)` per bin of width `histogram_bin`.
    pub tile_histogram: Vec<(usize, usize)>,
    pub histogram_bin: usize,
    /// SHA-256 of the encoded dataset.
    pub checksum: String,
}

pub fn summarize(slides: &[SyntheticSlide]) -> DatasetSummary {
    let mut counts: Vec<usize> = slides.iter().map(SyntheticSlide::n_tiles).collect();
    counts.sort_unstable();
    let quantile = |q: f64| {
        if counts.is_empty() {
            0
        } else {
            counts[((counts.len() - 1) as f64 * q).round() as usize]
        }
    };
    let bin = 50;
    let max = counts.last().copied().unwrap_or(0);
    let mut histogram: Vec<(usize, usize)> = (0..=max / bin).map(|b| (b * bin, 0)).collect();
    for &c in &counts {
        histogram[c / bin].1 += 1;
    }
    let n_positive = slides.iter().filter(|s| s.label == 1).count();
    DatasetSummary {
        n_slides: slides.len(),
        d: slides.first().map_or(0, |s| s.tiles.cols()),
        n_positive,
        n_negative: slides.len() - n_positive,
        label_balance: if slides.is_empty() {
            0.0
        } else {
            n_positive as f64 / slides.len() as f64
        },
        tiles_total: counts.iter().sum(),
        witness_total: slides.iter().map(SyntheticSlide::n_witness).sum(),
        tile_quantiles: [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0]
            .iter()
            .map(|&q| (q, quantile(q)))
            .collect(),
        tile_histogram: histogram,
        histogram_bin: bin,
        checksum: hex::encode(Sha256::digest(encode_dataset(slides))),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{generate_dataset, DatasetConfig};
    use super::*;

    fn cfg() -> DatasetConfig {
        DatasetConfig {
            n_slides: 12,
            d: 3,
            tiles_median: 20.0,
            tiles_min: 1,
            tiles_max: 40,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let slides = generate_dataset(&cfg(), 5).unwrap();
        let bytes = encode_dataset(&slides);
        assert_eq!(decode_dataset(&bytes).unwrap(), slides);
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode_dataset(&generate_dataset(&cfg(), 5).unwrap());
        assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_dataset(b"E2EMILDX").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_dataset(&extra).is_err());
    }

    #[test]
    fn summary_counts() {
        let slides = generate_dataset(&cfg(), 5).unwrap();
        let s = summarize(&slides);
        assert_eq!(s.n_slides, 12);
        assert_eq!(s.n_positive, 6);
        assert_eq!(s.label_balance, 0.5);
        assert_eq!(s.tile_histogram.iter().map(|h| h.1).sum::<usize>(), 12);
        assert_eq!(s.tiles_total, slides.iter().map(|x| x.n_tiles()).sum::<usize>());
        assert_eq!(s.checksum.len(), 64);
    }
}
