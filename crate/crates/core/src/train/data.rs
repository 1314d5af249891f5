//! Byte-level corpus: every byte is one token of a 256-symbol vocabulary.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::RngState;

/// Fraction of the corpus (rounded up, taken from the end) held out for validation.
pub const VALIDATION_PERCENT: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    bytes: Vec<u8>,
    train_end: usize,
}

/// `tokens[i]` predicts `targets[i]`; `batch` windows stored back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

pub fn validation_len(total: usize) -> usize {
    (total * VALIDATION_PERCENT).div_ceil(100)
}

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn load_corpus(path: &Path, seq_len: usize) -> Result<Dataset> {
    Dataset::from_bytes(std::fs::read(path)?, seq_len)
}

impl Dataset {
    pub fn from_bytes(bytes: Vec<u8>, seq_len: usize) -> Result<Self> {
        let required = (10 * seq_len).max(40);
        if bytes.len() < required {
            return Err(Error::CorpusTooSmall {
                len: bytes.len(),
                required,
            });
        }
        let train_end = bytes.len() - validation_len(bytes.len());
        Ok(Self { bytes, train_end })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[..self.train_end]
    }

    pub fn validation(&self) -> &[u8] {
        &self.bytes[self.train_end..]
    }

    fn window(slice: &[u8], start: usize, len: usize, batch: &mut Batch) {
        batch.tokens.extend(slice[start..start + len].iter().map(|&b| b as usize));
        batch.targets.extend(slice[start + 1..start + len + 1].iter().map(|&b| b as usize));
    }

    /// `batch` windows at uniformly random offsets of the training slice.
    pub fn sample_batch(&self, batch: usize, seq: usize, rng: &mut RngState) -> Batch {
        let train = self.train();
        let seq = seq.min(train.len() - 1);
        let mut out = Batch {
            tokens: Vec::with_capacity(batch * seq),
            targets: Vec::with_capacity(batch * seq),
            batch,
            seq,
        };
        for _ in 0..batch {
            let start = rng.below(train.len() - seq);
            Self::window(train, start, seq, &mut out);
        }
        out
    }

    /// `count` fixed batches whose windows are spread evenly over the validation slice.
    pub fn validation_batches(&self, count: usize, batch: usize, seq: usize) -> Vec<Batch> {
        let val = self.validation();
        let seq = seq.min(val.len() - 1);
        let last = val.len() - seq - 1;
        let windows = (count * batch).max(1);
        (0..count)
            .map(|c| {
                let mut out = Batch {
                    tokens: Vec::with_capacity(batch * seq),
                    targets: Vec::with_capacity(batch * seq),
                    batch,
                    seq,
                };
                for b in 0..batch {
                    let i = c * batch + b;
                    let start = if windows == 1 { 0 } else { i * last / (windows - 1) };
                    Self::window(val, start, seq, &mut out);
                }
                out
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_are_tokens() {
        assert_eq!(tokenize(b"abc"), vec![97, 98, 99]);
    }

    #[test]
    fn too_small_corpus_rejected() {
        assert!(matches!(
            Dataset::from_bytes(vec![0; 100], 256),
            Err(Error::CorpusTooSmall { len: 100, required: 2560 })
        ));
    }

    #[test]
    fn one_mebibyte_split() {
        let d = Dataset::from_bytes(vec![1; 1 << 20], 256).unwrap();
        assert_eq!(d.validation().len(), 52_429);
        assert_eq!(d.train().len() + d.validation().len(), 1 << 20);
    }

    #[test]
    fn batches_stay_in_their_slice() {
        let bytes: Vec<u8> = (0..4000u32).map(|i| if i < 3800 { (i % 200) as u8 } else { 250 }).collect();
        let d = Dataset::from_bytes(bytes, 32).unwrap();
        assert_eq!(d.validation().len(), 200);
        let mut rng = RngState::new(0);
        for _ in 0..200 {
            let b = d.sample_batch(4, 32, &mut rng);
            assert_eq!(b.tokens.len(), 128);
            assert!(b.tokens.iter().chain(&b.targets).all(|&t| t < 200));
            for w in 0..4 {
                for i in 0..31 {
                    assert_eq!(b.targets[w * 32 + i], b.tokens[w * 32 + i + 1]);
                }
            }
        }
        for b in d.validation_batches(3, 2, 32) {
            assert!(b.tokens.iter().chain(&b.targets).all(|&t| t == 250));
        }
    }
}
