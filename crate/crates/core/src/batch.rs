use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Several token sequences packed row-wise for one forward pass.
///
/// Attention never crosses sequence boundaries; `segments` records where each
/// sequence starts and how long it is.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<(usize, usize)>,
    pub last_rows: Vec<usize>,
}

impl SeqBatch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S], vocab: usize, max_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyDataset("batch has no sequences".into()));
        }
        let mut batch = SeqBatch {
            tokens: Vec::new(),
            positions: Vec::new(),
            segments: Vec::with_capacity(seqs.len()),
            last_rows: Vec::with_capacity(seqs.len()),
        };
        for seq in seqs {
            let seq = seq.as_ref();
            if seq.is_empty() {
                return Err(Error::EmptyDataset("empty token sequence".into()));
            }
            if seq.len() > max_len {
                return Err(Error::SequenceTooLong {
                    len: seq.len(),
                    max: max_len,
                });
            }
            if let Some(&token) = seq.iter().find(|&&t| t >= vocab) {
                return Err(Error::TokenOutOfRange { token, vocab });
            }
            let start = batch.tokens.len();
            batch.tokens.extend_from_slice(seq);
            batch.positions.extend(0..seq.len());
            batch.segments.push((start, seq.len()));
            batch.last_rows.push(start + seq.len() - 1);
        }
        Ok(batch)
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    /// Number of sequences.
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}
