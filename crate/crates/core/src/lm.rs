//! Add-k smoothed n-gram language model over token ids.
//!
//! Orders 1 and 2 only. The boundary symbol starts and ends every
//! sequence, so the bigram tables learn which tokens open and close an
//! utterance. Ids at or above the vocabulary collapse into slot 0, which
//! doubles as the unknown class.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("n-gram order must be 1 or 2, got {0}")]
    BadOrder(usize),
    #[error("vocabulary must be nonempty")]
    EmptyVocab,
    #[error("smoothing constant must be positive, got {0}")]
    BadSmoothing(f64),
    #[error("boundary token {boundary} outside vocabulary {vocab}")]
    BadBoundary { boundary: usize, vocab: usize },
    #[error("count table for order {order} needs {expected} entries, got {got}")]
    BadCounts {
        order: usize,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    vocab: usize,
    k: f64,
    boundary: usize,
    uni: Vec<u64>,
    uni_total: u64,
    /// Row-major `vocab x vocab` successor counts; empty for order 1.
    bi: Vec<u64>,
    bi_totals: Vec<u64>,
}

impl NgramModel {
    pub fn train(
        order: usize,
        vocab: usize,
        k: f64,
        boundary: usize,
        seqs: &[Vec<usize>],
    ) -> Result<NgramModel, LmError> {
        let mut model = NgramModel::empty(order, vocab, k, boundary)?;
        for seq in seqs {
            let mut events: Vec<usize> = seq.iter().map(|&t| model.clamp(t)).collect();
            events.push(boundary);
            let mut prev = boundary;
            for t in events {
                model.count(prev, t);
                prev = t;
            }
        }
        Ok(model)
    }

    fn empty(order: usize, vocab: usize, k: f64, boundary: usize) -> Result<NgramModel, LmError> {
        if order == 0 || order > 2 {
            return Err(LmError::BadOrder(order));
        }
        if vocab == 0 {
            return Err(LmError::EmptyVocab);
        }
        if !(k > 0.0) {
            return Err(LmError::BadSmoothing(k));
        }
        if boundary >= vocab {
            return Err(LmError::BadBoundary { boundary, vocab });
        }
        let pairs = if order == 2 { vocab * vocab } else { 0 };
        Ok(NgramModel {
            order,
            vocab,
            k,
            boundary,
            uni: vec![0; vocab],
            uni_total: 0,
            bi: vec![0; pairs],
            bi_totals: vec![0; if order == 2 { vocab } else { 0 }],
        })
    }

    /// Rebuild from serialized counts; totals are recomputed.
    pub fn from_counts(
        order: usize,
        vocab: usize,
        k: f64,
        boundary: usize,
        uni: Vec<u64>,
        bi: Vec<u64>,
    ) -> Result<NgramModel, LmError> {
        let mut model = NgramModel::empty(order, vocab, k, boundary)?;
        if uni.len() != vocab {
            return Err(LmError::BadCounts {
                order: 1,
                expected: vocab,
                got: uni.len(),
            });
        }
        let pairs = if order == 2 { vocab * vocab } else { 0 };
        if bi.len() != pairs {
            return Err(LmError::BadCounts {
                order: 2,
                expected: pairs,
                got: bi.len(),
            });
        }
        model.uni_total = uni.iter().sum();
        model.uni = uni;
        if order == 2 {
            for h in 0..vocab {
                model.bi_totals[h] = bi[h * vocab..(h + 1) * vocab].iter().sum();
            }
        }
        model.bi = bi;
        Ok(model)
    }

    fn clamp(&self, t: usize) -> usize {
        if t < self.vocab {
            t
        } else {
            0
        }
    }

    fn count(&mut self, prev: usize, next: usize) {
        self.uni[next] += 1;
        self.uni_total += 1;
        if self.order == 2 {
            self.bi[prev * self.vocab + next] += 1;
            self.bi_totals[prev] += 1;
        }
    }

    /// Log-probability of `next` after `history`; only the last history
    /// token matters, and an empty history means utterance start.
    pub fn log_prob(&self, history: &[usize], next: usize) -> f64 {
        let next = self.clamp(next);
        let (num, den) = match self.order {
            1 => (self.uni[next], self.uni_total),
            _ => {
                let h = history.last().map_or(self.boundary, |&t| self.clamp(t));
                (self.bi[h * self.vocab + next], self.bi_totals[h])
            }
        };
        ((num as f64 + self.k) / (den as f64 + self.k * self.vocab as f64)).ln()
    }

    /// Total log-probability of a sequence including its closing boundary.
    pub fn sequence_log_prob(&self, seq: &[usize]) -> f64 {
        let mut total = 0.0;
        for (i, &t) in seq.iter().enumerate() {
            total += self.log_prob(&seq[..i], t);
        }
        total + self.log_prob(seq, self.boundary)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn smoothing(&self) -> f64 {
        self.k
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn uni_counts(&self) -> &[u64] {
        &self.uni
    }

    pub fn bi_counts(&self) -> &[u64] {
        &self.bi
    }
}
