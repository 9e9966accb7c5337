use std::fmt::Write as _;

use crate::corpus::{Vocab, NUM_RESERVED};

/// Per-word-type global importance scores, indexed by vocabulary id.
/// Reserved ids carry no score.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceTable {
    scores: Vec<f64>,
}

impl ImportanceTable {
    pub fn from_fn(vocab_len: usize, mut f: impl FnMut(usize) -> f64) -> Self {
        let scores = (0..vocab_len)
            .map(|id| if id < NUM_RESERVED { f64::NAN } else { f(id) })
            .collect();
        Self { scores }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.len() <= NUM_RESERVED
    }

    /// Score of `id`; reserved or out-of-range ids rank below every word.
    pub fn get(&self, id: usize) -> f64 {
        match self.scores.get(id) {
            Some(s) if !s.is_nan() => *s,
            _ => f64::NEG_INFINITY,
        }
    }

    /// Non-reserved `(id, score)` pairs, highest score first, ties broken
    /// lexicographically by token.
    pub fn ranked(&self, vocab: &Vocab) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = (NUM_RESERVED..self.scores.len()).map(|i| (i, self.scores[i])).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| vocab.token(a.0).cmp(vocab.token(b.0))));
        v
    }

    /// `token<TAB>score<TAB>freq`, descending score.
    pub fn to_tsv(&self, vocab: &Vocab) -> String {
        let mut s = String::new();
        for (id, score) in self.ranked(vocab) {
            writeln!(s, "{}\t{}\t{}", vocab.token(id), score, vocab.freq(id)).unwrap();
        }
        s
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}
