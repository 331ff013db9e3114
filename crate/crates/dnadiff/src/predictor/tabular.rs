//! Exact tabular mask predictor for enumerable instances.
//!
//! `fit_tabular` realizes the optimum of the masked objective by exact
//! conditional counting: at a masked position the row is the empirical
//! distribution of that token given the unmasked context, add-alpha smoothed.

use std::collections::HashMap;

use ndarray::Array2;

use crate::diffusion::MaskedState;
use crate::error::{Error, Result};
use crate::predictor::MaskPredictor;
use crate::seqio::{TokenSequence, Vocabulary};

pub const TABULAR_SMOOTHING: f64 = 1e-9;

/// Lookup table from a masked-state id pattern to its L x V log-prob grid.
pub struct TabularPredictor {
    vocab_size: usize,
    table: HashMap<Vec<u32>, Array2<f64>>,
}

impl TabularPredictor {
    pub fn from_table(vocab_size: usize, table: HashMap<Vec<u32>, Array2<f64>>) -> Self {
        TabularPredictor { vocab_size, table }
    }
}

impl MaskPredictor for TabularPredictor {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn log_probs(&self, state: &MaskedState) -> Result<Array2<f64>> {
        self.table
            .get(&state.ids)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("state {:?} not covered by table", state.ids)))
    }
}

/// Build the tabular predictor for every reachable masked state of length
/// `len` over the k-mer ids of `vocab`. Requires (V+1)^L to be enumerable.
pub fn fit_tabular(
    corpus: &[TokenSequence],
    len: usize,
    vocab: &Vocabulary,
) -> Result<TabularPredictor> {
    let v = vocab.kmer_count();
    let states = (v + 1)
        .checked_pow(len as u32)
        .filter(|&n| n <= crate::diffusion::ENUM_LIMIT)
        .ok_or_else(|| Error::invalid(format!("(V+1)^L = {}^{len} too large", v + 1)))?;
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    for seq in corpus {
        if seq.len() != len {
            return Err(Error::invalid(format!(
                "corpus sequence of length {} != {len}",
                seq.len()
            )));
        }
    }

    let mask_id = vocab.mask_id();
    let mut table = HashMap::with_capacity(states);
    // Enumerate patterns in mixed radix: digit v means token id v, digit V
    // means masked.
    let mut pattern = vec![0usize; len];
    loop {
        let ids: Vec<u32> =
            pattern.iter().map(|&d| if d == v { mask_id } else { d as u32 }).collect();
        table.insert(ids.clone(), rows_for_state(&ids, corpus, vocab));

        let mut pos = 0;
        loop {
            if pos == len {
                let vocab_size = vocab.size();
                return Ok(TabularPredictor { vocab_size, table });
            }
            pattern[pos] += 1;
            if pattern[pos] <= v {
                break;
            }
            pattern[pos] = 0;
            pos += 1;
        }
    }
}

fn rows_for_state(ids: &[u32], corpus: &[TokenSequence], vocab: &Vocabulary) -> Array2<f64> {
    let v = vocab.kmer_count();
    let mask_id = vocab.mask_id();
    let len = ids.len();
    let mut grid = Array2::from_elem((len, vocab.size()), f64::NEG_INFINITY);

    let matches: Vec<&TokenSequence> = corpus
        .iter()
        .filter(|seq| {
            seq.ids
                .iter()
                .zip(ids)
                .all(|(&s, &c)| c == mask_id || s == c)
        })
        .collect();

    for (i, &id) in ids.iter().enumerate() {
        if id != mask_id {
            // Unmasked positions answer with a point mass on the visible token.
            grid[(i, id as usize)] = 0.0;
            continue;
        }
        let mut counts = vec![0.0f64; v];
        for seq in &matches {
            counts[seq.ids[i] as usize] += 1.0;
        }
        let total: f64 = counts.iter().sum::<f64>() + TABULAR_SMOOTHING * v as f64;
        for (tok, &c) in counts.iter().enumerate() {
            grid[(i, tok)] = ((c + TABULAR_SMOOTHING) / total).ln();
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DiffusionTime;

    fn toks(ids: Vec<u32>, vocab: &Vocabulary) -> TokenSequence {
        TokenSequence::new(ids, vocab).unwrap()
    }

    fn state(ids: Vec<u32>, vocab: &Vocabulary) -> MaskedState {
        let mask = ids.iter().map(|&id| id == vocab.mask_id()).collect();
        MaskedState::new(ids, mask, DiffusionTime::new(0.5).unwrap(), vocab).unwrap()
    }

    #[test]
    fn single_point_conditional() {
        // Corpus = {AC} only: state ([M], C) puts mass ~1 on A at position 0.
        let vocab = Vocabulary::build(1).unwrap();
        let corpus = vec![toks(vec![0, 1], &vocab)];
        let pred = fit_tabular(&corpus, 2, &vocab).unwrap();
        let rows = pred.log_probs(&state(vec![vocab.mask_id(), 1], &vocab)).unwrap();
        assert!(rows[(0, 0)].exp() > 1.0 - 1e-6);
    }

    #[test]
    fn uniform_corpus_gives_uniform_rows() {
        let vocab = Vocabulary::build(1).unwrap();
        let mut corpus = Vec::new();
        for a in 0..4 {
            for b in 0..4 {
                corpus.push(toks(vec![a, b], &vocab));
            }
        }
        let pred = fit_tabular(&corpus, 2, &vocab).unwrap();
        let rows = pred
            .log_probs(&state(vec![vocab.mask_id(), vocab.mask_id()], &vocab))
            .unwrap();
        for i in 0..2 {
            for tok in 0..4 {
                assert!((rows[(i, tok)].exp() - 0.25).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn count_ratio_conditional() {
        // Corpus {AA x3, AT x1}: state (A, [M]) row 1 = (0.75, 0, 0, 0.25).
        let vocab = Vocabulary::build(1).unwrap();
        let mut corpus = vec![toks(vec![0, 0], &vocab); 3];
        corpus.push(toks(vec![0, 3], &vocab));
        let pred = fit_tabular(&corpus, 2, &vocab).unwrap();
        let rows = pred.log_probs(&state(vec![0, vocab.mask_id()], &vocab)).unwrap();
        assert!((rows[(1, 0)].exp() - 0.75).abs() < 1e-6);
        assert!((rows[(1, 3)].exp() - 0.25).abs() < 1e-6);
    }

    #[test]
    fn rows_normalize() {
        let vocab = Vocabulary::build(1).unwrap();
        let corpus = vec![toks(vec![0, 1], &vocab), toks(vec![2, 3], &vocab)];
        let pred = fit_tabular(&corpus, 2, &vocab).unwrap();
        let rows = pred
            .log_probs(&state(vec![vocab.mask_id(), vocab.mask_id()], &vocab))
            .unwrap();
        for row in rows.rows() {
            let sum: f64 = row.iter().map(|lp| lp.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn length_mismatch_errors() {
        let vocab = Vocabulary::build(1).unwrap();
        let corpus = vec![toks(vec![0, 1, 2], &vocab)];
        assert!(fit_tabular(&corpus, 2, &vocab).is_err());
    }
}
