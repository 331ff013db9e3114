//! Forward masking process and the variable-ratio masked cross-entropy
//! training objective, plus an exact enumeration oracle for tiny instances.
//!
//! Each position of a clean sequence is independently replaced by `[M]` with
//! probability t; the loss is the 1/t-weighted cross-entropy on masked
//! positions only, a Monte-Carlo estimator that upper-bounds the negative
//! log-likelihood of the induced model distribution.

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::predictor::{MaskPredictor, PROB_FLOOR};
use crate::rng::Rng;
use crate::seqio::{TokenSequence, Vocabulary};

/// Lower clamp for sampled diffusion times, bounding the 1/t loss weight.
pub const TIME_EPS: f64 = 1e-3;

/// Instance-size cap for the enumeration oracle.
pub const ENUM_LIMIT: usize = 100_000;

/// A diffusion time t in (0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionTime(f64);

impl DiffusionTime {
    pub fn new(t: f64) -> Result<Self> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::invalid(format!("diffusion time {t} outside (0, 1]")));
        }
        Ok(DiffusionTime(t))
    }

    /// Uniform on (TIME_EPS, 1].
    pub fn sample(rng: &mut Rng) -> Self {
        DiffusionTime(TIME_EPS + (1.0 - TIME_EPS) * rng.f64_open())
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// A partially masked token sequence. `mask[i]` iff `ids[i]` is the mask id.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedState {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub t: DiffusionTime,
}

impl MaskedState {
    pub fn new(ids: Vec<u32>, mask: Vec<bool>, t: DiffusionTime, vocab: &Vocabulary) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(Error::invalid("ids and mask flags length mismatch"));
        }
        for (i, (&id, &m)) in ids.iter().zip(&mask).enumerate() {
            if m != (id == vocab.mask_id()) {
                return Err(Error::invalid(format!(
                    "mask flag inconsistent with ids at position {i}"
                )));
            }
        }
        Ok(MaskedState { ids, mask, t })
    }

    /// Fully masked state of length `len`.
    pub fn fully_masked(len: usize, vocab: &Vocabulary) -> Self {
        MaskedState {
            ids: vec![vocab.mask_id(); len],
            mask: vec![true; len],
            t: DiffusionTime(1.0),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Average cross-entropy objective over a batch, in nats per sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub masked_count: usize,
}

/// Independently mask each position with probability t. If no position came
/// out masked, the whole pattern is resampled so every state carries signal.
pub fn forward_mask(
    x0: &TokenSequence,
    t: DiffusionTime,
    vocab: &Vocabulary,
    rng: &mut Rng,
) -> MaskedState {
    let len = x0.len();
    loop {
        let mask: Vec<bool> = (0..len).map(|_| rng.bernoulli(t.value())).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let ids = x0
            .ids
            .iter()
            .zip(&mask)
            .map(|(&id, &m)| if m { vocab.mask_id() } else { id })
            .collect();
        return MaskedState { ids, mask, t };
    }
}

/// One-draw Monte-Carlo estimate of the masked-diffusion objective: for each
/// sequence, sample t, mask, and accumulate -(1/t) * sum of masked-token
/// log-probabilities; returns the batch mean.
pub fn diffusion_loss(
    pred: &dyn MaskPredictor,
    batch: &[TokenSequence],
    vocab: &Vocabulary,
    rng: &mut Rng,
) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let log_floor = PROB_FLOOR.ln();
    let mut total = 0.0;
    let mut masked_total = 0usize;
    for x0 in batch {
        let t = DiffusionTime::sample(rng);
        let state = forward_mask(x0, t, vocab, rng);
        let rows = pred.log_probs(&state)?;
        if rows.nrows() != state.len() {
            return Err(Error::Numeric(format!(
                "predictor returned {} rows for state of length {}",
                rows.nrows(),
                state.len()
            )));
        }
        let mut seq_loss = 0.0;
        for (i, &m) in state.mask.iter().enumerate() {
            if m {
                let lp = rows[(i, x0.ids[i] as usize)].max(log_floor);
                seq_loss -= lp;
                masked_total += 1;
            }
        }
        total += seq_loss / t.value();
    }
    Ok(LossValue { value: total / batch.len() as f64, masked_count: masked_total })
}

fn sequence_index(ids: &[u32], kmer_count: usize) -> usize {
    ids.iter().fold(0usize, |acc, &id| acc * kmer_count + id as usize)
}

/// Probabilities over k-mer ids from one log-prob row, with any mass on
/// special tokens removed and the rest renormalized.
fn kmer_row_probs(row: ndarray::ArrayView1<'_, f64>, kmer_count: usize) -> Vec<f64> {
    let mut probs: Vec<f64> = row.iter().take(kmer_count).map(|&lp| lp.exp()).collect();
    let sum: f64 = probs.iter().sum();
    if sum <= 0.0 {
        let u = 1.0 / kmer_count as f64;
        probs.iter_mut().for_each(|p| *p = u);
    } else {
        probs.iter_mut().for_each(|p| *p /= sum);
    }
    probs
}

/// Exact model distribution over all V^L clean sequences, where V is the
/// k-mer count of `vocab`: the product of one-token-per-step conditionals,
/// averaged uniformly over all L! unmask orders. The returned table is
/// indexed by the base-V encoding of the id sequence and sums to 1.
pub fn enumerate_model_distribution(
    pred: &dyn MaskPredictor,
    len: usize,
    vocab: &Vocabulary,
) -> Result<Vec<f64>> {
    let v = vocab.kmer_count();
    let total = v
        .checked_pow(len as u32)
        .filter(|&n| n <= ENUM_LIMIT)
        .ok_or_else(|| Error::invalid(format!("instance V^L = {v}^{len} too large to enumerate")))?;
    let mut table = vec![0.0; total];
    let orders: Vec<Vec<usize>> = (0..len).permutations(len).collect();
    let order_weight = 1.0 / orders.len() as f64;
    let mut state = MaskedState::fully_masked(len, vocab);
    for order in &orders {
        expand_order(pred, vocab, order, 0, 1.0, &mut state, &mut table, order_weight)?;
    }
    let sum: f64 = table.iter().sum();
    if (sum - 1.0).abs() > 1e-8 {
        return Err(Error::Numeric(format!("enumerated distribution sums to {sum}")));
    }
    Ok(table)
}

#[allow(clippy::too_many_arguments)]
fn expand_order(
    pred: &dyn MaskPredictor,
    vocab: &Vocabulary,
    order: &[usize],
    depth: usize,
    prob: f64,
    state: &mut MaskedState,
    table: &mut [f64],
    order_weight: f64,
) -> Result<()> {
    if depth == order.len() {
        table[sequence_index(&state.ids, vocab.kmer_count())] += prob * order_weight;
        return Ok(());
    }
    let pos = order[depth];
    let rows = pred.log_probs(state)?;
    let probs = kmer_row_probs(rows.row(pos), vocab.kmer_count());
    for (token, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        state.ids[pos] = token as u32;
        state.mask[pos] = false;
        expand_order(pred, vocab, order, depth + 1, prob * p, state, table, order_weight)?;
    }
    state.ids[pos] = vocab.mask_id();
    state.mask[pos] = true;
    Ok(())
}
