//! Mask predictors: the interface plus an exact tabular oracle and a tiny
//! trainable bidirectional transformer.

pub mod head;
pub mod tabular;
pub mod train;
pub mod transformer;

use ndarray::Array2;

use crate::diffusion::MaskedState;
use crate::error::Result;

pub use head::{fit_linear_head, LinearHead};
pub use tabular::{fit_tabular, TabularPredictor};
pub use train::{train, OptimizerState, TrainConfig, TrainLogRecord};
pub use transformer::{TinyTransformer, TinyTransformerConfig, TinyTransformerParams};

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// A mask predictor maps a partially masked state of length L to an L x V
/// grid of log-probabilities over clean tokens. Rows exponentiate to proper
/// distributions; the output is a deterministic function of the state.
pub trait MaskPredictor {
    fn vocab_size(&self) -> usize;

    /// L x V log-probability grid for the given state.
    fn log_probs(&self, state: &MaskedState) -> Result<Array2<f64>>;
}

/// Row-wise log-softmax of a logits grid, numerically stabilized.
pub fn log_softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x -= max;
            sum += x.exp();
        }
        let log_z = sum.ln();
        for x in row.iter_mut() {
            *x -= log_z;
        }
    }
}
