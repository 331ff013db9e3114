//! Tiny bidirectional transformer mask predictor with exact manual
//! backpropagation.
//!
//! Pre-norm blocks: RMS-normalized multi-head bidirectional attention with
//! rotary position embeddings, then an RMS-normalized SwiGLU feed-forward,
//! both with residual connections. A learned scale on the final RMS norm
//! precedes the output projection. All arithmetic is f64.

use ndarray::{Array1, Array2, Axis};

use crate::diffusion::MaskedState;
use crate::error::{Error, Result};
use crate::predictor::{log_softmax_rows, MaskPredictor};
use crate::rng::Rng;
use crate::seqio::TokenSequence;

const NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TinyTransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub rope_base: f64,
    pub use_rope: bool,
    pub tied_output: bool,
}

impl Default for TinyTransformerConfig {
    fn default() -> Self {
        TinyTransformerConfig {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ff_dim: 171,
            vocab_size: 4105,
            max_len: 256,
            rope_base: 10_000.0,
            use_rope: true,
            tied_output: false,
        }
    }
}

impl TinyTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.ff_dim == 0 {
            return Err(Error::invalid("transformer dimensions must be positive"));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.use_rope && (self.model_dim / self.heads) % 2 != 0 {
            return Err(Error::invalid("head dim must be even for rotary embeddings"));
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return Err(Error::invalid("vocab_size and max_len must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub wg: Array2<f64>,
    pub wu: Array2<f64>,
    pub wd: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyTransformerParams {
    /// V x D token embedding.
    pub embed: Array2<f64>,
    pub layers: Vec<LayerParams>,
    /// 1 x D learned scale on the final RMS norm.
    pub final_scale: Array2<f64>,
    /// D x V output projection; `None` when tied to the embedding.
    pub w_out: Option<Array2<f64>>,
}

impl TinyTransformerParams {
    pub fn init(cfg: &TinyTransformerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut filled = |rows: usize, cols: usize, rng: &mut Rng| {
            Array2::from_shape_fn((rows, cols), |_| rng.trunc_normal(INIT_STD))
        };
        let d = cfg.model_dim;
        let f = cfg.ff_dim;
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                wq: filled(d, d, rng),
                wk: filled(d, d, rng),
                wv: filled(d, d, rng),
                wo: filled(d, d, rng),
                wg: filled(d, f, rng),
                wu: filled(d, f, rng),
                wd: filled(f, d, rng),
            })
            .collect();
        Ok(TinyTransformerParams {
            embed: filled(cfg.vocab_size, d, rng),
            layers,
            final_scale: Array2::ones((1, d)),
            w_out: if cfg.tied_output { None } else { Some(filled(d, cfg.vocab_size, rng)) },
        })
    }

    pub fn zeros_like(&self) -> Self {
        TinyTransformerParams {
            embed: Array2::zeros(self.embed.raw_dim()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: Array2::zeros(l.wq.raw_dim()),
                    wk: Array2::zeros(l.wk.raw_dim()),
                    wv: Array2::zeros(l.wv.raw_dim()),
                    wo: Array2::zeros(l.wo.raw_dim()),
                    wg: Array2::zeros(l.wg.raw_dim()),
                    wu: Array2::zeros(l.wu.raw_dim()),
                    wd: Array2::zeros(l.wd.raw_dim()),
                })
                .collect(),
            final_scale: Array2::zeros(self.final_scale.raw_dim()),
            w_out: self.w_out.as_ref().map(|w| Array2::zeros(w.raw_dim())),
        }
    }

    /// Tensors in declaration order, with (name, decays-under-AdamW) metadata.
    pub fn tensors(&self) -> Vec<(String, bool, &Array2<f64>)> {
        let mut out: Vec<(String, bool, &Array2<f64>)> =
            vec![("embed".to_string(), false, &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.wq"), true, &layer.wq));
            out.push((format!("layer{l}.wk"), true, &layer.wk));
            out.push((format!("layer{l}.wv"), true, &layer.wv));
            out.push((format!("layer{l}.wo"), true, &layer.wo));
            out.push((format!("layer{l}.wg"), true, &layer.wg));
            out.push((format!("layer{l}.wu"), true, &layer.wu));
            out.push((format!("layer{l}.wd"), true, &layer.wd));
        }
        out.push(("final_scale".to_string(), false, &self.final_scale));
        if let Some(w) = &self.w_out {
            out.push(("w_out".to_string(), true, w));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![&mut self.embed];
        for layer in &mut self.layers {
            out.push(&mut layer.wq);
            out.push(&mut layer.wk);
            out.push(&mut layer.wv);
            out.push(&mut layer.wo);
            out.push(&mut layer.wg);
            out.push(&mut layer.wu);
            out.push(&mut layer.wd);
        }
        out.push(&mut self.final_scale);
        if let Some(w) = &mut self.w_out {
            out.push(w);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|x| x.is_finite()))
    }
}

struct LayerCache {
    x_in: Array2<f64>,
    n1: Array2<f64>,
    inv_rms1: Vec<f64>,
    q: Array2<f64>, // post-rope
    k: Array2<f64>, // post-rope
    v: Array2<f64>,
    probs: Vec<Array2<f64>>, // per head, L x L
    attn_cat: Array2<f64>,
    x_mid: Array2<f64>,
    n2: Array2<f64>,
    inv_rms2: Vec<f64>,
    gate: Array2<f64>,
    up: Array2<f64>,
    act: Array2<f64>,
}

pub struct ForwardCache {
    ids: Vec<usize>,
    layers: Vec<LayerCache>,
    x: Array2<f64>, // trunk output before the final norm
    n_f: Array2<f64>,
    inv_rms_f: Vec<f64>,
}

/// RMS-normalize each row; returns (normed, per-row 1/rms).
fn rms_norm(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (ms + NORM_EPS).sqrt();
        inv.push(r);
        row.mapv_inplace(|v| v * r);
    }
    (out, inv)
}

/// Backward of `y = x * r(x)` given upstream dy: dx = r*dy - (r^3/d)(dy.x)x.
fn rms_norm_backward(x: &Array2<f64>, inv_rms: &[f64], dy: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    for (i, &r) in inv_rms.iter().enumerate() {
        let xr = x.row(i);
        let dyr = dy.row(i);
        let dot: f64 = xr.iter().zip(dyr.iter()).map(|(a, b)| a * b).sum();
        let c = r * r * r * dot / d;
        for ((dst, &xv), &dyv) in dx.row_mut(i).iter_mut().zip(xr.iter()).zip(dyr.iter()) {
            *dst = r * dyv - c * xv;
        }
    }
    dx
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_deriv(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Rotate q/k rows in place. `dir` +1 applies RoPE, -1 applies the transpose.
fn rope_inplace(x: &mut Array2<f64>, cfg: &TinyTransformerConfig, dir: f64) {
    if !cfg.use_rope {
        return;
    }
    let dh = cfg.head_dim();
    let half = dh / 2;
    for (pos, mut row) in x.rows_mut().into_iter().enumerate() {
        for h in 0..cfg.heads {
            let base = h * dh;
            for j in 0..half {
                let theta = pos as f64 * cfg.rope_base.powf(-2.0 * j as f64 / dh as f64);
                let (s, c) = (dir * theta.sin(), theta.cos());
                let a = row[base + 2 * j];
                let b = row[base + 2 * j + 1];
                row[base + 2 * j] = a * c - b * s;
                row[base + 2 * j + 1] = a * s + b * c;
            }
        }
    }
}

pub struct TinyTransformer {
    pub config: TinyTransformerConfig,
    pub params: TinyTransformerParams,
}

impl TinyTransformer {
    pub fn init(config: TinyTransformerConfig, rng: &mut Rng) -> Result<Self> {
        let params = TinyTransformerParams::init(&config, rng)?;
        Ok(TinyTransformer { config, params })
    }

    pub fn new(config: TinyTransformerConfig, params: TinyTransformerParams) -> Result<Self> {
        config.validate()?;
        Ok(TinyTransformer { config, params })
    }

    fn check_ids(&self, ids: &[u32]) -> Result<Vec<usize>> {
        if ids.is_empty() {
            return Err(Error::invalid("empty input"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "input length {} exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        ids.iter()
            .map(|&id| {
                let id = id as usize;
                if id >= self.config.vocab_size {
                    Err(Error::invalid(format!("token id {id} out of vocabulary")))
                } else {
                    Ok(id)
                }
            })
            .collect()
    }

    /// Run the trunk, producing final per-token hidden states (L x D, after
    /// the scaled final norm, before the output projection) and the
    /// activation cache needed for backward.
    pub fn forward_hidden(&self, ids: &[u32]) -> Result<(Array2<f64>, ForwardCache)> {
        let ids = self.check_ids(ids)?;
        let cfg = &self.config;
        let p = &self.params;
        let len = ids.len();
        let d = cfg.model_dim;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = Array2::zeros((len, d));
        for (i, &id) in ids.iter().enumerate() {
            x.row_mut(i).assign(&p.embed.row(id));
        }

        let mut layer_caches = Vec::with_capacity(cfg.layers);
        for layer in &p.layers {
            let x_in = x;
            let (n1, inv_rms1) = rms_norm(&x_in);
            let mut q = n1.dot(&layer.wq);
            let mut k = n1.dot(&layer.wk);
            let v = n1.dot(&layer.wv);
            rope_inplace(&mut q, cfg, 1.0);
            rope_inplace(&mut k, cfg, 1.0);

            let mut probs = Vec::with_capacity(cfg.heads);
            let mut attn_cat = Array2::zeros((len, d));
            for h in 0..cfg.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(ndarray::s![.., cols.clone()]);
                let kh = k.slice(ndarray::s![.., cols.clone()]);
                let vh = v.slice(ndarray::s![.., cols.clone()]);
                let mut sc = qh.dot(&kh.t());
                sc.mapv_inplace(|s| s * scale);
                // Bidirectional: softmax over all positions, no causal mask.
                for mut row in sc.rows_mut() {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    row.mapv_inplace(|s| s / sum);
                }
                let out_h = sc.dot(&vh);
                attn_cat.slice_mut(ndarray::s![.., cols]).assign(&out_h);
                probs.push(sc);
            }
            let x_mid = &x_in + &attn_cat.dot(&layer.wo);

            let (n2, inv_rms2) = rms_norm(&x_mid);
            let gate = n2.dot(&layer.wg);
            let up = n2.dot(&layer.wu);
            let mut act = gate.clone();
            act.zip_mut_with(&up, |g, &u| *g = silu(*g) * u);
            x = &x_mid + &act.dot(&layer.wd);

            layer_caches.push(LayerCache {
                x_in,
                n1,
                inv_rms1,
                q,
                k,
                v,
                probs,
                attn_cat,
                x_mid,
                n2,
                inv_rms2,
                gate,
                up,
                act,
            });
        }

        let (n_f, inv_rms_f) = rms_norm(&x);
        let hidden = &n_f * &p.final_scale;
        Ok((hidden, ForwardCache { ids, layers: layer_caches, x, n_f, inv_rms_f }))
    }

    fn output_weights(&self) -> Array2<f64> {
        match &self.params.w_out {
            Some(w) => w.clone(),
            None => self.params.embed.t().to_owned(),
        }
    }

    /// Masked-objective loss for one state: `weight * sum over masked i of
    /// -log p(clean[i])`. Logits are evaluated at masked rows only.
    pub fn loss(&self, state: &MaskedState, clean: &[u32], weight: f64) -> Result<f64> {
        let (loss, _) = self.loss_masked_rows(state, clean, weight, false)?;
        Ok(loss)
    }

    /// Loss plus exact parameter gradients for one state.
    pub fn loss_and_grad(
        &self,
        state: &MaskedState,
        clean: &[u32],
        weight: f64,
    ) -> Result<(f64, TinyTransformerParams)> {
        let (loss, grads) = self.loss_masked_rows(state, clean, weight, true)?;
        Ok((loss, grads.expect("grads requested")))
    }

    fn loss_masked_rows(
        &self,
        state: &MaskedState,
        clean: &[u32],
        weight: f64,
        want_grads: bool,
    ) -> Result<(f64, Option<TinyTransformerParams>)> {
        if clean.len() != state.len() {
            return Err(Error::invalid("clean targets length mismatch"));
        }
        let masked: Vec<usize> = state.masked_positions();
        if masked.is_empty() {
            return Err(Error::invalid("state has no masked positions"));
        }
        let (hidden, cache) = self.forward_hidden(&state.ids)?;
        let w_out = self.output_weights();
        let m = masked.len();
        let d = self.config.model_dim;
        let v = self.config.vocab_size;

        let mut hidden_m = Array2::zeros((m, d));
        for (r, &i) in masked.iter().enumerate() {
            hidden_m.row_mut(r).assign(&hidden.row(i));
        }
        let mut logits = hidden_m.dot(&w_out);

        let mut loss = 0.0;
        let mut d_logits = Array2::zeros((m, v));
        for (r, &i) in masked.iter().enumerate() {
            let target = clean[i] as usize;
            if target >= v {
                return Err(Error::invalid(format!("target id {target} out of vocabulary")));
            }
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_z = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            loss += weight * (log_z - row[target]);
            if want_grads {
                let mut grow = d_logits.row_mut(r);
                for (g, &x) in grow.iter_mut().zip(row.iter()) {
                    *g = weight * (x - log_z).exp();
                }
                grow[target] -= weight;
            }
        }
        if !want_grads {
            return Ok((loss, None));
        }
        // Free the logits buffer early; only d_logits is needed now.
        logits = Array2::zeros((0, 0));
        let _ = logits;

        let mut grads = self.params.zeros_like();

        // Output projection.
        let d_hidden_m = d_logits.dot(&w_out.t());
        match &mut grads.w_out {
            Some(gw) => *gw += &hidden_m.t().dot(&d_logits),
            None => grads.embed += &hidden_m.t().dot(&d_logits).t(),
        }

        let mut d_hidden = Array2::zeros(hidden.raw_dim());
        for (r, &i) in masked.iter().enumerate() {
            d_hidden.row_mut(i).assign(&d_hidden_m.row(r));
        }

        // Final scaled norm.
        let d_scale_vec = (&d_hidden * &cache.n_f).sum_axis(Axis(0));
        grads.final_scale.row_mut(0).assign(&d_scale_vec);
        let d_n_f = &d_hidden * &self.params.final_scale;
        let mut dx = rms_norm_backward(&cache.x, &cache.inv_rms_f, &d_n_f);

        let cfg = &self.config;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for (layer, (lp, lc)) in
            self.params.layers.iter().zip(cache.layers.iter()).enumerate().rev()
        {
            let g = &mut grads.layers[layer];

            // Feed-forward block.
            let d_act = dx.dot(&lp.wd.t());
            g.wd += &lc.act.t().dot(&dx);
            let mut d_gate = d_act.clone();
            d_gate.zip_mut_with(&lc.gate, |dg, &gt| *dg *= silu_deriv(gt));
            d_gate *= &lc.up;
            let mut d_up = d_act;
            d_up.zip_mut_with(&lc.gate, |du, &gt| *du *= silu(gt));
            g.wg += &lc.n2.t().dot(&d_gate);
            g.wu += &lc.n2.t().dot(&d_up);
            let d_n2 = d_gate.dot(&lp.wg.t()) + d_up.dot(&lp.wu.t());
            let mut d_x_mid = rms_norm_backward(&lc.x_mid, &lc.inv_rms2, &d_n2);
            d_x_mid += &dx; // residual

            // Attention block.
            let d_attn_cat = d_x_mid.dot(&lp.wo.t());
            g.wo += &lc.attn_cat.t().dot(&d_x_mid);
            let len = d_x_mid.nrows();
            let mut d_q = Array2::zeros((len, cfg.model_dim));
            let mut d_k = Array2::zeros((len, cfg.model_dim));
            let mut d_v = Array2::zeros((len, cfg.model_dim));
            for h in 0..cfg.heads {
                let cols = h * dh..(h + 1) * dh;
                let d_out_h = d_attn_cat.slice(ndarray::s![.., cols.clone()]);
                let vh = lc.v.slice(ndarray::s![.., cols.clone()]);
                let qh = lc.q.slice(ndarray::s![.., cols.clone()]);
                let kh = lc.k.slice(ndarray::s![.., cols.clone()]);
                let probs = &lc.probs[h];

                let d_probs = d_out_h.dot(&vh.t());
                d_v.slice_mut(ndarray::s![.., cols.clone()]).assign(&probs.t().dot(&d_out_h));

                let mut d_scores = d_probs;
                for (mut dsr, pr) in d_scores.rows_mut().into_iter().zip(probs.rows()) {
                    let dot: f64 = dsr.iter().zip(pr.iter()).map(|(a, b)| a * b).sum();
                    for (ds, &p) in dsr.iter_mut().zip(pr.iter()) {
                        *ds = p * (*ds - dot);
                    }
                }
                d_scores.mapv_inplace(|s| s * scale);
                d_q.slice_mut(ndarray::s![.., cols.clone()]).assign(&d_scores.dot(&kh));
                d_k.slice_mut(ndarray::s![.., cols]).assign(&d_scores.t().dot(&qh));
            }
            rope_inplace(&mut d_q, cfg, -1.0);
            rope_inplace(&mut d_k, cfg, -1.0);
            g.wq += &lc.n1.t().dot(&d_q);
            g.wk += &lc.n1.t().dot(&d_k);
            g.wv += &lc.n1.t().dot(&d_v);
            let d_n1 = d_q.dot(&lp.wq.t()) + d_k.dot(&lp.wk.t()) + d_v.dot(&lp.wv.t());
            let mut d_x_in = rms_norm_backward(&lc.x_in, &lc.inv_rms1, &d_n1);
            d_x_in += &d_x_mid; // residual
            dx = d_x_in;
        }

        for (i, &id) in cache.ids.iter().enumerate() {
            let mut row = grads.embed.row_mut(id);
            row += &dx.row(i);
        }

        Ok((loss, Some(grads)))
    }

    /// Per-token final hidden states for a clean sequence (t = 0 input).
    pub fn extract_embeddings(&self, x: &TokenSequence) -> Result<Array2<f64>> {
        let (hidden, _) = self.forward_hidden(&x.ids)?;
        Ok(hidden)
    }

    pub fn mean_pool(embeddings: &Array2<f64>) -> Array1<f64> {
        embeddings.mean_axis(Axis(0)).expect("nonempty embeddings")
    }
}

impl MaskPredictor for TinyTransformer {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn log_probs(&self, state: &MaskedState) -> Result<Array2<f64>> {
        let (hidden, _) = self.forward_hidden(&state.ids)?;
        let mut logits = hidden.dot(&self.output_weights());
        log_softmax_rows(&mut logits);
        Ok(logits)
    }
}

const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckGroup {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate within the tensor.
    pub worst_coord: usize,
}

/// Compare analytic gradients against central finite differences on
/// `coords_per_group` randomly sampled coordinates of every parameter tensor.
/// `corrupt` deliberately perturbs one analytic gradient (negative control).
pub fn gradient_check(
    model: &TinyTransformer,
    state: &MaskedState,
    clean: &[u32],
    weight: f64,
    coords_per_group: usize,
    rng: &mut Rng,
    corrupt: bool,
) -> Result<Vec<GradCheckGroup>> {
    let (_, grads) = model.loss_and_grad(state, clean, weight)?;
    let meta: Vec<(String, bool)> =
        grads.tensors().iter().map(|(n, d, _)| (n.clone(), *d)).collect();
    let mut reports = Vec::with_capacity(meta.len());
    for (ti, (name, _)) in meta.iter().enumerate() {
        let n_elems = grads.tensors()[ti].2.len();
        let mut max_rel = 0.0f64;
        let mut worst = 0usize;
        for c in 0..coords_per_group.min(n_elems) {
            let flat = rng.below(n_elems as u64) as usize;
            let mut analytic = grads.tensors()[ti].2.as_slice().unwrap()[flat];
            if corrupt && ti == 0 && c == 0 {
                analytic += 1e-2;
            }
            let eval = |delta: f64| -> Result<f64> {
                let mut params = model.params.clone();
                params.tensors_mut()[ti].as_slice_mut().unwrap()[flat] += delta;
                let perturbed = TinyTransformer::new(model.config, params)?;
                perturbed.loss(state, clean, weight)
            };
            let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
                worst = flat;
            }
        }
        reports.push(GradCheckGroup { name: name.clone(), max_rel_err: max_rel, worst_coord: worst });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{forward_mask, DiffusionTime};
    use crate::seqio::Vocabulary;

    fn tiny_config() -> TinyTransformerConfig {
        TinyTransformerConfig {
            layers: 2,
            heads: 2,
            model_dim: 16,
            ff_dim: 24,
            vocab_size: 13, // k=1 vocabulary
            max_len: 16,
            ..TinyTransformerConfig::default()
        }
    }

    fn masked_state(ids: Vec<u32>, vocab: &Vocabulary) -> MaskedState {
        let mask = ids.iter().map(|&id| id == vocab.mask_id()).collect();
        MaskedState::new(ids, mask, DiffusionTime::new(0.5).unwrap(), vocab).unwrap()
    }

    #[test]
    fn rows_normalize_for_random_params() {
        let vocab = Vocabulary::build(1).unwrap();
        let model = TinyTransformer::init(tiny_config(), &mut Rng::from_seed(1)).unwrap();
        let state = masked_state(vec![0, vocab.mask_id(), 2, vocab.mask_id()], &vocab);
        let rows = model.log_probs(&state).unwrap();
        for row in rows.rows() {
            let sum: f64 = row.iter().map(|lp| lp.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
        }
    }

    #[test]
    fn all_masked_rows_identical_without_rope() {
        // With RoPE disabled nothing breaks positional symmetry, so a fully
        // masked input yields identical rows at every position.
        let cfg = TinyTransformerConfig { use_rope: false, ..tiny_config() };
        let vocab = Vocabulary::build(1).unwrap();
        let model = TinyTransformer::init(cfg, &mut Rng::from_seed(2)).unwrap();
        let state = masked_state(vec![vocab.mask_id(); 2], &vocab);
        let rows = model.log_probs(&state).unwrap();
        for v in 0..cfg.vocab_size {
            assert!((rows[(0, v)] - rows[(1, v)]).abs() < 1e-9);
        }
    }

    #[test]
    fn bidirectionality_witness() {
        // Permuting two unmasked context tokens changes the output at a
        // masked position: the prediction sees both directions.
        let vocab = Vocabulary::build(1).unwrap();
        let model = TinyTransformer::init(tiny_config(), &mut Rng::from_seed(3)).unwrap();
        let a = masked_state(vec![1, vocab.mask_id(), 2, 3], &vocab);
        let b = masked_state(vec![1, vocab.mask_id(), 3, 2], &vocab);
        let ra = model.log_probs(&a).unwrap();
        let rb = model.log_probs(&b).unwrap();
        let diff: f64 = (0..model.config.vocab_size)
            .map(|v| (ra[(1, v)] - rb[(1, v)]).abs())
            .sum();
        assert!(diff > 1e-8, "masked row insensitive to right context");
    }

    #[test]
    fn zero_weight_gives_zero_grads() {
        let vocab = Vocabulary::build(1).unwrap();
        let model = TinyTransformer::init(tiny_config(), &mut Rng::from_seed(4)).unwrap();
        let state = masked_state(vec![0, vocab.mask_id(), 2], &vocab);
        let (loss, grads) = model.loss_and_grad(&state, &[0, 1, 2], 0.0).unwrap();
        assert_eq!(loss, 0.0);
        for (_, _, t) in grads.tensors() {
            assert!(t.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn unmasked_positions_contribute_no_gradient() {
        // Loss and grads depend only on masked targets: changing the clean
        // token at an unmasked position leaves both bit-identical.
        let vocab = Vocabulary::build(1).unwrap();
        let model = TinyTransformer::init(tiny_config(), &mut Rng::from_seed(5)).unwrap();
        let state = masked_state(vec![0, vocab.mask_id(), 2], &vocab);
        let (l1, g1) = model.loss_and_grad(&state, &[0, 1, 2], 2.0).unwrap();
        let (l2, g2) = model.loss_and_grad(&state, &[3, 1, 0], 2.0).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn finite_difference_gradients_match() {
        let vocab = Vocabulary::build(1).unwrap();
        let model = TinyTransformer::init(tiny_config(), &mut Rng::from_seed(6)).unwrap();
        let mut rng = Rng::from_seed(7);
        let clean: Vec<u32> = (0..6).map(|_| rng.below(4) as u32).collect();
        let x0 = TokenSequence { ids: clean.clone(), vocab_k: 1 };
        let state = forward_mask(&x0, DiffusionTime::new(0.5).unwrap(), &vocab, &mut rng);
        let reports =
            gradient_check(&model, &state, &clean, 1.7, 12, &mut rng, false).unwrap();
        for r in &reports {
            assert!(r.max_rel_err < 1e-4, "group {} rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn corrupt_hook_is_detected() {
        let vocab = Vocabulary::build(1).unwrap();
        let model = TinyTransformer::init(tiny_config(), &mut Rng::from_seed(8)).unwrap();
        let state = masked_state(vec![vocab.mask_id(), 1, 2], &vocab);
        let reports =
            gradient_check(&model, &state, &[0, 1, 2], 1.0, 3, &mut Rng::from_seed(9), true)
                .unwrap();
        assert!(reports.iter().any(|r| r.max_rel_err >= 1e-4));
    }

    #[test]
    fn tied_output_gradients_match_fd() {
        let cfg = TinyTransformerConfig { tied_output: true, ..tiny_config() };
        let vocab = Vocabulary::build(1).unwrap();
        let model = TinyTransformer::init(cfg, &mut Rng::from_seed(10)).unwrap();
        let state = masked_state(vec![vocab.mask_id(), 3], &vocab);
        let reports =
            gradient_check(&model, &state, &[2, 3], 1.0, 8, &mut Rng::from_seed(11), false)
                .unwrap();
        for r in &reports {
            assert!(r.max_rel_err < 1e-4, "group {} rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn embeddings_shape_and_pooling() {
        let vocab = Vocabulary::build(1).unwrap();
        let model = TinyTransformer::init(tiny_config(), &mut Rng::from_seed(12)).unwrap();
        let x = TokenSequence::new(vec![0, 1, 2, 3], &vocab).unwrap();
        let emb = model.extract_embeddings(&x).unwrap();
        assert_eq!(emb.shape(), &[4, 16]);
        let pooled = TinyTransformer::mean_pool(&emb);
        assert_eq!(pooled.len(), 16);

        // L=1: mean pool equals the single row.
        let x1 = TokenSequence::new(vec![2], &vocab).unwrap();
        let e1 = model.extract_embeddings(&x1).unwrap();
        let p1 = TinyTransformer::mean_pool(&e1);
        for (a, b) in p1.iter().zip(e1.row(0).iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mean_pool_is_position_sensitive_with_rope() {
        let vocab = Vocabulary::build(1).unwrap();
        let model = TinyTransformer::init(tiny_config(), &mut Rng::from_seed(13)).unwrap();
        let a = TokenSequence::new(vec![0, 1, 2, 3], &vocab).unwrap();
        let b = TokenSequence::new(vec![3, 2, 1, 0], &vocab).unwrap();
        let pa = TinyTransformer::mean_pool(&model.extract_embeddings(&a).unwrap());
        let pb = TinyTransformer::mean_pool(&model.extract_embeddings(&b).unwrap());
        let diff: f64 = pa.iter().zip(pb.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9);
    }
}
