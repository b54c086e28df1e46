//! Noise schedule, forward corruption, masked-noise training objective,
//! and ancestral sampling.
//!
//! The forward process has two modes: the default `Corrected` mode uses
//! the standard sqrt(1-abar) noise coefficient that the reverse-step
//! parameterization assumes; `Literal` reproduces the (1-abar)
//! coefficient variant for comparison runs.

use crate::denoiser::{decode_output, predict_noise_t, DenoiserParams, NoisePredictor};
use crate::error::{CoreError, Result};
use crate::masking::{Mask, TokenSplit};
use crate::rng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DEFAULT_K: usize = 50;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardMode {
    /// e_k = sqrt(abar_k) e + sqrt(1 - abar_k) eps.
    Corrected,
    /// e_k = sqrt(abar_k) e + (1 - abar_k) eps.
    Literal,
}

/// Serializable schedule description, stored in checkpoints and configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub k: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub literal_eq5: bool,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec { k: DEFAULT_K, beta_min: DEFAULT_BETA_MIN, beta_max: DEFAULT_BETA_MAX, literal_eq5: false }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<(NoiseSchedule, ForwardMode)> {
        let sched = make_schedule(self.k, self.beta_min, self.beta_max)?;
        let mode = if self.literal_eq5 { ForwardMode::Literal } else { ForwardMode::Corrected };
        Ok((sched, mode))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub k_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.k_steps {
            return Err(CoreError::InvalidArgument(format!("step {k} outside 1..={}", self.k_steps)));
        }
        Ok(())
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }

    /// Posterior noise scale; sigma_1 is treated as 0.
    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[k - 1]
    }
}

/// Linear beta schedule over `k_steps` diffusion steps.
pub fn make_schedule(k_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if k_steps == 0 {
        return Err(CoreError::InvalidArgument("K must be at least 1".into()));
    }
    if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "beta range ({beta_min}, {beta_max}) must satisfy 0 < min <= max < 1"
        )));
    }
    let mut betas = Vec::with_capacity(k_steps);
    for i in 0..k_steps {
        let frac = if k_steps == 1 { 0.0 } else { i as f64 / (k_steps - 1) as f64 };
        betas.push(beta_min + frac * (beta_max - beta_min));
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(k_steps);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    let mut sigmas = Vec::with_capacity(k_steps);
    for k in 1..=k_steps {
        if k == 1 {
            sigmas.push(0.0);
        } else {
            let prev = alpha_bars[k - 2];
            let cur = alpha_bars[k - 1];
            sigmas.push(((1.0 - prev) / (1.0 - cur) * betas[k - 1]).sqrt());
        }
    }
    Ok(NoiseSchedule { k_steps, betas, alphas, alpha_bars, sigmas })
}

pub fn default_schedule() -> NoiseSchedule {
    make_schedule(DEFAULT_K, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).expect("default schedule is valid")
}

/// Noise coefficient of the forward process at step k.
pub fn noise_coeff(sched: &NoiseSchedule, k: usize, mode: ForwardMode) -> f64 {
    let ab = sched.alpha_bar(k);
    match mode {
        ForwardMode::Corrected => (1.0 - ab).sqrt(),
        ForwardMode::Literal => 1.0 - ab,
    }
}

/// Forward corruption of `e` with externally drawn standard-normal noise.
pub fn q_sample(e: &Tensor, k: usize, eps: &Tensor, sched: &NoiseSchedule, mode: ForwardMode) -> Result<Tensor> {
    sched.check_k(k)?;
    if !e.same_shape(eps) {
        return Err(CoreError::ShapeMismatch(format!(
            "e {}x{} vs eps {}x{}",
            e.rows, e.cols, eps.rows, eps.cols
        )));
    }
    let ab = sched.alpha_bar(k);
    Ok(e.scale(ab.sqrt()).add(&eps.scale(noise_coeff(sched, k, mode))))
}

pub type ParamGrads = BTreeMap<String, Tensor>;

/// Loss weights: 1/(masked_tokens * C) at target positions, 0 elsewhere,
/// so the loss is the mean squared error per masked element.
fn mask_weights(mask: &Mask, cols: usize) -> Result<Tensor> {
    let targets = mask.target_count();
    if targets == 0 {
        return Err(CoreError::EmptyMask("loss needs at least one target position".into()));
    }
    let w = 1.0 / (targets * cols) as f64;
    let mut t = Tensor::zeros(mask.bits.len(), cols);
    for (i, &b) in mask.bits.iter().enumerate() {
        if b {
            for c in 0..cols {
                t.data[i * cols + c] = w;
            }
        }
    }
    Ok(t)
}

/// One masked-noise term on the tape: corrupts the (re-masked) target
/// stream with the supplied noise draw, runs the predictor, and returns
/// the masked mean squared error. The predictor closure lets tests inject
/// oracle stubs and lets the contrastive loss attach context conditioning
/// while sharing this exact code path.
pub(crate) fn masked_noise_term(
    tape: &mut Tape,
    e: VarId,
    o: VarId,
    mask: &Mask,
    k: usize,
    eps: Tensor,
    sched: &NoiseSchedule,
    mode: ForwardMode,
    predict: impl FnOnce(&mut Tape, VarId, usize, VarId) -> VarId,
) -> Result<VarId> {
    let cols = tape.value(e).cols;
    let m_bc = mask.broadcast(cols);
    let inv_bc = m_bc.map(|x| 1.0 - x);
    let m_var = tape.input(m_bc.clone());
    let inv_var = tape.input(inv_bc);

    // Enforce the split invariant on-tape: the target stream is zero at
    // observed positions and the noise only lives at target positions,
    // matching the sampler's convention.
    let e_masked = tape.mul(e, m_var);
    let o_masked = tape.mul(o, inv_var);
    let scaled = tape.scale(e_masked, sched.alpha_bar(k).sqrt());
    let noise_in = tape.input(eps.mul(&m_bc).scale(noise_coeff(sched, k, mode)));
    let e_k = tape.add(scaled, noise_in);

    let eps_hat = predict(tape, e_k, k, o_masked);
    let eps_var = tape.input(eps);
    let diff = tape.sub(eps_var, eps_hat);
    let sq = tape.mul(diff, diff);
    let weights = mask_weights(mask, cols)?;
    Ok(tape.weighted_sum(sq, weights))
}

/// Per-term draws: the step index first, then the noise tensor. Shared by
/// pretraining and the positive/negative contrastive terms so that equal
/// seeds give equal draws.
pub(crate) fn draw_k_eps(
    rng: &mut rand_chacha::ChaCha8Rng,
    sched: &NoiseSchedule,
    rows: usize,
    cols: usize,
) -> (usize, Tensor) {
    let k = rng.random_range(1..=sched.k_steps);
    let eps = Tensor::from_vec(rows, cols, rng::normal_vec(rng, rows * cols));
    (k, eps)
}

pub(crate) fn mean_of_terms(tape: &mut Tape, terms: &[VarId]) -> VarId {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Masked-noise pretraining objective over a batch of token splits.
/// Returns the scalar loss and analytic gradients for every denoiser
/// parameter block.
pub fn pretrain_loss(
    params: &DenoiserParams,
    batch: &[TokenSplit],
    sched: &NoiseSchedule,
    mode: ForwardMode,
    seed: u64,
) -> Result<(f64, ParamGrads)> {
    if batch.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    let mut rng = rng::seeded(seed);
    let mut tape = Tape::new();
    let bd = params.bind(&mut tape);

    let mut terms = Vec::with_capacity(batch.len());
    for split in batch {
        let e = tape.input(split.target.clone());
        let o = tape.input(split.observation.clone());
        let (k, eps) = draw_k_eps(&mut rng, sched, split.target.rows, split.target.cols);
        let term = masked_noise_term(&mut tape, e, o, &split.mask, k, eps, sched, mode, |tape, e_k, k, o_m| {
            predict_noise_t(tape, &bd, e_k, k, o_m, None)
        })?;
        terms.push(term);
    }
    let loss = mean_of_terms(&mut tape, &terms);

    let value = tape.scalar_value(loss);
    let grads_raw = tape.backward(loss);
    let mut grads = ParamGrads::new();
    for (name, vid) in &bd.named {
        let shape = tape.value(*vid);
        grads.insert(name.clone(), grads_raw.dense(*vid, shape.rows, shape.cols));
    }
    Ok((value, grads))
}

/// Ancestral sampling in embedding space. Target positions start from
/// standard normal noise; observed positions are pinned to zero (their
/// content rides in `o`). Deterministic given the seed.
pub fn sample_latent(
    predictor: &dyn NoisePredictor,
    o: &Tensor,
    mask: &Mask,
    y: Option<&Tensor>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    if mask.target_count() == 0 {
        return Err(CoreError::EmptyMask("sampling needs at least one target token".into()));
    }
    if mask.bits.len() != o.rows {
        return Err(CoreError::ShapeMismatch(format!(
            "{} mask entries vs {} observation rows",
            mask.bits.len(),
            o.rows
        )));
    }
    let (n, c) = (o.rows, o.cols);
    let mut rng = rng::seeded(seed);
    let zero_observed = |t: &mut Tensor| {
        for (i, &hidden) in mask.bits.iter().enumerate() {
            if !hidden {
                for x in &mut t.data[i * c..(i + 1) * c] {
                    *x = 0.0;
                }
            }
        }
    };

    let mut e = Tensor::from_vec(n, c, rng::normal_vec(&mut rng, n * c));
    zero_observed(&mut e);

    for k in (1..=sched.k_steps).rev() {
        let eps_hat = predictor.predict(&e, k, o, y);
        let coef = sched.beta(k) / (1.0 - sched.alpha_bar(k)).sqrt();
        let mut next = e.sub(&eps_hat.scale(coef)).scale(1.0 / sched.alpha(k).sqrt());
        if k > 1 {
            let z = Tensor::from_vec(n, c, rng::normal_vec(&mut rng, n * c));
            next = next.add(&z.scale(sched.sigma(k)));
        }
        zero_observed(&mut next);
        e = next;
    }
    Ok(e)
}

/// Full sampling: denoise in embedding space, then decode token values.
pub fn sample(
    params: &DenoiserParams,
    o: &Tensor,
    mask: &Mask,
    y: Option<&Tensor>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let e0 = sample_latent(params, o, mask, y, sched, seed)?;
    decode_output(params, &e0)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Hidden fraction for random masks in the pretraining mix.
    pub mask_ratio: f64,
    pub mode: ForwardMode,
    /// Weight of the embed/decode reconstruction term that trains the
    /// token embedding and the output decoder alongside the noise loss.
    pub recon_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 4,
            lr: 1e-3,
            mask_ratio: 0.5,
            mode: ForwardMode::Corrected,
            recon_weight: 1.0,
        }
    }
}

/// Self-supervised pretraining: each step draws a batch of (window, mask
/// kind) pairs, builds the masked-noise objective plus the embed/decode
/// reconstruction term, and applies one Adam update over every block.
/// Deterministic given the seed; the returned trace has one loss per step.
pub fn train(
    model: &mut crate::model::UoMoModel,
    data: &crate::model::WindowSet,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    use crate::masking::{make_mask, sample_pretrain_kind};
    use crate::tokenizer::embed_t;

    if data.windows.is_empty() {
        return Err(CoreError::InvalidArgument("no training windows".into()));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(CoreError::InvalidArgument("steps and batch_size must be positive".into()));
    }
    let dims = data.windows[0].traffic.dims;
    let n_tokens = dims.count();
    let token_len = data.spec.token_len();
    let c = data.spec.c;

    let mut rng = rng::seeded(seed);
    let mut adam = crate::model::Adam::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let mut terms = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let widx = rng.random_range(0..data.windows.len());
            let kind = sample_pretrain_kind(&mut rng, dims, cfg.mask_ratio);
            let mask = make_mask(&kind, dims)?;
            let (k, eps) = draw_k_eps(&mut rng, sched, n_tokens, c);

            let raw = tape.input(data.windows[widx].traffic.tokens.clone());
            let emb = embed_t(&mut tape, raw, bound.embed_w, bound.embed_b);
            let noise_term =
                masked_noise_term(&mut tape, emb, emb, &mask, k, eps, sched, cfg.mode, |tape, e_k, k, o_m| {
                    predict_noise_t(tape, &bound.denoiser, e_k, k, o_m, None)
                })?;

            let decoded = crate::denoiser::decode_output_t(&mut tape, &bound.denoiser, emb);
            let diff = tape.sub(decoded, raw);
            let sq = tape.mul(diff, diff);
            let recon = tape.weighted_sum(
                sq,
                Tensor::filled(n_tokens, token_len, 1.0 / (n_tokens * token_len) as f64),
            );
            let recon_scaled = tape.scale(recon, cfg.recon_weight);
            terms.push(tape.add(noise_term, recon_scaled));
        }
        let loss = mean_of_terms(&mut tape, &terms);
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(CoreError::Diverged(format!("loss {value} at step {step}")));
        }
        let grads_raw = tape.backward(loss);
        let mut grads = ParamGrads::new();
        for (name, vid) in &bound.named {
            let shape = tape.value(*vid);
            grads.insert(name.clone(), grads_raw.dense(*vid, shape.rows, shape.cols));
        }
        adam.step(model, &grads, &|_| false);
        trace.push(value);
    }
    Ok(trace)
}
