//! Context-aware contrastive fine-tuning with a partial parameter freeze.
//!
//! Positives pair a window's target traffic tokens with its own context
//! tokens; negatives pair the same context with target tokens drawn from
//! other windows in the batch. The loss subtracts a clamped, scaled sum
//! of the negative noise-prediction errors from the positive one,
//! restricted to the anchor's masked positions. With lambda = 0 and the
//! same seed it degenerates to the pretraining loss exactly.
//!
//! The freeze policy keeps the pretrained backbone (attention,
//! feed-forward, norms, token embeddings, positional and timestep
//! tables) bitwise untouched; the adaptive-conditioning maps, the output
//! decoder, and the whole context pipeline train.

use crate::denoiser::predict_noise_t;
use crate::diffusion::{draw_k_eps, masked_noise_term, mean_of_terms, ForwardMode, NoiseSchedule, ParamGrads};
use crate::error::{CoreError, Result};
use crate::grid_store::PoiMap;
use crate::masking::{make_mask, sample_finetune_kind, sample_pretrain_kind, Mask};
use crate::model::{Adam, UoMoModel, WindowSet};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tokenizer::embed_t;
use rand::Rng;

/// Stream label separating negative-term draws from positive-term draws,
/// so the positive stream matches pretraining draw for draw.
const NEGATIVE_STREAM: u64 = 0x004e_4547;

#[derive(Debug, Clone, Copy)]
pub struct ContrastiveConfig {
    pub n_neg: usize,
    pub lambda: f64,
    pub clamp: f64,
}

impl ContrastiveConfig {
    /// Default scaling: lambda grows with log of the negative count and
    /// stays small enough to keep the objective bounded in practice.
    pub fn with_default_lambda(n_neg: usize) -> Self {
        ContrastiveConfig {
            n_neg,
            lambda: ((n_neg + 1) as f64).ln() / (n_neg as f64 * 10.0),
            clamp: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_neg == 0 {
            return Err(CoreError::InvalidArgument("n_neg must be at least 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(CoreError::InvalidArgument(format!("lambda {} must be nonnegative", self.lambda)));
        }
        if self.clamp <= 0.0 {
            return Err(CoreError::InvalidArgument(format!("clamp {} must be positive", self.clamp)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezeProfile {
    /// Backbone frozen, adaptive conditioning + decoder + context train.
    FinetuneDefault,
    /// Everything trains (used for gradient certification).
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezePolicy {
    pub profile: FreezeProfile,
}

impl FreezePolicy {
    pub fn finetune_default() -> Self {
        FreezePolicy { profile: FreezeProfile::FinetuneDefault }
    }

    pub fn none() -> Self {
        FreezePolicy { profile: FreezeProfile::None }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "finetune-default" | "default" => Ok(Self::finetune_default()),
            "none" => Ok(Self::none()),
            other => Err(CoreError::InvalidArgument(format!("unknown freeze profile {other}"))),
        }
    }

    pub fn is_frozen(&self, block: &str) -> bool {
        match self.profile {
            FreezeProfile::None => false,
            FreezeProfile::FinetuneDefault => {
                let trainable = block.contains("cond_")
                    || block.starts_with("final_mod")
                    || block.starts_with("dec_")
                    || block.starts_with("context.");
                !trainable
            }
        }
    }
}

/// Negative assignments: for each batch position, `n_neg` distinct other
/// positions, sampled without replacement from the given seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    pub negatives: Vec<Vec<usize>>,
}

pub fn sample_pairs(batch_len: usize, n_neg: usize, seed: u64) -> Result<Pairing> {
    if batch_len < 2 {
        return Err(CoreError::InvalidArgument("contrastive batch needs at least 2 samples".into()));
    }
    if n_neg > batch_len - 1 {
        return Err(CoreError::InvalidArgument(format!(
            "cannot draw {n_neg} distinct negatives from a batch of {batch_len}"
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut negatives = Vec::with_capacity(batch_len);
    for i in 0..batch_len {
        let others: Vec<usize> = (0..batch_len).filter(|&j| j != i).collect();
        let picks = rng::sample_without_replacement(&mut rng, others.len(), n_neg);
        negatives.push(picks.into_iter().map(|p| others[p]).collect());
    }
    Ok(Pairing { negatives })
}

/// One fine-tuning sample: a window index into the [`WindowSet`] plus the
/// mask drawn for it this step.
#[derive(Debug, Clone)]
pub struct FinetuneItem {
    pub window: usize,
    pub mask: Mask,
}

/// The contrastive objective over a batch, with gradients restricted to
/// unfrozen blocks (frozen blocks report exact zeros).
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss(
    model: &UoMoModel,
    data: &WindowSet,
    poi: Option<&PoiMap>,
    batch: &[FinetuneItem],
    pairing: &Pairing,
    cfg: &ContrastiveConfig,
    policy: &FreezePolicy,
    sched: &NoiseSchedule,
    mode: ForwardMode,
    seed: u64,
) -> Result<(f64, ParamGrads)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    if pairing.negatives.len() != batch.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "pairing covers {} samples, batch has {}",
            pairing.negatives.len(),
            batch.len()
        )));
    }
    let use_context = model.context.is_some();
    let mut rng_pos = rng::seeded(seed);
    let mut rng_neg = rng::derived(seed, NEGATIVE_STREAM);

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, use_context);
    let n_tokens = data.windows[0].traffic.dims.count();
    let c = data.spec.c;

    // Context tokens per distinct window used in this batch (positives
    // share their context with the negatives paired against them).
    let embed_window = |tape: &mut Tape, widx: usize| -> crate::tape::VarId {
        let raw = tape.input(data.windows[widx].traffic.tokens.clone());
        embed_t(tape, raw, bound.embed_w, bound.embed_b)
    };

    let mut terms = Vec::with_capacity(batch.len());
    for (item, negs) in batch.iter().zip(&pairing.negatives) {
        let window = &data.windows[item.window];
        let y = match (&bound.context, use_context) {
            (Some(bc), true) => {
                let timestamps = data.timestamps(window);
                let user_tokens = window.users.as_ref().map(|u| u.tokens.clone());
                Some(crate::context::context_tokens_t(
                    &mut tape,
                    bc,
                    user_tokens.as_ref(),
                    poi,
                    &timestamps,
                    data.interval_minutes,
                    &data.spec,
                    data.h,
                    data.v,
                )?)
            }
            _ => None,
        };

        let emb = embed_window(&mut tape, item.window);
        let (k, eps) = draw_k_eps(&mut rng_pos, sched, n_tokens, c);
        let pos_term = masked_noise_term(&mut tape, emb, emb, &item.mask, k, eps, sched, mode, |tape, e_k, k, o_m| {
            predict_noise_t(tape, &bound.denoiser, e_k, k, o_m, y)
        })?;

        if cfg.lambda == 0.0 {
            terms.push(pos_term);
            continue;
        }

        // Negatives: other windows' target tokens, the anchor's context
        // and masked support, independent (k, eps) draws per term. The
        // per-element negative error sum is clamped before scaling.
        let cols = c;
        let mut neg_sq_sum: Option<crate::tape::VarId> = None;
        for &j in negs {
            let neg_window = batch
                .get(j)
                .ok_or_else(|| CoreError::InvalidArgument(format!("negative index {j} outside batch")))?
                .window;
            if neg_window == item.window {
                return Err(CoreError::InvalidArgument("negative shares its source window with the positive".into()));
            }
            let emb_neg = embed_window(&mut tape, neg_window);
            let (kn, eps_n) = draw_k_eps(&mut rng_neg, sched, n_tokens, cols);
            let m_bc = item.mask.broadcast(cols);
            let m_var = tape.input(m_bc.clone());
            let inv_var = tape.input(m_bc.map(|x| 1.0 - x));
            let e_masked = tape.mul(emb_neg, m_var);
            let o_masked = tape.mul(emb_neg, inv_var);
            let scaled = tape.scale(e_masked, sched.alpha_bar(kn).sqrt());
            let noise_in = tape.input(eps_n.mul(&m_bc).scale(crate::diffusion::noise_coeff(sched, kn, mode)));
            let e_k = tape.add(scaled, noise_in);
            let eps_hat = predict_noise_t(&mut tape, &bound.denoiser, e_k, kn, o_masked, y);
            let eps_var = tape.input(eps_n);
            let diff = tape.sub(eps_var, eps_hat);
            let sq = tape.mul(diff, diff);
            neg_sq_sum = Some(match neg_sq_sum {
                None => sq,
                Some(acc) => tape.add(acc, sq),
            });
        }
        let clamped = tape.clamp_max(neg_sq_sum.expect("n_neg >= 1"), cfg.clamp);
        let weights = {
            let targets = item.mask.target_count();
            let w = 1.0 / (targets * cols) as f64;
            let mut t = Tensor::zeros(n_tokens, cols);
            for (i, &b) in item.mask.bits.iter().enumerate() {
                if b {
                    for cc in 0..cols {
                        t.data[i * cols + cc] = w;
                    }
                }
            }
            t
        };
        let neg_mean = tape.weighted_sum(clamped, weights);
        let neg_scaled = tape.scale(neg_mean, cfg.lambda);
        terms.push(tape.sub(pos_term, neg_scaled));
    }

    let loss = mean_of_terms(&mut tape, &terms);
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(CoreError::Diverged(format!("contrastive loss {value}")));
    }
    let grads_raw = tape.backward(loss);
    let mut grads = ParamGrads::new();
    for (name, vid) in &bound.named {
        let shape = tape.value(*vid);
        let g = if policy.is_frozen(name) {
            Tensor::zeros(shape.rows, shape.cols)
        } else {
            grads_raw.dense(*vid, shape.rows, shape.cols)
        };
        grads.insert(name.clone(), g);
    }
    Ok((value, grads))
}

/// Scalar combination behind the contrastive objective: with every
/// negative term equal to the positive one and no clamping active, the
/// loss collapses to (1 - lambda * n_neg) times the positive term.
pub fn combine_terms(pos: f64, negs: &[f64], lambda: f64, clamp: f64) -> f64 {
    let neg_sum: f64 = negs.iter().sum();
    pos - lambda * neg_sum.min(clamp)
}

#[derive(Debug, Clone, Copy)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_ratio: f64,
    pub contrastive: ContrastiveConfig,
    pub mode: ForwardMode,
    /// Mix whole-region generation masks into the batch (trains the
    /// context-only pathway). Prediction-focused adaptation runs, like
    /// the few-shot protocol, switch this off.
    pub full_generation_masks: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 200,
            batch_size: 4,
            lr: 1e-3,
            mask_ratio: 0.5,
            contrastive: ContrastiveConfig::with_default_lambda(2),
            mode: ForwardMode::Corrected,
            full_generation_masks: true,
        }
    }
}

/// Contrastive fine-tuning loop. Frozen blocks are bitwise unchanged
/// afterwards; zero steps returns the parameters untouched.
pub fn finetune(
    model: &mut UoMoModel,
    data: &WindowSet,
    poi: Option<&PoiMap>,
    cfg: &FinetuneConfig,
    policy: &FreezePolicy,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.contrastive.validate()?;
    if model.context.is_none() {
        return Err(CoreError::InvalidArgument("fine-tuning requires an attached context pipeline".into()));
    }
    if data.windows.len() < 2 {
        return Err(CoreError::InvalidArgument("fine-tuning needs at least 2 windows for negatives".into()));
    }
    let batch_size = cfg.batch_size.clamp(2, data.windows.len());
    let dims = data.windows[0].traffic.dims;

    let mut rng = rng::seeded(seed);
    let mut adam = Adam::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    let policy_fn = |name: &str| policy.is_frozen(name);

    for step in 0..cfg.steps {
        // Distinct windows per batch so negatives never alias positives.
        let picks = rng::sample_without_replacement(&mut rng, data.windows.len(), batch_size);
        let batch: Vec<FinetuneItem> = picks
            .iter()
            .map(|&window| {
                let kind = if cfg.full_generation_masks {
                    sample_finetune_kind(&mut rng, dims, cfg.mask_ratio)
                } else {
                    sample_pretrain_kind(&mut rng, dims, cfg.mask_ratio)
                };
                make_mask(&kind, dims).map(|mask| FinetuneItem { window, mask })
            })
            .collect::<Result<_>>()?;
        let pairing = sample_pairs(batch.len(), cfg.contrastive.n_neg.min(batch.len() - 1), rng.random())?;
        let (value, grads) = contrastive_loss(
            model,
            data,
            poi,
            &batch,
            &pairing,
            &ContrastiveConfig { n_neg: cfg.contrastive.n_neg.min(batch.len() - 1), ..cfg.contrastive },
            policy,
            sched,
            cfg.mode,
            rng.random(),
        )?;
        if !value.is_finite() {
            return Err(CoreError::Diverged(format!("loss {value} at step {step}")));
        }
        adam.step(model, &grads, &policy_fn);
        trace.push(value);
    }
    Ok(trace)
}
