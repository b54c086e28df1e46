//! Task-oriented masks over the token lattice and the target/observation
//! split of embedded tokens.
//!
//! Convention: mask entry 1 marks a TARGET token (hidden, to be
//! reconstructed); 0 marks an OBSERVED token. The prediction masks hide
//! the future at every spatial cell; the generation mask hides the whole
//! horizon of the listed cells; the random mask hides an exact count of
//! uniformly drawn positions.

use crate::error::{CoreError, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::TokenDims;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub dims: TokenDims,
    /// One flag per token, same flat order as the token rows.
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn target_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_target(&self, flat: usize) -> bool {
        self.bits[flat]
    }

    /// 1.0 at target positions, 0.0 elsewhere, broadcast to N×C.
    pub fn broadcast(&self, cols: usize) -> Tensor {
        let mut t = Tensor::zeros(self.bits.len(), cols);
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                for c in 0..cols {
                    t.data[i * cols + c] = 1.0;
                }
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskKind {
    /// Long history, short future: `observed_tokens` leading token steps
    /// stay visible, the rest of the horizon is the target.
    ShortTerm { observed_tokens: usize },
    /// Short history, long future. Same construction, different regime.
    LongTerm { observed_tokens: usize },
    /// Whole horizon hidden at the listed (h', v') cells.
    Generation { cells: Vec<(usize, usize)> },
    /// Exactly round(ratio * count) positions hidden, drawn uniformly
    /// without replacement from the given seed.
    Random { ratio: f64, seed: u64 },
}

pub fn make_mask(kind: &MaskKind, dims: TokenDims) -> Result<Mask> {
    if dims.count() == 0 {
        return Err(CoreError::InvalidDimension("empty token lattice".into()));
    }
    let mut bits = vec![false; dims.count()];
    match kind {
        MaskKind::ShortTerm { observed_tokens } | MaskKind::LongTerm { observed_tokens } => {
            let t0 = *observed_tokens;
            if t0 == 0 || t0 >= dims.tp {
                return Err(CoreError::InvalidArgument(format!(
                    "observed token steps {t0} outside (0, {})",
                    dims.tp
                )));
            }
            for tp in t0..dims.tp {
                for hp in 0..dims.hp {
                    for vp in 0..dims.vp {
                        bits[dims.flat(hp, vp, tp)] = true;
                    }
                }
            }
        }
        MaskKind::Generation { cells } => {
            if cells.is_empty() {
                return Err(CoreError::InvalidArgument("generation mask needs at least one cell".into()));
            }
            for &(hp, vp) in cells {
                if hp >= dims.hp || vp >= dims.vp {
                    return Err(CoreError::InvalidArgument(format!(
                        "generation cell ({hp},{vp}) outside {}x{}",
                        dims.hp, dims.vp
                    )));
                }
                for tp in 0..dims.tp {
                    bits[dims.flat(hp, vp, tp)] = true;
                }
            }
        }
        MaskKind::Random { ratio, seed } => {
            if !(0.0 < *ratio && *ratio < 1.0) {
                return Err(CoreError::InvalidArgument(format!("mask ratio {ratio} outside (0,1)")));
            }
            let count = (*ratio * dims.count() as f64).round() as usize;
            if count == 0 {
                return Err(CoreError::EmptyMask(format!(
                    "ratio {ratio} rounds to zero targets on {} tokens",
                    dims.count()
                )));
            }
            let mut r = rng::seeded(*seed);
            for i in rng::sample_without_replacement(&mut r, dims.count(), count) {
                bits[i] = true;
            }
        }
    }
    if !bits.iter().any(|&b| b) {
        return Err(CoreError::EmptyMask("no target position".into()));
    }
    Ok(Mask { dims, bits })
}

/// Embedded tokens split into the target stream `e` (observed positions
/// zeroed) and the observation stream `o` (target positions zeroed);
/// `e + o` reconstructs the input exactly.
#[derive(Debug, Clone)]
pub struct TokenSplit {
    pub target: Tensor,
    pub observation: Tensor,
    pub mask: Mask,
}

pub fn split(tokens: &Tensor, mask: &Mask) -> Result<TokenSplit> {
    if tokens.rows != mask.bits.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} token rows vs {} mask entries",
            tokens.rows,
            mask.bits.len()
        )));
    }
    let cols = tokens.cols;
    let mut target = Tensor::zeros(tokens.rows, cols);
    let mut observation = Tensor::zeros(tokens.rows, cols);
    for (i, &hidden) in mask.bits.iter().enumerate() {
        let dst = if hidden { &mut target } else { &mut observation };
        dst.data[i * cols..(i + 1) * cols].copy_from_slice(tokens.row(i));
    }
    Ok(TokenSplit { target, observation, mask: mask.clone() })
}

/// Pretraining mixes the four kinds uniformly; random masks default to
/// ratio 0.5 and generation masks hide one uniformly chosen cell.
pub fn sample_pretrain_kind(rng: &mut rand_chacha::ChaCha8Rng, dims: TokenDims, ratio: f64) -> MaskKind {
    use rand::Rng;
    match rng.random_range(0..4u8) {
        0 => MaskKind::ShortTerm { observed_tokens: short_term_observed(dims.tp) },
        1 => MaskKind::LongTerm { observed_tokens: long_term_observed(dims.tp) },
        2 => {
            let cell = rng.random_range(0..dims.hp * dims.vp);
            MaskKind::Generation { cells: vec![(cell / dims.vp, cell % dims.vp)] }
        }
        _ => MaskKind::Random { ratio, seed: rng.random::<u64>() },
    }
}

/// Fine-tuning mix: the pretraining kinds plus whole-region generation
/// masks. With every cell hidden the only usable signal is the context
/// stream, which is exactly what fine-tuning must couple to the model;
/// single-cell generation masks let spatial neighbors answer instead.
pub fn sample_finetune_kind(rng: &mut rand_chacha::ChaCha8Rng, dims: TokenDims, ratio: f64) -> MaskKind {
    use rand::Rng;
    if rng.random_range(0..5u8) == 4 {
        let cells = (0..dims.hp).flat_map(|h| (0..dims.vp).map(move |v| (h, v))).collect();
        MaskKind::Generation { cells }
    } else {
        sample_pretrain_kind(rng, dims, ratio)
    }
}

/// Observed token steps for the short-term regime: three quarters of the
/// token horizon (e.g. 6 of 8 for a 64-step window in 8-step tokens).
pub fn short_term_observed(tp: usize) -> usize {
    ((tp * 3 + 2) / 4).clamp(1, tp.saturating_sub(1).max(1))
}

/// Observed token steps for the long-term regime: one quarter.
pub fn long_term_observed(tp: usize) -> usize {
    (tp / 4).clamp(1, tp.saturating_sub(1).max(1))
}
