//! Reshape grids into mobile tokens and embed them.
//!
//! A token is an `h0 × v0 × t0` sub-block of the grid. Token rows are
//! ordered t'-major then h' then v'; inside a token, values keep the same
//! t-major/h/v order. `tokenize`/`detokenize` are exact inverses.

use crate::error::{CoreError, Result};
use crate::grid_store::{Grid, GridKind};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpec {
    pub h0: usize,
    pub v0: usize,
    pub t0: usize,
    /// Hidden feature width of the embedded tokens.
    pub c: usize,
}

impl TokenSpec {
    pub fn new(h0: usize, v0: usize, t0: usize, c: usize) -> Result<Self> {
        if h0 == 0 || v0 == 0 || t0 == 0 || c == 0 {
            return Err(CoreError::InvalidDimension(format!("token spec ({h0},{v0},{t0}) c={c}")));
        }
        Ok(TokenSpec { h0, v0, t0, c })
    }

    pub fn token_len(&self) -> usize {
        self.h0 * self.v0 * self.t0
    }

    pub fn check_divides(&self, h: usize, v: usize, t: usize) -> Result<()> {
        if h % self.h0 != 0 || v % self.v0 != 0 || t % self.t0 != 0 {
            return Err(CoreError::TokenSpecIncompatible(format!(
                "grid {h}x{v}x{t} not divisible by token ({},{},{})",
                self.h0, self.v0, self.t0
            )));
        }
        Ok(())
    }
}

/// Token lattice dims and flat indexing (t'-major then h' then v').
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenDims {
    pub hp: usize,
    pub vp: usize,
    pub tp: usize,
}

impl TokenDims {
    pub fn count(&self) -> usize {
        self.hp * self.vp * self.tp
    }

    #[inline]
    pub fn flat(&self, hp: usize, vp: usize, tp: usize) -> usize {
        tp * self.hp * self.vp + hp * self.vp + vp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub dims: TokenDims,
    /// One token per row, `token_len` wide.
    pub tokens: Tensor,
}

/// Flat grid index of every token element, in token-row order. Shared by
/// `tokenize`, `detokenize`, and the on-tape scalar-field tokenizer.
pub fn token_index_map(spec: &TokenSpec, h: usize, v: usize, t: usize) -> (TokenDims, Vec<usize>) {
    let dims = TokenDims { hp: h / spec.h0, vp: v / spec.v0, tp: t / spec.t0 };
    let mut idx = Vec::with_capacity(dims.count() * spec.token_len());
    for tp in 0..dims.tp {
        for hp in 0..dims.hp {
            for vp in 0..dims.vp {
                for dt in 0..spec.t0 {
                    for dh in 0..spec.h0 {
                        for dv in 0..spec.v0 {
                            let gh = hp * spec.h0 + dh;
                            let gv = vp * spec.v0 + dv;
                            let gt = tp * spec.t0 + dt;
                            idx.push(gt * h * v + gh * v + gv);
                        }
                    }
                }
            }
        }
    }
    (dims, idx)
}

pub fn tokenize(grid: &Grid, spec: &TokenSpec) -> Result<TokenGrid> {
    spec.check_divides(grid.h, grid.v, grid.t)?;
    let (dims, idx) = token_index_map(spec, grid.h, grid.v, grid.t);
    let data: Vec<f64> = idx.iter().map(|&i| grid.values[i]).collect();
    Ok(TokenGrid { dims, tokens: Tensor::from_vec(dims.count(), spec.token_len(), data) })
}

/// Center of the normalized value range. The diffusion pipeline shifts
/// traffic tokens to [-0.5, 0.5] so their embeddings are near zero-mean,
/// matching the standard-normal initialization of the sampler; the
/// decoder emits centered values and [`uncenter_values`] restores them.
pub const VALUE_CENTER: f64 = 0.5;

/// Tokenize then shift values by -[`VALUE_CENTER`].
pub fn tokenize_centered(grid: &Grid, spec: &TokenSpec) -> Result<TokenGrid> {
    let mut tg = tokenize(grid, spec)?;
    for x in tg.tokens.data.iter_mut() {
        *x -= VALUE_CENTER;
    }
    Ok(tg)
}

pub fn uncenter_values(values: &mut [f64]) {
    for x in values.iter_mut() {
        *x += VALUE_CENTER;
    }
}

pub fn detokenize(
    tokens: &TokenGrid,
    spec: &TokenSpec,
    kind: GridKind,
    interval_minutes: u32,
) -> Result<Grid> {
    let dims = tokens.dims;
    if tokens.tokens.rows != dims.count() || tokens.tokens.cols != spec.token_len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{}x{} tokens vs dims {}x{}x{} token_len {}",
            tokens.tokens.rows,
            tokens.tokens.cols,
            dims.hp,
            dims.vp,
            dims.tp,
            spec.token_len()
        )));
    }
    let (h, v, t) = (dims.hp * spec.h0, dims.vp * spec.v0, dims.tp * spec.t0);
    let (_, idx) = token_index_map(spec, h, v, t);
    let mut values = vec![0.0; h * v * t];
    for (j, &grid_i) in idx.iter().enumerate() {
        values[grid_i] = tokens.tokens.data[j];
    }
    Ok(Grid { kind, h, v, t, interval_minutes, values })
}

/// Per-stream affine embedding of tokens into C dims.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedParams {
    /// token_len × C.
    pub weight: Tensor,
    /// 1 × C.
    pub bias: Tensor,
}

impl EmbedParams {
    pub fn init(token_len: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::init_scaled(token_len, c, 1.0, rng)
    }

    /// `gain` scales the init so the embedded stream can start near unit
    /// variance (centered tokens have sd around 1/4, so the diffused
    /// stream uses gain 4).
    pub fn init_scaled(token_len: usize, c: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let sd = gain / (token_len as f64).sqrt();
        EmbedParams { weight: Tensor::randn(token_len, c, sd, rng), bias: Tensor::zeros(1, c) }
    }

    pub fn check(&self, token_len: usize, c: usize) -> Result<()> {
        if self.weight.rows != token_len || self.weight.cols != c || self.bias.cols != c {
            return Err(CoreError::ShapeMismatch(format!(
                "embed weight {}x{} bias 1x{} vs token_len {token_len} c {c}",
                self.weight.rows, self.weight.cols, self.bias.cols
            )));
        }
        Ok(())
    }
}

pub fn embed(tokens: &TokenGrid, params: &EmbedParams) -> Result<Tensor> {
    params.check(tokens.tokens.cols, params.weight.cols)?;
    let mut out = tokens.tokens.matmul(&params.weight);
    for r in 0..out.rows {
        for c in 0..out.cols {
            out.data[r * out.cols + c] += params.bias.data[c];
        }
    }
    Ok(out)
}

/// Tape version of [`embed`]; gradients flow into weight and bias.
pub fn embed_t(tape: &mut Tape, tokens: VarId, weight: VarId, bias: VarId) -> VarId {
    let prod = tape.matmul(tokens, weight);
    tape.add_row(prod, bias)
}
