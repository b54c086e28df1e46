//! Transformer noise-prediction network with adaptive conditioning.
//!
//! Each layer computes per-token modulation (residual gain, scale, shift)
//! from the conditioning stream with an affine map, then wraps both the
//! self-attention and the feed-forward sub-steps in that modulation:
//!
//! ```text
//! (a, b, g) = cond_affine(cond)            per token
//! e <- e + a ⊙ Attn(b ⊙ norm1(e) + g)
//! e <- e + a ⊙ Ffn(b ⊙ norm2(e) + g)
//! ```
//!
//! Conditioning is the observation stream plus the timestep embedding,
//! plus context tokens when present, plus the learned positional table
//! (which is also added to the noised target stream). The output head is
//! a final layer norm modulated by the conditioning, and a separate
//! affine decoder maps hidden features back to token values.

use crate::error::{CoreError, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub layers: usize,
    /// Hidden width C.
    pub width: usize,
    /// Attention heads; must divide `width`.
    pub heads: usize,
    /// h0*v0*t0, the decoder output width.
    pub token_len: usize,
    /// Token lattice size, fixing the positional table.
    pub n_tokens: usize,
}

impl DenoiserConfig {
    pub fn new(layers: usize, width: usize, heads: usize, token_len: usize, n_tokens: usize) -> Result<Self> {
        if layers == 0 || width == 0 || heads == 0 || token_len == 0 || n_tokens == 0 {
            return Err(CoreError::InvalidDimension("denoiser config has a zero field".into()));
        }
        if width % heads != 0 {
            return Err(CoreError::InvalidDimension(format!("heads {heads} do not divide width {width}")));
        }
        Ok(DenoiserConfig { layers, width, heads, token_len, n_tokens })
    }

    /// Small instance for tests and gradient certification.
    pub fn test_tier(token_len: usize, n_tokens: usize) -> Self {
        DenoiserConfig { layers: 2, width: 16, heads: 2, token_len, n_tokens }
    }

    /// Largest tier exercised by default (the "5M" class: 12 layers, 128 wide).
    pub fn tier_5m(token_len: usize, n_tokens: usize) -> Self {
        DenoiserConfig { layers: 12, width: 128, heads: 8, token_len, n_tokens }
    }

    /// Config-reachable larger tiers.
    pub fn tier_35m(token_len: usize, n_tokens: usize) -> Self {
        DenoiserConfig { layers: 16, width: 256, heads: 8, token_len, n_tokens }
    }

    pub fn tier_200m(token_len: usize, n_tokens: usize) -> Self {
        DenoiserConfig { layers: 20, width: 768, heads: 12, token_len, n_tokens }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
    pub attn_q: Tensor,
    pub attn_k: Tensor,
    pub attn_v: Tensor,
    pub attn_out: Tensor,
    pub ff_w1: Tensor,
    pub ff_w2: Tensor,
    /// Conditioning affine producing (gain, scale, shift), C -> 3C.
    pub cond_w: Tensor,
    pub cond_b: Tensor,
}

impl BlockParams {
    fn init(c: usize, rng: &mut ChaCha8Rng) -> Self {
        let sd = 1.0 / (c as f64).sqrt();
        BlockParams {
            norm1_gain: Tensor::filled(1, c, 1.0),
            norm1_bias: Tensor::zeros(1, c),
            norm2_gain: Tensor::filled(1, c, 1.0),
            norm2_bias: Tensor::zeros(1, c),
            attn_q: Tensor::randn(c, c, sd, rng),
            attn_k: Tensor::randn(c, c, sd, rng),
            attn_v: Tensor::randn(c, c, sd, rng),
            attn_out: Tensor::randn(c, c, sd, rng),
            ff_w1: Tensor::randn(c, 4 * c, sd, rng),
            ff_w2: Tensor::randn(4 * c, c, 0.5 * sd, rng),
            // Small but nonzero so the modulation path carries gradient
            // from the first step.
            cond_w: Tensor::randn(c, 3 * c, 0.02, rng),
            cond_b: Tensor::zeros(1, 3 * c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub cfg: DenoiserConfig,
    pub blocks: Vec<BlockParams>,
    /// Learned affine after the sinusoidal timestep encoding.
    pub time_w: Tensor,
    pub time_b: Tensor,
    /// Learned positional embedding over the token lattice.
    pub pos: Tensor,
    pub final_norm_gain: Tensor,
    pub final_norm_bias: Tensor,
    /// Final modulation (scale, shift), C -> 2C.
    pub final_mod_w: Tensor,
    pub final_mod_b: Tensor,
    /// Output decoder, C -> token_len.
    pub dec_w: Tensor,
    pub dec_b: Tensor,
}

impl DenoiserParams {
    pub fn init(cfg: DenoiserConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.width;
        let sd = 1.0 / (c as f64).sqrt();
        DenoiserParams {
            cfg,
            blocks: (0..cfg.layers).map(|_| BlockParams::init(c, rng)).collect(),
            time_w: Tensor::randn(c, c, sd, rng),
            time_b: Tensor::zeros(1, c),
            pos: Tensor::randn(cfg.n_tokens, c, 0.1, rng),
            final_norm_gain: Tensor::filled(1, c, 1.0),
            final_norm_bias: Tensor::zeros(1, c),
            final_mod_w: Tensor::randn(c, 2 * c, 0.02, rng),
            final_mod_b: Tensor::zeros(1, 2 * c),
            dec_w: Tensor::randn(c, cfg.token_len, sd, rng),
            dec_b: Tensor::zeros(1, cfg.token_len),
        }
    }

    /// Visit every parameter block with a stable name. Block names are
    /// the unit of freezing, checkpointing, and optimizer state.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            f(format!("layer{i}.norm1_gain"), &b.norm1_gain);
            f(format!("layer{i}.norm1_bias"), &b.norm1_bias);
            f(format!("layer{i}.norm2_gain"), &b.norm2_gain);
            f(format!("layer{i}.norm2_bias"), &b.norm2_bias);
            f(format!("layer{i}.attn_q"), &b.attn_q);
            f(format!("layer{i}.attn_k"), &b.attn_k);
            f(format!("layer{i}.attn_v"), &b.attn_v);
            f(format!("layer{i}.attn_out"), &b.attn_out);
            f(format!("layer{i}.ff_w1"), &b.ff_w1);
            f(format!("layer{i}.ff_w2"), &b.ff_w2);
            f(format!("layer{i}.cond_w"), &b.cond_w);
            f(format!("layer{i}.cond_b"), &b.cond_b);
        }
        f("time_w".into(), &self.time_w);
        f("time_b".into(), &self.time_b);
        f("pos".into(), &self.pos);
        f("final_norm_gain".into(), &self.final_norm_gain);
        f("final_norm_bias".into(), &self.final_norm_bias);
        f("final_mod_w".into(), &self.final_mod_w);
        f("final_mod_b".into(), &self.final_mod_b);
        f("dec_w".into(), &self.dec_w);
        f("dec_b".into(), &self.dec_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(format!("layer{i}.norm1_gain"), &mut b.norm1_gain);
            f(format!("layer{i}.norm1_bias"), &mut b.norm1_bias);
            f(format!("layer{i}.norm2_gain"), &mut b.norm2_gain);
            f(format!("layer{i}.norm2_bias"), &mut b.norm2_bias);
            f(format!("layer{i}.attn_q"), &mut b.attn_q);
            f(format!("layer{i}.attn_k"), &mut b.attn_k);
            f(format!("layer{i}.attn_v"), &mut b.attn_v);
            f(format!("layer{i}.attn_out"), &mut b.attn_out);
            f(format!("layer{i}.ff_w1"), &mut b.ff_w1);
            f(format!("layer{i}.ff_w2"), &mut b.ff_w2);
            f(format!("layer{i}.cond_w"), &mut b.cond_w);
            f(format!("layer{i}.cond_b"), &mut b.cond_b);
        }
        f("time_w".into(), &mut self.time_w);
        f("time_b".into(), &mut self.time_b);
        f("pos".into(), &mut self.pos);
        f("final_norm_gain".into(), &mut self.final_norm_gain);
        f("final_norm_bias".into(), &mut self.final_norm_bias);
        f("final_mod_w".into(), &mut self.final_mod_w);
        f("final_mod_b".into(), &mut self.final_mod_b);
        f("dec_w".into(), &mut self.dec_w);
        f("dec_b".into(), &mut self.dec_b);
    }

    pub fn blocks_named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn set_block(&mut self, name: &str, value: &Tensor) {
        let mut hit = false;
        self.visit_mut(&mut |n, t| {
            if n == name {
                assert!(t.same_shape(value), "set_block shape mismatch for {n}");
                *t = value.clone();
                hit = true;
            }
        });
        assert!(hit, "no parameter block named {name}");
    }
}

/// Sinusoidal step encoding: geometric frequency ladder with period base
/// 10000. Injective over any sane step range, deterministic.
pub fn timestep_embed(k: usize, c: usize) -> Tensor {
    let mut out = Tensor::zeros(1, c);
    let half = (c / 2).max(1);
    for j in 0..half {
        let exponent = j as f64 / half as f64;
        let freq = (10000f64).powf(-exponent);
        let angle = k as f64 * freq;
        out.data[2 * j] = angle.sin();
        if 2 * j + 1 < c {
            out.data[2 * j + 1] = angle.cos();
        }
    }
    out
}

struct BoundBlock {
    norm1_gain: VarId,
    norm1_bias: VarId,
    norm2_gain: VarId,
    norm2_bias: VarId,
    attn_q: VarId,
    attn_k: VarId,
    attn_v: VarId,
    attn_out: VarId,
    ff_w1: VarId,
    ff_w2: VarId,
    cond_w: VarId,
    cond_b: VarId,
}

/// Parameters loaded onto a tape, with the VarId of every named block so
/// callers can pull gradients after `backward`.
pub struct BoundDenoiser {
    pub cfg: DenoiserConfig,
    blocks: Vec<BoundBlock>,
    time_w: VarId,
    time_b: VarId,
    pub pos: VarId,
    final_norm_gain: VarId,
    final_norm_bias: VarId,
    final_mod_w: VarId,
    final_mod_b: VarId,
    dec_w: VarId,
    dec_b: VarId,
    pub named: Vec<(String, VarId)>,
}

impl DenoiserParams {
    pub fn bind(&self, tape: &mut Tape) -> BoundDenoiser {
        let mut named = Vec::new();
        let mut load = |tape: &mut Tape, name: &str, t: &Tensor| {
            let v = tape.input(t.clone());
            named.push((name.to_string(), v));
            v
        };
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| BoundBlock {
                norm1_gain: load(tape, &format!("layer{i}.norm1_gain"), &b.norm1_gain),
                norm1_bias: load(tape, &format!("layer{i}.norm1_bias"), &b.norm1_bias),
                norm2_gain: load(tape, &format!("layer{i}.norm2_gain"), &b.norm2_gain),
                norm2_bias: load(tape, &format!("layer{i}.norm2_bias"), &b.norm2_bias),
                attn_q: load(tape, &format!("layer{i}.attn_q"), &b.attn_q),
                attn_k: load(tape, &format!("layer{i}.attn_k"), &b.attn_k),
                attn_v: load(tape, &format!("layer{i}.attn_v"), &b.attn_v),
                attn_out: load(tape, &format!("layer{i}.attn_out"), &b.attn_out),
                ff_w1: load(tape, &format!("layer{i}.ff_w1"), &b.ff_w1),
                ff_w2: load(tape, &format!("layer{i}.ff_w2"), &b.ff_w2),
                cond_w: load(tape, &format!("layer{i}.cond_w"), &b.cond_w),
                cond_b: load(tape, &format!("layer{i}.cond_b"), &b.cond_b),
            })
            .collect();
        BoundDenoiser {
            cfg: self.cfg,
            blocks,
            time_w: load(tape, "time_w", &self.time_w),
            time_b: load(tape, "time_b", &self.time_b),
            pos: load(tape, "pos", &self.pos),
            final_norm_gain: load(tape, "final_norm_gain", &self.final_norm_gain),
            final_norm_bias: load(tape, "final_norm_bias", &self.final_norm_bias),
            final_mod_w: load(tape, "final_mod_w", &self.final_mod_w),
            final_mod_b: load(tape, "final_mod_b", &self.final_mod_b),
            dec_w: load(tape, "dec_w", &self.dec_w),
            dec_b: load(tape, "dec_b", &self.dec_b),
            named,
        }
    }
}

fn self_attention(tape: &mut Tape, x: VarId, block: &BoundBlock, heads: usize, width: usize) -> VarId {
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = tape.matmul(x, block.attn_q);
    let k = tape.matmul(x, block.attn_k);
    let v = tape.matmul(x, block.attn_v);
    let mut merged: Option<VarId> = None;
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scaled);
        let oh = tape.matmul(attn, vh);
        merged = Some(match merged {
            None => oh,
            Some(m) => tape.concat_cols(m, oh),
        });
    }
    tape.matmul(merged.expect("at least one head"), block.attn_out)
}

fn adaln_block_t(tape: &mut Tape, block: &BoundBlock, e: VarId, cond: VarId, heads: usize, width: usize) -> VarId {
    let mods = tape.matmul(cond, block.cond_w);
    let mods = tape.add_row(mods, block.cond_b);
    let gain = tape.slice_cols(mods, 0, width);
    let scale = tape.slice_cols(mods, width, width);
    let shift = tape.slice_cols(mods, 2 * width, width);

    let n1 = tape.layer_norm_rows(e);
    let n1 = tape.mul_row(n1, block.norm1_gain);
    let n1 = tape.add_row(n1, block.norm1_bias);
    let h1 = tape.mul(scale, n1);
    let h1 = tape.add(h1, shift);
    let attn = self_attention(tape, h1, block, heads, width);
    let gated = tape.mul(gain, attn);
    let e = tape.add(e, gated);

    let n2 = tape.layer_norm_rows(e);
    let n2 = tape.mul_row(n2, block.norm2_gain);
    let n2 = tape.add_row(n2, block.norm2_bias);
    let h2 = tape.mul(scale, n2);
    let h2 = tape.add(h2, shift);
    let mid = tape.matmul(h2, block.ff_w1);
    let mid = tape.gelu(mid);
    let ff = tape.matmul(mid, block.ff_w2);
    let gated = tape.mul(gain, ff);
    tape.add(e, gated)
}

/// Noise prediction on the tape. `e_k` and `o` are N×C; `y` is optional
/// context of the same shape.
pub fn predict_noise_t(
    tape: &mut Tape,
    bd: &BoundDenoiser,
    e_k: VarId,
    k: usize,
    o: VarId,
    y: Option<VarId>,
) -> VarId {
    let c = bd.cfg.width;
    let k_sin = tape.input(timestep_embed(k, c));
    let k_aff = tape.matmul(k_sin, bd.time_w);
    let k_aff = tape.add_row(k_aff, bd.time_b);

    let mut cond = tape.add(o, bd.pos);
    cond = tape.add_row(cond, k_aff);
    if let Some(y) = y {
        cond = tape.add(cond, y);
    }

    let mut e = tape.add(e_k, bd.pos);
    for block in &bd.blocks {
        e = adaln_block_t(tape, block, e, cond, bd.cfg.heads, c);
    }

    let n = tape.layer_norm_rows(e);
    let n = tape.mul_row(n, bd.final_norm_gain);
    let n = tape.add_row(n, bd.final_norm_bias);
    let mods = tape.matmul(cond, bd.final_mod_w);
    let mods = tape.add_row(mods, bd.final_mod_b);
    let scale = tape.slice_cols(mods, 0, c);
    let shift = tape.slice_cols(mods, c, c);
    let scale1 = tape.add_scalar(scale, 1.0);
    let scaled = tape.mul(scale1, n);
    tape.add(scaled, shift)
}

pub fn decode_output_t(tape: &mut Tape, bd: &BoundDenoiser, hidden: VarId) -> VarId {
    let out = tape.matmul(hidden, bd.dec_w);
    tape.add_row(out, bd.dec_b)
}

fn check_tokens(params: &DenoiserParams, t: &Tensor, what: &str) -> Result<()> {
    if t.rows != params.cfg.n_tokens || t.cols != params.cfg.width {
        return Err(CoreError::ShapeMismatch(format!(
            "{what} is {}x{}, expected {}x{}",
            t.rows, t.cols, params.cfg.n_tokens, params.cfg.width
        )));
    }
    Ok(())
}

/// Inference-path noise prediction (no gradients retained).
pub fn predict_noise(
    params: &DenoiserParams,
    e_k: &Tensor,
    k: usize,
    o: &Tensor,
    y: Option<&Tensor>,
) -> Result<Tensor> {
    check_tokens(params, e_k, "e_k")?;
    check_tokens(params, o, "o")?;
    if let Some(y) = y {
        check_tokens(params, y, "y")?;
    }
    let mut tape = Tape::new();
    let bd = params.bind(&mut tape);
    let ve = tape.input(e_k.clone());
    let vo = tape.input(o.clone());
    let vy = y.map(|t| tape.input(t.clone()));
    let out = predict_noise_t(&mut tape, &bd, ve, k, vo, vy);
    Ok(tape.value(out).clone())
}

/// Affine decode of hidden features to token values.
pub fn decode_output(params: &DenoiserParams, hidden: &Tensor) -> Result<Tensor> {
    check_tokens(params, hidden, "hidden")?;
    let mut out = hidden.matmul(&params.dec_w);
    for r in 0..out.rows {
        for c in 0..out.cols {
            out.data[r * out.cols + c] += params.dec_b.data[c];
        }
    }
    Ok(out)
}

/// Anything that can predict diffusion noise; lets tests inject oracle
/// stubs into the sampler.
pub trait NoisePredictor {
    fn predict(&self, e_k: &Tensor, k: usize, o: &Tensor, y: Option<&Tensor>) -> Tensor;
}

impl NoisePredictor for DenoiserParams {
    fn predict(&self, e_k: &Tensor, k: usize, o: &Tensor, y: Option<&Tensor>) -> Tensor {
        predict_noise(self, e_k, k, o, y).expect("shape-checked inputs")
    }
}
