//! Urban context: user-dynamics tokens and POI features fused into the
//! contextual conditioning tokens.
//!
//! The POI pipeline turns static per-cell category counts into a dynamic
//! scalar field: a sigmoid affine extracts static features per cell, a
//! timestamp embedding (day-of-week and hour-of-day tables fused by an
//! affine) captures the time of day, and a second sigmoid affine maps the
//! concatenation to one scalar per (cell, step). That field is tokenized
//! exactly like traffic and embedded with its own affine. User grids go
//! through the shared tokenizer with a separate embedding. The fused
//! context is the elementwise sum of the two token streams.

use crate::error::{CoreError, Result};
use crate::grid_store::{Grid, PoiMap, P_CAT};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use crate::tokenizer::{embed, token_index_map, tokenize, EmbedParams, TokenSpec};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const MINUTES_PER_DAY: u64 = 24 * 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextConfig {
    /// POI hidden width.
    pub d: usize,
    /// Token feature width (matches the traffic stream).
    pub c: usize,
    pub token_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextParams {
    pub cfg: ContextConfig,
    pub user_embed: EmbedParams,
    /// Static POI affine, P_CAT -> d.
    pub poi_w_s: Tensor,
    pub poi_b_s: Tensor,
    pub dow_table: Tensor,
    pub hod_table: Tensor,
    /// Fuses the two time tables, 2d -> d.
    pub time_w: Tensor,
    pub time_b: Tensor,
    /// Dynamic fusion, 2d -> 1 scalar per (cell, step).
    pub dyn_w: Tensor,
    pub dyn_b: Tensor,
    pub poi_embed: EmbedParams,
}

impl ContextParams {
    pub fn init(cfg: ContextConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d;
        ContextParams {
            cfg,
            // Context streams start near unit variance so they are not
            // drowned out by the other conditioning components.
            user_embed: EmbedParams::init_scaled(cfg.token_len, cfg.c, 4.0, rng),
            poi_w_s: Tensor::randn(P_CAT, d, 0.1, rng),
            poi_b_s: Tensor::zeros(1, d),
            dow_table: Tensor::randn(7, d, 0.1, rng),
            hod_table: Tensor::randn(24, d, 0.1, rng),
            time_w: Tensor::randn(2 * d, d, 1.0 / (2.0 * d as f64).sqrt(), rng),
            time_b: Tensor::zeros(1, d),
            dyn_w: Tensor::randn(2 * d, 1, 1.0 / (2.0 * d as f64).sqrt(), rng),
            dyn_b: Tensor::zeros(1, 1),
            poi_embed: EmbedParams::init_scaled(cfg.token_len, cfg.c, 4.0, rng),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("context.user_embed.weight".into(), &self.user_embed.weight);
        f("context.user_embed.bias".into(), &self.user_embed.bias);
        f("context.poi_w_s".into(), &self.poi_w_s);
        f("context.poi_b_s".into(), &self.poi_b_s);
        f("context.dow_table".into(), &self.dow_table);
        f("context.hod_table".into(), &self.hod_table);
        f("context.time_w".into(), &self.time_w);
        f("context.time_b".into(), &self.time_b);
        f("context.dyn_w".into(), &self.dyn_w);
        f("context.dyn_b".into(), &self.dyn_b);
        f("context.poi_embed.weight".into(), &self.poi_embed.weight);
        f("context.poi_embed.bias".into(), &self.poi_embed.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("context.user_embed.weight".into(), &mut self.user_embed.weight);
        f("context.user_embed.bias".into(), &mut self.user_embed.bias);
        f("context.poi_w_s".into(), &mut self.poi_w_s);
        f("context.poi_b_s".into(), &mut self.poi_b_s);
        f("context.dow_table".into(), &mut self.dow_table);
        f("context.hod_table".into(), &mut self.hod_table);
        f("context.time_w".into(), &mut self.time_w);
        f("context.time_b".into(), &mut self.time_b);
        f("context.dyn_w".into(), &mut self.dyn_w);
        f("context.dyn_b".into(), &mut self.dyn_b);
        f("context.poi_embed.weight".into(), &mut self.poi_embed.weight);
        f("context.poi_embed.bias".into(), &mut self.poi_embed.bias);
    }
}

/// (day-of-week, hour-of-day) for an absolute step index; step 0 is
/// Monday 00:00.
pub fn day_hour(t: usize, interval_minutes: u32) -> (usize, usize) {
    let minutes = t as u64 * interval_minutes as u64;
    let hour = ((minutes / 60) % 24) as usize;
    let day = ((minutes / MINUTES_PER_DAY) % 7) as usize;
    (day, hour)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-cell POI counts as a HV×P_CAT matrix (cell-major rows).
pub fn poi_count_matrix(poi: &PoiMap) -> Tensor {
    let cells = poi.h * poi.v;
    let mut m = Tensor::zeros(cells, P_CAT);
    for cell in 0..cells {
        for cat in 0..P_CAT {
            m.data[cell * P_CAT + cat] = poi.counts[cat * cells + cell] as f64;
        }
    }
    m
}

/// Static POI features: sigmoid affine of the per-cell counts, HV×d.
pub fn poi_static(poi: &PoiMap, params: &ContextParams) -> Result<Tensor> {
    if params.poi_w_s.rows != P_CAT {
        return Err(CoreError::ShapeMismatch(format!(
            "poi weights expect {} categories, have {}",
            params.poi_w_s.rows, P_CAT
        )));
    }
    let x = poi_count_matrix(poi);
    let mut out = x.matmul(&params.poi_w_s);
    for r in 0..out.rows {
        for c in 0..out.cols {
            out.data[r * out.cols + c] =
                sigmoid(out.data[r * out.cols + c] + params.poi_b_s.data[c]);
        }
    }
    Ok(out)
}

/// Timestamp embedding for one absolute step.
pub fn time_embed(t: usize, interval_minutes: u32, params: &ContextParams) -> Tensor {
    time_embed_many(&[t], interval_minutes, params)
}

/// Timestamp embeddings for a sequence of absolute steps, T×d.
pub fn time_embed_many(timestamps: &[usize], interval_minutes: u32, params: &ContextParams) -> Tensor {
    let d = params.cfg.d;
    let mut cat = Tensor::zeros(timestamps.len(), 2 * d);
    for (i, &t) in timestamps.iter().enumerate() {
        let (day, hour) = day_hour(t, interval_minutes);
        cat.data[i * 2 * d..i * 2 * d + d].copy_from_slice(params.dow_table.row(day));
        cat.data[i * 2 * d + d..(i + 1) * 2 * d].copy_from_slice(params.hod_table.row(hour));
    }
    let mut out = cat.matmul(&params.time_w);
    for r in 0..out.rows {
        for c in 0..out.cols {
            out.data[r * out.cols + c] = sigmoid(out.data[r * out.cols + c] + params.time_b.data[c]);
        }
    }
    out
}

/// Dynamic POI field: one scalar in (0,1) per (cell, step), returned as a
/// column in grid flat order (t-major, then cell).
pub fn poi_dynamic(
    h_static: &Tensor,
    timestamps: &[usize],
    interval_minutes: u32,
    params: &ContextParams,
) -> Result<Tensor> {
    let d = params.cfg.d;
    if h_static.cols != d {
        return Err(CoreError::ShapeMismatch(format!(
            "static features width {} vs d {}",
            h_static.cols, d
        )));
    }
    let tau = time_embed_many(timestamps, interval_minutes, params);
    let cells = h_static.rows;
    let mut out = Tensor::zeros(cells * timestamps.len(), 1);
    for (ti, _) in timestamps.iter().enumerate() {
        for cell in 0..cells {
            let mut acc = params.dyn_b.data[0];
            for j in 0..d {
                acc += h_static.data[cell * d + j] * params.dyn_w.data[j];
                acc += tau.data[ti * d + j] * params.dyn_w.data[d + j];
            }
            out.data[ti * cells + cell] = sigmoid(acc);
        }
    }
    Ok(out)
}

/// User grid tokens embedded with the user-stream weights (the grid goes
/// through the same tokenizer as traffic).
pub fn tokenize_users(users: &Grid, spec: &TokenSpec, params: &ContextParams) -> Result<Tensor> {
    let tokens = tokenize(users, spec)?;
    embed(&tokens, &params.user_embed)
}

/// POI context tokens: dynamic field, tokenized like traffic, embedded
/// with the POI-stream weights.
pub fn poi_context_tokens(
    poi: &PoiMap,
    timestamps: &[usize],
    interval_minutes: u32,
    spec: &TokenSpec,
    params: &ContextParams,
) -> Result<Tensor> {
    spec.check_divides(poi.h, poi.v, timestamps.len())?;
    let h_s = poi_static(poi, params)?;
    let field = poi_dynamic(&h_s, timestamps, interval_minutes, params)?;
    let (dims, idx) = token_index_map(spec, poi.h, poi.v, timestamps.len());
    let data: Vec<f64> = idx.iter().map(|&i| field.data[i]).collect();
    let tokens = crate::tokenizer::TokenGrid {
        dims,
        tokens: Tensor::from_vec(dims.count(), spec.token_len(), data),
    };
    embed(&tokens, &params.poi_embed)
}

/// y = c_user + c_poi, with either stream optional for ablations.
pub fn fuse_context(c_user: Option<&Tensor>, c_poi: Option<&Tensor>) -> Result<Tensor> {
    match (c_user, c_poi) {
        (Some(u), Some(p)) => {
            if !u.same_shape(p) {
                return Err(CoreError::ShapeMismatch(format!(
                    "user tokens {}x{} vs poi tokens {}x{}",
                    u.rows, u.cols, p.rows, p.cols
                )));
            }
            Ok(u.add(p))
        }
        (Some(u), None) => Ok(u.clone()),
        (None, Some(p)) => Ok(p.clone()),
        (None, None) => Err(CoreError::InvalidArgument("context fusion needs at least one stream".into())),
    }
}

/// Full context pipeline: normalized user grid + POI map -> fused tokens.
pub fn context_tokens(
    params: &ContextParams,
    users: Option<&Grid>,
    poi: Option<&PoiMap>,
    timestamps: &[usize],
    interval_minutes: u32,
    spec: &TokenSpec,
) -> Result<Tensor> {
    let c_user = match users {
        Some(u) => Some(tokenize_users(u, spec, params)?),
        None => None,
    };
    let c_poi = match poi {
        Some(p) => Some(poi_context_tokens(p, timestamps, interval_minutes, spec, params)?),
        None => None,
    };
    fuse_context(c_user.as_ref(), c_poi.as_ref())
}

// ---------------------------------------------------------------------------
// Tape path (used by fine-tuning so context parameters receive gradients)
// ---------------------------------------------------------------------------

pub struct BoundContext {
    pub cfg: ContextConfig,
    user_embed_w: VarId,
    user_embed_b: VarId,
    poi_w_s: VarId,
    poi_b_s: VarId,
    dow_table: VarId,
    hod_table: VarId,
    time_w: VarId,
    time_b: VarId,
    dyn_w: VarId,
    dyn_b: VarId,
    poi_embed_w: VarId,
    poi_embed_b: VarId,
    pub named: Vec<(String, VarId)>,
}

impl ContextParams {
    pub fn bind(&self, tape: &mut Tape) -> BoundContext {
        let mut named = Vec::new();
        let mut load = |tape: &mut Tape, name: &str, t: &Tensor| {
            let v = tape.input(t.clone());
            named.push((name.to_string(), v));
            v
        };
        BoundContext {
            cfg: self.cfg,
            user_embed_w: load(tape, "context.user_embed.weight", &self.user_embed.weight),
            user_embed_b: load(tape, "context.user_embed.bias", &self.user_embed.bias),
            poi_w_s: load(tape, "context.poi_w_s", &self.poi_w_s),
            poi_b_s: load(tape, "context.poi_b_s", &self.poi_b_s),
            dow_table: load(tape, "context.dow_table", &self.dow_table),
            hod_table: load(tape, "context.hod_table", &self.hod_table),
            time_w: load(tape, "context.time_w", &self.time_w),
            time_b: load(tape, "context.time_b", &self.time_b),
            dyn_w: load(tape, "context.dyn_w", &self.dyn_w),
            dyn_b: load(tape, "context.dyn_b", &self.dyn_b),
            poi_embed_w: load(tape, "context.poi_embed.weight", &self.poi_embed.weight),
            poi_embed_b: load(tape, "context.poi_embed.bias", &self.poi_embed.bias),
            named,
        }
    }
}

/// Fused context tokens on the tape. `user_tokens` are the raw (already
/// tokenized, normalized) user-grid tokens; POI enters as raw counts.
#[allow(clippy::too_many_arguments)]
pub fn context_tokens_t(
    tape: &mut Tape,
    bc: &BoundContext,
    user_tokens: Option<&Tensor>,
    poi: Option<&PoiMap>,
    timestamps: &[usize],
    interval_minutes: u32,
    spec: &TokenSpec,
    grid_h: usize,
    grid_v: usize,
) -> Result<VarId> {
    let c_user = user_tokens.map(|ut| {
        let tokens = tape.input(ut.clone());
        let prod = tape.matmul(tokens, bc.user_embed_w);
        tape.add_row(prod, bc.user_embed_b)
    });

    let c_poi = match poi {
        Some(p) => {
            spec.check_divides(grid_h, grid_v, timestamps.len())?;
            let cells = p.h * p.v;
            let counts = tape.input(poi_count_matrix(p));
            let hs_lin = tape.matmul(counts, bc.poi_w_s);
            let hs_lin = tape.add_row(hs_lin, bc.poi_b_s);
            let h_s = tape.sigmoid(hs_lin);

            let (dow_idx, hod_idx): (Vec<usize>, Vec<usize>) = timestamps
                .iter()
                .map(|&t| day_hour(t, interval_minutes))
                .unzip();
            let dow = tape.gather_rows(bc.dow_table, &dow_idx);
            let hod = tape.gather_rows(bc.hod_table, &hod_idx);
            let cat = tape.concat_cols(dow, hod);
            let tau_lin = tape.matmul(cat, bc.time_w);
            let tau_lin = tape.add_row(tau_lin, bc.time_b);
            let tau = tape.sigmoid(tau_lin);

            let hs_tiled = tape.tile_rows(h_s, timestamps.len());
            let tau_rep = tape.repeat_interleave_rows(tau, cells);
            let joint = tape.concat_cols(hs_tiled, tau_rep);
            let field_lin = tape.matmul(joint, bc.dyn_w);
            let field_lin = tape.add_row(field_lin, bc.dyn_b);
            let field = tape.sigmoid(field_lin);

            let (dims, idx) = token_index_map(spec, grid_h, grid_v, timestamps.len());
            let tokens = tape.reindex(field, &idx, dims.count(), spec.token_len());
            let prod = tape.matmul(tokens, bc.poi_embed_w);
            Some(tape.add_row(prod, bc.poi_embed_b))
        }
        None => None,
    };

    match (c_user, c_poi) {
        (Some(u), Some(p)) => Ok(tape.add(u, p)),
        (Some(u), None) => Ok(u),
        (None, Some(p)) => Ok(p),
        (None, None) => Err(CoreError::InvalidArgument("context fusion needs at least one stream".into())),
    }
}
