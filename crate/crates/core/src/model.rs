//! The assembled model: traffic-token embedding, denoiser, and optional
//! context pipeline, with named parameter blocks, an Adam optimizer over
//! them, checkpoint I/O, and training-window preparation.
//!
//! # Checkpoint format
//!
//! A JSON manifest line (token spec, denoiser config, optional context
//! config, schedule, and the ordered list of block shapes) terminated by
//! `\n`, followed by every block's float64 little-endian payload in
//! manifest order.

use crate::context::{ContextConfig, ContextParams};
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::diffusion::{ParamGrads, ScheduleSpec};
use crate::error::{CoreError, Result};
use crate::grid_store::{normalize, Grid};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use crate::tokenizer::{tokenize, tokenize_centered, EmbedParams, TokenGrid, TokenSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct UoMoModel {
    pub spec: TokenSpec,
    pub embed_traffic: EmbedParams,
    pub denoiser: DenoiserParams,
    pub context: Option<ContextParams>,
}

impl UoMoModel {
    pub fn init(spec: TokenSpec, denoiser_cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        if denoiser_cfg.token_len != spec.token_len() || denoiser_cfg.width != spec.c {
            return Err(CoreError::ShapeMismatch(format!(
                "denoiser token_len {} width {} vs token spec len {} c {}",
                denoiser_cfg.token_len,
                denoiser_cfg.width,
                spec.token_len(),
                spec.c
            )));
        }
        let mut rng = crate::rng::derived(seed, 0xA11);
        Ok(UoMoModel {
            spec,
            embed_traffic: EmbedParams::init_scaled(spec.token_len(), spec.c, 4.0, &mut rng),
            denoiser: DenoiserParams::init(denoiser_cfg, &mut rng),
            context: None,
        })
    }

    /// Attach a freshly initialized context pipeline (fine-tuning stage).
    pub fn attach_context(&mut self, d: usize, seed: u64) {
        let cfg = ContextConfig { d, c: self.spec.c, token_len: self.spec.token_len() };
        let mut rng = crate::rng::derived(seed, 0xC0);
        self.context = Some(ContextParams::init(cfg, &mut rng));
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("embed_traffic.weight".into(), &self.embed_traffic.weight);
        f("embed_traffic.bias".into(), &self.embed_traffic.bias);
        self.denoiser.visit(f);
        if let Some(ctx) = &self.context {
            ctx.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("embed_traffic.weight".into(), &mut self.embed_traffic.weight);
        f("embed_traffic.bias".into(), &mut self.embed_traffic.bias);
        self.denoiser.visit_mut(f);
        if let Some(ctx) = &mut self.context {
            ctx.visit_mut(f);
        }
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

    pub fn bind(&self, tape: &mut Tape, with_context: bool) -> BoundModel {
        let mut named = Vec::new();
        let embed_w = tape.input(self.embed_traffic.weight.clone());
        named.push(("embed_traffic.weight".to_string(), embed_w));
        let embed_b = tape.input(self.embed_traffic.bias.clone());
        named.push(("embed_traffic.bias".to_string(), embed_b));
        let denoiser = self.denoiser.bind(tape);
        named.extend(denoiser.named.iter().cloned());
        let context = match (&self.context, with_context) {
            (Some(ctx), true) => {
                let bc = ctx.bind(tape);
                named.extend(bc.named.iter().cloned());
                Some(bc)
            }
            _ => None,
        };
        BoundModel { embed_w, embed_b, denoiser, context, named }
    }

    pub fn save(&self, schedule: &ScheduleSpec, path: &Path) -> Result<()> {
        let blocks = self.blocks_named();
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            token_spec: self.spec,
            denoiser: self.denoiser.cfg,
            context: self.context.as_ref().map(|c| c.cfg),
            schedule: *schedule,
            blocks: blocks
                .iter()
                .map(|(name, t)| BlockShape { name: name.clone(), rows: t.rows, cols: t.cols })
                .collect(),
        };
        let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
        let mut line = serde_json::to_string(&manifest).expect("manifest serializes");
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
        for (_, t) in &blocks {
            for &x in &t.data {
                w.write_all(&x.to_le_bytes()).map_err(|e| io_err(path, e))?;
            }
        }
        w.flush().map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, ScheduleSpec)> {
        let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
        let mut line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            match r.read(&mut byte) {
                Ok(0) => return Err(CoreError::MalformedHeader("checkpoint missing newline".into())),
                Ok(_) => {
                    if byte[0] == b'\n' {
                        break;
                    }
                    line.push(byte[0]);
                }
                Err(e) => return Err(io_err(path, e)),
            }
        }
        let manifest: CheckpointManifest = serde_json::from_slice(&line)
            .map_err(|e| CoreError::MalformedHeader(format!("checkpoint manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(CoreError::MalformedHeader(format!("unknown checkpoint format {}", manifest.format)));
        }

        let mut model = UoMoModel::init(manifest.token_spec, manifest.denoiser, 0)?;
        if let Some(ctx_cfg) = manifest.context {
            model.attach_context(ctx_cfg.d, 0);
        }
        let have: BTreeMap<String, (usize, usize)> = model
            .blocks_named()
            .into_iter()
            .map(|(n, t)| (n, (t.rows, t.cols)))
            .collect();
        if have.len() != manifest.blocks.len() {
            return Err(CoreError::MalformedHeader(format!(
                "checkpoint lists {} blocks, model has {}",
                manifest.blocks.len(),
                have.len()
            )));
        }
        for b in &manifest.blocks {
            match have.get(&b.name) {
                Some(&(rows, cols)) if rows == b.rows && cols == b.cols => {}
                Some(&(rows, cols)) => {
                    return Err(CoreError::ShapeMismatch(format!(
                        "block {} is {}x{} in checkpoint, {rows}x{cols} in model",
                        b.name, b.rows, b.cols
                    )))
                }
                None => {
                    return Err(CoreError::MalformedHeader(format!("unexpected block {}", b.name)))
                }
            }
        }

        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
        let expected: usize = manifest.blocks.iter().map(|b| b.rows * b.cols).sum();
        if payload.len() != expected * 8 {
            return Err(CoreError::PayloadLength { expected, got: payload.len() / 8 });
        }
        let mut offset = 0;
        for b in &manifest.blocks {
            let n = b.rows * b.cols;
            let mut data = Vec::with_capacity(n);
            for chunk in payload[offset * 8..(offset + n) * 8].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            offset += n;
            model.set_block(&b.name, &Tensor::from_vec(b.rows, b.cols, data));
        }
        Ok((model, manifest.schedule))
    }
}

const CHECKPOINT_FORMAT: &str = "uomo-checkpoint-v1";

fn io_err(path: &Path, source: std::io::Error) -> CoreError {
    CoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Serialize, Deserialize)]
struct BlockShape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    token_spec: TokenSpec,
    denoiser: DenoiserConfig,
    context: Option<ContextConfig>,
    schedule: ScheduleSpec,
    blocks: Vec<BlockShape>,
}

/// Model parameters loaded onto a tape.
pub struct BoundModel {
    pub embed_w: VarId,
    pub embed_b: VarId,
    pub denoiser: crate::denoiser::BoundDenoiser,
    pub context: Option<crate::context::BoundContext>,
    pub named: Vec<(String, VarId)>,
}

/// Adam with bias correction (step size 1e-3, decays 0.9/0.999, epsilon
/// 1e-8 by default). Moment state is keyed by block name; frozen blocks
/// and blocks without a gradient are left untouched bit for bit.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, model: &mut UoMoModel, grads: &ParamGrads, frozen: &dyn Fn(&str) -> bool) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        model.visit_mut(&mut |name, param| {
            if frozen(&name) {
                return;
            }
            let Some(g) = grads.get(&name) else { return };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.rows, param.cols));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.rows, param.cols));
            for i in 0..param.len() {
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * g.data[i];
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * g.data[i] * g.data[i];
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                param.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        });
    }
}

/// A training window: one fixed-length time slice of the city, tokenized
/// in normalized units, with the absolute start step retained for
/// timestamp features.
#[derive(Debug, Clone)]
pub struct Window {
    pub t_start: usize,
    pub traffic: TokenGrid,
    pub users: Option<TokenGrid>,
}

#[derive(Debug, Clone)]
pub struct WindowSet {
    pub spec: TokenSpec,
    pub h: usize,
    pub v: usize,
    pub window_t: usize,
    pub interval_minutes: u32,
    pub windows: Vec<Window>,
}

impl WindowSet {
    /// Cut a city into consecutive non-overlapping windows. Each stream is
    /// min-max normalized over the whole grid before tokenization.
    pub fn build(
        traffic: &Grid,
        users: Option<&Grid>,
        spec: TokenSpec,
        window_t: usize,
    ) -> Result<WindowSet> {
        spec.check_divides(traffic.h, traffic.v, window_t)?;
        if traffic.t < window_t {
            return Err(CoreError::InvalidDimension(format!(
                "horizon {} shorter than window {window_t}",
                traffic.t
            )));
        }
        if let Some(u) = users {
            if u.h != traffic.h || u.v != traffic.v || u.t != traffic.t {
                return Err(CoreError::ShapeMismatch("user grid shape differs from traffic".into()));
            }
        }
        let (traffic_n, _) = normalize(traffic);
        let users_n = users.map(|u| normalize(u).0);
        let count = traffic.t / window_t;
        let mut windows = Vec::with_capacity(count);
        for w in 0..count {
            let t_start = w * window_t;
            let tw = traffic_n.window(t_start, window_t)?;
            // The diffused stream is centered; context streams are not.
            let traffic_tokens = tokenize_centered(&tw, &spec)?;
            let user_tokens = match &users_n {
                Some(u) => Some(tokenize(&u.window(t_start, window_t)?, &spec)?),
                None => None,
            };
            windows.push(Window { t_start, traffic: traffic_tokens, users: user_tokens });
        }
        Ok(WindowSet {
            spec,
            h: traffic.h,
            v: traffic.v,
            window_t,
            interval_minutes: traffic.interval_minutes,
            windows,
        })
    }

    pub fn timestamps(&self, window: &Window) -> Vec<usize> {
        (window.t_start..window.t_start + self.window_t).collect()
    }

    /// Pool windows from several cities of the same shape (each city
    /// normalized on its own scale). Window time offsets stay city-local.
    pub fn build_multi(
        cities: &[(Grid, Option<Grid>)],
        spec: TokenSpec,
        window_t: usize,
    ) -> Result<WindowSet> {
        let Some((first, _)) = cities.first() else {
            return Err(CoreError::InvalidArgument("no cities supplied".into()));
        };
        let mut merged = WindowSet::build(first, cities[0].1.as_ref(), spec, window_t)?;
        for (traffic, users) in &cities[1..] {
            if traffic.h != first.h || traffic.v != first.v {
                return Err(CoreError::ShapeMismatch(format!(
                    "city {}x{} vs {}x{}",
                    traffic.h, traffic.v, first.h, first.v
                )));
            }
            let ws = WindowSet::build(traffic, users.as_ref(), spec, window_t)?;
            merged.windows.extend(ws.windows);
        }
        Ok(merged)
    }
}
