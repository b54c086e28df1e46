//! City-grid data types, bit-exact file I/O, min-max normalization, and a
//! deterministic synthetic-city generator.
//!
//! # Grid file format
//!
//! One UTF-8 JSON header line terminated by `\n` with keys
//! `{"H","V","T","interval_minutes","kind"}` (`kind` is `"traffic"` or
//! `"users"`), followed by `H*V*T` IEEE-754 float64 values, little-endian,
//! ordered t-major then h then v (`index = t*H*V + h*V + v`).
//!
//! POI maps use the same scheme with keys `{"H","V","P_cat"}` and an
//! int32 payload ordered `index = p*H*V + h*V + v`.

use crate::error::{CoreError, Result};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const P_CAT: usize = 15;

/// The fixed category order for POI maps. Index into [`PoiMap::counts`]
/// planes and into the per-category diurnal tables below.
pub const POI_CATEGORIES: [&str; P_CAT] = [
    "shopping",
    "enterprise",
    "restaurant",
    "local_living",
    "transportation",
    "public_health",
    "automobile",
    "physical_facilities",
    "accommodation",
    "finance",
    "government",
    "education",
    "business",
    "public_facilities",
    "scenic_spot",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Traffic,
    Users,
}

/// Dense H×V×T nonnegative volumes for one city region. Values are
/// traffic volume (normalized units or GB) or attached-user counts
/// depending on `kind`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub kind: GridKind,
    pub h: usize,
    pub v: usize,
    pub t: usize,
    pub interval_minutes: u32,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(
        kind: GridKind,
        h: usize,
        v: usize,
        t: usize,
        interval_minutes: u32,
        values: Vec<f64>,
    ) -> Result<Self> {
        if h == 0 || v == 0 || t == 0 {
            return Err(CoreError::InvalidDimension(format!("H={h} V={v} T={t}")));
        }
        if interval_minutes == 0 {
            return Err(CoreError::InvalidDimension("interval_minutes=0".into()));
        }
        if values.len() != h * v * t {
            return Err(CoreError::PayloadLength { expected: h * v * t, got: values.len() });
        }
        for (i, &x) in values.iter().enumerate() {
            if !x.is_finite() {
                return Err(CoreError::NonFinite(format!("value {x} at flat index {i}")));
            }
            if x < 0.0 {
                return Err(CoreError::NegativeValue(format!("value {x} at flat index {i}")));
            }
        }
        Ok(Grid { kind, h, v, t, interval_minutes, values })
    }

    pub fn zeros(kind: GridKind, h: usize, v: usize, t: usize, interval_minutes: u32) -> Self {
        Grid { kind, h, v, t, interval_minutes, values: vec![0.0; h * v * t] }
    }

    #[inline]
    pub fn idx(&self, h: usize, v: usize, t: usize) -> usize {
        t * self.h * self.v + h * self.v + v
    }

    #[inline]
    pub fn at(&self, h: usize, v: usize, t: usize) -> f64 {
        self.values[self.idx(h, v, t)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, v: usize, t: usize, x: f64) {
        let i = self.idx(h, v, t);
        self.values[i] = x;
    }

    pub fn cells(&self) -> usize {
        self.h * self.v
    }

    /// Time series of one cell.
    pub fn cell_series(&self, h: usize, v: usize) -> Vec<f64> {
        (0..self.t).map(|t| self.at(h, v, t)).collect()
    }

    /// Sub-grid covering steps `t_start..t_start+len`.
    pub fn window(&self, t_start: usize, len: usize) -> Result<Grid> {
        if t_start + len > self.t || len == 0 {
            return Err(CoreError::InvalidDimension(format!(
                "window {t_start}..{} of horizon {}",
                t_start + len,
                self.t
            )));
        }
        let plane = self.h * self.v;
        let values = self.values[t_start * plane..(t_start + len) * plane].to_vec();
        Ok(Grid { kind: self.kind, h: self.h, v: self.v, t: len, interval_minutes: self.interval_minutes, values })
    }

    /// Steps per diurnal period (one day).
    pub fn steps_per_day(&self) -> usize {
        (24 * 60 / self.interval_minutes) as usize
    }
}

/// Per-cell counts of the 15 POI categories.
#[derive(Debug, Clone, PartialEq)]
pub struct PoiMap {
    pub h: usize,
    pub v: usize,
    pub counts: Vec<i32>,
}

impl PoiMap {
    pub fn new(h: usize, v: usize, counts: Vec<i32>) -> Result<Self> {
        if h == 0 || v == 0 {
            return Err(CoreError::InvalidDimension(format!("H={h} V={v}")));
        }
        if counts.len() != h * v * P_CAT {
            return Err(CoreError::PayloadLength { expected: h * v * P_CAT, got: counts.len() });
        }
        if let Some(&bad) = counts.iter().find(|&&c| c < 0) {
            return Err(CoreError::NegativeValue(format!("poi count {bad}")));
        }
        Ok(PoiMap { h, v, counts })
    }

    pub fn zeros(h: usize, v: usize) -> Self {
        PoiMap { h, v, counts: vec![0; h * v * P_CAT] }
    }

    #[inline]
    pub fn idx(&self, cat: usize, h: usize, v: usize) -> usize {
        cat * self.h * self.v + h * self.v + v
    }

    #[inline]
    pub fn at(&self, cat: usize, h: usize, v: usize) -> i32 {
        self.counts[self.idx(cat, h, v)]
    }

    /// Total count over all categories for one cell.
    pub fn cell_total(&self, h: usize, v: usize) -> i64 {
        (0..P_CAT).map(|c| self.at(c, h, v) as i64).sum()
    }
}

/// Min-max statistics recorded by [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
}

impl NormStats {
    pub fn span(&self) -> f64 {
        self.max - self.min
    }
}

/// Min-max scale to [0,1]. A constant grid maps to all zeros with the
/// recorded (min, min+1) convention so the scaling stays invertible.
pub fn normalize(grid: &Grid) -> (Grid, NormStats) {
    let stats = stats_over_steps(grid, grid.t);
    (normalize_with(grid, stats), stats)
}

/// Stats computed from steps `0..t_end` only. Evaluation uses this to keep
/// normalization free of information from the predicted region.
pub fn stats_over_steps(grid: &Grid, t_end: usize) -> NormStats {
    let plane = grid.h * grid.v;
    let slice = &grid.values[..t_end * plane];
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &x in slice {
        min = min.min(x);
        max = max.max(x);
    }
    if !min.is_finite() || !max.is_finite() {
        return NormStats { min: 0.0, max: 1.0 };
    }
    if max <= min {
        NormStats { min, max: min + 1.0 }
    } else {
        NormStats { min, max }
    }
}

pub fn normalize_with(grid: &Grid, stats: NormStats) -> Grid {
    let span = stats.span();
    let values = grid.values.iter().map(|&x| (x - stats.min) / span).collect();
    Grid { values, ..grid.clone() }
}

pub fn denormalize(grid: &Grid, stats: NormStats) -> Grid {
    let span = stats.span();
    let values = grid.values.iter().map(|&x| x * span + stats.min).collect();
    Grid { values, ..grid.clone() }
}

/// Sum non-overlapping `fh x fv` blocks of cells per step, e.g. to pool
/// fine-grained forecasts into station coverage areas.
pub fn aggregate_cells(grid: &Grid, fh: usize, fv: usize) -> Result<Grid> {
    if fh == 0 || fv == 0 || grid.h % fh != 0 || grid.v % fv != 0 {
        return Err(CoreError::InvalidDimension(format!(
            "cannot pool {}x{} cells by {fh}x{fv}",
            grid.h, grid.v
        )));
    }
    let (h, v) = (grid.h / fh, grid.v / fv);
    let mut out = Grid::zeros(grid.kind, h, v, grid.t, grid.interval_minutes);
    for t in 0..grid.t {
        for hh in 0..grid.h {
            for vv in 0..grid.v {
                let i = out.idx(hh / fh, vv / fv, t);
                out.values[i] += grid.at(hh, vv, t);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GridHeader {
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "V")]
    v: usize,
    #[serde(rename = "T")]
    t: usize,
    interval_minutes: u32,
    kind: GridKind,
}

#[derive(Serialize, Deserialize)]
struct PoiHeader {
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "V")]
    v: usize,
    #[serde(rename = "P_cat")]
    p_cat: usize,
}

fn io_err(path: &Path, source: std::io::Error) -> CoreError {
    CoreError::Io { path: path.to_path_buf(), source }
}

pub fn save_grid(grid: &Grid, path: &Path) -> Result<()> {
    for (i, &x) in grid.values.iter().enumerate() {
        if !x.is_finite() {
            return Err(CoreError::NonFinite(format!("value {x} at flat index {i}")));
        }
        if x < 0.0 {
            return Err(CoreError::NegativeValue(format!("value {x} at flat index {i}")));
        }
    }
    let header = GridHeader {
        h: grid.h,
        v: grid.v,
        t: grid.t,
        interval_minutes: grid.interval_minutes,
        kind: grid.kind,
    };
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
    for &x in &grid.values {
        w.write_all(&x.to_le_bytes()).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn read_header_line(r: &mut impl Read, path: &Path) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte) {
            Ok(0) => return Err(CoreError::MalformedHeader("missing newline".into())),
            Ok(_) => {
                if byte[0] == b'\n' {
                    break;
                }
                line.push(byte[0]);
                if line.len() > 4096 {
                    return Err(CoreError::MalformedHeader("header line too long".into()));
                }
            }
            Err(e) => return Err(io_err(path, e)),
        }
    }
    String::from_utf8(line).map_err(|_| CoreError::MalformedHeader("header is not UTF-8".into()))
}

pub fn load_grid(path: &Path) -> Result<Grid> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let line = read_header_line(&mut r, path)?;
    let header: GridHeader =
        serde_json::from_str(&line).map_err(|e| CoreError::MalformedHeader(e.to_string()))?;
    if header.h == 0 || header.v == 0 || header.t == 0 {
        return Err(CoreError::InvalidDimension(format!(
            "H={} V={} T={}",
            header.h, header.v, header.t
        )));
    }
    let expected = header.h * header.v * header.t;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
    if payload.len() != expected * 8 {
        return Err(CoreError::PayloadLength { expected, got: payload.len() / 8 });
    }
    let mut values = Vec::with_capacity(expected);
    for chunk in payload.chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Grid::new(header.kind, header.h, header.v, header.t, header.interval_minutes, values)
}

pub fn save_poi(poi: &PoiMap, path: &Path) -> Result<()> {
    let header = PoiHeader { h: poi.h, v: poi.v, p_cat: P_CAT };
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
    for &c in &poi.counts {
        w.write_all(&c.to_le_bytes()).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_poi(path: &Path) -> Result<PoiMap> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let line = read_header_line(&mut r, path)?;
    let header: PoiHeader =
        serde_json::from_str(&line).map_err(|e| CoreError::MalformedHeader(e.to_string()))?;
    if header.h == 0 || header.v == 0 {
        return Err(CoreError::InvalidDimension(format!("H={} V={}", header.h, header.v)));
    }
    if header.p_cat != P_CAT {
        return Err(CoreError::MalformedHeader(format!(
            "P_cat={} but this build fixes {P_CAT} categories",
            header.p_cat
        )));
    }
    let expected = header.h * header.v * P_CAT;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
    if payload.len() != expected * 4 {
        return Err(CoreError::PayloadLength { expected, got: payload.len() / 4 });
    }
    let mut counts = Vec::with_capacity(expected);
    for chunk in payload.chunks_exact(4) {
        counts.push(i32::from_le_bytes(chunk.try_into().unwrap()));
    }
    PoiMap::new(header.h, header.v, counts)
}

// ---------------------------------------------------------------------------
// Synthetic city generator
// ---------------------------------------------------------------------------

/// Peak hours (fractional, weighted) of the per-category diurnal profile.
/// Restaurant-like venues peak around midday and evening; office-like
/// venues peak in working hours.
const POI_PEAKS: [&[(f64, f64)]; P_CAT] = [
    &[(15.0, 1.0)],              // shopping
    &[(10.0, 1.0)],              // enterprise
    &[(12.5, 0.6), (19.0, 0.4)], // restaurant
    &[(18.0, 1.0)],              // local_living
    &[(8.0, 0.5), (18.0, 0.5)],  // transportation
    &[(10.0, 1.0)],              // public_health
    &[(11.0, 1.0)],              // automobile
    &[(17.5, 1.0)],              // physical_facilities
    &[(22.0, 1.0)],              // accommodation
    &[(11.0, 1.0)],              // finance
    &[(9.5, 1.0)],               // government
    &[(9.0, 1.0)],               // education
    &[(10.5, 1.0)],              // business
    &[(13.0, 1.0)],              // public_facilities
    &[(14.0, 1.0)],              // scenic_spot
];

const POI_AMPLITUDE: [f64; P_CAT] = [
    1.1, 0.9, 1.4, 0.8, 1.0, 0.7, 0.6, 0.8, 0.9, 0.7, 0.6, 1.0, 0.9, 0.7, 1.2,
];

/// Work-oriented categories dip on weekends, leisure ones rise.
const POI_WEEKEND_FACTOR: [f64; P_CAT] = [
    1.25, 0.55, 1.2, 1.1, 0.8, 0.9, 1.0, 1.2, 1.1, 0.55, 0.5, 0.6, 0.6, 1.0, 1.4,
];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub h: usize,
    pub v: usize,
    pub t: usize,
    pub interval_minutes: u32,
    /// Shift of every diurnal peak, in hours. Models a city with a
    /// different daily rhythm for transfer experiments.
    pub phase_shift_hours: f64,
    pub base_level: f64,
    pub noise_sd: f64,
    pub user_noise_sd: f64,
    /// Replace the generated POI map (e.g. all zeros to isolate the
    /// base+noise component).
    pub poi_override: Option<PoiMap>,
}

impl SynthConfig {
    pub fn new(seed: u64, h: usize, v: usize, t: usize, interval_minutes: u32) -> Self {
        SynthConfig {
            seed,
            h,
            v,
            t,
            interval_minutes,
            phase_shift_hours: 0.0,
            base_level: 1.0,
            noise_sd: 0.15,
            user_noise_sd: 0.1,
            poi_override: None,
        }
    }
}

/// Deterministic synthetic city: (traffic, users, poi).
pub fn synth_city(seed: u64, h: usize, v: usize, t: usize, interval_minutes: u32) -> Result<(Grid, Grid, PoiMap)> {
    synth_city_with(&SynthConfig::new(seed, h, v, t, interval_minutes))
}

pub fn synth_city_with(cfg: &SynthConfig) -> Result<(Grid, Grid, PoiMap)> {
    if cfg.h == 0 || cfg.v == 0 || cfg.t == 0 {
        return Err(CoreError::InvalidDimension(format!("H={} V={} T={}", cfg.h, cfg.v, cfg.t)));
    }
    if cfg.interval_minutes == 0 || cfg.interval_minutes > 24 * 60 {
        return Err(CoreError::InvalidDimension(format!(
            "interval_minutes={}",
            cfg.interval_minutes
        )));
    }

    // Independent streams so that overriding the POI map does not shift
    // the traffic/user noise sequences.
    let mut rng_poi = rng::derived(cfg.seed, 0);
    let mut rng_traffic = rng::derived(cfg.seed, 1);
    let mut rng_users = rng::derived(cfg.seed, 2);

    let poi = match &cfg.poi_override {
        Some(p) => {
            if p.h != cfg.h || p.v != cfg.v {
                return Err(CoreError::ShapeMismatch(format!(
                    "poi override {}x{} vs city {}x{}",
                    p.h, p.v, cfg.h, cfg.v
                )));
            }
            p.clone()
        }
        None => {
            let mut counts = vec![0i32; cfg.h * cfg.v * P_CAT];
            for cell in 0..cfg.h * cfg.v {
                for cat in 0..P_CAT {
                    // Skewed-low integer counts; most cells hold a few
                    // venues of each kind, some hold many.
                    let u: f64 = rng_poi.random();
                    counts[cat * cfg.h * cfg.v + cell] = (u * u * 8.0).floor() as i32;
                }
            }
            PoiMap::new(cfg.h, cfg.v, counts)?
        }
    };

    let period = (24 * 60 / cfg.interval_minutes) as f64;
    let steps_per_hour = 60.0 / cfg.interval_minutes as f64;

    let mut traffic = Grid::zeros(GridKind::Traffic, cfg.h, cfg.v, cfg.t, cfg.interval_minutes);
    for t_step in 0..cfg.t {
        let day = ((t_step as f64 / steps_per_hour / 24.0).floor() as usize) % 7;
        let weekend = day >= 5;
        for hh in 0..cfg.h {
            for vv in 0..cfg.v {
                let mut x = cfg.base_level;
                for cat in 0..P_CAT {
                    let count = poi.at(cat, hh, vv) as f64;
                    if count == 0.0 {
                        continue;
                    }
                    let wk = if weekend { POI_WEEKEND_FACTOR[cat] } else { 1.0 };
                    x += count * POI_AMPLITUDE[cat] * wk * diurnal(t_step as f64, period, POI_PEAKS[cat], cfg.phase_shift_hours);
                }
                x += cfg.noise_sd * rng::standard_normal(&mut rng_traffic);
                traffic.set(hh, vv, t_step, x.max(0.0));
            }
        }
    }

    let mut users = Grid::zeros(GridKind::Users, cfg.h, cfg.v, cfg.t, cfg.interval_minutes);
    for t_step in 0..cfg.t {
        for hh in 0..cfg.h {
            for vv in 0..cfg.v {
                let tr = traffic.at(hh, vv, t_step);
                // Monotone transform of traffic plus independent noise.
                let u = 0.8 * tr.powf(0.9) + cfg.user_noise_sd * rng::standard_normal(&mut rng_users);
                users.set(hh, vv, t_step, u.max(0.0));
            }
        }
    }

    Ok((traffic, users, poi))
}

/// Smooth daily profile in [0,1], peaking at the listed hours.
fn diurnal(t_step: f64, period: f64, peaks: &[(f64, f64)], shift_hours: f64) -> f64 {
    let angle = 2.0 * std::f64::consts::PI * (t_step % period) / period;
    let mut x = 0.0;
    for &(hour, weight) in peaks {
        let peak_angle = 2.0 * std::f64::consts::PI * (hour + shift_hours) / 24.0;
        x += weight * 0.5 * (1.0 + (angle - peak_angle).cos());
    }
    x
}
