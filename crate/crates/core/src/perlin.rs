//! Classical 2D gradient noise over explicit gradient lattices, plus the
//! multi-scale mask composition and per-channel cloud effects.
//!
//! A [`GradientGrid`] with `n` cells per side stores `(n+1)^2` gradient
//! vectors, row-major with the y index outermost. Cell coordinates run over
//! `[0, n)`; vertex `(i, j)` sits at `x = i, y = j`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::Image;

#[derive(Debug, Error, PartialEq)]
pub enum PerlinError {
    #[error("grid must have at least one cell")]
    EmptyGrid,
    #[error("expected {expected} gradient vectors, got {got}")]
    VectorCount { expected: usize, got: usize },
    #[error("point ({x}, {y}) outside [0, {n}) cell coordinates")]
    OutOfRange { x: f64, y: f64, n: usize },
    #[error("mask dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid channel effect configuration: {0}")]
    InvalidChannelEffects(String),
}

/// Lattice of 2D gradient vectors for one noise octave.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientGrid {
    cells: usize,
    vectors: Vec<[f64; 2]>,
}

impl GradientGrid {
    pub fn new(cells: usize, vectors: Vec<[f64; 2]>) -> Result<Self, PerlinError> {
        if cells == 0 {
            return Err(PerlinError::EmptyGrid);
        }
        let expected = (cells + 1) * (cells + 1);
        if vectors.len() != expected {
            return Err(PerlinError::VectorCount { expected, got: vectors.len() });
        }
        Ok(Self { cells, vectors })
    }

    /// Builds a grid from separate x- and y-component planes, each
    /// `(n+1) x (n+1)` row-major.
    pub fn from_planes(cells: usize, xs: &[f64], ys: &[f64]) -> Result<Self, PerlinError> {
        if xs.len() != ys.len() {
            return Err(PerlinError::VectorCount { expected: xs.len(), got: ys.len() });
        }
        Self::new(cells, xs.iter().zip(ys).map(|(&x, &y)| [x, y]).collect())
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Vertices per side, `n + 1`.
    pub fn side(&self) -> usize {
        self.cells + 1
    }

    pub fn vectors(&self) -> &[[f64; 2]] {
        &self.vectors
    }

    /// Gradient at vertex `(i, j)`, i.e. position `x = i, y = j`.
    pub fn gradient(&self, i: usize, j: usize) -> [f64; 2] {
        self.vectors[j * self.side() + i]
    }

    pub fn components(&self) -> impl Iterator<Item = f64> + '_ {
        self.vectors.iter().flat_map(|v| v.iter().copied())
    }
}

/// Grid with independent gradients drawn uniformly on the unit circle.
pub fn random_unit_grid(cells: usize, seed: u64) -> Result<GradientGrid, PerlinError> {
    random_unit_grid_with(cells, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_unit_grid_with<R: Rng + ?Sized>(cells: usize, rng: &mut R) -> Result<GradientGrid, PerlinError> {
    if cells == 0 {
        return Err(PerlinError::EmptyGrid);
    }
    let side = cells + 1;
    let vectors = (0..side * side)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            [angle.cos(), angle.sin()]
        })
        .collect();
    GradientGrid::new(cells, vectors)
}

/// Smoothstep `3t^2 - 2t^3`; the argument is clamped into `[0, 1]`.
#[inline]
pub fn fade(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Noise value at cell coordinates `(x, y)` with `0 <= x, y < n`.
pub fn perlin_value(grid: &GradientGrid, x: f64, y: f64) -> Result<f64, PerlinError> {
    let n = grid.cells as f64;
    if !(0.0..n).contains(&x) || !(0.0..n).contains(&y) {
        return Err(PerlinError::OutOfRange { x, y, n: grid.cells });
    }
    let l = x.floor() as usize;
    let d = y.floor() as usize;
    let (dx, dy) = (x - l as f64, y - d as f64);
    let ramp = |i: usize, j: usize| {
        let g = grid.gradient(i, j);
        (x - i as f64) * g[0] + (y - j as f64) * g[1]
    };
    let (fx, fy) = (fade(dx), fade(dy));
    let (gx, gy) = (fade(1.0 - dx), fade(1.0 - dy));
    Ok(gx * gy * ramp(l, d) + fx * gy * ramp(l + 1, d) + gx * fy * ramp(l, d + 1) + fx * fy * ramp(l + 1, d + 1))
}

/// Scalar or per-channel opacity field, `HWC` interleaved like [`Image`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self, PerlinError> {
        if values.len() != height * width * channels {
            return Err(PerlinError::DimensionMismatch(format!(
                "{} values for {height}x{width}x{channels}",
                values.len()
            )));
        }
        Ok(Self { height, width, channels, values })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, values: vec![value; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Debug export; values are clamped into `[0, 1]`.
    pub fn to_image(&self) -> Image {
        let ch = if self.channels == 3 { 3 } else { 1 };
        let data = if self.channels == ch {
            self.values.clone()
        } else {
            self.values.iter().step_by(self.channels).copied().collect()
        };
        Image::from_clamped(self.height, self.width, ch, data)
    }
}

/// Renders a grid to `height x width` pixels, sampling at pixel centres:
/// pixel `(u, v)` maps to `((u + 0.5) / W * n, (v + 0.5) / H * n)`.
pub fn render_mask(grid: &GradientGrid, height: usize, width: usize) -> Mask {
    let n = grid.cells as f64;
    let side = grid.side();
    // Column terms are shared by every row.
    let cols: Vec<(usize, f64, f64)> = (0..width)
        .map(|u| {
            let x = (u as f64 + 0.5) / width as f64 * n;
            let l = (x.floor() as usize).min(grid.cells - 1);
            let dx = x - l as f64;
            (l, dx, fade(dx))
        })
        .collect();
    let mut values = Vec::with_capacity(height * width);
    for v in 0..height {
        let y = (v as f64 + 0.5) / height as f64 * n;
        let d = (y.floor() as usize).min(grid.cells - 1);
        let dy = y - d as f64;
        let fy = fade(dy);
        let lower = &grid.vectors[d * side..(d + 1) * side];
        let upper = &grid.vectors[(d + 1) * side..(d + 2) * side];
        for &(l, dx, fx) in &cols {
            let s_ld = dx * lower[l][0] + dy * lower[l][1];
            let s_rd = (dx - 1.0) * lower[l + 1][0] + dy * lower[l + 1][1];
            let s_lu = dx * upper[l][0] + (dy - 1.0) * upper[l][1];
            let s_ru = (dx - 1.0) * upper[l + 1][0] + (dy - 1.0) * upper[l + 1][1];
            let bottom = s_ld + fx * (s_rd - s_ld);
            let top = s_lu + fx * (s_ru - s_lu);
            values.push(bottom + fy * (top - bottom));
        }
    }
    Mask { height, width, channels: 1, values }
}

/// Weighted sum of single-channel masks, min-max normalized and scaled by
/// `thickness`. A constant weighted sum yields the all-zero mask.
pub fn compose_masks(masks: &[Mask], weights: &[f64], thickness: f64) -> Result<Mask, PerlinError> {
    let first = masks
        .first()
        .ok_or_else(|| PerlinError::DimensionMismatch("no masks to compose".into()))?;
    if masks.len() != weights.len() {
        return Err(PerlinError::DimensionMismatch(format!(
            "{} masks but {} mixing weights",
            masks.len(),
            weights.len()
        )));
    }
    let (h, w) = (first.height, first.width);
    if let Some(bad) = masks.iter().find(|m| m.height != h || m.width != w || m.channels != 1) {
        return Err(PerlinError::DimensionMismatch(format!(
            "expected {h}x{w}x1, got {}x{}x{}",
            bad.height, bad.width, bad.channels
        )));
    }
    let mut sum = vec![0.0; h * w];
    for (mask, &k) in masks.iter().zip(weights) {
        for (s, v) in sum.iter_mut().zip(&mask.values) {
            *s += k * v;
        }
    }
    let lo = sum.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return Ok(Mask::filled(h, w, 1, 0.0));
    }
    for s in &mut sum {
        // max/min map to exactly t and 0.
        *s = if *s == hi { thickness } else { thickness * ((*s - lo) / range) };
    }
    Ok(Mask { height: h, width: w, channels: 1, values: sum })
}

/// Per-channel misalignment and magnitude applied to a scalar cloud mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEffectConfig {
    /// `(dx, dy)` pixel shift for each of the R, G, B channels.
    pub offsets: [(i32, i32); 3],
    /// Multiplicative magnitude per channel, each in `(0, 1]`.
    pub magnitudes: [f64; 3],
    pub max_offset: u32,
}

impl Default for ChannelEffectConfig {
    fn default() -> Self {
        Self { offsets: [(0, 0); 3], magnitudes: DEFAULT_MAGNITUDES, max_offset: DEFAULT_MAX_OFFSET }
    }
}

pub const DEFAULT_MAGNITUDES: [f64; 3] = [1.00, 0.97, 0.94];
pub const DEFAULT_MAX_OFFSET: u32 = 2;

impl ChannelEffectConfig {
    pub fn identity() -> Self {
        Self { offsets: [(0, 0); 3], magnitudes: [1.0; 3], max_offset: DEFAULT_MAX_OFFSET }
    }

    /// Draws every offset component uniformly from `-max_offset..=max_offset`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, max_offset: u32, magnitudes: [f64; 3]) -> Self {
        let m = max_offset as i32;
        let mut offsets = [(0, 0); 3];
        for o in &mut offsets {
            *o = (rng.gen_range(-m..=m), rng.gen_range(-m..=m));
        }
        Self { offsets, magnitudes, max_offset }
    }

    pub fn validate(&self) -> Result<(), PerlinError> {
        let m = self.max_offset as i32;
        if let Some(o) = self.offsets.iter().find(|(dx, dy)| dx.abs() > m || dy.abs() > m) {
            return Err(PerlinError::InvalidChannelEffects(format!("offset {o:?} exceeds {m}")));
        }
        if let Some(v) = self.magnitudes.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(PerlinError::InvalidChannelEffects(format!("magnitude {v} outside (0, 1]")));
        }
        Ok(())
    }
}

/// Shifts each channel by its offset (edge-replicated) and scales it by its
/// magnitude, producing a 3-channel mask. A positive `dx` moves content right.
pub fn apply_channel_effects(mask: &Mask, cfg: &ChannelEffectConfig) -> Result<Mask, PerlinError> {
    cfg.validate()?;
    if mask.channels != 1 {
        return Err(PerlinError::DimensionMismatch(format!("expected 1 channel, got {}", mask.channels)));
    }
    let (h, w) = (mask.height, mask.width);
    let mut values = vec![0.0; h * w * 3];
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for (c, (&(dx, dy), &m)) in cfg.offsets.iter().zip(&cfg.magnitudes).enumerate() {
        for y in 0..h {
            let sy = clampi(y as isize - dy as isize, h);
            for x in 0..w {
                let sx = clampi(x as isize - dx as isize, w);
                values[(y * w + x) * 3 + c] = mask.values[sy * w + sx] * m;
            }
        }
    }
    Ok(Mask { height: h, width: w, channels: 3, values })
}
