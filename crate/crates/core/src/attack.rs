//! Cloud synthesis from a parameter vector, image fusion, the fitness
//! function and the attack loop.
//!
//! Parameter layout (version [`PARAMS_LAYOUT_VERSION`]): `r = [z, k, t]` with
//! `z = r[..q]`, the five mixing weights `k = r[q..q + 5]` ordered from the
//! 4x4 lattice to the 64x64 lattice, and the thickness `t = r[q + 5]`.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::de::{self, Bounds, DeConfig, DeError, EvalInfo, Scored};
use crate::imaging::{mean_color, mse, Image, ImageError};
use crate::models::{Concurrency, CountingModel, ModelError, TargetModel};
use crate::perlin::{
    apply_channel_effects, compose_masks, render_mask, ChannelEffectConfig, Mask, PerlinError, DEFAULT_MAGNITUDES,
    DEFAULT_MAX_OFFSET,
};
use crate::pggn::{GeneratorWeights, PggnError, GRID_CELLS};

pub const PARAMS_LAYOUT_VERSION: u32 = 1;
pub const MIX_DIM: usize = GRID_CELLS.len();
pub const K_LOWER: [f64; MIX_DIM] = [0.0, 0.0, 0.0, 0.4, 0.6];
pub const K_UPPER: [f64; MIX_DIM] = [0.1, 0.2, 0.3, 0.8, 1.0];
pub const T_LOWER: f64 = 0.1;
pub const T_UPPER: f64 = 0.65;
pub const DEFAULT_ALPHA: f64 = 0.25;
pub const DEFAULT_RESOLUTION: [usize; 2] = [256, 256];

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("parameter vector has {got} entries, expected {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error("label {label} out of range for a model with {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("image must have 3 channels, got {0}")]
    Channels(usize),
    #[error(transparent)]
    De(#[from] DeError),
    #[error(transparent)]
    Pggn(#[from] PggnError),
    #[error(transparent)]
    Perlin(#[from] PerlinError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudParams {
    pub z: Vec<f64>,
    pub k: [f64; MIX_DIM],
    pub t: f64,
}

impl CloudParams {
    /// Length of `r` for latent dimension `q`.
    pub fn dim(latent_dim: usize) -> usize {
        latent_dim + MIX_DIM + 1
    }

    pub fn decode(r: &[f64], latent_dim: usize) -> Result<Self, AttackError> {
        let expected = Self::dim(latent_dim);
        if r.len() != expected {
            return Err(AttackError::ParamLength { expected, got: r.len() });
        }
        let mut k = [0.0; MIX_DIM];
        k.copy_from_slice(&r[latent_dim..latent_dim + MIX_DIM]);
        Ok(CloudParams { z: r[..latent_dim].to_vec(), k, t: r[expected - 1] })
    }

    pub fn encode(&self) -> Vec<f64> {
        let mut r = self.z.clone();
        r.extend_from_slice(&self.k);
        r.push(self.t);
        r
    }
}

/// How the cloud layer's own colour is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudColor {
    /// `(1 - M) * mean colour + M * white`, per channel.
    #[default]
    MeanToWhite,
    /// Pure white.
    White,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelEffectSettings {
    pub enabled: bool,
    pub max_offset: u32,
    pub magnitudes: [f64; 3],
}

impl Default for ChannelEffectSettings {
    fn default() -> Self {
        ChannelEffectSettings { enabled: true, max_offset: DEFAULT_MAX_OFFSET, magnitudes: DEFAULT_MAGNITUDES }
    }
}

impl ChannelEffectSettings {
    /// Offsets drawn from `rng`; disabled settings give the identity.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelEffectConfig {
        if self.enabled {
            ChannelEffectConfig::sample(rng, self.max_offset, self.magnitudes)
        } else {
            ChannelEffectConfig::identity()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub alpha: f64,
    pub de: DeConfig,
    pub k_lower: [f64; MIX_DIM],
    pub k_upper: [f64; MIX_DIM],
    pub t_lower: f64,
    pub t_upper: f64,
    pub channel_effects: ChannelEffectSettings,
    pub cloud_color: CloudColor,
    /// Round candidates to 8-bit levels before querying.
    pub quantize: bool,
    /// Seeds both the optimizer (overriding `de.seed`) and the channel offsets.
    pub seed: u64,
    /// `[height, width]` images are resampled to before attacking; `None`
    /// keeps each image's own size.
    pub resolution: Option<[usize; 2]>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            alpha: DEFAULT_ALPHA,
            de: DeConfig::default(),
            k_lower: K_LOWER,
            k_upper: K_UPPER,
            t_lower: T_LOWER,
            t_upper: T_UPPER,
            channel_effects: ChannelEffectSettings::default(),
            cloud_color: CloudColor::default(),
            quantize: true,
            seed: 0,
            resolution: Some(DEFAULT_RESOLUTION),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        let fail = |m: String| Err(AttackError::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha {} must be finite and >= 0", self.alpha));
        }
        if !(0.0 <= self.t_lower && self.t_lower <= self.t_upper && self.t_upper <= 1.0) {
            return fail(format!("thickness bounds [{}, {}] must satisfy 0 <= lo <= hi <= 1", self.t_lower, self.t_upper));
        }
        if self.k_lower.iter().zip(&self.k_upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u)) {
            return fail(format!("mixing bounds {:?} .. {:?}", self.k_lower, self.k_upper));
        }
        if matches!(self.resolution, Some([h, w]) if h == 0 || w == 0) {
            return fail(format!("resolution {:?}", self.resolution));
        }
        ChannelEffectConfig {
            offsets: [(0, 0); 3],
            magnitudes: self.channel_effects.magnitudes,
            max_offset: self.channel_effects.max_offset,
        }
        .validate()?;
        self.de.validate()?;
        Ok(())
    }

    /// Search box for `r`: `z` in `[-1, 1]^q`, then the mixing and thickness bounds.
    pub fn bounds(&self, latent_dim: usize) -> Result<Bounds, AttackError> {
        let mut lower = vec![-1.0; latent_dim];
        let mut upper = vec![1.0; latent_dim];
        lower.extend_from_slice(&self.k_lower);
        upper.extend_from_slice(&self.k_upper);
        lower.push(self.t_lower);
        upper.push(self.t_upper);
        Ok(Bounds::new(lower, upper)?)
    }
}

/// Renders `r` into masks and adversarial images for one target size.
#[derive(Debug, Clone)]
pub struct CloudRenderer<'a> {
    generator: &'a GeneratorWeights,
    effects: ChannelEffectConfig,
    color: CloudColor,
    quantize: bool,
    height: usize,
    width: usize,
}

impl<'a> CloudRenderer<'a> {
    pub fn new(
        generator: &'a GeneratorWeights,
        effects: ChannelEffectConfig,
        color: CloudColor,
        quantize: bool,
        height: usize,
        width: usize,
    ) -> Self {
        CloudRenderer { generator, effects, color, quantize, height, width }
    }

    pub fn effects(&self) -> &ChannelEffectConfig {
        &self.effects
    }

    pub fn mask(&self, r: &[f64]) -> Result<Mask, AttackError> {
        let params = CloudParams::decode(r, self.generator.latent_dim())?;
        synthesize_cloud(&params, self.generator, self.height, self.width, &self.effects)
    }

    /// The adversarial image for `r`, quantized when the renderer is.
    pub fn adversarial(&self, clear: &Image, r: &[f64]) -> Result<Image, AttackError> {
        let mask = self.mask(r)?;
        let cloud = cloud_color_image(clear, &mask, self.color)?;
        let adv = fuse(clear, &mask, &cloud)?;
        Ok(if self.quantize { adv.quantized() } else { adv })
    }
}

/// `generate(z)`, render every lattice at `height x width`, mix by `k`,
/// normalize to `[0, t]`, then apply the channel effects.
pub fn synthesize_cloud(
    params: &CloudParams,
    generator: &GeneratorWeights,
    height: usize,
    width: usize,
    effects: &ChannelEffectConfig,
) -> Result<Mask, AttackError> {
    let grids = generator.generate(&params.z)?;
    let masks: Vec<Mask> = grids.grids().iter().map(|g| render_mask(g, height, width)).collect();
    let mixed = compose_masks(&masks, &params.k, params.t)?;
    Ok(apply_channel_effects(&mixed, effects)?)
}

fn check_mask(clear: &Image, mask: &Mask) -> Result<(), AttackError> {
    if clear.channels() != 3 {
        return Err(AttackError::Channels(clear.channels()));
    }
    if (mask.height(), mask.width(), mask.channels()) != (clear.height(), clear.width(), 3) {
        return Err(ImageError::DimensionMismatch(format!(
            "mask {}x{}x{} vs image {}x{}x3",
            mask.height(),
            mask.width(),
            mask.channels(),
            clear.height(),
            clear.width()
        ))
        .into());
    }
    Ok(())
}

/// The colour layer the cloud contributes.
pub fn cloud_color_image(clear: &Image, mask: &Mask, color: CloudColor) -> Result<Image, AttackError> {
    check_mask(clear, mask)?;
    let data = match color {
        CloudColor::MeanToWhite => {
            let mu = mean_color(clear);
            mask.values().iter().enumerate().map(|(i, &m)| (1.0 - m) * mu[i % 3] + m).collect()
        }
        CloudColor::White => vec![1.0; mask.values().len()],
    };
    Ok(Image::new(clear.height(), clear.width(), 3, data)?)
}

/// `I_clear (1 - M) + I_cloud M`, per pixel and channel.
pub fn fuse(clear: &Image, mask: &Mask, cloud: &Image) -> Result<Image, AttackError> {
    check_mask(clear, mask)?;
    if !clear.same_shape(cloud) {
        return Err(ImageError::DimensionMismatch("cloud layer and image differ in shape".into()).into());
    }
    let data = clear
        .data()
        .iter()
        .zip(cloud.data())
        .zip(mask.values())
        .map(|((&x, &c), &m)| (x * (1.0 - m) + c * m).clamp(0.0, 1.0))
        .collect();
    Ok(Image::new(clear.height(), clear.width(), 3, data)?)
}

/// Loss terms for one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fitness {
    /// `l_adv + alpha * l_mse`.
    pub l_f: f64,
    /// Confidence in the original label.
    pub l_adv: f64,
    pub l_mse: f64,
    pub predicted: usize,
}

/// Scores an already-rendered adversarial image with exactly one query.
pub fn score<M: TargetModel + ?Sized>(
    adv: &Image,
    clear: &Image,
    label: usize,
    model: &M,
    alpha: f64,
) -> Result<Fitness, AttackError> {
    let probs = model.classify(adv)?;
    let l_adv = probs.get(label).ok_or(AttackError::LabelOutOfRange { label, classes: probs.len() })?;
    let l_mse = mse(adv, clear)?;
    Ok(Fitness { l_f: l_adv + alpha * l_mse, l_adv, l_mse, predicted: probs.argmax() })
}

/// Renders `r` and scores it with exactly one query.
pub fn fitness<M: TargetModel + ?Sized>(
    r: &[f64],
    clear: &Image,
    label: usize,
    model: &M,
    renderer: &CloudRenderer<'_>,
    alpha: f64,
) -> Result<Fitness, AttackError> {
    let adv = renderer.adversarial(clear, r)?;
    score(&adv, clear, label, model, alpha)
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: Image,
    /// The vector that produced `adversarial`.
    pub params: Vec<f64>,
    pub queries: u64,
    pub success: bool,
    pub original_label: usize,
    pub predicted_label: usize,
    pub fitness: Fitness,
    pub generations: usize,
    /// Best-so-far fitness after initialization and after each generation.
    pub history: Vec<f64>,
    pub channel_effects: ChannelEffectConfig,
    pub elapsed: Duration,
}

/// Offsets are drawn once per attack, from a stream separate from the optimizer's.
fn attack_effects(cfg: &AttackConfig) -> ChannelEffectConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    cfg.channel_effects.sample(&mut rng)
}

fn check_inputs<M: TargetModel + ?Sized>(
    clear: &Image,
    label: usize,
    model: &M,
    generator: &GeneratorWeights,
    cfg: &AttackConfig,
) -> Result<(), AttackError> {
    cfg.validate()?;
    if clear.channels() != 3 {
        return Err(AttackError::Channels(clear.channels()));
    }
    if label >= model.label_count() {
        return Err(AttackError::LabelOutOfRange { label, classes: model.label_count() });
    }
    if generator.latent_dim() == 0 {
        return Err(AttackError::Config("generator has latent dimension 0".into()));
    }
    Ok(())
}

/// Minimizes the fitness of `clear` (currently classified as `label`) with
/// differential evolution, stopping at the first evaluated candidate the
/// model no longer assigns to `label`. Candidates are evaluated in parallel
/// only when `cfg.de.concurrent` is set and the model declares itself safe.
pub fn attack<M: TargetModel + ?Sized>(
    clear: &Image,
    label: usize,
    model: &M,
    generator: &GeneratorWeights,
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    check_inputs(clear, label, model, generator, cfg)?;
    let started = Instant::now();
    let effects = attack_effects(cfg);
    let renderer = CloudRenderer::new(generator, effects.clone(), cfg.cloud_color, cfg.quantize, clear.height(), clear.width());
    let bounds = cfg.bounds(generator.latent_dim())?;
    let de_cfg = DeConfig { seed: cfg.seed, ..cfg.de.clone() };
    let counter = CountingModel::new(model);
    let failure: Mutex<Option<AttackError>> = Mutex::new(None);

    let evaluate = |r: &[f64]| -> Scored<Option<Fitness>> {
        match fitness(r, clear, label, &counter, &renderer, cfg.alpha) {
            Ok(f) => Scored { fitness: f.l_f, aux: Some(f) },
            Err(e) => {
                failure.lock().expect("failure slot").get_or_insert(e);
                Scored { fitness: f64::INFINITY, aux: None }
            }
        }
    };
    let stop = |info: &EvalInfo<'_, Option<Fitness>>| info.candidate.aux.map_or(true, |f| f.predicted != label);
    let run = if de_cfg.concurrent && model.concurrency() == Concurrency::Safe {
        de::run_concurrent(evaluate, &bounds, &de_cfg, stop)?
    } else {
        de::run(evaluate, &bounds, &de_cfg, stop)?
    };
    if let Some(e) = failure.into_inner().expect("failure slot") {
        return Err(e);
    }

    let success = run.success();
    let winner = run.stopped_on.unwrap_or(run.best);
    let fit = winner.aux.expect("successful evaluation");
    let adversarial = renderer.adversarial(clear, &winner.vector)?;
    Ok(AttackResult {
        adversarial,
        params: winner.vector,
        queries: counter.count(),
        success,
        original_label: label,
        predicted_label: fit.predicted,
        fitness: fit,
        generations: run.generations,
        history: run.history,
        channel_effects: effects,
        elapsed: started.elapsed(),
    })
}

/// One uniformly random `r` inside the search box, scored with a single
/// query and no optimization.
pub fn random_cloud<M: TargetModel + ?Sized>(
    clear: &Image,
    label: usize,
    model: &M,
    generator: &GeneratorWeights,
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    check_inputs(clear, label, model, generator, cfg)?;
    let started = Instant::now();
    let effects = attack_effects(cfg);
    let renderer = CloudRenderer::new(generator, effects.clone(), cfg.cloud_color, cfg.quantize, clear.height(), clear.width());
    let bounds = cfg.bounds(generator.latent_dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let r: Vec<f64> = bounds.lower().iter().zip(bounds.upper()).map(|(&l, &u)| l + rng.gen::<f64>() * (u - l)).collect();
    let adversarial = renderer.adversarial(clear, &r)?;
    let fit = score(&adversarial, clear, label, model, cfg.alpha)?;
    Ok(AttackResult {
        adversarial,
        params: r,
        queries: 1,
        success: fit.predicted != label,
        original_label: label,
        predicted_label: fit.predicted,
        fitness: fit,
        generations: 0,
        history: vec![fit.l_f],
        channel_effects: effects,
        elapsed: started.elapsed(),
    })
}
