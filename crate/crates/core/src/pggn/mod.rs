//! Gradient-grid generator network and its discriminator.
//!
//! The generator maps a latent vector `z` (default dimension 52) through a
//! fully connected layer to a `128 x 3 x 3` feature map, then five stride-2
//! transposed convolutions (`k = 3`, `pad = 1`) with channel plan
//! `128 -> 64 -> 32 -> 16 -> 8 -> 2`. Spatial sizes grow `3 -> 5 -> 9 -> 17
//! -> 33 -> 65`, and the last two channels of every stage, squashed by `tanh`
//! and rescaled to unit length per cell, are read out as the x/y planes of a
//! gradient lattice with 4, 8, 16, 32 and 64 cells. Hidden activations are leaky ReLU with slope 0.2.
//!
//! The discriminator consumes the lattices largest-first: a stride-2
//! convolution brings 65 down to 33, the 33-vertex lattice is concatenated,
//! and so on down to `130 x 5 x 5`, which a fully connected layer and a
//! sigmoid turn into the probability that the set is real.

mod train;
mod weights;

pub use train::{component_stats, train, train_with, EpochStats, GeneratorLoss, TrainConfig, TrainOutcome};
pub use weights::{load_weights, save_weights, PggnBundle, WeightFileError, WEIGHT_FILE_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::perlin::{random_unit_grid_with, GradientGrid, PerlinError};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

/// Cells per side of the five lattices, smallest first.
pub const GRID_CELLS: [usize; 5] = [4, 8, 16, 32, 64];
pub const DEFAULT_LATENT_DIM: usize = 52;
const GEN_CHANNELS: [usize; 6] = [128, 64, 32, 16, 8, 2];
const DISC_CHANNELS: [usize; 4] = [16, 32, 64, 128];
const SEED_SIDE: usize = 3;
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;
const LEAKY_SLOPE: f64 = 0.2;
const UNIT_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PggnError {
    #[error("latent vector has {got} entries, generator expects {expected}")]
    LatentDim { expected: usize, got: usize },
    #[error("grid set shape mismatch: {0}")]
    GridShape(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Perlin(#[from] PerlinError),
}

/// Five gradient lattices, ordered 4, 8, 16, 32, 64 cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSet {
    grids: Vec<GradientGrid>,
}

impl GridSet {
    pub fn new(grids: Vec<GradientGrid>) -> Result<Self, PggnError> {
        let cells: Vec<usize> = grids.iter().map(GradientGrid::cells).collect();
        if cells != GRID_CELLS {
            return Err(PggnError::GridShape(format!("cells {cells:?}, expected {GRID_CELLS:?}")));
        }
        Ok(Self { grids })
    }

    pub fn grids(&self) -> &[GradientGrid] {
        &self.grids
    }

    pub fn components(&self) -> impl Iterator<Item = f64> + '_ {
        self.grids.iter().flat_map(GradientGrid::components)
    }
}

/// Classical lattices: unit gradients at uniform angles, one per size.
pub fn sample_real_gridset(seed: u64) -> GridSet {
    sample_real_gridset_with(&mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_real_gridset_with<R: Rng + ?Sized>(rng: &mut R) -> GridSet {
    let grids = GRID_CELLS
        .iter()
        .map(|&n| random_unit_grid_with(n, rng).expect("nonzero cells"))
        .collect();
    GridSet { grids }
}

/// Parameter shapes and names of one network, in tape order.
fn generator_layout(latent_dim: usize) -> Vec<(String, Vec<usize>)> {
    let mut layout = vec![
        ("gen.fc.weight".to_string(), vec![latent_dim, GEN_CHANNELS[0] * SEED_SIDE * SEED_SIDE]),
        ("gen.fc.bias".to_string(), vec![GEN_CHANNELS[0] * SEED_SIDE * SEED_SIDE]),
    ];
    for (i, pair) in GEN_CHANNELS.windows(2).enumerate() {
        layout.push((format!("gen.deconv{}.weight", i + 1), vec![pair[0], pair[1], KERNEL, KERNEL]));
        layout.push((format!("gen.deconv{}.bias", i + 1), vec![pair[1]]));
    }
    layout
}

fn discriminator_layout() -> Vec<(String, Vec<usize>)> {
    let mut layout = Vec::new();
    let mut c_in = 2;
    for (i, &c_out) in DISC_CHANNELS.iter().enumerate() {
        layout.push((format!("disc.conv{}.weight", i + 1), vec![c_out, c_in, KERNEL, KERNEL]));
        layout.push((format!("disc.conv{}.bias", i + 1), vec![c_out]));
        c_in = c_out + 2;
    }
    let side = GRID_CELLS[0] + 1;
    layout.push(("disc.fc.weight".to_string(), vec![c_in * side * side, 1]));
    layout.push(("disc.fc.bias".to_string(), vec![1]));
    layout
}

/// Fan-in used for `U(-sqrt(1/fan_in), sqrt(1/fan_in))` initialization:
/// rows of a fully connected weight, `in_channels * k * k` for kernels.
fn fan_in(name: &str, shape: &[usize]) -> usize {
    match shape {
        [rows, _] => *rows,
        [c_out, c_in, k, _] if name.starts_with("disc.") => {
            let _ = c_out;
            c_in * k * k
        }
        [c_in, _, k, _] => c_in * k * k,
        _ => 1,
    }
}

/// Weights are uniform in `±sqrt(1 / fan_in)`; biases start at zero.
fn init_params(layout: &[(String, Vec<usize>)], seed: u64) -> Vec<(String, Tensor<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layout
        .iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".weight") {
                Tensor::uniform(shape, (1.0 / fan_in(name, shape) as f64).sqrt(), &mut rng)
            } else {
                Tensor::zeros(shape)
            };
            (name.clone(), t)
        })
        .collect()
}

fn check_layout(
    params: &[(String, Tensor<f32>)],
    layout: &[(String, Vec<usize>)],
) -> Result<(), PggnError> {
    if params.len() != layout.len() {
        return Err(PggnError::Layout(format!("{} tensors, expected {}", params.len(), layout.len())));
    }
    for ((name, t), (want_name, want_shape)) in params.iter().zip(layout) {
        if name != want_name || t.shape() != want_shape.as_slice() {
            return Err(PggnError::Layout(format!(
                "{name} {:?}, expected {want_name} {want_shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Generator parameters `{fc, deconv1..deconv5}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorWeights {
    latent_dim: usize,
    params: Vec<(String, Tensor<f32>)>,
}

impl GeneratorWeights {
    /// Freshly initialized weights, usable as a frozen random generator.
    pub fn random(latent_dim: usize, seed: u64) -> Self {
        Self { latent_dim, params: init_params(&generator_layout(latent_dim), seed) }
    }

    pub fn from_named(params: Vec<(String, Tensor<f32>)>) -> Result<Self, PggnError> {
        let latent_dim = params
            .first()
            .map(|(_, t)| t.shape()[0])
            .ok_or_else(|| PggnError::Layout("no generator tensors".into()))?;
        check_layout(&params, &generator_layout(latent_dim))?;
        Ok(Self { latent_dim, params })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn named(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub(crate) fn tensors(&self) -> impl Iterator<Item = &Tensor<f32>> {
        self.params.iter().map(|(_, t)| t)
    }

    /// Lattices for a single latent vector.
    pub fn generate(&self, z: &[f64]) -> Result<GridSet, PggnError> {
        Ok(self.generate_batch(&[z.to_vec()])?.remove(0))
    }

    pub fn generate_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<GridSet>, PggnError> {
        if let Some(z) = zs.iter().find(|z| z.len() != self.latent_dim) {
            return Err(PggnError::LatentDim { expected: self.latent_dim, got: z.len() });
        }
        let batch = zs.len();
        let z = Tensor::new(vec![batch, self.latent_dim], zs.iter().flatten().map(|&v| v as f32).collect())?;
        let mut tape = Tape::new();
        let params: Vec<Var> = self.tensors().map(|t| tape.constant(t.clone())).collect();
        let z = tape.constant(z);
        let grids = generator_forward(&mut tape, &params, z)?;
        let tensors: Vec<&Tensor<f32>> = grids.iter().map(|&g| tape.value(g)).collect();
        (0..batch).map(|s| gridset_from_batch(&tensors, s)).collect()
    }
}

/// Discriminator parameters `{conv1..conv4, fc}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorWeights {
    params: Vec<(String, Tensor<f32>)>,
}

impl DiscriminatorWeights {
    pub fn random(seed: u64) -> Self {
        Self { params: init_params(&discriminator_layout(), seed) }
    }

    pub fn from_named(params: Vec<(String, Tensor<f32>)>) -> Result<Self, PggnError> {
        check_layout(&params, &discriminator_layout())?;
        Ok(Self { params })
    }

    pub fn named(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub(crate) fn tensors(&self) -> impl Iterator<Item = &Tensor<f32>> {
        self.params.iter().map(|(_, t)| t)
    }

    /// Probability in `(0, 1)` that `set` is a classical lattice set.
    pub fn discriminate(&self, set: &GridSet) -> Result<f64, PggnError> {
        Ok(self.discriminate_batch(std::slice::from_ref(set))?[0])
    }

    pub fn discriminate_batch(&self, sets: &[GridSet]) -> Result<Vec<f64>, PggnError> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.tensors().map(|t| tape.constant(t.clone())).collect();
        let grids: Vec<Var> = gridsets_to_batch::<f32>(sets)?
            .into_iter()
            .map(|t| tape.constant(t))
            .collect();
        let p = discriminator_forward(&mut tape, &params, &grids)?;
        Ok(tape.value(p).data().iter().map(|&v| f64::from(v)).collect())
    }
}

/// Records the generator on `tape`. `params` are the tape handles of the
/// generator tensors in layout order; returns one `[B, 2, s, s]` lattice
/// tensor per size, smallest first.
pub fn generator_forward<T: Real>(tape: &mut Tape<T>, params: &[Var], z: Var) -> Result<Vec<Var>, PggnError> {
    if params.len() != 2 + 2 * (GEN_CHANNELS.len() - 1) {
        return Err(PggnError::Layout(format!("{} generator params", params.len())));
    }
    let slope = T::from_f64_lossy(LEAKY_SLOPE);
    let batch = tape.value(z).shape()[0];
    let h = tape.fully_connected(z, params[0], params[1])?;
    let h = tape.reshape(h, &[batch, GEN_CHANNELS[0], SEED_SIDE, SEED_SIDE])?;
    let mut x = tape.leaky_relu(h, slope);
    let mut grids = Vec::with_capacity(GRID_CELLS.len());
    for (stage, &c_out) in GEN_CHANNELS[1..].iter().enumerate() {
        let pre = tape.deconv2d(x, params[2 + 2 * stage], STRIDE, PAD)?;
        let pre = tape.channel_bias(pre, params[3 + 2 * stage])?;
        let tail = if c_out == 2 { pre } else { tape.slice_channels(pre, c_out - 2, 2)? };
        let squashed = tape.tanh(tail);
        grids.push(tape.unit_pairs(squashed, T::from_f64_lossy(UNIT_EPS))?);
        if stage + 1 < GRID_CELLS.len() {
            x = tape.leaky_relu(pre, slope);
        }
    }
    Ok(grids)
}

/// Records the discriminator on `tape`; `grids` are `[B, 2, s, s]`
/// tensors smallest first. Returns `[B, 1]` probabilities.
pub fn discriminator_forward<T: Real>(tape: &mut Tape<T>, params: &[Var], grids: &[Var]) -> Result<Var, PggnError> {
    let logit = discriminator_logits(tape, params, grids)?;
    Ok(tape.sigmoid(logit))
}

/// As [`discriminator_forward`] without the final sigmoid.
pub fn discriminator_logits<T: Real>(tape: &mut Tape<T>, params: &[Var], grids: &[Var]) -> Result<Var, PggnError> {
    let features = discriminator_features(tape, params, grids)?;
    let n = params.len();
    Ok(tape.fully_connected(features, params[n - 2], params[n - 1])?)
}

/// Flattened `[B, 130 * 5 * 5]` features that feed the final fully
/// connected layer.
pub fn discriminator_features<T: Real>(tape: &mut Tape<T>, params: &[Var], grids: &[Var]) -> Result<Var, PggnError> {
    if params.len() != 2 * DISC_CHANNELS.len() + 2 || grids.len() != GRID_CELLS.len() {
        return Err(PggnError::Layout(format!("{} discriminator params, {} grids", params.len(), grids.len())));
    }
    let slope = T::from_f64_lossy(LEAKY_SLOPE);
    let batch = tape.value(grids[0]).shape()[0];
    let mut x = grids[GRID_CELLS.len() - 1];
    for stage in 0..DISC_CHANNELS.len() {
        let h = tape.conv2d(x, params[2 * stage], STRIDE, PAD)?;
        let h = tape.channel_bias(h, params[2 * stage + 1])?;
        let h = tape.leaky_relu(h, slope);
        x = tape.concat_channels(h, grids[GRID_CELLS.len() - 2 - stage])?;
    }
    let features = tape.value(x).numel() / batch;
    Ok(tape.reshape(x, &[batch, features])?)
}

/// Packs grid sets into one `[B, 2, s, s]` tensor per size (x plane first).
pub fn gridsets_to_batch<T: Real>(sets: &[GridSet]) -> Result<Vec<Tensor<T>>, PggnError> {
    let batch = sets.len();
    GRID_CELLS
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let side = n + 1;
            let plane = side * side;
            let mut data = vec![T::zero(); batch * 2 * plane];
            for (s, set) in sets.iter().enumerate() {
                for (v, g) in set.grids[i].vectors().iter().enumerate() {
                    data[s * 2 * plane + v] = T::from_f64_lossy(g[0]);
                    data[s * 2 * plane + plane + v] = T::from_f64_lossy(g[1]);
                }
            }
            Ok(Tensor::new(vec![batch, 2, side, side], data)?)
        })
        .collect()
}

fn gridset_from_batch<T: Real>(tensors: &[&Tensor<T>], sample: usize) -> Result<GridSet, PggnError> {
    let grids = GRID_CELLS
        .iter()
        .zip(tensors)
        .map(|(&n, t)| {
            let side = n + 1;
            let plane = side * side;
            let base = sample * 2 * plane;
            let d = &t.data()[base..base + 2 * plane];
            let to64 = |v: &T| v.to_f64().unwrap_or(0.0);
            let xs: Vec<f64> = d[..plane].iter().map(to64).collect();
            let ys: Vec<f64> = d[plane..].iter().map(to64).collect();
            GradientGrid::from_planes(n, &xs, &ys)
        })
        .collect::<Result<Vec<_>, _>>()?;
    GridSet::new(grids)
}
