//! Adversarial training against classical lattices.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    discriminator_features, discriminator_logits, generator_forward, gridsets_to_batch, sample_real_gridset_with, DiscriminatorWeights,
    GeneratorWeights, GridSet, PggnError,
};
use crate::tensor::{Adam, AdamConfig, Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorLoss {
    /// Minimize `-log D(G(z))`.
    NonSaturating,
    /// Minimize `log(1 - D(G(z)))`.
    Minimax,
    /// Match the batch mean of the discriminator's penultimate features
    /// on generated sets to that on real sets.
    FeatureMatching,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub latent_dim: usize,
    /// Real lattice sets per epoch (one lattice of every size per set).
    pub grids_per_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub generator_loss: GeneratorLoss,
    /// Generator updates per discriminator update.
    pub generator_steps: usize,
    /// Standard deviation of Gaussian noise added to every discriminator
    /// input at the first epoch, annealed linearly to zero at the last.
    pub instance_noise: f64,
    /// Discriminator target for real sets.
    pub real_label: f64,
    /// Weight of a term rewarding the mean L1 distance between generated
    /// sets from paired latents.
    pub diversity_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: super::DEFAULT_LATENT_DIM,
            grids_per_size: 500,
            epochs: 50,
            batch_size: 25,
            adam: AdamConfig::default(),
            generator_loss: GeneratorLoss::NonSaturating,
            generator_steps: 1,
            instance_noise: 0.0,
            real_label: 1.0,
            diversity_weight: 20.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PggnError> {
        let fail = |m: String| Err(PggnError::Config(m));
        if self.latent_dim == 0 || self.grids_per_size == 0 || self.batch_size == 0 || self.generator_steps == 0 {
            return fail("latent_dim, grids_per_size, batch_size and generator_steps must be positive".into());
        }
        if !(self.instance_noise >= 0.0 && self.instance_noise.is_finite()) {
            return fail(format!("instance_noise {} must be finite and >= 0", self.instance_noise));
        }
        if !(self.diversity_weight >= 0.0 && self.diversity_weight.is_finite()) {
            return fail(format!("diversity_weight {} must be finite and >= 0", self.diversity_weight));
        }
        if !(0.5..=1.0).contains(&self.real_label) {
            return fail(format!("real_label {} outside [0.5, 1]", self.real_label));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.adam.lr));
        }
        Ok(())
    }

    fn noise_at(&self, epoch: usize) -> f64 {
        if self.epochs > 1 {
            self.instance_noise * (1.0 - epoch as f64 / (self.epochs - 1) as f64)
        } else {
            self.instance_noise
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Mean `D` output on real and generated sets over the epoch.
    pub d_real: f64,
    pub d_fake: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub generator: GeneratorWeights,
    pub discriminator: DiscriminatorWeights,
    pub history: Vec<EpochStats>,
}

struct DiscriminatorStep {
    loss: f64,
    d_real: f64,
    d_fake: f64,
}

/// Both networks, their optimizers and the training RNG.
pub(crate) struct Trainer {
    cfg: TrainConfig,
    pub(crate) generator: GeneratorWeights,
    pub(crate) discriminator: DiscriminatorWeights,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub(crate) fn new(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let generator = GeneratorWeights::random(cfg.latent_dim, rng.gen());
        let discriminator = DiscriminatorWeights::random(rng.gen());
        Self::from_weights(cfg, generator, discriminator, ChaCha8Rng::seed_from_u64(rng.gen()))
    }

    pub(crate) fn from_weights(
        cfg: &TrainConfig,
        generator: GeneratorWeights,
        discriminator: DiscriminatorWeights,
        rng: ChaCha8Rng,
    ) -> Self {
        let opt_g = Adam::new(generator.tensors(), cfg.adam);
        let opt_d = Adam::new(discriminator.tensors(), cfg.adam);
        Self { cfg: cfg.clone(), generator, discriminator, opt_g, opt_d, rng }
    }

    fn latent_batch(&mut self, batch: usize) -> Tensor<f32> {
        let rng = &mut self.rng;
        Tensor::from_fn(&[batch, self.cfg.latent_dim], |_| rng.gen_range(-1.0..=1.0))
    }

    fn noisy(&mut self, mut t: Tensor<f32>, sigma: f64) -> Tensor<f32> {
        if sigma > 0.0 {
            let normal = Normal::new(0.0f32, sigma as f32).expect("finite sigma");
            for v in t.data_mut() {
                *v += normal.sample(&mut self.rng);
            }
        }
        t
    }

    /// One discriminator update: real sets toward `real_label`, fresh
    /// generated sets toward 0.
    fn discriminator_step(&mut self, real: &[GridSet], sigma: f64, epoch: usize) -> Result<DiscriminatorStep, PggnError> {
        let batch = real.len();
        let z = self.latent_batch(batch);
        let fake = {
            let mut tape = Tape::new();
            let params: Vec<Var> = self.generator.tensors().map(|t| tape.constant(t.clone())).collect();
            let z = tape.constant(z);
            let grids = generator_forward(&mut tape, &params, z)?;
            grids.iter().map(|&g| tape.value(g).clone()).collect::<Vec<_>>()
        };

        let mut tape = Tape::new();
        let params: Vec<Var> = self.discriminator.tensors().map(|t| tape.param(t.clone())).collect();
        let mut real_vars = Vec::new();
        for t in gridsets_to_batch::<f32>(real)? {
            let t = self.noisy(t, sigma);
            real_vars.push(tape.constant(t));
        }
        let mut fake_vars = Vec::new();
        for t in fake {
            let t = self.noisy(t, sigma);
            fake_vars.push(tape.constant(t));
        }
        let l_real = discriminator_logits(&mut tape, &params, &real_vars)?;
        let l_fake = discriminator_logits(&mut tape, &params, &fake_vars)?;
        let loss_real = tape.bce_with_logits(l_real, &vec![self.cfg.real_label as f32; batch])?;
        let loss_fake = tape.bce_with_logits(l_fake, &vec![0.0; batch])?;
        let loss = tape.add(loss_real, loss_fake)?;
        let step = DiscriminatorStep {
            loss: f64::from(tape.value(loss).data()[0]),
            d_real: mean_probability(tape.value(l_real)),
            d_fake: mean_probability(tape.value(l_fake)),
        };
        let grads = collect_grads(&tape.backward(loss)?, &params)?;
        check_finite(epoch, "discriminator", step.loss, &grads)?;
        self.opt_d.step(self.discriminator.tensors_mut(), &grads.iter().collect::<Vec<_>>())?;
        Ok(step)
    }

    /// One generator update through the current, frozen discriminator.
    /// `real` is only used by feature matching. Returns the generator loss
    /// before the update.
    pub(crate) fn generator_step(&mut self, real: &[GridSet], sigma: f64, epoch: usize) -> Result<f64, PggnError> {
        let batch = real.len();
        let target = match self.cfg.generator_loss {
            GeneratorLoss::FeatureMatching => Some(self.real_feature_mean(real, sigma)?),
            _ => None,
        };
        let z = self.latent_batch(batch);
        let mut tape = Tape::new();
        let params: Vec<Var> = self.generator.tensors().map(|t| tape.param(t.clone())).collect();
        let z = tape.constant(z);
        let grids = generator_forward(&mut tape, &params, z)?;
        let mut seen = Vec::with_capacity(grids.len());
        for &g in &grids {
            if sigma > 0.0 {
                let noise = self.noisy(Tensor::zeros(tape.value(g).shape()), sigma);
                let noise = tape.constant(noise);
                seen.push(tape.add(g, noise)?);
            } else {
                seen.push(g);
            }
        }
        let frozen: Vec<Var> = self.discriminator.tensors().map(|t| tape.constant(t.clone())).collect();
        let loss = match (self.cfg.generator_loss, target) {
            (GeneratorLoss::NonSaturating, _) => {
                let logits = discriminator_logits(&mut tape, &frozen, &seen)?;
                tape.bce_with_logits(logits, &vec![1.0; batch])?
            }
            (GeneratorLoss::Minimax, _) => {
                let logits = discriminator_logits(&mut tape, &frozen, &seen)?;
                let l = tape.bce_with_logits(logits, &vec![0.0; batch])?;
                tape.scale(l, -1.0)
            }
            (GeneratorLoss::FeatureMatching, target) => {
                let features = discriminator_features(&mut tape, &frozen, &seen)?;
                tape.mean_feature_distance(features, &target.expect("computed above"))?
            }
        };
        let value = f64::from(tape.value(loss).data()[0]);
        let loss = if self.cfg.diversity_weight > 0.0 && batch >= 2 {
            let mut total = loss;
            for &g in &grids {
                let d = tape.pair_l1(g)?;
                let d = tape.scale(d, -(self.cfg.diversity_weight as f32) / grids.len() as f32);
                total = tape.add(total, d)?;
            }
            total
        } else {
            loss
        };
        let grads = collect_grads(&tape.backward(loss)?, &params)?;
        check_finite(epoch, "generator", value, &grads)?;
        self.opt_g.step(self.generator.tensors_mut(), &grads.iter().collect::<Vec<_>>())?;
        Ok(value)
    }
}

impl Trainer {
    fn real_feature_mean(&mut self, real: &[GridSet], sigma: f64) -> Result<Vec<f32>, PggnError> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.discriminator.tensors().map(|t| tape.constant(t.clone())).collect();
        let mut grids = Vec::new();
        for t in gridsets_to_batch::<f32>(real)? {
            let t = self.noisy(t, sigma);
            grids.push(tape.constant(t));
        }
        let features = discriminator_features(&mut tape, &params, &grids)?;
        let f = tape.value(features);
        let width = f.shape()[1];
        let mut mean = vec![0.0f32; width];
        for row in f.data().chunks(width) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v / real.len() as f32;
            }
        }
        Ok(mean)
    }
}

/// Trains both networks; identical configs give bit-identical weights.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, PggnError> {
    train_with(cfg, |_, _| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &GeneratorWeights),
) -> Result<TrainOutcome, PggnError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new(cfg, &mut rng);
    let real: Vec<_> = (0..cfg.grids_per_size).map(|_| sample_real_gridset_with(&mut rng)).collect();
    let mut order: Vec<usize> = (0..real.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let sigma = cfg.noise_at(epoch);
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let sets: Vec<GridSet> = chunk.iter().map(|&i| real[i].clone()).collect();
            let d = trainer.discriminator_step(&sets, sigma, epoch)?;
            let mut g_loss = 0.0;
            for _ in 0..cfg.generator_steps {
                g_loss += trainer.generator_step(&sets, sigma, epoch)?;
            }
            let w = chunk.len() as f64;
            sums[0] += d.loss * w;
            sums[1] += g_loss / cfg.generator_steps as f64 * w;
            sums[2] += d.d_real * w;
            sums[3] += d.d_fake * w;
            seen += chunk.len();
        }
        let n = seen as f64;
        let stats = EpochStats {
            epoch,
            d_loss: sums[0] / n,
            g_loss: sums[1] / n,
            d_real: sums[2] / n,
            d_fake: sums[3] / n,
        };
        log::info!(
            "epoch {epoch}: d_loss {:.4} g_loss {:.4} D(real) {:.3} D(fake) {:.3}",
            stats.d_loss,
            stats.g_loss,
            stats.d_real,
            stats.d_fake
        );
        on_epoch(&stats, &trainer.generator);
        history.push(stats);
    }
    Ok(TrainOutcome { generator: trainer.generator, discriminator: trainer.discriminator, history })
}

fn mean_probability(logits: &Tensor<f32>) -> f64 {
    let sum: f64 = logits.data().iter().map(|&l| 1.0 / (1.0 + (-f64::from(l)).exp())).sum();
    sum / logits.numel() as f64
}

fn collect_grads(grads: &Gradients<f32>, params: &[Var]) -> Result<Vec<Tensor<f32>>, PggnError> {
    params
        .iter()
        .map(|&p| {
            grads
                .get(p)
                .cloned()
                .ok_or_else(|| PggnError::Layout("parameter received no gradient".into()))
        })
        .collect()
}

fn check_finite(epoch: usize, net: &str, loss: f64, grads: &[Tensor<f32>]) -> Result<(), PggnError> {
    if !loss.is_finite() {
        return Err(PggnError::Diverged { epoch, detail: format!("{net} loss is {loss}") });
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(PggnError::Diverged { epoch, detail: format!("{net} gradient is not finite") });
    }
    Ok(())
}

/// Pooled component mean and standard deviation over several grid sets.
pub fn component_stats<'a>(sets: impl IntoIterator<Item = &'a GridSet>) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for set in sets {
        for c in set.components() {
            n += 1;
            sum += c;
            sq += c * c;
        }
    }
    let mean = sum / n.max(1) as f64;
    (mean, (sq / n.max(1) as f64 - mean * mean).max(0.0).sqrt())
}
