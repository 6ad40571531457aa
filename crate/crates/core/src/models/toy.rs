//! Linear softmax classifier over 16x16 area-averaged pixels.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Concurrency, LabeledImage, ModelError, ProbVector, SyntheticDataset, TargetModel};
use crate::imaging::Image;
use crate::tensor::{Tape, Tensor};

/// Side of the downsampled feature grid.
pub const FEATURE_SIDE: usize = 16;
const FEATURE_DIM: usize = FEATURE_SIDE * FEATURE_SIDE * 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClassifier {
    labels: Vec<String>,
    /// Row-major `[FEATURE_DIM, classes]`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig { epochs: 30, lr: 0.5, batch_size: 16, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ToyTrainOutcome {
    pub classifier: ToyClassifier,
    /// Mean cross-entropy over the whole training set; entry 0 is before
    /// the first update.
    pub loss_history: Vec<f64>,
}

impl ToyClassifier {
    /// Zero weights, uniform output.
    pub fn zeros(labels: Vec<String>) -> Self {
        let c = labels.len();
        ToyClassifier { weights: vec![0.0; FEATURE_DIM * c], bias: vec![0.0; c], labels }
    }

    pub fn from_parts(labels: Vec<String>, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self, ModelError> {
        let c = labels.len();
        if c == 0 || weights.len() != FEATURE_DIM * c || bias.len() != c {
            return Err(ModelError::Config(format!(
                "{c} labels, {} weights, {} biases (feature dimension {FEATURE_DIM})",
                weights.len(),
                bias.len()
            )));
        }
        Ok(ToyClassifier { labels, weights, bias })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    /// Area averages over a 16x16 grid, shifted by -0.5, laid out
    /// `(row * 16 + col) * 3 + channel`.
    pub fn features(image: &Image) -> Result<Vec<f64>, ModelError> {
        if image.channels() != 3 {
            return Err(ModelError::Channels(image.channels()));
        }
        let rows = axis_weights(image.height());
        let cols = axis_weights(image.width());
        let mut out = vec![0.0; FEATURE_DIM];
        for (cy, rw) in rows.iter().enumerate() {
            for (cx, cw) in cols.iter().enumerate() {
                let cell = &mut out[(cy * FEATURE_SIDE + cx) * 3..][..3];
                for &(y, wy) in rw {
                    for &(x, wx) in cw {
                        for (c, slot) in cell.iter_mut().enumerate() {
                            *slot += wy * wx * image.get(y, x, c);
                        }
                    }
                }
                cell.iter_mut().for_each(|v| *v -= 0.5);
            }
        }
        Ok(out)
    }

    pub fn logits(&self, image: &Image) -> Result<Vec<f64>, ModelError> {
        let x = Self::features(image)?;
        let c = self.classes();
        let mut out = self.bias.clone();
        for (xi, row) in x.iter().zip(self.weights.chunks(c)) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let json = serde_json::to_vec(self).map_err(|e| weights_err(path, e))?;
        fs::write(path, json).map_err(|e| weights_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|e| weights_err(path, e))?;
        let raw: ToyClassifier = serde_json::from_slice(&bytes).map_err(|e| weights_err(path, e))?;
        Self::from_parts(raw.labels, raw.weights, raw.bias)
    }

    /// Fraction of `images` whose argmax matches the label.
    pub fn accuracy(&self, images: &[LabeledImage]) -> Result<f64, ModelError> {
        if images.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let mut correct = 0usize;
        for l in images {
            if self.classify(&l.image)?.argmax() == l.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / images.len() as f64)
    }
}

fn weights_err(path: &Path, e: impl std::fmt::Display) -> ModelError {
    ModelError::Weights { path: path.display().to_string(), detail: e.to_string() }
}

/// For each of the 16 cells along an axis of length `n`, the pixels it
/// overlaps and the overlap fraction of the cell.
fn axis_weights(n: usize) -> Vec<Vec<(usize, f64)>> {
    let cell = n as f64 / FEATURE_SIDE as f64;
    (0..FEATURE_SIDE)
        .map(|i| {
            let (lo, hi) = (i as f64 * cell, (i + 1) as f64 * cell);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n);
            (first..last)
                .filter_map(|p| {
                    let overlap = hi.min(p as f64 + 1.0) - lo.max(p as f64);
                    (overlap > 0.0).then(|| (p, overlap / cell))
                })
                .collect()
        })
        .collect()
}

impl TargetModel for ToyClassifier {
    fn classify(&self, image: &Image) -> Result<ProbVector, ModelError> {
        ProbVector::softmax(&self.logits(image)?)
    }

    fn label_count(&self) -> usize {
        self.classes()
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Safe
    }

    fn labels(&self) -> Option<Vec<String>> {
        Some(self.labels.clone())
    }
}

/// Mini-batch gradient descent on mean cross-entropy, starting from zero
/// weights. Batches are reshuffled every epoch from `cfg.seed`.
pub fn toy_train(ds: &SyntheticDataset, cfg: &ToyTrainConfig) -> Result<ToyTrainOutcome, ModelError> {
    toy_train_on(&ds.images, SyntheticDataset::class_names(), cfg)
}

/// As [`toy_train`] for any labeled images; `labels` names the classes.
pub fn toy_train_on(
    images: &[LabeledImage],
    labels: Vec<String>,
    cfg: &ToyTrainConfig,
) -> Result<ToyTrainOutcome, ModelError> {
    if images.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(ModelError::Config(format!("batch size {}, lr {}", cfg.batch_size, cfg.lr)));
    }
    let classes = labels.len();
    if let Some(l) = images.iter().find(|l| l.label >= classes) {
        return Err(ModelError::Config(format!("label {} with {classes} classes", l.label)));
    }
    let features = images.iter().map(|l| ToyClassifier::features(&l.image)).collect::<Result<Vec<_>, _>>()?;
    let targets: Vec<usize> = images.iter().map(|l| l.label).collect();

    let mut w = Tensor::<f64>::zeros(&[FEATURE_DIM, classes]);
    let mut b = Tensor::<f64>::zeros(&[classes]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = vec![dataset_loss(&features, &targets, &w, &b)?];

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x: Vec<f64> = batch.iter().flat_map(|&i| features[i].iter().copied()).collect();
            let t: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(vec![batch.len(), FEATURE_DIM], x)?);
            let wv = tape.param(w.clone());
            let bv = tape.param(b.clone());
            let logits = tape.fully_connected(xv, wv, bv)?;
            let loss = tape.softmax_cross_entropy(logits, &t)?;
            let grads = tape.backward(loss)?;
            for (param, var) in [(&mut w, wv), (&mut b, bv)] {
                let g = grads.get(var).expect("parameter gradient");
                for (p, d) in param.data_mut().iter_mut().zip(g.data()) {
                    *p -= cfg.lr * d;
                }
            }
        }
        history.push(dataset_loss(&features, &targets, &w, &b)?);
    }
    let classifier = ToyClassifier::from_parts(labels, w.into_data(), b.into_data())?;
    Ok(ToyTrainOutcome { classifier, loss_history: history })
}

fn dataset_loss(features: &[Vec<f64>], targets: &[usize], w: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64, ModelError> {
    let x: Vec<f64> = features.iter().flatten().copied().collect();
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new(vec![features.len(), FEATURE_DIM], x)?);
    let wv = tape.constant(w.clone());
    let bv = tape.constant(b.clone());
    let logits = tape.fully_connected(xv, wv, bv)?;
    let loss = tape.softmax_cross_entropy(logits, targets)?;
    Ok(tape.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::synth_dataset;

    #[test]
    fn features_are_area_averages() {
        let img = Image::from_fn(32, 32, 3, |y, x, c| if c == 0 { ((y / 2) * 16 + x / 2) as f64 / 256.0 } else { 0.5 });
        let f = ToyClassifier::features(&img).unwrap();
        for cell in 0..256 {
            assert!((f[cell * 3] - (cell as f64 / 256.0 - 0.5)).abs() < 1e-12);
            assert!(f[cell * 3 + 1].abs() < 1e-12);
        }
        let tiny = Image::filled(5, 7, 3, 0.25);
        assert!(ToyClassifier::features(&tiny).unwrap().iter().all(|v| (v + 0.25).abs() < 1e-12));
        assert!(matches!(ToyClassifier::features(&Image::filled(4, 4, 1, 0.0)), Err(ModelError::Channels(1))));
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = ToyClassifier::zeros(SyntheticDataset::class_names());
        let p = m.classify(&Image::filled(8, 8, 3, 0.3)).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-12));
    }

    #[test]
    fn training_is_deterministic_and_rejects_empty() {
        let ds = synth_dataset(3, 16, 4);
        let cfg = ToyTrainConfig { epochs: 2, ..Default::default() };
        assert_eq!(toy_train(&ds, &cfg).unwrap().classifier, toy_train(&ds, &cfg).unwrap().classifier);
        let empty = SyntheticDataset { images: vec![], size: 16, seed: 0 };
        assert!(matches!(toy_train(&empty, &cfg), Err(ModelError::EmptyDataset)));
    }

    #[test]
    fn json_roundtrip() {
        let ds = synth_dataset(2, 16, 4);
        let m = toy_train(&ds, &ToyTrainConfig { epochs: 1, ..Default::default() }).unwrap().classifier;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        m.save(&path).unwrap();
        assert_eq!(ToyClassifier::load(&path).unwrap(), m);
        fs::write(&path, b"{}").unwrap();
        assert!(matches!(ToyClassifier::load(&path), Err(ModelError::Weights { .. })));
    }
}
