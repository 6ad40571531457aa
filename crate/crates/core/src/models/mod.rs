//! Black-box target models.
//!
//! Every model maps an [`Image`] to a [`ProbVector`] and nothing else; the
//! attack never sees weights, logits or gradients.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::imaging::{Image, ImageError};

mod dataset;
mod remote;
mod toy;

pub use dataset::{synth_dataset, LabeledImage, SyntheticDataset, TextureClass};
pub use remote::{RemoteConfig, RemoteModel};
pub use toy::{toy_train, toy_train_on, ToyClassifier, ToyTrainConfig, ToyTrainOutcome, FEATURE_SIDE};

/// Sum tolerance for vectors produced inside this crate.
pub const SIMPLEX_TOLERANCE: f64 = 1e-5;
/// Sum tolerance accepted from a remote server before renormalizing.
pub const REMOTE_SIMPLEX_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("probability vector is empty")]
    EmptyProbabilities,
    #[error("probability {index} is {value}, outside [0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, tolerance {tolerance}")]
    ProbabilitySum { sum: f64, tolerance: f64 },
    #[error("model returned {got} probabilities, {expected} labels advertised")]
    LengthMismatch { expected: usize, got: usize },
    #[error("network failure: {0}")]
    Network(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("server answered {status}: {body}")]
    BadStatus { status: u16, body: String },
    #[error("malformed response body: {0}")]
    MalformedBody(String),
    #[error("image expected with 3 channels, got {0}")]
    Channels(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("weights file {path}: {detail}")]
    Weights { path: String, detail: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

impl ModelError {
    /// Whether repeating the same request may succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            ModelError::Network(_) | ModelError::Timeout(_) => true,
            ModelError::BadStatus { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }

    /// The server broke the wire protocol.
    pub fn is_protocol_violation(&self) -> bool {
        matches!(
            self,
            ModelError::BadStatus { .. }
                | ModelError::MalformedBody(_)
                | ModelError::ProbabilitySum { .. }
                | ModelError::ProbabilityOutOfRange { .. }
                | ModelError::LengthMismatch { .. }
                | ModelError::EmptyProbabilities
        )
    }
}

/// Class confidences; entries in `[0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self, ModelError> {
        Self::with_tolerance(probs, SIMPLEX_TOLERANCE)
    }

    /// Validates against `tolerance`, then renormalizes so the stored sum is
    /// one to rounding.
    pub fn with_tolerance(mut probs: Vec<f64>, tolerance: f64) -> Result<Self, ModelError> {
        if probs.is_empty() {
            return Err(ModelError::EmptyProbabilities);
        }
        if let Some((index, &value)) = probs.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(ModelError::ProbabilityOutOfRange { index, value });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > tolerance {
            return Err(ModelError::ProbabilitySum { sum, tolerance });
        }
        probs.iter_mut().for_each(|p| *p /= sum);
        Ok(ProbVector(probs))
    }

    /// Softmax of `logits`, stabilized by the maximum.
    pub fn softmax(logits: &[f64]) -> Result<Self, ModelError> {
        if logits.is_empty() {
            return Err(ModelError::EmptyProbabilities);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Self::new(exps.into_iter().map(|e| e / sum).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.0.get(class).copied()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Whether [`TargetModel::classify`] may be called from several threads at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Concurrency {
    Safe,
    Serialize,
}

pub trait TargetModel: Send + Sync {
    fn classify(&self, image: &Image) -> Result<ProbVector, ModelError>;

    fn label_count(&self) -> usize;

    fn concurrency(&self) -> Concurrency;

    /// Class names, when the model knows them.
    fn labels(&self) -> Option<Vec<String>> {
        None
    }
}

impl<M: TargetModel + ?Sized> TargetModel for &M {
    fn classify(&self, image: &Image) -> Result<ProbVector, ModelError> {
        (**self).classify(image)
    }
    fn label_count(&self) -> usize {
        (**self).label_count()
    }
    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }
    fn labels(&self) -> Option<Vec<String>> {
        (**self).labels()
    }
}

impl<M: TargetModel + ?Sized> TargetModel for Box<M> {
    fn classify(&self, image: &Image) -> Result<ProbVector, ModelError> {
        (**self).classify(image)
    }
    fn label_count(&self) -> usize {
        (**self).label_count()
    }
    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }
    fn labels(&self) -> Option<Vec<String>> {
        (**self).labels()
    }
}

impl<M: TargetModel + ?Sized> TargetModel for Arc<M> {
    fn classify(&self, image: &Image) -> Result<ProbVector, ModelError> {
        (**self).classify(image)
    }
    fn label_count(&self) -> usize {
        (**self).label_count()
    }
    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }
    fn labels(&self) -> Option<Vec<String>> {
        (**self).labels()
    }
}

/// Counts every `classify` call that reaches the inner model, including
/// failed ones.
#[derive(Debug)]
pub struct CountingModel<M> {
    inner: M,
    count: AtomicU64,
}

impl<M: TargetModel> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        CountingModel { inner, count: AtomicU64::new(0) }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }

    /// Returns the count before the reset.
    pub fn reset(&self) -> u64 {
        self.count.swap(0, Ordering::SeqCst)
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    pub fn into_inner(self) -> M {
        self.inner
    }
}

impl<M: TargetModel> TargetModel for CountingModel<M> {
    fn classify(&self, image: &Image) -> Result<ProbVector, ModelError> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.classify(image)
    }
    fn label_count(&self) -> usize {
        self.inner.label_count()
    }
    fn concurrency(&self) -> Concurrency {
        self.inner.concurrency()
    }
    fn labels(&self) -> Option<Vec<String>> {
        self.inner.labels()
    }
}

/// Returns the same vector for every image.
#[derive(Debug, Clone)]
pub struct ConstantModel {
    probs: ProbVector,
}

impl ConstantModel {
    pub fn new(probs: ProbVector) -> Self {
        ConstantModel { probs }
    }

    /// Full confidence in `class` out of `classes`.
    pub fn one_hot(class: usize, classes: usize) -> Self {
        let mut p = vec![0.0; classes.max(class + 1)];
        p[class] = 1.0;
        ConstantModel { probs: ProbVector(p) }
    }
}

impl TargetModel for ConstantModel {
    fn classify(&self, _image: &Image) -> Result<ProbVector, ModelError> {
        Ok(self.probs.clone())
    }
    fn label_count(&self) -> usize {
        self.probs.len()
    }
    fn concurrency(&self) -> Concurrency {
        Concurrency::Safe
    }
}
