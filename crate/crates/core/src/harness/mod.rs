//! Campaign orchestration, metrics and report files.
//!
//! A campaign output directory holds:
//!
//! ```text
//! report.json      configuration, counts, ASR, AQ, confusion matrix, timing, records
//! records.csv      one row per image
//! confusion.csv    true label x post-attack label over attacked images
//! clean/NNNNN.png  attacked inputs at attack resolution
//! adv/NNNNN.png    adversarial outputs (best found when the attack failed)
//! adv/NNNNN.json   per-attack record with the parameter vector
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::AttackError;
use crate::imaging::ImageError;
use crate::models::ModelError;
use crate::pggn::{PggnError, WeightFileError};

pub(crate) mod campaign;
mod dataset;
mod eval;

pub use campaign::{
    run_campaign, verify_report, CampaignConfig, CampaignInputs, CampaignMode, CampaignReport, Counts, Timing, VerifyOutcome,
    CONFUSION_FILE, RECORDS_FILE, REPORT_FILE,
};
pub use dataset::{load_dataset, load_model, DatasetEntry, DatasetSource, LoadedDataset, ModelSpec};
pub use eval::{defense_eval, sweep_q, transfer_eval, DefenseReport, SweepRow, TransferReport, TransferRow, SWEEP_FILE};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("model spec {0:?}: expected toy:<weights path> or remote:<url>")]
    ModelSpec(String),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("no generator weights for q = {0}")]
    MissingGenerator(usize),
    #[error("invalid campaign configuration: {0}")]
    Config(String),
    #[error("report does not match its records: {0:?}")]
    Inconsistent(Vec<String>),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Pggn(#[from] PggnError),
    #[error(transparent)]
    WeightFile(#[from] WeightFileError),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}

/// One row of `records.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub id: String,
    pub true_label: usize,
    pub pre_label: usize,
    /// Misclassified before the attack; no attack was run.
    pub skipped: bool,
    pub success: bool,
    pub queries: u64,
    pub post_label: Option<usize>,
    pub l_f: Option<f64>,
    pub l_adv: Option<f64>,
    pub l_mse: Option<f64>,
    pub generations: Option<usize>,
    pub seed: u64,
    /// Relative to the campaign directory; empty when skipped.
    pub clean_path: String,
    pub adv_path: String,
}

/// Rounds to two decimals, the precision reports carry.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// `100 n_adv / (n_total - n_misclassified)`, two decimals; `None` when no
/// image was attacked.
pub fn asr(n_total: usize, n_misclassified: usize, n_adv: usize) -> Option<f64> {
    let attacked = n_total.checked_sub(n_misclassified)?;
    (attacked > 0).then(|| round2(100.0 * n_adv as f64 / attacked as f64))
}

/// Mean queries over successful attacks, two decimals; `None` without any.
pub fn aq(success_queries: &[u64]) -> Option<f64> {
    (!success_queries.is_empty())
        .then(|| round2(success_queries.iter().sum::<u64>() as f64 / success_queries.len() as f64))
}

/// ASR and AQ from a record set.
pub fn metrics(records: &[ImageRecord]) -> (Option<f64>, Option<f64>) {
    let n_mis = records.iter().filter(|r| r.skipped).count();
    let wins: Vec<u64> = records.iter().filter(|r| !r.skipped && r.success).map(|r| r.queries).collect();
    (asr(records.len(), n_mis, wins.len()), aq(&wins))
}

/// Seed for image `index` of a campaign seeded with `seed` (splitmix64).
pub fn derive_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
