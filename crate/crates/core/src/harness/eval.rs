use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::campaign::{load_artifact, read_report, run_campaign, CampaignConfig, CampaignInputs};
use super::{asr, HarnessError, LoadedDataset};
use crate::imaging::jpeg_roundtrip;
use crate::models::TargetModel;
use crate::pggn::GeneratorWeights;

pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub index: usize,
    pub id: String,
    pub true_label: usize,
    pub clean_label: usize,
    pub adv_label: Option<usize>,
    pub transferred: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub campaign: PathBuf,
    pub target: String,
    /// Adversarial examples that fooled the surrogate.
    pub surrogate_successes: usize,
    /// Of those, the ones whose clean image the target classifies correctly.
    pub eligible: usize,
    pub transferred: usize,
    pub tasr: Option<f64>,
    pub rows: Vec<TransferRow>,
}

/// Replays the surrogate-successful examples of the campaign in `dir`
/// against `target`. Examples whose clean image the target already gets
/// wrong are reported but not counted.
pub fn transfer_eval(dir: &Path, target: &dyn TargetModel, target_name: &str) -> Result<TransferReport, HarnessError> {
    let (_, records) = read_report(dir)?;
    let mut rows = Vec::new();
    for r in records.iter().filter(|r| !r.skipped && r.success) {
        let clean = load_artifact(dir, &r.clean_path)?;
        let clean_label = target.classify(&clean)?.argmax();
        let adv_label = if clean_label == r.true_label {
            Some(target.classify(&load_artifact(dir, &r.adv_path)?)?.argmax())
        } else {
            None
        };
        rows.push(TransferRow {
            index: r.index,
            id: r.id.clone(),
            true_label: r.true_label,
            clean_label,
            adv_label,
            transferred: adv_label.is_some_and(|l| l != r.true_label),
        });
    }
    let eligible = rows.iter().filter(|r| r.adv_label.is_some()).count();
    let transferred = rows.iter().filter(|r| r.transferred).count();
    Ok(TransferReport {
        campaign: dir.to_path_buf(),
        target: target_name.to_string(),
        surrogate_successes: rows.len(),
        eligible,
        transferred,
        tasr: asr(eligible, 0, transferred),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub campaign: PathBuf,
    pub quality: u8,
    pub attacked: usize,
    pub successes: usize,
    /// Successes that still fool the model after JPEG compression.
    pub defended_successes: usize,
    pub asr: Option<f64>,
    pub defended_asr: Option<f64>,
    /// Attacked clean images whose label JPEG alone changes.
    pub clean_flips: usize,
}

/// JPEG-compresses every attacked example of the campaign in `dir` at
/// `quality` and re-queries `model`.
pub fn defense_eval(dir: &Path, model: &dyn TargetModel, quality: u8) -> Result<DefenseReport, HarnessError> {
    let (_, records) = read_report(dir)?;
    let attacked: Vec<_> = records.iter().filter(|r| !r.skipped).collect();
    let mut defended_successes = 0;
    let mut clean_flips = 0;
    for r in &attacked {
        let clean = jpeg_roundtrip(&load_artifact(dir, &r.clean_path)?, quality)?;
        if model.classify(&clean)?.argmax() != r.true_label {
            clean_flips += 1;
        }
        if r.success {
            let adv = jpeg_roundtrip(&load_artifact(dir, &r.adv_path)?, quality)?;
            if model.classify(&adv)?.argmax() != r.true_label {
                defended_successes += 1;
            }
        }
    }
    let successes = attacked.iter().filter(|r| r.success).count();
    Ok(DefenseReport {
        campaign: dir.to_path_buf(),
        quality,
        attacked: attacked.len(),
        successes,
        defended_successes,
        asr: asr(attacked.len(), 0, successes),
        defended_asr: asr(attacked.len(), 0, defended_successes),
        clean_flips,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub q: usize,
    pub n_total: usize,
    pub n_adv: usize,
    pub asr: Option<f64>,
    pub aq: Option<f64>,
}

/// Runs one campaign per latent dimension in `qs`, each into `out_dir/q<q>`,
/// and writes `sweep.csv`.
pub fn sweep_q(
    dataset: &LoadedDataset,
    model: &dyn TargetModel,
    generators: &BTreeMap<usize, GeneratorWeights>,
    qs: &[usize],
    cfg: &CampaignConfig,
    out_dir: &Path,
) -> Result<Vec<SweepRow>, HarnessError> {
    let mut rows = Vec::with_capacity(qs.len());
    for &q in qs {
        let generator = generators.get(&q).ok_or(HarnessError::MissingGenerator(q))?;
        if generator.latent_dim() != q {
            return Err(HarnessError::Config(format!(
                "generator listed for q = {q} has latent dimension {}",
                generator.latent_dim()
            )));
        }
        let inputs = CampaignInputs {
            dataset,
            dataset_name: String::new(),
            model,
            model_name: String::new(),
            generator,
            generator_name: format!("q{q}"),
        };
        let report = run_campaign(&inputs, cfg, &out_dir.join(format!("q{q}")))?;
        log::info!("q = {q}: ASR {:?}, AQ {:?}", report.asr, report.aq);
        rows.push(SweepRow {
            q,
            n_total: report.counts.n_total,
            n_adv: report.counts.n_adv,
            asr: report.asr,
            aq: report.aq,
        });
    }
    let path = out_dir.join(SWEEP_FILE);
    let err = |source| HarnessError::Csv { path: path.clone(), source };
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    for row in &rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(super::io_err(&path))?;
    Ok(rows)
}
