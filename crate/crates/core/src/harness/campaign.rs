use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, io_err, metrics, HarnessError, ImageRecord, LoadedDataset};
use crate::attack::{attack, random_cloud, AttackConfig, AttackResult, PARAMS_LAYOUT_VERSION};
use crate::imaging::{resize, save_png, Image};
use crate::models::TargetModel;
use crate::perlin::ChannelEffectConfig;
use crate::pggn::GeneratorWeights;

pub const REPORT_FILE: &str = "report.json";
pub const RECORDS_FILE: &str = "records.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CampaignMode {
    /// Differential evolution over the cloud parameters.
    #[default]
    Optimized,
    /// One uniformly random cloud per image.
    RandomCloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub attack: AttackConfig,
    pub mode: CampaignMode,
    /// Per-image attack seeds derive from this and the image index.
    pub seed: u64,
    /// Attack a seeded random subset of this many images.
    pub limit: Option<usize>,
    /// Attack several images at once. Results are identical to the
    /// sequential run; only the order files appear in differs.
    pub parallel_images: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            attack: AttackConfig::default(),
            mode: CampaignMode::default(),
            seed: 0,
            limit: None,
            parallel_images: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n_total: usize,
    pub n_misclassified: usize,
    pub n_adv: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_secs: f64,
    pub mean_attack_secs: Option<f64>,
    pub max_attack_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub version: u32,
    /// False when the campaign aborted; records cover the images finished.
    pub complete: bool,
    pub dataset: String,
    pub model: String,
    pub generator: String,
    pub config: CampaignConfig,
    pub labels: Vec<String>,
    pub counts: Counts,
    pub asr: Option<f64>,
    pub aq: Option<f64>,
    /// `confusion[true][post-attack]` over attacked images.
    pub confusion: Vec<Vec<u64>>,
    pub timing: Timing,
    pub records: Vec<ImageRecord>,
}

/// Per-attack file written next to each adversarial PNG.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct AttackRecord {
    index: usize,
    id: String,
    true_label: usize,
    original_label: usize,
    predicted_label: usize,
    success: bool,
    queries: u64,
    seed: u64,
    l_f: f64,
    l_adv: f64,
    l_mse: f64,
    generations: usize,
    layout_version: u32,
    params: Vec<f64>,
    channel_effects: ChannelEffectConfig,
}

/// Inputs a campaign runs over. The names are copied into the report.
pub struct CampaignInputs<'a> {
    pub dataset: &'a LoadedDataset,
    pub dataset_name: String,
    pub model: &'a dyn TargetModel,
    pub model_name: String,
    pub generator: &'a GeneratorWeights,
    pub generator_name: String,
}

fn selection(n: usize, cfg: &CampaignConfig) -> Vec<usize> {
    match cfg.limit {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..n).collect(),
    }
}

fn artifact(dir: &str, index: usize, ext: &str) -> String {
    format!("{dir}/{index:05}.{ext}")
}

struct Outcome {
    record: ImageRecord,
    attack_secs: Option<f64>,
}

fn process_image(
    index: usize,
    inputs: &CampaignInputs<'_>,
    cfg: &CampaignConfig,
    out_dir: &Path,
) -> Result<Outcome, HarnessError> {
    let entry = &inputs.dataset.entries[index];
    let image = match cfg.attack.resolution {
        Some([h, w]) => resize(&entry.image, h, w)?,
        None => entry.image.clone(),
    }
    .to_rgb()
    .quantized();
    let seed = derive_seed(cfg.seed, index);
    let pre_label = inputs.model.classify(&image)?.argmax();
    let mut record = ImageRecord {
        index,
        id: entry.id.clone(),
        true_label: entry.label,
        pre_label,
        skipped: pre_label != entry.label,
        success: false,
        queries: 0,
        post_label: None,
        l_f: None,
        l_adv: None,
        l_mse: None,
        generations: None,
        seed,
        clean_path: String::new(),
        adv_path: String::new(),
    };
    if record.skipped {
        return Ok(Outcome { record, attack_secs: None });
    }

    let acfg = AttackConfig { seed, ..cfg.attack.clone() };
    let result: AttackResult = match cfg.mode {
        CampaignMode::Optimized => attack(&image, pre_label, inputs.model, inputs.generator, &acfg)?,
        CampaignMode::RandomCloud => random_cloud(&image, pre_label, inputs.model, inputs.generator, &acfg)?,
    };
    record.clean_path = artifact("clean", index, "png");
    record.adv_path = artifact("adv", index, "png");
    save_png(&image, out_dir.join(&record.clean_path))?;
    save_png(&result.adversarial, out_dir.join(&record.adv_path))?;

    record.success = result.success;
    record.queries = result.queries;
    record.post_label = Some(result.predicted_label);
    record.l_f = Some(result.fitness.l_f);
    record.l_adv = Some(result.fitness.l_adv);
    record.l_mse = Some(result.fitness.l_mse);
    record.generations = Some(result.generations);

    let detail = AttackRecord {
        index,
        id: entry.id.clone(),
        true_label: entry.label,
        original_label: result.original_label,
        predicted_label: result.predicted_label,
        success: result.success,
        queries: result.queries,
        seed,
        l_f: result.fitness.l_f,
        l_adv: result.fitness.l_adv,
        l_mse: result.fitness.l_mse,
        generations: result.generations,
        layout_version: PARAMS_LAYOUT_VERSION,
        params: result.params,
        channel_effects: result.channel_effects,
    };
    write_json(&out_dir.join(artifact("adv", index, "json")), &detail)?;
    Ok(Outcome { record, attack_secs: Some(result.elapsed.as_secs_f64()) })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|source| HarnessError::Json { path: path.into(), source })?;
    fs::write(path, bytes).map_err(io_err(path))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |source| HarnessError::Csv { path: path.to_path_buf(), source }
}

fn class_count(labels: &[String], records: &[ImageRecord]) -> usize {
    records
        .iter()
        .flat_map(|r| [Some(r.true_label), Some(r.pre_label), r.post_label])
        .flatten()
        .map(|l| l + 1)
        .chain([labels.len()])
        .max()
        .unwrap_or(0)
}

fn confusion(n: usize, records: &[ImageRecord]) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; n]; n];
    for r in records.iter().filter(|r| !r.skipped) {
        if let Some(p) = r.post_label {
            m[r.true_label][p] += 1;
        }
    }
    m
}

fn counts(records: &[ImageRecord]) -> Counts {
    let n_misclassified = records.iter().filter(|r| r.skipped).count();
    let n_adv = records.iter().filter(|r| !r.skipped && r.success).count();
    Counts { n_total: records.len(), n_misclassified, n_adv, n_failed: records.len() - n_misclassified - n_adv }
}

fn confusion_csv(labels: &[String], m: &[Vec<u64>]) -> Result<Vec<u8>, HarnessError> {
    let name = |i: usize| labels.get(i).cloned().unwrap_or_else(|| i.to_string());
    let err = |source| HarnessError::Csv { path: PathBuf::from(CONFUSION_FILE), source };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["true\\pred".to_string()];
    header.extend((0..m.len()).map(name));
    w.write_record(&header).map_err(err)?;
    for (i, row) in m.iter().enumerate() {
        let mut line = vec![name(i)];
        line.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&line).map_err(err)?;
    }
    w.into_inner().map_err(|e| HarnessError::Io { path: CONFUSION_FILE.into(), source: e.into_error() })
}

fn build_report(
    inputs: &CampaignInputs<'_>,
    cfg: &CampaignConfig,
    records: Vec<ImageRecord>,
    attack_secs: &[f64],
    total_secs: f64,
    complete: bool,
) -> CampaignReport {
    let labels = inputs.dataset.labels.clone();
    let (asr, aq) = metrics(&records);
    let n = class_count(&labels, &records).max(inputs.model.label_count());
    let timing = Timing {
        total_secs,
        mean_attack_secs: (!attack_secs.is_empty()).then(|| attack_secs.iter().sum::<f64>() / attack_secs.len() as f64),
        max_attack_secs: attack_secs.iter().copied().reduce(f64::max),
    };
    CampaignReport {
        version: REPORT_VERSION,
        complete,
        dataset: inputs.dataset_name.clone(),
        model: inputs.model_name.clone(),
        generator: inputs.generator_name.clone(),
        config: cfg.clone(),
        labels,
        counts: counts(&records),
        asr,
        aq,
        confusion: confusion(n, &records),
        timing,
        records,
    }
}

fn write_outputs(out_dir: &Path, report: &CampaignReport) -> Result<(), HarnessError> {
    write_json(&out_dir.join(REPORT_FILE), report)?;
    let path = out_dir.join(CONFUSION_FILE);
    fs::write(&path, confusion_csv(&report.labels, &report.confusion)?).map_err(io_err(&path))
}

/// Classifies every selected image, skips those already misclassified and
/// attacks the rest, writing all artifacts under `out_dir`. Records are
/// appended to `records.csv` as images finish; on an error the report is
/// written with `complete: false` before the error is returned.
pub fn run_campaign(
    inputs: &CampaignInputs<'_>,
    cfg: &CampaignConfig,
    out_dir: &Path,
) -> Result<CampaignReport, HarnessError> {
    cfg.attack.validate()?;
    if inputs.dataset.entries.is_empty() {
        return Err(HarnessError::Dataset("no images".into()));
    }
    for sub in ["clean", "adv"] {
        fs::create_dir_all(out_dir.join(sub)).map_err(io_err(out_dir.join(sub)))?;
    }
    let started = Instant::now();
    let chosen = selection(inputs.dataset.entries.len(), cfg);
    let records_path = out_dir.join(RECORDS_FILE);
    let mut writer = csv::Writer::from_path(&records_path).map_err(csv_err(&records_path))?;
    let mut records = Vec::with_capacity(chosen.len());
    let mut attack_secs = Vec::new();

    let mut push = |outcome: Outcome,
                    records: &mut Vec<ImageRecord>,
                    writer: &mut csv::Writer<File>|
     -> Result<(), HarnessError> {
        writer.serialize(&outcome.record).map_err(csv_err(&records_path))?;
        writer.flush().map_err(io_err(&records_path))?;
        attack_secs.extend(outcome.attack_secs);
        records.push(outcome.record);
        Ok(())
    };

    let mut failure = None;
    if cfg.parallel_images {
        let outcomes: Vec<Result<Outcome, HarnessError>> =
            chosen.par_iter().map(|&i| process_image(i, inputs, cfg, out_dir)).collect();
        for outcome in outcomes {
            match outcome.and_then(|o| push(o, &mut records, &mut writer)) {
                Ok(()) => {}
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
    } else {
        for &i in &chosen {
            let step = process_image(i, inputs, cfg, out_dir).and_then(|o| push(o, &mut records, &mut writer));
            if let Err(e) = step {
                log::error!("campaign aborted at image {i}: {e}");
                failure = Some(e);
                break;
            }
        }
    }
    drop(writer);
    let report = build_report(inputs, cfg, records, &attack_secs, started.elapsed().as_secs_f64(), failure.is_none());
    write_outputs(out_dir, &report)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Result of re-deriving a report from its records file.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub report: PathBuf,
    pub records: usize,
    pub mismatches: Vec<String>,
}

impl VerifyOutcome {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn read_records(path: &Path) -> Result<Vec<ImageRecord>, HarnessError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    reader.deserialize().collect::<Result<Vec<ImageRecord>, _>>().map_err(csv_err(path))
}

pub(crate) fn read_report(dir: &Path) -> Result<(CampaignReport, Vec<ImageRecord>), HarnessError> {
    let report_path = dir.join(REPORT_FILE);
    let bytes = fs::read(&report_path).map_err(io_err(&report_path))?;
    let report: CampaignReport =
        serde_json::from_slice(&bytes).map_err(|source| HarnessError::Json { path: report_path.clone(), source })?;
    let records = read_records(&dir.join(RECORDS_FILE))?;
    Ok((report, records))
}

/// Recomputes counts, ASR, AQ and the confusion matrix of the campaign in
/// `dir` from `records.csv` and compares them with `report.json` exactly.
pub fn verify_report(dir: &Path) -> Result<VerifyOutcome, HarnessError> {
    let (report, records) = read_report(dir)?;
    let mut mismatches = Vec::new();
    let mut check = |what: &str, ok: bool, detail: String| {
        if !ok {
            mismatches.push(format!("{what}: {detail}"));
        }
    };
    check("records", report.records == records, "report.json and records.csv list different records".into());
    let (asr, aq) = metrics(&records);
    check("asr", report.asr == asr, format!("report {:?}, recomputed {asr:?}", report.asr));
    check("aq", report.aq == aq, format!("report {:?}, recomputed {aq:?}", report.aq));
    let c = counts(&records);
    check("counts", report.counts == c, format!("report {:?}, recomputed {c:?}", report.counts));
    check(
        "totals",
        c.n_total == c.n_misclassified + c.n_adv + c.n_failed,
        format!("{} != {} + {} + {}", c.n_total, c.n_misclassified, c.n_adv, c.n_failed),
    );
    let n = report.confusion.len().max(class_count(&report.labels, &records));
    let m = confusion(n, &records);
    check("confusion", report.confusion == m, "matrix differs from records".into());
    for (label, row) in m.iter().enumerate() {
        let attacked = records.iter().filter(|r| !r.skipped && r.true_label == label).count() as u64;
        check("confusion rows", row.iter().sum::<u64>() == attacked, format!("class {label}"));
    }
    let de = &report.config.attack.de;
    let slack = if de.concurrent { de.np as u64 } else { 0 };
    let budget = match report.config.mode {
        CampaignMode::Optimized => de.max_evals as u64 + slack,
        CampaignMode::RandomCloud => 1,
    };
    for r in &records {
        check("skipped", !(r.skipped && (r.success || r.queries > 0)), format!("image {} attacked while skipped", r.index));
        check("budget", r.queries <= budget, format!("image {} used {} queries", r.index, r.queries));
        check(
            "success",
            !r.success || r.post_label.is_some_and(|p| p != r.pre_label),
            format!("image {} marked successful without a label change", r.index),
        );
    }
    let confusion_path = dir.join(CONFUSION_FILE);
    let on_disk = fs::read(&confusion_path).map_err(io_err(&confusion_path))?;
    check("confusion.csv", on_disk == confusion_csv(&report.labels, &m)?, "file differs from matrix".into());
    Ok(VerifyOutcome { report: dir.join(REPORT_FILE), records: records.len(), mismatches })
}

/// Decoded adversarial and clean images of a campaign's records.
pub(crate) fn load_artifact(dir: &Path, rel: &str) -> Result<Image, HarnessError> {
    Ok(crate::imaging::load_png(dir.join(rel))?)
}
