mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use cirrus::attack::{attack, random_cloud, AttackConfig};
use cirrus::harness::{
    defense_eval, load_dataset, load_model, run_campaign, sweep_q, transfer_eval, verify_report, CampaignConfig,
    CampaignInputs, CampaignMode, DatasetSource, ModelSpec,
};
use cirrus::imaging::{load_png, resize, save_png};
use cirrus::models::{synth_dataset, toy_train_on, LabeledImage, TargetModel, TextureClass};
use cirrus::pggn::{component_stats, load_weights, save_weights, train_with, GeneratorWeights, PggnBundle};
use clap::{Parser, Subcommand, ValueEnum};
use config::{pick, FileConfig, Overrides};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "cirrus", version, about = "Black-box cloud-pattern adversarial attacks on image classifiers")]
struct Cli {
    /// TOML configuration file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Optimized,
    RandomCloud,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the lattice generator and discriminator.
    TrainPggn {
        #[arg(long)]
        q: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Weight file to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the linear toy classifier.
    TrainToy {
        /// `synthetic[:n_per_class[:size[:seed]]]` or a class-per-directory PNG tree.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// JSON weight file to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic texture dataset as PNG files.
    SynthData {
        #[arg(long, default_value_t = 10)]
        n_per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attack one image.
    Attack {
        #[arg(long)]
        image: PathBuf,
        /// Label to move away from; defaults to the model's prediction.
        #[arg(long)]
        label: Option<usize>,
        /// `toy:<weights>` or `remote:<url>`.
        #[arg(long)]
        model: Option<String>,
        /// Generator weight file, or `random`.
        #[arg(long)]
        generator: Option<String>,
        #[arg(long)]
        q: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Mode::Optimized)]
        mode: Mode,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Attack every image of a dataset and write a report.
    Campaign {
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        generator: Option<String>,
        #[arg(long)]
        q: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Attack a seeded random subset of this many images.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Attack several images at once.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Replay a campaign's successful examples against another model.
    Transfer {
        /// Campaign output directory.
        campaign: PathBuf,
        #[arg(long)]
        model: Option<String>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-classify a campaign's examples after JPEG compression.
    Defend {
        campaign: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value_t = 50)]
        quality: u8,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One campaign per latent dimension.
    SweepQ {
        #[arg(long, value_delimiter = ',', default_values_t = [52usize, 56])]
        qs: Vec<usize>,
        /// Directory holding `pggn-q<q>.bin` files.
        #[arg(long)]
        weights_dir: Option<PathBuf>,
        /// Use a frozen random generator for any q without weights.
        #[arg(long)]
        random_generators: bool,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Recompute a campaign report from its records and compare.
    VerifyReport { campaign: PathBuf },
}

fn print_json<T: Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(path) = out {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{text}");
    Ok(())
}

fn require<'a>(flag: &'a Option<String>, file: &'a Option<String>, what: &str) -> anyhow::Result<&'a str> {
    flag.as_deref().or(file.as_deref()).with_context(|| format!("no {what} given (flag or config file)"))
}

fn load_generator(spec: &str, q: usize, seed: u64) -> anyhow::Result<GeneratorWeights> {
    if spec == "random" {
        return Ok(GeneratorWeights::random(q, seed));
    }
    let bundle = load_weights(Path::new(spec)).with_context(|| format!("loading generator {spec}"))?;
    Ok(bundle.generator)
}

fn model_from(spec: &str) -> anyhow::Result<Box<dyn TargetModel>> {
    let spec: ModelSpec = spec.parse()?;
    Ok(load_model(&spec)?)
}

fn mode(m: Mode) -> CampaignMode {
    match m {
        Mode::Optimized => CampaignMode::Optimized,
        Mode::RandomCloud => CampaignMode::RandomCloud,
    }
}

fn attack_config(file: &FileConfig, overrides: &Overrides) -> anyhow::Result<AttackConfig> {
    let mut cfg = file.attack.clone();
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let default_q = file.q.unwrap_or(file.pggn.latent_dim);
    match cli.command {
        Command::TrainPggn { q, seed, epochs, out } => {
            let mut cfg = file.pggn.clone();
            cfg.latent_dim = pick(q, file.q.as_ref(), cfg.latent_dim);
            cfg.seed = pick(seed, file.seed.as_ref(), cfg.seed);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            let out = pick(out, file.out.as_ref(), PathBuf::from("pggn.bin"));
            let trained = train_with(&cfg, |s, _| {
                log::info!("epoch {} d_loss {:.4} g_loss {:.4} D(real) {:.3} D(fake) {:.3}", s.epoch, s.d_loss, s.g_loss, s.d_real, s.d_fake)
            })?;
            let zs: Vec<Vec<f64>> = (0..100).map(|i| (0..cfg.latent_dim).map(|j| (((i * 31 + j * 17) % 200) as f64 / 100.0) - 1.0).collect()).collect();
            let (mean, std) = component_stats(&trained.generator.generate_batch(&zs)?);
            save_weights(&out, &PggnBundle { generator: trained.generator, discriminator: Some(trained.discriminator) })?;
            print_json(
                &serde_json::json!({ "weights": out, "component_mean": mean, "component_std": std, "history": trained.history }),
                None,
            )?;
        }
        Command::TrainToy { dataset, seed, epochs, out } => {
            let source: DatasetSource = match dataset.as_deref().or(file.dataset.as_deref()) {
                Some(s) => s.parse()?,
                None => DatasetSource::Synthetic { n_per_class: 100, size: 64, seed: 1 },
            };
            let ds = load_dataset(&source)?;
            let images: Vec<LabeledImage> =
                ds.entries.into_iter().map(|e| LabeledImage { image: e.image.to_rgb(), label: e.label }).collect();
            let mut cfg = file.toy.clone();
            cfg.seed = pick(seed, file.seed.as_ref(), cfg.seed);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            let trained = toy_train_on(&images, ds.labels, &cfg)?;
            let out = pick(out, file.out.as_ref(), PathBuf::from("toy.json"));
            trained.classifier.save(&out)?;
            let accuracy = trained.classifier.accuracy(&images)?;
            print_json(
                &serde_json::json!({ "weights": out, "train_accuracy": accuracy, "loss_history": trained.loss_history }),
                None,
            )?;
        }
        Command::SynthData { n_per_class, size, seed, out } => {
            let seed = pick(seed, file.seed.as_ref(), 1);
            let out = pick(out, file.out.as_ref(), PathBuf::from("synthetic"));
            let ds = synth_dataset(n_per_class, size, seed);
            for class in TextureClass::ALL {
                fs::create_dir_all(out.join(class.dir_name()))?;
            }
            for (i, l) in ds.images.iter().enumerate() {
                let class = TextureClass::from_index(l.label).expect("synthetic label");
                save_png(&l.image, out.join(class.dir_name()).join(format!("{i:05}.png")))?;
            }
            println!("wrote {} images to {}", ds.len(), out.display());
        }
        Command::Attack { image, label, model, generator, q, seed, mode: m, out, overrides } => {
            let mut cfg = attack_config(&file, &overrides)?;
            cfg.seed = pick(seed, file.seed.as_ref(), cfg.seed);
            let model = model_from(require(&model, &file.model, "model")?)?;
            let q = q.unwrap_or(default_q);
            let generator = load_generator(require(&generator, &file.generator, "generator")?, q, cfg.seed)?;
            let mut clear = load_png(&image)?.to_rgb();
            if let Some([h, w]) = cfg.resolution {
                clear = resize(&clear, h, w)?.quantized();
            }
            let label = match label {
                Some(l) => l,
                None => model.classify(&clear)?.argmax(),
            };
            let result = match m {
                Mode::Optimized => attack(&clear, label, &*model, &generator, &cfg)?,
                Mode::RandomCloud => random_cloud(&clear, label, &*model, &generator, &cfg)?,
            };
            let out = pick(out, file.out.as_ref(), PathBuf::from("attack"));
            fs::create_dir_all(&out)?;
            save_png(&result.adversarial, out.join("adv.png"))?;
            let summary = serde_json::json!({
                "success": result.success,
                "queries": result.queries,
                "original_label": result.original_label,
                "predicted_label": result.predicted_label,
                "l_f": result.fitness.l_f,
                "l_adv": result.fitness.l_adv,
                "l_mse": result.fitness.l_mse,
                "generations": result.generations,
                "params": result.params,
                "channel_effects": result.channel_effects,
                "seconds": result.elapsed.as_secs_f64(),
            });
            print_json(&summary, Some(&out.join("attack.json")))?;
        }
        Command::Campaign { dataset, model, generator, q, seed, limit, mode: m, parallel, out, overrides } => {
            let attack = attack_config(&file, &overrides)?;
            let seed = pick(seed, file.seed.as_ref(), 0);
            let cfg = CampaignConfig {
                attack,
                mode: m.map(mode).unwrap_or(file.campaign.mode),
                seed,
                limit: limit.or(file.campaign.limit),
                parallel_images: parallel || file.campaign.parallel_images,
            };
            let source: DatasetSource = require(&dataset, &file.dataset, "dataset")?.parse()?;
            let ds = load_dataset(&source)?;
            let model_spec = require(&model, &file.model, "model")?.to_string();
            let target = model_from(&model_spec)?;
            let gen_spec = require(&generator, &file.generator, "generator")?.to_string();
            let generator = load_generator(&gen_spec, q.unwrap_or(default_q), seed)?;
            let out = pick(out, file.out.as_ref(), PathBuf::from("campaign"));
            let inputs = CampaignInputs {
                dataset: &ds,
                dataset_name: source.to_string(),
                model: &*target,
                model_name: model_spec,
                generator: &generator,
                generator_name: gen_spec,
            };
            let report = run_campaign(&inputs, &cfg, &out)?;
            print_json(
                &serde_json::json!({ "out": out, "counts": report.counts, "asr": report.asr, "aq": report.aq, "timing": report.timing }),
                None,
            )?;
        }
        Command::Transfer { campaign, model, out } => {
            let spec = require(&model, &file.model, "model")?.to_string();
            let target = model_from(&spec)?;
            print_json(&transfer_eval(&campaign, &*target, &spec)?, out.as_deref())?;
        }
        Command::Defend { campaign, model, quality, out } => {
            let target = model_from(require(&model, &file.model, "model")?)?;
            print_json(&defense_eval(&campaign, &*target, quality)?, out.as_deref())?;
        }
        Command::SweepQ { qs, weights_dir, random_generators, dataset, model, seed, limit, out, overrides } => {
            let attack = attack_config(&file, &overrides)?;
            let seed = pick(seed, file.seed.as_ref(), 0);
            let cfg = CampaignConfig {
                attack,
                mode: file.campaign.mode,
                seed,
                limit: limit.or(file.campaign.limit),
                parallel_images: file.campaign.parallel_images,
            };
            let mut generators = BTreeMap::new();
            for &q in &qs {
                let path = weights_dir.as_ref().map(|d| d.join(format!("pggn-q{q}.bin")));
                match path {
                    Some(p) if p.is_file() => {
                        generators.insert(q, load_weights(&p)?.generator);
                    }
                    _ if random_generators => {
                        generators.insert(q, GeneratorWeights::random(q, seed));
                    }
                    _ => {}
                }
            }
            let source: DatasetSource = require(&dataset, &file.dataset, "dataset")?.parse()?;
            let ds = load_dataset(&source)?;
            let target = model_from(require(&model, &file.model, "model")?)?;
            let out = pick(out, file.out.as_ref(), PathBuf::from("sweep"));
            fs::create_dir_all(&out)?;
            print_json(&sweep_q(&ds, &*target, &generators, &qs, &cfg, &out)?, None)?;
        }
        Command::VerifyReport { campaign } => {
            let outcome = verify_report(&campaign)?;
            if !outcome.ok() {
                for m in &outcome.mismatches {
                    eprintln!("mismatch: {m}");
                }
                bail!("{} does not match its records", outcome.report.display());
            }
            println!("{}: {} records, consistent", outcome.report.display(), outcome.records);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
