//! Configuration file and flag overrides.
//!
//! The file is TOML. Every key is optional; anything missing takes its
//! built-in default, and command-line flags override both.
//!
//! ```toml
//! seed = 7
//! dataset = "synthetic:10:64:1"
//! model = "toy:toy.json"
//! generator = "pggn.bin"
//! out = "runs/first"
//!
//! [attack]            # alpha, quantize, cloud_color, resolution, bounds
//! alpha = 0.25
//! resolution = [256, 256]
//!
//! [attack.de]         # np, cr, f, max_evals, exclude_target, concurrent
//! np = 100
//! max_evals = 3000
//!
//! [attack.channel_effects]
//! enabled = true
//!
//! [campaign]
//! limit = 50
//! mode = "optimized"  # or "random-cloud"
//! parallel_images = false
//!
//! [pggn]              # generator training
//! epochs = 50
//! grids_per_size = 500
//!
//! [toy]               # toy classifier training
//! epochs = 30
//! lr = 0.5
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use cirrus::attack::AttackConfig;
use cirrus::harness::CampaignMode;
use cirrus::models::ToyTrainConfig;
use cirrus::pggn::TrainConfig;
use clap::Args;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignSection {
    pub limit: Option<usize>,
    pub mode: CampaignMode,
    pub parallel_images: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub q: Option<usize>,
    pub dataset: Option<String>,
    pub model: Option<String>,
    pub generator: Option<String>,
    pub out: Option<PathBuf>,
    pub attack: AttackConfig,
    pub campaign: CampaignSection,
    pub pggn: TrainConfig,
    pub toy: ToyTrainConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Flags shared by every subcommand that runs an attack.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Population size.
    #[arg(long)]
    pub np: Option<usize>,
    /// Crossover rate.
    #[arg(long)]
    pub cr: Option<f64>,
    /// Mutation factor.
    #[arg(long)]
    pub f: Option<f64>,
    /// Weight of the perturbation term in the fitness.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Query budget per image.
    #[arg(long)]
    pub mq: Option<usize>,
    /// Evaluate each generation's candidates in parallel when the model allows it.
    #[arg(long)]
    pub concurrent: bool,
    /// `HxW` images are resampled to before attacking, or `native`.
    #[arg(long)]
    pub resolution: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut AttackConfig) -> anyhow::Result<()> {
        if let Some(v) = self.np {
            cfg.de.np = v;
        }
        if let Some(v) = self.cr {
            cfg.de.cr = v;
        }
        if let Some(v) = self.f {
            cfg.de.f = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.mq {
            cfg.de.max_evals = v;
        }
        if self.concurrent {
            cfg.de.concurrent = true;
        }
        if let Some(r) = &self.resolution {
            cfg.resolution = parse_resolution(r)?;
        }
        cfg.validate()?;
        Ok(())
    }
}

pub fn parse_resolution(s: &str) -> anyhow::Result<Option<[usize; 2]>> {
    if s == "native" {
        return Ok(None);
    }
    let (h, w) = s.split_once('x').with_context(|| format!("resolution {s:?}: expected HxW or native"))?;
    Ok(Some([h.parse()?, w.parse()?]))
}

/// First of flag, file value and default that is set.
pub fn pick<T: Clone>(flag: Option<T>, file: Option<&T>, default: T) -> T {
    flag.or_else(|| file.cloned()).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_parses() {
        let doc: String = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        let cfg: FileConfig = toml::from_str(&doc).unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.attack.de.np, 100);
        assert_eq!(cfg.campaign.limit, Some(50));
        assert_eq!(cfg.toy.epochs, 30);
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: FileConfig = toml::from_str("seed = 3\n[attack]\nalpha = 0.5\n[attack.de]\nnp = 20\ncr = 0.3").unwrap();
        let mut cfg = file.attack.clone();
        Overrides { np: Some(12), mq: Some(99), ..Overrides::default() }.apply(&mut cfg).unwrap();
        assert_eq!(cfg.de.np, 12);
        assert_eq!(cfg.de.cr, 0.3);
        assert_eq!(cfg.de.max_evals, 99);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.de.f, 0.5);
        assert_eq!(pick(None, file.seed.as_ref(), 0), 3);
        assert_eq!(pick(Some(4), file.seed.as_ref(), 0), 4);
        assert_eq!(pick(None, None, 9u64), 9);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(toml::from_str::<FileConfig>("sead = 1").is_err());
        let mut cfg = AttackConfig::default();
        assert!(Overrides { cr: Some(1.5), ..Overrides::default() }.apply(&mut cfg).is_err());
        assert_eq!(parse_resolution("64x32").unwrap(), Some([64, 32]));
        assert_eq!(parse_resolution("native").unwrap(), None);
        assert!(parse_resolution("64").is_err());
    }
}
