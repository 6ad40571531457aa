use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{io_err, HarnessError};
use crate::imaging::{load_png, Image};
use crate::models::{synth_dataset, RemoteConfig, RemoteModel, SyntheticDataset, TargetModel, ToyClassifier};

/// Where campaign images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// `synthetic[:n_per_class[:size[:seed]]]`
    Synthetic { n_per_class: usize, size: usize, seed: u64 },
    /// One subdirectory per class holding PNG files.
    Directory(PathBuf),
}

impl DatasetSource {
    pub const DEFAULT_SYNTHETIC: DatasetSource = DatasetSource::Synthetic { n_per_class: 10, size: 64, seed: 1 };
}

impl FromStr for DatasetSource {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let Some(rest) = s.strip_prefix("synthetic") else {
            return Ok(DatasetSource::Directory(PathBuf::from(s)));
        };
        let DatasetSource::Synthetic { mut n_per_class, mut size, mut seed } = Self::DEFAULT_SYNTHETIC else {
            unreachable!()
        };
        if !rest.is_empty() {
            let parts: Vec<&str> = rest.strip_prefix(':').unwrap_or("?").split(':').collect();
            let bad = || HarnessError::Dataset(format!("cannot parse {s:?}; expected synthetic[:n_per_class[:size[:seed]]]"));
            let num = |p: &str| p.parse::<u64>().map_err(|_| bad());
            if parts.len() > 3 {
                return Err(bad());
            }
            n_per_class = num(parts[0])? as usize;
            if let Some(p) = parts.get(1) {
                size = num(p)? as usize;
            }
            if let Some(p) = parts.get(2) {
                seed = num(p)?;
            }
            if n_per_class == 0 || size == 0 {
                return Err(bad());
            }
        }
        Ok(DatasetSource::Synthetic { n_per_class, size, seed })
    }
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSource::Synthetic { n_per_class, size, seed } => write!(f, "synthetic:{n_per_class}:{size}:{seed}"),
            DatasetSource::Directory(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub label: usize,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub entries: Vec<DatasetEntry>,
    pub labels: Vec<String>,
}

/// Loads every image. Directory class names, sorted lexicographically,
/// define label indices; files within a class are sorted by name.
pub fn load_dataset(source: &DatasetSource) -> Result<LoadedDataset, HarnessError> {
    match source {
        DatasetSource::Synthetic { n_per_class, size, seed } => {
            let ds = synth_dataset(*n_per_class, *size, *seed);
            let entries = ds
                .images
                .into_iter()
                .enumerate()
                .map(|(i, l)| DatasetEntry { id: format!("synthetic/{i:05}"), label: l.label, image: l.image })
                .collect();
            Ok(LoadedDataset { entries, labels: SyntheticDataset::class_names() })
        }
        DatasetSource::Directory(root) => load_dir(root),
    }
}

fn sorted_children(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>, HarnessError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let keep = if want_dirs {
            path.is_dir()
        } else {
            path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
        };
        if keep {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn load_dir(root: &Path) -> Result<LoadedDataset, HarnessError> {
    if !root.is_dir() {
        return Err(HarnessError::Dataset(format!("{} is not a directory", root.display())));
    }
    let classes = sorted_children(root, true)?;
    if classes.is_empty() {
        return Err(HarnessError::Dataset(format!("{} has no class subdirectories", root.display())));
    }
    let mut labels = Vec::with_capacity(classes.len());
    let mut entries = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        for file in sorted_children(dir, false)? {
            let file_name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            entries.push(DatasetEntry { id: format!("{name}/{file_name}"), label, image: load_png(&file)? });
        }
        labels.push(name);
    }
    if entries.is_empty() {
        return Err(HarnessError::Dataset(format!("no PNG files under {}", root.display())));
    }
    Ok(LoadedDataset { entries, labels })
}

/// A target model named on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Toy(PathBuf),
    Remote(RemoteConfig),
}

impl FromStr for ModelSpec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("toy", path)) if !path.is_empty() => Ok(ModelSpec::Toy(PathBuf::from(path))),
            Some(("remote", url)) if !url.is_empty() => Ok(ModelSpec::Remote(RemoteConfig::new(url))),
            _ => Err(HarnessError::ModelSpec(s.to_string())),
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::Toy(p) => write!(f, "toy:{}", p.display()),
            ModelSpec::Remote(cfg) => write!(f, "remote:{}", cfg.url),
        }
    }
}

pub fn load_model(spec: &ModelSpec) -> Result<Box<dyn TargetModel>, HarnessError> {
    Ok(match spec {
        ModelSpec::Toy(path) => Box::new(ToyClassifier::load(path)?),
        ModelSpec::Remote(cfg) => Box::new(RemoteModel::connect(cfg)?),
    })
}
