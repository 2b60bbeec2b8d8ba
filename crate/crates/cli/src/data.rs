//! Cohort generation, dataset loading, splits and output files.

use std::path::{Path, PathBuf};

use log::info;
use msp_core::cohort::generate_cohort;
use msp_core::patches::{extract_patches, split, split_by_subject, PatchDataset, SplitIndices};
use msp_core::volume::manifest::{load_manifest, CohortManifest};
use serde::Serialize;

use crate::config::{load_cohort, RunConfig};
use crate::error::{CliError, CliResult};
use crate::Cli;

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    write_file(path, serde_json::to_string_pretty(value).expect("value serializes") + "\n")
}

pub fn gen_data(cli: &Cli) -> CliResult<()> {
    let mut cfg = load_cohort(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    create_dir(&cli.out)?;
    let manifest = generate_cohort(&cfg, &cli.out)?;
    write_json(&cli.out.join("cohort.json"), &cfg)?;
    info!(
        "wrote {} subjects × {} platforms to {} (manifest {})",
        manifest.n_subjects(),
        manifest.n_platforms(),
        cli.out.display(),
        &manifest.digest()[..12]
    );
    Ok(())
}

pub fn open_manifest(data: &Path) -> CliResult<CohortManifest> {
    let path: PathBuf = if data.is_dir() { data.join("manifest.json") } else { data.to_path_buf() };
    Ok(load_manifest(path)?)
}

/// Manifest plus the dataset over every non-input platform; dataset target
/// `i` is platform `i + 1`.
pub struct Cohort {
    pub manifest: CohortManifest,
    pub dataset: PatchDataset,
}

impl Cohort {
    pub fn load(data: &Path) -> CliResult<Self> {
        let manifest = open_manifest(data)?;
        let targets: Vec<usize> = (1..manifest.n_platforms()).collect();
        let dataset = extract_patches(&manifest, &targets)?;
        info!("{} patches from {} subjects", dataset.len(), manifest.n_subjects());
        Ok(Self { manifest, dataset })
    }

    /// Dataset target index of a platform name.
    pub fn target_index(&self, name: &str) -> CliResult<usize> {
        match self.manifest.platform_index(name) {
            Some(0) => Err(CliError::Config(format!("{name} is the input platform, not a target"))),
            Some(p) => Ok(p - 1),
            None => {
                let known: Vec<&str> = self.manifest.platforms[1..].iter().map(|p| p.name.as_str()).collect();
                Err(CliError::Config(format!("unknown target platform {name:?}; known: {}", known.join(", "))))
            }
        }
    }

    pub fn target_name(&self, target: usize) -> &str {
        &self.manifest.platforms[target + 1].name
    }

    pub fn target_scale(&self, target: usize) -> usize {
        self.manifest.platforms[target + 1].scale
    }

    pub fn n_targets(&self) -> usize {
        self.dataset.n_targets()
    }

    pub fn digest(&self) -> &str {
        &self.dataset.provenance().manifest_digest
    }
}

/// Training, validation and test patch indices.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn new(cfg: &RunConfig, dataset: &PatchDataset) -> CliResult<Self> {
        let base = match &cfg.split.test_subjects {
            Some(subjects) => split_by_subject(dataset, subjects)?,
            None => split(dataset.len(), cfg.split.fraction, cfg.split.seed)?,
        };
        let (train, validation) = match cfg.split.validation_fraction {
            Some(f) => {
                let inner = split(base.train.len(), 1.0 - f, cfg.split.seed.wrapping_add(1))?;
                let pick = |ix: &[usize]| ix.iter().map(|&i| base.train[i]).collect::<Vec<_>>();
                (pick(&inner.train), pick(&inner.test))
            }
            None => (base.train.clone(), base.test.clone()),
        };
        Ok(Self {
            train,
            validation,
            test: base.test,
        })
    }

    /// Split handed to the trainer: its held-out part is the validation set.
    pub fn for_training(&self, seed: u64) -> SplitIndices {
        SplitIndices {
            train: self.train.clone(),
            test: self.validation.clone(),
            seed,
        }
    }
}
