//! Cohort manifest: which volume and mask belong to each (subject, platform).
//!
//! The manifest is a JSON document; paths inside it are relative to the
//! directory holding the manifest file.
//!
//! ```json
//! {
//!   "version": 1,
//!   "channels": 6,
//!   "base_dims": [24, 24, 24],
//!   "subjects": ["sub-00", "sub-01"],
//!   "platforms": [
//!     { "name": "aged_st", "display_name": "Aged scanner, standard protocol", "scale": 1 },
//!     { "name": "modern_sa", "display_name": "Modern scanner, high resolution", "scale": 2 }
//!   ],
//!   "entries": [
//!     { "subject": 0, "platform": 0, "volume": "sub-00/aged_st.mspv",
//!       "mask": "sub-00/aged_st.mspm", "norm_stats": "stats/aged_st.json" }
//!   ]
//! }
//! ```
//!
//! Platform 0 is the input platform and must have scale 1. A platform of
//! scale `s` lives on a grid of exactly `s × base_dims` voxels.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_mask_dims, read_volume_header};
use crate::error::{Error, Result};
use crate::sh::NormStats;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlatformInfo {
    pub name: String,
    #[serde(default)]
    pub display_name: String,
    pub scale: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject: usize,
    pub platform: usize,
    pub volume: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_stats: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub version: u32,
    pub channels: usize,
    pub base_dims: [usize; 3],
    pub subjects: Vec<String>,
    pub platforms: Vec<PlatformInfo>,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViolationKind {
    Structure,
    MissingEntry,
    DuplicateEntry,
    MissingFile,
    UnreadableFile,
    ChannelMismatch,
    GridMultiple,
    MaskMismatch,
    StatsMismatch,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

impl CohortManifest {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_platforms(&self) -> usize {
        self.platforms.len()
    }

    pub fn platform_index(&self, name: &str) -> Option<usize> {
        self.platforms.iter().position(|p| p.name == name)
    }

    pub fn entry(&self, subject: usize, platform: usize) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.subject == subject && e.platform == platform)
            .ok_or_else(|| {
                Error::Config(format!(
                    "manifest has no entry for subject {subject}, platform {platform}"
                ))
            })
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    /// Expected grid of a platform.
    pub fn platform_dims(&self, platform: usize) -> [usize; 3] {
        let s = self.platforms[platform].scale;
        self.base_dims.map(|d| d * s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json();
        text.push('\n');
        super::write_all(path.as_ref(), text.as_bytes())
    }

    pub fn load_norm_stats(&self, entry: &ManifestEntry) -> Result<Option<NormStats>> {
        entry
            .norm_stats
            .as_ref()
            .map(|rel| {
                let path = self.resolve(rel);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
            })
            .transpose()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<CohortManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: CohortManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    manifest.root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    Ok(manifest)
}

/// Checks every manifest invariant and reports all violations found.
pub fn validate_manifest(m: &CohortManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, message: String| out.push(Violation { kind, message });

    if m.version != MANIFEST_VERSION {
        push(ViolationKind::Structure, format!("unsupported manifest version {}", m.version));
    }
    if m.subjects.len() < 2 {
        push(ViolationKind::Structure, format!("need at least 2 subjects, found {}", m.subjects.len()));
    }
    if m.platforms.len() < 2 {
        push(ViolationKind::Structure, format!("need at least 2 platforms, found {}", m.platforms.len()));
    }
    if m.channels == 0 || m.base_dims.iter().any(|&d| d == 0) {
        push(ViolationKind::Structure, "channels and base dims must be positive".into());
    }
    for (i, p) in m.platforms.iter().enumerate() {
        if !(p.scale == 1 || p.scale == 2) {
            push(ViolationKind::Structure, format!("platform {} has scale {}, expected 1 or 2", p.name, p.scale));
        }
        if m.platforms[..i].iter().any(|q| q.name == p.name) {
            push(ViolationKind::Structure, format!("platform name {} is repeated", p.name));
        }
    }
    if m.platforms.first().is_some_and(|p| p.scale != 1) {
        push(ViolationKind::Structure, "input platform 0 must have scale 1".into());
    }

    let mut cells: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for e in &m.entries {
        if e.subject >= m.subjects.len() || e.platform >= m.platforms.len() {
            push(
                ViolationKind::Structure,
                format!("entry ({}, {}) is out of range", e.subject, e.platform),
            );
            continue;
        }
        *cells.entry((e.subject, e.platform)).or_default() += 1;
    }
    for s in 0..m.subjects.len() {
        for p in 0..m.platforms.len() {
            match cells.get(&(s, p)).copied().unwrap_or(0) {
                0 => push(
                    ViolationKind::MissingEntry,
                    format!("no entry for subject {} on platform {}", m.subjects[s], m.platforms[p].name),
                ),
                1 => {}
                n => push(
                    ViolationKind::DuplicateEntry,
                    format!("{n} entries for subject {} on platform {}", m.subjects[s], m.platforms[p].name),
                ),
            }
        }
    }

    for e in &m.entries {
        if e.subject >= m.subjects.len() || e.platform >= m.platforms.len() {
            continue;
        }
        let where_ = format!("{} / {}", m.subjects[e.subject], m.platforms[e.platform].name);
        let expected = m.platform_dims(e.platform);
        let vol_path = m.resolve(&e.volume);
        let mask_path = m.resolve(&e.mask);
        let mut vol_dims = None;
        if !vol_path.exists() {
            push(ViolationKind::MissingFile, format!("{where_}: volume {} not found", vol_path.display()));
        } else {
            match read_volume_header(&vol_path) {
                Err(err) => push(ViolationKind::UnreadableFile, format!("{where_}: {err}")),
                Ok(h) => {
                    vol_dims = Some(h.dims);
                    if h.channels != m.channels {
                        push(
                            ViolationKind::ChannelMismatch,
                            format!("{where_}: {} channels, manifest says {}", h.channels, m.channels),
                        );
                    }
                    if h.dims != expected {
                        push(
                            ViolationKind::GridMultiple,
                            format!(
                                "{where_}: dims {:?} are not {}× base dims {:?}",
                                h.dims, m.platforms[e.platform].scale, m.base_dims
                            ),
                        );
                    }
                }
            }
        }
        if !mask_path.exists() {
            push(ViolationKind::MissingFile, format!("{where_}: mask {} not found", mask_path.display()));
        } else {
            match read_mask_dims(&mask_path) {
                Err(err) => push(ViolationKind::UnreadableFile, format!("{where_}: {err}")),
                Ok(dims) => {
                    if Some(dims) != vol_dims && vol_dims.is_some() {
                        push(
                            ViolationKind::MaskMismatch,
                            format!("{where_}: mask dims {dims:?} differ from volume {:?}", vol_dims.unwrap()),
                        );
                    }
                }
            }
        }
        if let Some(rel) = &e.norm_stats {
            let path = m.resolve(rel);
            if !path.exists() {
                push(ViolationKind::MissingFile, format!("{where_}: stats {} not found", path.display()));
            } else {
                match m.load_norm_stats(e) {
                    Err(err) => push(ViolationKind::UnreadableFile, format!("{where_}: {err}")),
                    Ok(Some(stats)) => {
                        if stats.mean.len() != m.channels || stats.std.len() != m.channels {
                            push(
                                ViolationKind::StatsMismatch,
                                format!("{where_}: stats cover {} channels", stats.mean.len()),
                            );
                        } else if stats.std.iter().any(|&s| !(s > 0.0)) {
                            push(ViolationKind::StatsMismatch, format!("{where_}: non-positive std"));
                        }
                    }
                    Ok(None) => {}
                }
            }
        }
    }
    out
}
