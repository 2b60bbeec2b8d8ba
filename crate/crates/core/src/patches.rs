//! Corresponding multi-platform patch tuples, splits and minibatches.
//!
//! Every masked voxel of the input platform defines one patch tuple: an 11³
//! input patch around the voxel and, per target platform, an 11³ patch around
//! the same voxel (or a 19³ patch around the doubled coordinate on a 2× grid).
//! Reads outside the grid return zero.
//!
//! Tuples are stored as centers and materialized on demand, so a dataset
//! costs one copy of the normalized volumes regardless of patch count.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::sh::normalize_channels;
use crate::tensor::Tensor;
use crate::volume::manifest::CohortManifest;
use crate::volume::{read_all, read_mask, read_volume, write_all, Mask, Volume};

pub const INPUT_PATCH: usize = 11;
pub const SR_PATCH: usize = 19;
pub const CACHE_MAGIC: &[u8; 4] = b"MSPD";
pub const CACHE_VERSION: u32 = 1;

/// Patch edge length for a target on a grid `scale`× finer than the input.
pub fn target_patch_size(scale: usize) -> Result<usize> {
    match scale {
        1 => Ok(INPUT_PATCH),
        2 => Ok(SR_PATCH),
        s => Err(Error::invalid(format!("unsupported target scale {s}"))),
    }
}

/// Normalized volumes of one subject: the input platform and each target.
#[derive(Clone, Debug)]
pub struct SubjectVolumes {
    pub input: Volume,
    pub mask: Mask,
    pub targets: Vec<Volume>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchCenter {
    pub subject: usize,
    pub voxel: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub manifest_digest: String,
    pub mask_digest: String,
    pub input_size: usize,
    pub target_platforms: Vec<usize>,
    pub target_sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    /// `[C, 11, 11, 11]`.
    pub input: Tensor,
    /// One `[C, s, s, s]` tensor per target platform.
    pub targets: Vec<Tensor>,
    pub center: [usize; 3],
    pub subject: usize,
}

/// Patches stacked along a leading batch axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub input: Tensor,
    pub targets: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct PatchDataset {
    subjects: Vec<SubjectVolumes>,
    scales: Vec<usize>,
    centers: Vec<PatchCenter>,
    provenance: Provenance,
}

impl PatchDataset {
    /// Builds the dataset from already-normalized volumes. `scales[i]` is the
    /// grid factor of target `i`; `target_platforms` is recorded as metadata.
    pub fn from_volumes(
        subjects: Vec<SubjectVolumes>,
        scales: Vec<usize>,
        target_platforms: Vec<usize>,
        manifest_digest: String,
    ) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::invalid("no subjects"));
        }
        if scales.len() != target_platforms.len() {
            return Err(Error::invalid("one scale per target platform required"));
        }
        let channels = subjects[0].input.channels();
        let target_sizes = scales.iter().map(|&s| target_patch_size(s)).collect::<Result<Vec<_>>>()?;
        let mut centers = Vec::new();
        let mut mask_hash = Sha256::new();
        for (s, sv) in subjects.iter().enumerate() {
            let dims = sv.input.dims();
            if sv.mask.dims() != dims {
                return Err(Error::shape(format!(
                    "subject {s}: mask {:?} vs input volume {:?}",
                    sv.mask.dims(),
                    dims
                )));
            }
            if sv.targets.len() != scales.len() {
                return Err(Error::shape(format!("subject {s}: expected {} target volumes", scales.len())));
            }
            for (t, (vol, &scale)) in sv.targets.iter().zip(&scales).enumerate() {
                if vol.dims() != dims.map(|d| d * scale) {
                    return Err(Error::shape(format!(
                        "subject {s}, target {t}: dims {:?} are not {scale}× {:?}",
                        vol.dims(),
                        dims
                    )));
                }
                if vol.channels() != channels {
                    return Err(Error::shape(format!("subject {s}, target {t}: channel count differs")));
                }
            }
            if sv.input.channels() != channels {
                return Err(Error::shape(format!("subject {s}: channel count differs")));
            }
            mask_hash.update(sv.mask.data());
            let before = centers.len();
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        if sv.mask.get(x, y, z) {
                            centers.push(PatchCenter {
                                subject: s,
                                voxel: [x, y, z],
                            });
                        }
                    }
                }
            }
            if centers.len() == before {
                return Err(Error::invalid(format!("subject {s}: mask is empty")));
            }
        }
        Ok(Self {
            subjects,
            scales,
            centers,
            provenance: Provenance {
                manifest_digest,
                mask_digest: hex::encode(mask_hash.finalize()),
                input_size: INPUT_PATCH,
                target_platforms,
                target_sizes,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.subjects[0].input.channels()
    }

    pub fn n_targets(&self) -> usize {
        self.scales.len()
    }

    pub fn target_scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn target_sizes(&self) -> &[usize] {
        &self.provenance.target_sizes
    }

    pub fn centers(&self) -> &[PatchCenter] {
        &self.centers
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn subjects(&self) -> &[SubjectVolumes] {
        &self.subjects
    }

    fn check_index(&self, i: usize) -> Result<PatchCenter> {
        self.centers
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("patch index {i} out of range ({})", self.len())))
    }

    pub fn pair(&self, i: usize) -> Result<PatchPair> {
        let c = self.check_index(i)?;
        let sv = &self.subjects[c.subject];
        let ch = self.channels();
        let input = Tensor::new(vec![ch, INPUT_PATCH, INPUT_PATCH, INPUT_PATCH], {
            let mut buf = Vec::with_capacity(ch * INPUT_PATCH.pow(3));
            extract_into(&sv.input, c.voxel, 1, INPUT_PATCH, &mut buf);
            buf
        })?;
        let targets = self
            .scales
            .iter()
            .zip(&self.provenance.target_sizes)
            .zip(&sv.targets)
            .map(|((&scale, &size), vol)| {
                let mut buf = Vec::with_capacity(ch * size.pow(3));
                extract_into(vol, c.voxel, scale, size, &mut buf);
                Tensor::new(vec![ch, size, size, size], buf)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PatchPair {
            input,
            targets,
            center: c.voxel,
            subject: c.subject,
        })
    }

    /// Stacks the given patches into `[B, C, s, s, s]` tensors.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let ch = self.channels();
        let b = indices.len();
        let mut input = Vec::with_capacity(b * ch * INPUT_PATCH.pow(3));
        let mut targets: Vec<Vec<f32>> = self
            .target_sizes()
            .iter()
            .map(|s| Vec::with_capacity(b * ch * s.pow(3)))
            .collect();
        for &i in indices {
            let c = self.check_index(i)?;
            let sv = &self.subjects[c.subject];
            extract_into(&sv.input, c.voxel, 1, INPUT_PATCH, &mut input);
            for (t, buf) in targets.iter_mut().enumerate() {
                extract_into(&sv.targets[t], c.voxel, self.scales[t], self.target_sizes()[t], buf);
            }
        }
        let p = INPUT_PATCH;
        Ok(Batch {
            indices: indices.to_vec(),
            input: Tensor::new(vec![b, ch, p, p, p], input)?,
            targets: targets
                .into_iter()
                .zip(self.target_sizes())
                .map(|(buf, &s)| Tensor::new(vec![b, ch, s, s, s], buf))
                .collect::<Result<Vec<_>>>()?,
        })
    }
}

/// Appends the `[C, size, size, size]` patch of `vol` centered at
/// `scale · center`, zero outside the grid.
pub(crate) fn extract_into(vol: &Volume, center: [usize; 3], scale: usize, size: usize, out: &mut Vec<f32>) {
    let ch = vol.channels();
    let half = (size / 2) as i64;
    let origin = center.map(|c| (c * scale) as i64 - half);
    let start = out.len();
    out.resize(start + ch * size.pow(3), 0.0);
    let block = &mut out[start..];
    let s3 = size.pow(3);
    for i in 0..size {
        let x = origin[0] + i as i64;
        for j in 0..size {
            let y = origin[1] + j as i64;
            for k in 0..size {
                let z = origin[2] + k as i64;
                if !vol.contains(x, y, z) {
                    continue;
                }
                let v = vol.voxel(x as usize, y as usize, z as usize);
                let off = (i * size + j) * size + k;
                for (c, &val) in v.iter().enumerate() {
                    block[c * s3 + off] = val;
                }
            }
        }
    }
}

/// Loads every subject, normalizes each platform with the manifest's
/// statistics and gathers patch tuples for `target_platforms`.
pub fn extract_patches(manifest: &CohortManifest, target_platforms: &[usize]) -> Result<PatchDataset> {
    if target_platforms.is_empty() {
        return Err(Error::invalid("no target platforms"));
    }
    for &t in target_platforms {
        if t == 0 || t >= manifest.n_platforms() {
            return Err(Error::invalid(format!(
                "target platform {t} must be in 1..{}",
                manifest.n_platforms()
            )));
        }
    }
    let load = |s: usize, p: usize| -> Result<Volume> {
        let e = manifest.entry(s, p)?;
        let vol = read_volume(manifest.resolve(&e.volume))?;
        if vol.channels() != manifest.channels {
            return Err(Error::shape(format!(
                "{}: {} channels, manifest says {}",
                e.volume,
                vol.channels(),
                manifest.channels
            )));
        }
        match manifest.load_norm_stats(e)? {
            Some(stats) => normalize_channels(&vol, &stats),
            None => Ok(vol),
        }
    };
    let mut subjects = Vec::with_capacity(manifest.n_subjects());
    for s in 0..manifest.n_subjects() {
        let input = load(s, 0)?;
        let mask = read_mask(manifest.resolve(&manifest.entry(s, 0)?.mask))?;
        let targets = target_platforms.iter().map(|&p| load(s, p)).collect::<Result<Vec<_>>>()?;
        subjects.push(SubjectVolumes { input, mask, targets });
    }
    let scales = target_platforms.iter().map(|&p| manifest.platforms[p].scale).collect();
    PatchDataset::from_volumes(subjects, scales, target_platforms.to_vec(), manifest.digest())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Number of training items under round-half-up of `fraction · n`.
pub fn train_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 + 0.5).floor() as usize).min(n)
}

/// Random patch-level split: a seeded permutation, first `round(fraction·n)`
/// indices train, the rest test. Both lists are returned sorted.
pub fn split(n: usize, fraction: f64, seed: u64) -> Result<SplitIndices> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 items to split, got {n}")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(seed, Domain::Split, 0, 0));
    let k = train_count(n, fraction);
    let mut train = perm[..k].to_vec();
    let mut test = perm[k..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test, seed })
}

/// Subject-level holdout: all patches of `test_subjects` form the test set.
pub fn split_by_subject(dataset: &PatchDataset, test_subjects: &[usize]) -> Result<SplitIndices> {
    let n_subjects = dataset.subjects().len();
    if let Some(&s) = test_subjects.iter().find(|&&s| s >= n_subjects) {
        return Err(Error::invalid(format!("holdout subject {s} out of range")));
    }
    let (test, train): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| test_subjects.contains(&dataset.centers()[i].subject));
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("subject holdout leaves an empty train or test set"));
    }
    Ok(SplitIndices { train, test, seed: 0 })
}

/// Epoch order: `indices` shuffled by `(seed, epoch)`, chunked into batches
/// of `batch_size` with the short remainder kept last.
pub fn batches(indices: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if indices.is_empty() {
        return Err(Error::invalid("cannot batch an empty index list"));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut stream(seed, Domain::Shuffle, epoch as u64, 0));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Writes materialized patch tuples for `indices`.
///
/// ```text
/// "MSPD" | version u32 | channels u32 | JSON length u32 | provenance JSON | count u32
/// per tuple: subject u32, center 3×u32, input f32[C·11³], targets f32[C·s³]…
/// ```
pub fn write_patch_cache(dataset: &PatchDataset, indices: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_vec(&dataset.provenance).expect("provenance serializes");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(dataset.channels() as u32).to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&(indices.len() as u32).to_le_bytes());
    for &i in indices {
        let p = dataset.pair(i)?;
        bytes.extend_from_slice(&(p.subject as u32).to_le_bytes());
        for c in p.center {
            bytes.extend_from_slice(&(c as u32).to_le_bytes());
        }
        for t in std::iter::once(&p.input).chain(&p.targets) {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    write_all(path.as_ref(), &bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn bad(&self, detail: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| self.bad("truncated patch cache"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn tensor(&mut self, ch: usize, size: usize) -> Result<Tensor> {
        let n = ch * size.pow(3);
        let data = self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Tensor::new(vec![ch, size, size, size], data)
    }
}

pub fn read_patch_cache(path: impl AsRef<Path>) -> Result<(Provenance, Vec<PatchPair>)> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(4)? != CACHE_MAGIC {
        return Err(cur.bad("bad magic, expected MSPD"));
    }
    let version = cur.u32()?;
    if version != CACHE_VERSION as usize {
        return Err(cur.bad(&format!("unsupported version {version}")));
    }
    let ch = cur.u32()?;
    let json_len = cur.u32()?;
    let prov: Provenance = serde_json::from_slice(cur.take(json_len)?).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let count = cur.u32()?;
    let mut pairs = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let subject = cur.u32()?;
        let center = [cur.u32()?, cur.u32()?, cur.u32()?];
        let input = cur.tensor(ch, prov.input_size)?;
        let targets = prov
            .target_sizes
            .iter()
            .map(|&s| cur.tensor(ch, s))
            .collect::<Result<Vec<_>>>()?;
        pairs.push(PatchPair {
            input,
            targets,
            center,
            subject,
        });
    }
    if cur.pos != bytes.len() {
        return Err(cur.bad("trailing bytes after patch records"));
    }
    Ok((prov, pairs))
}
