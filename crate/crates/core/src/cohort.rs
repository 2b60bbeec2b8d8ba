//! Synthetic traveling-heads cohort.
//!
//! Each subject gets one procedural multi-channel "anatomy". Every platform
//! observes that anatomy through a fixed chain of degradations:
//!
//! 1. optional 2× trilinear upsampling (scale-2 platforms)
//! 2. separable Gaussian blur
//! 3. per-voxel channel mixing
//! 4. smooth multiplicative gain field
//! 5. additive Gaussian noise
//!
//! so the mapping between any two platforms is local and smooth.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::sh::{compute_stats_pooled, NormStats};
use crate::volume::manifest::{CohortManifest, ManifestEntry, PlatformInfo, MANIFEST_VERSION};
use crate::volume::{write_mask, write_volume, Mask, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingSpec {
    Identity,
    /// `I + strength · R` with `R` drawn per platform, entries `N(0, 1/C)`.
    Random { strength: f64 },
    Matrix(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformSpec {
    pub name: String,
    #[serde(default)]
    pub display_name: String,
    pub scale: usize,
    /// Gaussian blur sigma in voxels of the platform's own grid.
    pub blur_sigma: f64,
    pub mixing: MixingSpec,
    pub noise_sigma: f64,
    pub gain_amplitude: f64,
}

impl PlatformSpec {
    pub fn identity(name: &str) -> Self {
        Self {
            name: name.into(),
            display_name: String::new(),
            scale: 1,
            blur_sigma: 0.0,
            mixing: MixingSpec::Identity,
            noise_sigma: 0.0,
            gain_amplitude: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnatomyConfig {
    pub n_bumps: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Bump centers fall inside an ellipsoid with these semi-axes, as a
    /// fraction of each grid extent.
    pub envelope_fraction: f64,
    /// Correlation of bump amplitudes across channels.
    pub channel_correlation: f64,
    pub amplitude: f64,
}

impl Default for AnatomyConfig {
    fn default() -> Self {
        Self {
            n_bumps: 40,
            radius_min: 3.0,
            radius_max: 5.0,
            envelope_fraction: 0.2,
            channel_correlation: 0.5,
            amplitude: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    pub n_subjects: usize,
    pub base_dims: [usize; 3],
    pub channels: usize,
    pub seed: u64,
    #[serde(default = "default_voxel_mm")]
    pub voxel_size_mm: f32,
    #[serde(default)]
    pub anatomy: AnatomyConfig,
    pub platforms: Vec<PlatformSpec>,
}

fn default_voxel_mm() -> f32 {
    2.4
}

impl Default for CohortConfig {
    /// Four subjects on a 24³ grid with six channels, imaged on an aged
    /// input platform, two same-resolution modern platforms and one
    /// double-resolution platform.
    fn default() -> Self {
        let platform = |name: &str, display: &str, scale, blur, mix, noise, gain| PlatformSpec {
            name: name.into(),
            display_name: display.into(),
            scale,
            blur_sigma: blur,
            mixing: MixingSpec::Random { strength: mix },
            noise_sigma: noise,
            gain_amplitude: gain,
        };
        Self {
            n_subjects: 4,
            base_dims: [24, 24, 24],
            channels: 6,
            seed: 2019,
            voxel_size_mm: default_voxel_mm(),
            anatomy: AnatomyConfig::default(),
            platforms: vec![
                platform("aged_st", "aged scanner, standard protocol", 1, 1.2, 0.25, 0.08, 0.15),
                platform("modern_st_a", "modern scanner A, standard protocol", 1, 0.4, 0.3, 0.02, 0.02),
                platform("modern_st_b", "modern scanner B, standard protocol", 1, 0.6, 0.3, 0.02, 0.02),
                platform("modern_sa", "modern scanner B, high-resolution protocol", 2, 0.5, 0.2, 0.02, 0.02),
            ],
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_subjects < 2 {
            return bad(format!("n_subjects must be ≥ 2, got {}", self.n_subjects));
        }
        if self.platforms.len() < 2 {
            return bad(format!("need ≥ 2 platforms, got {}", self.platforms.len()));
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.base_dims.iter().any(|&d| d < 11) {
            return bad(format!("base dims {:?} smaller than an 11³ patch", self.base_dims));
        }
        if self.platforms[0].scale != 1 {
            return bad("platform 0 (input) must have scale 1".into());
        }
        let a = &self.anatomy;
        if !(a.radius_min > 0.0 && a.radius_max >= a.radius_min) {
            return bad("anatomy radii must satisfy 0 < radius_min ≤ radius_max".into());
        }
        if !(0.0..=1.0).contains(&a.channel_correlation) {
            return bad("channel_correlation must lie in [0, 1]".into());
        }
        for p in &self.platforms {
            if !(p.scale == 1 || p.scale == 2) {
                return bad(format!("platform {}: scale must be 1 or 2", p.name));
            }
            if p.blur_sigma < 0.0 || p.noise_sigma < 0.0 || p.gain_amplitude < 0.0 {
                return bad(format!("platform {}: sigmas and gain must be ≥ 0", p.name));
            }
            if p.name.is_empty() || p.name.contains(['/', '\\']) {
                return bad(format!("platform name {:?} is not a valid file stem", p.name));
            }
        }
        Ok(())
    }
}

/// Procedural anatomy: `tanh` of a sum of compactly supported bumps, with
/// the mask covering the union of bump supports.
pub fn generate_subject_anatomy(
    dims: [usize; 3],
    channels: usize,
    anatomy: &AnatomyConfig,
    master_seed: u64,
    subject: usize,
) -> Result<(Volume, Mask)> {
    let reach = 2 * anatomy.radius_max.ceil() as usize + 1;
    if dims.iter().any(|&d| d < reach) {
        return Err(Error::invalid(format!(
            "dims {dims:?} too small for bumps of radius {}",
            anatomy.radius_max
        )));
    }
    let mut rng = stream(master_seed, Domain::Anatomy, subject as u64, 0);
    let centre = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let semi = dims.map(|d| d as f64 * anatomy.envelope_fraction);
    let rho = anatomy.channel_correlation;

    struct Bump {
        pos: [f64; 3],
        radius: f64,
        amp: Vec<f64>,
    }
    let mut bumps = Vec::with_capacity(anatomy.n_bumps);
    for _ in 0..anatomy.n_bumps {
        let pos = loop {
            let u: [f64; 3] = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                break [0, 1, 2].map(|i| centre[i] + u[i] * semi[i]);
            }
        };
        let radius = rng.random_range(anatomy.radius_min..=anatomy.radius_max);
        let shared: f64 = StandardNormal.sample(&mut rng);
        let amp = (0..channels)
            .map(|_| {
                let own: f64 = StandardNormal.sample(&mut rng);
                anatomy.amplitude * (rho.sqrt() * shared + (1.0 - rho).sqrt() * own)
            })
            .collect();
        bumps.push(Bump { pos, radius, amp });
    }

    let mut vol = Volume::zeros(dims, channels, [1.0; 3])?;
    let mut inside = vec![0u8; dims.iter().product()];
    let mut acc = vec![0.0f64; channels];
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                acc.fill(0.0);
                let mut covered = false;
                for b in &bumps {
                    let r2 = (x as f64 - b.pos[0]).powi(2)
                        + (y as f64 - b.pos[1]).powi(2)
                        + (z as f64 - b.pos[2]).powi(2);
                    let q = 1.0 - r2 / (b.radius * b.radius);
                    if q > 0.0 {
                        covered = true;
                        let w = q * q * q;
                        for (a, amp) in acc.iter_mut().zip(&b.amp) {
                            *a += w * amp;
                        }
                    }
                }
                if covered {
                    let i = vol.voxel_index(x, y, z);
                    inside[i] = 1;
                    for (v, a) in vol.voxel_mut(x, y, z).iter_mut().zip(&acc) {
                        *v = a.tanh() as f32;
                    }
                }
            }
        }
    }
    Ok((vol, Mask::new(dims, inside)?))
}

/// The C×C mixing matrix a platform applies; `None` means identity.
pub fn resolve_mixing(spec: &PlatformSpec, channels: usize, master_seed: u64, platform: usize) -> Result<Option<Vec<f64>>> {
    let m = match &spec.mixing {
        MixingSpec::Identity => return Ok(None),
        MixingSpec::Random { strength } => {
            let mut rng = stream(master_seed, Domain::PlatformMixing, platform as u64, 0);
            let scale = strength / (channels as f64).sqrt();
            let mut m = vec![0.0; channels * channels];
            for (i, v) in m.iter_mut().enumerate() {
                let r: f64 = StandardNormal.sample(&mut rng);
                *v = r * scale + if i / channels == i % channels { 1.0 } else { 0.0 };
            }
            m
        }
        MixingSpec::Matrix(rows) => {
            if rows.len() != channels || rows.iter().any(|r| r.len() != channels) {
                return Err(Error::Config(format!(
                    "platform {}: mixing matrix must be {channels}×{channels}",
                    spec.name
                )));
            }
            rows.concat()
        }
    };
    let det = determinant(&m, channels);
    if !(det.abs() > 1e-8) {
        return Err(Error::invalid(format!(
            "platform {}: mixing matrix is not invertible (det {det:e})",
            spec.name
        )));
    }
    let is_identity = m
        .iter()
        .enumerate()
        .all(|(i, &v)| v == if i / channels == i % channels { 1.0 } else { 0.0 });
    Ok(if is_identity { None } else { Some(m) })
}

fn determinant(m: &[f64], n: usize) -> f64 {
    let mut a = m.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if a[pivot * n + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
            }
            det = -det;
        }
        let p = a[col * n + col];
        det *= p;
        for r in col + 1..n {
            let f = a[r * n + col] / p;
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
        }
    }
    det
}

/// 2× trilinear upsampling: output voxel `X` samples the input at `X/2`,
/// so `(2x, 2y, 2z)` coincides with input voxel `(x, y, z)`.
pub fn upsample2(v: &Volume) -> Result<Volume> {
    let [nx, ny, nz] = v.dims();
    let c = v.channels();
    let out_dims = [2 * nx, 2 * ny, 2 * nz];
    let vs = v.voxel_size().map(|s| s / 2.0);
    let mut out = Volume::zeros(out_dims, c, vs)?;
    let taps = |i: usize, n: usize| -> [(usize, f32); 2] {
        let lo = i / 2;
        if i % 2 == 0 {
            [(lo, 1.0), (lo, 0.0)]
        } else {
            [(lo, 0.5), ((lo + 1).min(n - 1), 0.5)]
        }
    };
    for x in 0..out_dims[0] {
        let tx = taps(x, nx);
        for y in 0..out_dims[1] {
            let ty = taps(y, ny);
            for z in 0..out_dims[2] {
                let tz = taps(z, nz);
                let dst = out.voxel_index(x, y, z) * c;
                for &(ix, wx) in &tx {
                    for &(iy, wy) in &ty {
                        for &(iz, wz) in &tz {
                            let w = wx * wy * wz;
                            if w == 0.0 {
                                continue;
                            }
                            let src = v.voxel(ix, iy, iz);
                            for (o, &s) in out.data_mut()[dst..dst + c].iter_mut().zip(src) {
                                *o += w * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour 2× mask upsampling, matching [`upsample2`]'s grid.
pub fn upsample_mask2(m: &Mask) -> Mask {
    let d = m.dims();
    Mask::from_fn([2 * d[0], 2 * d[1], 2 * d[2]], |x, y, z| m.get(x / 2, y / 2, z / 2))
}

/// Separable Gaussian blur with zero padding, truncated at 3σ.
pub fn gaussian_blur(v: &Volume, sigma: f64) -> Volume {
    if sigma <= 0.0 {
        return v.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let mut cur = v.clone();
    for axis in 0..3 {
        let dims = cur.dims();
        let c = cur.channels();
        let mut next = cur.clone();
        next.data_mut().fill(0.0);
        let mut acc = vec![0.0f64; c];
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    acc.fill(0.0);
                    let pos = [x as i64, y as i64, z as i64];
                    for (ki, &w) in kernel.iter().enumerate() {
                        let mut p = pos;
                        p[axis] += ki as i64 - radius;
                        if !cur.contains(p[0], p[1], p[2]) {
                            continue;
                        }
                        for (a, &s) in acc.iter_mut().zip(cur.voxel(p[0] as usize, p[1] as usize, p[2] as usize)) {
                            *a += w * s as f64;
                        }
                    }
                    for (o, a) in next.voxel_mut(x, y, z).iter_mut().zip(&acc) {
                        *o = *a as f32;
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// Low-frequency field in `[-1, 1]` over normalized coordinates, so the
/// same platform yields the same field at any resolution.
fn gain_field(rng: &mut impl Rng) -> impl Fn([f64; 3]) -> f64 {
    let terms: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let f = [0; 3].map(|_| rng.random_range(-1.5..1.5));
            (f, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    move |u: [f64; 3]| {
        terms
            .iter()
            .map(|(f, phase)| (std::f64::consts::TAU * (f[0] * u[0] + f[1] * u[1] + f[2] * u[2]) + phase).cos())
            .sum::<f64>()
            / terms.len() as f64
    }
}

/// Pushes a subject's anatomy through one platform's degradation chain.
pub fn apply_platform(
    base: &Volume,
    spec: &PlatformSpec,
    mixing: Option<&[f64]>,
    master_seed: u64,
    subject: usize,
    platform: usize,
) -> Result<Volume> {
    let c = base.channels();
    let mut v = match spec.scale {
        1 => base.clone(),
        2 => upsample2(base)?,
        s => return Err(Error::invalid(format!("unsupported scale {s}"))),
    };
    v = gaussian_blur(&v, spec.blur_sigma);
    if let Some(m) = mixing {
        if m.len() != c * c {
            return Err(Error::shape("mixing matrix does not match channel count"));
        }
        let mut tmp = vec![0.0f64; c];
        for vox in v.data_mut().chunks_mut(c) {
            for (i, t) in tmp.iter_mut().enumerate() {
                *t = (0..c).map(|j| m[i * c + j] * vox[j] as f64).sum();
            }
            for (o, t) in vox.iter_mut().zip(&tmp) {
                *o = *t as f32;
            }
        }
    }
    let dims = v.dims();
    if spec.gain_amplitude > 0.0 {
        let field = gain_field(&mut stream(master_seed, Domain::PlatformGain, platform as u64, 0));
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let u = [x as f64 / dims[0] as f64, y as f64 / dims[1] as f64, z as f64 / dims[2] as f64];
                    let g = (1.0 + spec.gain_amplitude * field(u)) as f32;
                    v.voxel_mut(x, y, z).iter_mut().for_each(|s| *s *= g);
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = stream(master_seed, Domain::PlatformNoise, subject as u64, platform as u64);
        for s in v.data_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *s += (spec.noise_sigma * n) as f32;
        }
    }
    Ok(v)
}

/// Generates the whole cohort under `out_dir` and writes `manifest.json`.
pub fn generate_cohort(config: &CohortConfig, out_dir: impl AsRef<Path>) -> Result<CohortManifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let mixings = config
        .platforms
        .iter()
        .enumerate()
        .map(|(p, spec)| resolve_mixing(spec, config.channels, config.seed, p))
        .collect::<Result<Vec<_>>>()?;

    let subjects: Vec<String> = (0..config.n_subjects).map(|s| format!("sub-{s:02}")).collect();
    let mut entries = Vec::new();
    let mut per_platform: Vec<Vec<(Volume, Mask)>> = vec![Vec::new(); config.platforms.len()];
    for (s, subject) in subjects.iter().enumerate() {
        let (anatomy, mask) =
            generate_subject_anatomy(config.base_dims, config.channels, &config.anatomy, config.seed, s)?;
        if mask.count() == 0 {
            return Err(Error::Config(format!("subject {subject} has an empty mask")));
        }
        for (p, spec) in config.platforms.iter().enumerate() {
            let mut vol = apply_platform(&anatomy, spec, mixings[p].as_deref(), config.seed, s, p)?;
            let vs = config.voxel_size_mm / spec.scale as f32;
            vol = Volume::new(vol.dims(), vol.channels(), [vs; 3], vol.data().to_vec())?;
            let pmask = if spec.scale == 2 { upsample_mask2(&mask) } else { mask.clone() };
            let vol_rel = format!("{subject}/{}.mspv", spec.name);
            let mask_rel = format!("{subject}/{}.mspm", spec.name);
            write_volume(&vol, out_dir.join(&vol_rel))?;
            write_mask(&pmask, out_dir.join(&mask_rel))?;
            entries.push(ManifestEntry {
                subject: s,
                platform: p,
                volume: vol_rel,
                mask: mask_rel,
                norm_stats: Some(format!("stats/{}.json", spec.name)),
            });
            per_platform[p].push((vol, pmask));
        }
    }
    for (p, spec) in config.platforms.iter().enumerate() {
        let pairs: Vec<(&Volume, &Mask)> = per_platform[p].iter().map(|(v, m)| (v, m)).collect();
        let stats: NormStats = compute_stats_pooled(&pairs)?;
        let text = serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n";
        crate::volume::write_all(&out_dir.join(format!("stats/{}.json", spec.name)), text.as_bytes())?;
    }

    let manifest = CohortManifest {
        version: MANIFEST_VERSION,
        channels: config.channels,
        base_dims: config.base_dims,
        subjects,
        platforms: config
            .platforms
            .iter()
            .map(|p| PlatformInfo {
                name: p.name.clone(),
                display_name: p.display_name.clone(),
                scale: p.scale,
            })
            .collect(),
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
