//! Per-channel standardization of coefficient volumes.
//!
//! Statistics use the population standard deviation and only masked voxels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::shape(format!(
                "stats for {} channels applied to {channels}",
                self.mean.len()
            )));
        }
        if let Some(c) = self.std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::invalid(format!("channel {c} has zero variance")));
        }
        Ok(())
    }
}

pub fn compute_stats(volume: &Volume, mask: &Mask) -> Result<NormStats> {
    compute_stats_pooled(&[(volume, mask)])
}

/// Statistics pooled over several (volume, mask) pairs of one platform.
pub fn compute_stats_pooled(items: &[(&Volume, &Mask)]) -> Result<NormStats> {
    let channels = items
        .first()
        .ok_or_else(|| Error::invalid("no volumes to compute statistics over"))?
        .0
        .channels();
    let mut sum = vec![0.0f64; channels];
    let mut count = 0usize;
    for (vol, mask) in items {
        check_pair(vol, mask, channels)?;
        for (v, &m) in vol.data().chunks(channels).zip(mask.data()) {
            if m != 0 {
                for (s, &x) in sum.iter_mut().zip(v) {
                    *s += x as f64;
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("mask selects no voxels"));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0f64; channels];
    for (vol, mask) in items {
        for (v, &m) in vol.data().chunks(channels).zip(mask.data()) {
            if m != 0 {
                for ((s, &x), mu) in sq.iter_mut().zip(v).zip(&mean) {
                    let d = x as f64 - mu;
                    *s += d * d;
                }
            }
        }
    }
    let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
    if let Some(c) = std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::invalid(format!(
            "channel {c} has zero variance over the masked voxels"
        )));
    }
    Ok(NormStats { mean, std })
}

fn check_pair(vol: &Volume, mask: &Mask, channels: usize) -> Result<()> {
    if vol.dims() != mask.dims() {
        return Err(Error::shape(format!(
            "volume {:?} with mask {:?}",
            vol.dims(),
            mask.dims()
        )));
    }
    if vol.channels() != channels {
        return Err(Error::shape("channel count differs between pooled volumes"));
    }
    Ok(())
}

/// `(v − mean) / std` per channel, applied to every voxel.
pub fn normalize_channels(volume: &Volume, stats: &NormStats) -> Result<Volume> {
    map_channels(volume, stats, |x, mu, sd| (x - mu) / sd)
}

pub fn denormalize_channels(volume: &Volume, stats: &NormStats) -> Result<Volume> {
    map_channels(volume, stats, |x, mu, sd| x * sd + mu)
}

fn map_channels(volume: &Volume, stats: &NormStats, f: impl Fn(f64, f64, f64) -> f64) -> Result<Volume> {
    let c = volume.channels();
    stats.check(c)?;
    let mut out = volume.clone();
    for vox in out.data_mut().chunks_mut(c) {
        for (i, v) in vox.iter_mut().enumerate() {
            *v = f(*v as f64, stats.mean[i], stats.std[i]) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(values: &[f32], channels: usize) -> Volume {
        let n = values.len() / channels;
        Volume::new([n, 1, 1], channels, [1.0; 3], values.to_vec()).unwrap()
    }

    #[test]
    fn two_point_channel_standardizes_to_unit() {
        let v = vol(&[1.0, 3.0], 1);
        let m = Mask::new([2, 1, 1], vec![1, 1]).unwrap();
        let s = compute_stats(&v, &m).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (2.0, 1.0));
        assert_eq!(normalize_channels(&v, &s).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn background_is_ignored() {
        let v = vol(&[1.0, 3.0, 1000.0], 1);
        let m = Mask::new([3, 1, 1], vec![1, 1, 0]).unwrap();
        let s = compute_stats(&v, &m).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (2.0, 1.0));
    }

    #[test]
    fn zero_variance_is_an_error() {
        let v = vol(&[5.0, 1.0, 5.0, 2.0], 2);
        let m = Mask::new([2, 1, 1], vec![1, 1]).unwrap();
        assert!(compute_stats(&v, &m).is_err());
        let bad = NormStats {
            mean: vec![0.0],
            std: vec![0.0],
        };
        assert!(normalize_channels(&vol(&[1.0], 1), &bad).is_err());
    }

    #[test]
    fn empty_mask_is_an_error() {
        let v = vol(&[1.0, 2.0], 1);
        let m = Mask::new([2, 1, 1], vec![0, 0]).unwrap();
        assert!(compute_stats(&v, &m).is_err());
    }
}
