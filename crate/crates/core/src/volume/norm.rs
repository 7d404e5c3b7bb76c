//! Per-modality z-score statistics over nonzero (brain) voxels.

use super::VolumeSet;
use crate::error::{Error, Result};
use crate::kv::{join, KvText};

/// Channels whose standard deviation falls below this are zeroed.
pub const MIN_STD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Identity transform for `channels` modalities.
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn write_kv(&self, kv: &mut KvText) {
        kv.push("norm_mean", join(&self.mean));
        kv.push("norm_std", join(&self.std));
    }

    /// `None` when the text carries no statistics.
    pub fn read_kv(kv: &KvText) -> Result<Option<Self>> {
        let (Some(m), Some(s)) = (kv.get("norm_mean"), kv.get("norm_std")) else {
            return Ok(None);
        };
        let parse = |key: &str, v: &str| -> Result<Vec<f64>> {
            v.split_whitespace()
                .map(|t| t.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| kv.bad(key, v))
        };
        let stats = Self { mean: parse("norm_mean", m)?, std: parse("norm_std", s)? };
        if stats.mean.len() != stats.std.len() || stats.std.iter().any(|&s| s < 0.0) {
            return Err(kv.bad("norm_std", s));
        }
        Ok(Some(stats))
    }
}

/// Pooled mean and population standard deviation of each modality over the
/// nonzero voxels of every training volume. Two passes, accumulated in f64.
pub fn compute_norm_stats<'a>(volumes: impl IntoIterator<Item = &'a VolumeSet>) -> Result<NormStats> {
    let volumes: Vec<&VolumeSet> = volumes.into_iter().collect();
    let first = volumes.first().ok_or_else(|| Error::invalid("no training volumes"))?;
    let channels = first.channels();
    if volumes.iter().any(|v| v.channels() != channels) {
        return Err(Error::shape("training volumes differ in channel count"));
    }
    let mut mean = vec![0.0; channels];
    let mut std = vec![0.0; channels];
    for c in 0..channels {
        let nonzero = || volumes.iter().flat_map(move |v| v.channel(c)).filter(|&&x| x != 0.0).map(|&x| x as f64);
        let n = nonzero().count();
        if n == 0 {
            continue;
        }
        let m = nonzero().sum::<f64>() / n as f64;
        let var = nonzero().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        mean[c] = m;
        std[c] = var.sqrt();
    }
    Ok(NormStats { mean, std })
}

/// `(x - mean) / std` on nonzero voxels; background stays zero.
pub fn normalize(mut volume: VolumeSet, stats: &NormStats) -> Result<VolumeSet> {
    if volume.channels() != stats.channels() {
        return Err(Error::shape(format!(
            "volume has {} channels, statistics {}",
            volume.channels(),
            stats.channels()
        )));
    }
    for c in 0..stats.channels() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        let ch = volume.channel_mut(c);
        if s < MIN_STD {
            ch.fill(0.0);
            continue;
        }
        for x in ch.iter_mut().filter(|x| **x != 0.0) {
            *x = ((*x as f64 - m) / s) as f32;
        }
    }
    Ok(volume)
}
