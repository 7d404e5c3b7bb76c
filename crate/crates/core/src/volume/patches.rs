//! Foreground-biased training patch sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabelMap, RegionId, VolumeSet};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

/// Chance that a patch is centred on a region-positive voxel.
pub const FOREGROUND_PROBABILITY: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// `[c, px, py, pz]`, zero where the patch leaves the volume.
    pub input: Vec<f32>,
    pub target: BinaryMask,
    /// Drawn centre, before clipping the patch to the volume.
    pub center: [usize; 3],
    /// Patch origin in the (far-end padded) volume.
    pub origin: [usize; 3],
    pub foreground_centered: bool,
}

/// Reusable sampler over one volume; the positive-voxel list is built once.
#[derive(Clone, Debug)]
pub struct PatchSampler<'a> {
    volume: &'a VolumeSet,
    target: BinaryMask,
    positives: Vec<[usize; 3]>,
    patch: [usize; 3],
}

impl<'a> PatchSampler<'a> {
    pub fn new(volume: &'a VolumeSet, labels: &LabelMap, patch: [usize; 3], region: RegionId) -> Result<Self> {
        if volume.dims() != labels.dims() {
            return Err(Error::shape(format!("volume {:?} and labels {:?} differ", volume.dims(), labels.dims())));
        }
        if patch.contains(&0) {
            return Err(Error::invalid(format!("patch extents {patch:?} must be positive")));
        }
        let target = labels.binarize(region);
        let [_, ny, nz] = volume.dims();
        let positives = target
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| [i / (ny * nz), (i / nz) % ny, i % nz])
            .collect();
        Ok(Self { volume, target, positives, patch })
    }

    pub fn has_foreground(&self) -> bool {
        !self.positives.is_empty()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Patch {
        let dims = self.volume.dims();
        let fg = !self.positives.is_empty() && rng.random_bool(FOREGROUND_PROBABILITY);
        let center = if fg {
            self.positives[rng.random_range(0..self.positives.len())]
        } else {
            dims.map(|n| rng.random_range(0..n))
        };
        self.extract(center, fg)
    }

    /// Patch whose centre is as close to `center` as the bounds allow.
    pub fn extract(&self, center: [usize; 3], foreground_centered: bool) -> Patch {
        let dims = self.volume.dims();
        let origin: [usize; 3] = std::array::from_fn(|i| {
            let padded = dims[i].max(self.patch[i]);
            center[i].saturating_sub(self.patch[i] / 2).min(padded - self.patch[i])
        });
        let [px, py, pz] = self.patch;
        let channels = self.volume.channels();
        let pn = px * py * pz;
        let vn = self.volume.voxels();
        let mut input = vec![0.0f32; channels * pn];
        let mut target = BinaryMask::empty(self.patch);
        for x in 0..px.min(dims[0].saturating_sub(origin[0])) {
            for y in 0..py.min(dims[1].saturating_sub(origin[1])) {
                let zs = pz.min(dims[2].saturating_sub(origin[2]));
                let src = ((origin[0] + x) * dims[1] + origin[1] + y) * dims[2] + origin[2];
                let dst = (x * py + y) * pz;
                for c in 0..channels {
                    input[c * pn + dst..][..zs].copy_from_slice(&self.volume.data()[c * vn + src..][..zs]);
                }
                target.data_mut()[dst..dst + zs].copy_from_slice(&self.target.data()[src..src + zs]);
            }
        }
        Patch { input, target, center, origin, foreground_centered }
    }
}

/// `count` patches drawn with a ChaCha8 stream seeded by `seed`.
pub fn sample_patches(
    volume: &VolumeSet,
    labels: &LabelMap,
    patch: [usize; 3],
    count: usize,
    region: RegionId,
    seed: u64,
) -> Result<Vec<Patch>> {
    if count == 0 {
        return Err(Error::invalid("patch count must be positive"));
    }
    let sampler = PatchSampler::new(volume, labels, patch, region)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| sampler.sample(&mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{phantom_generate, PhantomParams};

    fn ramp(dims: [usize; 3]) -> VolumeSet {
        let n: usize = dims.iter().product();
        VolumeSet::new(dims, 2, (0..2 * n).map(|i| i as f32 + 1.0).collect()).unwrap()
    }

    #[test]
    fn full_extent_patch_is_the_volume() {
        let v = ramp([5, 4, 3]);
        let l = LabelMap::new([5, 4, 3], (0..60).map(|i| if i % 7 == 0 { 4 } else { 0 }).collect()).unwrap();
        for p in sample_patches(&v, &l, [5, 4, 3], 20, RegionId::EN, 1).unwrap() {
            assert_eq!(p.input, v.data());
            assert_eq!(p.target, l.binarize(RegionId::EN));
        }
    }

    #[test]
    fn oversized_patch_is_zero_padded() {
        let v = ramp([3, 3, 2]);
        let l = LabelMap::zeros([3, 3, 2]);
        let p = &sample_patches(&v, &l, [4, 3, 3], 1, RegionId::WT, 0).unwrap()[0];
        assert_eq!(p.origin, [0, 0, 0]);
        assert_eq!(p.input.len(), 2 * 36);
        assert_eq!(p.input[2], 0.0);
        assert_eq!(p.input[1], 2.0);
        assert!(p.input[27..36].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn background_only_labels_sample_uniformly() {
        let v = ramp([8, 8, 8]);
        let l = LabelMap::zeros([8, 8, 8]);
        let ps = sample_patches(&v, &l, [4, 4, 4], 200, RegionId::WT, 5).unwrap();
        assert!(ps.iter().all(|p| !p.foreground_centered && p.target.is_empty()));
        assert!(sample_patches(&v, &l, [4, 4, 4], 0, RegionId::WT, 5).is_err());
    }

    #[test]
    fn patches_match_the_source_window() {
        let v = ramp([9, 7, 6]);
        let l = LabelMap::zeros([9, 7, 6]);
        for p in sample_patches(&v, &l, [4, 3, 5], 50, RegionId::WT, 9).unwrap() {
            let [ox, oy, oz] = p.origin;
            assert!(ox + 4 <= 9 && oy + 3 <= 7 && oz + 5 <= 6);
            for c in 0..2 {
                for x in 0..4 {
                    for y in 0..3 {
                        for z in 0..5 {
                            let src = c * 378 + ((ox + x) * 7 + oy + y) * 6 + oz + z;
                            assert_eq!(p.input[c * 60 + (x * 3 + y) * 5 + z], v.data()[src]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn foreground_frequency() {
        let (v, l) = phantom_generate(&PhantomParams::with_seed(11)).unwrap();
        let mask = l.binarize(RegionId::TC);
        let frac = mask.count() as f64 / mask.data().len() as f64;
        let ps = sample_patches(&v, &l, [24, 24, 11], 10_000, RegionId::TC, 3).unwrap();
        let hits = ps.iter().filter(|p| mask.get(p.center)).count() as f64 / ps.len() as f64;
        let expected = FOREGROUND_PROBABILITY + (1.0 - FOREGROUND_PROBABILITY) * frac;
        assert!((hits - expected).abs() < 0.05, "{hits} vs {expected}");
        let centred = ps.iter().filter(|p| p.foreground_centered).count() as f64 / ps.len() as f64;
        assert!((0.45..=0.55).contains(&centred), "{centred}");
    }
}
