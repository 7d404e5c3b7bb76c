//! Multi-modality volumes, label maps, the AVOL container, normalization,
//! synthetic phantoms and patch sampling.

mod avol;
mod norm;
mod patches;
mod phantom;

use std::fmt;
use std::str::FromStr;

pub use avol::{read_avol, write_avol, Avol, AvolHeader, Payload, AVOL_MAGIC};
pub use norm::{compute_norm_stats, normalize, NormStats};
pub use patches::{sample_patches, Patch, PatchSampler, FOREGROUND_PROBABILITY};
pub use phantom::{phantom_generate, PhantomParams, TISSUES};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

/// Modality channel names in storage order.
pub const MODALITIES: [&str; 4] = ["t1", "t1c", "t2", "flair"];

/// Label values: background, non-enhancing core, edema, enhancing core.
pub const LABELS: [u8; 4] = [0, 1, 2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegionId {
    /// Whole tumor: labels {1, 2, 4}.
    WT,
    /// Tumor core: labels {1, 4}.
    TC,
    /// Enhancing core: label 4.
    EN,
}

impl RegionId {
    pub const ALL: [RegionId; 3] = [RegionId::WT, RegionId::TC, RegionId::EN];

    pub fn contains(self, label: u8) -> bool {
        match self {
            RegionId::WT => label != 0,
            RegionId::TC => label == 1 || label == 4,
            RegionId::EN => label == 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RegionId::WT => "WT",
            RegionId::TC => "TC",
            RegionId::EN => "EN",
        }
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "WT" => Ok(RegionId::WT),
            "TC" => Ok(RegionId::TC),
            "EN" | "ET" => Ok(RegionId::EN),
            other => Err(Error::invalid(format!("unknown region `{other}`"))),
        }
    }
}

/// Integer label volume over `[x, y, z]`, values in {0, 1, 2, 4}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() || dims.contains(&0) {
            return Err(Error::shape(format!("label map {dims:?} with {} voxels", data.len())));
        }
        if let Some(&bad) = data.iter().find(|v| !LABELS.contains(v)) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0; dims.iter().product()] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, [x, y, z]: [usize; 3]) -> u8 {
        self.data[(x * self.dims[1] + y) * self.dims[2] + z]
    }

    pub fn binarize(&self, region: RegionId) -> BinaryMask {
        BinaryMask::new(self.dims, self.data.iter().map(|&l| region.contains(l)).collect())
            .expect("dims match by construction")
    }

    /// Labels from nested masks: `WT\TC → 2`, `TC\EN → 1`, `EN → 4`.
    /// Inner masks are intersected with the outer ones first.
    pub fn from_masks(wt: &BinaryMask, tc: &BinaryMask, en: &BinaryMask) -> Result<Self> {
        if wt.dims() != tc.dims() || wt.dims() != en.dims() {
            return Err(Error::shape("label masks differ in shape"));
        }
        let data = wt
            .data()
            .iter()
            .zip(tc.data())
            .zip(en.data())
            .map(|((&w, &t), &e)| match (w, w && t, w && t && e) {
                (_, _, true) => 4,
                (_, true, _) => 1,
                (true, _, _) => 2,
                _ => 0,
            })
            .collect();
        Ok(Self { dims: wt.dims(), data })
    }

    /// Whether `EN ⊆ TC ⊆ WT` under [`LabelMap::binarize`].
    pub fn is_nested(&self) -> bool {
        // Holds for every valid label map; checked through the masks so it
        // tests the region definitions rather than assuming them.
        let [wt, tc, en] = RegionId::ALL.map(|r| self.binarize(r));
        en.data().iter().zip(tc.data()).all(|(&e, &t)| !e || t)
            && tc.data().iter().zip(wt.data()).all(|(&t, &w)| !t || w)
    }
}

/// Co-registered modalities over `[c, x, y, z]` (z fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSet {
    dims: [usize; 3],
    channels: usize,
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl VolumeSet {
    pub fn new(dims: [usize; 3], channels: usize, data: Vec<f32>) -> Result<Self> {
        Self::with_spacing(dims, channels, [1.0; 3], data)
    }

    pub fn with_spacing(dims: [usize; 3], channels: usize, spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if channels == 0 || dims.contains(&0) || channels * dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("volume {dims:?} × {channels} channels with {} values", data.len())));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Self { dims, channels, spacing, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}
