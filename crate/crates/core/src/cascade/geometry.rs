//! Bounding boxes, cropping, crisp masks and view permutations.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::volume::{LabelMap, RegionId, VolumeSet};

/// Binary mask of `region` under the label hierarchy.
pub fn binarize_region(labels: &LabelMap, region: RegionId) -> BinaryMask {
    labels.binarize(region)
}

/// Inclusive voxel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn full(dims: [usize; 3]) -> Self {
        Self { min: [0; 3], max: dims.map(|d| d - 1) }
    }

    pub fn extents(&self) -> [usize; 3] {
        std::array::from_fn(|i| self.max[i] - self.min[i] + 1)
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|i| (self.min[i]..=self.max[i]).contains(&p[i]))
    }

    pub fn fits(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|i| self.min[i] <= self.max[i] && self.max[i] < dims[i])
    }

    fn check(&self, dims: [usize; 3]) -> Result<()> {
        if self.fits(dims) {
            Ok(())
        } else {
            Err(Error::shape(format!("box {self} exceeds extents {dims:?}")))
        }
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{},{}]x[{},{}]x[{},{}]",
            self.min[0], self.max[0], self.min[1], self.max[1], self.min[2], self.max[2]
        )
    }
}

/// Tight box around the positives grown by `margin` and clipped to the
/// volume; `None` for an empty mask.
pub fn bbox_of_mask(mask: &BinaryMask, margin: [usize; 3]) -> Option<BoundingBox> {
    let dims = mask.dims();
    let mut min = dims;
    let mut max = [0; 3];
    let mut any = false;
    for (i, _) in mask.data().iter().enumerate().filter(|(_, &m)| m) {
        let p = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
        any = true;
    }
    any.then(|| BoundingBox {
        min: std::array::from_fn(|a| min[a].saturating_sub(margin[a])),
        max: std::array::from_fn(|a| (max[a] + margin[a]).min(dims[a] - 1)),
    })
}

/// Copies the box out of channel-major `[c, x, y, z]` data.
pub fn crop_data<T: Copy>(data: &[T], channels: usize, dims: [usize; 3], bbox: &BoundingBox) -> Result<Vec<T>> {
    bbox.check(dims)?;
    let n: usize = dims.iter().product();
    if data.len() != channels * n {
        return Err(Error::shape(format!("{} values for {channels} x {dims:?}", data.len())));
    }
    let [bx, by, bz] = bbox.extents();
    let mut out = Vec::with_capacity(channels * bx * by * bz);
    for c in 0..channels {
        for x in bbox.min[0]..=bbox.max[0] {
            for y in bbox.min[1]..=bbox.max[1] {
                let start = c * n + (x * dims[1] + y) * dims[2] + bbox.min[2];
                out.extend_from_slice(&data[start..start + bz]);
            }
        }
    }
    Ok(out)
}

/// Re-embeds cropped data into `dims`, writing `fill` outside the box.
pub fn uncrop_data<T: Copy>(
    data: &[T],
    channels: usize,
    bbox: &BoundingBox,
    dims: [usize; 3],
    fill: T,
) -> Result<Vec<T>> {
    bbox.check(dims)?;
    let [bx, by, bz] = bbox.extents();
    if data.len() != channels * bx * by * bz {
        return Err(Error::shape(format!("{} values for box {bbox}", data.len())));
    }
    let n: usize = dims.iter().product();
    let mut out = vec![fill; channels * n];
    let mut src = data.chunks_exact(bz);
    for c in 0..channels {
        for x in bbox.min[0]..=bbox.max[0] {
            for y in bbox.min[1]..=bbox.max[1] {
                let start = c * n + (x * dims[1] + y) * dims[2] + bbox.min[2];
                out[start..start + bz].copy_from_slice(src.next().expect("length checked"));
            }
        }
    }
    Ok(out)
}

pub fn crop_volume(volume: &VolumeSet, bbox: &BoundingBox) -> Result<VolumeSet> {
    let data = crop_data(volume.data(), volume.channels(), volume.dims(), bbox)?;
    VolumeSet::with_spacing(bbox.extents(), volume.channels(), volume.spacing(), data)
}

pub fn crop_mask(mask: &BinaryMask, bbox: &BoundingBox) -> Result<BinaryMask> {
    BinaryMask::with_spacing(bbox.extents(), mask.spacing(), crop_data(mask.data(), 1, mask.dims(), bbox)?)
}

pub fn uncrop_mask(mask: &BinaryMask, bbox: &BoundingBox, dims: [usize; 3]) -> Result<BinaryMask> {
    if mask.dims() != bbox.extents() {
        return Err(Error::shape(format!("mask {:?} does not match box {bbox}", mask.dims())));
    }
    BinaryMask::with_spacing(dims, mask.spacing(), uncrop_data(mask.data(), 1, bbox, dims, false)?)
}

/// Voxelwise AND: the inner mask restricted to the outer one.
pub fn apply_crisp_mask(inner: &BinaryMask, outer: &BinaryMask) -> Result<BinaryMask> {
    if inner.dims() != outer.dims() {
        return Err(Error::shape(format!("crisp mask {:?} against {:?}", outer.dims(), inner.dims())));
    }
    let data = inner.data().iter().zip(outer.data()).map(|(&a, &b)| a && b).collect();
    BinaryMask::with_spacing(inner.dims(), inner.spacing(), data)
}

/// Slice orientation; the view's out-of-plane axis is placed last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViewId {
    Axial,
    Sagittal,
    Coronal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ToView,
    ToCanonical,
}

impl ViewId {
    pub const ALL: [ViewId; 3] = [ViewId::Axial, ViewId::Sagittal, ViewId::Coronal];

    /// View axis `i` is canonical axis `perm()[i]`.
    pub fn perm(self) -> [usize; 3] {
        match self {
            ViewId::Axial => [0, 1, 2],
            ViewId::Sagittal => [1, 2, 0],
            ViewId::Coronal => [0, 2, 1],
        }
    }

    fn inverse(self) -> [usize; 3] {
        let p = self.perm();
        let mut inv = [0; 3];
        for (i, &a) in p.iter().enumerate() {
            inv[a] = i;
        }
        inv
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ViewId::Axial => "axial",
            ViewId::Sagittal => "sagittal",
            ViewId::Coronal => "coronal",
        }
    }

    /// Spatial extents after the transform.
    pub fn dims(self, dims: [usize; 3], dir: Direction) -> [usize; 3] {
        let p = self.axes(dir);
        p.map(|a| dims[a])
    }

    fn axes(self, dir: Direction) -> [usize; 3] {
        match dir {
            Direction::ToView => self.perm(),
            Direction::ToCanonical => self.inverse(),
        }
    }

    /// Permutes channel-major `[c, x, y, z]` data; returns the new extents.
    pub fn transform<T: Copy>(
        self,
        data: &[T],
        channels: usize,
        dims: [usize; 3],
        dir: Direction,
    ) -> ([usize; 3], Vec<T>) {
        let p = self.axes(dir);
        let out_dims = p.map(|a| dims[a]);
        if self == ViewId::Axial {
            return (out_dims, data.to_vec());
        }
        let src_strides = [dims[1] * dims[2], dims[2], 1];
        let s = p.map(|a| src_strides[a]);
        let n: usize = dims.iter().product();
        let mut out = Vec::with_capacity(data.len());
        for c in 0..channels {
            let base = &data[c * n..(c + 1) * n];
            for i in 0..out_dims[0] {
                for j in 0..out_dims[1] {
                    let row = i * s[0] + j * s[1];
                    out.extend((0..out_dims[2]).map(|k| base[row + k * s[2]]));
                }
            }
        }
        (out_dims, out)
    }

    pub fn transform_volume(self, volume: &VolumeSet, dir: Direction) -> VolumeSet {
        let (dims, data) = self.transform(volume.data(), volume.channels(), volume.dims(), dir);
        let sp = volume.spacing();
        let spacing = self.axes(dir).map(|a| sp[a]);
        VolumeSet::with_spacing(dims, volume.channels(), spacing, data).expect("permutation keeps the shape valid")
    }

    pub fn transform_mask(self, mask: &BinaryMask, dir: Direction) -> BinaryMask {
        let (dims, data) = self.transform(mask.data(), 1, mask.dims(), dir);
        let sp = mask.spacing();
        BinaryMask::with_spacing(dims, self.axes(dir).map(|a| sp[a]), data).expect("permutation keeps the shape valid")
    }

    pub fn transform_labels(self, labels: &LabelMap, dir: Direction) -> LabelMap {
        let (dims, data) = self.transform(labels.data(), 1, labels.dims(), dir);
        LabelMap::new(dims, data).expect("permutation keeps labels valid")
    }
}

impl fmt::Display for ViewId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "axial" => Ok(ViewId::Axial),
            "sagittal" => Ok(ViewId::Sagittal),
            "coronal" => Ok(ViewId::Coronal),
            other => Err(Error::invalid(format!("unknown view `{other}`"))),
        }
    }
}
