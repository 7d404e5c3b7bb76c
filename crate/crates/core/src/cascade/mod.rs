//! The three-stage cascade: whole tumor, then tumor core inside its box, then
//! enhancing core inside that, each fused over three views.

mod geometry;
mod window;

use std::sync::Arc;

pub use geometry::{
    apply_crisp_mask, bbox_of_mask, binarize_region, crop_data, crop_mask, crop_volume, uncrop_data, uncrop_mask,
    BoundingBox, Direction, ViewId,
};
pub use window::{check_weights, multi_view_fuse, sliding_window_infer, softmax, window_starts};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::net::{NetKind, Network};
use crate::tensor::Tensor;
use crate::volume::{LabelMap, NormStats, RegionId, VolumeSet};

/// Crop margin around a bounding box: in-plane, in-plane, out-of-plane.
pub const DEFAULT_MARGIN: [usize; 3] = [5, 5, 3];
/// Window overlap: in-plane, in-plane, out-of-plane.
pub const DEFAULT_OVERLAP: [usize; 3] = [16, 16, 8];
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Region segmented by each stage.
pub fn stage_region(kind: NetKind) -> RegionId {
    match kind {
        NetKind::WNet => RegionId::WT,
        NetKind::TNet => RegionId::TC,
        NetKind::ENet => RegionId::EN,
    }
}

/// Default sliding window per stage, in view orientation.
pub fn default_window(kind: NetKind) -> [usize; 3] {
    match kind {
        NetKind::WNet => [64, 64, 19],
        NetKind::TNet => [48, 48, 19],
        NetKind::ENet => [32, 32, 19],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeParams {
    pub threshold: f64,
    /// Applied in canonical orientation.
    pub margin: [usize; 3],
    /// Per stage, in view orientation.
    pub windows: [[usize; 3]; 3],
    pub overlap: [usize; 3],
    /// Worker threads for the views of one stage.
    pub threads: usize,
}

impl Default for CascadeParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            margin: DEFAULT_MARGIN,
            windows: NetKind::ALL.map(default_window),
            overlap: DEFAULT_OVERLAP,
            threads: 1,
        }
    }
}

impl CascadeParams {
    pub fn stride(&self, stage: usize) -> [usize; 3] {
        std::array::from_fn(|i| self.windows[stage][i].saturating_sub(self.overlap[i]).max(1))
    }
}

/// One trained network with the statistics its inputs were normalized with.
#[derive(Clone, Debug)]
pub struct StageModel {
    pub network: Arc<Network<f32>>,
    pub norm: Option<NormStats>,
}

/// Nine networks indexed `[stage][view]` plus per-stage fusion weights.
#[derive(Clone, Debug)]
pub struct CascadeModels {
    models: Vec<Vec<StageModel>>,
    fusion: [[f64; 3]; 3],
}

impl CascadeModels {
    /// Every `(stage, view)` pair must be present exactly once.
    pub fn new(entries: Vec<(NetKind, ViewId, StageModel)>, fusion: [[f64; 3]; 3]) -> Result<Self> {
        let mut slots: Vec<Vec<Option<StageModel>>> = vec![vec![None, None, None]; 3];
        for (kind, view, model) in entries {
            if model.network.config().kind != kind {
                return Err(Error::invalid(format!(
                    "{} model supplied for the {kind} stage",
                    model.network.config().kind
                )));
            }
            let slot = &mut slots[kind as usize][view.index()];
            if slot.is_some() {
                return Err(Error::invalid(format!("duplicate model for {kind}/{view}")));
            }
            *slot = Some(model);
        }
        for w in &fusion {
            check_weights(w)?;
        }
        let mut models = Vec::with_capacity(3);
        for (kind, row) in NetKind::ALL.into_iter().zip(slots) {
            let mut views = Vec::with_capacity(3);
            for (view, m) in ViewId::ALL.into_iter().zip(row) {
                views.push(m.ok_or_else(|| Error::MissingModel(format!("{kind}/{view}")))?);
            }
            models.push(views);
        }
        Ok(Self { models, fusion })
    }

    pub fn get(&self, kind: NetKind, view: ViewId) -> &StageModel {
        &self.models[kind as usize][view.index()]
    }

    pub fn fusion(&self) -> [[f64; 3]; 3] {
        self.fusion
    }

    /// Same models with different fusion weights.
    pub fn with_fusion(&self, fusion: [[f64; 3]; 3]) -> Result<Self> {
        for w in &fusion {
            check_weights(w)?;
        }
        Ok(Self { models: self.models.clone(), fusion })
    }

    /// The statistics shared by all nine models; `None` if any lacks them.
    pub fn norm_stats(&self) -> Result<Option<NormStats>> {
        let first = self.models[0][0].norm.clone();
        for m in self.models.iter().flatten() {
            if m.norm != first {
                if m.norm.is_none() || first.is_none() {
                    return Ok(None);
                }
                return Err(Error::invalid("models were trained with different normalization statistics"));
            }
        }
        Ok(first)
    }
}

/// Fused foreground probability of one stage over `volume` (canonical).
pub fn stage_probability(
    models: &CascadeModels,
    kind: NetKind,
    volume: &VolumeSet,
    params: &CascadeParams,
) -> Result<Vec<f32>> {
    let stage = kind as usize;
    let weights = models.fusion[stage];
    let window = params.windows[stage];
    let stride = params.stride(stage);
    let run_view = |view: ViewId| -> Result<Tensor<f32>> {
        let v = view.transform_volume(volume, Direction::ToView);
        let [x, y, z] = v.dims();
        let input = Tensor::from_vec(&[v.channels(), x, y, z], v.into_data())?;
        let prob = sliding_window_infer(&models.get(kind, view).network, &input, window, stride)?;
        let classes = prob.shape()[0];
        let (dims, data) = view.transform(prob.data(), classes, [x, y, z], Direction::ToCanonical);
        Tensor::from_vec(&[classes, dims[0], dims[1], dims[2]], data)
    };
    let active: Vec<ViewId> = ViewId::ALL.into_iter().filter(|v| weights[v.index()] > 0.0).collect();
    let mut maps: Vec<Option<Tensor<f32>>> = vec![None, None, None];
    if params.threads > 1 && active.len() > 1 {
        let results: Vec<(ViewId, Result<Tensor<f32>>)> = std::thread::scope(|s| {
            let handles: Vec<_> = active.iter().map(|&v| (v, s.spawn(move || run_view(v)))).collect();
            handles.into_iter().map(|(v, h)| (v, h.join().expect("view worker panicked"))).collect()
        });
        for (v, r) in results {
            maps[v.index()] = Some(r?);
        }
    } else {
        for &v in &active {
            maps[v.index()] = Some(run_view(v)?);
        }
    }
    let fused = multi_view_fuse(&maps, &weights)?;
    let n = volume.voxels();
    Ok(fused.data()[n..2 * n].to_vec())
}

/// Labels and the fused foreground probability of each stage that ran,
/// uncropped to the full volume.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput {
    pub labels: LabelMap,
    pub probabilities: [Option<Vec<f32>>; 3],
}

fn threshold(prob: &[f32], dims: [usize; 3], t: f64) -> BinaryMask {
    BinaryMask::new(dims, prob.iter().map(|&p| p as f64 > t).collect()).expect("length matches dims")
}

/// Segments a normalized volume; the output nests by construction.
pub fn run_cascade_detailed(
    models: &CascadeModels,
    volume: &VolumeSet,
    params: &CascadeParams,
) -> Result<CascadeOutput> {
    let dims = volume.dims();
    let mut probabilities = [None, None, None];
    let wt_prob = stage_probability(models, NetKind::WNet, volume, params)?;
    let wt = threshold(&wt_prob, dims, params.threshold);
    probabilities[0] = Some(wt_prob);
    let empty = BinaryMask::empty(dims);

    let mut inner = |kind: NetKind, outer: &BinaryMask| -> Result<BinaryMask> {
        let Some(bbox) = bbox_of_mask(outer, params.margin) else {
            return Ok(empty.clone());
        };
        let crop = crop_volume(volume, &bbox)?;
        let prob = stage_probability(models, kind, &crop, params)?;
        let prob = uncrop_data(&prob, 1, &bbox, dims, 0.0)?;
        let mask = threshold(&prob, dims, params.threshold);
        probabilities[kind as usize] = Some(prob);
        apply_crisp_mask(&mask, outer)
    };
    let tc = inner(NetKind::TNet, &wt)?;
    let en = inner(NetKind::ENet, &tc)?;
    Ok(CascadeOutput { labels: LabelMap::from_masks(&wt, &tc, &en)?, probabilities })
}

pub fn run_cascade(models: &CascadeModels, volume: &VolumeSet, params: &CascadeParams) -> Result<LabelMap> {
    Ok(run_cascade_detailed(models, volume, params)?.labels)
}
