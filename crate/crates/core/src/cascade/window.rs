//! Sliding-window inference and multi-view probability fusion.

use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::Tensor;

/// Channel softmax of `[1, C, X, Y, Z]` logits, returned as `[C, X, Y, Z]`.
pub fn softmax(logits: &Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = logits.shape();
    if shape.len() != 5 || shape[0] != 1 {
        return Err(Error::shape(format!("softmax expects [1, C, X, Y, Z], got {shape:?}")));
    }
    let c = shape[1];
    let n = logits.spatial_len();
    let src = logits.data();
    let mut out = vec![0.0f32; c * n];
    for v in 0..n {
        let m = (0..c).map(|k| src[k * n + v]).fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0;
        for k in 0..c {
            let e = (src[k * n + v] - m).exp();
            out[k * n + v] = e;
            s += e;
        }
        for k in 0..c {
            out[k * n + v] /= s;
        }
    }
    Tensor::from_vec(&shape[1..], out)
}

/// Window origins along one axis: multiples of `stride`, with the last one
/// snapped so the window ends at the volume edge.
pub fn window_starts(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    if extent <= window {
        return vec![0];
    }
    let last = extent - window;
    let mut starts: Vec<usize> = (0..last).step_by(stride.max(1)).collect();
    starts.push(last);
    starts
}

/// Averages softmax outputs of `net` over overlapping windows of a
/// `[C, X, Y, Z]` volume. Windows larger than the volume are clamped to it.
pub fn sliding_window_infer(
    net: &Network<f32>,
    volume: &Tensor<f32>,
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<Tensor<f32>> {
    let shape = volume.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!("sliding window expects [C, X, Y, Z], got {shape:?}")));
    }
    if window.contains(&0) || stride.contains(&0) {
        return Err(Error::invalid("window and stride must be positive"));
    }
    let c = shape[0];
    let dims = [shape[1], shape[2], shape[3]];
    let n: usize = dims.iter().product();
    let win: [usize; 3] = std::array::from_fn(|i| window[i].min(dims[i]));
    let starts: [Vec<usize>; 3] = std::array::from_fn(|i| window_starts(dims[i], win[i], stride[i]));
    let wn: usize = win.iter().product();

    let mut sum: Vec<f32> = Vec::new();
    let mut count = vec![0u32; n];
    let mut classes = 0;
    let mut patch = vec![0.0f32; c * wn];
    for &ox in &starts[0] {
        for &oy in &starts[1] {
            for &oz in &starts[2] {
                for ch in 0..c {
                    for x in 0..win[0] {
                        for y in 0..win[1] {
                            let src = ch * n + ((ox + x) * dims[1] + oy + y) * dims[2] + oz;
                            let dst = ch * wn + (x * win[1] + y) * win[2];
                            patch[dst..dst + win[2]].copy_from_slice(&volume.data()[src..src + win[2]]);
                        }
                    }
                }
                let input = Tensor::from_vec(&[1, c, win[0], win[1], win[2]], patch.clone())?;
                let prob = softmax(&net.infer(&input)?)?;
                if sum.is_empty() {
                    classes = prob.shape()[0];
                    sum = vec![0.0; classes * n];
                }
                for x in 0..win[0] {
                    for y in 0..win[1] {
                        let dst = ((ox + x) * dims[1] + oy + y) * dims[2] + oz;
                        let src = (x * win[1] + y) * win[2];
                        for k in 0..classes {
                            let out = &mut sum[k * n + dst..][..win[2]];
                            for (o, p) in out.iter_mut().zip(&prob.data()[k * wn + src..][..win[2]]) {
                                *o += p;
                            }
                        }
                        for v in &mut count[dst..dst + win[2]] {
                            *v += 1;
                        }
                    }
                }
            }
        }
    }
    for k in 0..classes {
        for (s, &m) in sum[k * n..(k + 1) * n].iter_mut().zip(&count) {
            *s /= m as f32;
        }
    }
    Tensor::from_vec(&[classes, dims[0], dims[1], dims[2]], sum)
}

/// Weighted voxelwise average of per-view probability maps already in
/// canonical orientation. Views with zero weight may be `None`.
pub fn multi_view_fuse(maps: &[Option<Tensor<f32>>], weights: &[f64]) -> Result<Tensor<f32>> {
    if maps.len() != weights.len() {
        return Err(Error::invalid(format!("{} maps but {} weights", maps.len(), weights.len())));
    }
    check_weights(weights)?;
    let mut out: Option<Tensor<f32>> = None;
    for (map, &w) in maps.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let map = map.as_ref().ok_or_else(|| Error::invalid("missing map for a view with nonzero weight"))?;
        let acc = out.get_or_insert_with(|| Tensor::zeros(map.shape()));
        if acc.shape() != map.shape() {
            return Err(Error::shape(format!("fusing {:?} with {:?}", acc.shape(), map.shape())));
        }
        for (a, &p) in acc.data_mut().iter_mut().zip(map.data()) {
            *a += (w as f32) * p;
        }
    }
    out.ok_or_else(|| Error::invalid("all fusion weights are zero"))
}

pub fn check_weights(weights: &[f64]) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidConfig {
            rule: "fusion-weights",
            detail: format!("weights {weights:?} must be non-negative and sum to 1"),
        });
    }
    Ok(())
}
