//! Forward operations and their vector-Jacobian products.

use super::conv::{self, ConvGeom, KernelSpec};
use super::{Graph, Mode, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const DICE_EPS: f64 = 1e-5;

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Scalar> BatchNormState<T> {
    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels], initialized: true }
    }

    /// No statistics yet; the first train-mode pass adopts the batch
    /// statistics, infer mode is rejected until then.
    pub fn uninitialized(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels], initialized: false }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

fn dims5(shape: &[usize], what: &str) -> Result<[usize; 5]> {
    shape.try_into().map_err(|_| Error::shape(format!("{what} expects [B, C, X, Y, Z], got {shape:?}")))
}

fn channels_of(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("{what} expects [B, C, ...], got {shape:?}")));
    }
    let spatial = shape[2..].iter().product();
    Ok((shape[0], shape[1], spatial))
}

/// `Σ f(v)` with eight interleaved accumulators so the loop vectorizes.
fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let mut chunks = xs.chunks_exact(8);
    for ch in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += f(v);
        }
    }
    let mut total = chunks.remainder().iter().fold(T::zero(), |s, &v| s + f(v));
    for a in acc {
        total += a;
    }
    total
}

fn lane_sum2<T: Scalar>(xs: &[T], ys: &[T], f: impl Fn(T, T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let mut cx = xs.chunks_exact(8);
    let mut cy = ys.chunks_exact(8);
    for (a8, b8) in (&mut cx).zip(&mut cy) {
        for ((a, &u), &v) in acc.iter_mut().zip(a8).zip(b8) {
            *a += f(u, v);
        }
    }
    let mut total = cx.remainder().iter().zip(cy.remainder()).fold(T::zero(), |s, (&u, &v)| s + f(u, v));
    for a in acc {
        total += a;
    }
    total
}

impl<T: Scalar> Graph<T> {
    /// Same-padded dilated cross-correlation.
    pub fn conv(&mut self, input: Var, weight: Var, bias: Var, spec: &KernelSpec) -> Result<Var> {
        spec.validate()?;
        let [b, c, x, y, z] = dims5(self.shape(input), "conv input")?;
        let wshape = self.shape(weight).to_vec();
        let [co, wc, kx, ky, kz] = dims5(&wshape, "conv weight")?;
        if wc != c {
            return Err(Error::shape(format!("conv weight expects {wc} input channels, input has {c}")));
        }
        if [kx, ky, kz] != spec.extent {
            return Err(Error::shape(format!(
                "conv weight extent {:?} disagrees with kernel spec {:?}",
                [kx, ky, kz],
                spec.extent
            )));
        }
        if self.shape(bias) != [co] {
            return Err(Error::shape(format!("conv bias shape {:?}, expected [{co}]", self.shape(bias))));
        }
        self.value(input).ensure_finite("conv input")?;
        let geom = ConvGeom { batch: b, cin: c, cout: co, dims: [x, y, z], spec: *spec };
        let out = conv::forward(self.value(input).data(), self.value(weight).data(), self.value(bias).data(), &geom);
        let value = Tensor::from_vec(&[b, co, x, y, z], out)?;
        Ok(self.push(value, Op::Conv { input, weight, bias, spec: *spec }))
    }

    /// `max(0, x) + a·min(0, x)` with one learned slope per channel.
    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var> {
        let (b, c, n) = channels_of(self.shape(input), "prelu")?;
        if self.shape(slope) != [c] {
            return Err(Error::shape(format!("prelu slope shape {:?}, expected [{c}]", self.shape(slope))));
        }
        let a = self.value(slope).data().to_vec();
        let mut out = self.value(input).clone();
        for (k, chunk) in out.data_mut().chunks_exact_mut(n).enumerate() {
            let ak = a[k % c];
            for v in chunk {
                *v = if *v < T::zero() { *v * ak } else { *v };
            }
        }
        debug_assert_eq!(out.len(), b * c * n);
        Ok(self.push(out, Op::Prelu { input, slope }))
    }

    /// Per-channel normalization over the batch and spatial axes, followed by
    /// the affine transform `gamma·x̂ + beta`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (b, c, n) = channels_of(self.shape(input), "batch_norm")?;
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(format!("batch_norm {what} shape {:?}, expected [{c}]", self.shape(v))));
            }
        }
        if state.channels() != c {
            return Err(Error::shape(format!("batch_norm state has {} channels, input has {c}", state.channels())));
        }
        let eps = T::of(BN_EPS);
        let x = self.value(input).data();
        let (mean, inv_std) = match mode {
            Mode::Train => {
                let count = b * n;
                let cnt = T::of(count as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let plane = |bi: usize| &x[(bi * c + ch) * n..][..n];
                    let s = (0..b).fold(T::zero(), |acc, bi| acc + lane_sum(plane(bi), |v| v));
                    let m = s / cnt;
                    let ss = (0..b).fold(T::zero(), |acc, bi| acc + lane_sum(plane(bi), |v| (v - m) * (v - m)));
                    mean[ch] = m;
                    var[ch] = ss / cnt;
                }
                let unbias = if count > 1 { T::of(count as f64 / (count - 1) as f64) } else { T::one() };
                let mom = T::of(BN_MOMENTUM);
                for ch in 0..c {
                    if state.initialized {
                        state.mean[ch] = mom * state.mean[ch] + (T::one() - mom) * mean[ch];
                        state.var[ch] = mom * state.var[ch] + (T::one() - mom) * var[ch] * unbias;
                    } else {
                        state.mean[ch] = mean[ch];
                        state.var[ch] = var[ch] * unbias;
                    }
                }
                state.initialized = true;
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Infer => {
                if !state.initialized {
                    return Err(Error::UninitializedStats);
                }
                let inv = state.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (state.mean.clone(), inv)
            }
        };
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for (k, ((src, h), o)) in
            x.chunks_exact(n).zip(xhat.chunks_exact_mut(n)).zip(out.chunks_exact_mut(n)).enumerate()
        {
            let ch = k % c;
            let (m, is, gc, bc) = (mean[ch], inv_std[ch], g[ch], be[ch]);
            for ((&xv, hv), ov) in src.iter().zip(h.iter_mut()).zip(o.iter_mut()) {
                *hv = (xv - m) * is;
                *ov = gc * *hv + bc;
            }
        }
        let value = Tensor::from_vec(self.shape(input), out)?;
        Ok(self.push(value, Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats: mode == Mode::Train }))
    }

    /// 2×2×1 max pooling with stride 2×2×1. Odd in-plane extents are padded
    /// with zeros first.
    pub fn downsample2d(&mut self, input: Var) -> Result<Var> {
        let [b, c, x, y, z] = dims5(self.shape(input), "downsample2d")?;
        let (ox, oy) = (x.div_ceil(2), y.div_ceil(2));
        let src = self.value(input).data();
        let mut out = vec![T::zero(); b * c * ox * oy * z];
        let mut argmax = vec![usize::MAX; out.len()];
        for bc in 0..b * c {
            for i in 0..ox {
                for j in 0..oy {
                    for k in 0..z {
                        let mut best = T::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let (sx, sy) = (2 * i + di, 2 * j + dj);
                            let (v, idx) = if sx < x && sy < y {
                                let idx = ((bc * x + sx) * y + sy) * z + k;
                                (src[idx], idx)
                            } else {
                                (T::zero(), usize::MAX)
                            };
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                        let o = ((bc * ox + i) * oy + j) * z + k;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, ox, oy, z], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }))
    }

    /// In-plane bilinear upsampling by an integer factor (half-pixel centres,
    /// edge clamped). The out-of-plane axis is untouched.
    pub fn upsample2d(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("upsample factor must be at least 1"));
        }
        let [b, c, x, y, z] = dims5(self.shape(input), "upsample2d")?;
        let (ox, oy) = (x * factor, y * factor);
        let wx = interp_weights::<T>(x, factor);
        let wy = interp_weights::<T>(y, factor);
        let src = self.value(input).data();
        let mut out = vec![T::zero(); b * c * ox * oy * z];
        for bc in 0..b * c {
            for (i, &(x0, x1, ax0, ax1)) in wx.iter().enumerate() {
                for (j, &(y0, y1, ay0, ay1)) in wy.iter().enumerate() {
                    let o = ((bc * ox + i) * oy + j) * z;
                    let p = |sx: usize, sy: usize| ((bc * x + sx) * y + sy) * z;
                    let (p00, p01, p10, p11) = (p(x0, y0), p(x0, y1), p(x1, y0), p(x1, y1));
                    for k in 0..z {
                        out[o + k] = ax0 * (ay0 * src[p00 + k] + ay1 * src[p01 + k])
                            + ax1 * (ay0 * src[p10 + k] + ay1 * src[p11 + k]);
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, ox, oy, z], out)?;
        Ok(self.push(value, Op::Upsample { input, factor }))
    }

    /// Softmax over the channel axis at every voxel.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let (b, c, n) = channels_of(self.shape(input), "softmax_channels")?;
        if c < 2 {
            return Err(Error::shape("softmax_channels needs at least 2 channels"));
        }
        let src = self.value(input).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            let base = bi * c * n;
            for v in 0..n {
                let mut m = T::neg_infinity();
                for ch in 0..c {
                    m = m.max(src[base + ch * n + v]);
                }
                let mut s = T::zero();
                for ch in 0..c {
                    let e = (src[base + ch * n + v] - m).exp();
                    out[base + ch * n + v] = e;
                    s += e;
                }
                for ch in 0..c {
                    out[base + ch * n + v] = out[base + ch * n + v] / s;
                }
            }
        }
        let value = Tensor::from_vec(self.shape(input), out)?;
        Ok(self.push(value, Op::Softmax { input }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("add of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("mul of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// Concatenate along the channel axis in the given order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let shape0 = self.shape(*first).to_vec();
        let (b, _, n) = channels_of(&shape0, "concat_channels")?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != shape0.len() || s[0] != shape0[0] || s[2..] != shape0[2..] {
                return Err(Error::shape(format!("concat of {shape0:?} with {s:?}: non-channel extents differ")));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(b * total * n);
        for bi in 0..b {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[bi * c * n..(bi + 1) * c * n]);
            }
        }
        let mut shape = shape0;
        shape[1] = total;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    /// Zero-pad the spatial axes at their far ends up to `extents`.
    pub fn pad_spatial(&mut self, input: Var, extents: [usize; 3]) -> Result<Var> {
        let [b, c, x, y, z] = dims5(self.shape(input), "pad_spatial")?;
        if extents[0] < x || extents[1] < y || extents[2] < z {
            return Err(Error::shape(format!("cannot pad {:?} down to {extents:?}", [x, y, z])));
        }
        let [px, py, pz] = extents;
        let src = self.value(input).data();
        let mut out = vec![T::zero(); b * c * px * py * pz];
        for bc in 0..b * c {
            for i in 0..x {
                for j in 0..y {
                    let s = ((bc * x + i) * y + j) * z;
                    let d = ((bc * px + i) * py + j) * pz;
                    out[d..d + z].copy_from_slice(&src[s..s + z]);
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, px, py, pz], out)?;
        Ok(self.push(value, Op::PadSpatial { input }))
    }

    /// Keep the leading `extents` of the spatial axes.
    pub fn crop_spatial(&mut self, input: Var, extents: [usize; 3]) -> Result<Var> {
        let [b, c, x, y, z] = dims5(self.shape(input), "crop_spatial")?;
        let [cx, cy, cz] = extents;
        if cx > x || cy > y || cz > z || extents.contains(&0) {
            return Err(Error::shape(format!("cannot crop {:?} to {extents:?}", [x, y, z])));
        }
        let src = self.value(input).data();
        let mut out = vec![T::zero(); b * c * cx * cy * cz];
        for bc in 0..b * c {
            for i in 0..cx {
                for j in 0..cy {
                    let s = ((bc * x + i) * y + j) * z;
                    let d = ((bc * cx + i) * cy + j) * cz;
                    out[d..d + cz].copy_from_slice(&src[s..s + cz]);
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, cx, cy, cz], out)?;
        Ok(self.push(value, Op::CropSpatial { input }))
    }

    /// Soft Dice loss on the foreground channel of a two-channel probability
    /// map: `1 − (2·Σpg + ε) / (Σp + Σg + ε)`, pooled over the whole batch.
    ///
    /// `target` holds one 0/1 value per voxel (`[B, ...spatial]` in any shape
    /// with that element count).
    pub fn dice_loss(&mut self, prob: Var, target: &[T]) -> Result<Var> {
        let (b, c, n) = channels_of(self.shape(prob), "dice_loss")?;
        if c != 2 {
            return Err(Error::shape(format!("dice_loss expects 2 channels, got {c}")));
        }
        if target.len() != b * n {
            return Err(Error::shape(format!(
                "dice_loss target has {} voxels, prediction has {}",
                target.len(),
                b * n
            )));
        }
        let p = self.value(prob).data();
        let tol = T::of(1e-3);
        for bi in 0..b {
            for v in 0..n {
                let s = p[bi * 2 * n + v] + p[bi * 2 * n + n + v];
                if (s - T::one()).abs() > tol || p[bi * 2 * n + v] < -tol {
                    return Err(Error::invalid(format!("dice_loss input is not a probability map (channel sum {s})")));
                }
            }
        }
        let mut inter = T::zero();
        let mut psum = T::zero();
        let mut gsum = T::zero();
        for bi in 0..b {
            let fg = &p[bi * 2 * n + n..bi * 2 * n + 2 * n];
            let g = &target[bi * n..(bi + 1) * n];
            for (&pv, &gv) in fg.iter().zip(g) {
                inter += pv * gv;
                psum += pv;
                gsum += gv;
            }
        }
        let eps = T::of(DICE_EPS);
        let denom = psum + gsum + eps;
        let loss = T::one() - (T::of(2.0) * inter + eps) / denom;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::DiceLoss { prob, target: target.to_vec(), intersection: inter, denominator: denom },
        ))
    }
}

/// Per output index: `(i0, i1, w0, w1)` for half-pixel bilinear sampling.
fn interp_weights<T: Scalar>(n: usize, factor: usize) -> Vec<(usize, usize, T, T)> {
    (0..n * factor)
        .map(|i| {
            let s = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let t = s - i0 as f64;
            (i0, i1, T::of(1.0 - t), T::of(t))
        })
        .collect()
}

/// Gradients of node `i`'s parents given the gradient `g` of its output.
pub(super) fn vjp<T: Scalar>(graph: &Graph<T>, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
    let node = &graph.nodes[i];
    let out_shape = node.value.shape();
    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::Conv { input, weight, bias, spec } => {
            let ishape = graph.shape(*input);
            let [b, c, x, y, z] = dims5(ishape, "conv input")?;
            let geom = ConvGeom { batch: b, cin: c, cout: out_shape[1], dims: [x, y, z], spec: *spec };
            let gr = conv::backward(
                graph.value(*input).data(),
                graph.value(*weight).data(),
                g.data(),
                &geom,
                graph.requires_grad(*input),
            );
            let mut out = vec![
                (*weight, Tensor::from_vec(graph.shape(*weight), gr.weight)?),
                (*bias, Tensor::from_vec(graph.shape(*bias), gr.bias)?),
            ];
            if let Some(gi) = gr.input {
                out.push((*input, Tensor::from_vec(ishape, gi)?));
            }
            out
        }
        Op::Prelu { input, slope } => {
            let (_, c, n) = channels_of(out_shape, "prelu")?;
            let x = graph.value(*input).data();
            let a = graph.value(*slope).data();
            let mut gx = vec![T::zero(); x.len()];
            let mut ga = vec![T::zero(); c];
            for (k, ((xs, gs), gxs)) in
                x.chunks_exact(n).zip(g.data().chunks_exact(n)).zip(gx.chunks_exact_mut(n)).enumerate()
            {
                let ch = k % c;
                let ak = a[ch];
                for ((&xv, &gv), o) in xs.iter().zip(gs).zip(gxs.iter_mut()) {
                    *o = if xv > T::zero() { gv } else { gv * ak };
                }
                ga[ch] += lane_sum2(xs, gs, |xv, gv| gv * xv.min(T::zero()));
            }
            vec![(*input, Tensor::from_vec(out_shape, gx)?), (*slope, Tensor::from_vec(&[c], ga)?)]
        }
        Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
            let (b, c, n) = channels_of(out_shape, "batch_norm")?;
            let gam = graph.value(*gamma).data();
            let gy = g.data();
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for (k, (gs, hs)) in gy.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                gg[k % c] += lane_sum2(gs, hs, |a, b| a * b);
                gb[k % c] += lane_sum2(gs, hs, |a, _| a);
            }
            let mut gx = vec![T::zero(); gy.len()];
            let cnt = T::of((b * n) as f64);
            for (k, ((gs, hs), o)) in
                gy.chunks_exact(n).zip(xhat.chunks_exact(n)).zip(gx.chunks_exact_mut(n)).enumerate()
            {
                let ch = k % c;
                let scale = gam[ch] * inv_std[ch];
                if *batch_stats {
                    // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                    let (mg, mgh) = (gb[ch] / cnt, gg[ch] / cnt);
                    for ((&gv, &hv), ov) in gs.iter().zip(hs).zip(o.iter_mut()) {
                        *ov = scale * (gv - mg - hv * mgh);
                    }
                } else {
                    for (&gv, ov) in gs.iter().zip(o.iter_mut()) {
                        *ov = scale * gv;
                    }
                }
            }
            vec![
                (*input, Tensor::from_vec(out_shape, gx)?),
                (*gamma, Tensor::from_vec(&[c], gg)?),
                (*beta, Tensor::from_vec(&[c], gb)?),
            ]
        }
        Op::MaxPool { input, argmax } => {
            let ishape = graph.shape(*input);
            let mut gx = Tensor::zeros(ishape);
            let d = gx.data_mut();
            for (&idx, &gv) in argmax.iter().zip(g.data()) {
                if idx != usize::MAX {
                    d[idx] += gv;
                }
            }
            vec![(*input, gx)]
        }
        Op::Upsample { input, factor } => {
            let ishape = graph.shape(*input);
            let [b, c, x, y, z] = dims5(ishape, "upsample2d")?;
            let (ox, oy) = (x * factor, y * factor);
            let wx = interp_weights::<T>(x, *factor);
            let wy = interp_weights::<T>(y, *factor);
            let gy = g.data();
            let mut gx = Tensor::zeros(ishape);
            let d = gx.data_mut();
            for bc in 0..b * c {
                for (i, &(x0, x1, ax0, ax1)) in wx.iter().enumerate() {
                    for (j, &(y0, y1, ay0, ay1)) in wy.iter().enumerate() {
                        let o = ((bc * ox + i) * oy + j) * z;
                        let p = |sx: usize, sy: usize| ((bc * x + sx) * y + sy) * z;
                        for k in 0..z {
                            let v = gy[o + k];
                            d[p(x0, y0) + k] += ax0 * ay0 * v;
                            d[p(x0, y1) + k] += ax0 * ay1 * v;
                            d[p(x1, y0) + k] += ax1 * ay0 * v;
                            d[p(x1, y1) + k] += ax1 * ay1 * v;
                        }
                    }
                }
            }
            vec![(*input, gx)]
        }
        Op::Softmax { input } => {
            let (b, c, n) = channels_of(out_shape, "softmax_channels")?;
            let y = node.value.data();
            let gy = g.data();
            let mut gx = vec![T::zero(); y.len()];
            for bi in 0..b {
                let base = bi * c * n;
                for v in 0..n {
                    let mut dotp = T::zero();
                    for ch in 0..c {
                        dotp += y[base + ch * n + v] * gy[base + ch * n + v];
                    }
                    for ch in 0..c {
                        let k = base + ch * n + v;
                        gx[k] = y[k] * (gy[k] - dotp);
                    }
                }
            }
            vec![(*input, Tensor::from_vec(out_shape, gx)?)]
        }
        Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Mul { a, b } => {
            let prod = |o: Var| -> Result<Tensor<T>> {
                let data = g.data().iter().zip(graph.value(o).data()).map(|(&p, &q)| p * q).collect();
                Tensor::from_vec(out_shape, data)
            };
            vec![(*a, prod(*b)?), (*b, prod(*a)?)]
        }
        Op::Concat { parts } => {
            let (b, _, n) = channels_of(out_shape, "concat_channels")?;
            let total = out_shape[1];
            let mut res = Vec::with_capacity(parts.len());
            let mut offset = 0;
            for &p in parts {
                let c = graph.shape(p)[1];
                let mut data = Vec::with_capacity(b * c * n);
                for bi in 0..b {
                    let s = (bi * total + offset) * n;
                    data.extend_from_slice(&g.data()[s..s + c * n]);
                }
                res.push((p, Tensor::from_vec(graph.shape(p), data)?));
                offset += c;
            }
            res
        }
        Op::Sum { input } => {
            let gv = g.data()[0];
            vec![(*input, Tensor::full(graph.shape(*input), gv))]
        }
        Op::PadSpatial { input } => {
            let ishape = graph.shape(*input);
            let [b, c, x, y, z] = dims5(ishape, "pad_spatial")?;
            let [_, _, px, py, pz] = dims5(out_shape, "pad_spatial")?;
            let mut gx = vec![T::zero(); b * c * x * y * z];
            for bc in 0..b * c {
                for i in 0..x {
                    for j in 0..y {
                        let d = ((bc * x + i) * y + j) * z;
                        let s = ((bc * px + i) * py + j) * pz;
                        gx[d..d + z].copy_from_slice(&g.data()[s..s + z]);
                    }
                }
            }
            vec![(*input, Tensor::from_vec(ishape, gx)?)]
        }
        Op::CropSpatial { input } => {
            let ishape = graph.shape(*input);
            let [b, c, x, y, z] = dims5(ishape, "crop_spatial")?;
            let [_, _, cx, cy, cz] = dims5(out_shape, "crop_spatial")?;
            let mut gx = vec![T::zero(); b * c * x * y * z];
            for bc in 0..b * c {
                for i in 0..cx {
                    for j in 0..cy {
                        let s = ((bc * cx + i) * cy + j) * cz;
                        let d = ((bc * x + i) * y + j) * z;
                        gx[d..d + cz].copy_from_slice(&g.data()[s..s + cz]);
                    }
                }
            }
            vec![(*input, Tensor::from_vec(ishape, gx)?)]
        }
        Op::DiceLoss { prob, target, intersection, denominator } => {
            let pshape = graph.shape(*prob);
            let (b, _, n) = channels_of(pshape, "dice_loss")?;
            let gl = g.data()[0];
            let two = T::of(2.0);
            let num = two * *intersection + T::of(DICE_EPS);
            let d2 = *denominator * *denominator;
            let mut gp = vec![T::zero(); b * 2 * n];
            for bi in 0..b {
                for v in 0..n {
                    let tg = target[bi * n + v];
                    gp[bi * 2 * n + n + v] = -gl * (two * tg * *denominator - num) / d2;
                }
            }
            vec![(*prob, Tensor::from_vec(pshape, gp)?)]
        }
    })
}
