//! Same-padded dilated 3D cross-correlation.
//!
//! Output `[co, x]` rows are computed by a direct kernel that walks a
//! y/z-padded copy of the input, `LANES` positions and `CO_BLOCK` output
//! channels at a time. The input gradient reuses the same kernel with the
//! adjoint weights (channels swapped, taps mirrored).

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Kernel geometry for [`crate::autodiff::Graph::conv`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KernelSpec {
    pub extent: [usize; 3],
    pub dilation: [usize; 3],
    /// Always 1: the convolution is size-preserving.
    pub stride: [usize; 3],
}

impl KernelSpec {
    /// General odd kernel with zero same-padding.
    pub fn new(extent: [usize; 3], dilation: [usize; 3]) -> Result<Self> {
        let spec = Self { extent, dilation, stride: [1; 3] };
        spec.validate()?;
        Ok(spec)
    }

    /// In-plane 3×3×1 kernel with the given in-plane dilation.
    pub fn intra_slice(dilation: usize) -> Result<Self> {
        Self::aniso_dilation(dilation)?;
        Self::new([3, 3, 1], [dilation, dilation, 1])
    }

    /// Out-of-plane 1×1×3 kernel.
    pub fn inter_slice(dilation: usize) -> Result<Self> {
        Self::aniso_dilation(dilation)?;
        Self::new([1, 1, 3], [1, 1, dilation])
    }

    fn aniso_dilation(d: usize) -> Result<()> {
        if (1..=3).contains(&d) {
            Ok(())
        } else {
            Err(Error::invalid(format!("dilation {d} outside 1..=3")))
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.extent[a] == 0 || self.extent[a] % 2 == 0 {
                return Err(Error::invalid(format!("kernel extent {:?} must be odd on every axis", self.extent)));
            }
            if self.dilation[a] == 0 {
                return Err(Error::invalid("dilation must be at least 1"));
            }
            if self.stride[a] != 1 {
                return Err(Error::invalid("same-size convolution requires unit stride"));
            }
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.extent.iter().product()
    }

    /// Zero padding on each side of every axis.
    pub fn padding(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| (self.extent[a] - 1) / 2 * self.dilation[a])
    }

    pub fn is_intra_slice(&self) -> bool {
        self.extent[2] == 1
    }

    pub fn is_inter_slice(&self) -> bool {
        self.extent[0] == 1 && self.extent[1] == 1
    }
}

/// Geometry shared by the forward and backward passes.
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub dims: [usize; 3],
    pub spec: KernelSpec,
}

impl ConvGeom {
    fn voxels(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Output channels computed together by the direct kernel.
const CO_BLOCK: usize = 4;
/// Output positions computed together by the direct kernel.
const LANES: usize = 32;

/// Input of one batch item laid out for the direct kernel: zero padded in
/// `y` and `z`, one `(channel, x)` plane per `plane_stride` elements, with
/// slack after the last plane so full-width lane loads stay in bounds.
struct PaddedItem<T> {
    data: Vec<T>,
    zp: usize,
    plane_stride: usize,
}

impl<T: Scalar> PaddedItem<T> {
    fn new(item: &[T], channels: usize, dims: [usize; 3], pad: [usize; 3]) -> Self {
        let [x_n, y_n, z_n] = dims;
        let yp = y_n + 2 * pad[1];
        let zp = z_n + 2 * pad[2];
        let plane_stride = yp * zp;
        let mut data = vec![T::zero(); channels * x_n * plane_stride + 2 * LANES];
        for c in 0..channels {
            for x in 0..x_n {
                for y in 0..y_n {
                    let s = ((c * x_n + x) * y_n + y) * z_n;
                    let d = (c * x_n + x) * plane_stride + (y + pad[1]) * zp + pad[2];
                    data[d..d + z_n].copy_from_slice(&item[s..s + z_n]);
                }
            }
        }
        Self { data, zp, plane_stride }
    }
}

/// Weights regrouped as `[co_block][ci][tap][CO_BLOCK]`, zero-filled past `cout`.
fn block_weights<T: Scalar>(weight: &[T], cout: usize, cin: usize, taps: usize) -> Vec<T> {
    let blocks = cout.div_ceil(CO_BLOCK);
    let mut out = vec![T::zero(); blocks * cin * taps * CO_BLOCK];
    for co in 0..cout {
        let (cb, c) = (co / CO_BLOCK, co % CO_BLOCK);
        for ci in 0..cin {
            for t in 0..taps {
                out[((cb * cin + ci) * taps + t) * CO_BLOCK + c] = weight[(co * cin + ci) * taps + t];
            }
        }
    }
    out
}

/// One `CO_BLOCK × LANES` output tile: `out[c][l] = Σ w[wo + c] · data[base + off + l]`
/// over the `(off, wo)` tap list.
fn tile_generic<T: Scalar>(data: &[T], base: usize, taps: &[(usize, usize)], w: &[T]) -> [[T; LANES]; CO_BLOCK] {
    let mut acc = [[T::zero(); LANES]; CO_BLOCK];
    for &(off, wo) in taps {
        let v = &data[base + off..base + off + LANES];
        for c in 0..CO_BLOCK {
            let wc = w[wo + c];
            for (a, &x) in acc[c].iter_mut().zip(v) {
                *a += wc * x;
            }
        }
    }
    acc
}

/// Taps whose weight gradients are accumulated in one pass.
const TAP_BLOCK: usize = 3;

/// `out[c][j] = Σ_p g[c·stride + p] · data[base + offs[j] + p]` for `p < len`.
fn wgrad_generic<T: Scalar>(
    g: &[T],
    stride: usize,
    data: &[T],
    base: usize,
    offs: &[usize],
    len: usize,
) -> [[T; TAP_BLOCK]; CO_BLOCK] {
    let mut out = [[T::zero(); TAP_BLOCK]; CO_BLOCK];
    for (c, row) in out.iter_mut().enumerate() {
        let gc = &g[c * stride..c * stride + len];
        for (j, &off) in offs.iter().enumerate() {
            let d = &data[base + off..base + off + len];
            row[j] = gc.iter().zip(d).fold(T::zero(), |s, (&a, &b)| s + a * b);
        }
    }
    out
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    use super::{CO_BLOCK, LANES, TAP_BLOCK};

    /// AVX2/FMA version of `tile_generic` for `f32`, as two 16-lane halves.
    ///
    /// # Safety
    /// Requires AVX2 and FMA; every `base + off + LANES` must lie within
    /// `data` and every `wo + CO_BLOCK` within `w`.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn tile_f32(data: &[f32], base: usize, taps: &[(usize, usize)], w: &[f32]) -> [[f32; LANES]; CO_BLOCK] {
        let mut out = [[0.0f32; LANES]; CO_BLOCK];
        for half in 0..LANES / 16 {
            half_tile(data, base + 16 * half, taps, w, &mut out, 16 * half);
        }
        out
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn half_tile(
        data: &[f32],
        base: usize,
        taps: &[(usize, usize)],
        w: &[f32],
        out: &mut [[f32; LANES]; CO_BLOCK],
        col: usize,
    ) {
        let d = data.as_ptr().add(base);
        let wp = w.as_ptr();
        let mut a0 = _mm256_setzero_ps();
        let mut a1 = _mm256_setzero_ps();
        let mut a2 = _mm256_setzero_ps();
        let mut a3 = _mm256_setzero_ps();
        let mut a4 = _mm256_setzero_ps();
        let mut a5 = _mm256_setzero_ps();
        let mut a6 = _mm256_setzero_ps();
        let mut a7 = _mm256_setzero_ps();
        for &(off, wo) in taps {
            let p = d.add(off);
            let v0 = _mm256_loadu_ps(p);
            let v1 = _mm256_loadu_ps(p.add(8));
            let wq = wp.add(wo);
            let w0 = _mm256_broadcast_ss(&*wq);
            a0 = _mm256_fmadd_ps(w0, v0, a0);
            a1 = _mm256_fmadd_ps(w0, v1, a1);
            let w1 = _mm256_broadcast_ss(&*wq.add(1));
            a2 = _mm256_fmadd_ps(w1, v0, a2);
            a3 = _mm256_fmadd_ps(w1, v1, a3);
            let w2 = _mm256_broadcast_ss(&*wq.add(2));
            a4 = _mm256_fmadd_ps(w2, v0, a4);
            a5 = _mm256_fmadd_ps(w2, v1, a5);
            let w3 = _mm256_broadcast_ss(&*wq.add(3));
            a6 = _mm256_fmadd_ps(w3, v0, a6);
            a7 = _mm256_fmadd_ps(w3, v1, a7);
        }
        for (row, (lo, hi)) in out.iter_mut().zip([(a0, a1), (a2, a3), (a4, a5), (a6, a7)]) {
            _mm256_storeu_ps(row.as_mut_ptr().add(col), lo);
            _mm256_storeu_ps(row.as_mut_ptr().add(col + 8), hi);
        }
    }

    /// AVX-512 version of `tile_generic` for `f32`.
    ///
    /// # Safety
    /// Requires AVX-512F; same bounds as [`tile_f32`].
    #[target_feature(enable = "avx512f")]
    pub unsafe fn tile_f32_512(
        data: &[f32],
        base: usize,
        taps: &[(usize, usize)],
        w: &[f32],
    ) -> [[f32; LANES]; CO_BLOCK] {
        let d = data.as_ptr().add(base);
        let wp = w.as_ptr();
        let mut a = [_mm512_setzero_ps(); 2 * CO_BLOCK];
        for &(off, wo) in taps {
            let p = d.add(off);
            let v0 = _mm512_loadu_ps(p);
            let v1 = _mm512_loadu_ps(p.add(16));
            let wq = wp.add(wo);
            for c in 0..CO_BLOCK {
                let wc = _mm512_set1_ps(*wq.add(c));
                a[2 * c] = _mm512_fmadd_ps(wc, v0, a[2 * c]);
                a[2 * c + 1] = _mm512_fmadd_ps(wc, v1, a[2 * c + 1]);
            }
        }
        let mut out = [[0.0f32; LANES]; CO_BLOCK];
        for (c, row) in out.iter_mut().enumerate() {
            _mm512_storeu_ps(row.as_mut_ptr(), a[2 * c]);
            _mm512_storeu_ps(row.as_mut_ptr().add(16), a[2 * c + 1]);
        }
        out
    }

    /// AVX-512 version of [`wgrad_f32`]; `len` must be a multiple of 16.
    ///
    /// # Safety
    /// Requires AVX-512F; same bounds as [`wgrad_f32`].
    #[target_feature(enable = "avx512f")]
    pub unsafe fn wgrad_f32_512(
        g: &[f32],
        stride: usize,
        data: &[f32],
        base: usize,
        offs: &[usize; TAP_BLOCK],
        len: usize,
    ) -> [[f32; TAP_BLOCK]; CO_BLOCK] {
        let gp = g.as_ptr();
        let d0 = data.as_ptr().add(base + offs[0]);
        let d1 = data.as_ptr().add(base + offs[1]);
        let d2 = data.as_ptr().add(base + offs[2]);
        let mut acc = [_mm512_setzero_ps(); CO_BLOCK * TAP_BLOCK];
        let mut p = 0;
        while p < len {
            let i0 = _mm512_loadu_ps(d0.add(p));
            let i1 = _mm512_loadu_ps(d1.add(p));
            let i2 = _mm512_loadu_ps(d2.add(p));
            for c in 0..CO_BLOCK {
                let gv = _mm512_loadu_ps(gp.add(c * stride + p));
                acc[c * 3] = _mm512_fmadd_ps(gv, i0, acc[c * 3]);
                acc[c * 3 + 1] = _mm512_fmadd_ps(gv, i1, acc[c * 3 + 1]);
                acc[c * 3 + 2] = _mm512_fmadd_ps(gv, i2, acc[c * 3 + 2]);
            }
            p += 16;
        }
        let mut out = [[0.0f32; TAP_BLOCK]; CO_BLOCK];
        for c in 0..CO_BLOCK {
            for j in 0..TAP_BLOCK {
                out[c][j] = _mm512_reduce_add_ps(acc[c * TAP_BLOCK + j]);
            }
        }
        out
    }

    #[inline(always)]
    unsafe fn hsum(v: __m256) -> f32 {
        let lo = _mm256_castps256_ps128(v);
        let hi = _mm256_extractf128_ps(v, 1);
        let s = _mm_add_ps(lo, hi);
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
        _mm_cvtss_f32(s)
    }

    /// AVX2/FMA version of `wgrad_generic` for `f32` with a full tap block.
    ///
    /// # Safety
    /// Requires AVX2 and FMA; `len` must be a multiple of 8, `g` must hold
    /// `CO_BLOCK` rows of `len` at `stride`, and every
    /// `base + offs[j] + len` must lie within `data`.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn wgrad_f32(
        g: &[f32],
        stride: usize,
        data: &[f32],
        base: usize,
        offs: &[usize; TAP_BLOCK],
        len: usize,
    ) -> [[f32; TAP_BLOCK]; CO_BLOCK] {
        let gp = g.as_ptr();
        let d0 = data.as_ptr().add(base + offs[0]);
        let d1 = data.as_ptr().add(base + offs[1]);
        let d2 = data.as_ptr().add(base + offs[2]);
        let mut acc = [_mm256_setzero_ps(); CO_BLOCK * TAP_BLOCK];
        let mut p = 0;
        while p < len {
            let i0 = _mm256_loadu_ps(d0.add(p));
            let i1 = _mm256_loadu_ps(d1.add(p));
            let i2 = _mm256_loadu_ps(d2.add(p));
            for c in 0..CO_BLOCK {
                let gv = _mm256_loadu_ps(gp.add(c * stride + p));
                acc[c * 3] = _mm256_fmadd_ps(gv, i0, acc[c * 3]);
                acc[c * 3 + 1] = _mm256_fmadd_ps(gv, i1, acc[c * 3 + 1]);
                acc[c * 3 + 2] = _mm256_fmadd_ps(gv, i2, acc[c * 3 + 2]);
            }
            p += 8;
        }
        let mut out = [[0.0f32; TAP_BLOCK]; CO_BLOCK];
        for c in 0..CO_BLOCK {
            for j in 0..TAP_BLOCK {
                out[c][j] = hsum(acc[c * TAP_BLOCK + j]);
            }
        }
        out
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kernel {
    Generic,
    Avx2,
    Avx512,
}

/// Vector kernels apply to `f32` only; `f64` (gradient checks) stays generic.
fn kernel_for<T: 'static>() -> Kernel {
    #[cfg(target_arch = "x86_64")]
    {
        if std::any::TypeId::of::<T>() != std::any::TypeId::of::<f32>() {
            Kernel::Generic
        } else if std::is_x86_feature_detected!("avx512f") {
            Kernel::Avx512
        } else if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            Kernel::Avx2
        } else {
            Kernel::Generic
        }
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        Kernel::Generic
    }
}

/// Same-padded correlation of one padded item, accumulated into `out`
/// (`[cout, X, Y, Z]`).
fn direct<T: Scalar>(
    src: &PaddedItem<T>,
    wblk: &[T],
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    spec: &KernelSpec,
    out: &mut [T],
) {
    let [x_n, y_n, z_n] = dims;
    let [kx_n, ky_n, kz_n] = spec.extent;
    let [dx, dy, dz] = spec.dilation;
    let px = spec.padding()[0];
    let taps = spec.taps();
    let zp = src.zp;
    // output row x occupies padded-plane positions [0, span) from (y=0, z=0)
    let span = (y_n - 1) * zp + z_n;
    let span_r = span.div_ceil(LANES) * LANES;
    let blocks = cout.div_ceil(CO_BLOCK);
    let kernel = kernel_for::<T>();
    let mut row = vec![T::zero(); CO_BLOCK * span_r];
    let mut tap_list = Vec::with_capacity(cin * taps);
    for x in 0..x_n {
        for cb in 0..blocks {
            tap_list.clear();
            for ci in 0..cin {
                for kx in 0..kx_n {
                    let Some(xs) = (x + kx * dx).checked_sub(px) else {
                        continue;
                    };
                    if xs >= x_n {
                        continue;
                    }
                    for ky in 0..ky_n {
                        for kz in 0..kz_n {
                            let off = (ci * x_n + xs) * src.plane_stride + ky * dy * zp + kz * dz;
                            let t = (kx * ky_n + ky) * kz_n + kz;
                            tap_list.push((off, ((cb * cin + ci) * taps + t) * CO_BLOCK));
                        }
                    }
                }
            }
            for p0 in (0..span_r).step_by(LANES) {
                let acc = if kernel != Kernel::Generic {
                    #[cfg(target_arch = "x86_64")]
                    {
                        // SAFETY: T is f32 (checked by kernel_for), features were
                        // detected, and the padded buffer carries LANES of slack
                        // past the last plane.
                        unsafe {
                            let data = &*(src.data.as_slice() as *const [T] as *const [f32]);
                            let w = &*(wblk as *const [T] as *const [f32]);
                            let a = if kernel == Kernel::Avx512 {
                                simd::tile_f32_512(data, p0, &tap_list, w)
                            } else {
                                simd::tile_f32(data, p0, &tap_list, w)
                            };
                            *(&a as *const [[f32; LANES]; CO_BLOCK] as *const [[T; LANES]; CO_BLOCK])
                        }
                    }
                    #[cfg(not(target_arch = "x86_64"))]
                    unreachable!()
                } else {
                    tile_generic(&src.data, p0, &tap_list, wblk)
                };
                for (c, a) in acc.iter().enumerate() {
                    row[c * span_r + p0..c * span_r + p0 + LANES].copy_from_slice(a);
                }
            }
            for c in 0..CO_BLOCK.min(cout - cb * CO_BLOCK) {
                let co = cb * CO_BLOCK + c;
                let dst = (co * x_n + x) * y_n * z_n;
                for y in 0..y_n {
                    let r = &row[c * span_r + y * zp..c * span_r + y * zp + z_n];
                    for (o, &v) in out[dst + y * z_n..dst + (y + 1) * z_n].iter_mut().zip(r) {
                        *o += v;
                    }
                }
            }
        }
    }
}

pub fn forward<T: Scalar>(input: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let vox = g.voxels();
    let wblk = block_weights(weight, g.cout, g.cin, g.spec.taps());
    let mut out = vec![T::zero(); g.batch * g.cout * vox];
    for b in 0..g.batch {
        let item = &input[b * g.cin * vox..][..g.cin * vox];
        let padded = PaddedItem::new(item, g.cin, g.dims, g.spec.padding());
        let dst = &mut out[b * g.cout * vox..][..g.cout * vox];
        for (co, chunk) in dst.chunks_mut(vox).enumerate() {
            chunk.fill(bias[co]);
        }
        direct(&padded, &wblk, g.cin, g.cout, g.dims, &g.spec, dst);
    }
    out
}

pub struct ConvGrads<T> {
    /// Absent when not requested.
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Weights of the adjoint correlation: channels swapped, taps reversed.
fn adjoint_weights<T: Scalar>(weight: &[T], cout: usize, cin: usize, taps: usize) -> Vec<T> {
    let mut out = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..taps {
                out[(ci * cout + co) * taps + (taps - 1 - t)] = weight[(co * cin + ci) * taps + t];
            }
        }
    }
    out
}

/// Accumulate the weight gradient of one batch item into `gw`.
fn weight_grad<T: Scalar>(src: &PaddedItem<T>, go: &[T], g: &ConvGeom, gw: &mut [T]) {
    let [x_n, y_n, z_n] = g.dims;
    let [kx_n, ky_n, kz_n] = g.spec.extent;
    let [dx, dy, dz] = g.spec.dilation;
    let px = g.spec.padding()[0];
    let taps = g.spec.taps();
    let zp = src.zp;
    let span = (y_n - 1) * zp + z_n;
    let span_r = span.div_ceil(LANES) * LANES;
    let blocks = g.cout.div_ceil(CO_BLOCK);
    let kernel = kernel_for::<T>();
    // dY for one x row in padded-plane layout, zero outside the valid (y, z)
    let mut gspan = vec![T::zero(); blocks * CO_BLOCK * span_r];
    let plane_taps: Vec<(usize, usize)> = (0..ky_n)
        .flat_map(|ky| (0..kz_n).map(move |kz| (ky, kz)))
        .map(|(ky, kz)| (ky * kz_n + kz, ky * dy * zp + kz * dz))
        .collect();
    for x in 0..x_n {
        for co in 0..g.cout {
            let row = &mut gspan[co * span_r..(co + 1) * span_r];
            let src_row = &go[(co * x_n + x) * y_n * z_n..][..y_n * z_n];
            for y in 0..y_n {
                row[y * zp..y * zp + z_n].copy_from_slice(&src_row[y * z_n..(y + 1) * z_n]);
            }
        }
        for cb in 0..blocks {
            let grows = &gspan[cb * CO_BLOCK * span_r..];
            for ci in 0..g.cin {
                for kx in 0..kx_n {
                    let Some(xs) = (x + kx * dx).checked_sub(px) else {
                        continue;
                    };
                    if xs >= x_n {
                        continue;
                    }
                    let base = (ci * x_n + xs) * src.plane_stride;
                    for group in plane_taps.chunks(TAP_BLOCK) {
                        let offs: Vec<usize> = group.iter().map(|&(_, o)| o).collect();
                        let part = if kernel != Kernel::Generic && group.len() == TAP_BLOCK {
                            #[cfg(target_arch = "x86_64")]
                            {
                                let offs: [usize; TAP_BLOCK] = offs.as_slice().try_into().unwrap();
                                // SAFETY: T is f32 (checked by kernel_for), features were
                                // detected, span_r is a multiple of LANES and the padded
                                // buffer carries slack past the last plane.
                                unsafe {
                                    let gr = &*(grows as *const [T] as *const [f32]);
                                    let d = &*(src.data.as_slice() as *const [T] as *const [f32]);
                                    let a = if kernel == Kernel::Avx512 {
                                        simd::wgrad_f32_512(gr, span_r, d, base, &offs, span_r)
                                    } else {
                                        simd::wgrad_f32(gr, span_r, d, base, &offs, span_r)
                                    };
                                    *(&a as *const [[f32; TAP_BLOCK]; CO_BLOCK] as *const [[T; TAP_BLOCK]; CO_BLOCK])
                                }
                            }
                            #[cfg(not(target_arch = "x86_64"))]
                            unreachable!()
                        } else {
                            wgrad_generic(grows, span_r, &src.data, base, &offs, span_r)
                        };
                        for c in 0..CO_BLOCK.min(g.cout - cb * CO_BLOCK) {
                            let co = cb * CO_BLOCK + c;
                            for (j, &(t, _)) in group.iter().enumerate() {
                                let tap = kx * ky_n * kz_n + t;
                                gw[(co * g.cin + ci) * taps + tap] += part[c][j];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn backward<T: Scalar>(input: &[T], weight: &[T], grad_out: &[T], g: &ConvGeom, need_input: bool) -> ConvGrads<T> {
    let vox = g.voxels();
    let taps = g.spec.taps();
    let pad = g.spec.padding();
    let wadj = block_weights(&adjoint_weights(weight, g.cout, g.cin, taps), g.cin, g.cout, taps);
    let mut gin = vec![T::zero(); if need_input { input.len() } else { 0 }];
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); g.cout];
    for b in 0..g.batch {
        let go = &grad_out[b * g.cout * vox..][..g.cout * vox];
        for (co, chunk) in go.chunks(vox).enumerate() {
            gb[co] += chunk.iter().fold(T::zero(), |s, &v| s + v);
        }
        let item = &input[b * g.cin * vox..][..g.cin * vox];
        let padded = PaddedItem::new(item, g.cin, g.dims, pad);
        weight_grad(&padded, go, g, &mut gw);
        if !need_input {
            continue;
        }
        // dX is the adjoint correlation of dY
        let padded = PaddedItem::new(go, g.cout, g.dims, pad);
        let gitem = &mut gin[b * g.cin * vox..][..g.cin * vox];
        direct(&padded, &wadj, g.cout, g.cin, g.dims, &g.spec, gitem);
    }
    ConvGrads { input: need_input.then_some(gin), weight: gw, bias: gb }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_follows_dilation() {
        let s = KernelSpec::intra_slice(3).unwrap();
        assert_eq!(s.padding(), [3, 3, 0]);
        let s = KernelSpec::inter_slice(1).unwrap();
        assert_eq!(s.padding(), [0, 0, 1]);
    }

    #[test]
    fn rejects_even_extent_and_bad_dilation() {
        assert!(KernelSpec::new([2, 3, 1], [1, 1, 1]).is_err());
        assert!(KernelSpec::intra_slice(4).is_err());
        assert!(KernelSpec::intra_slice(0).is_err());
    }
}
