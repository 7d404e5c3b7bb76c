//! Synthetic brain phantoms with a nested three-region tumor.
//!
//! A brain ellipsoid holds two CSF-filled ventricles and one tumor built from
//! three ellipsoids. Region membership is taken by intersection, so the inner
//! regions are always contained in the outer ones. Intensities come from a
//! per-tissue contrast table, scaled by a smooth polynomial bias field, plus
//! Gaussian noise. Everything outside the brain is exactly zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabelMap, VolumeSet, MODALITIES};
use crate::error::{Error, Result};
use crate::kv::{join, KvText};

/// Tissue rows of the contrast table.
pub const TISSUES: [&str; 5] = ["brain", "csf", "edema", "necrotic", "enhancing"];

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub extents: [usize; 3],
    /// Whole-tumor semi-axes as a fraction of each extent, drawn per axis.
    pub wt_radius: (f64, f64),
    /// Tumor-core semi-axes relative to the whole tumor.
    pub tc_scale: (f64, f64),
    /// Enhancing-core semi-axes relative to the tumor core.
    pub en_scale: (f64, f64),
    /// Maximum tumor-centre offset from the brain centre, fraction of extents.
    pub center_jitter: f64,
    pub ventricles: usize,
    /// `contrast[tissue][modality]`, tissues ordered as [`TISSUES`].
    pub contrast: [[f32; 4]; 5],
    pub noise_std: f64,
    /// Peak relative deviation of the multiplicative bias field.
    pub bias_strength: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            extents: [64, 64, 64],
            wt_radius: (10.0 / 64.0, 16.0 / 64.0),
            tc_scale: (0.6, 0.8),
            en_scale: (0.6, 0.8),
            center_jitter: 8.0 / 64.0,
            ventricles: 2,
            contrast: [
                [0.60, 0.55, 0.40, 0.45],
                [0.20, 0.20, 0.95, 0.15],
                [0.50, 0.50, 0.85, 0.90],
                [0.35, 0.45, 0.70, 0.60],
                [0.40, 0.95, 0.60, 0.65],
            ],
            noise_std: 0.05,
            bias_strength: 0.15,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn to_text(&self) -> String {
        let mut kv = KvText::new("phantom params");
        kv.push("extents", join(&self.extents));
        kv.push("wt_radius", join(&[self.wt_radius.0, self.wt_radius.1]));
        kv.push("tc_scale", join(&[self.tc_scale.0, self.tc_scale.1]));
        kv.push("en_scale", join(&[self.en_scale.0, self.en_scale.1]));
        kv.push("center_jitter", self.center_jitter);
        kv.push("ventricles", self.ventricles);
        for (t, row) in TISSUES.iter().zip(&self.contrast) {
            kv.push(&format!("contrast.{t}"), join(row));
        }
        kv.push("noise_std", self.noise_std);
        kv.push("bias_strength", self.bias_strength);
        kv.push("seed", self.seed);
        kv.render()
    }

    /// Parses `key = value` text; missing keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KvText::parse(text, "phantom params")?;
        let mut known = vec![
            "extents",
            "wt_radius",
            "tc_scale",
            "en_scale",
            "center_jitter",
            "ventricles",
            "noise_std",
            "bias_strength",
            "seed",
        ];
        let keys: Vec<String> = TISSUES.iter().map(|t| format!("contrast.{t}")).collect();
        known.extend(keys.iter().map(String::as_str));
        kv.only(&known)?;
        let d = Self::default();
        let pair = |key: &str, default: (f64, f64)| -> Result<(f64, f64)> {
            if kv.get(key).is_none() {
                return Ok(default);
            }
            let [a, b] = kv.parse_array(key)?;
            Ok((a, b))
        };
        let mut contrast = d.contrast;
        for (row, key) in contrast.iter_mut().zip(&keys) {
            if kv.get(key).is_some() {
                *row = kv.parse_array(key)?;
            }
        }
        let p = Self {
            extents: if kv.get("extents").is_some() { kv.parse_array("extents")? } else { d.extents },
            wt_radius: pair("wt_radius", d.wt_radius)?,
            tc_scale: pair("tc_scale", d.tc_scale)?,
            en_scale: pair("en_scale", d.en_scale)?,
            center_jitter: kv.parse_or("center_jitter", d.center_jitter)?,
            ventricles: kv.parse_or("ventricles", d.ventricles)?,
            contrast,
            noise_std: kv.parse_or("noise_std", d.noise_std)?,
            bias_strength: kv.parse_or("bias_strength", d.bias_strength)?,
            seed: kv.parse_or("seed", d.seed)?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64), max: f64| {
            if lo > 0.0 && lo <= hi && hi < max && hi.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} range ({lo}, {hi}) must satisfy 0 < lo <= hi < {max}")))
            }
        };
        if self.extents.iter().any(|&e| e < 8) {
            return Err(Error::invalid(format!("phantom extents {:?} below 8", self.extents)));
        }
        range("wt_radius", self.wt_radius, 0.35)?;
        // Scales below one keep EN < TC < WT.
        range("tc_scale", self.tc_scale, 1.0)?;
        range("en_scale", self.en_scale, 1.0)?;
        if !(0.0..=0.15).contains(&self.center_jitter) {
            return Err(Error::invalid("center_jitter must lie in [0, 0.15]"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        if !(0.0..0.5).contains(&self.bias_strength) {
            return Err(Error::invalid("bias_strength must lie in [0, 0.5)"));
        }
        if self.contrast.iter().flatten().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::invalid("contrast entries must be positive"));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2)).sum::<f64>() <= 1.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Generates `(modalities, labels)`; a pure function of `params`.
pub fn phantom_generate(params: &PhantomParams) -> Result<(VolumeSet, LabelMap)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let e = params.extents.map(|n| n as f64);
    let mid = e.map(|n| (n - 1.0) / 2.0);

    let brain = Ellipsoid { center: mid, radii: e.map(|n| n * 0.42) };
    let ventricles: Vec<Ellipsoid> = (0..params.ventricles)
        .map(|k| {
            let side = if k % 2 == 0 { -1.0 } else { 1.0 };
            Ellipsoid {
                center: [
                    mid[0] + side * e[0] * uniform(&mut rng, (0.06, 0.1)),
                    mid[1] + e[1] * uniform(&mut rng, (-0.05, 0.05)),
                    mid[2],
                ],
                radii: [
                    e[0] * uniform(&mut rng, (0.03, 0.05)),
                    e[1] * uniform(&mut rng, (0.1, 0.16)),
                    e[2] * uniform(&mut rng, (0.06, 0.1)),
                ],
            }
        })
        .collect();

    let j = params.center_jitter;
    let center: [f64; 3] = std::array::from_fn(|i| mid[i] + e[i] * uniform(&mut rng, (-j, j)));
    let wt_r: [f64; 3] = std::array::from_fn(|i| e[i] * uniform(&mut rng, params.wt_radius));
    let shift = |rng: &mut ChaCha8Rng, r: [f64; 3], s: f64| -> [f64; 3] {
        std::array::from_fn(|i| center[i] + r[i] * uniform(rng, (-s, s)))
    };
    let tc_r: [f64; 3] = std::array::from_fn(|i| wt_r[i] * uniform(&mut rng, params.tc_scale));
    let tc = Ellipsoid { center: shift(&mut rng, wt_r, 0.15), radii: tc_r };
    let en_r: [f64; 3] = std::array::from_fn(|i| tc_r[i] * uniform(&mut rng, params.en_scale));
    let en = Ellipsoid { center: shift(&mut rng, tc_r, 0.15), radii: en_r };
    let wt = Ellipsoid { center, radii: wt_r };

    // Quadratic bias field over coordinates in [-1, 1].
    let coeffs: [f64; 9] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let bias = |u: [f64; 3]| {
        let q = coeffs[0] * u[0]
            + coeffs[1] * u[1]
            + coeffs[2] * u[2]
            + coeffs[3] * u[0] * u[1]
            + coeffs[4] * u[1] * u[2]
            + coeffs[5] * u[0] * u[2]
            + coeffs[6] * u[0] * u[0]
            + coeffs[7] * u[1] * u[1]
            + coeffs[8] * u[2] * u[2];
        1.0 + params.bias_strength * (q / 3.0).clamp(-1.0, 1.0)
    };

    let noise = Normal::new(0.0, params.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let [nx, ny, nz] = params.extents;
    let n = nx * ny * nz;
    let mut data = vec![0.0f32; MODALITIES.len() * n];
    let mut labels = vec![0u8; n];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = [x as f64, y as f64, z as f64];
                if !brain.contains(p) {
                    continue;
                }
                let i = (x * ny + y) * nz + z;
                let in_wt = wt.contains(p);
                let in_tc = in_wt && tc.contains(p);
                let in_en = in_tc && en.contains(p);
                let (tissue, label) = match (in_wt, in_tc, in_en) {
                    (_, _, true) => (4, 4),
                    (_, true, _) => (3, 1),
                    (true, _, _) => (2, 2),
                    _ if ventricles.iter().any(|v| v.contains(p)) => (1, 0),
                    _ => (0, 0),
                };
                labels[i] = label;
                let b = bias(std::array::from_fn(|k| (p[k] - mid[k]) / mid[k].max(1.0)));
                for (m, &c) in params.contrast[tissue].iter().enumerate() {
                    let v = c as f64 * b + noise.sample(&mut rng);
                    // Brain voxels stay nonzero so normalization sees them.
                    data[m * n + i] = (v as f32).max(1e-3);
                }
            }
        }
    }
    Ok((VolumeSet::new(params.extents, MODALITIES.len(), data)?, LabelMap::new(params.extents, labels)?))
}
