//! Dice and Hausdorff scores, summary statistics and the evaluation report.

use std::fmt::Write as _;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Boolean volume with voxel spacing in millimetres. Indexing is `[x, y, z]`
/// with `z` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        Self::with_spacing(dims, [1.0; 3], data)
    }

    pub fn with_spacing(dims: [usize; 3], spacing: [f64; 3], data: Vec<bool>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "mask {dims:?} needs {} voxels, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Self { dims, spacing: [1.0; 3], data: vec![false; dims.iter().product()] }
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn([usize; 3]) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    data.push(f([x, y, z]));
                }
            }
        }
        Self { dims, spacing: [1.0; 3], data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn index(&self, [x, y, z]: [usize; 3]) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, p: [usize; 3]) -> bool {
        self.data[self.index(p)]
    }

    pub fn set(&mut self, p: [usize; 3], v: bool) {
        let i = self.index(p);
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    fn same_shape(&self, other: &BinaryMask, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!("{what}: masks {:?} and {:?}", self.dims, other.dims)));
        }
        Ok(())
    }

    /// Foreground voxels with at least one background 6-neighbour; voxels
    /// outside the volume count as background.
    pub fn boundary(&self) -> Vec<[usize; 3]> {
        let [nx, ny, nz] = self.dims;
        let mut out = Vec::new();
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    if !self.get([x, y, z]) {
                        continue;
                    }
                    let edge = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                    if edge
                        || !self.get([x - 1, y, z])
                        || !self.get([x + 1, y, z])
                        || !self.get([x, y - 1, z])
                        || !self.get([x, y + 1, z])
                        || !self.get([x, y, z - 1])
                        || !self.get([x, y, z + 1])
                    {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }
}

/// `2|A∩B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_shape(b, "dice_score")?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&p, &q) in a.data.iter().zip(&b.data) {
        inter += (p && q) as usize;
        na += p as usize;
        nb += q as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Symmetric Hausdorff distance in mm between the boundary sets.
///
/// `Ok(None)` when exactly one mask is empty; `Ok(Some(0.0))` when both are.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>> {
    a.same_shape(b, "hausdorff")?;
    if a.spacing != b.spacing {
        return Err(Error::invalid(format!("hausdorff: spacings {:?} and {:?} differ", a.spacing, b.spacing)));
    }
    let (ba, bb) = (a.boundary(), b.boundary());
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let s = a.spacing;
    let pa: Vec<[f64; 3]> = ba.iter().map(|p| scaled(p, s)).collect();
    let pb: Vec<[f64; 3]> = bb.iter().map(|p| scaled(p, s)).collect();
    let h = directed_sq(&pa, &pb).max(directed_sq(&pb, &pa));
    Ok(Some(h.sqrt()))
}

fn scaled(p: &[usize; 3], s: [f64; 3]) -> [f64; 3] {
    [p[0] as f64 * s[0], p[1] as f64 * s[1], p[2] as f64 * s[2]]
}

fn dist_sq(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Squared directed Hausdorff distance, with the early break: once a point
/// of `to` is closer than the running maximum, `p` cannot raise it.
fn directed_sq(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut cmax = 0.0f64;
    for p in from {
        let mut cmin = f64::INFINITY;
        for q in to {
            let d = dist_sq(p, q);
            if d < cmax {
                cmin = d;
                break;
            }
            cmin = cmin.min(d);
        }
        cmax = cmax.max(cmin);
    }
    cmax
}

/// Per-metric summary over cases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreSummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    /// Number of defined values.
    pub n: usize,
    /// Number of undefined values left out.
    pub undefined: usize,
}

/// Quantile by linear interpolation between order statistics of a sorted
/// slice (`q` in `[0, 1]`).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Summary of the defined values; `None` entries are counted separately.
pub fn summarize(values: &[Option<f64>]) -> Result<ScoreSummary> {
    let mut v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return Err(Error::invalid("summarize needs at least one defined value"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("summarize input".into()));
    }
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(ScoreSummary {
        mean,
        std: var.sqrt(),
        median: quantile(&v, 0.5),
        q25: quantile(&v, 0.25),
        q75: quantile(&v, 0.75),
        n: v.len(),
        undefined: values.len() - v.len(),
    })
}

/// One evaluated `(case, region)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub case: String,
    pub region: String,
    pub dice: f64,
    pub hausdorff_mm: Option<f64>,
}

/// CSV with one row per case and region, then the summary block:
/// `summary,<region>,<metric>,mean,std,median,q25,q75,n,undefined`.
/// Undefined distances are written as `undefined`.
pub fn report_csv(rows: &[EvalRow]) -> Result<String> {
    let mut s = String::from("case,region,dice,hausdorff_mm\n");
    let mut regions: Vec<&str> = Vec::new();
    for r in rows {
        let h = r.hausdorff_mm.map_or_else(|| "undefined".to_string(), |h| format!("{h:.4}"));
        writeln!(s, "{},{},{:.4},{h}", r.case, r.region, r.dice).expect("write to String");
        if !regions.contains(&r.region.as_str()) {
            regions.push(&r.region);
        }
    }
    s.push_str("\nsummary,region,metric,mean,std,median,q25,q75,n,undefined\n");
    for region in regions {
        let of = |f: &dyn Fn(&EvalRow) -> Option<f64>| -> Vec<Option<f64>> {
            rows.iter().filter(|r| r.region == region).map(f).collect()
        };
        for (metric, vals) in [("dice", of(&|r| Some(r.dice))), ("hausdorff_mm", of(&|r| r.hausdorff_mm))] {
            match summarize(&vals) {
                Ok(t) => writeln!(
                    s,
                    "summary,{region},{metric},{:.4},{:.4},{:.4},{:.4},{:.4},{},{}",
                    t.mean, t.std, t.median, t.q25, t.q75, t.n, t.undefined
                ),
                Err(_) => writeln!(s, "summary,{region},{metric},,,,,,0,{}", vals.len()),
            }
            .expect("write to String");
        }
    }
    Ok(s)
}

/// Soft Dice loss of a two-channel probability map against one mask per
/// batch item.
pub fn dice_loss<T: Scalar>(graph: &mut Graph<T>, prob: Var, targets: &[BinaryMask]) -> Result<Var> {
    let target: Vec<T> =
        targets.iter().flat_map(|m| m.data().iter().map(|&v| if v { T::one() } else { T::zero() })).collect();
    let shape = graph.shape(prob);
    if shape.len() != 5
        || shape[0] != targets.len()
        || targets.iter().any(|m| m.dims() != [shape[2], shape[3], shape[4]])
    {
        return Err(Error::shape(format!("dice_loss: prediction {shape:?} against {} masks", targets.len())));
    }
    graph.dice_loss(prob, &target)
}
