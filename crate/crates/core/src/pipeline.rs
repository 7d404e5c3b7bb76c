//! End-to-end plumbing: case directories, model-set manifests, training all
//! nine networks and scoring label maps.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::cascade::{CascadeModels, CascadeParams, StageModel, ViewId};
use crate::error::{Error, Result};
use crate::kv::{join, KvText};
use crate::metrics::{dice_score, hausdorff, EvalRow};
use crate::net::NetKind;
use crate::train::{load_checkpoint, train, Case, Checkpoint, Dataset, LossRecord, TrainConfig, TrainOutcome};
use crate::volume::{
    phantom_generate, read_avol, write_avol, Avol, LabelMap, PhantomParams, RegionId, VolumeSet, MODALITIES,
};

pub const MANIFEST_FORMAT: &str = "aniso-manifest 1";
pub const LABELS_FILE: &str = "labels.avol";

/// Writes `<dir>/{t1,t1c,t2,flair}.avol` and, if given, `labels.avol`.
pub fn write_case(dir: &Path, volume: &VolumeSet, labels: Option<&LabelMap>) -> Result<()> {
    if volume.channels() != MODALITIES.len() {
        return Err(Error::shape(format!("case volume has {} channels", volume.channels())));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (c, name) in MODALITIES.iter().enumerate() {
        let one = VolumeSet::with_spacing(volume.dims(), 1, volume.spacing(), volume.channel(c).to_vec())?;
        write_avol(dir.join(format!("{name}.avol")), &Avol::from(&one))?;
    }
    if let Some(l) = labels {
        let mut avol = Avol::from(l);
        avol.header.spacing = volume.spacing();
        write_avol(dir.join(LABELS_FILE), &avol)?;
    }
    Ok(())
}

/// Reads the four modalities of a case and its labels when present.
pub fn read_case(dir: &Path) -> Result<(VolumeSet, Option<LabelMap>)> {
    let mut dims = None;
    let mut spacing = [1.0; 3];
    let mut data = Vec::new();
    for name in MODALITIES {
        let v = read_avol(dir.join(format!("{name}.avol")))?.into_volume()?;
        if v.channels() != 1 {
            return Err(Error::shape(format!("{name}.avol has {} channels", v.channels())));
        }
        match dims {
            None => {
                dims = Some(v.dims());
                spacing = v.spacing();
            }
            Some(d) if d != v.dims() => {
                return Err(Error::shape(format!("{name}.avol is {:?}, expected {d:?}", v.dims())));
            }
            Some(_) => {}
        }
        data.extend_from_slice(v.data());
    }
    let dims = dims.expect("four modalities read");
    let volume = VolumeSet::with_spacing(dims, MODALITIES.len(), spacing, data)?;
    let label_path = dir.join(LABELS_FILE);
    let labels = if label_path.exists() {
        let l = read_avol(&label_path)?.into_labels()?;
        if l.dims() != dims {
            return Err(Error::shape(format!("labels are {:?}, volume {dims:?}", l.dims())));
        }
        Some(l)
    } else {
        None
    };
    Ok((volume, labels))
}

pub fn read_label_file(path: &Path) -> Result<LabelMap> {
    read_avol(path)?.into_labels()
}

pub fn write_label_file(path: &Path, labels: &LabelMap) -> Result<()> {
    write_avol(path, &Avol::from(labels))
}

/// Case directories under `root` (those holding `t1.avol`), sorted by name.
pub fn list_cases(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.join("t1.avol").is_file() {
            out.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every labelled case under `root`.
pub fn load_cases(root: &Path) -> Result<Vec<Case>> {
    list_cases(root)?
        .into_iter()
        .map(|(id, path)| {
            let (volume, labels) = read_case(&path)?;
            let labels = labels.ok_or_else(|| Error::invalid(format!("case `{id}` has no labels")))?;
            Ok(Case { id, volume, labels })
        })
        .collect()
}

/// Phantoms with seeds `base_seed..base_seed + count`.
pub fn generate_cases(template: &PhantomParams, base_seed: u64, count: usize) -> Result<Vec<Case>> {
    (0..count as u64)
        .map(|i| {
            let seed = base_seed + i;
            let (volume, labels) = phantom_generate(&PhantomParams { seed, ..template.clone() })?;
            Ok(Case { id: format!("case_{seed:06}"), volume, labels })
        })
        .collect()
}

/// Dice and Hausdorff distance for each region.
pub fn evaluate_labels(case: &str, predicted: &LabelMap, truth: &LabelMap, spacing: [f64; 3]) -> Result<Vec<EvalRow>> {
    RegionId::ALL
        .into_iter()
        .map(|r| {
            let p = predicted.binarize(r);
            let t = truth.binarize(r);
            let (p, t) = (
                crate::metrics::BinaryMask::with_spacing(p.dims(), spacing, p.data().to_vec())?,
                crate::metrics::BinaryMask::with_spacing(t.dims(), spacing, t.data().to_vec())?,
            );
            Ok(EvalRow {
                case: case.to_string(),
                region: r.to_string(),
                dice: dice_score(&p, &t)?,
                hausdorff_mm: hausdorff(&p, &t)?,
            })
        })
        .collect()
}

/// Mean Dice per region, in [`RegionId::ALL`] order.
pub fn mean_dice(rows: &[EvalRow]) -> [f64; 3] {
    RegionId::ALL.map(|r| {
        let v: Vec<f64> = rows.iter().filter(|x| x.region == r.as_str()).map(|x| x.dice).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    })
}

/// Trains all nine (stage, view) networks from `template`, which supplies
/// everything except stage, view and patch. With `threads > 1` independent
/// runs execute concurrently; results do not depend on the thread count.
pub fn train_all(
    template: &TrainConfig,
    dataset: &Dataset,
    threads: usize,
    progress: &(dyn Fn(NetKind, ViewId, &LossRecord) + Sync),
) -> Result<Vec<(NetKind, ViewId, TrainOutcome)>> {
    let jobs: Vec<TrainConfig> = NetKind::ALL
        .into_iter()
        .flat_map(|k| ViewId::ALL.map(move |v| (k, v)))
        .map(|(stage, view)| TrainConfig { stage, view, patch: crate::train::default_patch(stage), ..template.clone() })
        .collect();
    let run = |c: &TrainConfig| train(c, dataset, |r| progress(c.stage, c.view, r));
    let mut results: Vec<Option<Result<TrainOutcome>>> = (0..jobs.len()).map(|_| None).collect();
    let threads = threads.max(1);
    if threads == 1 {
        for (slot, job) in results.iter_mut().zip(&jobs) {
            *slot = Some(run(job));
        }
    } else {
        std::thread::scope(|s| {
            for (chunk_jobs, chunk_slots) in
                jobs.chunks(jobs.len().div_ceil(threads)).zip(results.chunks_mut(jobs.len().div_ceil(threads)))
            {
                let run = &run;
                s.spawn(move || {
                    for (slot, job) in chunk_slots.iter_mut().zip(chunk_jobs) {
                        *slot = Some(run(job));
                    }
                });
            }
        });
    }
    jobs.iter().zip(results).map(|(j, r)| Ok((j.stage, j.view, r.expect("every job ran")?))).collect()
}

/// Cascade models straight from checkpoints.
pub fn models_from_checkpoints(
    checkpoints: Vec<(NetKind, ViewId, Checkpoint)>,
    fusion: [[f64; 3]; 3],
) -> Result<CascadeModels> {
    let entries = checkpoints
        .into_iter()
        .map(|(k, v, c)| {
            if c.view != v {
                return Err(Error::invalid(format!("checkpoint for {k}/{v} was trained in the {} view", c.view)));
            }
            Ok((k, v, StageModel { network: Arc::new(c.network), norm: c.norm }))
        })
        .collect::<Result<_>>()?;
    CascadeModels::new(entries, fusion)
}

/// Model-set description for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Checkpoint paths indexed `[stage][view]`.
    pub models: [[PathBuf; 3]; 3],
    pub fusion: [[f64; 3]; 3],
    pub params: CascadeParams,
}

impl Manifest {
    /// `<dir>/<stage>_<view>.ackp` with default fusion and cascade settings.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            models: NetKind::ALL.map(|k| ViewId::ALL.map(|v| dir.join(checkpoint_name(k, v)))),
            fusion: [[1.0 / 3.0; 3]; 3],
            params: CascadeParams::default(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut kv = KvText::new("manifest");
        kv.push("format", MANIFEST_FORMAT);
        for k in NetKind::ALL {
            for v in ViewId::ALL {
                kv.push(&format!("model.{k}.{v}"), self.models[k as usize][v.index()].display());
            }
        }
        for k in NetKind::ALL {
            kv.push(&format!("fusion.{k}"), join(&self.fusion[k as usize]));
        }
        for k in NetKind::ALL {
            kv.push(&format!("window.{k}"), join(&self.params.windows[k as usize]));
        }
        kv.push("margin", join(&self.params.margin));
        kv.push("overlap", join(&self.params.overlap));
        kv.push("threshold", self.params.threshold);
        kv.render()
    }

    /// Parses manifest text; relative model paths resolve against `base`.
    pub fn from_text(text: &str, base: &Path) -> Result<Self> {
        let kv = KvText::parse(text, "manifest")?;
        match kv.require("format")? {
            MANIFEST_FORMAT => {}
            other => return Err(Error::UnsupportedVersion { what: "manifest", found: other.to_string() }),
        }
        let mut known: Vec<String> = ["format", "margin", "overlap", "threshold"].map(String::from).to_vec();
        let d = CascadeParams::default();
        let mut models: [[PathBuf; 3]; 3] = Default::default();
        let mut fusion = [[1.0 / 3.0; 3]; 3];
        let mut windows = d.windows;
        for k in NetKind::ALL {
            for v in ViewId::ALL {
                let key = format!("model.{k}.{v}");
                let p = kv.get(&key).ok_or_else(|| Error::MissingModel(format!("{k}/{v}")))?;
                models[k as usize][v.index()] = base.join(p);
                known.push(key);
            }
            let key = format!("fusion.{k}");
            if kv.get(&key).is_some() {
                fusion[k as usize] = kv.parse_array(&key)?;
            }
            known.push(key);
            let key = format!("window.{k}");
            if kv.get(&key).is_some() {
                windows[k as usize] = kv.parse_array(&key)?;
            }
            known.push(key);
        }
        kv.only(&known.iter().map(String::as_str).collect::<Vec<_>>())?;
        for w in &fusion {
            crate::cascade::check_weights(w)?;
        }
        let params = CascadeParams {
            threshold: kv.parse_or("threshold", d.threshold)?,
            margin: if kv.get("margin").is_some() { kv.parse_array("margin")? } else { d.margin },
            overlap: if kv.get("overlap").is_some() { kv.parse_array("overlap")? } else { d.overlap },
            windows,
            threads: 1,
        };
        if !(0.0..1.0).contains(&params.threshold) || windows.iter().flatten().any(|&w| w == 0) {
            return Err(Error::InvalidConfig {
                rule: "cascade-params",
                detail: "threshold must lie in [0, 1) and windows must be positive".into(),
            });
        }
        Ok(Self { models, fusion, params })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn load_models(&self) -> Result<CascadeModels> {
        let mut checkpoints = Vec::with_capacity(9);
        for k in NetKind::ALL {
            for v in ViewId::ALL {
                checkpoints.push((k, v, load_checkpoint(&self.models[k as usize][v.index()])?));
            }
        }
        models_from_checkpoints(checkpoints, self.fusion)
    }
}

pub fn checkpoint_name(kind: NetKind, view: ViewId) -> String {
    format!("{kind}_{view}.ackp")
}
