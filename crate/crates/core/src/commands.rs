//! The work behind each command-line subcommand. Functions return what
//! should be printed; the binary only parses flags and reports errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cascade::{run_cascade_detailed, CascadeModels, CascadeOutput, CascadeParams, ViewId};
use crate::error::{Error, Result};
use crate::kv::KvText;
use crate::metrics::{report_csv, EvalRow};
use crate::net::{receptive_field, NetKind, NetworkConfig};
use crate::pipeline::{
    checkpoint_name, evaluate_labels, generate_cases, list_cases, load_cases, mean_dice, read_case, read_label_file,
    train_all, write_case, Manifest, LABELS_FILE,
};
use crate::render::render_overlay;
use crate::train::{loss_log_csv, save_checkpoint, train, Dataset, LossRecord, TrainConfig};
use crate::volume::{normalize, write_avol, Avol, LabelMap, PhantomParams, RegionId, VolumeSet};

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `count` phantom cases under `out`, seeded `seed..seed + count`.
/// Returns the seed list.
pub fn phantom_gen(config: Option<&Path>, out: &Path, seed: u64, count: usize) -> Result<String> {
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    let template = match config {
        Some(p) => PhantomParams::from_text(&read_text(p)?)?,
        None => PhantomParams::default(),
    };
    let mut report = String::new();
    for (case, s) in generate_cases(&template, seed, count)?.iter().zip(seed..) {
        write_case(&out.join(&case.id), &case.volume, Some(&case.labels))?;
        writeln!(report, "{} seed {s}", case.id).ok();
    }
    Ok(report)
}

/// Trains from a config file. A config naming a stage and view trains one
/// network into `<out>/<stage>_<view>.ackp`; one naming neither trains all
/// nine and also writes `<out>/manifest.txt`. Loss logs go next to each
/// checkpoint as `<stage>_<view>_loss.csv`.
pub fn train_command(
    config: &Path,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    threads: usize,
    progress: &(dyn Fn(NetKind, ViewId, &LossRecord) + Sync),
) -> Result<String> {
    let text = read_text(config)?;
    let kv = KvText::parse(&text, "train config")?;
    let targeted = match (kv.get("stage").is_some(), kv.get("view").is_some()) {
        (true, true) => true,
        (false, false) => false,
        _ => return Err(Error::invalid("train config must name both stage and view, or neither")),
    };
    let mut cfg = if targeted { TrainConfig::from_text(&text)? } else { TrainConfig::template_from_text(&text)? };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let cases = load_cases(data)?;
    if cases.is_empty() {
        return Err(Error::invalid(format!("no labelled cases under {}", data.display())));
    }
    let dataset = Dataset::normalized(cases)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let outcomes = if targeted {
        vec![(cfg.stage, cfg.view, train(&cfg, &dataset, |r| progress(cfg.stage, cfg.view, r))?)]
    } else {
        train_all(&cfg, &dataset, threads, progress)?
    };
    let mut report = String::new();
    for (kind, view, outcome) in &outcomes {
        let path = out.join(checkpoint_name(*kind, *view));
        save_checkpoint(&outcome.checkpoint, &path)?;
        write_file(&out.join(format!("{kind}_{view}_loss.csv")), loss_log_csv(&outcome.log))?;
        let last = outcome.log.last().map_or(f64::NAN, |r| r.loss);
        writeln!(
            report,
            "{kind}/{view}: final loss {last:.4}, {} rejected steps -> {}",
            outcome.rejected_steps,
            path.display()
        )
        .ok();
    }
    if !targeted {
        let manifest = out.join("manifest.txt");
        // Paths in a manifest resolve against its own directory.
        write_file(&manifest, Manifest::in_dir(Path::new("")).to_text())?;
        writeln!(report, "manifest -> {}", manifest.display()).ok();
    }
    Ok(report)
}

/// Options for [`infer_command`].
#[derive(Clone, Debug, Default)]
pub struct InferOptions {
    pub threads: usize,
    pub allow_unnormalized: bool,
    /// Also write `<stem>_<stage>_prob.avol` next to each label file.
    pub probabilities: bool,
}

/// Normalizes a raw case with the statistics stored in the models and runs
/// the cascade.
pub fn segment(
    models: &CascadeModels,
    volume: VolumeSet,
    params: &CascadeParams,
    allow_unnormalized: bool,
) -> Result<CascadeOutput> {
    let volume = match models.norm_stats()? {
        Some(norm) => normalize(volume, &norm)?,
        None if allow_unnormalized => volume,
        None => return Err(Error::Unnormalized),
    };
    run_cascade_detailed(models, &volume, params)
}

/// Segments one case directory into the label file `out`, or every case
/// under a root directory into `<out>/<case>.avol`.
pub fn infer_command(manifest: &Path, data: &Path, out: &Path, opts: &InferOptions) -> Result<String> {
    let manifest = Manifest::load(manifest)?;
    let models = manifest.load_models()?;
    let params = CascadeParams { threads: opts.threads.max(1), ..manifest.params.clone() };
    let jobs: Vec<(String, PathBuf, PathBuf)> = if data.join("t1.avol").is_file() {
        let id = data.file_name().map_or_else(|| "case".into(), |n| n.to_string_lossy().into_owned());
        vec![(id, data.to_path_buf(), out.to_path_buf())]
    } else {
        let cases = list_cases(data)?;
        if cases.is_empty() {
            return Err(Error::invalid(format!("no cases under {}", data.display())));
        }
        cases.into_iter().map(|(id, p)| (id.clone(), p, out.join(format!("{id}.avol")))).collect()
    };
    let mut report = String::new();
    for (id, dir, target) in jobs {
        let (volume, _) = read_case(&dir)?;
        let spacing = volume.spacing();
        let output = segment(&models, volume, &params, opts.allow_unnormalized)?;
        let mut avol = Avol::from(&output.labels);
        avol.header.spacing = spacing;
        if let Some(parent) = target.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_avol(&target, &avol)?;
        if opts.probabilities {
            let stem = target.with_extension("");
            for (kind, prob) in NetKind::ALL.iter().zip(&output.probabilities) {
                if let Some(p) = prob {
                    let v = VolumeSet::with_spacing(output.labels.dims(), 1, spacing, p.clone())?;
                    write_avol(format!("{}_{kind}_prob.avol", stem.display()), &Avol::from(&v))?;
                }
            }
        }
        let counts = RegionId::ALL.map(|r| output.labels.binarize(r).count());
        writeln!(report, "{id}: wt {} tc {} en {} voxels -> {}", counts[0], counts[1], counts[2], target.display())
            .ok();
    }
    Ok(report)
}

fn prediction_path(pred: &Path, id: &str) -> Option<PathBuf> {
    [pred.join(format!("{id}.avol")), pred.join(id).join(LABELS_FILE)].into_iter().find(|p| p.is_file())
}

/// Scores predictions against every labelled case under `truth`. A
/// prediction is `<pred>/<case>.avol` or `<pred>/<case>/labels.avol`.
/// Writes the CSV report to `out` and returns mean Dice per region.
pub fn evaluate_command(pred: &Path, truth: &Path, out: &Path) -> Result<String> {
    let cases = list_cases(truth)?;
    let mut rows: Vec<EvalRow> = Vec::new();
    for (id, dir) in &cases {
        let (volume, labels) = read_case(dir)?;
        let labels = labels.ok_or_else(|| Error::invalid(format!("truth case `{id}` has no labels")))?;
        let path = prediction_path(pred, id)
            .ok_or_else(|| Error::invalid(format!("no prediction for `{id}` under {}", pred.display())))?;
        let predicted: LabelMap = read_label_file(&path)?;
        rows.extend(evaluate_labels(id, &predicted, &labels, volume.spacing())?);
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("no labelled cases under {}", truth.display())));
    }
    write_file(out, report_csv(&rows)?)?;
    let m = mean_dice(&rows);
    Ok(format!("{} cases: mean dice wt {:.4} tc {:.4} en {:.4} -> {}\n", cases.len(), m[0], m[1], m[2], out.display()))
}

/// Receptive field of a network config file, or of all three built-in
/// networks.
pub fn rf_command(config: Option<&Path>) -> Result<String> {
    let configs = match config {
        Some(p) => {
            let c = NetworkConfig::from_text(&read_text(p)?)?;
            c.validate()?;
            vec![c]
        }
        None => NetKind::ALL.iter().map(|&k| NetworkConfig::canonical(k, 32)).collect(),
    };
    let mut s = String::new();
    for c in configs {
        let [x, y, z] = receptive_field(&c);
        writeln!(s, "{}: x {x} y {y} z {z}", c.kind).ok();
    }
    Ok(s)
}

/// Options for [`render_command`].
#[derive(Clone, Debug)]
pub struct RenderOptions {
    /// Label file to overlay; defaults to the case's own labels if any.
    pub labels: Option<PathBuf>,
    pub channel: usize,
    pub axis: usize,
    /// Defaults to the middle slice.
    pub slice: Option<usize>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { labels: None, channel: 0, axis: 2, slice: None }
    }
}

/// Renders one slice of a case directory with its label overlay to `out`.
pub fn render_command(data: &Path, out: &Path, opts: &RenderOptions) -> Result<String> {
    let (volume, own) = read_case(data)?;
    let labels = match &opts.labels {
        Some(p) => Some(read_label_file(p)?),
        None => own,
    };
    if opts.axis > 2 {
        return Err(Error::invalid(format!("axis {} (expected 0, 1 or 2)", opts.axis)));
    }
    let slice = opts.slice.unwrap_or(volume.dims()[opts.axis] / 2);
    let img = render_overlay(&volume, opts.channel, labels.as_ref(), opts.axis, slice)?;
    write_file(out, img.to_png()?)?;
    Ok(format!("{}x{} slice {slice} -> {}\n", img.width, img.height, out.display()))
}
