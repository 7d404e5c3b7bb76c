//! Per-stage, per-view training with Adam and the soft Dice loss, plus the
//! checkpoint container.

mod adam;
mod checkpoint;

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamState, ADAM_EPS, BETA1, BETA2};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ACKP_MAGIC};

use crate::autodiff::Mode;
use crate::cascade::{bbox_of_mask, crop_volume, stage_region, BoundingBox, Direction, ViewId, DEFAULT_MARGIN};
use crate::error::{Error, Result};
use crate::kv::{join, KvText};
use crate::metrics::dice_loss;
use crate::net::{NetKind, Network, NetworkConfig};
use crate::tensor::Tensor;
use crate::volume::{compute_norm_stats, normalize, LabelMap, NormStats, PatchSampler, RegionId, VolumeSet};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-7;
pub const DEFAULT_BATCH: usize = 5;
pub const DEFAULT_ITERATIONS: usize = 30_000;
pub const DEFAULT_BASE_CHANNELS: usize = 32;

/// Training patch per stage at the 64³ phantom scale.
pub fn default_patch(kind: NetKind) -> [usize; 3] {
    match kind {
        NetKind::WNet => [48, 48, 11],
        NetKind::TNet => [32, 32, 11],
        NetKind::ENet => [24, 24, 11],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: NetKind,
    pub view: ViewId,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub iterations: usize,
    /// In view orientation.
    pub patch: [usize; 3],
    pub base_channels: usize,
    /// Ground-truth crop margin for TNet/ENet, canonical orientation.
    pub margin: [usize; 3],
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(stage: NetKind, view: ViewId) -> Self {
        Self {
            stage,
            view,
            learning_rate: DEFAULT_LEARNING_RATE,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            batch: DEFAULT_BATCH,
            iterations: DEFAULT_ITERATIONS,
            patch: default_patch(stage),
            base_channels: DEFAULT_BASE_CHANNELS,
            margin: DEFAULT_MARGIN,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |rule: &'static str, detail: String| Err(Error::InvalidConfig { rule, detail });
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("positive-learning-rate", format!("{}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("non-negative-weight-decay", format!("{}", self.weight_decay));
        }
        if self.batch == 0 || self.iterations == 0 || self.base_channels == 0 {
            return bad("positive-counts", "batch, iterations and base_channels must be positive".into());
        }
        if self.patch.contains(&0) {
            return bad("positive-patch", format!("{:?}", self.patch));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut kv = KvText::new("train config");
        kv.push("stage", self.stage);
        kv.push("view", self.view);
        kv.push("learning_rate", self.learning_rate);
        kv.push("weight_decay", self.weight_decay);
        kv.push("batch", self.batch);
        kv.push("iterations", self.iterations);
        kv.push("patch", join(&self.patch));
        kv.push("base_channels", self.base_channels);
        kv.push("margin", join(&self.margin));
        kv.push("seed", self.seed);
        kv.render()
    }

    /// Parses `key = value` text; `stage` and `view` are required, other keys
    /// fall back to the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::parse(text, true)
    }

    /// Like [`TrainConfig::from_text`] but `stage` and `view` may be absent
    /// (they default to wnet/axial). Used for settings shared by all nine
    /// runs.
    pub fn template_from_text(text: &str) -> Result<Self> {
        Self::parse(text, false)
    }

    fn parse(text: &str, targeted: bool) -> Result<Self> {
        let kv = KvText::parse(text, "train config")?;
        kv.only(&[
            "stage",
            "view",
            "learning_rate",
            "weight_decay",
            "batch",
            "iterations",
            "patch",
            "base_channels",
            "margin",
            "seed",
        ])?;
        let d = if targeted {
            Self::new(kv.parse_value("stage")?, kv.parse_value("view")?)
        } else {
            Self::new(kv.parse_or("stage", NetKind::WNet)?, kv.parse_or("view", ViewId::Axial)?)
        };
        let c = Self {
            learning_rate: kv.parse_or("learning_rate", d.learning_rate)?,
            weight_decay: kv.parse_or("weight_decay", d.weight_decay)?,
            batch: kv.parse_or("batch", d.batch)?,
            iterations: kv.parse_or("iterations", d.iterations)?,
            patch: if kv.get("patch").is_some() { kv.parse_array("patch")? } else { d.patch },
            base_channels: kv.parse_or("base_channels", d.base_channels)?,
            margin: if kv.get("margin").is_some() { kv.parse_array("margin")? } else { d.margin },
            seed: kv.parse_or("seed", d.seed)?,
            ..d
        };
        c.validate()?;
        Ok(c)
    }

    /// Seed for one random stream of this (stage, view) run.
    pub fn stream_seed(&self, stream: u64) -> u64 {
        let salt = (self.stage as u64) << 8 | (self.view.index() as u64) << 4 | stream;
        splitmix(self.seed ^ splitmix(salt))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: VolumeSet,
    pub labels: LabelMap,
}

/// Training cases with the statistics they were normalized with.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cases: Vec<Case>,
    pub norm: Option<NormStats>,
}

impl Dataset {
    /// Computes statistics over all cases and normalizes them.
    pub fn normalized(cases: Vec<Case>) -> Result<Self> {
        let norm = compute_norm_stats(cases.iter().map(|c| &c.volume))?;
        let cases =
            cases.into_iter().map(|c| Ok(Case { volume: normalize(c.volume, &norm)?, ..c })).collect::<Result<_>>()?;
        Ok(Self { cases, norm: Some(norm) })
    }

    /// Uses intensities as they are; checkpoints are flagged unnormalized.
    pub fn raw(cases: Vec<Case>) -> Self {
        Self { cases, norm: None }
    }
}

/// Region whose ground-truth box bounds a stage's input, if any.
pub fn parent_region(kind: NetKind) -> Option<RegionId> {
    match kind {
        NetKind::WNet => None,
        NetKind::TNet => Some(RegionId::WT),
        NetKind::ENet => Some(RegionId::TC),
    }
}

/// Stage inputs in view orientation: whole volumes for WNet, ground-truth
/// boxes of the parent region for TNet/ENet. Cases whose parent region is
/// empty are skipped.
pub fn stage_inputs(
    cases: &[Case],
    kind: NetKind,
    view: ViewId,
    margin: [usize; 3],
) -> Result<Vec<(VolumeSet, LabelMap)>> {
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        let bbox = match parent_region(kind) {
            None => BoundingBox::full(c.volume.dims()),
            Some(r) => match bbox_of_mask(&c.labels.binarize(r), margin) {
                Some(b) => b,
                None => continue,
            },
        };
        let volume = crop_volume(&c.volume, &bbox)?;
        let labels = crate::cascade::crop_data(c.labels.data(), 1, c.labels.dims(), &bbox)?;
        let labels = LabelMap::new(bbox.extents(), labels)?;
        out.push((
            view.transform_volume(&volume, Direction::ToView),
            view.transform_labels(&labels, Direction::ToView),
        ));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("iteration,loss,wall_ms\n");
    for r in records {
        writeln!(s, "{},{:.6},{:.1}", r.iteration, r.loss, r.wall_ms).expect("writing to a String");
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
    /// Updates skipped because a gradient was not finite.
    pub rejected_steps: usize,
}

/// Loss and parameter gradients for one batch in train mode.
pub fn batch_loss(
    net: &mut Network<f32>,
    input: &Tensor<f32>,
    targets: &[crate::metrics::BinaryMask],
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut fwd = net.forward(input, Mode::Train)?;
    let g = &mut fwd.graph;
    let prob = g.softmax_channels(fwd.logits)?;
    let loss = dice_loss(g, prob, targets)?;
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let grads = fwd.params.iter().map(|&p| g.take_grad(p).expect("parameters receive gradients")).collect();
    Ok((value, grads))
}

/// Runs `config.iterations` Adam steps on foreground-biased patches.
/// `on_iteration` sees every loss record as it is produced.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    mut on_iteration: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let inputs = stage_inputs(&dataset.cases, config.stage, config.view, config.margin)?;
    if inputs.is_empty() {
        return Err(Error::invalid(format!("no training cases for {}", config.stage)));
    }
    let channels = inputs[0].0.channels();
    let region = stage_region(config.stage);
    let samplers =
        inputs.iter().map(|(v, l)| PatchSampler::new(v, l, config.patch, region)).collect::<Result<Vec<_>>>()?;

    let mut net_config = NetworkConfig::canonical(config.stage, config.base_channels);
    net_config.input_channels = channels;
    let mut net = Network::build(net_config, config.stream_seed(1))?;
    let mut adam = AdamState::new(net.params().iter().map(|p| &p.value));
    let mut rng = ChaCha8Rng::seed_from_u64(config.stream_seed(2));

    let [px, py, pz] = config.patch;
    let pn = channels * px * py * pz;
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.iterations);
    let mut rejected_steps = 0;
    for iteration in 1..=config.iterations {
        let mut input = Vec::with_capacity(config.batch * pn);
        let mut targets = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let patch = samplers[rng.random_range(0..samplers.len())].sample(&mut rng);
            input.extend_from_slice(&patch.input);
            targets.push(patch.target);
        }
        let input = Tensor::from_vec(&[config.batch, channels, px, py, pz], input)?;
        // Non-finite activations surface as NonFinite from the first op
        // that sees them; both that and a NaN loss mean divergence.
        let (loss, grads) = match batch_loss(&mut net, &input, &targets) {
            Ok((loss, grads)) if loss.is_finite() => (loss, grads),
            Ok(_) | Err(Error::NonFinite(_)) => return Err(Error::Diverged { iteration }),
            Err(e) => return Err(e),
        };
        let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
        let mut params: Vec<&mut Tensor<f32>> = net.params_mut().iter_mut().map(|p| &mut p.value).collect();
        match adam_step(&mut params, &grad_refs, &mut adam, config.learning_rate, config.weight_decay) {
            Ok(()) => {}
            Err(Error::NonFinite(_)) => rejected_steps += 1,
            Err(e) => return Err(e),
        }
        let record = LossRecord { iteration, loss, wall_ms: start.elapsed().as_secs_f64() * 1e3 };
        on_iteration(&record);
        log.push(record);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            network: net,
            view: config.view,
            norm: dataset.norm.clone(),
            adam: Some(adam),
            seed: config.seed,
            iteration: config.iterations as u64,
        },
        log,
        rejected_steps,
    })
}
