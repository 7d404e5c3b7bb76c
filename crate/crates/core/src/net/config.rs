use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Version tag written as the first line of a serialized config.
pub const CONFIG_FORMAT: &str = "aniso-net 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NetKind {
    WNet,
    TNet,
    ENet,
}

impl NetKind {
    pub const ALL: [NetKind; 3] = [NetKind::WNet, NetKind::TNet, NetKind::ENet];

    pub fn as_str(self) -> &'static str {
        match self {
            NetKind::WNet => "wnet",
            NetKind::TNet => "tnet",
            NetKind::ENet => "enet",
        }
    }

    /// Number of in-plane 2× downsampling stages in the canonical schedule.
    pub fn downsamples(self) -> usize {
        match self {
            NetKind::WNet | NetKind::TNet => 2,
            NetKind::ENet => 1,
        }
    }
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "wnet" => Ok(NetKind::WNet),
            "tnet" => Ok(NetKind::TNet),
            "enet" => Ok(NetKind::ENet),
            other => Err(Error::invalid(format!("unknown network `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Two 3×3×1 convolutions with a shared in-plane dilation, plus an
    /// identity skip when the channel count is unchanged.
    Residual { dilation: usize },
    /// One 1×1×3 convolution.
    InterSlice,
    /// 2×2×1 max pooling.
    Downsample,
    /// 3×3×1 convolution to the class count, upsampled by `scale` to the
    /// input resolution.
    Head { scale: usize },
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Residual { dilation } => write!(f, "residual {dilation}"),
            Stage::InterSlice => f.write_str("inter"),
            Stage::Downsample => f.write_str("down"),
            Stage::Head { scale } => write!(f, "head {scale}"),
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut it = s.split_whitespace();
        let kind = it.next().unwrap_or("");
        let arg = it.next();
        let num = |a: Option<&str>| -> Result<usize> {
            a.ok_or_else(|| Error::invalid(format!("stage `{s}` needs an argument")))?
                .parse()
                .map_err(|_| Error::invalid(format!("bad stage argument in `{s}`")))
        };
        let stage = match kind {
            "residual" => Stage::Residual { dilation: num(arg)? },
            "inter" => Stage::InterSlice,
            "down" => Stage::Downsample,
            "head" => Stage::Head { scale: num(arg)? },
            _ => return Err(Error::invalid(format!("unknown stage `{s}`"))),
        };
        if it.next().is_some() || (matches!(stage, Stage::InterSlice | Stage::Downsample) && arg.is_some()) {
            return Err(Error::invalid(format!("trailing tokens in stage `{s}`")));
        }
        Ok(stage)
    }
}

/// Declarative description of one cascade network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub kind: NetKind,
    pub input_channels: usize,
    pub base_channels: usize,
    pub class_count: usize,
    pub stages: Vec<Stage>,
}

impl NetworkConfig {
    /// Built-in schedule for `kind` with `base_channels` feature maps.
    pub fn canonical(kind: NetKind, base_channels: usize) -> Self {
        use Stage::*;
        let r = |d| Residual { dilation: d };
        #[rustfmt::skip]
        let stages = match kind {
            NetKind::WNet | NetKind::TNet => vec![
                r(1), r(1), InterSlice, Downsample,
                r(1), r(1), InterSlice, Downsample,
                r(1), r(1), Head { scale: 4 }, InterSlice,
                r(2), r(2), Head { scale: 4 }, InterSlice,
                r(3), r(3), Head { scale: 4 },
            ],
            NetKind::ENet => vec![
                r(1), r(1), InterSlice, Downsample,
                r(1), r(1), InterSlice,
                r(2), r(2), Head { scale: 2 }, InterSlice,
                r(3), r(3), Head { scale: 2 }, InterSlice,
                r(1), r(1), Head { scale: 2 },
            ],
        };
        Self { kind, input_channels: 4, base_channels, class_count: 2, stages }
    }

    pub fn count(&self, pred: impl Fn(&Stage) -> bool) -> usize {
        self.stages.iter().filter(|s| pred(s)).count()
    }

    /// Checks the structural rules; the error names the first rule broken.
    pub fn validate(&self) -> Result<()> {
        let fail = |rule: &'static str, detail: String| Err(Error::InvalidConfig { rule, detail });
        if self.input_channels != 4 {
            return fail("four-input-channels", format!("got {}", self.input_channels));
        }
        if self.base_channels == 0 {
            return fail("positive-base-channels", "base_channels is 0".into());
        }
        if self.class_count != 2 {
            return fail("binary-output", format!("class_count {}", self.class_count));
        }
        let blocks = self.count(|s| matches!(s, Stage::Residual { .. }));
        if blocks != 10 {
            return fail("ten-residual-blocks", format!("found {blocks}"));
        }
        for s in &self.stages {
            if let Stage::Residual { dilation } = s {
                if !(1..=3).contains(dilation) {
                    return fail("dilation-1-to-3", format!("residual dilation {dilation}"));
                }
            }
        }
        let inter = self.count(|s| *s == Stage::InterSlice);
        if inter != 4 {
            return fail("four-inter-slice-convs", format!("found {inter}"));
        }
        let downs = self.count(|s| *s == Stage::Downsample);
        if downs != self.kind.downsamples() {
            return fail("downsample-count", format!("{} needs {}, found {downs}", self.kind, self.kind.downsamples()));
        }
        let heads = self.count(|s| matches!(s, Stage::Head { .. }));
        if heads != 3 {
            return fail("three-heads", format!("found {heads}"));
        }
        let mut depth = 0;
        for s in &self.stages {
            match s {
                Stage::Downsample => depth += 1,
                Stage::Head { scale } if *scale != 1 << depth => {
                    return fail(
                        "head-scale-matches-depth",
                        format!("head at depth {depth} has scale {scale}, expected {}", 1 << depth),
                    );
                }
                _ => {}
            }
        }
        if !matches!(self.stages.last(), Some(Stage::Head { .. })) {
            return fail("ends-with-head", "the last stage must be a prediction head".into());
        }
        Ok(())
    }

    /// In-plane extents of every input must be a multiple of this.
    pub fn divisor(&self) -> usize {
        1 << self.count(|s| *s == Stage::Downsample)
    }

    /// Text form: a version line, `key = value` lines, then one
    /// `stage = ...` line per stage in order.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "format = {CONFIG_FORMAT}\nname = {}\ninput_channels = {}\nbase_channels = {}\nclass_count = {}\n",
            self.kind, self.input_channels, self.base_channels, self.class_count
        );
        for st in &self.stages {
            s.push_str(&format!("stage = {st}\n"));
        }
        s
    }

    /// Parses [`NetworkConfig::to_text`] output. Does not validate.
    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "network config", detail };
        let mut format = None;
        let mut kind = None;
        let mut input_channels = None;
        let mut base_channels = None;
        let mut class_count = None;
        let mut stages = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let int = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("line {}: `{v}` is not an integer", n + 1)));
            match k {
                "format" => format = Some(v.to_string()),
                "name" => kind = Some(v.parse()?),
                "input_channels" => input_channels = Some(int(v)?),
                "base_channels" => base_channels = Some(int(v)?),
                "class_count" => class_count = Some(int(v)?),
                "stage" => stages.push(v.parse()?),
                _ => return Err(bad(format!("line {}: unknown key `{k}`", n + 1))),
            }
        }
        match format.as_deref() {
            Some(CONFIG_FORMAT) => {}
            Some(other) => return Err(Error::UnsupportedVersion { what: "network config", found: other.to_string() }),
            None => return Err(bad("missing format line".into())),
        }
        let need = |o: Option<usize>, key: &str| o.ok_or_else(|| bad(format!("missing `{key}`")));
        Ok(Self {
            kind: kind.ok_or_else(|| bad("missing `name`".into()))?,
            input_channels: need(input_channels, "input_channels")?,
            base_channels: need(base_channels, "base_channels")?,
            class_count: need(class_count, "class_count")?,
            stages,
        })
    }
}
