use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{NetworkConfig, Stage};
use crate::autodiff::{BatchNormState, Graph, KernelSpec, Mode, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He {
        fan_in: usize,
    },
    Zeros,
    Ones,
    Slope,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

/// Parameters and batch-norm layers of a config, in forward order.
fn layout(config: &NetworkConfig) -> (Vec<ParamSpec>, Vec<(String, usize)>) {
    let mut params = Vec::new();
    let mut bns = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init| params.push(ParamSpec { name, shape, init });
    let mut unit = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: String, cin, cout, ext: [usize; 3]| {
        let taps = ext.iter().product::<usize>();
        push(format!("{prefix}.weight"), vec![cout, cin, ext[0], ext[1], ext[2]], Init::He { fan_in: cin * taps });
        push(format!("{prefix}.bias"), vec![cout], Init::Zeros);
        push(format!("{prefix}.gamma"), vec![cout], Init::Ones);
        push(format!("{prefix}.beta"), vec![cout], Init::Zeros);
        push(format!("{prefix}.slope"), vec![cout], Init::Slope);
        bns.push((prefix, cout));
    };
    let co = config.base_channels;
    let cl = config.class_count;
    let mut c = config.input_channels;
    let (mut nb, mut ni, mut nh) = (0, 0, 0);
    for s in &config.stages {
        match s {
            Stage::Residual { .. } => {
                nb += 1;
                unit(&mut push, format!("block{nb}.conv1"), c, co, [3, 3, 1]);
                unit(&mut push, format!("block{nb}.conv2"), co, co, [3, 3, 1]);
                c = co;
            }
            Stage::InterSlice => {
                ni += 1;
                unit(&mut push, format!("inter{ni}"), c, co, [1, 1, 3]);
                c = co;
            }
            Stage::Downsample => {}
            Stage::Head { .. } => {
                nh += 1;
                push(format!("head{nh}.weight"), vec![cl, c, 3, 3, 1], Init::He { fan_in: c * 9 });
                push(format!("head{nh}.bias"), vec![cl], Init::Zeros);
            }
        }
    }
    let fin = cl * nh;
    push("fuse.weight".into(), vec![cl, fin, 3, 3, 1], Init::He { fan_in: fin * 9 });
    push("fuse.bias".into(), vec![cl], Init::Zeros);
    (params, bns)
}

/// Named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedBatchNorm<T> {
    pub name: String,
    pub state: BatchNormState<T>,
}

/// Executable network: a validated config with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Scalar = f32> {
    config: NetworkConfig,
    params: Vec<Param<T>>,
    batch_norms: Vec<NamedBatchNorm<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Replace this head's (0-based) prediction with zeros before fusion.
    pub drop_head: Option<usize>,
}

impl From<Mode> for ForwardOptions {
    fn from(mode: Mode) -> Self {
        Self { mode, drop_head: None }
    }
}

/// Recorded forward pass.
pub struct Forward<T: Scalar> {
    pub graph: Graph<T>,
    /// `[B, C_l, X, Y, Z]` logits.
    pub logits: Var,
    /// One leaf per network parameter, in [`Network::params`] order.
    pub params: Vec<Var>,
}

impl<T: Scalar> Network<T> {
    /// Builds a network with seeded He initialization.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, bns) = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data: Vec<T> = match s.init {
                    Init::He { fan_in } => {
                        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                        (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
                    }
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Slope => vec![T::of(PRELU_INIT); n],
                };
                Ok(Param { name: s.name, value: Tensor::from_vec(&s.shape, data)? })
            })
            .collect::<Result<_>>()?;
        let batch_norms =
            bns.into_iter().map(|(name, c)| NamedBatchNorm { name, state: BatchNormState::new(c) }).collect();
        Ok(Self { config, params, batch_norms })
    }

    /// Reassembles a network from stored tensors; every expected name must
    /// be present exactly once with the expected shape.
    pub fn from_parts(
        config: NetworkConfig,
        mut params: Vec<Param<T>>,
        mut batch_norms: Vec<NamedBatchNorm<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let (specs, bns) = layout(&config);
        if params.len() != specs.len() {
            return Err(Error::Format {
                what: "network parameters",
                detail: format!("expected {} tensors, got {}", specs.len(), params.len()),
            });
        }
        let mut ordered = Vec::with_capacity(specs.len());
        for s in &specs {
            let i = params
                .iter()
                .position(|p| p.name == s.name)
                .ok_or_else(|| Error::Format { what: "network parameters", detail: format!("missing `{}`", s.name) })?;
            let p = params.swap_remove(i);
            if p.value.shape() != s.shape.as_slice() {
                return Err(Error::shape(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    s.name,
                    p.value.shape(),
                    s.shape
                )));
            }
            ordered.push(p);
        }
        if batch_norms.len() != bns.len() {
            return Err(Error::Format {
                what: "batch-norm statistics",
                detail: format!("expected {} layers, got {}", bns.len(), batch_norms.len()),
            });
        }
        let mut ordered_bn = Vec::with_capacity(bns.len());
        for (name, c) in &bns {
            let i = batch_norms
                .iter()
                .position(|b| &b.name == name)
                .ok_or_else(|| Error::Format { what: "batch-norm statistics", detail: format!("missing `{name}`") })?;
            let b = batch_norms.swap_remove(i);
            if b.state.channels() != *c || b.state.var.len() != *c {
                return Err(Error::shape(format!("`{name}` has {} channels, expected {c}", b.state.channels())));
            }
            ordered_bn.push(b);
        }
        Ok(Self { config, params: ordered, batch_norms: ordered_bn })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn batch_norms(&self) -> &[NamedBatchNorm<T>] {
        &self.batch_norms
    }

    pub fn batch_norms_mut(&mut self) -> &mut [NamedBatchNorm<T>] {
        &mut self.batch_norms
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
            batch_norms: self
                .batch_norms
                .iter()
                .map(|b| NamedBatchNorm {
                    name: b.name.clone(),
                    state: BatchNormState {
                        mean: b.state.mean.iter().map(|v| U::of(v.as_f64())).collect(),
                        var: b.state.var.iter().map(|v| U::of(v.as_f64())).collect(),
                        initialized: b.state.initialized,
                    },
                })
                .collect(),
        }
    }

    /// Records a forward pass with parameters as gradient leaves. Train mode
    /// updates the running statistics.
    pub fn forward(&mut self, input: &Tensor<T>, opts: impl Into<ForwardOptions>) -> Result<Forward<T>> {
        let mut graph = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| graph.param(p.value.clone())).collect();
        let mut states: Vec<&mut BatchNormState<T>> = self.batch_norms.iter_mut().map(|b| &mut b.state).collect();
        let logits = run(&self.config, &mut graph, &params, &mut states, input, opts.into())?;
        Ok(Forward { graph, logits, params })
    }

    /// Infer-mode logits; running statistics are read, not written.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_with(input, None)
    }

    pub fn infer_with(&self, input: &Tensor<T>, drop_head: Option<usize>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| graph.constant(p.value.clone())).collect();
        let mut copies: Vec<BatchNormState<T>> = self.batch_norms.iter().map(|b| b.state.clone()).collect();
        let mut states: Vec<&mut BatchNormState<T>> = copies.iter_mut().collect();
        let opts = ForwardOptions { mode: Mode::Infer, drop_head };
        let logits = run(&self.config, &mut graph, &params, &mut states, input, opts)?;
        Ok(graph.value(logits).clone())
    }
}

/// conv → batch norm → PReLU, consuming five parameters and one state.
fn unit<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &mut std::slice::Iter<'_, Var>,
    bn: &mut std::slice::IterMut<'_, &mut BatchNormState<T>>,
    spec: &KernelSpec,
    mode: Mode,
) -> Result<Var> {
    let mut next = || *p.next().expect("parameter layout matches the schedule");
    let (w, b, gamma, beta, slope) = (next(), next(), next(), next(), next());
    let state = bn.next().expect("batch-norm layout matches the schedule");
    let y = g.conv(x, w, b, spec)?;
    let y = g.batch_norm(y, gamma, beta, state, mode)?;
    g.prelu(y, slope)
}

fn run<T: Scalar>(
    config: &NetworkConfig,
    g: &mut Graph<T>,
    params: &[Var],
    states: &mut [&mut BatchNormState<T>],
    input: &Tensor<T>,
    opts: ForwardOptions,
) -> Result<Var> {
    let shape = input.shape();
    if shape.len() != 5 || shape[1] != config.input_channels {
        return Err(Error::shape(format!(
            "{} expects [B, {}, X, Y, Z] input, got {shape:?}",
            config.kind, config.input_channels
        )));
    }
    let dims = [shape[2], shape[3], shape[4]];
    let div = config.divisor();
    let padded = [dims[0].next_multiple_of(div), dims[1].next_multiple_of(div), dims[2]];

    let mut x = g.constant(input.clone());
    if padded != dims {
        x = g.pad_spatial(x, padded)?;
    }
    let mut p = params.iter();
    let mut bn = states.iter_mut();
    let intra = |d| KernelSpec::intra_slice(d);
    let mut heads = Vec::new();
    for stage in &config.stages {
        match *stage {
            Stage::Residual { dilation } => {
                let spec = intra(dilation)?;
                let y = unit(g, x, &mut p, &mut bn, &spec, opts.mode)?;
                let y = unit(g, y, &mut p, &mut bn, &spec, opts.mode)?;
                x = if g.shape(x) == g.shape(y) { g.add(x, y)? } else { y };
            }
            Stage::InterSlice => {
                x = unit(g, x, &mut p, &mut bn, &KernelSpec::inter_slice(1)?, opts.mode)?;
            }
            Stage::Downsample => x = g.downsample2d(x)?,
            Stage::Head { scale } => {
                let (w, b) = (*p.next().expect("head weight"), *p.next().expect("head bias"));
                let h = g.conv(x, w, b, &intra(1)?)?;
                let h = if opts.drop_head == Some(heads.len()) {
                    let shape = g.shape(h).to_vec();
                    g.constant(Tensor::zeros(&shape))
                } else {
                    h
                };
                heads.push(g.upsample2d(h, scale)?);
            }
        }
    }
    let cat = g.concat_channels(&heads)?;
    let (w, b) = (*p.next().expect("fuse weight"), *p.next().expect("fuse bias"));
    let mut out = g.conv(cat, w, b, &intra(1)?)?;
    debug_assert!(p.next().is_none());
    if padded != dims {
        out = g.crop_spatial(out, dims)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetKind;
    use rand::Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn names_are_unique_and_wnet_matches_tnet() {
        let w = Network::<f32>::build(NetworkConfig::canonical(NetKind::WNet, 32), 1).unwrap();
        let t = Network::<f32>::build(NetworkConfig::canonical(NetKind::TNet, 32), 2).unwrap();
        assert_eq!(w.param_count(), t.param_count());
        let mut names: Vec<_> = w.params().iter().map(|p| &p.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), w.params().len());
        assert_eq!(w.batch_norms().len(), 24);
    }

    #[test]
    fn same_seed_same_parameters() {
        let c = NetworkConfig::canonical(NetKind::ENet, 4);
        let a = Network::<f32>::build(c.clone(), 9).unwrap();
        let b = Network::<f32>::build(c.clone(), 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Network::<f32>::build(c, 10).unwrap());
    }

    #[test]
    fn forward_preserves_extents_for_awkward_sizes() {
        for kind in NetKind::ALL {
            let net = Network::<f32>::build(NetworkConfig::canonical(kind, 4), 3).unwrap();
            for dims in [[13, 10, 5], [8, 8, 1], [17, 23, 3]] {
                let x = random_input(&[2, 4, dims[0], dims[1], dims[2]], 4);
                let y = net.infer(&x).unwrap();
                assert_eq!(y.shape(), &[2, 2, dims[0], dims[1], dims[2]]);
                assert!(y.is_finite());
            }
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let net = Network::<f32>::build(NetworkConfig::canonical(NetKind::ENet, 4), 3).unwrap();
        assert!(net.infer(&Tensor::zeros(&[1, 3, 8, 8, 3])).is_err());
    }

    #[test]
    fn every_head_contributes() {
        let net = Network::<f32>::build(NetworkConfig::canonical(NetKind::WNet, 4), 5).unwrap();
        let x = random_input(&[1, 4, 16, 16, 5], 6);
        let full = net.infer(&x).unwrap();
        for h in 0..3 {
            let ablated = net.infer_with(&x, Some(h)).unwrap();
            assert!(full.max_abs_diff(&ablated) > 1e-6, "head {h}");
        }
    }

    #[test]
    fn from_parts_round_trip_and_rejects_missing() {
        let net = Network::<f32>::build(NetworkConfig::canonical(NetKind::TNet, 4), 7).unwrap();
        let mut params = net.params().to_vec();
        params.reverse();
        let back = Network::from_parts(net.config().clone(), params.clone(), net.batch_norms().to_vec()).unwrap();
        assert_eq!(back, net);
        params.pop();
        assert!(Network::from_parts(net.config().clone(), params, net.batch_norms().to_vec()).is_err());
    }
}
