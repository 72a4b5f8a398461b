//! Reference networks, split points and partitioning into client/server parts.
//!
//! Every primitive layer (conv, pool, activation, flatten, fully-connected,
//! softmax) is one unit of split depth. A depth `k` cut gives the first `k`
//! layers to the data holder and the rest to the other party.

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::optim::Param;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    /// 1x28x28 inputs (MNIST, Fashion-MNIST).
    Mnist,
    /// 3x32x32 inputs.
    Cifar10,
    /// 1x8x8 inputs, same layer pattern as `Mnist`; used for synthetic runs.
    Tiny,
}

impl Arch {
    pub fn id(self) -> u32 {
        match self {
            Arch::Mnist => 1,
            Arch::Cifar10 => 2,
            Arch::Tiny => 3,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            1 => Ok(Arch::Mnist),
            2 => Ok(Arch::Cifar10),
            3 => Ok(Arch::Tiny),
            other => Err(Error::Format(format!("unknown architecture id {other}"))),
        }
    }

    /// `(C, H, W)` of a single input example.
    pub fn input_shape(self) -> [usize; 3] {
        match self {
            Arch::Mnist => [1, 28, 28],
            Arch::Cifar10 => [3, 32, 32],
            Arch::Tiny => [1, 8, 8],
        }
    }

    pub fn layer_kinds(self) -> Vec<(&'static str, LayerKind)> {
        use LayerKind::*;
        let conv = |i, o| Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
        };
        let fc = |i, o| FullyConnected { inputs: i, outputs: o };
        match self {
            // conv -> 2x2 max-pool -> ReLU, twice; then three fully-connected layers
            Arch::Mnist | Arch::Tiny => {
                let side = self.input_shape()[1] / 4;
                let (c1, c2) = if self == Arch::Mnist { (8, 16) } else { (4, 8) };
                let (h1, h2) = if self == Arch::Mnist { (256, 128) } else { (32, 16) };
                vec![
                    ("conv1", conv(1, c1)),
                    ("pool1", MaxPool2x2),
                    ("relu1", Relu),
                    ("conv2", conv(c1, c2)),
                    ("pool2", MaxPool2x2),
                    ("relu2", Relu),
                    ("flatten", Flatten),
                    ("fc1", fc(c2 * side * side, h1)),
                    ("relu3", Relu),
                    ("fc2", fc(h1, h2)),
                    ("relu4", Relu),
                    ("fc3", fc(h2, 10)),
                    ("softmax", Softmax),
                ]
            }
            Arch::Cifar10 => vec![
                ("conv11", conv(3, 64)),
                ("relu11", Relu),
                ("conv12", conv(64, 64)),
                ("relu12", Relu),
                ("pool1", MaxPool2x2),
                ("conv21", conv(64, 128)),
                ("relu21", Relu),
                ("conv22", conv(128, 128)),
                ("relu22", Relu),
                ("pool2", MaxPool2x2),
                ("conv31", conv(128, 128)),
                ("relu31", Relu),
                ("conv32", conv(128, 128)),
                ("relu32", Relu),
                ("pool3", MaxPool2x2),
                ("flatten", Flatten),
                ("fc1", fc(128 * 4 * 4, 256)),
                ("sigmoid1", Sigmoid),
                ("fc2", fc(256, 10)),
                ("softmax", Softmax),
            ],
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mnist => "mnist",
            Arch::Cifar10 => "cifar10",
            Arch::Tiny => "tiny",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" | "fmnist" | "fashion-mnist" => Ok(Arch::Mnist),
            "cifar" | "cifar10" => Ok(Arch::Cifar10),
            "tiny" | "synth" => Ok(Arch::Tiny),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    Sigmoid,
    MaxPool2x2,
    Flatten,
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
    Softmax,
}

impl LayerKind {
    pub fn has_params(self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. })
    }

    /// Weight shape, bias shape and fan-in of a parameterised layer.
    fn param_shapes(self) -> Option<(Vec<usize>, Vec<usize>, usize)> {
        match self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
                in_channels * kernel * kernel,
            )),
            LayerKind::FullyConnected { inputs, outputs } => {
                Some((vec![outputs, inputs], vec![outputs], inputs))
            }
            _ => None,
        }
    }
}

/// One primitive layer and its parameters (weight then bias).
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub params: Vec<Param>,
}

impl Layer {
    /// Fresh layer with weights and bias uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(name: &str, kind: LayerKind, rng: &mut ChaCha8Rng) -> Self {
        let params = match kind.param_shapes() {
            Some((ws, bs, fan_in)) => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                vec![
                    Param::new(Tensor::uniform(&ws, -bound, bound, rng)),
                    Param::new(Tensor::uniform(&bs, -bound, bound, rng)),
                ]
            }
            None => Vec::new(),
        };
        Layer {
            name: name.to_string(),
            kind,
            params,
        }
    }
}

/// Records `layer` applied to `input`; `params` are the graph handles of the
/// layer's weight and bias (empty for parameter-free layers).
pub fn apply_layer(g: &mut Graph, layer: &Layer, input: Var, params: &[Var]) -> Result<Var> {
    let shape = g.shape(input).to_vec();
    match layer.kind {
        LayerKind::Conv2d { in_channels, .. } => {
            if shape.len() != 4 || shape[1] != in_channels {
                let mut want = shape.clone();
                want.resize(4, 0);
                want[1] = in_channels;
                return Err(Error::shape("conv2d", &want, &shape));
            }
            g.conv2d(input, params[0], params[1])
        }
        LayerKind::FullyConnected { inputs, .. } => {
            if shape.len() != 2 || shape[1] != inputs {
                return Err(Error::shape("fully_connected", &[shape[0], inputs], &shape));
            }
            g.linear(input, params[0], params[1])
        }
        LayerKind::Relu => g.relu(input),
        LayerKind::Sigmoid => g.sigmoid(input),
        LayerKind::MaxPool2x2 => g.max_pool2x2(input),
        LayerKind::Flatten => g.flatten(input),
        LayerKind::Softmax => g.softmax(input),
    }
}

/// Handles produced by [`LayerStack::forward`].
#[derive(Clone, Debug)]
pub struct StackForward {
    pub output: Var,
    /// One handle per parameter, in [`LayerStack::params_mut`] order.
    pub params: Vec<Var>,
}

/// An ordered run of layers: a whole network or one party's part of it.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LayerStack {
    pub layers: Vec<Layer>,
}

impl LayerStack {
    pub fn new(layers: Vec<Layer>) -> Self {
        LayerStack { layers }
    }

    /// A freshly initialised stack with the given layer layout.
    pub fn init_like(template: &[Layer], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LayerStack {
            layers: template.iter().map(|l| Layer::init(&l.name, l.kind, &mut rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.params).map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut()).collect()
    }

    pub fn same_architecture(&self, other: &LayerStack) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.kind == b.kind)
    }

    /// Records the stack on `g`. Parameters become leaves that require grad
    /// iff `track_params`.
    pub fn forward(&self, g: &mut Graph, input: Var, track_params: bool) -> Result<StackForward> {
        let mut x = input;
        let mut handles = Vec::new();
        for layer in &self.layers {
            let first = handles.len();
            for p in &layer.params {
                handles.push(g.leaf(p.value.clone(), track_params));
            }
            x = apply_layer(g, layer, x, &handles[first..])?;
        }
        Ok(StackForward {
            output: x,
            params: handles,
        })
    }

    /// Moves the gradients of a completed backward pass into the parameters.
    pub fn store_grads(&mut self, grads: &mut Gradients, fwd: &StackForward) -> Result<()> {
        for (p, &v) in self.params_mut().into_iter().zip(&fwd.params) {
            p.grad = Some(grads.take(v).ok_or(Error::MissingGradient(v.index()))?);
        }
        Ok(())
    }

    /// Gradient-free forward pass.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let input = g.leaf(x.clone(), false);
        let out = self.forward(&mut g, input, false)?.output;
        Ok(g.value(out).clone())
    }

    /// Output shape for a batch of inputs shaped `input`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for l in &self.layers {
            shape = match l.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    ..
                } => {
                    if shape.len() != 4 || shape[1] != in_channels {
                        return Err(Error::shape("conv2d", &[shape[0], in_channels, 0, 0], &shape));
                    }
                    vec![shape[0], out_channels, shape[2], shape[3]]
                }
                LayerKind::MaxPool2x2 => {
                    if shape.len() != 4 {
                        return Err(Error::shape("max_pool2x2", &[0, 0, 0, 0], &shape));
                    }
                    vec![shape[0], shape[1], shape[2] / 2, shape[3] / 2]
                }
                LayerKind::Flatten => vec![shape[0], shape[1..].iter().product()],
                LayerKind::FullyConnected { inputs, outputs } => {
                    if shape.len() != 2 || shape[1] != inputs {
                        return Err(Error::shape("fully_connected", &[shape[0], inputs], &shape));
                    }
                    vec![shape[0], outputs]
                }
                _ => shape,
            };
        }
        Ok(shape)
    }
}

/// A whole network plus the depth at which it is cut.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitModel {
    pub arch: Arch,
    pub seed: u64,
    pub net: LayerStack,
    pub split_depth: usize,
}

pub fn build_mnist_net(seed: u64) -> SplitModel {
    SplitModel::build(Arch::Mnist, seed)
}

pub fn build_cifar_net(seed: u64) -> SplitModel {
    SplitModel::build(Arch::Cifar10, seed)
}

impl SplitModel {
    /// Seeded fresh network with the default cut after the first layer.
    pub fn build(arch: Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layer_kinds()
            .into_iter()
            .map(|(name, kind)| Layer::init(name, kind, &mut rng))
            .collect();
        SplitModel {
            arch,
            seed,
            net: LayerStack::new(layers),
            split_depth: 1,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.net.len()
    }

    /// Valid cut depths, `1..layer_count`.
    pub fn split_points(&self) -> std::ops::Range<usize> {
        1..self.layer_count()
    }

    pub fn with_split_depth(mut self, depth: usize) -> Result<Self> {
        self.check_depth(depth)?;
        self.split_depth = depth;
        Ok(self)
    }

    fn check_depth(&self, depth: usize) -> Result<()> {
        if depth == 0 || depth >= self.layer_count() {
            return Err(Error::InvalidArgument(format!(
                "split depth {depth} outside [1, {})",
                self.layer_count()
            )));
        }
        Ok(())
    }

    /// Borrowed views of the two parts at `depth`.
    pub fn split_at(&self, depth: usize) -> Result<(&[Layer], &[Layer])> {
        self.check_depth(depth)?;
        Ok(self.net.layers.split_at(depth))
    }

    /// Splits into owned parts at strictly increasing `cuts`.
    pub fn into_parts(self, cuts: &[usize]) -> Result<Vec<LayerStack>> {
        let mut prev = 0;
        for &c in cuts {
            self.check_depth(c)?;
            if c <= prev {
                return Err(Error::InvalidArgument(format!("cut points {cuts:?} not increasing")));
            }
            prev = c;
        }
        let mut rest = self.net.layers;
        let mut parts = Vec::with_capacity(cuts.len() + 1);
        let mut taken = 0;
        for &c in cuts {
            let tail = rest.split_off(c - taken);
            parts.push(LayerStack::new(rest));
            rest = tail;
            taken = c;
        }
        parts.push(LayerStack::new(rest));
        Ok(parts)
    }

    /// Reassembles parts produced by [`into_parts`](Self::into_parts).
    pub fn from_parts(arch: Arch, seed: u64, parts: Vec<LayerStack>, split_depth: usize) -> Result<Self> {
        let layers: Vec<Layer> = parts.into_iter().flat_map(|p| p.layers).collect();
        let expected = arch.layer_kinds();
        if layers.len() != expected.len() || layers.iter().zip(&expected).any(|(l, (_, k))| l.kind != *k) {
            return Err(Error::InvalidArgument(format!("parts do not form a {arch} network")));
        }
        SplitModel {
            arch,
            seed,
            net: LayerStack::new(layers),
            split_depth,
        }
        .with_split_depth(split_depth)
    }

    /// Index of the first layer of a client tail holding the last
    /// `fc_layers` fully-connected layers (with their activations and softmax).
    pub fn tail_start(&self, fc_layers: usize) -> Result<usize> {
        let fcs: Vec<usize> = self
            .net
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::FullyConnected { .. }))
            .map(|(i, _)| i)
            .collect();
        if fc_layers == 0 || fc_layers > fcs.len() {
            return Err(Error::InvalidArgument(format!(
                "tail of {fc_layers} fully-connected layers; {arch} has {}",
                fcs.len(),
                arch = self.arch
            )));
        }
        Ok(fcs[fcs.len() - fc_layers])
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.net.predict(x)
    }
}
