//! Declarative architectures and the sequential model built from them.
//!
//! Every network is `stem -> stages -> global average pool -> fc`. The stem
//! is three same-padded 3×3×3 conv units (receptive field 7³) in place of a
//! single 7×7×7 convolution. Stages are VGG conv stacks or residual blocks,
//! with or without self-attention. Widths follow the ResNet progression
//! 64/128/256/512 (stem 32/32/64) scaled by a width multiplier.

use serde::{Deserialize, Serialize};

use crate::blocks::{ConvUnit, ConvUnitCache, ResidualBlock, ResidualCache};
use crate::error::{Error, Result};
use crate::layers::{
    global_avg_pool, global_avg_pool_backward, BatchNorm3d, Linear, MaxPool3d, MaxPoolCache, Mode, Parameterized,
};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Vgg,
    Res,
    ResAtt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    StridedConv,
    MaxPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub block: BlockKind,
    /// Residual blocks for res/res_att stages, conv units for vgg stages.
    pub blocks: usize,
    pub channels: usize,
    /// 1 or 2.
    pub stride: usize,
    pub downsample: Downsample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    pub in_channels: usize,
    pub stem: Vec<ConvSpec>,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
}

pub const MODEL_NAMES: &[&str] = &[
    "vgg",
    "resnet18",
    "resnet34",
    "resattnet18",
    "resattnet34",
    "micro-vgg",
    "micro-resnet",
    "micro-resattnet",
];

/// Registered-volume size (MNI 2 mm grid) whose last feature map is 6×7×6.
pub const PAPER_INPUT: [usize; 3] = [91, 109, 91];

const STEM_WIDTHS: [usize; 3] = [32, 32, 64];
const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];

fn scaled(base: usize, width_mult: f64) -> usize {
    ((base as f64 * width_mult).round() as usize).max(1)
}

impl ArchitectureSpec {
    /// Named preset. `width_mult` scales every channel count.
    pub fn preset(name: &str, width_mult: f64) -> Result<Self> {
        if !(width_mult > 0.0) || !width_mult.is_finite() {
            return Err(Error::InvalidArgument(format!("width multiplier must be > 0, got {width_mult}")));
        }
        let stem = STEM_WIDTHS
            .iter()
            .map(|&c| ConvSpec {
                channels: scaled(c, width_mult),
                kernel: 3,
                stride: 1,
            })
            .collect();
        let (counts, kinds): ([usize; 4], [BlockKind; 4]) = match name {
            "resnet18" => ([2, 2, 2, 2], [BlockKind::Res; 4]),
            "resnet34" => ([3, 4, 6, 3], [BlockKind::Res; 4]),
            "resattnet18" => ([2, 2, 2, 2], res_att_late()),
            "resattnet34" => ([3, 4, 6, 3], res_att_late()),
            "micro-resnet" => ([1, 1, 1, 1], [BlockKind::Res; 4]),
            "micro-resattnet" => ([1, 1, 1, 1], res_att_late()),
            // stem 3 + convs 7 + fc 1 = 11 weight layers
            "vgg" => ([1, 1, 2, 3], [BlockKind::Vgg; 4]),
            "micro-vgg" => ([1, 1, 1, 1], [BlockKind::Vgg; 4]),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown model {other:?}; expected one of {}",
                    MODEL_NAMES.join(", ")
                )))
            }
        };
        let stages = (0..4)
            .map(|i| StageSpec {
                block: kinds[i],
                blocks: counts[i],
                channels: scaled(STAGE_WIDTHS[i], width_mult),
                stride: 2,
                downsample: if kinds[i] == BlockKind::Vgg {
                    Downsample::MaxPool
                } else {
                    Downsample::StridedConv
                },
            })
            .collect();
        Ok(ArchitectureSpec {
            name: name.to_string(),
            in_channels: 1,
            stem,
            stages,
            num_classes: 2,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::InvalidArgument("architecture needs input channels and classes".into()));
        }
        for c in &self.stem {
            if !matches!(c.kernel, 1 | 3) || c.stride == 0 || c.channels == 0 {
                return Err(Error::InvalidArgument(format!("invalid stem conv {c:?} (kernel must be 1 or 3)")));
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 || !matches!(s.stride, 1 | 2) {
                return Err(Error::InvalidArgument(format!("invalid stage {}: {s:?}", i + 1)));
            }
        }
        Ok(())
    }
}

fn res_att_late() -> [BlockKind; 4] {
    [BlockKind::Res, BlockKind::Res, BlockKind::ResAtt, BlockKind::ResAtt]
}

/// Stable 64-bit FNV-1a of `name`, mixed with `seed`.
pub fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn conv_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

/// Per-layer output shapes (batch 1) from stride arithmetic alone.
pub fn predict_shapes(spec: &ArchitectureSpec, input: [usize; 3]) -> Result<Vec<(String, Shape)>> {
    spec.validate()?;
    let mut out = Vec::new();
    let mut dims = input;
    let mut channels = spec.in_channels;
    let underflow = |stage: String, dims: [usize; 3]| Error::StageUnderflow { stage, input: dims };
    let conv = |dims: [usize; 3], k: usize, s: usize| -> Option<[usize; 3]> {
        Some([conv_out(dims[0], k, s, k / 2)?, conv_out(dims[1], k, s, k / 2)?, conv_out(dims[2], k, s, k / 2)?])
    };
    let pool = |dims: [usize; 3]| -> Option<[usize; 3]> {
        if dims.iter().any(|&v| v < 2) {
            None
        } else {
            Some([dims[0] / 2, dims[1] / 2, dims[2] / 2])
        }
    };
    for (i, c) in spec.stem.iter().enumerate() {
        let name = format!("stem.{i}");
        dims = conv(dims, c.kernel, c.stride).ok_or_else(|| underflow(name.clone(), dims))?;
        channels = c.channels;
        out.push((name, Shape::new(1, channels, dims[0], dims[1], dims[2])));
    }
    for (si, st) in spec.stages.iter().enumerate() {
        let stage = format!("stage{}", si + 1);
        let pooled = st.stride == 2 && st.downsample == Downsample::MaxPool;
        match st.block {
            BlockKind::Vgg => {
                for b in 0..st.blocks {
                    let stride = if b == 0 && !pooled { st.stride } else { 1 };
                    let name = format!("{stage}.conv{b}");
                    dims = conv(dims, 3, stride).ok_or_else(|| underflow(name.clone(), dims))?;
                    channels = st.channels;
                    out.push((name, Shape::new(1, channels, dims[0], dims[1], dims[2])));
                }
                if pooled {
                    let name = format!("{stage}.pool");
                    dims = pool(dims).ok_or_else(|| underflow(name.clone(), dims))?;
                    out.push((name, Shape::new(1, channels, dims[0], dims[1], dims[2])));
                }
            }
            BlockKind::Res | BlockKind::ResAtt => {
                if pooled {
                    let name = format!("{stage}.pool");
                    dims = pool(dims).ok_or_else(|| underflow(name.clone(), dims))?;
                    out.push((name, Shape::new(1, channels, dims[0], dims[1], dims[2])));
                }
                for b in 0..st.blocks {
                    let stride = if b == 0 && !pooled { st.stride } else { 1 };
                    let name = format!("{stage}.block{b}");
                    dims = conv(dims, 3, stride).ok_or_else(|| underflow(name.clone(), dims))?;
                    channels = st.channels;
                    out.push((name, Shape::new(1, channels, dims[0], dims[1], dims[2])));
                }
            }
        }
    }
    out.push(("gap".into(), Shape::new(1, channels, 1, 1, 1)));
    out.push(("fc".into(), Shape::matrix(1, spec.num_classes)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node<T> {
    Conv(ConvUnit<T>),
    Pool(MaxPool3d),
    Res(ResidualBlock<T>),
    GlobalPool,
    Fc(Linear<T>),
}

#[derive(Debug, Clone)]
pub enum NodeCache<T> {
    Conv(ConvUnitCache<T>),
    Pool(MaxPoolCache),
    Res(ResidualCache<T>),
    GlobalPool(Shape),
    Fc(Tensor<T>),
}

impl<T: Element> Node<T> {
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, NodeCache<T>)> {
        Ok(match self {
            Node::Conv(u) => {
                let (y, c) = u.forward(x, mode)?;
                (y, NodeCache::Conv(c))
            }
            Node::Pool(p) => {
                let (y, c) = p.forward(x)?;
                (y, NodeCache::Pool(c))
            }
            Node::Res(b) => {
                let (y, c) = b.forward(x, mode)?;
                (y, NodeCache::Res(c))
            }
            Node::GlobalPool => (global_avg_pool(x), NodeCache::GlobalPool(x.shape())),
            Node::Fc(l) => (l.forward(x)?, NodeCache::Fc(x.clone())),
        })
    }

    pub fn backward(&self, cache: &NodeCache<T>, grad: &Tensor<T>, need_input: bool) -> Result<(Vec<Tensor<T>>, Option<Tensor<T>>)> {
        Ok(match (self, cache) {
            (Node::Conv(u), NodeCache::Conv(c)) => {
                let g = u.backward(c, grad, need_input)?;
                (g.params, g.input)
            }
            (Node::Pool(p), NodeCache::Pool(c)) => (Vec::new(), Some(p.backward(c, grad)?)),
            (Node::Res(b), NodeCache::Res(c)) => {
                let g = b.backward(c, grad, need_input)?;
                (g.params, g.input)
            }
            (Node::GlobalPool, NodeCache::GlobalPool(s)) => (Vec::new(), Some(global_avg_pool_backward(*s, grad)?)),
            (Node::Fc(l), NodeCache::Fc(x)) => {
                let g = l.backward(x, grad)?;
                (g.params, g.input)
            }
            _ => unreachable!("cache does not belong to this node"),
        })
    }

    fn commit(&mut self, cache: &NodeCache<T>) {
        match (self, cache) {
            (Node::Conv(u), NodeCache::Conv(c)) => u.commit(c),
            (Node::Res(b), NodeCache::Res(c)) => b.commit(c),
            _ => {}
        }
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Node::Conv(u) => u.params(),
            Node::Res(b) => b.params(),
            Node::Fc(l) => l.params(),
            Node::Pool(_) | Node::GlobalPool => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Node::Conv(u) => u.params_mut(),
            Node::Res(b) => b.params_mut(),
            Node::Fc(l) => l.params_mut(),
            Node::Pool(_) | Node::GlobalPool => Vec::new(),
        }
    }

    fn param_names(&self) -> Vec<&'static str> {
        match self {
            Node::Conv(u) => u.param_names(),
            Node::Res(b) => b.param_names(),
            Node::Fc(l) => l.param_names(),
            Node::Pool(_) | Node::GlobalPool => Vec::new(),
        }
    }

    fn buffers(&self) -> Vec<&Tensor<T>> {
        match self {
            Node::Conv(u) => u.bn.buffers(),
            Node::Res(b) => b.buffers(),
            _ => Vec::new(),
        }
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Node::Conv(u) => u.bn.buffers_mut(),
            Node::Res(b) => b.buffers_mut(),
            _ => Vec::new(),
        }
    }

    fn buffer_names(&self) -> Vec<&'static str> {
        match self {
            Node::Conv(_) => vec!["bn.running_mean", "bn.running_var"],
            Node::Res(b) => b.buffer_names(),
            _ => Vec::new(),
        }
    }

    /// True when the output is a spatial feature map Grad-CAM can hook.
    fn is_feature_map(&self) -> bool {
        matches!(self, Node::Conv(_) | Node::Pool(_) | Node::Res(_))
    }
}

/// Everything a forward pass leaves behind for backward and hooks.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub mode: Mode,
    caches: Vec<NodeCache<T>>,
    outputs: Vec<Tensor<T>>,
}

impl<T: Element> Trace<T> {
    /// Output of layer `idx`.
    pub fn output(&self, idx: usize) -> &Tensor<T> {
        &self.outputs[idx]
    }

    pub fn logits(&self) -> &Tensor<T> {
        self.outputs.last().expect("model has at least one layer")
    }
}

/// Parameter gradients in [`Model::params`] order, plus the input gradient
/// when requested.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Vec<Tensor<T>>,
    pub input: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ArchitectureSpec,
    input_spatial: [usize; 3],
    seed: u64,
    nodes: Vec<(String, Node<T>)>,
}

impl<T: Element> Model<T> {
    /// Builds and initializes a model for inputs of `input` spatial size.
    /// Initialization of each parameter is seeded from `(seed, name)`.
    pub fn build(spec: &ArchitectureSpec, input: [usize; 3], seed: u64) -> Result<Self> {
        let shapes = predict_shapes(spec, input)?;
        let seed_for = |name: &str| param_seed(seed, name);
        let mut nodes = Vec::new();
        let mut channels = spec.in_channels;
        for (i, c) in spec.stem.iter().enumerate() {
            let name = format!("stem.{i}");
            let unit = ConvUnit::new(channels, c.channels, c.kernel, c.stride, seed_for(&format!("{name}.conv.weight")))?;
            nodes.push((name, Node::Conv(unit)));
            channels = c.channels;
        }
        for (si, st) in spec.stages.iter().enumerate() {
            let stage = format!("stage{}", si + 1);
            let pooled = st.stride == 2 && st.downsample == Downsample::MaxPool;
            if pooled && st.block != BlockKind::Vgg {
                nodes.push((format!("{stage}.pool"), Node::Pool(MaxPool3d::default())));
            }
            for b in 0..st.blocks {
                let stride = if b == 0 && !pooled { st.stride } else { 1 };
                match st.block {
                    BlockKind::Vgg => {
                        let name = format!("{stage}.conv{b}");
                        let unit = ConvUnit::new(channels, st.channels, 3, stride, seed_for(&format!("{name}.conv.weight")))?;
                        nodes.push((name, Node::Conv(unit)));
                    }
                    BlockKind::Res | BlockKind::ResAtt => {
                        let name = format!("{stage}.block{b}");
                        let block = ResidualBlock::new(
                            channels,
                            st.channels,
                            stride,
                            st.block == BlockKind::ResAtt,
                            |suffix| seed_for(&format!("{name}.{suffix}")),
                        )?;
                        nodes.push((name, Node::Res(block)));
                    }
                }
                channels = st.channels;
            }
            if pooled && st.block == BlockKind::Vgg {
                nodes.push((format!("{stage}.pool"), Node::Pool(MaxPool3d::default())));
            }
        }
        nodes.push(("gap".into(), Node::GlobalPool));
        nodes.push(("fc".into(), Node::Fc(Linear::new(channels, spec.num_classes, seed_for("fc.weight"))?)));
        debug_assert_eq!(
            nodes.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(),
            shapes.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>()
        );
        Ok(Model {
            spec: spec.clone(),
            input_spatial: input,
            seed,
            nodes,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn input_spatial(&self) -> [usize; 3] {
        self.input_spatial
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.nodes.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Layers whose output is a spatial feature map.
    pub fn feature_layer_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.is_feature_map())
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Name of the deepest spatial feature map (the last conv layer).
    pub fn last_feature_layer(&self) -> String {
        self.feature_layer_names().pop().expect("every architecture has a stem")
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::UnknownLayer {
                name: name.to_string(),
                available: self.layer_names(),
            })
    }

    pub fn nodes(&self) -> &[(String, Node<T>)] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [(String, Node<T>)] {
        &mut self.nodes
    }

    /// Predicted per-layer shapes for a batch of `n` at the build input size.
    pub fn layer_shapes(&self, n: usize) -> Vec<(String, Shape)> {
        predict_shapes(&self.spec, self.input_spatial)
            .expect("validated at build time")
            .into_iter()
            .map(|(name, s)| (name, s.with_batch(n)))
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.nodes.iter().flat_map(|(_, n)| n.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.nodes.iter_mut().flat_map(|(_, n)| n.params_mut()).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .flat_map(|(name, n)| n.param_names().into_iter().map(move |p| format!("{name}.{p}")))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        self.nodes.iter().flat_map(|(_, n)| n.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.nodes.iter_mut().flat_map(|(_, n)| n.buffers_mut()).collect()
    }

    pub fn buffer_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .flat_map(|(name, n)| n.buffer_names().into_iter().map(move |p| format!("{name}.{p}")))
            .collect()
    }

    /// Every attention layer, in network order.
    pub fn attention_layers_mut(&mut self) -> Vec<&mut crate::attention::SelfAttention3d<T>> {
        self.nodes
            .iter_mut()
            .filter_map(|(_, n)| match n {
                Node::Res(b) => b.attention.as_mut(),
                _ => None,
            })
            .collect()
    }

    /// Copies every parameter and buffer whose name and shape match one in
    /// `other`. Returns how many tensors were copied.
    pub fn copy_shared_from(&mut self, other: &Model<T>) -> usize {
        let mut src: std::collections::HashMap<String, &Tensor<T>> =
            other.state_names().into_iter().zip(other.state_tensors()).collect();
        let names = self.state_names();
        let mut copied = 0;
        for (name, t) in names.iter().zip(self.state_tensors_mut()) {
            if let Some(s) = src.remove(name) {
                if s.shape() == t.shape() {
                    *t = s.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Parameters then buffers, mutable, in [`Model::state_names`] order.
    pub fn state_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        fn split_bn<'a, T>(bn: &'a mut BatchNorm3d<T>, p: &mut Vec<&'a mut Tensor<T>>, b: &mut Vec<&'a mut Tensor<T>>) {
            let BatchNorm3d {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } = bn;
            p.push(gamma);
            p.push(beta);
            b.push(running_mean);
            b.push(running_var);
        }
        let mut params: Vec<&mut Tensor<T>> = Vec::new();
        let mut buffers: Vec<&mut Tensor<T>> = Vec::new();
        for (_, n) in self.nodes.iter_mut() {
            match n {
                Node::Conv(u) => {
                    params.extend(u.conv.params_mut());
                    split_bn(&mut u.bn, &mut params, &mut buffers);
                }
                Node::Res(b) => {
                    let ResidualBlock {
                        conv1,
                        conv2,
                        projection,
                        attention,
                    } = b;
                    for u in [conv1, conv2] {
                        params.extend(u.conv.params_mut());
                        split_bn(&mut u.bn, &mut params, &mut buffers);
                    }
                    if let Some(p) = projection {
                        params.extend(p.conv.params_mut());
                        split_bn(&mut p.bn, &mut params, &mut buffers);
                    }
                    if let Some(a) = attention {
                        params.extend(a.params_mut());
                    }
                }
                Node::Fc(l) => params.extend(l.params_mut()),
                Node::Pool(_) | Node::GlobalPool => {}
            }
        }
        params.extend(buffers);
        params
    }

    /// Names matching [`Model::state_tensors`].
    pub fn state_names(&self) -> Vec<String> {
        self.param_names().into_iter().chain(self.buffer_names()).collect()
    }

    /// Parameters then buffers.
    pub fn state_tensors(&self) -> Vec<&Tensor<T>> {
        self.params().into_iter().chain(self.buffers()).collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().c != self.spec.in_channels {
            return Err(Error::DimensionMismatch {
                op: "model forward",
                detail: format!("input {} has {} channels, model expects {}", x.shape(), x.shape().c, self.spec.in_channels),
            });
        }
        Ok(())
    }

    /// Logits (N, num_classes) without keeping intermediates.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (_, node) in &self.nodes {
            h = node.forward(&h, mode)?.0;
        }
        Ok(h)
    }

    /// Forward pass that records every layer's output and backward cache.
    pub fn forward_trace(&self, x: &Tensor<T>, mode: Mode) -> Result<Trace<T>> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.nodes.len());
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for (_, node) in &self.nodes {
            let input = outputs.last().unwrap_or(x);
            let (y, c) = node.forward(input, mode)?;
            caches.push(c);
            outputs.push(y);
        }
        Ok(Trace { mode, caches, outputs })
    }

    /// Runs the layers after `layer` on a supplied activation of that layer.
    pub fn forward_from(&self, layer: usize, activation: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = activation.clone();
        for (_, node) in &self.nodes[layer + 1..] {
            h = node.forward(&h, mode)?.0;
        }
        Ok(h)
    }

    /// Post-activation output of the named layer.
    pub fn activations_at(&self, x: &Tensor<T>, layer_name: &str, mode: Mode) -> Result<Tensor<T>> {
        let idx = self.layer_index(layer_name)?;
        self.check_input(x)?;
        let mut h = x.clone();
        for (_, node) in &self.nodes[..=idx] {
            h = node.forward(&h, mode)?.0;
        }
        Ok(h)
    }

    /// Applies a train-mode trace's batch statistics to the BN running stats.
    pub fn commit(&mut self, trace: &Trace<T>) {
        if trace.mode != Mode::Train {
            return;
        }
        for ((_, node), cache) in self.nodes.iter_mut().zip(&trace.caches) {
            node.commit(cache);
        }
    }

    /// Backpropagates `grad_logits` through the whole network.
    pub fn backward(&self, trace: &Trace<T>, grad_logits: &Tensor<T>, need_input: bool) -> Result<Gradients<T>> {
        let mut per_node: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        let mut g = grad_logits.clone();
        let mut input = None;
        for (i, ((_, node), cache)) in self.nodes.iter().zip(&trace.caches).enumerate().rev() {
            let want = i > 0 || need_input;
            let (params, dx) = node.backward(cache, &g, want)?;
            per_node.push(params);
            match dx {
                Some(dx) if i > 0 => g = dx,
                dx => input = dx,
            }
        }
        per_node.reverse();
        Ok(Gradients {
            params: per_node.into_iter().flatten().collect(),
            input,
        })
    }

    /// Gradient of the loss w.r.t. the output of layer `layer`.
    pub fn grad_at_layer(&self, trace: &Trace<T>, grad_logits: &Tensor<T>, layer: usize) -> Result<Tensor<T>> {
        let mut g = grad_logits.clone();
        for (i, ((_, node), cache)) in self.nodes.iter().zip(&trace.caches).enumerate().rev() {
            if i == layer {
                break;
            }
            g = node
                .backward(cache, &g, true)?
                .1
                .expect("input gradient requested");
        }
        Ok(g)
    }
}
