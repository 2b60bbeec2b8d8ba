//! Sequential stacks of (optionally grouped) 3D convolutions.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::tensor::conv::{conv_extent, transposed_extent};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv3d,
    TransposedConv3d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

/// Which tensor of the penultimate layer is exposed as the feature map `z`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    #[default]
    PostActivation,
    PreActivation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `(in, out)` channels of each independent group, in channel order. A
    /// plain layer has one group.
    pub groups: Vec<(usize, usize)>,
    pub activation: Activation,
    /// Adds the layer input to its output; needs matching shapes.
    pub residual: bool,
}

impl LayerSpec {
    pub fn conv(c_in: usize, c_out: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Conv3d,
            kernel: 3,
            stride: 1,
            pad: 1,
            groups: vec![(c_in, c_out)],
            activation,
            residual: false,
        }
    }

    /// Transposed conv (k=3, s=2, p=2): 11 → 19.
    pub fn upsample(c_in: usize, c_out: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::TransposedConv3d,
            stride: 2,
            pad: 2,
            ..Self::conv(c_in, c_out, activation)
        }
    }

    /// Strided conv (k=3, s=2, p=2): 19 → 11.
    pub fn downsample(c_in: usize, c_out: usize, activation: Activation) -> Self {
        Self {
            stride: 2,
            pad: 2,
            ..Self::conv(c_in, c_out, activation)
        }
    }

    pub fn with_residual(mut self) -> Self {
        self.residual = true;
        self
    }

    pub fn in_channels(&self) -> usize {
        self.groups.iter().map(|g| g.0).sum()
    }

    pub fn out_channels(&self) -> usize {
        self.groups.iter().map(|g| g.1).sum()
    }

    pub fn out_extent(&self, input: usize) -> Result<usize> {
        match self.kind {
            LayerKind::Conv3d => conv_extent(input, self.kernel, self.stride, self.pad),
            LayerKind::TransposedConv3d => transposed_extent(input, self.kernel, self.stride, self.pad),
        }
    }

    fn kernel_shape(&self, (c_in, c_out): (usize, usize)) -> [usize; 5] {
        let k = self.kernel;
        match self.kind {
            LayerKind::Conv3d => [c_out, c_in, k, k, k],
            LayerKind::TransposedConv3d => [c_in, c_out, k, k, k],
        }
    }

    fn fan_in(&self, c_in: usize) -> f64 {
        let taps = self.kernel.pow(3) as f64;
        match self.kind {
            LayerKind::Conv3d => c_in as f64 * taps,
            LayerKind::TransposedConv3d => c_in as f64 * taps / self.stride.pow(3) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub feature_tap: FeatureTap,
}

impl NetworkSpec {
    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, LayerSpec::out_channels)
    }

    /// Channels of the feature map `z`.
    pub fn feature_channels(&self) -> usize {
        self.layers[self.layers.len() - 2].out_channels()
    }

    /// Spatial extent after every layer, for a cubic input of `input` voxels.
    pub fn extents(&self, input: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut n = input;
        for l in &self.layers {
            n = l.out_extent(n)?;
            out.push(n);
        }
        Ok(out)
    }

    pub fn output_extent(&self, input: usize) -> Result<usize> {
        Ok(*self.extents(input)?.last().unwrap_or(&input))
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.groups.is_empty() || l.groups.iter().any(|&(a, b)| a == 0 || b == 0) {
                return Err(Error::Config(format!("layer {i}: empty channel group")));
            }
            if l.kernel == 0 || l.stride == 0 {
                return Err(Error::Config(format!("layer {i}: kernel and stride must be positive")));
            }
            if i > 0 && l.in_channels() != self.layers[i - 1].out_channels() {
                return Err(Error::Config(format!(
                    "layer {i} takes {} channels but layer {} emits {}",
                    l.in_channels(),
                    i - 1,
                    self.layers[i - 1].out_channels()
                )));
            }
            if l.residual && l.groups.iter().any(|&(a, b)| a != b) {
                return Err(Error::Config(format!("layer {i}: residual needs equal in/out channels")));
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the rules for a network whose last
    /// layer is a prediction: at least two layers, no final activation.
    pub fn validate_predictor(&self) -> Result<()> {
        self.validate()?;
        if self.layers.len() < 2 {
            return Err(Error::Config("a predictor needs at least two layers".into()));
        }
        if self.layers.last().unwrap().activation != Activation::None {
            return Err(Error::Config("the last layer must not have an activation".into()));
        }
        Ok(())
    }

    /// Parameter shapes in declaration order: per layer, per group, kernel
    /// then bias.
    pub fn parameter_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for l in &self.layers {
            for &g in &l.groups {
                out.push(l.kernel_shape(g).to_vec());
                out.push(vec![g.1]);
            }
        }
        out
    }
}

/// Values recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Output of each layer (after activation and residual).
    pub outputs: Vec<Var>,
    /// Output of each layer before activation and residual.
    pub pre_activation: Vec<Var>,
}

impl Trace {
    pub fn prediction(&self) -> Var {
        *self.outputs.last().expect("non-empty network")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Tensor>,
}

impl Network {
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let params = spec.parameter_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self { spec, params })
    }

    /// He-normal kernels (std `√(2/fan_in)` before a ReLU, `√(1/fan_in)`
    /// otherwise) and zero biases. Stream `(seed, stream_base + layer, group)`.
    pub fn init(spec: NetworkSpec, seed: u64, stream_base: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut slot = 0;
        for (li, l) in net.spec.layers.iter().enumerate() {
            for (gi, &(c_in, _)) in l.groups.iter().enumerate() {
                let gain = if l.activation == Activation::Relu { 2.0 } else { 1.0 };
                let std = (gain / l.fan_in(c_in)).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut rng = stream(seed, Domain::Init, stream_base + li as u64, gi as u64);
                let kernel = &net.params[slot];
                let data = (0..kernel.numel()).map(|_| normal.sample(&mut rng) as f32).collect();
                net.params[slot] = Tensor::new(kernel.shape().to_vec(), data)?;
                slot += 2;
            }
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Replaces all parameters, checking count and shapes.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} parameter tensors for a network with {}",
                params.len(),
                self.params.len()
            )));
        }
        for (i, (new, old)) in params.iter().zip(&self.params).enumerate() {
            if new.shape() != old.shape() {
                return Err(Error::shape(format!(
                    "parameter {i}: shape {:?}, expected {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Records the parameters on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, vars: &[Var]) -> Result<Trace> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid("parameter bindings do not match the network"));
        }
        let mut h = x;
        let mut slot = 0;
        let mut trace = Trace {
            outputs: Vec::with_capacity(self.spec.layers.len()),
            pre_activation: Vec::with_capacity(self.spec.layers.len()),
        };
        for l in &self.spec.layers {
            let pre = if l.groups.len() == 1 {
                let y = apply(tape, l, h, vars[slot], vars[slot + 1])?;
                slot += 2;
                y
            } else {
                let mut parts = Vec::with_capacity(l.groups.len());
                let mut start = 0;
                for &(c_in, _) in &l.groups {
                    let part = tape.slice_channels(h, start, c_in)?;
                    parts.push(apply(tape, l, part, vars[slot], vars[slot + 1])?);
                    slot += 2;
                    start += c_in;
                }
                tape.concat_channels(&parts)?
            };
            let mut out = match l.activation {
                Activation::Relu => tape.relu(pre)?,
                Activation::None => pre,
            };
            if l.residual {
                out = tape.add(out, h)?;
            }
            trace.pre_activation.push(pre);
            trace.outputs.push(out);
            h = out;
        }
        Ok(trace)
    }

    /// The feature map `z` of a trace, per the spec's tap setting.
    pub fn feature(&self, trace: &Trace) -> Var {
        let i = self.spec.layers.len() - 2;
        match self.spec.feature_tap {
            FeatureTap::PostActivation => trace.outputs[i],
            FeatureTap::PreActivation => trace.pre_activation[i],
        }
    }
}

fn apply(tape: &mut Tape, l: &LayerSpec, x: Var, kernel: Var, bias: Var) -> Result<Var> {
    match l.kind {
        LayerKind::Conv3d => tape.conv3d(x, kernel, bias, l.stride, l.pad),
        LayerKind::TransposedConv3d => tape.transposed_conv3d(x, kernel, bias, l.stride, l.pad),
    }
}
