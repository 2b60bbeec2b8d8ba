//! Single-network baselines, connection networks, the multi-stage
//! prediction (MSP) composer and the CPM / HNED multi-task baselines.
//!
//! Every model is a list of [`Network`]s in a fixed declaration order;
//! parameters are bound to a tape network by network, in that order.

pub mod checkpoint;
pub mod network;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patches::INPUT_PATCH;
use crate::sh::degree_blocks;
use crate::tensor::{Tape, Tensor, Var};
pub use network::{Activation, FeatureTap, LayerKind, LayerSpec, Network, NetworkSpec, Trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Cnnrish5,
    Shresnet7,
    Diqt,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Cnnrish5, Arch::Shresnet7, Arch::Diqt];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Cnnrish5 => "cnnrish5",
            Arch::Shresnet7 => "shresnet7",
            Arch::Diqt => "diqt",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?} (expected cnnrish5, shresnet7 or diqt)")))
    }
}

/// Hidden widths per architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub cnnrish5: usize,
    pub shresnet7: usize,
    pub diqt: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Self {
            cnnrish5: 32,
            shresnet7: 32,
            diqt: 48,
        }
    }
}

impl Widths {
    /// Narrow preset sized for single-core desk runs.
    pub fn desk() -> Self {
        Self {
            cnnrish5: 16,
            shresnet7: 16,
            diqt: 16,
        }
    }

    pub fn of(&self, arch: Arch) -> usize {
        match arch {
            Arch::Cnnrish5 => self.cnnrish5,
            Arch::Shresnet7 => self.shresnet7,
            Arch::Diqt => self.diqt,
        }
    }
}

/// Layer stack of `arch`. With `sr`, one transposed conv (k=3, s=2, p=2)
/// takes the 11³ input grid to 19³.
pub fn arch_spec(arch: Arch, c_in: usize, c_out: usize, sr: bool, width: usize) -> Result<NetworkSpec> {
    use Activation::{None as Linear, Relu};
    if c_in == 0 || c_out == 0 || width == 0 {
        return Err(Error::Config("channel counts and width must be positive".into()));
    }
    let w = width;
    let mid = |c_in: usize| {
        if sr {
            LayerSpec::upsample(c_in, w, Relu)
        } else {
            LayerSpec::conv(c_in, w, Relu)
        }
    };
    let layers = match arch {
        Arch::Cnnrish5 => vec![
            LayerSpec::conv(c_in, w, Relu),
            LayerSpec::conv(w, w, Relu),
            LayerSpec::conv(w, w, Relu),
            mid(w),
            LayerSpec::conv(w, c_out, Linear),
        ],
        Arch::Shresnet7 => {
            let blocks = degree_blocks(c_in);
            let t = w.div_ceil(blocks.len()).max(2);
            let tower = |first: bool| LayerSpec {
                groups: blocks.iter().map(|&b| (if first { b } else { t }, t)).collect(),
                residual: !first,
                ..LayerSpec::conv(1, 1, Relu)
            };
            let penultimate = if sr { mid(w) } else { LayerSpec::conv(w, w, Relu).with_residual() };
            vec![
                tower(true),
                tower(false),
                tower(false),
                LayerSpec::conv(t * blocks.len(), w, Relu),
                LayerSpec::conv(w, w, Relu).with_residual(),
                penultimate,
                LayerSpec::conv(w, c_out, Linear),
            ]
        }
        Arch::Diqt => vec![
            LayerSpec::conv(c_in, w, Relu),
            LayerSpec::conv(w, w, Relu),
            LayerSpec::conv(w, w, Relu),
            LayerSpec::conv(w, w, Relu),
            mid(w),
            LayerSpec::conv(w, w, Relu),
            LayerSpec::conv(w, w, Relu),
            LayerSpec::conv(w, c_out, Linear),
        ],
    };
    let spec = NetworkSpec {
        layers,
        feature_tap: FeatureTap::PostActivation,
    };
    spec.validate_predictor()?;
    Ok(spec)
}

/// One per-platform network `N_i`: prediction `ŷ` and feature map `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleNet {
    pub arch: Arch,
    pub sr: bool,
    pub net: Network,
}

impl SingleNet {
    pub fn from_spec(arch: Arch, sr: bool, spec: NetworkSpec) -> Result<Self> {
        spec.validate_predictor()?;
        let expect = if sr { 19 } else { INPUT_PATCH };
        let got = spec.output_extent(INPUT_PATCH)?;
        let z = spec.extents(INPUT_PATCH)?[spec.layers.len() - 2];
        if got != expect || z != got {
            return Err(Error::Config(format!(
                "{arch} maps 11³ to {got}³ with features at {z}³; expected {expect}³"
            )));
        }
        Ok(Self {
            arch,
            sr,
            net: Network::zeros(spec)?,
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.net.spec().feature_channels()
    }

    pub fn output_extent(&self) -> usize {
        if self.sr {
            19
        } else {
            INPUT_PATCH
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, vars: &[Var]) -> Result<(Var, Var)> {
        let trace = self.net.forward(tape, x, vars)?;
        Ok((trace.prediction(), self.net.feature(&trace)))
    }

    /// Inference without gradients: `(ŷ, z)`.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.net.bind(&mut tape, false);
        let (y, z) = self.forward(&mut tape, xv, &vars)?;
        Ok((tape.value(y)?.clone(), tape.value(z)?.clone()))
    }
}

pub fn build_single(arch: Arch, c_in: usize, c_out: usize, sr: bool, width: usize, init_seed: u64) -> Result<SingleNet> {
    let spec = arch_spec(arch, c_in, c_out, sr, width)?;
    let mut net = SingleNet::from_spec(arch, sr, spec)?;
    net.net = Network::init(net.net.spec().clone(), init_seed, 0)?;
    Ok(net)
}

/// Two-layer resampler spec from a `z_extent`³ feature map to `target`³.
pub fn connection_spec(z_channels: usize, z_extent: usize, c_out: usize, target: usize, width: usize) -> Result<NetworkSpec> {
    use Activation::{None as Linear, Relu};
    let first = match (z_extent, target) {
        (a, b) if a == b => LayerSpec::conv(z_channels, width, Relu),
        (11, 19) => LayerSpec::upsample(z_channels, width, Relu),
        (19, 11) => LayerSpec::downsample(z_channels, width, Relu),
        (a, b) => {
            return Err(Error::shape(format!(
                "no two-layer resampler maps {a}³ features to a {b}³ target"
            )))
        }
    };
    let spec = NetworkSpec {
        layers: vec![first, LayerSpec::conv(width, c_out, Linear)],
        feature_tap: FeatureTap::PostActivation,
    };
    spec.validate_predictor()?;
    debug_assert_eq!(spec.output_extent(z_extent)?, target);
    Ok(spec)
}

/// Connection network `N_iT` from donor `i`'s features to target `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectionNet {
    pub donor: usize,
    pub net: Network,
}

/// Seed streams for composite models start here so they never collide with
/// the single nets' layer streams.
const CONNECTION_STREAM: u64 = 1 << 12;
const STAGE_STREAM: u64 = 1 << 13;

#[derive(Clone, Debug, PartialEq)]
pub struct MspModel {
    /// Index of the target platform within `nets`.
    pub target: usize,
    /// One single net per non-input platform, in platform order.
    pub nets: Vec<SingleNet>,
    /// One connection net per donor `i ≠ target`, in donor order.
    pub connections: Vec<ConnectionNet>,
    pub alpha: f64,
}

/// Combines pretrained nets with freshly initialized connection nets; α
/// starts at 0.
pub fn build_msp(nets: Vec<Option<SingleNet>>, target: usize, connection_seed: u64) -> Result<MspModel> {
    if nets.len() < 2 {
        return Err(Error::Config("an MSP needs at least two target platforms".into()));
    }
    if target >= nets.len() {
        return Err(Error::Config(format!("target {target} out of range for {} nets", nets.len())));
    }
    let nets = nets
        .into_iter()
        .enumerate()
        .map(|(i, n)| n.ok_or_else(|| Error::Config(format!("missing single net for target platform {i}"))))
        .collect::<Result<Vec<_>>>()?;
    let c_in = nets[0].net.spec().in_channels();
    let c_out = nets[target].net.spec().out_channels();
    if nets.iter().any(|n| n.net.spec().in_channels() != c_in) {
        return Err(Error::shape("single nets disagree on input channels"));
    }
    let target_extent = nets[target].output_extent();
    let mut connections = Vec::new();
    for (i, donor) in nets.iter().enumerate() {
        if i == target {
            continue;
        }
        let zc = donor.feature_channels();
        let spec = connection_spec(zc, donor.output_extent(), c_out, target_extent, zc)?;
        connections.push(ConnectionNet {
            donor: i,
            net: Network::init(spec, connection_seed, CONNECTION_STREAM + 16 * i as u64)?,
        });
    }
    Ok(MspModel {
        target,
        nets,
        connections,
        alpha: 0.0,
    })
}

impl MspModel {
    /// Number of platforms including the input platform.
    pub fn n_platforms(&self) -> usize {
        self.nets.len() + 1
    }

    /// Returns every first-stage prediction and the blended second stage
    /// `(1−α)·ŷ¹_T + α/(P−1)·(Σ_{i≠T} N_iT(z_i) + ŷ¹_T)`.
    pub fn forward(&self, tape: &mut Tape, x: Var, vars: &[Vec<Var>], alpha: f64) -> Result<(Vec<Var>, Var)> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        let mut stage1 = Vec::with_capacity(self.nets.len());
        let mut feats = Vec::with_capacity(self.nets.len());
        for (net, v) in self.nets.iter().zip(vars) {
            let (y, z) = net.forward(tape, x, v)?;
            stage1.push(y);
            feats.push(z);
        }
        let own = stage1[self.target];
        let own_shape = tape.value(own)?.shape().to_vec();
        let mut sum = own;
        for (c, v) in self.connections.iter().zip(&vars[self.nets.len()..]) {
            let out = c.net.forward(tape, feats[c.donor], v)?.prediction();
            if tape.value(out)?.shape() != own_shape.as_slice() {
                return Err(Error::shape(format!(
                    "connection from platform {} yields {:?}, target prediction is {:?}",
                    c.donor,
                    tape.value(out)?.shape(),
                    own_shape
                )));
            }
            sum = tape.add(sum, out)?;
        }
        let mean = tape.scale(sum, 1.0 / (self.n_platforms() - 1) as f32)?;
        let stage2 = tape.linear_blend(own, mean, alpha as f32)?;
        Ok((stage1, stage2))
    }
}

/// Cascade: stage `i` sees the input concatenated with stage `i−1`'s
/// features (strided down to 11³ when they are 19³).
#[derive(Clone, Debug, PartialEq)]
pub struct CpmModel {
    pub target: usize,
    pub stages: Vec<SingleNet>,
    pub adapters: Vec<Option<Network>>,
}

/// Multi-head net: one trunk, head `i` attached after trunk layer `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct HnedModel {
    pub target: usize,
    pub trunk: Network,
    pub heads: Vec<Network>,
}

fn adapter_spec(channels: usize) -> NetworkSpec {
    NetworkSpec {
        layers: vec![LayerSpec::downsample(channels, channels, Activation::Relu)],
        feature_tap: FeatureTap::PostActivation,
    }
}

/// CPM with one cnnrish5-style stage per target platform, in ascending
/// platform order. `scales[i]` is target `i`'s grid factor.
pub fn build_cpm(c: usize, scales: &[usize], target: usize, width: usize, seed: u64) -> Result<CpmModel> {
    check_multitask(scales, target)?;
    let mut stages = Vec::new();
    let mut adapters = Vec::new();
    let mut prev: Option<(usize, bool)> = None;
    for (i, &s) in scales.iter().enumerate() {
        let sr = s == 2;
        let (extra, adapter) = match prev {
            None => (0, None),
            Some((zc, prev_sr)) => (
                zc,
                prev_sr
                    .then(|| Network::init(adapter_spec(zc), seed, STAGE_STREAM + 16 * i as u64 + 8))
                    .transpose()?,
            ),
        };
        let spec = arch_spec(Arch::Cnnrish5, c + extra, c, sr, width)?;
        let mut stage = SingleNet::from_spec(Arch::Cnnrish5, sr, spec)?;
        stage.net = Network::init(stage.net.spec().clone(), seed, STAGE_STREAM + 16 * i as u64)?;
        prev = Some((stage.feature_channels(), sr));
        stages.push(stage);
        adapters.push(adapter);
    }
    Ok(CpmModel {
        target,
        stages,
        adapters,
    })
}

/// HNED with a trunk of `scales.len() + 1` conv layers.
pub fn build_hned(c: usize, scales: &[usize], target: usize, width: usize, seed: u64) -> Result<HnedModel> {
    check_multitask(scales, target)?;
    let mut layers = vec![LayerSpec::conv(c, width, Activation::Relu)];
    layers.extend((0..scales.len()).map(|_| LayerSpec::conv(width, width, Activation::Relu)));
    let trunk = Network::init(
        NetworkSpec {
            layers,
            feature_tap: FeatureTap::PostActivation,
        },
        seed,
        STAGE_STREAM,
    )?;
    let heads = scales
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let spec = connection_spec(width, INPUT_PATCH, c, if s == 2 { 19 } else { INPUT_PATCH }, width)?;
            Network::init(spec, seed, STAGE_STREAM + 16 * (i as u64 + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HnedModel { target, trunk, heads })
}

fn check_multitask(scales: &[usize], target: usize) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::Config("a multi-task model needs at least one target platform".into()));
    }
    if target >= scales.len() {
        return Err(Error::Config(format!("target {target} out of range for {} platforms", scales.len())));
    }
    if let Some(s) = scales.iter().find(|&&s| s != 1 && s != 2) {
        return Err(Error::Config(format!("unsupported platform scale {s}")));
    }
    Ok(())
}

impl CpmModel {
    pub fn forward(&self, tape: &mut Tape, x: Var, vars: &[Vec<Var>]) -> Result<Vec<Var>> {
        let mut preds = Vec::with_capacity(self.stages.len());
        let mut slot = 0;
        let mut prev_z: Option<Var> = None;
        for (stage, adapter) in self.stages.iter().zip(&self.adapters) {
            let input = match prev_z {
                None => x,
                Some(z) => {
                    let z = match adapter {
                        Some(a) => {
                            let out = a.forward(tape, z, &vars[slot])?.prediction();
                            slot += 1;
                            out
                        }
                        None => z,
                    };
                    tape.concat_channels(&[x, z])?
                }
            };
            let (y, z) = stage.forward(tape, input, &vars[slot])?;
            slot += 1;
            preds.push(y);
            prev_z = Some(z);
        }
        Ok(preds)
    }
}

impl HnedModel {
    pub fn forward(&self, tape: &mut Tape, x: Var, vars: &[Vec<Var>]) -> Result<Vec<Var>> {
        let trace = self.trunk.forward(tape, x, &vars[0])?;
        self.heads
            .iter()
            .enumerate()
            .map(|(i, head)| Ok(head.forward(tape, trace.outputs[i + 1], &vars[i + 1])?.prediction()))
            .collect()
    }
}

/// Any trainable model, with the target (index among the non-input
/// platforms) whose prediction it is evaluated on.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Single { target: usize, net: SingleNet },
    Msp(MspModel),
    Cpm(CpmModel),
    Hned(HnedModel),
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// Supervised terms `(target index, prediction)`, each with its own loss.
    pub terms: Vec<(usize, Var)>,
    /// Prediction for the model's evaluation target.
    pub prediction: Var,
}

impl Model {
    pub fn target(&self) -> usize {
        match self {
            Model::Single { target, .. } => *target,
            Model::Msp(m) => m.target,
            Model::Cpm(m) => m.target,
            Model::Hned(m) => m.target,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Single { .. } => "single",
            Model::Msp(_) => "msp",
            Model::Cpm(_) => "cpm",
            Model::Hned(_) => "hned",
        }
    }

    /// Networks in declaration order.
    pub fn networks(&self) -> Vec<&Network> {
        match self {
            Model::Single { net, .. } => vec![&net.net],
            Model::Msp(m) => m.nets.iter().map(|n| &n.net).chain(m.connections.iter().map(|c| &c.net)).collect(),
            Model::Cpm(m) => m
                .stages
                .iter()
                .zip(&m.adapters)
                .flat_map(|(s, a)| a.iter().chain(std::iter::once(&s.net)))
                .collect(),
            Model::Hned(m) => std::iter::once(&m.trunk).chain(&m.heads).collect(),
        }
    }

    pub fn networks_mut(&mut self) -> Vec<&mut Network> {
        match self {
            Model::Single { net, .. } => vec![&mut net.net],
            Model::Msp(m) => m
                .nets
                .iter_mut()
                .map(|n| &mut n.net)
                .chain(m.connections.iter_mut().map(|c| &mut c.net))
                .collect(),
            Model::Cpm(m) => m
                .stages
                .iter_mut()
                .zip(m.adapters.iter_mut())
                .flat_map(|(s, a)| a.iter_mut().chain(std::iter::once(&mut s.net)))
                .collect(),
            Model::Hned(m) => std::iter::once(&mut m.trunk).chain(m.heads.iter_mut()).collect(),
        }
    }

    /// Whether network `i` (declaration order) belongs to a connection net.
    pub fn is_connection(&self, i: usize) -> bool {
        matches!(self, Model::Msp(m) if i >= m.nets.len())
    }

    pub fn parameter_count(&self) -> usize {
        self.networks().iter().flat_map(|n| n.params()).map(Tensor::numel).sum()
    }

    /// Records every network's parameters; `trainable(i)` decides per network.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(usize) -> bool) -> Vec<Vec<Var>> {
        self.networks()
            .iter()
            .enumerate()
            .map(|(i, n)| n.bind(tape, trainable(i)))
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, vars: &[Vec<Var>], alpha: f64) -> Result<Outputs> {
        match self {
            Model::Single { target, net } => {
                let (y, _) = net.forward(tape, x, &vars[0])?;
                Ok(Outputs {
                    terms: vec![(*target, y)],
                    prediction: y,
                })
            }
            Model::Msp(m) => {
                let (stage1, stage2) = m.forward(tape, x, vars, alpha)?;
                let mut terms: Vec<(usize, Var)> = stage1.into_iter().enumerate().collect();
                terms.push((m.target, stage2));
                Ok(Outputs {
                    terms,
                    prediction: stage2,
                })
            }
            Model::Cpm(m) => {
                let preds = m.forward(tape, x, vars)?;
                Ok(Outputs {
                    prediction: preds[m.target],
                    terms: preds.into_iter().enumerate().collect(),
                })
            }
            Model::Hned(m) => {
                let preds = m.forward(tape, x, vars)?;
                Ok(Outputs {
                    prediction: preds[m.target],
                    terms: preds.into_iter().enumerate().collect(),
                })
            }
        }
    }

    /// α used at inference: the MSP's stored blend weight, 0 elsewhere.
    pub fn alpha(&self) -> f64 {
        match self {
            Model::Msp(m) => m.alpha,
            _ => 0.0,
        }
    }

    /// Prediction for the evaluation target, without gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.bind(&mut tape, |_| false);
        let out = self.forward(&mut tape, xv, &vars, self.alpha())?;
        Ok(tape.value(out.prediction)?.clone())
    }

    /// Spatial extent of the evaluation target's prediction.
    pub fn output_extent(&self) -> Result<usize> {
        let spec = match self {
            Model::Single { net, .. } => return Ok(net.output_extent()),
            Model::Msp(m) => return Ok(m.nets[m.target].output_extent()),
            Model::Cpm(m) => return Ok(m.stages[m.target].output_extent()),
            Model::Hned(m) => m.heads[m.target].spec(),
        };
        spec.output_extent(INPUT_PATCH)
    }
}
