//! Model checkpoints.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MSPC"
//! 4       4     version (u32 LE)
//! 8       4     header length H (u32 LE)
//! 12      H     JSON header {"descriptor": …, "meta": …}
//! 12+H    4     tensor count (u32 LE)
//! then per tensor, in declaration order:
//!         4     rank r (u32 LE)
//!         4·r   dims (u32 LE)
//!         4·n   values (f32 LE)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, ConnectionNet, CpmModel, HnedModel, Model, MspModel, Network, NetworkSpec, SingleNet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{read_all, write_all};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleDescriptor {
    pub arch: Arch,
    pub sr: bool,
    pub spec: NetworkSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionDescriptor {
    pub donor: usize,
    pub spec: NetworkSpec,
}

/// Structure of a model without its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelDescriptor {
    Single {
        target: usize,
        #[serde(flatten)]
        net: SingleDescriptor,
    },
    Msp {
        target: usize,
        alpha: f64,
        nets: Vec<SingleDescriptor>,
        connections: Vec<ConnectionDescriptor>,
    },
    Cpm {
        target: usize,
        stages: Vec<SingleDescriptor>,
        adapters: Vec<Option<NetworkSpec>>,
    },
    Hned {
        target: usize,
        trunk: NetworkSpec,
        heads: Vec<NetworkSpec>,
    },
}

/// Free-form provenance stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub target_platform: String,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default)]
    pub best_epoch: Option<usize>,
    #[serde(default)]
    pub val_loss: Option<f64>,
    #[serde(default)]
    pub dataset_digest: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    descriptor: ModelDescriptor,
    meta: CheckpointMeta,
}

fn single_descriptor(n: &SingleNet) -> SingleDescriptor {
    SingleDescriptor {
        arch: n.arch,
        sr: n.sr,
        spec: n.net.spec().clone(),
    }
}

fn single_from(d: &SingleDescriptor) -> Result<SingleNet> {
    SingleNet::from_spec(d.arch, d.sr, d.spec.clone())
}

impl Model {
    pub fn descriptor(&self) -> ModelDescriptor {
        match self {
            Model::Single { target, net } => ModelDescriptor::Single {
                target: *target,
                net: single_descriptor(net),
            },
            Model::Msp(m) => ModelDescriptor::Msp {
                target: m.target,
                alpha: m.alpha,
                nets: m.nets.iter().map(single_descriptor).collect(),
                connections: m
                    .connections
                    .iter()
                    .map(|c| ConnectionDescriptor {
                        donor: c.donor,
                        spec: c.net.spec().clone(),
                    })
                    .collect(),
            },
            Model::Cpm(m) => ModelDescriptor::Cpm {
                target: m.target,
                stages: m.stages.iter().map(single_descriptor).collect(),
                adapters: m.adapters.iter().map(|a| a.as_ref().map(|n| n.spec().clone())).collect(),
            },
            Model::Hned(m) => ModelDescriptor::Hned {
                target: m.target,
                trunk: m.trunk.spec().clone(),
                heads: m.heads.iter().map(|h| h.spec().clone()).collect(),
            },
        }
    }

    /// Builds the described model with all-zero parameters.
    pub fn from_descriptor(d: &ModelDescriptor) -> Result<Model> {
        let in_range = |t: usize, n: usize| {
            if t < n {
                Ok(())
            } else {
                Err(Error::Config(format!("target {t} out of range for {n} outputs")))
            }
        };
        Ok(match d {
            ModelDescriptor::Single { target, net } => Model::Single {
                target: *target,
                net: single_from(net)?,
            },
            ModelDescriptor::Msp {
                target,
                alpha,
                nets,
                connections,
            } => {
                in_range(*target, nets.len())?;
                if !(0.0..=1.0).contains(alpha) {
                    return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
                }
                let nets = nets.iter().map(single_from).collect::<Result<Vec<_>>>()?;
                let connections = connections
                    .iter()
                    .map(|c| {
                        in_range(c.donor, nets.len())?;
                        Ok(ConnectionNet {
                            donor: c.donor,
                            net: Network::zeros(c.spec.clone())?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                if connections.len() + 1 != nets.len() {
                    return Err(Error::Config("an MSP needs one connection per non-target net".into()));
                }
                Model::Msp(MspModel {
                    target: *target,
                    nets,
                    connections,
                    alpha: *alpha,
                })
            }
            ModelDescriptor::Cpm {
                target,
                stages,
                adapters,
            } => {
                in_range(*target, stages.len())?;
                if adapters.len() != stages.len() {
                    return Err(Error::Config("one adapter slot per CPM stage required".into()));
                }
                Model::Cpm(CpmModel {
                    target: *target,
                    stages: stages.iter().map(single_from).collect::<Result<_>>()?,
                    adapters: adapters
                        .iter()
                        .map(|a| a.clone().map(Network::zeros).transpose())
                        .collect::<Result<_>>()?,
                })
            }
            ModelDescriptor::Hned { target, trunk, heads } => {
                in_range(*target, heads.len())?;
                if trunk.layers.len() < heads.len() + 1 {
                    return Err(Error::Config("HNED trunk is shorter than its head taps".into()));
                }
                Model::Hned(HnedModel {
                    target: *target,
                    trunk: Network::zeros(trunk.clone())?,
                    heads: heads.iter().cloned().map(Network::zeros).collect::<Result<_>>()?,
                })
            }
        })
    }
}

pub fn encode_checkpoint(model: &Model, meta: &CheckpointMeta) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        descriptor: model.descriptor(),
        meta: meta.clone(),
    })
    .expect("checkpoint header serializes");
    let params: Vec<&Tensor> = model.networks().into_iter().flat_map(|n| n.params()).collect();
    let mut out = Vec::with_capacity(16 + header.len() + 4 * model.parameter_count() + 32 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for t in params {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    write_all(path.as_ref(), &encode_checkpoint(model, meta))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format { detail, .. } => Error::Format {
            path: path.to_path_buf(),
            detail,
        },
        other => other,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let bad = |detail: String| Error::Format {
        path: Default::default(),
        detail,
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos.checked_add(n).ok_or_else(|| bad("length overflow".into()))?)
            .ok_or_else(|| bad("truncated checkpoint".into()))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic, expected MSPC".into()));
    }
    let word = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let version = word(take(4)?);
    if version != CHECKPOINT_VERSION as usize {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = word(take(4)?);
    let header: Header =
        serde_json::from_slice(take(hlen)?).map_err(|e| bad(format!("invalid header: {e}")))?;
    let mut model = Model::from_descriptor(&header.descriptor)?;
    let count = word(take(4)?);
    let expected: usize = model.networks().iter().map(|n| n.params().len()).sum();
    if count != expected {
        return Err(bad(format!("{count} tensors stored, model declares {expected}")));
    }
    for net in model.networks_mut() {
        let mut params = Vec::with_capacity(net.params().len());
        for _ in 0..net.params().len() {
            let rank = word(take(4)?);
            if rank > 8 {
                return Err(bad(format!("tensor rank {rank} is implausible")));
            }
            let shape: Vec<usize> = (0..rank).map(|_| take(4).map(word)).collect::<Result<_>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("tensor size overflow".into()))?;
            let raw = take(n.checked_mul(4).ok_or_else(|| bad("tensor size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            params.push(Tensor::new(shape, data)?);
        }
        net.set_params(params)?;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after parameters".into()));
    }
    Ok((model, header.meta))
}
