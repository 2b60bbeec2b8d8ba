//! ADAM, learning-rate and blend-weight schedules, and the training loop
//! shared by single nets, MSP and the multi-task baselines.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::patch_errors;
use crate::models::{Model, Network};
use crate::patches::{batches, PatchDataset, SplitIndices};
use crate::tensor::{Tape, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments for a list of parameter tensors. Moments are
/// kept in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_params<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        Self::new(&sizes)
    }
}

/// One bias-corrected ADAM update. `lrs[i]` is the step size of parameter
/// `i`; `None` gradients (frozen parameters) are skipped entirely.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Option<&[f32]>], state: &mut AdamState, lrs: &[f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != lrs.len() {
        return Err(Error::shape("parameters, gradients, moments and rates differ in count"));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.len() != params[i].numel() || state.m[i].len() != g.len() {
                return Err(Error::shape(format!("gradient {i} does not match its parameter")));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {i} at element {j} is {}", g[j])));
            }
        }
        if !(lrs[i] >= 0.0) {
            return Err(Error::invalid(format!("learning rate {} for parameter {i}", lrs[i])));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = grads[i] else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = p.data_mut();
        for j in 0..g.len() {
            let gj = g[j] as f64;
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            let step = lrs[i] * (m[j] / c1) / ((v[j] / c2).sqrt() + EPSILON);
            data[j] = (data[j] as f64 - step) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub lr0: f64,
    /// Epochs between √2 decays.
    pub period: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { lr0: 1e-4, period: 15 }
    }
}

impl ScheduleSpec {
    /// `lr0 / √2^⌊epoch / period⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = epoch / self.period.max(1);
        self.lr0 / std::f64::consts::SQRT_2.powi(k as i32)
    }
}

/// Linear ramp of α from 0 at `start` to 1 at `end`, held outside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaSchedule {
    pub start: usize,
    pub end: usize,
}

impl AlphaSchedule {
    pub fn alpha_at(&self, epoch: usize) -> f64 {
        if self.end <= self.start {
            return if epoch >= self.start { 1.0 } else { 0.0 };
        }
        ((epoch as f64 - self.start as f64) / (self.end - self.start) as f64).clamp(0.0, 1.0)
    }

    /// Ramp over the first half of `epochs`.
    pub fn half_of(epochs: usize) -> Self {
        Self {
            start: 0,
            end: epochs / 2,
        }
    }
}

fn default_batch() -> usize {
    12
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Seeds epoch shuffling.
    pub seed: u64,
    pub epochs: usize,
    /// Epochs already trained; shifts the lr schedule, the shuffles and
    /// the recorded epoch numbers.
    #[serde(default)]
    pub epoch_offset: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    /// α schedule for MSP training; defaults to a ramp over half the epochs.
    #[serde(default)]
    pub alpha: Option<AlphaSchedule>,
    /// Holds α fixed instead of following the schedule.
    #[serde(default)]
    pub pin_alpha: Option<f64>,
    /// Trains on this many shuffled patches per epoch instead of all.
    #[serde(default)]
    pub patches_per_epoch: Option<usize>,
    /// Caps the validation patches scored after each epoch.
    #[serde(default)]
    pub val_limit: Option<usize>,
    /// Keeps the MSP's single nets fixed during joint training.
    #[serde(default)]
    pub freeze_single: bool,
    /// Learning-rate multiplier for MSP connection nets.
    #[serde(default = "one")]
    pub connection_lr_scale: f64,
    /// Restores the parameters of the best validation epoch at the end.
    #[serde(default = "yes")]
    pub restore_best: bool,
}

impl TrainConfig {
    pub fn new(seed: u64, epochs: usize) -> Self {
        Self {
            seed,
            epochs,
            epoch_offset: 0,
            batch_size: default_batch(),
            schedule: ScheduleSpec::default(),
            alpha: None,
            pin_alpha: None,
            patches_per_epoch: None,
            val_limit: None,
            freeze_single: false,
            connection_lr_scale: 1.0,
            restore_best: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.schedule.lr0 > 0.0 && self.schedule.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.schedule.period == 0 {
            return bad("decay period must be at least 1 epoch");
        }
        if self.pin_alpha.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
            return bad("pin_alpha must lie in [0, 1]");
        }
        if self.patches_per_epoch == Some(0) || self.val_limit == Some(0) {
            return bad("patches_per_epoch and val_limit must be positive");
        }
        if !(self.connection_lr_scale >= 0.0) {
            return bad("connection_lr_scale must be ≥ 0");
        }
        Ok(())
    }

    pub fn alpha_at(&self, epoch: usize) -> f64 {
        match (self.pin_alpha, self.alpha) {
            (Some(a), _) => a,
            (None, Some(s)) => s.alpha_at(epoch),
            (None, None) => AlphaSchedule::half_of(self.epochs).alpha_at(epoch),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,alpha,train_loss,val_loss\n");
    for r in history {
        writeln!(s, "{},{:?},{:?},{:?},{:?}", r.epoch, r.lr, r.alpha, r.train_loss, r.val_loss).unwrap();
    }
    s
}

/// Evenly spaced subset of at most `limit` indices.
pub fn spread(indices: &[usize], limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < indices.len() => (0..k).map(|i| indices[i * indices.len() / k]).collect(),
        _ => indices.to_vec(),
    }
}

/// Sum of the model's per-term MSE losses on one batch, recorded on `tape`.
pub fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    input: &Tensor,
    targets: &[Tensor],
    alpha: f64,
    trainable: impl Fn(usize) -> bool,
) -> Result<(crate::tensor::Var, Vec<Vec<crate::tensor::Var>>)> {
    let x = tape.constant(input.clone());
    let vars = model.bind(tape, trainable);
    let out = model.forward(tape, x, &vars, alpha)?;
    let mut total = None;
    for &(t, pred) in &out.terms {
        let y = tape.constant(
            targets
                .get(t)
                .ok_or_else(|| Error::invalid(format!("batch has no target {t}")))?
                .clone(),
        );
        let l = tape.mse_loss(pred, y)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    Ok((total.expect("models have at least one term"), vars))
}

fn snapshot(model: &Model) -> Vec<Network> {
    model.networks().into_iter().cloned().collect()
}

fn restore(model: &mut Model, nets: Vec<Network>) {
    for (dst, src) in model.networks_mut().into_iter().zip(nets) {
        *dst = src;
    }
}

/// Trains `model` on `split.train`, scoring `split.test` (capped by
/// `val_limit`) after each epoch with the model's evaluation prediction.
///
/// The per-batch loss is the unweighted sum of MSE over the model's
/// supervised terms. For an MSP, α follows the config by epoch and is
/// stored in the model.
pub fn train_model(
    model: &mut Model,
    dataset: &PatchDataset,
    split: &SplitIndices,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainRun> {
    cfg.validate()?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation sets"));
    }
    let is_msp = matches!(model, Model::Msp(_));
    let n_nets = model.networks().len();
    let frozen: Vec<bool> = (0..n_nets)
        .map(|i| is_msp && cfg.freeze_single && !model.is_connection(i))
        .collect();
    let param_net: Vec<usize> = model
        .networks()
        .iter()
        .enumerate()
        .flat_map(|(i, n)| std::iter::repeat_n(i, n.params().len()))
        .collect();
    let mut state = AdamState::for_params(model.networks().into_iter().flat_map(|n| n.params()));
    let val = spread(&split.test, cfg.val_limit);
    let target = model.target();

    let mut run = TrainRun::default();
    let mut best: Option<(f64, Vec<Network>, f64)> = None;
    for local in 0..cfg.epochs {
        let epoch = local + cfg.epoch_offset;
        let lr = cfg.schedule.lr_at(epoch);
        let alpha = if is_msp { cfg.alpha_at(local) } else { 0.0 };
        if let Model::Msp(m) = model {
            m.alpha = alpha;
        }
        let lrs: Vec<f64> = param_net
            .iter()
            .map(|&i| if model.is_connection(i) { lr * cfg.connection_lr_scale } else { lr })
            .collect();
        let mut order = batches(&split.train, cfg.batch_size, cfg.seed, epoch)?;
        if let Some(k) = cfg.patches_per_epoch {
            order.truncate(k.div_ceil(cfg.batch_size));
        }
        let mut loss_sum = 0.0;
        for idx in &order {
            let batch = dataset.batch(idx)?;
            let mut tape = Tape::new();
            let (loss, vars) = batch_loss(model, &mut tape, &batch.input, &batch.targets, alpha, |i| !frozen[i])?;
            let value = tape.value(loss)?.item()? as f64;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("training loss is {value}"),
                });
            }
            loss_sum += value;
            tape.backward(loss)?;
            let grads: Vec<Option<&[f32]>> = vars.iter().flatten().map(|&v| tape.grad(v)).collect();
            let mut params: Vec<&mut Tensor> = model
                .networks_mut()
                .into_iter()
                .flat_map(|n| n.params_mut().iter_mut())
                .collect();
            adam_step(&mut params, &grads, &mut state, &lrs).map_err(|e| match e {
                Error::NonFinite(detail) => Error::Divergence { epoch, detail },
                other => other,
            })?;
        }
        let mses = patch_errors(&*model, dataset, &val, target, cfg.batch_size)?;
        let val_loss = mses.iter().sum::<f64>() / mses.len() as f64;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("validation loss is {val_loss}"),
            });
        }
        let record = EpochRecord {
            epoch,
            lr,
            alpha,
            train_loss: loss_sum / order.len() as f64,
            val_loss,
        };
        on_epoch(&record);
        run.history.push(record);
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, snapshot(model), alpha));
            run.best_epoch = Some(epoch);
            run.best_val_loss = Some(val_loss);
        }
    }
    if cfg.restore_best {
        if let Some((_, nets, alpha)) = best {
            restore(model, nets);
            if let Model::Msp(m) = model {
                m.alpha = alpha;
            }
        }
    }
    Ok(run)
}
