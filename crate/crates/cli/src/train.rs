//! `train`: single nets, MSPs (with automatic pretraining), CPM and HNED.

use std::path::{Path, PathBuf};

use log::{info, warn};
use msp_core::models::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use msp_core::models::{build_cpm, build_hned, build_msp, build_single, Arch, Model, SingleNet};
use msp_core::train::{history_csv, train_model, EpochRecord, TrainRun};
use serde::Serialize;

use crate::data::{create_dir, read_text, write_file, write_json, Cohort, Splits};
use crate::error::{CliError, CliResult};
use crate::{Context, Mode, TrainArgs};

pub const CHECKPOINT_EXT: &str = "mspc";

pub fn checkpoint_path(dir: &Path, label: &str, platform: &str) -> PathBuf {
    dir.join(format!("{label}_{platform}.{CHECKPOINT_EXT}"))
}

pub fn history_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("history.csv")
}

#[derive(Serialize)]
struct ResolvedTrain<'a> {
    command: &'static str,
    mode: String,
    target: &'a str,
    pretrained: Option<&'a Path>,
    epochs: usize,
    data: &'a Path,
    config: &'a crate::RunConfig,
}

pub fn cmd_train(ctx: &Context, args: &TrainArgs) -> CliResult<()> {
    let cohort = Cohort::load(&ctx.data)?;
    let target = cohort.target_index(&args.target)?;
    let splits = Splits::new(&ctx.cfg, &cohort.dataset)?;
    let epochs = args.epochs.unwrap_or(ctx.cfg.train.epochs);
    write_json(
        &ctx.out.join(format!("train_{}_{}.config.json", mode_label(args.mode), args.target)),
        &ResolvedTrain {
            command: "train",
            mode: args.mode.to_string(),
            target: &args.target,
            pretrained: args.pretrained.as_deref(),
            epochs,
            data: &ctx.data,
            config: &ctx.cfg,
        },
    )?;
    let trainer = Trainer {
        ctx,
        cohort: &cohort,
        splits: &splits,
    };
    match args.mode {
        Mode::Single(arch) => {
            let (model, prior) = match &args.pretrained {
                Some(dir) => {
                    let path = checkpoint_path(dir, arch.name(), &args.target);
                    let (model, meta) = load_checkpoint(&path)?;
                    match &model {
                        Model::Single { target: t, net } if *t == target && net.arch == arch => {}
                        _ => {
                            return Err(CliError::Config(format!(
                                "{} is not a {arch} checkpoint for {}",
                                path.display(),
                                args.target
                            )))
                        }
                    }
                    (model, Some(Prior::read(&path, meta)?))
                }
                None => (trainer.fresh_single(arch, target)?, None),
            };
            trainer.fit(model, arch.name(), target, epochs, prior, &ctx.out)?;
        }
        Mode::Msp => {
            let nets = match &args.pretrained {
                Some(dir) => best_singles(dir, &cohort)?,
                None => {
                    let pre = ctx.out.join("pre");
                    create_dir(&pre)?;
                    let arch = ctx.cfg.train.pretrain_arch;
                    info!("pretraining {arch} for every target platform into {}", pre.display());
                    (0..cohort.n_targets())
                        .map(|t| {
                            let model = trainer.fresh_single(arch, t)?;
                            let path = trainer.fit(model, arch.name(), t, ctx.cfg.train.pretrain_epochs, None, &pre)?;
                            let (model, meta) = load_checkpoint(&path)?;
                            Ok((model, Prior::read(&path, meta)?))
                        })
                        .collect::<CliResult<Vec<_>>>()?
                }
            };
            let prior = nets[target].1.clone();
            let singles: Vec<Option<SingleNet>> = nets
                .into_iter()
                .map(|(m, _)| match m {
                    Model::Single { net, .. } => Some(net),
                    _ => None,
                })
                .collect();
            let msp = build_msp(singles, target, ctx.cfg.train.connection_seed)?;
            trainer.fit(Model::Msp(msp), "msp", target, epochs, Some(prior), &ctx.out)?;
        }
        Mode::Cpm | Mode::Hned => {
            let c = cohort.dataset.channels();
            let scales = cohort.dataset.target_scales();
            let width = ctx.cfg.train.widths.of(Arch::Cnnrish5);
            let seed = ctx.cfg.train.init_seed;
            let (model, label) = if args.mode == Mode::Cpm {
                (Model::Cpm(build_cpm(c, scales, target, width, seed)?), "cpm")
            } else {
                (Model::Hned(build_hned(c, scales, target, width, seed)?), "hned")
            };
            trainer.fit(model, label, target, epochs, None, &ctx.out)?;
        }
    }
    Ok(())
}

fn mode_label(mode: Mode) -> String {
    match mode {
        Mode::Single(a) => a.name().to_string(),
        m => m.to_string(),
    }
}

/// Earlier training of a model that a run builds on.
#[derive(Clone, Debug)]
struct Prior {
    epochs: usize,
    history: Option<String>,
}

impl Prior {
    fn read(checkpoint: &Path, meta: CheckpointMeta) -> CliResult<Self> {
        let h = history_path(checkpoint);
        let history = if h.exists() {
            Some(read_text(&h)?)
        } else {
            warn!("no history next to {}", checkpoint.display());
            None
        };
        Ok(Self {
            epochs: meta.epochs,
            history,
        })
    }
}

struct Trainer<'a> {
    ctx: &'a Context,
    cohort: &'a Cohort,
    splits: &'a Splits,
}

impl Trainer<'_> {
    fn fresh_single(&self, arch: Arch, target: usize) -> CliResult<Model> {
        let c = self.cohort.dataset.channels();
        let t = &self.ctx.cfg.train;
        let sr = self.cohort.target_scale(target) == 2;
        let net = build_single(arch, c, c, sr, t.widths.of(arch), t.init_seed)?;
        Ok(Model::Single { target, net })
    }

    /// Trains and writes `<label>_<platform>.mspc` and its history under
    /// `dir`; the history continues `prior`'s.
    fn fit(
        &self,
        mut model: Model,
        label: &str,
        target: usize,
        epochs: usize,
        prior: Option<Prior>,
        dir: &Path,
    ) -> CliResult<PathBuf> {
        let platform = self.cohort.target_name(target).to_string();
        let offset = prior.as_ref().map_or(0, |p| p.epochs);
        let cfg = self.ctx.cfg.train.train_config(epochs, offset);
        info!(
            "training {label} for {platform}: {} parameters, epochs {offset}..{}",
            model.parameter_count(),
            offset + epochs
        );
        let split = self.splits.for_training(cfg.seed);
        let run: TrainRun = train_model(&mut model, &self.cohort.dataset, &split, &cfg, |r: &EpochRecord| {
            info!(
                "{label}/{platform} epoch {} lr {:.3e} alpha {:.2} train {:.5} val {:.5}",
                r.epoch, r.lr, r.alpha, r.train_loss, r.val_loss
            )
        })?;
        let meta = CheckpointMeta {
            label: label.to_string(),
            target_platform: platform.clone(),
            epochs: offset + epochs,
            best_epoch: run.best_epoch,
            val_loss: run.best_val_loss,
            dataset_digest: self.cohort.digest().to_string(),
        };
        let path = checkpoint_path(dir, label, &platform);
        save_checkpoint(&model, &meta, &path)?;
        let fresh = history_csv(&run.history);
        let history = match prior.and_then(|p| p.history) {
            Some(before) => before + fresh.split_once('\n').map_or("", |(_, rows)| rows),
            None => fresh,
        };
        write_file(&history_path(&path), history)?;
        info!("wrote {}", path.display());
        Ok(path)
    }
}

/// For each target platform, the single-net checkpoint in `dir` with the
/// lowest recorded validation loss.
fn best_singles(dir: &Path, cohort: &Cohort) -> CliResult<Vec<(Model, Prior)>> {
    let mut best: Vec<Option<(f64, Model, Prior, PathBuf)>> = vec![None; cohort.n_targets()];
    for path in crate::report::checkpoint_files(dir)? {
        let (model, meta) = load_checkpoint(&path)?;
        let Model::Single { target, .. } = &model else {
            continue;
        };
        let target = *target;
        if target >= cohort.n_targets() || meta.target_platform != cohort.target_name(target) {
            continue;
        }
        let loss = meta.val_loss.unwrap_or(f64::INFINITY);
        if best[target].as_ref().is_none_or(|b| loss < b.0) {
            let prior = Prior::read(&path, meta)?;
            best[target] = Some((loss, model, prior, path));
        }
    }
    best.into_iter()
        .enumerate()
        .map(|(t, b)| match b {
            Some((_, model, prior, path)) => {
                info!("{}: using {}", cohort.target_name(t), path.display());
                Ok((model, prior))
            }
            None => Err(CliError::Config(format!(
                "{} has no single-net checkpoint for {}",
                dir.display(),
                cohort.target_name(t)
            ))),
        })
        .collect()
}
