//! `predict`: whole-volume prediction for one subject.

use log::info;
use msp_core::eval::predict_volume;
use msp_core::models::checkpoint::load_checkpoint;
use msp_core::sh::{denormalize_channels, normalize_channels};
use msp_core::volume::{read_mask, read_volume, write_volume};

use crate::data::{open_manifest, write_json};
use crate::error::{CliError, CliResult};
use crate::{Context, PredictArgs};

/// Normalizes the subject's input volume, predicts every masked voxel and
/// writes the result in the target platform's intensity units.
pub fn cmd_predict(ctx: &Context, args: &PredictArgs) -> CliResult<()> {
    let manifest = open_manifest(&ctx.data)?;
    if args.subject >= manifest.n_subjects() {
        return Err(CliError::Config(format!(
            "subject {} out of range; the cohort has {}",
            args.subject,
            manifest.n_subjects()
        )));
    }
    let (model, meta) = load_checkpoint(&args.checkpoint)?;
    let platform = model.target() + 1;
    if platform >= manifest.n_platforms() {
        return Err(msp_core::Error::Shape(format!("checkpoint target {} is not in the cohort", model.target())).into());
    }
    let input_entry = manifest.entry(args.subject, 0)?;
    let mut input = read_volume(manifest.resolve(&input_entry.volume))?;
    let mask = read_mask(manifest.resolve(&input_entry.mask))?;
    if let Some(stats) = manifest.load_norm_stats(input_entry)? {
        input = normalize_channels(&input, &stats)?;
    }
    let info = &manifest.platforms[platform];
    let mut out = predict_volume(&model, &input, &mask, info.scale, ctx.cfg.eval.batch_size)?;
    if let Some(stats) = manifest.load_norm_stats(manifest.entry(args.subject, platform)?)? {
        out = denormalize_channels(&out, &stats)?;
    }
    let label = if meta.label.is_empty() { model.kind().to_string() } else { meta.label };
    let path = ctx
        .out
        .join(format!("{label}_{}_{}.mspv", info.name, manifest.subjects[args.subject]));
    write_volume(&out, &path)?;
    write_json(&ctx.out.join("predict.config.json"), &ctx.cfg)?;
    info!("wrote {} ({} masked voxels)", path.display(), mask.count());
    Ok(())
}
