//! `evaluate` and `compare`: per-patch errors, the model × target table and
//! paired Wilcoxon tests.

use std::path::{Path, PathBuf};

use log::info;
use msp_core::eval::{
    errors_to_csv, evaluate_model, render_table, wilcoxon_signed_rank, IdentityPredictor, PairedTestResult, Predictor,
    ReportRow,
};
use msp_core::models::checkpoint::load_checkpoint;
use msp_core::train::spread;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{write_file, write_json, Cohort, Splits};
use crate::error::{CliError, CliResult};
use crate::train::CHECKPOINT_EXT;
use crate::{Context, EvalArgs};

/// `.mspc` files in `dir`, sorted by name.
pub fn checkpoint_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == CHECKPOINT_EXT) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredRow {
    #[serde(flatten)]
    pub row: ReportRow,
    /// File name of the checkpoint; absent for identity rows.
    pub checkpoint: Option<String>,
    pub checkpoint_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedTest {
    pub target: String,
    pub model_a: String,
    pub model_b: String,
    pub mean_a: f64,
    pub mean_b: f64,
    #[serde(flatten)]
    pub result: PairedTestResult,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub dataset_digest: String,
    pub test_patches: usize,
    pub rows: Vec<ScoredRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tests: Option<Vec<PairedTest>>,
}

struct Candidate {
    name: String,
    target: usize,
    predictor: Box<dyn Predictor>,
    checkpoint: Option<(String, String)>,
}

pub fn cmd_evaluate(ctx: &Context, args: &EvalArgs, compare: bool) -> CliResult<()> {
    let cohort = Cohort::load(&ctx.data)?;
    let splits = Splits::new(&ctx.cfg, &cohort.dataset)?;
    let test = spread(&splits.test, ctx.cfg.eval.limit);
    let wanted: Vec<usize> = if args.target.is_empty() {
        (0..cohort.n_targets()).collect()
    } else {
        args.target.iter().map(|t| cohort.target_index(t)).collect::<CliResult<_>>()?
    };

    let mut candidates = Vec::new();
    if args.identity {
        for &t in &wanted {
            candidates.push(Candidate {
                name: "identity".into(),
                target: t,
                predictor: Box::new(IdentityPredictor {
                    scale: cohort.target_scale(t),
                }),
                checkpoint: None,
            });
        }
    }
    let mut files = Vec::new();
    for p in &args.checkpoints {
        if p.is_dir() {
            files.extend(checkpoint_files(p)?);
        } else {
            files.push(p.clone());
        }
    }
    for path in files {
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        let (model, meta) = load_checkpoint(&path)?;
        let target = model.target();
        if target >= cohort.n_targets() {
            return Err(msp_core::Error::Shape(format!(
                "{} predicts target {target}, the cohort has {}",
                path.display(),
                cohort.n_targets()
            ))
            .into());
        }
        if !meta.target_platform.is_empty() && meta.target_platform != cohort.target_name(target) {
            return Err(CliError::Config(format!(
                "{} was trained for {}, which is target {target} of a different cohort",
                path.display(),
                meta.target_platform
            )));
        }
        if !wanted.contains(&target) {
            continue;
        }
        let label = if meta.label.is_empty() { model.kind().to_string() } else { meta.label };
        let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        candidates.push(Candidate {
            name: label,
            target,
            predictor: Box::new(model) as Box<dyn Predictor>,
            checkpoint: Some((file, hex::encode(Sha256::digest(&bytes)))),
        });
    }
    if candidates.is_empty() {
        return Err(CliError::Config("nothing to evaluate; pass checkpoints or --identity".into()));
    }
    for i in 1..candidates.len() {
        let taken = |n: &str| candidates[..i].iter().any(|c| c.target == candidates[i].target && c.name == n);
        if taken(&candidates[i].name) {
            let base = candidates[i].name.clone();
            let name = (2..).map(|k| format!("{base}#{k}")).find(|n| !taken(n)).expect("unbounded");
            candidates[i].name = name;
        }
    }

    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for c in &candidates {
        let platform = cohort.target_name(c.target);
        let (errs, row) = evaluate_model(c.predictor.as_ref(), &c.name, &cohort.dataset, &test, c.target, platform)?;
        info!("{} on {platform}: mean {:.6} over {} patches", c.name, row.mean, row.n);
        write_file(
            &ctx.out.join("errors").join(format!("{}_{platform}.csv", c.name)),
            errors_to_csv(&errs),
        )?;
        errors.push(errs.iter().map(|e| e.mse).collect::<Vec<f64>>());
        rows.push(ScoredRow {
            row,
            checkpoint: c.checkpoint.as_ref().map(|x| x.0.clone()),
            checkpoint_sha256: c.checkpoint.as_ref().map(|x| x.1.clone()),
        });
    }

    let tests = if compare {
        let m = ctx.cfg.eval.comparisons.unwrap_or(cohort.n_targets());
        let mut tests = Vec::new();
        for &t in &wanted {
            let on: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].target == t).collect();
            for (k, &i) in on.iter().enumerate() {
                for &j in &on[k + 1..] {
                    tests.push(PairedTest {
                        target: cohort.target_name(t).to_string(),
                        model_a: candidates[i].name.clone(),
                        model_b: candidates[j].name.clone(),
                        mean_a: rows[i].row.mean,
                        mean_b: rows[j].row.mean,
                        result: wilcoxon_signed_rank(&errors[i], &errors[j], m)?,
                    });
                }
            }
        }
        Some(tests)
    } else {
        None
    };

    let plain: Vec<ReportRow> = rows.iter().map(|r| r.row.clone()).collect();
    let mut text = render_table(&plain, ctx.cfg.eval.precision, ctx.cfg.eval.scale);
    if let Some(tests) = &tests {
        text.push('\n');
        text.push_str(&render_tests(tests));
    }
    let report = Report {
        dataset_digest: cohort.digest().to_string(),
        test_patches: test.len(),
        rows,
        tests,
    };
    write_json(&ctx.out.join("report.json"), &report)?;
    write_file(&ctx.out.join("table.txt"), &text)?;
    write_json(&ctx.out.join(if compare { "compare.config.json" } else { "evaluate.config.json" }), &ctx.cfg)?;
    print!("{text}");
    Ok(())
}

/// One line per test: target, pair, W, n, raw and corrected p.
pub fn render_tests(tests: &[PairedTest]) -> String {
    let mut out = String::from("wilcoxon signed-rank (two-sided, bonferroni-corrected)\n");
    for t in tests {
        let r = &t.result;
        out.push_str(&format!(
            "{}: {} vs {}  W={} n={} p={:.3e} p_corr={:.3e}{}{}\n",
            t.target,
            t.model_a,
            t.model_b,
            r.w,
            r.n,
            r.p_value,
            r.p_corrected,
            if r.exact { " exact" } else { " normal" },
            if r.degenerate { " degenerate" } else { "" }
        ));
    }
    out
}
