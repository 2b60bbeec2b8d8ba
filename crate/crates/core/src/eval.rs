//! Patch-MSE evaluation, model × target tables and paired testing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::patches::{extract_into, PatchDataset, INPUT_PATCH, SR_PATCH};
use crate::tensor::Tensor;
use crate::volume::{Mask, Volume};

/// Mean squared error over every element, accumulated in f64.
pub fn patch_mse(pred: &[f32], target: &[f32]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!("prediction has {} values, target {}", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(Error::invalid("empty patch"));
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn tensor_mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    patch_mse(pred.data(), target.data())
}

/// Anything that maps a batch of `[B, C, 11, 11, 11]` inputs to target patches.
pub trait Predictor {
    fn predict_batch(&self, x: &Tensor) -> Result<Tensor>;
    fn output_extent(&self) -> Result<usize>;
}

impl Predictor for Model {
    fn predict_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.predict(x)
    }

    fn output_extent(&self) -> Result<usize> {
        Model::output_extent(self)
    }
}

/// Predicts the input patch unchanged, trilinearly resampled onto the 19³
/// grid for 2× targets.
#[derive(Clone, Copy, Debug)]
pub struct IdentityPredictor {
    pub scale: usize,
}

impl Predictor for IdentityPredictor {
    fn predict_batch(&self, x: &Tensor) -> Result<Tensor> {
        match self.scale {
            1 => Ok(x.clone()),
            2 => upsample_patch(x),
            s => Err(Error::invalid(format!("unsupported scale {s}"))),
        }
    }

    fn output_extent(&self) -> Result<usize> {
        Ok(if self.scale == 2 { SR_PATCH } else { INPUT_PATCH })
    }
}

/// High-res patch voxel `i` sits at low-res patch coordinate `0.5 + i/2`.
fn upsample_patch(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 5 || s[2..] != [INPUT_PATCH; 3] {
        return Err(Error::shape(format!("expected [B, C, 11, 11, 11], got {s:?}")));
    }
    let (lo, hi) = (INPUT_PATCH, SR_PATCH);
    let taps = |i: usize| -> [(usize, f32); 2] {
        if i % 2 == 0 {
            [(i / 2, 0.5), (i / 2 + 1, 0.5)]
        } else {
            [((i + 1) / 2, 1.0), ((i + 1) / 2, 0.0)]
        }
    };
    let planes = s[0] * s[1];
    let mut out = vec![0.0f32; planes * hi * hi * hi];
    for p in 0..planes {
        let src = &x.data()[p * lo * lo * lo..(p + 1) * lo * lo * lo];
        let dst = &mut out[p * hi * hi * hi..(p + 1) * hi * hi * hi];
        for i in 0..hi {
            for j in 0..hi {
                for k in 0..hi {
                    let mut v = 0.0;
                    for (a, wa) in taps(i) {
                        for (b, wb) in taps(j) {
                            for (c, wc) in taps(k) {
                                v += wa * wb * wc * src[(a * lo + b) * lo + c];
                            }
                        }
                    }
                    dst[(i * hi + j) * hi + k] = v;
                }
            }
        }
    }
    Tensor::new(vec![s[0], s[1], hi, hi, hi], out)
}

/// Applies `predictor` to the patch around every masked voxel of a
/// normalized input volume and stitches the centers into a volume on the
/// `scale`× grid: the center voxel for 1× targets, the central 2³ block for
/// 2× targets. Voxels outside the mask stay zero.
pub fn predict_volume(
    predictor: &dyn Predictor,
    input: &Volume,
    mask: &Mask,
    scale: usize,
    batch_size: usize,
) -> Result<Volume> {
    if mask.dims() != input.dims() {
        return Err(Error::shape(format!("mask {:?} vs volume {:?}", mask.dims(), input.dims())));
    }
    let extent = predictor.output_extent()?;
    let expected = match scale {
        1 => INPUT_PATCH,
        2 => SR_PATCH,
        s => return Err(Error::invalid(format!("unsupported scale {s}"))),
    };
    if extent != expected {
        return Err(Error::shape(format!("model predicts {extent}³ patches, a {scale}× grid needs {expected}³")));
    }
    let ch = input.channels();
    let vs = input.voxel_size().map(|v| v / scale as f32);
    let mut out = Volume::zeros(input.dims().map(|d| d * scale), ch, vs)?;
    let centers = mask.coordinates();
    let e3 = extent.pow(3);
    let lo = extent / 2;
    for chunk in centers.chunks(batch_size.max(1)) {
        let mut buf = Vec::with_capacity(chunk.len() * ch * INPUT_PATCH.pow(3));
        for &c in chunk {
            extract_into(input, c, 1, INPUT_PATCH, &mut buf);
        }
        let p = INPUT_PATCH;
        let x = Tensor::new(vec![chunk.len(), ch, p, p, p], buf)?;
        let pred = predictor.predict_batch(&x)?;
        for (b, &c) in chunk.iter().enumerate() {
            let patch = &pred.data()[b * ch * e3..(b + 1) * ch * e3];
            for i in 0..scale {
                for j in 0..scale {
                    for k in 0..scale {
                        let off = ((lo + i) * extent + lo + j) * extent + lo + k;
                        let v = out.voxel_mut(c[0] * scale + i, c[1] * scale + j, c[2] * scale + k);
                        for (cc, slot) in v.iter_mut().enumerate() {
                            *slot = patch[cc * e3 + off];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchError {
    pub patch_index: usize,
    pub subject: usize,
    pub target: String,
    pub mse: f64,
}

/// One MSE per patch in `indices`, in the given order.
pub fn patch_errors(
    predictor: &dyn Predictor,
    dataset: &PatchDataset,
    indices: &[usize],
    target: usize,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    if target >= dataset.n_targets() {
        return Err(Error::invalid(format!("target {target} out of range")));
    }
    if predictor.output_extent()? != dataset.target_sizes()[target] {
        return Err(Error::shape(format!(
            "model predicts {}³ patches, target platform has {}³",
            predictor.output_extent()?,
            dataset.target_sizes()[target]
        )));
    }
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = dataset.batch(chunk)?;
        let pred = predictor.predict_batch(&batch.input)?;
        let truth = &batch.targets[target];
        if pred.shape() != truth.shape() {
            return Err(Error::shape(format!("prediction {:?} vs target {:?}", pred.shape(), truth.shape())));
        }
        let per = truth.numel() / chunk.len();
        for (p, t) in pred.data().chunks(per).zip(truth.data().chunks(per)) {
            out.push(patch_mse(p, t)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub target: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl ReportRow {
    /// `"mean (±std)"` with `precision` decimals.
    pub fn cell(&self, precision: usize) -> String {
        format!("{:.p$} (±{:.p$})", self.mean, self.std, p = precision)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("no values to summarize"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

pub fn summarize(model: &str, target: &str, errors: &[PatchError]) -> Result<ReportRow> {
    let mses: Vec<f64> = errors.iter().map(|e| e.mse).collect();
    let (mean, std) = mean_std(&mses)?;
    Ok(ReportRow {
        model: model.into(),
        target: target.into(),
        n: errors.len(),
        mean,
        std,
    })
}

/// Per-patch errors plus the aggregated row for `target`.
pub fn evaluate_model(
    predictor: &dyn Predictor,
    model_name: &str,
    dataset: &PatchDataset,
    indices: &[usize],
    target: usize,
    target_name: &str,
) -> Result<(Vec<PatchError>, ReportRow)> {
    let mses = patch_errors(predictor, dataset, indices, target, 12)?;
    let errors: Vec<PatchError> = indices
        .iter()
        .zip(mses)
        .map(|(&i, mse)| PatchError {
            patch_index: i,
            subject: dataset.centers()[i].subject,
            target: target_name.into(),
            mse,
        })
        .collect();
    let row = summarize(model_name, target_name, &errors)?;
    Ok((errors, row))
}

pub fn errors_to_csv(errors: &[PatchError]) -> String {
    let mut s = String::from("patch_index,subject,target,mse\n");
    for e in errors {
        writeln!(s, "{},{},{},{:?}", e.patch_index, e.subject, e.target, e.mse).unwrap();
    }
    s
}

pub fn errors_from_csv(text: &str) -> Result<Vec<PatchError>> {
    let mut lines = text.lines();
    if lines.next() != Some("patch_index,subject,target,mse") {
        return Err(Error::invalid("per-patch CSV has an unexpected header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::invalid(format!("per-patch CSV line {}: {line:?}", i + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(PatchError {
                patch_index: f[0].parse().map_err(|_| bad())?,
                subject: f[1].parse().map_err(|_| bad())?,
                target: f[2].to_string(),
                mse: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Rows = models, columns = targets, cells = `"mean (±std)"`.
pub fn render_table(rows: &[ReportRow], precision: usize, scale: f64) -> String {
    let mut models: Vec<&str> = Vec::new();
    let mut targets: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        if !targets.contains(&r.target.as_str()) {
            targets.push(&r.target);
        }
    }
    let cell = |m: &str, t: &str| {
        rows.iter()
            .find(|r| r.model == m && r.target == t)
            .map(|r| {
                ReportRow {
                    mean: r.mean * scale,
                    std: r.std * scale,
                    ..r.clone()
                }
                .cell(precision)
            })
            .unwrap_or_else(|| "-".into())
    };
    let mut grid: Vec<Vec<String>> = vec![std::iter::once("model".to_string())
        .chain(targets.iter().map(|t| t.to_string()))
        .collect()];
    for m in &models {
        grid.push(
            std::iter::once(m.to_string())
                .chain(targets.iter().map(|t| cell(m, t)))
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..grid[0].len())
        .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in grid.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, &w))| {
                let pad = w - v.chars().count();
                if c == 0 {
                    format!("{v}{}", " ".repeat(pad))
                } else {
                    format!("{}{v}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    /// `min(W⁺, W⁻)`.
    pub w: f64,
    /// Pairs with a nonzero difference.
    pub n: usize,
    pub p_value: f64,
    pub p_corrected: f64,
    pub comparisons: usize,
    pub exact: bool,
    pub degenerate: bool,
}

/// Midranks of `|d|` (ascending, ties share the average rank), doubled so
/// they stay integral.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // average of ranks i+1..=j+1, doubled
        let doubled = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        i = j + 1;
    }
    ranks
}

fn nonzero_differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("paired samples contain non-finite values".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).filter(|&d| d != 0.0).collect())
}

/// `(W⁺, W⁻)` as doubled rank sums, plus the doubled ranks.
fn signed_rank_sums(d: &[f64]) -> (u64, u64, Vec<u64>) {
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let plus = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, &r)| r).sum();
    let total: u64 = ranks.iter().sum();
    (plus, total - plus, ranks)
}

/// Exact two-sided p: the fraction of the `2ⁿ` sign assignments whose
/// `min(W⁺, W⁻)` is at most the observed one. Counted by dynamic
/// programming over doubled rank sums.
fn exact_p(ranks: &[u64], w_doubled: u64) -> f64 {
    let total: u64 = ranks.iter().sum();
    let mut counts = vec![0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let lower: f64 = counts[..=w_doubled as usize].iter().sum();
    let all = 2f64.powi(ranks.len() as i32);
    (2.0 * lower / all).min(1.0)
}

fn normal_p(ranks: &[u64], w_doubled: u64) -> f64 {
    let n = ranks.len() as f64;
    let mu = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let w = w_doubled as f64 / 2.0;
    let z = ((mu - w).abs() - 0.5).max(0.0) / var.sqrt();
    let phi = Normal::standard();
    (2.0 * (1.0 - phi.cdf(z))).min(1.0)
}

fn paired(a: &[f64], b: &[f64], m: usize, force_exact: Option<bool>) -> Result<PairedTestResult> {
    if m == 0 {
        return Err(Error::invalid("number of comparisons must be at least 1"));
    }
    let d = nonzero_differences(a, b)?;
    if d.is_empty() {
        return Ok(PairedTestResult {
            w: 0.0,
            n: 0,
            p_value: 1.0,
            p_corrected: 1.0,
            comparisons: m,
            exact: true,
            degenerate: true,
        });
    }
    let (plus, minus, ranks) = signed_rank_sums(&d);
    let w2 = plus.min(minus);
    let exact = force_exact.unwrap_or(d.len() <= 20);
    let p = if exact { exact_p(&ranks, w2) } else { normal_p(&ranks, w2) };
    Ok(PairedTestResult {
        w: w2 as f64 / 2.0,
        n: d.len(),
        p_value: p,
        p_corrected: bonferroni(p, m)?,
        comparisons: m,
        exact,
        degenerate: false,
    })
}

/// Wilcoxon signed-rank test with zero differences dropped and midranks for
/// ties. Exact for up to 20 nonzero pairs, normal approximation with tie
/// and continuity corrections above that. `m` is the Bonferroni factor.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], m: usize) -> Result<PairedTestResult> {
    paired(a, b, m, None)
}

pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<PairedTestResult> {
    paired(a, b, 1, Some(true))
}

pub fn wilcoxon_normal(a: &[f64], b: &[f64]) -> Result<PairedTestResult> {
    paired(a, b, 1, Some(false))
}

pub fn bonferroni(p: f64, m: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("p-value {p} outside [0, 1]")));
    }
    if m == 0 {
        return Err(Error::invalid("number of comparisons must be at least 1"));
    }
    Ok((m as f64 * p).min(1.0))
}
