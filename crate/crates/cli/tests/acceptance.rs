//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! The learning criteria train every single-net baseline for every target
//! platform plus one MSP per target through the `msp` binary, which takes
//! on the order of an hour on one core.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use msp_core::eval::{errors_from_csv, mean_std, wilcoxon_exact, wilcoxon_signed_rank};
use msp_core::models::checkpoint::{encode_checkpoint, load_checkpoint};
use msp_core::models::{build_msp, build_single, connection_spec, Arch, LayerKind, Model, MspModel, Network, SingleNet};
use msp_core::patches::{batches, extract_patches, split, INPUT_PATCH, SR_PATCH};
use msp_core::sh::{eval_sh, fit_sh, n_coefficients, DirectionSet, ShCoefficients};
use msp_core::tensor::conv::{conv3d, transposed_conv3d};
use msp_core::train::{AlphaSchedule, ScheduleSpec};
use msp_core::volume::manifest::load_manifest;
use msp_core::volume::{read_mask, read_volume, write_volume};
use msp_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Verdict = Result<String, String>;

/// Epochs of single-net pretraining shared by both arms of the comparison.
const PRETRAIN_EPOCHS: usize = 20;
/// Further epochs given to each baseline and to each MSP.
const JOINT_EPOCHS: usize = 10;
const MAX_EPOCHS: usize = 30;
const MAX_TRAIN_TIME: Duration = Duration::from_secs(600);
const TARGETS: [&str; 3] = ["modern_st_a", "modern_st_b", "modern_sa"];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn msp(args: &[&str]) -> Result<Duration, String> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_msp"))
        .args(args)
        .arg("--quiet")
        .output()
        .map_err(|e| format!("spawn msp: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "msp {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(start.elapsed())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Largest relative deviation between the tape's gradients and central
/// differences in f64 over every leaf element.
fn grad_error(leaves: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    const STEP: f64 = 1e-5;
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).unwrap().item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = tape.grad(vars[li]).expect("leaf gradient").to_vec();
        for e in 0..leaf.numel() {
            let shifted = |d: f64| {
                let mut vals = leaves.to_vec();
                let mut data = leaf.data().to_vec();
                data[e] += d;
                vals[li] = Tensor::new(leaf.shape().to_vec(), data).unwrap();
                eval(&vals)
            };
            let numeric = (shifted(STEP) - shifted(-STEP)) / (2.0 * STEP);
            let scale = analytic[e].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[e] - numeric).abs() / scale);
        }
    }
    worst
}

fn autodiff() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = BTreeMap::new();
    let mut record = |name: &'static str, err: f64| {
        let w = worst.entry(name).or_insert(0.0f64);
        *w = w.max(err);
    };
    let geometries = [(1, 1), (2, 1), (1, 0), (2, 2)];
    for case in 0..20 {
        let n = rng.random_range(3..=5);
        let (s, pad) = geometries[case % 4];
        let x = random(&[1, 2, n, n, n], &mut rng);
        let k = random(&[2, 2, 3, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let target = random(conv3d(&x, &k, &b, s, pad).unwrap().shape(), &mut rng);
        record(
            "conv3d",
            grad_error(&[x, k, b], &|t, v| {
                let y = t.conv3d(v[0], v[1], v[2], s, pad).unwrap();
                let c = t.constant(target.clone());
                t.mse_loss(y, c).unwrap()
            }),
        );

        let n = rng.random_range(2..=4);
        let x = random(&[1, 2, n, n, n], &mut rng);
        let k = random(&[2, 2, 3, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let (s, pad) = [(1, 1), (2, 2), (2, 1), (1, 0)][case % 4];
        let target = random(transposed_conv3d(&x, &k, &b, s, pad).unwrap().shape(), &mut rng);
        record(
            "transposed_conv3d",
            grad_error(&[x, k, b], &|t, v| {
                let y = t.transposed_conv3d(v[0], v[1], v[2], s, pad).unwrap();
                let c = t.constant(target.clone());
                t.mse_loss(y, c).unwrap()
            }),
        );

        let n = rng.random_range(2..=5);
        let shape = [1, 2, n, n, n];
        let a = away_from_zero(&shape, &mut rng);
        let target = random(&shape, &mut rng);
        record(
            "relu",
            grad_error(&[a], &|t, v| {
                let y = t.relu(v[0]).unwrap();
                let c = t.constant(target.clone());
                t.mse_loss(y, c).unwrap()
            }),
        );

        let a = random(&shape, &mut rng);
        let b = random(&shape, &mut rng);
        let target = random(&shape, &mut rng);
        let alpha = rng.random_range(0.0..=1.0);
        record(
            "linear_blend",
            grad_error(&[a, b], &|t, v| {
                let y = t.linear_blend(v[0], v[1], alpha).unwrap();
                let c = t.constant(target.clone());
                t.mse_loss(y, c).unwrap()
            }),
        );

        let a = random(&shape, &mut rng);
        let b = random(&shape, &mut rng);
        record("mse_loss", grad_error(&[a, b], &|t, v| t.mse_loss(v[0], v[1]).unwrap()));
    }
    let elapsed = start.elapsed();
    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    ensure(worst.values().all(|&e| e <= 1e-4), || format!("max relative error {}", summary.join(", ")))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("20 instances per primitive, max rel. error {} in {elapsed:.1?}", summary.join(", ")))
}

fn stage_values(m: &MspModel, x: &Tensor, alpha: f64) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = Model::Msp(m.clone()).bind(&mut tape, |_| false);
    let (s1, s2) = m.forward(&mut tape, xv, &vars, alpha).unwrap();
    (tape.value(s1[m.target]).unwrap().clone(), tape.value(s2).unwrap().clone())
}

fn connection_values(m: &MspModel, x: &Tensor) -> Vec<Tensor> {
    m.connections
        .iter()
        .map(|c| {
            let (_, z) = m.nets[c.donor].predict(x).unwrap();
            let mut tape = Tape::new();
            let zv = tape.constant(z);
            let vars = c.net.bind(&mut tape, false);
            let y = c.net.forward(&mut tape, zv, &vars).unwrap().prediction();
            tape.value(y).unwrap().clone()
        })
        .collect()
}

fn msp_identities() -> Verdict {
    let start = Instant::now();
    let c = 6;
    let scales = [1, 1, 2];
    let archs = [Arch::Cnnrish5, Arch::Shresnet7, Arch::Diqt];
    let mut worst_mean: f64 = 0.0;
    let mut worst_lin: f64 = 0.0;
    for target in 0..3 {
        let nets: Vec<Option<SingleNet>> = scales
            .iter()
            .enumerate()
            .map(|(i, &s)| Some(build_single(archs[i], c, c, s == 2, 8, 40 + i as u64).unwrap()))
            .collect();
        let m = build_msp(nets, target, 77).unwrap();
        let x = Tensor::from_fn(&[2, c, INPUT_PATCH, INPUT_PATCH, INPUT_PATCH], |i| {
            ((i * 2654435761 + target) % 997) as f32 / 498.5 - 1.0
        });
        let (first, zero) = stage_values(&m, &x, 0.0);
        let bitwise = first.data().iter().zip(zero.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(bitwise, || format!("target {target}: α=0 output differs from the first stage"))?;
        let (_, one) = stage_values(&m, &x, 1.0);
        let conns = connection_values(&m, &x);
        for (j, &v) in one.data().iter().enumerate() {
            let sum = first.data()[j] as f64 + conns.iter().map(|t| t.data()[j] as f64).sum::<f64>();
            worst_mean = worst_mean.max((v as f64 - sum / 3.0).abs());
        }
        let (_, half) = stage_values(&m, &x, 0.5);
        for j in 0..half.numel() {
            let want = 0.5 * zero.data()[j] as f64 + 0.5 * one.data()[j] as f64;
            worst_lin = worst_lin.max((half.data()[j] as f64 - want).abs());
        }
    }
    let elapsed = start.elapsed();
    ensure(worst_mean <= 1e-6, || format!("α=1 deviates from the mean by {worst_mean:.2e}"))?;
    ensure(worst_lin <= 1e-6, || format!("α=0.5 deviates from the blend by {worst_lin:.2e}"))?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "α=0 bit-exact; α=1 mean dev {worst_mean:.1e}; linearity dev {worst_lin:.1e}; {elapsed:.1?}"
    ))
}

fn sh_layer() -> Verdict {
    let start = Instant::now();
    ensure(n_coefficients(6) == 28, || format!("K(6) = {}", n_coefficients(6)))?;
    let dirs = DirectionSet::fibonacci(60);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let truth: Vec<f64> = (0..28).map(|_| rng.random_range(-2.0..2.0)).collect();
        let signal = eval_sh(&ShCoefficients::new(6, truth.clone()).unwrap(), &dirs).unwrap();
        let fit = fit_sh(&signal, &dirs, 6).unwrap();
        let norm = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err = fit.as_slice().iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(err / norm);
    }
    ensure(worst <= 1e-8, || format!("roundtrip relative error {worst:.2e}"))?;
    let constant = fit_sh(&[0.83; 60], &dirs, 6).unwrap();
    let others = constant.as_slice()[1..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure(others <= 1e-8, || format!("constant signal leaks {others:.2e} into higher degrees"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("K(6)=28; roundtrip rel. error {worst:.1e}; constant-fit leak {others:.1e}; {elapsed:.1?}"))
}

fn pipeline(data: &Path) -> Verdict {
    let start = Instant::now();
    let manifest = load_manifest(data.join("manifest.json")).map_err(|e| e.to_string())?;
    let targets: Vec<usize> = (1..manifest.n_platforms()).collect();
    let ds = extract_patches(&manifest, &targets).map_err(|e| e.to_string())?;
    let mut masked = 0;
    for s in 0..manifest.n_subjects() {
        let e = manifest.entry(s, 0).unwrap();
        masked += read_mask(manifest.resolve(&e.mask)).unwrap().count();
    }
    ensure(ds.len() == masked, || format!("{} patches for {masked} masked voxels", ds.len()))?;

    let n = ds.len();
    let sp = split(n, 0.9, 2019).unwrap();
    let want_train = (0.9 * n as f64 + 0.5).floor() as usize;
    ensure(sp.train.len() == want_train && sp.test.len() == n - want_train, || {
        format!("split {}/{} of {n}", sp.train.len(), sp.test.len())
    })?;
    let mut all: Vec<usize> = sp.train.iter().chain(&sp.test).copied().collect();
    all.sort_unstable();
    ensure(all == (0..n).collect::<Vec<_>>(), || "split is not a partition".into())?;

    let sr = targets.iter().position(|&t| manifest.platforms[t].scale == 2).expect("a 2× platform");
    ensure(ds.target_sizes()[sr] == SR_PATCH, || "2× patches are not 19³".into())?;
    let half = SR_PATCH / 2;
    for i in (0..n).step_by(97) {
        let pair = ds.pair(i).unwrap();
        let [x, y, z] = pair.center;
        let vol = &ds.subjects()[pair.subject].targets[sr];
        let t = &pair.targets[sr];
        let s3 = SR_PATCH.pow(3);
        for ch in 0..ds.channels() {
            let got = t.data()[ch * s3 + (half * SR_PATCH + half) * SR_PATCH + half];
            ensure(got == vol.get(2 * x, 2 * y, 2 * z, ch), || format!("patch {i}: 2× center misaligned"))?;
        }
    }

    for epoch in 0..3 {
        let order = batches(&sp.train, 12, 5, epoch).unwrap();
        let mut seen: Vec<usize> = order.iter().flatten().copied().collect();
        seen.sort_unstable();
        ensure(seen == sp.train, || format!("epoch {epoch}: batches do not cover the train set once"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{n} patches = masked voxels; split {}/{}; 2× centers aligned; batches partition; {elapsed:.1?}",
        sp.train.len(),
        sp.test.len()
    ))
}

fn shapes() -> Verdict {
    let net = build_single(Arch::Diqt, 6, 6, true, 8, 1).unwrap();
    let layers = &net.net.spec().layers;
    let t: Vec<_> = layers.iter().filter(|l| l.kind == LayerKind::TransposedConv3d).collect();
    ensure(t.len() == 1 && (t[0].kernel, t[0].stride, t[0].pad) == (3, 2, 2), || {
        format!("diqt SR layers: {layers:?}")
    })?;
    let x = Tensor::full(&[1, 6, INPUT_PATCH, INPUT_PATCH, INPUT_PATCH], 0.25f32);
    let (y, _) = net.predict(&x).unwrap();
    ensure(y.shape() == [1, 6, SR_PATCH, SR_PATCH, SR_PATCH], || format!("diqt SR output {:?}", y.shape()))?;

    let mut reached = 0;
    for arch in Arch::ALL {
        for sr_donor in [false, true] {
            let donor = build_single(arch, 6, 6, sr_donor, 8, 2).unwrap();
            let (_, z) = donor.predict(&x).unwrap();
            for target in [INPUT_PATCH, SR_PATCH] {
                let spec = connection_spec(z.shape()[1], z.shape()[2], 6, target, z.shape()[1]).unwrap();
                let conn = Network::init(spec, 3, 0).unwrap();
                let mut tape = Tape::new();
                let zv = tape.constant(z.clone());
                let vars = conn.bind(&mut tape, false);
                let out = conn.forward(&mut tape, zv, &vars).unwrap().prediction();
                let shape = tape.value(out).unwrap().shape().to_vec();
                ensure(shape == [1, 6, target, target, target], || {
                    format!("{arch} (sr {sr_donor}) → {target}³ gave {shape:?}")
                })?;
                reached += 1;
            }
        }
    }
    Ok(format!("diqt 11³→19³ via transposed conv (3, 2, 2); {reached} donor→target connections reach their shape"))
}

fn schedules() -> Verdict {
    let s = ScheduleSpec { lr0: 1e-4, period: 15 };
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-15;
    ensure(close(s.lr_at(0), 1e-4), || format!("lr_at(0) = {}", s.lr_at(0)))?;
    ensure(close(s.lr_at(15), 1e-4 / 2f64.sqrt()), || format!("lr_at(15) = {}", s.lr_at(15)))?;
    ensure(close(s.lr_at(30), 5e-5), || format!("lr_at(30) = {}", s.lr_at(30)))?;
    ensure((1..200).all(|e| s.lr_at(e) <= s.lr_at(e - 1)), || "lr schedule increases".into())?;
    let a = AlphaSchedule { start: 3, end: 13 };
    ensure(a.alpha_at(0) == 0.0 && a.alpha_at(3) == 0.0 && a.alpha_at(13) == 1.0, || "α endpoints".into())?;
    ensure((1..40).all(|e| a.alpha_at(e) >= a.alpha_at(e - 1)), || "α not monotone".into())?;
    Ok("lr 1e-4, 1e-4/√2, 5e-5 at epochs 0, 15, 30; α ramps 0 → 1 monotonically".into())
}

fn wilcoxon() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for case in 0..200 {
        let n = rng.random_range(1..=10);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
        let r = wilcoxon_exact(&a, &b).map_err(|e| e.to_string())?;
        if d.is_empty() {
            ensure(r.degenerate && r.p_value == 1.0, || format!("case {case}: degenerate sample not flagged"))?;
            continue;
        }
        let want = enumeration_p(&d);
        ensure((r.p_value - want).abs() <= 1e-12, || format!("case {case}: p {} vs enumeration {want}", r.p_value))?;
    }
    let hand = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5], 1).map_err(|e| e.to_string())?;
    ensure(hand.w == 0.0 && (hand.p_value - 0.0625).abs() < 1e-15, || format!("hand case {hand:?}"))?;
    Ok("exact p equals sign enumeration on 200 cases (n ≤ 10, with ties); n=5 all-positive p = 0.0625".into())
}

/// Two-sided p by listing all 2ⁿ sign patterns over midranks.
fn enumeration_p(d: &[f64]) -> f64 {
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        for &k in &order[i..=j] {
            ranks[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = (0..n).filter(|&k| d[k] > 0.0).map(|k| ranks[k]).sum();
    let w = w_plus.min(total - w_plus);
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let plus: f64 = (0..n).filter(|&k| mask >> k & 1 == 1).map(|k| ranks[k]).sum();
        if plus.min(total - plus) <= w + 1e-9 {
            hits += 1;
        }
    }
    (hits as f64 / (1u64 << n) as f64).min(1.0)
}

struct Learning {
    rows: Vec<Value>,
    tests: Vec<Value>,
    times: Vec<(String, Duration)>,
}

fn run_learning(root: &Path, data: &Path) -> Result<Learning, String> {
    let (pre, base, joint, cmp) = (root.join("pre"), root.join("base"), root.join("msp"), root.join("compare"));
    let mut times = Vec::new();
    let ep = PRETRAIN_EPOCHS.to_string();
    let ej = JOINT_EPOCHS.to_string();
    for target in TARGETS {
        for arch in Arch::ALL {
            let mode = format!("single:{arch}");
            let t1 = msp(&["--data", p(data), "--out", p(&pre), "train", "--mode", &mode, "--target", target, "--epochs", &ep])?;
            let t2 = msp(&[
                "--data", p(data), "--out", p(&base), "train", "--mode", &mode, "--target", target, "--pretrained", p(&pre),
                "--epochs", &ej,
            ])?;
            times.push((format!("{arch}/{target}"), t1 + t2));
        }
    }
    for target in TARGETS {
        msp(&[
            "--data", p(data), "--out", p(&joint), "train", "--mode", "msp", "--target", target, "--pretrained", p(&pre),
            "--epochs", &ej,
        ])?;
    }
    msp(&["--data", p(data), "--out", p(&cmp), "compare", "--identity", p(&base), p(&joint)])?;
    let report: Value = serde_json::from_str(&std::fs::read_to_string(cmp.join("report.json")).unwrap()).unwrap();
    Ok(Learning {
        rows: report["rows"].as_array().cloned().unwrap_or_default(),
        tests: report["tests"].as_array().cloned().unwrap_or_default(),
        times,
    })
}

fn mean_of(rows: &[Value], model: &str, target: &str) -> Option<f64> {
    rows.iter()
        .find(|r| r["model"] == model && r["target"] == target)
        .and_then(|r| r["mean"].as_f64())
}

fn learning_sanity(l: &Learning) -> Verdict {
    ensure(PRETRAIN_EPOCHS + JOINT_EPOCHS <= MAX_EPOCHS, || "epoch budget exceeds 30".into())?;
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for target in TARGETS {
        let identity = mean_of(&l.rows, "identity", target).ok_or("missing identity row")?;
        for arch in Arch::ALL {
            let m = mean_of(&l.rows, arch.name(), target).ok_or_else(|| format!("missing {arch} row for {target}"))?;
            let ratio = m / identity;
            worst = worst.max(ratio);
            if ratio > 0.5 {
                failures.push(format!("{arch}/{target} {ratio:.3}"));
            }
        }
    }
    let slowest = l.times.iter().max_by_key(|t| t.1).cloned().unwrap();
    ensure(failures.is_empty(), || format!("MSE / identity above 0.5: {}", failures.join(", ")))?;
    ensure(slowest.1 <= MAX_TRAIN_TIME, || format!("{} took {:?}", slowest.0, slowest.1))?;
    Ok(format!(
        "9 baselines, {} epochs each, worst MSE/identity {worst:.3}, slowest {} {:.0?}",
        PRETRAIN_EPOCHS + JOINT_EPOCHS,
        slowest.0,
        slowest.1
    ))
}

fn mtl_direction(l: &Learning) -> Verdict {
    let mut wins = 0;
    let mut cells = Vec::new();
    for target in TARGETS {
        let m = mean_of(&l.rows, "msp", target).ok_or_else(|| format!("missing msp row for {target}"))?;
        let (best_arch, best) = Arch::ALL
            .iter()
            .filter_map(|a| mean_of(&l.rows, a.name(), target).map(|v| (a.name(), v)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .ok_or("missing single rows")?;
        if m <= best {
            wins += 1;
        }
        cells.push(format!("{target}: msp {:.4} vs {best_arch} {best:.4}", m));
    }
    let models_per_target = 5;
    let pairs = TARGETS.len() * models_per_target * (models_per_target - 1) / 2;
    ensure(l.tests.len() == pairs, || format!("{} paired tests, expected {pairs}", l.tests.len()))?;
    let complete = l.tests.iter().all(|t| {
        let pv = t["p_value"].as_f64().unwrap_or(f64::NAN);
        let pc = t["p_corrected"].as_f64().unwrap_or(f64::NAN);
        t["comparisons"] == 3 && (0.0..=1.0).contains(&pv) && (pc - (3.0 * pv).min(1.0)).abs() <= 1e-12
    });
    ensure(complete, || "paired tests lack valid Bonferroni-corrected p".into())?;
    ensure(wins >= 2, || format!("msp better on {wins}/3: {}", cells.join("; ")))?;
    Ok(format!("msp ≤ best single on {wins}/3 ({}); {pairs} Wilcoxon pairs", cells.join("; ")))
}

fn files_equal(a: &Path, b: &Path) -> Result<(), String> {
    let (x, y) = (std::fs::read(a), std::fs::read(b));
    match (x, y) {
        (Ok(x), Ok(y)) if x == y => Ok(()),
        (Ok(_), Ok(_)) => Err(format!("{} and {} differ", a.display(), b.display())),
        (e1, e2) => Err(format!("read {}: {:?} / {:?}", a.display(), e1.err(), e2.err())),
    }
}

fn determinism(root: &Path) -> Verdict {
    let data = [root.join("data1"), root.join("data2")];
    for d in &data {
        msp(&["--out", p(d), "gen-data", "--seed", "41"])?;
    }
    let manifest = load_manifest(data[0].join("manifest.json")).map_err(|e| e.to_string())?;
    for e in &manifest.entries {
        files_equal(&data[0].join(&e.volume), &data[1].join(&e.volume))?;
        files_equal(&data[0].join(&e.mask), &data[1].join(&e.mask))?;
    }
    let cfg = root.join("small.json");
    std::fs::write(
        &cfg,
        r#"{"train": {"epochs": 2, "pretrain_epochs": 1, "patches_per_epoch": 16, "val_limit": 16}, "eval": {"limit": 80}}"#,
    )
    .unwrap();
    let runs = [root.join("run1"), root.join("run2")];
    for r in &runs {
        let common = ["--config", p(&cfg), "--data", p(&data[0]), "--seed", "5", "--out"];
        let out = p(r);
        msp(&[&common[..], &[out, "train", "--mode", "single:diqt", "--target", "modern_sa"]].concat())?;
        msp(&[&common[..], &[out, "train", "--mode", "msp", "--target", "modern_st_b"]].concat())?;
        let ev = r.join("eval");
        msp(&[&common[..], &[p(&ev), "evaluate", "--identity", out]].concat())?;
    }
    for rel in [
        "diqt_modern_sa.mspc",
        "diqt_modern_sa.history.csv",
        "msp_modern_st_b.mspc",
        "msp_modern_st_b.history.csv",
        "pre/cnnrish5_modern_sa.mspc",
        "eval/report.json",
        "eval/table.txt",
    ] {
        files_equal(&runs[0].join(rel), &runs[1].join(rel))?;
    }
    let history = std::fs::read_to_string(runs[0].join("msp_modern_st_b.history.csv")).unwrap();
    ensure(history.lines().count() == 1 + 1 + 2, || "msp history lacks the pretraining phase".into())?;

    let vol_path = data[0].join(&manifest.entries[3].volume);
    let vol = read_volume(&vol_path).map_err(|e| e.to_string())?;
    let copy = root.join("copy.mspv");
    write_volume(&vol, &copy).map_err(|e| e.to_string())?;
    let back = read_volume(&copy).map_err(|e| e.to_string())?;
    let bit_exact = back.dims() == vol.dims()
        && back.voxel_size() == vol.voxel_size()
        && back.data().iter().zip(vol.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(bit_exact, || "volume roundtrip is not bit-exact".into())?;
    files_equal(&vol_path, &copy)?;

    let ckpt = runs[0].join("msp_modern_st_b.mspc");
    let (model, meta) = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    ensure(encode_checkpoint(&model, &meta) == std::fs::read(&ckpt).unwrap(), || {
        "checkpoint re-encoding differs".into()
    })?;

    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(runs[0].join("eval/report.json")).unwrap()).unwrap();
    let mut checked = 0;
    for row in report["rows"].as_array().unwrap() {
        let (model, target) = (row["model"].as_str().unwrap(), row["target"].as_str().unwrap());
        let csv = std::fs::read_to_string(runs[0].join(format!("eval/errors/{model}_{target}.csv"))).unwrap();
        let errs = errors_from_csv(&csv).map_err(|e| e.to_string())?;
        let (m, s) = mean_std(&errs.iter().map(|e| e.mse).collect::<Vec<_>>()).unwrap();
        let (rm, rs) = (row["mean"].as_f64().unwrap(), row["std"].as_f64().unwrap());
        ensure((m - rm).abs() <= 1e-9 && (s - rs).abs() <= 1e-9, || format!("{model}/{target}: CSV disagrees"))?;
        checked += 1;
    }
    Ok(format!(
        "cohort, checkpoints, histories and reports byte-identical across reruns; volume and checkpoint roundtrips \
         bit-exact; {checked} report rows match their CSVs"
    ))
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let root: PathBuf = tmp.path().to_path_buf();
    let data = root.join("cohort");
    let gen = msp(&["--out", p(&data), "gen-data"]);

    let mut results: Vec<(usize, &str, Verdict)> = vec![
        (1, "autodiff gradients", guarded(autodiff)),
        (2, "MSP blend identities", guarded(msp_identities)),
        (3, "SH layer", guarded(sh_layer)),
        (4, "pipeline integrity", guarded(|| gen.clone().and_then(|_| pipeline(&data)))),
        (5, "shape contract", guarded(shapes)),
        (6, "schedules", guarded(schedules)),
    ];
    let learning = match &gen {
        Ok(_) => catch_unwind(AssertUnwindSafe(|| run_learning(&root.join("learning"), &data)))
            .unwrap_or_else(|_| Err("learning run panicked".into())),
        Err(e) => Err(e.clone()),
    };
    match &learning {
        Ok(l) => {
            results.push((7, "learning sanity", guarded(|| learning_sanity(l))));
            results.push((8, "MTL direction", guarded(|| mtl_direction(l))));
        }
        Err(e) => {
            results.push((7, "learning sanity", Err(e.clone())));
            results.push((8, "MTL direction", Err(e.clone())));
        }
    }
    results.push((9, "Wilcoxon exactness", guarded(wilcoxon)));
    results.push((10, "determinism and formats", guarded(|| determinism(&root.join("det")))));
    results.sort_by_key(|r| r.0);
    let mut report = String::from("\n");
    let mut failed = 0;
    for (i, name, verdict) in &results {
        let line = match verdict {
            Ok(detail) => format!("criterion {i:>2} {name}: PASS ({detail})\n"),
            Err(detail) => {
                failed += 1;
                format!("criterion {i:>2} {name}: FAIL ({detail})\n")
            }
        };
        report.push_str(&line);
    }
    let _ = std::io::stderr().write_all(report.as_bytes());
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
