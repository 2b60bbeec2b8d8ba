use msp_core::models::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta};
use msp_core::models::{
    arch_spec, build_cpm, build_hned, build_msp, build_single, connection_spec, Arch, LayerKind, Model, Network,
    SingleNet,
};
use msp_core::{Tape, Tensor};

const C: usize = 6;

fn input(batch: usize, seed: usize) -> Tensor {
    Tensor::from_fn(&[batch, C, 11, 11, 11], |i| (((i + seed) * 2654435761) % 1000) as f32 / 500.0 - 1.0)
}

fn msp_nets(scales: &[usize], width: usize) -> Vec<Option<SingleNet>> {
    let archs = [Arch::Cnnrish5, Arch::Diqt, Arch::Shresnet7];
    scales
        .iter()
        .enumerate()
        .map(|(i, &s)| Some(build_single(archs[i % 3], C, C, s == 2, width, 10 + i as u64).unwrap()))
        .collect()
}

#[test]
fn single_net_shapes() {
    for arch in Arch::ALL {
        for sr in [false, true] {
            let net = build_single(arch, C, C, sr, 8, 1).unwrap();
            let layers = net.net.spec().layers.len();
            assert_eq!(layers, [5, 7, 8][arch as usize]);
            let (y, z) = net.predict(&input(2, 0)).unwrap();
            let e = if sr { 19 } else { 11 };
            assert_eq!(y.shape(), &[2, C, e, e, e], "{arch} sr={sr}");
            assert_eq!(z.shape()[2..], [e, e, e]);
            assert_eq!(z.shape()[1], net.net.spec().layers[layers - 2].out_channels());
            assert!(y.data().iter().chain(z.data()).all(|v| v.is_finite()));
        }
    }
}

#[test]
fn diqt_super_resolution_uses_layer_five() {
    let spec = arch_spec(Arch::Diqt, C, C, true, 8).unwrap();
    let kinds: Vec<LayerKind> = spec.layers.iter().map(|l| l.kind).collect();
    assert_eq!(kinds.iter().filter(|&&k| k == LayerKind::TransposedConv3d).count(), 1);
    let l5 = &spec.layers[4];
    assert_eq!((l5.kind, l5.kernel, l5.stride, l5.pad), (LayerKind::TransposedConv3d, 3, 2, 2));
    assert_eq!(spec.extents(11).unwrap(), vec![11, 11, 11, 11, 19, 19, 19, 19]);
}

#[test]
fn shresnet_towers_follow_degree_blocks() {
    let spec = arch_spec(Arch::Shresnet7, 28, 28, false, 32).unwrap();
    let first: Vec<usize> = spec.layers[0].groups.iter().map(|g| g.0).collect();
    assert_eq!(first, vec![1, 5, 9, 13]);
    assert!(spec.layers.iter().any(|l| l.residual));
}

#[test]
fn unknown_arch_is_rejected() {
    assert!("unet".parse::<Arch>().is_err());
    assert_eq!("diqt".parse::<Arch>().unwrap(), Arch::Diqt);
}

#[test]
fn init_is_reproducible_per_seed() {
    let a = build_single(Arch::Diqt, C, C, true, 8, 5).unwrap();
    let b = build_single(Arch::Diqt, C, C, true, 8, 5).unwrap();
    let c = build_single(Arch::Diqt, C, C, true, 8, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for (k, p) in a.net.params().iter().enumerate() {
        if k % 2 == 1 {
            assert!(p.data().iter().all(|&v| v == 0.0), "biases start at zero");
        }
    }
}

#[test]
fn zero_parameters_predict_zero() {
    for arch in Arch::ALL {
        let spec = arch_spec(arch, C, C, arch == Arch::Diqt, 8).unwrap();
        let net = SingleNet::from_spec(arch, arch == Arch::Diqt, spec).unwrap();
        let (y, _) = net.predict(&input(1, 3)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn connection_nets_reach_every_target_shape() {
    for z_extent in [11, 19] {
        for target in [11, 19] {
            let spec = connection_spec(8, z_extent, C, target, 8).unwrap();
            assert_eq!(spec.layers.len(), 2);
            assert_eq!(spec.output_extent(z_extent).unwrap(), target);
            let net = Network::init(spec, 1, 0).unwrap();
            let mut tape = Tape::new();
            let z = tape.constant(Tensor::full(&[1, 8, z_extent, z_extent, z_extent], 0.1));
            let vars = net.bind(&mut tape, false);
            let y = net.forward(&mut tape, z, &vars).unwrap().prediction();
            assert_eq!(tape.value(y).unwrap().shape(), &[1, C, target, target, target]);
        }
    }
    assert!(connection_spec(8, 7, C, 19, 8).is_err());
}

fn stage2(m: &msp_core::models::MspModel, x: &Tensor, alpha: f64) -> (Vec<Tensor>, Tensor) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = Model::Msp(m.clone()).bind(&mut tape, |_| false);
    let (s1, s2) = m.forward(&mut tape, xv, &vars, alpha).unwrap();
    (
        s1.iter().map(|&v| tape.value(v).unwrap().clone()).collect(),
        tape.value(s2).unwrap().clone(),
    )
}

fn connection_outputs(m: &msp_core::models::MspModel, x: &Tensor) -> Vec<Tensor> {
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

#[test]
fn msp_topology_and_endpoints() {
    let scales = [1, 1, 2];
    for target in 0..3 {
        let m = build_msp(msp_nets(&scales, 6), target, 99).unwrap();
        assert_eq!(m.connections.len(), 2);
        assert!(m.connections.iter().all(|c| c.donor != target));
        assert_eq!(m.alpha, 0.0);
        let x = input(1, target);
        let (s1, s2) = stage2(&m, &x, 0.0);
        assert_eq!(s2, s1[target], "α=0 is the first-stage prediction");
        let (pretrained, _) = m.nets[target].predict(&x).unwrap();
        assert_eq!(s2, pretrained);

        let conns = connection_outputs(&m, &x);
        let e = if scales[target] == 2 { 19 } else { 11 };
        assert!(conns.iter().all(|t| t.shape() == [1, C, e, e, e]));
        let (_, s2_one) = stage2(&m, &x, 1.0);
        for (j, &v) in s2_one.data().iter().enumerate() {
            let mean = (s1[target].data()[j] as f64 + conns.iter().map(|t| t.data()[j] as f64).sum::<f64>()) / 3.0;
            assert!((v as f64 - mean).abs() <= 1e-6 * mean.abs().max(1.0));
        }
        let (_, s2_half) = stage2(&m, &x, 0.5);
        let (_, s2_q) = stage2(&m, &x, 0.25);
        for j in 0..s2_half.numel() {
            let (a, b) = (s2.data()[j] as f64, s2_one.data()[j] as f64);
            assert!((s2_half.data()[j] as f64 - (0.5 * a + 0.5 * b)).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0));
            assert!((s2_q.data()[j] as f64 - (0.75 * a + 0.25 * b)).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0));
        }
    }
}

fn set_constant_output(net: &mut Network, value: f32) {
    let n = net.params().len();
    let params: Vec<Tensor> = net
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| Tensor::full(p.shape(), if i == n - 1 { value } else { 0.0 }))
        .collect();
    net.set_params(params).unwrap();
}

#[test]
fn msp_hand_case() {
    // Zero kernels with constant last-layer biases: ŷ¹_T = 1, connection outputs 2 and 3.
    let mut m = build_msp(msp_nets(&[1, 2, 1], 4), 0, 1).unwrap();
    set_constant_output(&mut m.nets[0].net, 1.0);
    set_constant_output(&mut m.connections[0].net, 2.0);
    set_constant_output(&mut m.connections[1].net, 3.0);
    let (_, y) = stage2(&m, &input(1, 0), 0.5);
    assert_eq!(y.shape(), &[1, C, 11, 11, 11]);
    assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-6));
}

#[test]
fn msp_rejects_bad_inputs() {
    let nets = msp_nets(&[1, 1, 2], 4);
    let m = build_msp(nets.clone(), 2, 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(input(1, 0));
    let vars = Model::Msp(m.clone()).bind(&mut tape, |_| false);
    assert!(m.forward(&mut tape, x, &vars, 1.5).is_err());
    assert!(m.forward(&mut tape, x, &vars, -0.1).is_err());
    let mut missing = nets.clone();
    missing[1] = None;
    assert!(build_msp(missing, 0, 1).is_err());
    assert!(build_msp(nets, 3, 1).is_err());
}

#[test]
fn msp_gradients_reach_both_stages() {
    let m = build_msp(msp_nets(&[1, 2, 1], 4), 1, 3).unwrap();
    let model = Model::Msp(m);
    let mut tape = Tape::new();
    let x = tape.constant(input(1, 1));
    let vars = model.bind(&mut tape, |_| true);
    let out = model.forward(&mut tape, x, &vars, 0.7).unwrap();
    let zero = tape.constant(Tensor::zeros(tape.value(out.prediction).unwrap().shape()));
    let loss = tape.mse_loss(out.prediction, zero).unwrap();
    tape.backward(loss).unwrap();
    for (i, net_vars) in vars.iter().enumerate() {
        let g = tape.grad(net_vars[0]).expect("trainable");
        assert!(g.iter().any(|&v| v != 0.0), "network {i} receives gradient");
    }
}

#[test]
fn cpm_and_hned_emit_every_target_shape() {
    let scales = [1, 1, 2];
    for target in 0..3 {
        let cpm = Model::Cpm(build_cpm(C, &scales, target, 6, 4).unwrap());
        let hned = Model::Hned(build_hned(C, &scales, target, 6, 4).unwrap());
        if let Model::Hned(h) = &hned {
            assert_eq!(h.heads.len(), 3);
        }
        for model in [cpm, hned] {
            let mut tape = Tape::new();
            let x = tape.constant(input(1, 2));
            let vars = model.bind(&mut tape, |_| false);
            let out = model.forward(&mut tape, x, &vars, 0.0).unwrap();
            assert_eq!(out.terms.len(), 3);
            for (t, v) in &out.terms {
                let e = if scales[*t] == 2 { 19 } else { 11 };
                assert_eq!(tape.value(*v).unwrap().shape(), &[1, C, e, e, e]);
            }
            assert_eq!(model.output_extent().unwrap(), if target == 2 { 19 } else { 11 });
        }
    }
    if let Model::Cpm(c) = Model::Cpm(build_cpm(C, &[2, 1], 0, 6, 4).unwrap()) {
        assert!(c.adapters[0].is_none() && c.adapters[1].is_some());
        assert_eq!(c.stages[1].net.spec().in_channels(), C + 6);
    }
    assert!(build_hned(C, &[], 0, 6, 1).is_err());
    assert!(build_cpm(C, &[1, 3], 0, 6, 1).is_err());
}

#[test]
fn checkpoints_roundtrip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let meta = CheckpointMeta {
        label: "x".into(),
        target_platform: "modern_sa".into(),
        epochs: 3,
        best_epoch: Some(1),
        val_loss: Some(0.25),
        dataset_digest: "abc".into(),
    };
    let mut msp = build_msp(msp_nets(&[1, 1, 2], 4), 0, 8).unwrap();
    msp.alpha = 0.375;
    let models = vec![
        Model::Single {
            target: 2,
            net: build_single(Arch::Diqt, C, C, true, 4, 1).unwrap(),
        },
        Model::Msp(msp),
        Model::Cpm(build_cpm(C, &[1, 2, 1], 1, 4, 2).unwrap()),
        Model::Hned(build_hned(C, &[1, 2, 1], 2, 4, 3).unwrap()),
    ];
    for (i, m) in models.into_iter().enumerate() {
        let path = dir.path().join(format!("{i}.mspc"));
        save_checkpoint(&m, &meta, &path).unwrap();
        let (back, meta_back) = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta_back, meta);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MSPC");
        assert_eq!(encode_checkpoint(&back, &meta_back), bytes);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
