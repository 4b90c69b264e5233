use approx::assert_relative_eq;

use super::*;
use crate::attention::{ba_integrate, BridgeSourceConfig};
use crate::error::Error;
use crate::nn::{Mode, Session};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::testing::{randn, rng, store_grad_check};

fn bottleneck(
    in_ch: usize,
    mid: usize,
    out: usize,
    stride: usize,
    attention: AttentionKind,
) -> BlockSpec {
    BlockSpec {
        kind: BlockKind::Bottleneck,
        in_ch,
        mid_ch: mid,
        out_ch: out,
        stride,
        attention,
        bridge_sources: None,
        downsample: stride != 1 || in_ch != out,
        reduction: 16,
    }
}

fn run_block(store: &mut ParamStore<f64>, block: &Block, x: &Tensor<f64>) -> Tensor<f64> {
    let mut s = Session::new(store, Mode::Eval);
    let xv = s.input(x.clone());
    let y = block.forward(&mut s, xv).unwrap();
    s.value(y).clone()
}

/// Two basic blocks with bridge attention on a 6×6 input.
fn toy_arch() -> ArchSpec {
    let mut a = ArchSpec::resnet20();
    a.name = "toy".into();
    a.stem.out_ch = 4;
    a.stages = vec![StageSpec {
        blocks: 2,
        template: BlockSpec {
            kind: BlockKind::Basic,
            in_ch: 4,
            mid_ch: 8,
            out_ch: 8,
            stride: 2,
            attention: AttentionKind::Ba,
            bridge_sources: None,
            downsample: true,
            reduction: 2,
        },
    }];
    a.num_classes = 3;
    a.input_shape = [3, 6, 6];
    a
}

#[test]
fn zero_conv_residual_is_relu() {
    let spec = bottleneck(256, 64, 256, 1, AttentionKind::None);
    let mut store = ParamStore::new();
    let block = build_block(&mut store, "b", 0, &spec, &mut rng(0)).unwrap();
    for c in &block.convs {
        store.value_mut(c.weight).data_mut().fill(0.0);
    }
    let x = randn([2, 256, 4, 4], &mut rng(1));
    let y = run_block(&mut store, &block, &x);
    assert_eq!(y, x.map(|v| v.max(0.0)));
}

#[test]
fn degenerate_ba_block_equals_se_block() {
    let mut se_store = ParamStore::new();
    let se = build_block(
        &mut se_store,
        "b",
        0,
        &bottleneck(64, 32, 128, 1, AttentionKind::Se),
        &mut rng(2),
    )
    .unwrap();
    let mut ba_store = ParamStore::new();
    let ba = build_block(
        &mut ba_store,
        "b",
        0,
        &bottleneck(64, 32, 128, 1, AttentionKind::Ba),
        &mut rng(2),
    )
    .unwrap();
    se_store
        .set("b.attn.w2.bias", randn([128], &mut rng(3)))
        .unwrap();
    let BlockAttention::Bridge(m) = &ba.attention else {
        panic!("bridge expected")
    };
    for b in &m.branches {
        b.bn.set_identity(&mut ba_store, 1e-5);
    }
    ba_store
        .set("b.attn.branch0.squeeze.weight", Tensor::zeros([32, 8]))
        .unwrap();
    ba_store
        .set("b.attn.branch1.squeeze.weight", Tensor::zeros([32, 8]))
        .unwrap();
    let copy = |dst: &mut ParamStore<f64>, to: &str, from: &str| {
        let v = se_store.value(se_store.id(from).unwrap()).clone();
        dst.set(to, v).unwrap();
    };
    copy(
        &mut ba_store,
        "b.attn.branch2.squeeze.weight",
        "b.attn.w1.weight",
    );
    copy(&mut ba_store, "b.attn.w2.weight", "b.attn.w2.weight");
    copy(&mut ba_store, "b.attn.w2.bias", "b.attn.w2.bias");
    for c in ["b.conv1.weight", "b.conv3.weight", "b.shortcut.conv.weight"] {
        assert_eq!(
            ba_store.value(ba_store.id(c).unwrap()),
            se_store.value(se_store.id(c).unwrap())
        );
    }
    let x = randn([3, 64, 5, 5], &mut rng(4));
    let y_se = run_block(&mut se_store, &se, &x);
    let y_ba = run_block(&mut ba_store, &ba, &x);
    assert!(y_se.max_abs_diff(&y_ba) <= 1e-6);
}

#[test]
fn strided_bottleneck_bridges_mixed_sizes() {
    let spec = bottleneck(64, 32, 128, 2, AttentionKind::Ba);
    let mut store = ParamStore::new();
    let block = build_block(&mut store, "b", 0, &spec, &mut rng(5)).unwrap();
    let BlockAttention::Bridge(m) = &block.attention else {
        panic!("bridge expected")
    };
    let mut s = Session::new(&mut store, Mode::Train);
    let mut h = s.input(randn([2, 64, 8, 8], &mut rng(6)));
    let mut outs = Vec::new();
    for (conv, bn) in block.convs.iter().zip(&block.norms) {
        h = conv.forward(&mut s, h).unwrap();
        h = bn.forward(&mut s, h).unwrap();
        outs.push(h);
    }
    assert_eq!(s.tape.shape(outs[0]), &[2, 32, 8, 8]);
    assert_eq!(s.tape.shape(outs[1]), &[2, 32, 4, 4]);
    assert_eq!(s.tape.shape(outs[2]), &[2, 128, 4, 4]);
    let z = ba_integrate(&mut s, &outs, m).unwrap();
    assert_eq!(s.tape.shape(z.sum), &[2, 8]);
    let x = s.input(randn([2, 64, 8, 8], &mut rng(6)));
    let y = block.forward(&mut s, x).unwrap();
    assert_eq!(s.tape.shape(y), &[2, 128, 4, 4]);
}

#[test]
fn bridge_source_validation() {
    let mut spec = bottleneck(64, 32, 128, 1, AttentionKind::Ba);
    spec.bridge_sources = Some("conv3".parse().unwrap());
    assert!(matches!(
        build_block(&mut ParamStore::<f64>::new(), "b", 0, &spec, &mut rng(0)),
        Err(Error::Config(_))
    ));
    let mut basic = ArchSpec::resnet20()
        .with_attention(AttentionKind::Ba)
        .expand()
        .unwrap()[0]
        .clone();
    basic.bridge_sources = Some("conv2".parse().unwrap());
    assert!(matches!(basic.validate(), Err(Error::Config(_))));
    basic.bridge_sources = Some("conv1".parse().unwrap());
    assert!(basic.validate().is_ok());
}

#[test]
fn table1_configurations_build() {
    for src in ["conv1", "conv2", "conv1&2"] {
        let arch = ArchSpec::resnet50()
            .with_attention(AttentionKind::Ba)
            .with_bridge_sources(Some(src.parse().unwrap()));
        let want = src.parse::<BridgeSourceConfig>().unwrap().sources().len() + 1;
        let specs = arch.expand().unwrap();
        assert!(specs
            .iter()
            .all(|s| s.sources().branch_layers(3).len() == want));
        let cost = cost::arch_cost(&arch).unwrap();
        assert!(cost.params > cost::arch_cost(&ArchSpec::resnet50()).unwrap().params);
    }
}

#[test]
fn resnet50_ba_has_sixteen_three_branch_blocks() {
    let net = build_network::<f32>(&ArchSpec::resnet50(), AttentionKind::Ba, 0).unwrap();
    assert_eq!(net.blocks().len(), 16);
    assert_eq!(net.attention_blocks(), 16);
    for b in net.blocks() {
        let BlockAttention::Bridge(m) = &b.attention else {
            panic!("bridge expected")
        };
        assert_eq!(
            m.branches.iter().map(|x| x.layer).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
    }
    assert_eq!(
        net.count_params() as u64,
        cost::arch_cost(net.arch()).unwrap().params
    );
    assert_relative_eq!(net.count_params() as f64, 28.71e6, max_relative = 0.005);
}

#[test]
fn table2_costs() {
    let rows = [
        ("resnet50", AttentionKind::None, 25.56e6, 4.12e9),
        ("resnet50", AttentionKind::Se, 28.07e6, 4.13e9),
        ("resnet50", AttentionKind::Ba, 28.71e6, 4.13e9),
        ("resnet101", AttentionKind::None, 44.55e6, 7.85e9),
        ("resnet101", AttentionKind::Se, 49.29e6, 7.86e9),
        ("resnet101", AttentionKind::Ba, 50.49e6, 7.87e9),
    ];
    for (name, att, params, flops) in rows {
        let c = cost::count(&ArchSpec::builtin(name).unwrap(), att, None).unwrap();
        assert_relative_eq!(c.params as f64, params, max_relative = 0.005);
        assert_relative_eq!(c.flops as f64, flops, max_relative = 0.01);
    }
}

#[test]
fn registry_matches_analytic_counts() {
    for att in [AttentionKind::None, AttentionKind::Se, AttentionKind::Ba] {
        let net = build_network::<f32>(&ArchSpec::resnet20(), att, 0).unwrap();
        assert_eq!(
            net.count_params() as u64,
            cost::count(&ArchSpec::resnet20(), att, None)
                .unwrap()
                .params
        );
    }
}

#[test]
fn parameter_decomposition_per_block() {
    for arch in [ArchSpec::resnet20(), ArchSpec::resnet50()] {
        let plain = cost::count(&arch, AttentionKind::None, None)
            .unwrap()
            .params;
        let ba = cost::count(&arch, AttentionKind::Ba, None).unwrap().params;
        let mut extra = 0u64;
        for spec in arch
            .clone()
            .with_attention(AttentionKind::Ba)
            .expand()
            .unwrap()
        {
            let n = spec.kind.conv_count();
            let h = (spec.out_ch / spec.reduction) as u64;
            for l in spec.sources().branch_layers(n) {
                extra += spec.layer_channels(l) as u64 * h + 2 * h;
            }
            extra += h * spec.out_ch as u64 + spec.out_ch as u64;
        }
        assert_eq!(ba - plain, extra);
    }
}

#[test]
fn attention_kind_monotone() {
    for arch in [
        ArchSpec::resnet20(),
        ArchSpec::resnet50(),
        ArchSpec::resnet101(),
    ] {
        let p = |a| cost::count(&arch, a, None).unwrap().params;
        assert!(p(AttentionKind::None) < p(AttentionKind::Se));
        assert!(p(AttentionKind::Se) < p(AttentionKind::Ba));
    }
}

#[test]
fn fc_layer_count() {
    let mut store = ParamStore::<f64>::new();
    let fc = crate::nn::Linear::new(&mut store, "fc", 10, 5, true, &mut rng(0)).unwrap();
    assert_eq!(fc.param_count(), 55);
    assert_eq!(store.trainable_count(), 55);
}

#[test]
fn count_flops_scales_with_batch() {
    let net = build_network::<f32>(&ArchSpec::resnet20(), AttentionKind::None, 0).unwrap();
    let one = net.count_flops([1, 3, 32, 32]).unwrap();
    assert_eq!(net.count_flops([4, 3, 32, 32]).unwrap(), 4 * one);
    assert_relative_eq!(one as f64, 41e6, max_relative = 0.05);
}

#[test]
fn resnet20_forward_shape_and_determinism() {
    for att in [AttentionKind::None, AttentionKind::Se, AttentionKind::Ba] {
        let mut net = build_network::<f32>(&ArchSpec::resnet20(), att, 1).unwrap();
        let x = randn([4, 3, 32, 32], &mut rng(2)).cast::<f32>();
        let a = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.shape(), &[4, 10]);
        assert_eq!(a, net.forward(&x, Mode::Eval).unwrap());
    }
}

#[test]
fn eval_batch_independence_f32() {
    let mut net = build_network::<f32>(&ArchSpec::resnet20(), AttentionKind::Ba, 3).unwrap();
    let x = randn([3, 3, 32, 32], &mut rng(4)).cast::<f32>();
    let batched = net.forward(&x, Mode::Eval).unwrap();
    for b in 0..3 {
        let single = net.forward(&x.slice_rows(b, b + 1), Mode::Eval).unwrap();
        assert!(single.max_abs_diff(&batched.slice_rows(b, b + 1)) <= 1e-6);
    }
}

#[test]
fn zero_classifier_gives_uniform_logits() {
    let mut net = build_network::<f64>(&ArchSpec::resnet20(), AttentionKind::Se, 5).unwrap();
    let p = net.params_mut();
    p.set("head.weight", Tensor::zeros([64, 10])).unwrap();
    p.set("head.bias", Tensor::zeros([10])).unwrap();
    let y = net
        .forward(&Tensor::zeros([2, 3, 32, 32]), Mode::Eval)
        .unwrap();
    assert!(y.data().iter().all(|&v| v == y.data()[0]));
}

#[test]
fn none_and_se_share_structure_not_values() {
    let plain = build_network::<f32>(&ArchSpec::resnet20(), AttentionKind::None, 0).unwrap();
    let se = build_network::<f32>(&ArchSpec::resnet20(), AttentionKind::Se, 0).unwrap();
    assert_eq!(plain.blocks().len(), se.blocks().len());
    assert_eq!(plain.attention_blocks(), 0);
    assert_eq!(se.attention_blocks(), 9);
    assert!(se.count_params() > plain.count_params());
}

#[test]
fn forward_rejects_wrong_input() {
    let mut net = build_network::<f32>(&ArchSpec::resnet20(), AttentionKind::None, 0).unwrap();
    assert!(matches!(
        net.forward(&Tensor::zeros([1, 3, 16, 16]), Mode::Eval),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn two_block_network_gradient() {
    let net = build_network::<f64>(&toy_arch(), AttentionKind::Ba, 7).unwrap();
    let x = randn([3, 3, 6, 6], &mut rng(8));
    let body = net.body().clone();
    let err = store_grad_check(net.params(), |s| {
        let xv = s.input(x.clone());
        let logits = body.forward(s, xv).unwrap();
        s.tape.cross_entropy(logits, &[0, 2, 1]).unwrap()
    });
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn capture_is_observer_neutral() {
    let mut net = build_network::<f32>(&ArchSpec::resnet20(), AttentionKind::Ba, 9).unwrap();
    let x = randn([2, 3, 32, 32], &mut rng(10)).cast::<f32>();
    let plain = net.forward(&x, Mode::Eval).unwrap();
    let (captured, records) = net.forward_captured(&x).unwrap();
    assert_eq!(plain, captured);
    assert_eq!(records.len(), 9);
    for r in &records {
        assert_eq!(r.squeezed.len(), 2);
        assert!(r.weights.data().iter().all(|&w| w > 0.0 && w < 1.0));
    }
}

#[test]
fn arch_json_round_trip() {
    let a = ArchSpec::resnet50()
        .with_attention(AttentionKind::Ba)
        .with_bridge_sources(Some("conv2".parse().unwrap()));
    assert_eq!(ArchSpec::from_json(&a.to_json()).unwrap(), a);
    let bad = a
        .to_json()
        .replacen("\"downsample\"", "\"extra\": 1, \"downsample\"", 1);
    assert!(matches!(ArchSpec::from_json(&bad), Err(Error::Json(_))));
    assert!(matches!(ArchSpec::resolve("bogus"), Err(Error::Config(_))));
}

#[test]
fn channel_chain_mismatch() {
    let mut a = ArchSpec::resnet20();
    a.stages[1].template.in_ch = 8;
    assert!(matches!(a.expand(), Err(Error::Config(_))));
    assert!(matches!(
        build_network::<f32>(&a, AttentionKind::None, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let mut net = build_network::<f32>(&ArchSpec::resnet20(), AttentionKind::Ba, 11).unwrap();
    let x = randn([2, 3, 32, 32], &mut rng(12)).cast::<f32>();
    net.loss_and_grad(&x, &[1, 2]).unwrap();
    checkpoint::save(net.params(), &path).unwrap();
    let want = net.forward(&x, Mode::Eval).unwrap();

    let mut fresh = build_network::<f32>(&ArchSpec::resnet20(), AttentionKind::Ba, 99).unwrap();
    checkpoint::load_into(fresh.params_mut(), &path).unwrap();
    assert_eq!(fresh.forward(&x, Mode::Eval).unwrap(), want);

    let mut se = build_network::<f32>(&ArchSpec::resnet20(), AttentionKind::Se, 0).unwrap();
    match checkpoint::load_into(se.params_mut(), &path) {
        Err(Error::CheckpointMismatch { name, .. }) => {
            assert_eq!(name, "stage1.block0.attn.w1.weight")
        }
        other => panic!("expected mismatch, got {other:?}"),
    }

    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(
        checkpoint::decode(&bytes[..bytes.len() - 3], &path),
        Err(Error::Format { .. })
    ));
    assert!(matches!(
        checkpoint::decode(b"NOTBANET", &path),
        Err(Error::Format { .. })
    ));
}
