mod common;

use common::nets::{random_structure, varied_net, GROUPED};
use common::{rand_tensor, rng};
use dynprune_core::compile::{
    compile, count_pruned_params_flops, count_structure_cost, decode_compiled, decode_dense, encode_compiled,
    encode_dense, load_compiled, load_dense, save_compiled, save_dense, CompiledLayer,
};
use dynprune_core::grouping::GroupParameters;
use dynprune_core::model::count_dense_params_flops;
use dynprune_core::pruning::{prune, GroupAssignment, LayerAssignment, PrunedStructure};
use dynprune_core::{Error, ParseError};

#[test]
fn compiled_matches_masked_dense() {
    let mut r = rng(100);
    let mut worst: f64 = 0.0;
    let mut shrunk = 0;
    for case in 0..100 {
        let net = varied_net(case);
        let s = random_structure(&net, &mut r);
        let model = compile(&net, &s).unwrap();
        let x = rand_tensor(&[3, 1, 28, 28], &mut r);
        let want = net.logits(&x, Some(&s.mask(&net).unwrap())).unwrap();
        let got = model.forward(&x).unwrap();
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
        let cost = model.cost().unwrap();
        assert_eq!(cost, count_structure_cost(&net.spec, &s).unwrap());
        if cost.flops < count_dense_params_flops(&net.spec).unwrap().flops {
            shrunk += 1;
        }
    }
    assert!(worst < 1e-9, "worst deviation {worst}");
    assert!(shrunk > 50, "only {shrunk} structures removed anything");
}

#[test]
fn identity_compile_reproduces_dense() {
    let net = varied_net(1);
    let s = PrunedStructure::identity(&net.spec, &GroupAssignment::single_group(&net.spec)).unwrap();
    let model = compile(&net, &s).unwrap();
    let x = rand_tensor(&[4, 1, 28, 28], &mut rng(2));
    let dense = net.logits(&x, None).unwrap();
    let got = model.forward(&x).unwrap();
    for (a, b) in got.data().iter().zip(dense.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let dense_cost = count_dense_params_flops(&net.spec).unwrap();
    assert_eq!(model.cost().unwrap(), dense_cost);
    let (_, dp, df) = count_pruned_params_flops(&model).unwrap();
    assert_eq!((dp, df), (0.0, 0.0));
}

#[test]
fn empty_groups_are_dropped_and_gathers_are_compiled_positions() {
    let mut net = varied_net(3);
    for k in [5, 6] {
        net.conv_weight_mut(GROUPED).unwrap().data_mut()[k * 72..(k + 1) * 72].fill(0.0);
    }
    let a = GroupAssignment {
        layers: vec![LayerAssignment::new(GROUPED, 3, vec![0, 0, 2, 2, 0, 1, 1, 2]).unwrap()],
    };
    let s = prune(&net, &a, 0.2).unwrap();
    let model = compile(&net, &s).unwrap();
    let CompiledLayer::Conv(c) = &model.layers[GROUPED] else { panic!("expected conv") };
    assert_eq!(c.groups.len(), 2);
    assert_eq!(c.out_channels(), 6);
    let CompiledLayer::Conv(first) = &model.layers[0] else { panic!("expected conv") };
    for g in &c.groups {
        assert!(g.gather.iter().all(|&p| p < first.out_channels()));
    }
    let CompiledLayer::Linear { weight, .. } = model.layers.last().unwrap() else { panic!("expected linear") };
    assert_eq!(weight.shape(), &[10, 6 * 49]);
}

#[test]
fn checkpoints_round_trip_byte_for_byte() {
    let net = varied_net(4);
    let params = GroupParameters::uniform(&net, 2, 0.5).unwrap();
    let meta = vec![("seed".to_string(), "4".to_string()), ("phase".to_string(), "dense".to_string())];
    let bytes = encode_dense(&net, Some(&params), &meta);
    let back = decode_dense(&bytes).unwrap();
    assert_eq!(back.net, net);
    assert_eq!(back.groups.as_ref(), Some(&params));
    assert_eq!(back.metadata, meta);
    assert_eq!(encode_dense(&back.net, back.groups.as_ref(), &back.metadata), bytes);
    assert!(decode_dense(&encode_dense(&net, None, &[])).unwrap().groups.is_none());

    let s = random_structure(&net, &mut rng(4));
    let mut model = compile(&net, &s).unwrap();
    model.set_meta("beta", "0.3");
    let bytes = encode_compiled(&model);
    let back = decode_compiled(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(encode_compiled(&back), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pruned.dspc");
    save_compiled(&path, &model).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(load_compiled(&path).unwrap(), model);
    let dense_path = dir.path().join("dense.dspc");
    save_dense(&dense_path, &net, None, &meta).unwrap();
    assert_eq!(load_dense(&dense_path).unwrap().net, net);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2, "temporary files left behind");
}

fn parse_error(e: Error) -> ParseError {
    match e {
        Error::Parse(p) => p,
        other => panic!("expected parse error, got {other}"),
    }
}

#[test]
fn corrupt_checkpoints_give_distinct_errors() {
    let net = varied_net(5);
    let model = compile(&net, &random_structure(&net, &mut rng(5))).unwrap();
    let bytes = encode_compiled(&model);

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(parse_error(decode_compiled(&magic).unwrap_err()), ParseError::BadMagic { .. }));

    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(
        parse_error(decode_compiled(&version).unwrap_err()),
        ParseError::VersionMismatch { expected: 1, found: 9 }
    ));

    for cut in (0..bytes.len()).step_by(7) {
        let e = parse_error(decode_compiled(&bytes[..cut]).unwrap_err());
        assert!(matches!(e, ParseError::Truncated { .. }), "cut {cut}: {e}");
    }

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(parse_error(decode_compiled(&trailing).unwrap_err()), ParseError::Malformed(_)));

    let mut lying = model.clone();
    lying.set_meta("params", "12");
    assert!(matches!(parse_error(decode_compiled(&encode_compiled(&lying)).unwrap_err()), ParseError::Malformed(_)));

    // a dense file is not a compiled model and vice versa
    let dense = encode_dense(&net, None, &[]);
    assert!(matches!(parse_error(decode_compiled(&dense).unwrap_err()), ParseError::Malformed(_)));
    assert!(matches!(parse_error(decode_dense(&bytes).unwrap_err()), ParseError::Malformed(_)));
    for cut in (0..dense.len()).step_by(11) {
        assert!(matches!(parse_error(decode_dense(&dense[..cut]).unwrap_err()), ParseError::Truncated { .. }));
    }
}
