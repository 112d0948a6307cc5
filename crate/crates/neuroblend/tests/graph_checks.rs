//! Cross-module integration checks: node censuses by independent walk,
//! schedule order against an independent topological-sort oracle, model
//! round-trips, and frozen golden values.

mod common;

use neuroblend::builders::build_neuroblend20;
use neuroblend::init::{random_init, random_input};
use neuroblend::ir::{validate, DType, Node, OpKind, Producer, ValueInfo};
use neuroblend::modelio::{load_model, model_from_bytes, model_to_bytes, save_model};
use neuroblend::oracle::reference_forward;

use neuroblend::{topo_schedule, Graph};

#[test]
fn neuroblend20_census_by_independent_walk() {
    let g = build_neuroblend20(10).unwrap();
    assert!(validate(&g).is_empty());

    // census by direct node-list walk
    assert_eq!(common::census(&g, "BinaryConv2d"), 9, "one binary conv per block");
    assert_eq!(common::census(&g, "Add"), 9, "one residual add per block");
    // fixed-point boundary layers: stem conv + head linear
    assert_eq!(common::census(&g, "FixedLinear"), 1);
    // skip convs appear only in downsample blocks (stage boundaries)
    let skip_convs = g
        .iter_nodes()
        .filter(|(_, n)| n.op.kind_name() == "FixedConv2d" && n.name.contains(".skip."))
        .count();
    assert_eq!(skip_convs, 2, "stage2 and stage3 entries downsample");
    assert_eq!(common::census(&g, "FixedConv2d"), 3, "stem + 2 skip projections");
    // all binary convs 3x3, all skip convs 1x1
    for (_, n) in g.iter_nodes() {
        match &n.op {
            OpKind::BinaryConv2d { attrs, .. } => assert_eq!(attrs.kernel, 3),
            OpKind::FixedConv2d { attrs, .. } if n.name.contains(".skip.") => {
                assert_eq!(attrs.kernel, 1)
            }
            _ => {}
        }
    }
    // every block ends affine-free
    let affine_free = g
        .iter_nodes()
        .filter(|(_, n)| matches!(&n.op, OpKind::BatchNorm(bn) if bn.affine_free))
        .count();
    assert_eq!(affine_free, 9);
}

#[test]
fn neuroblend18_census() {
    let g = neuroblend::builders::build_neuroblend18(100).unwrap();
    assert!(validate(&g).is_empty());
    assert_eq!(common::census(&g, "BinaryConv2d"), 8, "two blocks per stage, four stages");
    let skip_convs = g
        .iter_nodes()
        .filter(|(_, n)| n.op.kind_name() == "FixedConv2d" && n.name.contains(".skip."))
        .count();
    assert_eq!(skip_convs, 3);
}

#[test]
fn schedule_agrees_with_petgraph_oracle() {
    let g = random_init(build_neuroblend20(10).unwrap(), 5).unwrap();
    let schedule = topo_schedule(&g).unwrap();
    assert_eq!(schedule.order.len(), g.node_count());

    // independent oracle: petgraph toposort over the same edges
    let mut pg = petgraph::graph::DiGraph::<usize, ()>::new();
    let idx: Vec<_> = g.node_ids().map(|i| (i, pg.add_node(i))).collect();
    let lookup = |nid: usize| idx.iter().find(|(i, _)| *i == nid).unwrap().1;
    for (nid, node) in g.iter_nodes() {
        for &input in &node.inputs {
            if let Producer::Node(p) = g.value(input).producer {
                pg.add_edge(lookup(p), lookup(nid), ());
            }
        }
    }
    let sorted = petgraph::algo::toposort(&pg, None).expect("acyclic");
    assert_eq!(sorted.len(), schedule.order.len());

    // every edge respected in our schedule
    let pos = |nid: usize| schedule.order.iter().position(|&n| n == nid).unwrap();
    for (nid, node) in g.iter_nodes() {
        for &input in &node.inputs {
            if let Producer::Node(p) = g.value(input).producer {
                assert!(pos(p) < pos(nid), "edge {p} -> {nid} violated");
            }
        }
    }
}

#[test]
fn model_roundtrip_is_structural_identity() {
    let g = random_init(build_neuroblend20(10).unwrap(), 7).unwrap();
    let dir = std::env::temp_dir().join(format!("nblm-roundtrip-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("m.nblm");
    save_model(&g, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(g, loaded, "structural equality after round-trip");
    // tensor payloads bit-identical: serialized bytes are equal
    assert_eq!(model_to_bytes(&g).unwrap(), model_to_bytes(&loaded).unwrap());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn compiled_model_roundtrip() {
    use neuroblend::passes::{compile_model, CompileOptions};
    let g = random_init(build_neuroblend20(10).unwrap(), 9).unwrap();
    let (compiled, _) = compile_model(g, &CompileOptions::default()).unwrap();
    let bytes = model_to_bytes(&compiled).unwrap();
    let loaded = model_from_bytes(&bytes).unwrap();
    assert_eq!(compiled, loaded);
    assert!(loaded.compiled);

    // loaded plans behave identically
    use neuroblend::runtime::ExecutionPlan;
    let input = random_input(&[3, 32, 32], 1, 8);
    let a = ExecutionPlan::from_graph(&compiled).unwrap().execute(&input).unwrap();
    let b = ExecutionPlan::from_graph(&loaded).unwrap().execute(&input).unwrap();
    assert_eq!(a.raw.data, b.raw.data);
}

#[test]
fn forged_dtype_mismatch_is_reported() {
    // binary conv fed by a fixed-point tensor
    let mut g = Graph::new("forged", 0);
    let input = g.add_input("input", DType::Real, vec![4, 8, 8]);
    let weight = neuroblend::packing::pack_axis(&vec![1.0f32; 4 * 4 * 9], &[4, 4, 3, 3], 1, 48).unwrap();
    let conv = g
        .add_node(
            "conv",
            OpKind::BinaryConv2d {
                attrs: neuroblend::ir::Conv2dAttrs { kernel: 3, stride: 1, padding: 1 },
                weight,
                pad_bit: 0,
            },
            vec![input],
        )
        .unwrap();
    g.set_output("out", conv);
    let violations = validate(&g);
    assert!(
        violations.iter().any(|v| v.rule == "dtype-mismatch"),
        "got {violations:?}"
    );
}

#[test]
fn forged_cycle_is_reported() {
    let mut g = Graph::new("cyclic", 0);
    let input = g.add_input("input", DType::Real, vec![2]);
    let v1 = g.add_raw_value(ValueInfo {
        dtype: DType::Real,
        shape: vec![2],
        producer: Producer::Node(0),
    });
    let v2 = g.add_raw_value(ValueInfo {
        dtype: DType::Real,
        shape: vec![2],
        producer: Producer::Node(1),
    });
    g.add_raw_node(Node {
        name: "add0".into(),
        op: OpKind::Add,
        inputs: vec![input, v2],
        output: v1,
    });
    g.add_raw_node(Node {
        name: "add1".into(),
        op: OpKind::Add,
        inputs: vec![input, v1],
        output: v2,
    });
    g.set_output("out", v2);
    let violations = validate(&g);
    assert!(violations.iter().any(|v| v.rule == "cycle"), "got {violations:?}");
}

/// FNV-1a over every node's activation bytes, frozen from the first
/// reference run of seed 3.
const TRACE_HASH_SEED3: u64 = 0xc4fd7e8a56f4c9b4;

#[test]
fn frozen_parameter_goldens_seed7() {
    let g = random_init(build_neuroblend20(10).unwrap(), 7).unwrap();
    for (_, node) in g.iter_nodes() {
        if node.name == "stem.conv" {
            if let OpKind::FixedConv2d { weight, .. } = &node.op {
                let w = weight.as_f32().unwrap();
                assert_eq!(&w[..3], &[-0.11697393, -0.015953002, 0.15444715]);
            }
        }
        if node.name == "s1.b3.conv" {
            if let OpKind::BinaryConv2d { weight, .. } = &node.op {
                let vals = neuroblend::packing::unpack_axis(weight);
                assert_eq!(&vals[..6], &[-1.0, -1.0, 1.0, -1.0, -1.0, 1.0]);
            }
        }
    }
}

#[test]
fn frozen_oracle_golden_seed3() {
    let g = random_init(build_neuroblend20(10).unwrap(), 3).unwrap();
    let input = random_input(&[3, 32, 32], 3, 8);
    let xs: Vec<f64> = input.iter().map(|&x| x as f64).collect();
    let out = reference_forward(&g, &xs).unwrap();
    // full per-node activation dump, hashed for regression
    let all_values: Vec<usize> = g.iter_nodes().map(|(_, n)| n.output).collect();
    let trace = neuroblend::oracle::reference_forward_with_dumps(&g, &xs, &all_values).unwrap();
    let mut th = 0xcbf29ce484222325u64;
    for v in all_values.iter().flat_map(|v| trace.dumps[v].iter()) {
        for b in v.to_le_bytes() {
            th ^= b as u64;
            th = th.wrapping_mul(0x100000001b3);
        }
    }
    assert_eq!(th, TRACE_HASH_SEED3, "per-node activation dump regression");
    assert!((out.output[0] - 0.7162065549197387).abs() < 1e-15);
    assert!((out.output[1] - 0.09196884426503468).abs() < 1e-15);
    assert!((out.output[2] - 1.8345928819673736).abs() < 1e-15);
    let mut h = 0xcbf29ce484222325u64;
    for v in &out.output {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    assert_eq!(h, 0xac514358213d1e1d, "bit-exact regression of the reference run");
}

#[test]
fn mixer_pipeline_is_a_safe_no_op() {
    use neuroblend::mixer::{build_blendmixer, FcPrecision, MixerSpec};
    use neuroblend::passes::{run_pipeline, PassName};
    let g = random_init(
        build_blendmixer(&MixerSpec::s4(), FcPrecision::ALL_BINARY, 10).unwrap(),
        2,
    )
    .unwrap();
    let input = random_input(&[3, 32, 32], 8, 8);
    let xs: Vec<f64> = input.iter().map(|&x| x as f64).collect();
    let before = reference_forward(&g, &xs).unwrap();
    let (g2, report) = run_pipeline(g, &PassName::DEFAULT_PIPELINE).unwrap();
    assert!(validate(&g2).is_empty());
    // transposes sit between mixer blocks, so no block-entry fan-out
    // pattern exists and the mixer keeps its sign nodes
    assert_eq!(report.total_rewritten(), 0);
    let after = reference_forward(&g2, &xs).unwrap();
    assert_eq!(before.output, after.output);
}
