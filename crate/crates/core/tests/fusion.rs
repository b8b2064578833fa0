use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use heatv2x::adapters::init_mc_adapter;
use heatv2x::autograd::{Graph, ParamStore};
use heatv2x::config::ModelConfig;
use heatv2x::encoder::{BEVFeature, POSITION_CHANNELS};
use heatv2x::fusion::{
    cross_agent_attention, fuse, fuse_graph, init_fusion, spatial_align, warp_plan, write_attention_heatmap,
    FusionAgent, MC_PREFIX,
};
use heatv2x::geometry::Pose;
use heatv2x::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn feature(g: usize, c: usize, pose: Pose, seed: u64, agent: usize) -> BEVFeature {
    BEVFeature {
        tensor: random(&[g, g, c + POSITION_CHANNELS], seed),
        pose,
        agent_index: agent,
    }
}

fn cfg() -> ModelConfig {
    ModelConfig::default()
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape == b.shape && a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn alignment_to_own_pose_is_exact() {
    let f = feature(8, 4, Pose::new(2.0, -1.0, 0.7), 1, 0);
    let a = spatial_align(&f, &f.pose, 8.0).unwrap();
    assert!(a.tensor.bitwise_eq(&f.tensor));
}

#[test]
fn quarter_turn_moves_an_impulse_to_the_rotated_cell() {
    // 8 cells of 2 m over [-8, 8]; the source faces +y from the same spot,
    // so its local (x, y) sits at ego (-y, x)
    let (g, c) = (8, 2);
    let mut t = Tensor::zeros(&[g, g, c + POSITION_CHANNELS]);
    t.set(&[1, 5, 0], 1.0);
    let src = BEVFeature {
        tensor: t,
        pose: Pose::new(0.0, 0.0, FRAC_PI_2),
        agent_index: 1,
    };
    let out = spatial_align(&src, &Pose::identity(), 8.0).unwrap().tensor;
    for r in 0..g {
        for col in 0..g {
            let want = if (r, col) == (5, 6) { 1.0 } else { 0.0 };
            assert!((out.at(&[r, col, 0]) - want).abs() < 1e-12, "({r}, {col})");
            assert_eq!(out.at(&[r, col, 1]), 0.0);
            assert_eq!(out.at(&[r, col, c + 2]), 1.0);
        }
    }
}

#[test]
fn out_of_range_source_aligns_to_zeros() {
    let f = feature(8, 4, Pose::new(100.0, 0.0, 0.3), 2, 1);
    let a = spatial_align(&f, &Pose::identity(), 8.0).unwrap();
    assert!(a.tensor.data.iter().all(|&v| v == 0.0));
}

fn identity_attention(c: usize) -> ParamStore {
    let mut p = ParamStore::new();
    for m in ["q", "k", "v", "o"] {
        let mut w = Tensor::zeros(&[c, c]);
        for i in 0..c {
            w.set(&[i, i], 1.0);
        }
        p.insert(&format!("fus/local/w{m}"), w, true).unwrap();
        p.insert(&format!("fus/local/b{m}"), Tensor::zeros(&[c]), true).unwrap();
    }
    p
}

#[test]
fn attention_matches_hand_computation() {
    // N = 2 agents, one cell, d_k = 2, identity projections
    let ego = [1.0, 2.0];
    let other = [3.0, -1.0];
    let stack = Tensor::new(vec![2, 1, 1, 2], vec![ego[0], ego[1], other[0], other[1]]);
    let (out, w) = cross_agent_attention(&stack, &identity_attention(2)).unwrap();
    let s0 = (ego[0] * ego[0] + ego[1] * ego[1]) / 2f64.sqrt();
    let s1 = (ego[0] * other[0] + ego[1] * other[1]) / 2f64.sqrt();
    let z = s0.exp() + s1.exp();
    let (w0, w1) = (s0.exp() / z, s1.exp() / z);
    assert!((w.data[0] - w0).abs() < 1e-12 && (w.data[1] - w1).abs() < 1e-12);
    for k in 0..2 {
        assert!((out.data[k] - (w0 * ego[k] + w1 * other[k])).abs() < 1e-12);
    }
}

#[test]
fn agent_weights_form_a_distribution() {
    let c = cfg();
    let store = init_fusion(&c, 4).unwrap();
    let g = c.feature_grid();
    let stack = random(&[3, g, g, c.channels], 5);
    let (_, w) = cross_agent_attention(&stack, &store).unwrap();
    assert_eq!(w.shape, vec![g * g, 1, 3]);
    for row in w.data.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let single = random(&[1, g, g, c.channels], 6);
    let (_, w1) = cross_agent_attention(&single, &store).unwrap();
    assert!(w1.data.iter().all(|&v| v == 1.0));
}

#[test]
fn collaborator_order_does_not_matter() {
    let c = cfg();
    let store = init_fusion(&c, 7).unwrap();
    let g = c.feature_grid();
    let ego = feature(g, c.channels, Pose::new(0.0, 0.0, 0.1), 10, 0);
    let a = feature(g, c.channels, Pose::new(12.0, 3.0, -0.2), 11, 1);
    let b = feature(g, c.channels, Pose::new(-8.0, 9.0, 0.25), 12, 2);
    let x = fuse(&[ego.clone(), a.clone(), b.clone()], &store, false, &c).unwrap();
    let y = fuse(&[ego, b, a], &store, false, &c).unwrap();
    assert!(close(&x.h, &y.h, 1e-10));
}

#[test]
fn absent_collaborators_reduce_to_single_agent() {
    let c = cfg();
    let store = init_fusion(&c, 8).unwrap();
    let gsz = c.feature_grid();
    let ego = random(&[gsz, gsz, c.channels + 3], 20);
    let others: Vec<Tensor> = (0..2).map(|i| random(&[gsz, gsz, c.channels + 3], 21 + i)).collect();
    let run = |with_others: bool| {
        let mut g = Graph::new();
        let mut agents = vec![FusionAgent {
            feature: g.input("ego", ego.clone(), false),
            plan: Arc::new(warp_plan(&Pose::identity(), &Pose::identity(), 51.2, gsz)),
            present: true,
        }];
        if with_others {
            for (i, t) in others.iter().enumerate() {
                agents.push(FusionAgent {
                    feature: g.input("other", t.clone(), false),
                    plan: Arc::new(warp_plan(&Pose::new(5.0 * (i + 1) as f64, 0.0, 0.0), &Pose::identity(), 51.2, gsz)),
                    present: false,
                });
            }
        }
        let n = fuse_graph(&mut g, &store, &agents, false, c.window).unwrap();
        g.value(n.fused).clone()
    };
    assert!(close(&run(true), &run(false), 1e-12));
}

#[test]
fn fresh_mc_adapter_does_not_change_fusion() {
    let c = cfg();
    let mut store = init_fusion(&c, 9).unwrap();
    store.extend(init_mc_adapter(MC_PREFIX, c.channels, c.adapter_ratio, 9).unwrap()).unwrap();
    let g = c.feature_grid();
    let fs = [
        feature(g, c.channels, Pose::identity(), 30, 0),
        feature(g, c.channels, Pose::new(10.0, -4.0, 0.2), 31, 1),
    ];
    let a = fuse(&fs, &store, false, &c).unwrap();
    let b = fuse(&fs, &store, true, &c).unwrap();
    assert!(a.h.bitwise_eq(&b.h));
}

#[test]
fn heatmap_lists_every_cell_and_agent() {
    let c = cfg();
    let store = init_fusion(&c, 3).unwrap();
    let g = c.feature_grid();
    let fs = [
        feature(g, c.channels, Pose::identity(), 40, 0),
        feature(g, c.channels, Pose::new(6.0, 6.0, 0.0), 41, 1),
    ];
    let out = fuse(&fs, &store, false, &c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("heat.csv");
    write_attention_heatmap(&path, &out.weights, g).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "row,col,agent,weight");
    assert_eq!(lines.len(), 1 + g * g * 2);
    let total: f64 = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - (g * g) as f64).abs() < 1e-9);
    assert!(write_attention_heatmap(&path, &out.weights, g + 1).is_err());
}
