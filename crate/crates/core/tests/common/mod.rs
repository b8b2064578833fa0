#![allow(dead_code)]

use heatv2x::autograd::gradcheck::{random_scatter_plan, random_warp_plan};
use heatv2x::autograd::{grad_check_fn, Graph, NodeId, OpKind, ParamStore};
use heatv2x::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use heatv2x::geometry::OrientedBox;

fn inside(b: &OrientedBox, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.cx, y - b.cy);
    let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
    u.abs() <= b.l / 2.0 && v.abs() <= b.w / 2.0
}

/// IoU by counting cell centers of an `n x n` raster over the joint
/// bounding square.
pub fn raster_iou(a: &OrientedBox, b: &OrientedBox, n: usize) -> f64 {
    let pts: Vec<(f64, f64)> = a.corners().into_iter().chain(b.corners()).collect();
    let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |m, p| (m.0.min(p.0), m.1.max(p.0)));
    let (y0, y1) = pts.iter().fold((f64::MAX, f64::MIN), |m, p| (m.0.min(p.1), m.1.max(p.1)));
    let side = (x1 - x0).max(y1 - y0);
    let h = side / n as f64;
    let (mut ia, mut ib, mut both) = (0u64, 0u64, 0u64);
    for r in 0..n {
        let y = y0 + (r as f64 + 0.5) * h;
        for c in 0..n {
            let x = x0 + (c as f64 + 0.5) * h;
            let (pa, pb) = (inside(a, x, y), inside(b, x, y));
            ia += pa as u64;
            ib += pb as u64;
            both += (pa && pb) as u64;
        }
    }
    let union = ia + ib - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

/// A pipeline small enough to run every stage in well under a second.
pub const TINY: &str = "\
grid = 32
azimuth_bins = 120
objects_per_scene = 6
train_scenes = 4
eval_scenes = 2
base_steps = 3
lhft_steps = 2
gcft_steps = 2
batch = 2
threads = 1
roster = pillar,voxel
";

pub fn tiny() -> heatv2x::config::RunConfig {
    heatv2x::config::RunConfig::parse_str(TINY).unwrap()
}

/// One grad-check case per op kind.
pub fn all_op_cases() -> Vec<(OpKind, Vec<usize>)> {
    vec![
        (OpKind::Conv2d { k: 3, stride: 1, pad: 1 }, vec![5, 5, 2]),
        (OpKind::Conv2d { k: 3, stride: 2, pad: 1 }, vec![6, 6, 2]),
        (OpKind::DepthwiseConv2d { k: 5 }, vec![6, 6, 2]),
        (OpKind::MaskedSparseConv { k: 3 }, vec![8, 8, 2]),
        (OpKind::MatMul, vec![3, 4]),
        (OpKind::BatchMatMul { transpose_b: false }, vec![2, 3, 4]),
        (OpKind::BatchMatMul { transpose_b: true }, vec![2, 3, 4]),
        (OpKind::Softmax { axis: 1 }, vec![2, 5]),
        (OpKind::Softmax { axis: 0 }, vec![3, 2]),
        (OpKind::LayerNorm { eps: 1e-5 }, vec![3, 6]),
        (OpKind::Gelu, vec![7]),
        (OpKind::Relu, vec![7]),
        (OpKind::Add, vec![4]),
        (OpKind::Mul, vec![2, 3]),
        (OpKind::ScalarMul(-1.7), vec![5]),
        (OpKind::Mean { axis: None }, vec![2, 3]),
        (OpKind::Mean { axis: Some(1) }, vec![2, 3, 2]),
        (OpKind::Sum { axis: Some(0) }, vec![3, 2]),
        (OpKind::Concat { axis: 1 }, vec![2, 3]),
        (OpKind::Slice { axis: 1, start: 1, len: 2 }, vec![2, 4]),
        (OpKind::Reshape(vec![3, 2]), vec![2, 3]),
        (OpKind::Permute(vec![2, 0, 1]), vec![2, 3, 4]),
        (OpKind::BilinearWarp(random_warp_plan(4, 4, 9)), vec![4, 4, 2]),
        (OpKind::ScatterRows(random_scatter_plan(6, 4, 9)), vec![6, 3]),
        (OpKind::FocalLoss { alpha: 0.25, gamma: 2.0 }, vec![10]),
        (OpKind::SmoothL1 { beta: 1.0 }, vec![5, 3]),
        (OpKind::CrossEntropy, vec![5, 3]),
    ]
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Same names and flags with every tensor redrawn in `[-0.5, 0.5]`, so zero
/// initializations no longer hide any branch.
pub fn randomized(store: &ParamStore, seed: u64) -> ParamStore {
    let mut out = ParamStore::new();
    for (i, (name, t, tr)) in store.iter().enumerate() {
        out.insert(name, random(&t.shape, seed + i as u64).map(|v| 0.5 * v), tr).unwrap();
    }
    out
}

/// Worst relative gradient error of `build` with respect to its input and
/// to every entry of every trainable tensor in `store`. Both use central
/// differences of `sum(out * r)` for a fixed random `r`, normalized by the
/// largest numeric gradient.
pub fn module_grad_error<F>(store: &ParamStore, x: &Tensor, seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore, NodeId) -> Result<NodeId>,
{
    let input_err = grad_check_fn(&[x.clone()], seed, |g, ids| build(g, store, ids[0])).unwrap();

    let loss = |s: &ParamStore, r: Option<&Tensor>| -> (f64, Graph, NodeId, Vec<usize>) {
        let mut g = Graph::new();
        let xi = g.input("x", x.clone(), false);
        let y = build(&mut g, s, xi).unwrap();
        let shape = g.shape(y).to_vec();
        let rt = r.cloned().unwrap_or_else(|| Tensor::ones(&shape));
        let ri = g.constant(rt);
        let prod = g.mul(y, ri).unwrap();
        let l = g.sum(prod).unwrap();
        (g.value(l).item(), g, l, shape)
    };
    let shape = loss(store, None).3;
    let r = random(&shape, seed ^ 0x5eed);
    let (_, g, l, _) = loss(store, Some(&r));
    let grads = g.backward(l).unwrap().param_grads(&g, store);
    let h = 1e-5;
    let (mut worst, mut scale) = (0.0f64, 1e-8f64);
    for (name, t, trainable) in store.iter() {
        if !trainable {
            continue;
        }
        for i in 0..t.len() {
            let bump = |d: f64| {
                let mut s = store.clone();
                let mut tt = t.clone();
                tt.data[i] += d;
                s.put(name, tt, true);
                loss(&s, Some(&r)).0
            };
            let num = (bump(h) - bump(-h)) / (2.0 * h);
            worst = worst.max((grads[name].data[i] - num).abs());
            scale = scale.max(num.abs());
        }
    }
    input_err.max(worst / scale)
}
