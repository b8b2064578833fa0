//! Central-difference gradient checks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::ops::{OpKind, ScatterPlan, WarpPlan};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-8;

/// Compares analytic and numeric gradients of `build` with respect to
/// every tensor in `inputs`.
///
/// The output of `build` is contracted against a fixed random tensor to
/// get a scalar. Returns `max |analytic - numeric| / max(|numeric|, 1e-8)`.
pub fn grad_check_fn<F>(inputs: &[Tensor], seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let eval = |vals: &[Tensor], proj: Option<&Tensor>, grad: bool| -> Result<(f64, Option<Vec<Tensor>>, Tensor)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().enumerate().map(|(i, t)| g.input(&format!("in{i}"), t.clone(), true)).collect();
        let out = build(&mut g, &ids)?;
        let shape = g.shape(out).to_vec();
        let r = match proj {
            Some(r) => r.clone(),
            None => Tensor::ones(&shape),
        };
        let rid = g.constant(r);
        let prod = g.mul(out, rid)?;
        let loss = g.sum(prod)?;
        let value = g.value(loss).item();
        let grads = if grad {
            let gr = g.backward(loss)?;
            Some(ids.iter().zip(vals).map(|(&id, t)| gr.of(id).cloned().unwrap_or_else(|| Tensor::zeros(&t.shape))).collect())
        } else {
            None
        };
        Ok((value, grads, g.value(out).clone()))
    };

    // Output shape first, then a fixed projection.
    let (_, _, out) = eval(inputs, None, false)?;
    let proj = if out.len() == 1 {
        Tensor::ones(&out.shape)
    } else {
        Tensor::uniform(&out.shape, 1.0, &mut rng)
    };
    let (_, analytic, _) = eval(inputs, Some(&proj), true)?;
    let analytic = analytic.expect("requested");

    let mut worst: f64 = 0.0;
    let mut vals = inputs.to_vec();
    for t in 0..vals.len() {
        for i in 0..vals[t].len() {
            let orig = vals[t].data[i];
            vals[t].data[i] = orig + STEP;
            let (plus, _, _) = eval(&vals, Some(&proj), false)?;
            vals[t].data[i] = orig - STEP;
            let (minus, _, _) = eval(&vals, Some(&proj), false)?;
            vals[t].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[t].data[i];
            worst = worst.max((a - numeric).abs() / numeric.abs().max(FLOOR));
        }
    }
    Ok(worst)
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Gradient check for a single op kind, with `shape` as the primary input
/// shape. Auxiliary inputs (weights, masks, targets) are drawn from `seed`.
pub fn grad_check(op: &OpKind, shape: &[usize], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(shape, 1.0, &mut rng);
    let need_rank = |r: usize| -> Result<()> {
        if shape.len() != r {
            return Err(Error::Attribute(format!("{op} grad check needs a rank-{r} shape, got {shape:?}")));
        }
        Ok(())
    };
    let single = |op: OpKind, x: Tensor| grad_check_fn(&[x], seed, move |g, ids| g.apply(op.clone(), &[ids[0]]));
    match op {
        OpKind::Input | OpKind::Param | OpKind::Constant => Ok(0.0),
        OpKind::Conv2d { k, .. } => {
            need_rank(3)?;
            let co = 3;
            let w = Tensor::uniform(&[*k, *k, shape[2], co], 0.5, &mut rng);
            let b = Tensor::uniform(&[co], 0.5, &mut rng);
            let op = op.clone();
            grad_check_fn(&[x, w, b], seed, move |g, ids| g.apply(op.clone(), ids))
        }
        OpKind::DepthwiseConv2d { k } => {
            need_rank(3)?;
            let w = Tensor::uniform(&[*k, *k, shape[2]], 0.5, &mut rng);
            let b = Tensor::uniform(&[shape[2]], 0.5, &mut rng);
            let op = op.clone();
            grad_check_fn(&[x, w, b], seed, move |g, ids| g.apply(op.clone(), ids))
        }
        OpKind::MaskedSparseConv { k } => {
            need_rank(3)?;
            let co = 3;
            let w = Tensor::uniform(&[*k, *k, shape[2], co], 0.5, &mut rng);
            let b = Tensor::uniform(&[co], 0.5, &mut rng);
            let mask = Tensor::new(
                vec![shape[0], shape[1]],
                (0..shape[0] * shape[1]).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect(),
            );
            let op = op.clone();
            grad_check_fn(&[x, w, b], seed, move |g, ids| {
                let m = g.constant(mask.clone());
                g.apply(op.clone(), &[ids[0], ids[1], ids[2], m])
            })
        }
        OpKind::MatMul => {
            let kd = *shape.last().unwrap_or(&1);
            let w = Tensor::uniform(&[kd, 4], 0.5, &mut rng);
            let b = Tensor::uniform(&[4], 0.5, &mut rng);
            grad_check_fn(&[x, w, b], seed, |g, ids| g.matmul(ids[0], ids[1], Some(ids[2])))
        }
        OpKind::BatchMatMul { transpose_b } => {
            need_rank(3)?;
            let bshape = if *transpose_b { [shape[0], 3, shape[2]] } else { [shape[0], shape[2], 3] };
            let b = Tensor::uniform(&bshape, 1.0, &mut rng);
            let tb = *transpose_b;
            grad_check_fn(&[x, b], seed, move |g, ids| g.bmm(ids[0], ids[1], tb))
        }
        OpKind::LayerNorm { .. } => {
            let c = *shape.last().unwrap_or(&1);
            let gamma = Tensor::uniform(&[c], 1.0, &mut rng);
            let beta = Tensor::uniform(&[c], 1.0, &mut rng);
            let op = op.clone();
            grad_check_fn(&[x, gamma, beta], seed, move |g, ids| g.apply(op.clone(), ids))
        }
        OpKind::Relu => single(op.clone(), away_from_zero(shape, &mut rng)),
        OpKind::Softmax { .. }
        | OpKind::Gelu
        | OpKind::ScalarMul(_)
        | OpKind::Mean { .. }
        | OpKind::Sum { .. }
        | OpKind::Slice { .. }
        | OpKind::Reshape(_)
        | OpKind::Permute(_)
        | OpKind::BilinearWarp(_)
        | OpKind::ScatterRows(_) => single(op.clone(), x),
        OpKind::Add | OpKind::Mul => {
            let y = Tensor::uniform(shape, 1.0, &mut rng);
            let op = op.clone();
            grad_check_fn(&[x, y], seed, move |g, ids| g.apply(op.clone(), ids))
        }
        OpKind::Concat { .. } => {
            let y = Tensor::uniform(shape, 1.0, &mut rng);
            let op = op.clone();
            grad_check_fn(&[x, y], seed, move |g, ids| g.apply(op.clone(), ids))
        }
        OpKind::FocalLoss { .. } => {
            let y = Tensor::new(shape.to_vec(), (0..x.len()).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect());
            let z = x.map(|v| 3.0 * v);
            let op = op.clone();
            grad_check_fn(&[z], seed, move |g, ids| {
                let t = g.constant(y.clone());
                g.apply(op.clone(), &[ids[0], t])
            })
        }
        OpKind::SmoothL1 { .. } => {
            need_rank(2)?;
            let t = Tensor::uniform(shape, 2.0, &mut rng);
            let w = Tensor::new(vec![shape[0]], (0..shape[0]).map(|_| if rng.gen_bool(0.6) { 1.0 } else { 0.0 }).collect());
            let p = x.map(|v| 2.0 * v);
            let op = op.clone();
            grad_check_fn(&[p], seed, move |g, ids| {
                let tt = g.constant(t.clone());
                let ww = g.constant(w.clone());
                g.apply(op.clone(), &[ids[0], tt, ww])
            })
        }
        OpKind::CrossEntropy => {
            need_rank(2)?;
            let k = shape[1];
            let cls = Tensor::new(vec![shape[0]], (0..shape[0]).map(|_| rng.gen_range(0..k) as f64).collect());
            let w = Tensor::new(vec![shape[0]], (0..shape[0]).map(|_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 }).collect());
            grad_check_fn(&[x], seed, move |g, ids| {
                let c = g.constant(cls.clone());
                let ww = g.constant(w.clone());
                g.apply(OpKind::CrossEntropy, &[ids[0], c, ww])
            })
        }
    }
}

/// A random warp plan over an `h x w` grid, for exercising `BilinearWarp`.
pub fn random_warp_plan(h: usize, w: usize, seed: u64) -> Arc<WarpPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taps = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        if rng.gen_bool(0.15) {
            taps.push(vec![]);
            valid.push(false);
            continue;
        }
        let n = rng.gen_range(1..=4);
        taps.push((0..n).map(|_| (rng.gen_range(0..h * w), rng.gen_range(0.0..1.0))).collect());
        valid.push(true);
    }
    Arc::new(WarpPlan {
        in_hw: (h, w),
        out_hw: (h, w),
        taps,
        valid,
    })
}

pub fn random_scatter_plan(rows: usize, out_rows: usize, seed: u64) -> Arc<ScatterPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Arc::new(ScatterPlan {
        dst: (0..rows).map(|_| rng.gen_bool(0.9).then(|| rng.gen_range(0..out_rows))).collect(),
        out_rows,
    })
}
