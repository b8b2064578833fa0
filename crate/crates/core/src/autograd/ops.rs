//! Op kinds with their shape rules, forward kernels and vector-Jacobian
//! products. All feature maps are channels-last: `[H, W, C]`.

use std::fmt;
use std::sync::Arc;

use crate::tensor::{strides, Tensor};

/// Precomputed bilinear resampling of an `[H, W, C]` map.
///
/// Each output cell reads up to four source cells. Cells whose sample
/// point falls outside the source extent are marked invalid and read
/// nothing, which zero-fills them.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpPlan {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub taps: Vec<Vec<(usize, f64)>>,
    pub valid: Vec<bool>,
}

impl WarpPlan {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            in_hw: (h, w),
            out_hw: (h, w),
            taps: (0..h * w).map(|i| vec![(i, 1.0)]).collect(),
            valid: vec![true; h * w],
        }
    }
}

/// Fixed many-to-one row routing: `out[dst[s]] += in[s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatterPlan {
    pub dst: Vec<Option<usize>>,
    pub out_rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Input,
    Param,
    Constant,
    /// Inputs: `x [H,W,Ci]`, `w [k,k,Ci,Co]`, `b [Co]`.
    Conv2d { k: usize, stride: usize, pad: usize },
    /// Inputs: `x [H,W,C]`, `w [k,k,C]`, `b [C]`. Stride 1, same padding.
    DepthwiseConv2d { k: usize },
    /// Same-padded stride-1 convolution evaluated only where `mask [H,W]`
    /// is nonzero; zero elsewhere. Inputs: `x`, `w`, `b`, `mask`.
    MaskedSparseConv { k: usize },
    /// `x [.., K] · w [K, N] (+ b [N])`.
    MatMul,
    /// `a [B,M,K] · b [B,K,N]`, or `b [B,N,K]` when `transpose_b`.
    BatchMatMul { transpose_b: bool },
    Softmax { axis: usize },
    /// Normalizes the last axis. Inputs: `x`, `gamma [C]`, `beta [C]`.
    LayerNorm { eps: f64 },
    Gelu,
    Relu,
    /// Broadcasting elementwise sum.
    Add,
    /// Broadcasting elementwise product.
    Mul,
    ScalarMul(f64),
    /// `None` reduces every axis to a scalar.
    Mean { axis: Option<usize> },
    Sum { axis: Option<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    BilinearWarp(Arc<WarpPlan>),
    ScatterRows(Arc<ScatterPlan>),
    /// Sigmoid focal loss summed over cells and divided by `max(1, #positives)`.
    /// Inputs: `logits`, `targets` (0/1, same shape).
    FocalLoss { alpha: f64, gamma: f64 },
    /// Inputs: `pred [P,D]`, `target [P,D]`, `weight [P]`.
    /// `sum_p weight_p * sum_d sl1(pred - target) / max(1, sum weight)`.
    SmoothL1 { beta: f64 },
    /// Inputs: `logits [P,K]`, `class [P]`, `weight [P]`.
    /// Weighted mean of softmax cross-entropy.
    CrossEntropy,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "Input",
            OpKind::Param => "Param",
            OpKind::Constant => "Constant",
            OpKind::Conv2d { .. } => "Conv2d",
            OpKind::DepthwiseConv2d { .. } => "DepthwiseConv2d",
            OpKind::MaskedSparseConv { .. } => "MaskedSparseConv",
            OpKind::MatMul => "MatMul",
            OpKind::BatchMatMul { .. } => "BatchMatMul",
            OpKind::Softmax { .. } => "Softmax",
            OpKind::LayerNorm { .. } => "LayerNorm",
            OpKind::Gelu => "Gelu",
            OpKind::Relu => "Relu",
            OpKind::Add => "Add",
            OpKind::Mul => "Mul",
            OpKind::ScalarMul(_) => "ScalarMul",
            OpKind::Mean { .. } => "Mean",
            OpKind::Sum { .. } => "Sum",
            OpKind::Concat { .. } => "Concat",
            OpKind::Slice { .. } => "Slice",
            OpKind::Reshape(_) => "Reshape",
            OpKind::Permute(_) => "Permute",
            OpKind::BilinearWarp(_) => "BilinearWarp",
            OpKind::ScatterRows(_) => "ScatterRows",
            OpKind::FocalLoss { .. } => "FocalLoss",
            OpKind::SmoothL1 { .. } => "SmoothL1",
            OpKind::CrossEntropy => "CrossEntropy",
        }
    }

    /// Attribute checks that do not depend on input shapes.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            OpKind::Conv2d { k, stride, .. } => {
                if k % 2 == 0 {
                    return Err(format!("conv kernel {k} must be odd"));
                }
                if *stride == 0 {
                    return Err("conv stride must be >= 1".into());
                }
            }
            OpKind::DepthwiseConv2d { k } | OpKind::MaskedSparseConv { k } => {
                if k % 2 == 0 {
                    return Err(format!("conv kernel {k} must be odd"));
                }
            }
            OpKind::LayerNorm { eps } if *eps <= 0.0 => {
                return Err("layernorm eps must be positive".into());
            }
            OpKind::ScalarMul(s) if !s.is_finite() => {
                return Err("scalar multiplier must be finite".into());
            }
            OpKind::FocalLoss { alpha, gamma } => {
                if !(0.0..=1.0).contains(alpha) || *gamma < 0.0 {
                    return Err("focal alpha must be in [0,1] and gamma >= 0".into());
                }
            }
            OpKind::SmoothL1 { beta } if *beta <= 0.0 => {
                return Err("smooth-l1 beta must be positive".into());
            }
            _ => {}
        }
        Ok(())
    }

    /// True for ops whose listed inputs at these positions are never
    /// differentiated (targets, masks).
    pub fn is_constant_input(&self, pos: usize) -> bool {
        match self {
            OpKind::MaskedSparseConv { .. } => pos == 3,
            OpKind::FocalLoss { .. } => pos == 1,
            OpKind::SmoothL1 { .. } | OpKind::CrossEntropy => pos >= 1,
            _ => false,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<(), String> {
    if t.rank() != rank {
        return Err(format!("{what} must have rank {rank}, got {:?}", t.shape));
    }
    Ok(())
}

fn expect_shape(t: &Tensor, shape: &[usize], what: &str) -> Result<(), String> {
    if t.shape != shape {
        return Err(format!("{what} must have shape {shape:?}, got {:?}", t.shape));
    }
    Ok(())
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, String> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(format!("cannot broadcast {a:?} with {b:?}"));
        };
    }
    Ok(out)
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Shape inference plus input validation.
pub fn infer_shape(op: &OpKind, ins: &[&Tensor]) -> Result<Vec<usize>, String> {
    let arity = |n: usize| -> Result<(), String> {
        if ins.len() != n {
            return Err(format!("{op} expects {n} inputs, got {}", ins.len()));
        }
        Ok(())
    };
    match op {
        OpKind::Input | OpKind::Param | OpKind::Constant => Err("leaf ops take no inputs".into()),
        OpKind::Conv2d { k, stride, pad } => {
            arity(3)?;
            let (x, w, b) = (ins[0], ins[1], ins[2]);
            expect_rank(x, 3, "conv input")?;
            expect_rank(w, 4, "conv weight")?;
            let (ci, co) = (x.shape[2], w.shape[3]);
            expect_shape(w, &[*k, *k, ci, co], "conv weight")?;
            expect_shape(b, &[co], "conv bias")?;
            let ho = conv_out(x.shape[0], *k, *stride, *pad).ok_or("conv input smaller than kernel")?;
            let wo = conv_out(x.shape[1], *k, *stride, *pad).ok_or("conv input smaller than kernel")?;
            Ok(vec![ho, wo, co])
        }
        OpKind::DepthwiseConv2d { k } => {
            arity(3)?;
            expect_rank(ins[0], 3, "depthwise input")?;
            let c = ins[0].shape[2];
            expect_shape(ins[1], &[*k, *k, c], "depthwise weight")?;
            expect_shape(ins[2], &[c], "depthwise bias")?;
            Ok(ins[0].shape.clone())
        }
        OpKind::MaskedSparseConv { k } => {
            arity(4)?;
            let (x, w, b, m) = (ins[0], ins[1], ins[2], ins[3]);
            expect_rank(x, 3, "sparse conv input")?;
            let (ci, co) = (x.shape[2], w.last_dim());
            expect_shape(w, &[*k, *k, ci, co], "sparse conv weight")?;
            expect_shape(b, &[co], "sparse conv bias")?;
            expect_shape(m, &[x.shape[0], x.shape[1]], "occupancy mask")?;
            Ok(vec![x.shape[0], x.shape[1], co])
        }
        OpKind::MatMul => {
            if ins.len() != 2 && ins.len() != 3 {
                return Err(format!("MatMul expects 2 or 3 inputs, got {}", ins.len()));
            }
            let (x, w) = (ins[0], ins[1]);
            expect_rank(w, 2, "matmul weight")?;
            if x.rank() == 0 || x.last_dim() != w.shape[0] {
                return Err(format!("matmul inner dims differ: {:?} x {:?}", x.shape, w.shape));
            }
            if let Some(b) = ins.get(2) {
                expect_shape(b, &[w.shape[1]], "matmul bias")?;
            }
            let mut s = x.shape.clone();
            *s.last_mut().unwrap() = w.shape[1];
            Ok(s)
        }
        OpKind::BatchMatMul { transpose_b } => {
            arity(2)?;
            let (a, b) = (ins[0], ins[1]);
            expect_rank(a, 3, "bmm lhs")?;
            expect_rank(b, 3, "bmm rhs")?;
            let (bk, bn) = if *transpose_b { (b.shape[2], b.shape[1]) } else { (b.shape[1], b.shape[2]) };
            if a.shape[0] != b.shape[0] || a.shape[2] != bk {
                return Err(format!("bmm dims differ: {:?} x {:?}", a.shape, b.shape));
            }
            Ok(vec![a.shape[0], a.shape[1], bn])
        }
        OpKind::Softmax { axis } => {
            arity(1)?;
            if *axis >= ins[0].rank() {
                return Err(format!("softmax axis {axis} out of range for {:?}", ins[0].shape));
            }
            Ok(ins[0].shape.clone())
        }
        OpKind::LayerNorm { .. } => {
            arity(3)?;
            let c = ins[0].last_dim();
            expect_shape(ins[1], &[c], "layernorm gamma")?;
            expect_shape(ins[2], &[c], "layernorm beta")?;
            Ok(ins[0].shape.clone())
        }
        OpKind::Gelu | OpKind::Relu | OpKind::ScalarMul(_) => {
            arity(1)?;
            Ok(ins[0].shape.clone())
        }
        OpKind::Add | OpKind::Mul => {
            arity(2)?;
            broadcast_shape(&ins[0].shape, &ins[1].shape)
        }
        OpKind::Mean { axis } | OpKind::Sum { axis } => {
            arity(1)?;
            match axis {
                None => Ok(vec![]),
                Some(a) if *a < ins[0].rank() => {
                    let mut s = ins[0].shape.clone();
                    s.remove(*a);
                    Ok(s)
                }
                Some(a) => Err(format!("reduction axis {a} out of range")),
            }
        }
        OpKind::Concat { axis } => {
            if ins.is_empty() {
                return Err("concat needs at least one input".into());
            }
            let first = &ins[0].shape;
            if *axis >= first.len() {
                return Err(format!("concat axis {axis} out of range"));
            }
            let mut total = 0;
            for t in ins {
                if t.rank() != first.len()
                    || t.shape.iter().zip(first).enumerate().any(|(i, (a, b))| i != *axis && a != b)
                {
                    return Err(format!("concat shapes differ: {first:?} vs {:?}", t.shape));
                }
                total += t.shape[*axis];
            }
            let mut s = first.clone();
            s[*axis] = total;
            Ok(s)
        }
        OpKind::Slice { axis, start, len } => {
            arity(1)?;
            let x = ins[0];
            if *axis >= x.rank() || start + len > x.shape[*axis] {
                return Err(format!("slice {start}..{} out of range on axis {axis} of {:?}", start + len, x.shape));
            }
            let mut s = x.shape.clone();
            s[*axis] = *len;
            Ok(s)
        }
        OpKind::Reshape(shape) => {
            arity(1)?;
            if shape.iter().product::<usize>() != ins[0].len() {
                return Err(format!("cannot reshape {:?} to {shape:?}", ins[0].shape));
            }
            Ok(shape.clone())
        }
        OpKind::Permute(perm) => {
            arity(1)?;
            let r = ins[0].rank();
            let mut seen = vec![false; r];
            if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
                return Err(format!("invalid permutation {perm:?} for rank {r}"));
            }
            Ok(perm.iter().map(|&p| ins[0].shape[p]).collect())
        }
        OpKind::BilinearWarp(plan) => {
            arity(1)?;
            let x = ins[0];
            expect_rank(x, 3, "warp input")?;
            if (x.shape[0], x.shape[1]) != plan.in_hw {
                return Err(format!("warp plan expects {:?} input, got {:?}", plan.in_hw, x.shape));
            }
            Ok(vec![plan.out_hw.0, plan.out_hw.1, x.shape[2]])
        }
        OpKind::ScatterRows(plan) => {
            arity(1)?;
            expect_rank(ins[0], 2, "scatter input")?;
            if ins[0].shape[0] != plan.dst.len() {
                return Err(format!("scatter plan has {} rows, input {:?}", plan.dst.len(), ins[0].shape));
            }
            Ok(vec![plan.out_rows, ins[0].shape[1]])
        }
        OpKind::FocalLoss { .. } => {
            arity(2)?;
            expect_shape(ins[1], &ins[0].shape, "focal targets")?;
            Ok(vec![])
        }
        OpKind::SmoothL1 { .. } => {
            arity(3)?;
            expect_rank(ins[0], 2, "smooth-l1 prediction")?;
            expect_shape(ins[1], &ins[0].shape, "smooth-l1 target")?;
            expect_shape(ins[2], &[ins[0].shape[0]], "smooth-l1 weight")?;
            Ok(vec![])
        }
        OpKind::CrossEntropy => {
            arity(3)?;
            expect_rank(ins[0], 2, "cross-entropy logits")?;
            let p = ins[0].shape[0];
            expect_shape(ins[1], &[p], "cross-entropy classes")?;
            expect_shape(ins[2], &[p], "cross-entropy weight")?;
            let k = ins[0].shape[1] as f64;
            if ins[1].data.iter().any(|&c| c < 0.0 || c >= k || c.fract() != 0.0) {
                return Err("cross-entropy class index out of range".into());
            }
            Ok(vec![])
        }
    }
}

// ---------------------------------------------------------------------------
// convolution kernels

struct ConvGeom {
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, wt: &Tensor, out_shape: &[usize], k: usize, stride: usize, pad: usize) -> Self {
        Self {
            h: x.shape[0],
            w: x.shape[1],
            ci: x.shape[2],
            co: wt.last_dim(),
            k,
            stride,
            pad,
            ho: out_shape[0],
            wo: out_shape[1],
        }
    }

    #[inline]
    fn src(&self, o: usize, kk: usize, n: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    }
}

#[inline]
fn conv_at(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64], oy: usize, ox: usize, o: &mut [f64]) {
    o.copy_from_slice(b);
    for ky in 0..g.k {
        let Some(iy) = g.src(oy, ky, g.h) else { continue };
        for kx in 0..g.k {
            let Some(ix) = g.src(ox, kx, g.w) else { continue };
            let xs = &x[(iy * g.w + ix) * g.ci..][..g.ci];
            let wbase = (ky * g.k + kx) * g.ci * g.co;
            for (ci, &xv) in xs.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let ws = &w[wbase + ci * g.co..][..g.co];
                for (ov, &wv) in o.iter_mut().zip(ws) {
                    *ov += xv * wv;
                }
            }
        }
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn conv_at_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    oy: usize,
    ox: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let gs = &gout[(oy * g.wo + ox) * g.co..][..g.co];
    if gs.iter().all(|&v| v == 0.0) {
        return;
    }
    let mut dx = dx;
    let mut dw = dw;
    for ky in 0..g.k {
        let Some(iy) = g.src(oy, ky, g.h) else { continue };
        for kx in 0..g.k {
            let Some(ix) = g.src(ox, kx, g.w) else { continue };
            let xoff = (iy * g.w + ix) * g.ci;
            let wbase = (ky * g.k + kx) * g.ci * g.co;
            for ci in 0..g.ci {
                let woff = wbase + ci * g.co;
                if let Some(dx) = dx.as_deref_mut() {
                    let ws = &w[woff..][..g.co];
                    dx[xoff + ci] += ws.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(dw) = dw.as_deref_mut() {
                    let xv = x[xoff + ci];
                    if xv != 0.0 {
                        for (d, &gv) in dw[woff..][..g.co].iter_mut().zip(gs) {
                            *d += xv * gv;
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, out_shape: &[usize], k: usize, stride: usize, pad: usize, mask: Option<&Tensor>) -> Tensor {
    let g = ConvGeom::new(x, w, out_shape, k, stride, pad);
    let mut out = vec![0.0; g.ho * g.wo * g.co];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            if mask.is_some_and(|m| m.data[oy * g.wo + ox] == 0.0) {
                continue;
            }
            let o = &mut out[(oy * g.wo + ox) * g.co..][..g.co];
            conv_at(&g, &x.data, &w.data, &b.data, oy, ox, o);
        }
    }
    Tensor::new(out_shape.to_vec(), out)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    k: usize,
    stride: usize,
    pad: usize,
    mask: Option<&Tensor>,
    need: &[bool],
) -> Vec<Option<Tensor>> {
    let g = ConvGeom::new(x, w, &gout.shape, k, stride, pad);
    let mut dx = need[0].then(|| vec![0.0; x.len()]);
    let mut dw = need[1].then(|| vec![0.0; w.len()]);
    let mut db = need[2].then(|| vec![0.0; g.co]);
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            if mask.is_some_and(|m| m.data[oy * g.wo + ox] == 0.0) {
                continue;
            }
            conv_at_backward(&g, &x.data, &w.data, &gout.data, oy, ox, dx.as_deref_mut(), dw.as_deref_mut());
            if let Some(db) = db.as_mut() {
                let gs = &gout.data[(oy * g.wo + ox) * g.co..][..g.co];
                for (d, v) in db.iter_mut().zip(gs) {
                    *d += v;
                }
            }
        }
    }
    vec![
        dx.map(|d| Tensor::new(x.shape.clone(), d)),
        dw.map(|d| Tensor::new(w.shape.clone(), d)),
        db.map(|d| Tensor::new(vec![g.co], d)),
    ]
}

fn depthwise_forward(x: &Tensor, w: &Tensor, b: &Tensor, k: usize) -> Tensor {
    let (h, wd, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; x.len()];
    for oy in 0..h {
        for ox in 0..wd {
            let o = &mut out[(oy * wd + ox) * c..][..c];
            o.copy_from_slice(&b.data);
            for ky in 0..k {
                let iy = oy as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize + kx as isize - pad;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let xs = &x.data[(iy as usize * wd + ix as usize) * c..][..c];
                    let ws = &w.data[(ky * k + kx) * c..][..c];
                    for ((ov, xv), wv) in o.iter_mut().zip(xs).zip(ws) {
                        *ov += xv * wv;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

fn depthwise_backward(x: &Tensor, w: &Tensor, gout: &Tensor, k: usize, need: &[bool]) -> Vec<Option<Tensor>> {
    let (h, wd, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let pad = (k / 2) as isize;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; c];
    for oy in 0..h {
        for ox in 0..wd {
            let gs = &gout.data[(oy * wd + ox) * c..][..c];
            for (d, v) in db.iter_mut().zip(gs) {
                *d += v;
            }
            for ky in 0..k {
                let iy = oy as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize + kx as isize - pad;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let xo = (iy as usize * wd + ix as usize) * c;
                    let wo = (ky * k + kx) * c;
                    for ch in 0..c {
                        dx[xo + ch] += gs[ch] * w.data[wo + ch];
                        dw[wo + ch] += gs[ch] * x.data[xo + ch];
                    }
                }
            }
        }
    }
    vec![
        need[0].then(|| Tensor::new(x.shape.clone(), dx)),
        need[1].then(|| Tensor::new(w.shape.clone(), dw)),
        need[2].then(|| Tensor::new(vec![c], db)),
    ]
}

// ---------------------------------------------------------------------------
// broadcasting helpers

/// For every flat output index, the flat index into an input broadcast to `out`.
fn broadcast_index(input: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if input == out {
        return (0..n).collect();
    }
    let rank = out.len();
    let pad = rank - input.len();
    let in_strides = strides(input);
    let mut eff = vec![0; rank];
    for i in 0..input.len() {
        eff[pad + i] = if input[i] == 1 { 0 } else { in_strides[i] };
    }
    let mut idx = vec![0usize; rank];
    let mut res = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        res.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    res
}

fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let map = broadcast_index(shape, &grad.shape);
    let mut out = vec![0.0; shape.iter().product()];
    for (g, &i) in grad.data.iter().zip(&map) {
        out[i] += g;
    }
    Tensor::new(shape.to_vec(), out)
}

/// (outer, axis_len, inner) decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    // out[j] = in[src[j]]
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut res = Vec::with_capacity(n);
    for _ in 0..n {
        res.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    res
}

fn focal_terms(z: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    if y > 0.5 {
        let log_p = -softplus(-z);
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * log_p;
        let grad = alpha * q.powf(gamma) * (gamma * p * log_p - q);
        (loss, grad)
    } else {
        let log_q = -softplus(z);
        let loss = -(1.0 - alpha) * p.powf(gamma) * log_q;
        let grad = (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_q);
        (loss, grad)
    }
}

// ---------------------------------------------------------------------------
// dispatch

pub fn forward(op: &OpKind, ins: &[&Tensor], out_shape: &[usize]) -> Tensor {
    match op {
        OpKind::Input | OpKind::Param | OpKind::Constant => unreachable!("leaf"),
        OpKind::Conv2d { k, stride, pad } => conv_forward(ins[0], ins[1], ins[2], out_shape, *k, *stride, *pad, None),
        OpKind::MaskedSparseConv { k } => conv_forward(ins[0], ins[1], ins[2], out_shape, *k, 1, k / 2, Some(ins[3])),
        OpKind::DepthwiseConv2d { k } => depthwise_forward(ins[0], ins[1], ins[2], *k),
        OpKind::MatMul => {
            let (x, w) = (ins[0], ins[1]);
            let (kd, n) = (w.shape[0], w.shape[1]);
            let rows = x.len() / kd;
            let mut out = vec![0.0; rows * n];
            for r in 0..rows {
                let o = &mut out[r * n..][..n];
                if let Some(b) = ins.get(2) {
                    o.copy_from_slice(&b.data);
                }
                for (kk, &xv) in x.data[r * kd..][..kd].iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (ov, wv) in o.iter_mut().zip(&w.data[kk * n..][..n]) {
                        *ov += xv * wv;
                    }
                }
            }
            Tensor::new(out_shape.to_vec(), out)
        }
        OpKind::BatchMatMul { transpose_b } => {
            let (a, b) = (ins[0], ins[1]);
            let (bs, m, kd) = (a.shape[0], a.shape[1], a.shape[2]);
            let n = out_shape[2];
            let mut out = vec![0.0; bs * m * n];
            for bi in 0..bs {
                let ab = &a.data[bi * m * kd..][..m * kd];
                let bb = &b.data[bi * kd * n..][..kd * n];
                for i in 0..m {
                    for j in 0..n {
                        let mut s = 0.0;
                        for kk in 0..kd {
                            let bv = if *transpose_b { bb[j * kd + kk] } else { bb[kk * n + j] };
                            s += ab[i * kd + kk] * bv;
                        }
                        out[(bi * m + i) * n + j] = s;
                    }
                }
            }
            Tensor::new(out_shape.to_vec(), out)
        }
        OpKind::Softmax { axis } => {
            let x = ins[0];
            let (outer, len, inner) = split_axis(&x.shape, *axis);
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let m = (0..len).map(|j| x.data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for j in 0..len {
                        let e = (x.data[at(j)] - m).exp();
                        out[at(j)] = e;
                        s += e;
                    }
                    for j in 0..len {
                        out[at(j)] /= s;
                    }
                }
            }
            Tensor::new(x.shape.clone(), out)
        }
        OpKind::LayerNorm { eps } => {
            let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
            let c = x.last_dim();
            let mut out = vec![0.0; x.len()];
            for (row, o) in x.data.chunks(c).zip(out.chunks_mut(c)) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for i in 0..c {
                    o[i] = (row[i] - mean) * rstd * gamma.data[i] + beta.data[i];
                }
            }
            Tensor::new(x.shape.clone(), out)
        }
        OpKind::Gelu => ins[0].map(gelu),
        OpKind::Relu => ins[0].map(|v| if v > 0.0 { v } else { 0.0 }),
        OpKind::ScalarMul(s) => ins[0].map(|v| v * s),
        OpKind::Add | OpKind::Mul => {
            let (a, b) = (ins[0], ins[1]);
            let add = matches!(op, OpKind::Add);
            let data = if a.shape == b.shape {
                a.data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| if add { x + y } else { x * y })
                    .collect()
            } else {
                let ia = broadcast_index(&a.shape, out_shape);
                let ib = broadcast_index(&b.shape, out_shape);
                ia.iter()
                    .zip(&ib)
                    .map(|(&i, &j)| if add { a.data[i] + b.data[j] } else { a.data[i] * b.data[j] })
                    .collect()
            };
            Tensor::new(out_shape.to_vec(), data)
        }
        OpKind::Mean { axis } | OpKind::Sum { axis } => {
            let x = ins[0];
            let mean = matches!(op, OpKind::Mean { .. });
            match axis {
                None => {
                    let s = x.sum();
                    Tensor::scalar(if mean { s / x.len() as f64 } else { s })
                }
                Some(a) => {
                    let (outer, len, inner) = split_axis(&x.shape, *a);
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                out[o * inner + i] += x.data[(o * len + j) * inner + i];
                            }
                        }
                    }
                    if mean {
                        out.iter_mut().for_each(|v| *v /= len as f64);
                    }
                    Tensor::new(out_shape.to_vec(), out)
                }
            }
        }
        OpKind::Concat { axis } => {
            let (outer, _, inner) = split_axis(out_shape, *axis);
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for t in ins {
                    let chunk = t.shape[*axis] * inner;
                    out.extend_from_slice(&t.data[o * chunk..][..chunk]);
                }
            }
            Tensor::new(out_shape.to_vec(), out)
        }
        OpKind::Slice { axis, start, len } => {
            let x = ins[0];
            let (outer, full, inner) = split_axis(&x.shape, *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                out.extend_from_slice(&x.data[(o * full + start) * inner..][..len * inner]);
            }
            Tensor::new(out_shape.to_vec(), out)
        }
        OpKind::Reshape(shape) => Tensor::new(shape.clone(), ins[0].data.clone()),
        OpKind::Permute(perm) => {
            let x = ins[0];
            let idx = permute_index(&x.shape, perm);
            Tensor::new(out_shape.to_vec(), idx.iter().map(|&i| x.data[i]).collect())
        }
        OpKind::BilinearWarp(plan) => {
            let x = ins[0];
            let c = x.shape[2];
            let mut out = vec![0.0; plan.out_hw.0 * plan.out_hw.1 * c];
            for (cell, taps) in plan.taps.iter().enumerate() {
                let o = &mut out[cell * c..][..c];
                for &(src, wt) in taps {
                    for (ov, xv) in o.iter_mut().zip(&x.data[src * c..][..c]) {
                        *ov += wt * xv;
                    }
                }
            }
            Tensor::new(out_shape.to_vec(), out)
        }
        OpKind::ScatterRows(plan) => {
            let x = ins[0];
            let c = x.shape[1];
            let mut out = vec![0.0; plan.out_rows * c];
            for (s, d) in plan.dst.iter().enumerate() {
                if let Some(d) = d {
                    for (ov, xv) in out[d * c..][..c].iter_mut().zip(&x.data[s * c..][..c]) {
                        *ov += xv;
                    }
                }
            }
            Tensor::new(out_shape.to_vec(), out)
        }
        OpKind::FocalLoss { alpha, gamma } => {
            let (z, y) = (ins[0], ins[1]);
            let npos = y.data.iter().filter(|&&v| v > 0.5).count().max(1) as f64;
            let s: f64 = z.data.iter().zip(&y.data).map(|(&zv, &yv)| focal_terms(zv, yv, *alpha, *gamma).0).sum();
            Tensor::scalar(s / npos)
        }
        OpKind::SmoothL1 { beta } => {
            let (p, t, w) = (ins[0], ins[1], ins[2]);
            let d = p.shape[1];
            let norm = w.sum().max(1.0);
            let mut s = 0.0;
            for (r, &wr) in w.data.iter().enumerate() {
                if wr == 0.0 {
                    continue;
                }
                let row: f64 = (0..d).map(|j| smooth_l1(p.data[r * d + j] - t.data[r * d + j], *beta).0).sum();
                s += wr * row;
            }
            Tensor::scalar(s / norm)
        }
        OpKind::CrossEntropy => {
            let (z, cls, w) = (ins[0], ins[1], ins[2]);
            let k = z.shape[1];
            let norm = w.sum().max(1.0);
            let mut s = 0.0;
            for (r, &wr) in w.data.iter().enumerate() {
                if wr == 0.0 {
                    continue;
                }
                let row = &z.data[r * k..][..k];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                s += wr * (lse - row[cls.data[r] as usize]);
            }
            Tensor::scalar(s / norm)
        }
    }
}

/// Vector-Jacobian product. `need[i]` marks which inputs want a gradient.
pub fn backward(op: &OpKind, ins: &[&Tensor], out: &Tensor, gout: &Tensor, need: &[bool]) -> Vec<Option<Tensor>> {
    let none = |n: usize| vec![None; n];
    match op {
        OpKind::Input | OpKind::Param | OpKind::Constant => vec![],
        OpKind::Conv2d { k, stride, pad } => conv_backward(ins[0], ins[1], gout, *k, *stride, *pad, None, need),
        OpKind::MaskedSparseConv { k } => {
            let mut g = conv_backward(ins[0], ins[1], gout, *k, 1, k / 2, Some(ins[3]), need);
            g.push(None);
            g
        }
        OpKind::DepthwiseConv2d { k } => depthwise_backward(ins[0], ins[1], gout, *k, need),
        OpKind::MatMul => {
            let (x, w) = (ins[0], ins[1]);
            let (kd, n) = (w.shape[0], w.shape[1]);
            let rows = x.len() / kd;
            let mut dx = need[0].then(|| vec![0.0; x.len()]);
            let mut dw = need[1].then(|| vec![0.0; w.len()]);
            let mut db = need.get(2).copied().unwrap_or(false).then(|| vec![0.0; n]);
            for r in 0..rows {
                let g = &gout.data[r * n..][..n];
                if let Some(db) = db.as_mut() {
                    for (d, v) in db.iter_mut().zip(g) {
                        *d += v;
                    }
                }
                for kk in 0..kd {
                    let wrow = &w.data[kk * n..][..n];
                    if let Some(dx) = dx.as_mut() {
                        dx[r * kd + kk] = wrow.iter().zip(g).map(|(a, b)| a * b).sum();
                    }
                    if let Some(dw) = dw.as_mut() {
                        let xv = x.data[r * kd + kk];
                        if xv != 0.0 {
                            for (d, gv) in dw[kk * n..][..n].iter_mut().zip(g) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
            let mut res = vec![
                dx.map(|d| Tensor::new(x.shape.clone(), d)),
                dw.map(|d| Tensor::new(w.shape.clone(), d)),
            ];
            if ins.len() == 3 {
                res.push(db.map(|d| Tensor::new(vec![n], d)));
            }
            res
        }
        OpKind::BatchMatMul { transpose_b } => {
            let (a, b) = (ins[0], ins[1]);
            let (bs, m, kd) = (a.shape[0], a.shape[1], a.shape[2]);
            let n = out.shape[2];
            let mut da = vec![0.0; a.len()];
            let mut db = vec![0.0; b.len()];
            for bi in 0..bs {
                for i in 0..m {
                    for j in 0..n {
                        let g = gout.data[(bi * m + i) * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        for kk in 0..kd {
                            let bidx = if *transpose_b { bi * n * kd + j * kd + kk } else { bi * kd * n + kk * n + j };
                            let aidx = (bi * m + i) * kd + kk;
                            da[aidx] += g * b.data[bidx];
                            db[bidx] += g * a.data[aidx];
                        }
                    }
                }
            }
            vec![
                need[0].then(|| Tensor::new(a.shape.clone(), da)),
                need[1].then(|| Tensor::new(b.shape.clone(), db)),
            ]
        }
        OpKind::Softmax { axis } => {
            let (outer, len, inner) = split_axis(&out.shape, *axis);
            let mut dx = vec![0.0; out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| out.data[at(j)] * gout.data[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = out.data[at(j)] * (gout.data[at(j)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(out.shape.clone(), dx))]
        }
        OpKind::LayerNorm { eps } => {
            let (x, gamma) = (ins[0], ins[1]);
            let c = x.last_dim();
            let mut dx = vec![0.0; x.len()];
            let mut dg = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ((row, g), d) in x.data.chunks(c).zip(gout.data.chunks(c)).zip(dx.chunks_mut(c)) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                let dxhat: Vec<f64> = (0..c).map(|i| g[i] * gamma.data[i]).collect();
                let m1 = dxhat.iter().sum::<f64>() / c as f64;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for i in 0..c {
                    d[i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
                    dg[i] += g[i] * xhat[i];
                    dbeta[i] += g[i];
                }
            }
            vec![
                need[0].then(|| Tensor::new(x.shape.clone(), dx)),
                need[1].then(|| Tensor::new(vec![c], dg)),
                need[2].then(|| Tensor::new(vec![c], dbeta)),
            ]
        }
        OpKind::Gelu => {
            let x = ins[0];
            let d = x.data.iter().zip(&gout.data).map(|(&v, g)| g * gelu_grad(v)).collect();
            vec![Some(Tensor::new(x.shape.clone(), d))]
        }
        OpKind::Relu => {
            let x = ins[0];
            let d = x.data.iter().zip(&gout.data).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
            vec![Some(Tensor::new(x.shape.clone(), d))]
        }
        OpKind::ScalarMul(s) => vec![Some(gout.map(|g| g * s))],
        OpKind::Add => vec![
            need[0].then(|| reduce_to(gout, &ins[0].shape)),
            need[1].then(|| reduce_to(gout, &ins[1].shape)),
        ],
        OpKind::Mul => {
            let (a, b) = (ins[0], ins[1]);
            let ia = broadcast_index(&a.shape, &out.shape);
            let ib = broadcast_index(&b.shape, &out.shape);
            let mut da = vec![0.0; a.len()];
            let mut db = vec![0.0; b.len()];
            for (n, g) in gout.data.iter().enumerate() {
                da[ia[n]] += g * b.data[ib[n]];
                db[ib[n]] += g * a.data[ia[n]];
            }
            vec![
                need[0].then(|| Tensor::new(a.shape.clone(), da)),
                need[1].then(|| Tensor::new(b.shape.clone(), db)),
            ]
        }
        OpKind::Mean { axis } | OpKind::Sum { axis } => {
            let x = ins[0];
            let mean = matches!(op, OpKind::Mean { .. });
            match axis {
                None => {
                    let g = gout.item() / if mean { x.len() as f64 } else { 1.0 };
                    vec![Some(Tensor::full(&x.shape, g))]
                }
                Some(a) => {
                    let (outer, len, inner) = split_axis(&x.shape, *a);
                    let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                    let mut dx = vec![0.0; x.len()];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                dx[(o * len + j) * inner + i] = gout.data[o * inner + i] * scale;
                            }
                        }
                    }
                    vec![Some(Tensor::new(x.shape.clone(), dx))]
                }
            }
        }
        OpKind::Concat { axis } => {
            let (outer, total, inner) = split_axis(&out.shape, *axis);
            let mut res = Vec::with_capacity(ins.len());
            let mut start = 0;
            for (t, &nd) in ins.iter().zip(need) {
                let len = t.shape[*axis];
                if nd {
                    let mut d = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        d.extend_from_slice(&gout.data[(o * total + start) * inner..][..len * inner]);
                    }
                    res.push(Some(Tensor::new(t.shape.clone(), d)));
                } else {
                    res.push(None);
                }
                start += len;
            }
            res
        }
        OpKind::Slice { axis, start, len } => {
            let x = ins[0];
            let (outer, full, inner) = split_axis(&x.shape, *axis);
            let mut dx = vec![0.0; x.len()];
            for o in 0..outer {
                dx[(o * full + start) * inner..][..len * inner].copy_from_slice(&gout.data[o * len * inner..][..len * inner]);
            }
            vec![Some(Tensor::new(x.shape.clone(), dx))]
        }
        OpKind::Reshape(_) => vec![Some(Tensor::new(ins[0].shape.clone(), gout.data.clone()))],
        OpKind::Permute(perm) => {
            let x = ins[0];
            let idx = permute_index(&x.shape, perm);
            let mut dx = vec![0.0; x.len()];
            for (g, &i) in gout.data.iter().zip(&idx) {
                dx[i] = *g;
            }
            vec![Some(Tensor::new(x.shape.clone(), dx))]
        }
        OpKind::BilinearWarp(plan) => {
            let x = ins[0];
            let c = x.shape[2];
            let mut dx = vec![0.0; x.len()];
            for (cell, taps) in plan.taps.iter().enumerate() {
                let g = &gout.data[cell * c..][..c];
                for &(src, wt) in taps {
                    for (d, gv) in dx[src * c..][..c].iter_mut().zip(g) {
                        *d += wt * gv;
                    }
                }
            }
            vec![Some(Tensor::new(x.shape.clone(), dx))]
        }
        OpKind::ScatterRows(plan) => {
            let x = ins[0];
            let c = x.shape[1];
            let mut dx = vec![0.0; x.len()];
            for (s, d) in plan.dst.iter().enumerate() {
                if let Some(d) = d {
                    dx[s * c..][..c].copy_from_slice(&gout.data[d * c..][..c]);
                }
            }
            vec![Some(Tensor::new(x.shape.clone(), dx))]
        }
        OpKind::FocalLoss { alpha, gamma } => {
            let (z, y) = (ins[0], ins[1]);
            let npos = y.data.iter().filter(|&&v| v > 0.5).count().max(1) as f64;
            let g = gout.item() / npos;
            let d = z.data.iter().zip(&y.data).map(|(&zv, &yv)| g * focal_terms(zv, yv, *alpha, *gamma).1).collect();
            let mut res = none(2);
            res[0] = Some(Tensor::new(z.shape.clone(), d));
            res
        }
        OpKind::SmoothL1 { beta } => {
            let (p, t, w) = (ins[0], ins[1], ins[2]);
            let d = p.shape[1];
            let scale = gout.item() / w.sum().max(1.0);
            let mut dp = vec![0.0; p.len()];
            for (r, &wr) in w.data.iter().enumerate() {
                if wr == 0.0 {
                    continue;
                }
                for j in 0..d {
                    dp[r * d + j] = scale * wr * smooth_l1(p.data[r * d + j] - t.data[r * d + j], *beta).1;
                }
            }
            let mut res = none(3);
            res[0] = Some(Tensor::new(p.shape.clone(), dp));
            res
        }
        OpKind::CrossEntropy => {
            let (z, cls, w) = (ins[0], ins[1], ins[2]);
            let k = z.shape[1];
            let scale = gout.item() / w.sum().max(1.0);
            let mut dz = vec![0.0; z.len()];
            for (r, &wr) in w.data.iter().enumerate() {
                if wr == 0.0 {
                    continue;
                }
                let row = &z.data[r * k..][..k];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
                for j in 0..k {
                    let p = (row[j] - m).exp() / s;
                    let y = if j == cls.data[r] as usize { 1.0 } else { 0.0 };
                    dz[r * k + j] = scale * wr * (p - y);
                }
            }
            let mut res = none(3);
            res[0] = Some(Tensor::new(z.shape.clone(), dz));
            res
        }
    }
}
