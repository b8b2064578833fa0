//! Anchor-free per-cell detection head, training objective, decoding and AP.
//!
//! Each feature cell predicts an objectness logit, a 6-vector
//! `(dx, dy, ln w, ln l, sin 2yaw, cos 2yaw)` with offsets in cell units, and
//! two direction logits (front when `cos yaw >= 0`, back otherwise).

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::autograd::{Graph, NodeId, OpKind, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, OrientedBox};
use crate::rng::param_rng;
use crate::scene::{cell_center, cell_index};
use crate::tensor::Tensor;

pub const REG_DIMS: usize = 6;
pub const DIR_BINS: usize = 2;
/// Objectness prior probability at init.
const PRIOR: f64 = 0.01;
const LOG_SIZE_CLAMP: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionMap {
    /// `[H, W, 1]`.
    pub obj: Tensor,
    /// `[H, W, 6]`.
    pub reg: Tensor,
    /// `[H, W, 2]`.
    pub dir: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub dir: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            reg: 2.0,
            dir: 0.2,
            depth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cls, self.reg, self.dir, self.depth];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config(format!("loss weights must be nonnegative with one positive: {all:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            beta: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub regression: f64,
    pub direction: f64,
    pub depth: f64,
}

impl LossBreakdown {
    /// The weighted sum in the order the graph accumulates it.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.cls * self.classification + w.reg * self.regression + w.dir * self.direction + w.depth * self.depth
    }
}

/// Fresh `head/` parameters for a `channels`-wide fused map.
pub fn init_head(channels: usize, seed: u64) -> Result<ParamStore> {
    let mut p = ParamStore::new();
    let bound = (3.0 / channels as f64).sqrt() * 0.1;
    for (branch, co) in [("cls", 1 + DIR_BINS), ("reg", REG_DIMS)] {
        let name = format!("head/{branch}/w");
        let mut rng = param_rng(seed, &name);
        let n = channels * co;
        let w = Tensor::new(vec![1, 1, channels, co], (0..n).map(|_| rng.gen_range(-bound..=bound)).collect());
        p.insert(&name, w, true)?;
        let mut b = Tensor::zeros(&[co]);
        if branch == "cls" {
            b.data[0] = -((1.0 - PRIOR) / PRIOR).ln();
        }
        p.insert(&format!("head/{branch}/b"), b, true)?;
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub obj: NodeId,
    pub reg: NodeId,
    pub dir: NodeId,
}

pub fn head_graph(g: &mut Graph, store: &ParamStore, h: NodeId) -> Result<HeadNodes> {
    if g.shape(h).len() != 3 {
        return Err(Error::Shape {
            node: h,
            msg: format!("head input must be [H, W, C], got {:?}", g.shape(h)),
        });
    }
    let (cw, cb) = (g.param(store, "head/cls/w")?, g.param(store, "head/cls/b")?);
    let cls = g.conv2d(h, cw, cb, 1)?;
    let (rw, rb) = (g.param(store, "head/reg/w")?, g.param(store, "head/reg/b")?);
    let reg = g.conv2d(h, rw, rb, 1)?;
    let obj = g.slice(cls, 2, 0, 1)?;
    let dir = g.slice(cls, 2, 1, DIR_BINS)?;
    Ok(HeadNodes { obj, reg, dir })
}

pub fn head_forward(h: &Tensor, store: &ParamStore) -> Result<DetectionMap> {
    let mut g = Graph::new();
    let x = g.input("h", h.clone(), false);
    let n = head_graph(&mut g, store, x)?;
    Ok(head_values(&g, &n))
}

pub fn head_values(g: &Graph, n: &HeadNodes) -> DetectionMap {
    DetectionMap {
        obj: g.value(n.obj).clone(),
        reg: g.value(n.reg).clone(),
        dir: g.value(n.dir).clone(),
    }
}

/// Dense training targets on a `grid x grid` map.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets {
    /// `[H, W, 1]` 0/1 objectness.
    pub obj: Tensor,
    /// `[H*W, 6]`; zero off positives.
    pub reg: Tensor,
    /// `[H*W]` direction bin as f64.
    pub dir: Tensor,
    /// `[H*W]` 1 on positive cells.
    pub weight: Tensor,
    /// Box index owning each positive cell.
    pub owner: Vec<Option<usize>>,
}

pub fn direction_bin(yaw: f64) -> usize {
    if yaw.cos() >= 0.0 {
        0
    } else {
        1
    }
}

/// Regression target of `b` relative to the center of its cell. The
/// heading is regressed as the doubled angle, which is continuous modulo a
/// half turn; the direction bin carries the other half.
pub fn encode_box(b: &OrientedBox, row: usize, col: usize, range: f64, grid: usize) -> [f64; REG_DIMS] {
    let cs = 2.0 * range / grid as f64;
    let (x0, y0) = cell_center(row, col, range, grid);
    let (s, c) = (2.0 * b.yaw).sin_cos();
    [(b.cx - x0) / cs, (b.cy - y0) / cs, b.w.ln(), b.l.ln(), s, c]
}

/// One positive cell per box (the cell holding its center); when two
/// boxes share a cell the earlier box keeps it. Boxes outside the grid
/// are ignored.
pub fn build_targets(gt: &[OrientedBox], range: f64, grid: usize) -> DetectionTargets {
    let cells = grid * grid;
    let mut t = DetectionTargets {
        obj: Tensor::zeros(&[grid, grid, 1]),
        reg: Tensor::zeros(&[cells, REG_DIMS]),
        dir: Tensor::zeros(&[cells]),
        weight: Tensor::zeros(&[cells]),
        owner: vec![None; cells],
    };
    for (i, b) in gt.iter().enumerate() {
        let Some((r, c)) = cell_index((b.cx, b.cy), range, grid) else {
            continue;
        };
        let cell = r * grid + c;
        if t.owner[cell].is_some() {
            continue;
        }
        t.owner[cell] = Some(i);
        t.obj.data[cell] = 1.0;
        t.weight.data[cell] = 1.0;
        t.dir.data[cell] = direction_bin(b.yaw) as f64;
        t.reg.data[cell * REG_DIMS..][..REG_DIMS].copy_from_slice(&encode_box(b, r, c, range, grid));
    }
    t
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub cls: NodeId,
    pub reg: NodeId,
    pub dir: NodeId,
    pub depth: NodeId,
}

/// Records the weighted objective. `depth_terms` are per-agent depth
/// losses; their mean is the depth term (0 when there are none).
pub fn loss_graph(
    g: &mut Graph,
    head: &HeadNodes,
    targets: &DetectionTargets,
    w: &LossWeights,
    fp: &FocalParams,
    depth_terms: &[NodeId],
) -> Result<LossNodes> {
    let cells = targets.weight.len();
    let obj_t = g.constant(targets.obj.clone());
    let cls = g.apply(
        OpKind::FocalLoss {
            alpha: fp.alpha,
            gamma: fp.gamma,
        },
        &[head.obj, obj_t],
    )?;
    let reg_p = g.reshape(head.reg, &[cells, REG_DIMS])?;
    let reg_t = g.constant(targets.reg.clone());
    let wt = g.constant(targets.weight.clone());
    let reg = g.apply(OpKind::SmoothL1 { beta: fp.beta }, &[reg_p, reg_t, wt])?;
    let dir_p = g.reshape(head.dir, &[cells, DIR_BINS])?;
    let dir_t = g.constant(targets.dir.clone());
    let dir = g.apply(OpKind::CrossEntropy, &[dir_p, dir_t, wt])?;
    let depth = match depth_terms {
        [] => g.constant(Tensor::scalar(0.0)),
        [one] => *one,
        many => {
            let mut acc = many[0];
            for &d in &many[1..] {
                acc = g.add(acc, d)?;
            }
            g.scale(acc, 1.0 / many.len() as f64)?
        }
    };
    let a = g.scale(cls, w.cls)?;
    let b = g.scale(reg, w.reg)?;
    let c = g.scale(dir, w.dir)?;
    let d = g.scale(depth, w.depth)?;
    let ab = g.add(a, b)?;
    let abc = g.add(ab, c)?;
    let total = g.add(abc, d)?;
    Ok(LossNodes {
        total,
        cls,
        reg,
        dir,
        depth,
    })
}

pub fn breakdown(g: &Graph, n: &LossNodes) -> LossBreakdown {
    LossBreakdown {
        total: g.value(n.total).item(),
        classification: g.value(n.cls).item(),
        regression: g.value(n.reg).item(),
        direction: g.value(n.dir).item(),
        depth: g.value(n.depth).item(),
    }
}

/// Depth-stem prediction for the auxiliary term: logits `[A, D]`, true
/// bins `[A]` and validity weights `[A]`.
pub struct DepthTarget<'a> {
    pub logits: &'a Tensor,
    pub class: &'a Tensor,
    pub weight: &'a Tensor,
}

/// Value-level objective for a map whose frame spans `[-range, range]^2`.
pub fn total_loss(
    pred: &DetectionMap,
    gt: &[OrientedBox],
    w: &LossWeights,
    fp: &FocalParams,
    depth: Option<DepthTarget<'_>>,
    range: f64,
) -> Result<LossBreakdown> {
    w.validate()?;
    let grid = pred.obj.shape[0];
    let targets = build_targets(gt, range, grid);
    let mut g = Graph::new();
    let head = HeadNodes {
        obj: g.input("obj", pred.obj.clone(), false),
        reg: g.input("reg", pred.reg.clone(), false),
        dir: g.input("dir", pred.dir.clone(), false),
    };
    let mut terms = Vec::new();
    if let Some(d) = depth {
        let l = g.input("depth_logits", d.logits.clone(), false);
        let c = g.constant(d.class.clone());
        let wt = g.constant(d.weight.clone());
        terms.push(g.apply(OpKind::CrossEntropy, &[l, c, wt])?);
    }
    let n = loss_graph(&mut g, &head, &targets, w, fp, &terms)?;
    Ok(breakdown(&g, &n))
}

pub fn sigmoid(x: f64) -> f64 {
    crate::autograd::ops::sigmoid(x)
}

/// Box predicted at cell `(row, col)`.
pub fn decode_cell(reg: &[f64], dir: &[f64], row: usize, col: usize, range: f64, grid: usize) -> OrientedBox {
    let cs = 2.0 * range / grid as f64;
    let (x0, y0) = cell_center(row, col, range, grid);
    let mut yaw = 0.5 * reg[4].atan2(reg[5]);
    let want = if dir[0] >= dir[1] { 0 } else { 1 };
    if direction_bin(yaw) != want {
        yaw += std::f64::consts::PI;
    }
    OrientedBox::new(
        x0 + reg[0] * cs,
        y0 + reg[1] * cs,
        reg[2].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp(),
        reg[3].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp(),
        yaw,
    )
}

/// Thresholded, NMS-filtered boxes in the map's frame, by descending score.
pub fn decode_detections(pred: &DetectionMap, score_threshold: f64, nms_iou: f64, range: f64) -> Result<Vec<OrientedBox>> {
    if !(0.0..=1.0).contains(&score_threshold) || !(0.0..=1.0).contains(&nms_iou) {
        return Err(Error::Precondition(format!(
            "thresholds must lie in [0, 1]: score {score_threshold}, nms {nms_iou}"
        )));
    }
    let (h, w) = (pred.obj.shape[0], pred.obj.shape[1]);
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let s = sigmoid(pred.obj.data[r * w + c]);
            if s >= score_threshold && s > 0.0 {
                cands.push((s, r, c));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut kept: Vec<OrientedBox> = Vec::new();
    for (s, r, c) in cands {
        let cell = r * w + c;
        let b = decode_cell(
            &pred.reg.data[cell * REG_DIMS..][..REG_DIMS],
            &pred.dir.data[cell * DIR_BINS..][..DIR_BINS],
            r,
            c,
            range,
            h,
        )
        .with_score(s);
        if kept.iter().all(|k| rotated_iou(k, &b) <= nms_iou) {
            kept.push(b);
        }
    }
    Ok(kept)
}

/// AP for a single scene.
pub fn evaluate_ap(preds: &[OrientedBox], gts: &[OrientedBox], iou_threshold: f64) -> f64 {
    evaluate_ap_pooled(&[(preds.to_vec(), gts.to_vec())], iou_threshold)
}

/// All-point interpolated AP over detections pooled across scenes. Each
/// detection, in descending score, takes the highest-IoU unmatched ground
/// truth of its scene with IoU at or above the threshold.
pub fn evaluate_ap_pooled(scenes: &[(Vec<OrientedBox>, Vec<OrientedBox>)], iou_threshold: f64) -> f64 {
    let n_gt: usize = scenes.iter().map(|(_, g)| g.len()).sum();
    let n_pred: usize = scenes.iter().map(|(p, _)| p.len()).sum();
    if n_gt == 0 {
        return if n_pred == 0 { 1.0 } else { 0.0 };
    }
    let mut order: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, (p, _))| (0..p.len()).map(move |i| (s, i)))
        .collect();
    order.sort_by(|a, b| scenes[b.0].0[b.1].score.total_cmp(&scenes[a.0].0[a.1].score).then(a.cmp(b)));
    let mut matched: Vec<Vec<bool>> = scenes.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(order.len());
    for (s, i) in order {
        let p = &scenes[s].0[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in scenes[s].1.iter().enumerate() {
            if matched[s][j] {
                continue;
            }
            let iou = rotated_iou(p, gt);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            matched[s][j] = true;
        }
        tp.push(best.is_some());
    }
    ap_from_flags(&tp, n_gt)
}

/// All-point interpolated AP from ranked true-positive flags.
pub fn ap_from_flags(tp: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// One evaluation report row.
#[derive(Clone, Debug, PartialEq)]
pub struct ApRow {
    pub scene_id: String,
    pub n_agents: usize,
    pub iou_threshold: f64,
    pub ap: f64,
}

pub fn write_ap_report(path: &Path, rows: &[ApRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "scene_id,n_agents,iou_threshold,ap")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.scene_id, r.n_agents, r.iou_threshold, r.ap)?;
    }
    out.flush()?;
    Ok(())
}
