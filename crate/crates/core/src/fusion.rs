//! Ego-side collaborative fusion.
//!
//! `align -> shared projection -> per-cell attention across agents ->
//! [MC adapter] -> windowed self-attention`. The ego is always agent 0 of
//! the stack. Cells that a collaborator cannot see (outside its extent, or
//! a dropped message) are masked out of the agent softmax.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::adapters::mc_adapter_graph;
use crate::adapters::McNodes;
use crate::autograd::{Graph, NodeId, ParamStore, WarpPlan};
use crate::config::ModelConfig;
use crate::encoder::{position_grid, BEVFeature, POSITION_CHANNELS};
use crate::error::{Error, Result};
use crate::geometry::{Affine2, Pose};
use crate::rng::param_rng;
use crate::tensor::Tensor;

/// Additive score for masked agents; finite so softmax stays finite.
pub const MASKED_SCORE: f64 = -1e9;
pub const MC_PREFIX: &str = "mc/mid";
const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Bilinear resampling of a source agent's `[g, g]` grid onto the ego grid.
/// Both grids span `[-range, range]^2` in their own frames.
pub fn warp_plan(src: &Pose, ego: &Pose, range: f64, g: usize) -> WarpPlan {
    let map = Affine2::ego_to_src(src, ego);
    let cs = 2.0 * range / g as f64;
    let mut taps = Vec::with_capacity(g * g);
    let mut valid = Vec::with_capacity(g * g);
    for r in 0..g {
        for c in 0..g {
            let p = ((c as f64 + 0.5) * cs - range, (r as f64 + 0.5) * cs - range);
            let q = map.apply(p);
            if !(q.0.abs() <= range && q.1.abs() <= range) {
                taps.push(Vec::new());
                valid.push(false);
                continue;
            }
            let u = snap((q.0 + range) / cs - 0.5).clamp(0.0, (g - 1) as f64);
            let v = snap((q.1 + range) / cs - 0.5).clamp(0.0, (g - 1) as f64);
            let (u0, v0) = (u.floor(), v.floor());
            let (fu, fv) = (u - u0, v - v0);
            let (u0, v0) = (u0 as usize, v0 as usize);
            let mut t: Vec<(usize, f64)> = Vec::with_capacity(4);
            for (dv, wv) in [(0, 1.0 - fv), (1, fv)] {
                for (du, wu) in [(0, 1.0 - fu), (1, fu)] {
                    let wgt = wv * wu;
                    if wgt == 0.0 {
                        continue;
                    }
                    let idx = (v0 + dv).min(g - 1) * g + (u0 + du).min(g - 1);
                    match t.iter_mut().find(|(i, _)| *i == idx) {
                        Some(e) => e.1 += wgt,
                        None => t.push((idx, wgt)),
                    }
                }
            }
            taps.push(t);
            valid.push(true);
        }
    }
    WarpPlan {
        in_hw: (g, g),
        out_hw: (g, g),
        taps,
        valid,
    }
}

pub fn is_identity_plan(plan: &WarpPlan) -> bool {
    plan.in_hw == plan.out_hw
        && plan.valid.iter().all(|&v| v)
        && plan.taps.iter().enumerate().all(|(i, t)| t.len() == 1 && t[0] == (i, 1.0))
}

/// Warps the feature channels of `x` (`[g, g, C + 3]`) and rebuilds the
/// positional channels in the ego frame, zero where the plan is invalid.
pub fn align_graph(g: &mut Graph, x: NodeId, plan: &Arc<WarpPlan>) -> Result<NodeId> {
    if is_identity_plan(plan) {
        return Ok(x);
    }
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[2] <= POSITION_CHANNELS {
        return Err(Error::Shape {
            node: x,
            msg: format!("aligned feature must be [H, W, C + 3], got {s:?}"),
        });
    }
    let c = s[2] - POSITION_CHANNELS;
    let feat = g.slice(x, 2, 0, c)?;
    let warped = g.warp(feat, plan.clone())?;
    let (h, w) = plan.out_hw;
    let pos = g.constant(position_grid(h, w, Some(&plan.valid)));
    g.concat(&[warped, pos], 2)
}

/// Value-level alignment of `f` into the ego frame.
pub fn spatial_align(f: &BEVFeature, pose_ego: &Pose, range: f64) -> Result<BEVFeature> {
    let gsz = f.tensor.shape[0];
    let plan = Arc::new(warp_plan(&f.pose, pose_ego, range, gsz));
    let mut g = Graph::new();
    let x = g.input("feature", f.tensor.clone(), false);
    let y = align_graph(&mut g, x, &plan)?;
    Ok(BEVFeature {
        tensor: g.value(y).clone(),
        pose: *pose_ego,
        agent_index: f.agent_index,
    })
}

fn linear_init(name: &str, ci: usize, co: usize, seed: u64) -> Tensor {
    let mut rng = param_rng(seed, name);
    let bound = (3.0 / ci as f64).sqrt();
    Tensor::new(vec![ci, co], (0..ci * co).map(|_| rng.gen_range(-bound..=bound)).collect())
}

fn insert_linear(p: &mut ParamStore, w: &str, b: &str, ci: usize, co: usize, seed: u64) -> Result<()> {
    p.insert(w, linear_init(w, ci, co, seed), true)?;
    p.insert(b, Tensor::zeros(&[co]), true)
}

fn insert_attention(p: &mut ParamStore, stage: &str, c: usize, seed: u64) -> Result<()> {
    for m in ["q", "k", "v", "o"] {
        insert_linear(p, &format!("fus/{stage}/w{m}"), &format!("fus/{stage}/b{m}"), c, c, seed)?;
    }
    Ok(())
}

/// Fresh `fus/` parameters: shared projection plus local and global attention.
pub fn init_fusion(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let c = cfg.channels;
    let mut p = ParamStore::new();
    insert_linear(&mut p, "fus/proj/w", "fus/proj/b", c + POSITION_CHANNELS, c, seed)?;
    insert_attention(&mut p, "local", c, seed)?;
    insert_attention(&mut p, "global", c, seed)?;
    Ok(p)
}

fn proj(g: &mut Graph, store: &ParamStore, stage: &str, m: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(store, &format!("fus/{stage}/w{m}"))?;
    let b = g.param(store, &format!("fus/{stage}/b{m}"))?;
    g.matmul(x, w, Some(b))
}

/// Shared projection `C + 3 -> C` of every aligned feature, stacked as
/// `[N, H, W, C]` in input order.
pub fn stack_project_graph(g: &mut Graph, store: &ParamStore, aligned: &[NodeId]) -> Result<NodeId> {
    let first = *aligned
        .first()
        .ok_or_else(|| Error::Precondition("stack needs at least one feature".into()))?;
    let s0 = g.shape(first).to_vec();
    let w = g.param(store, "fus/proj/w")?;
    let b = g.param(store, "fus/proj/b")?;
    let mut rows = Vec::with_capacity(aligned.len());
    for &a in aligned {
        if g.shape(a) != s0.as_slice() {
            return Err(Error::Shape {
                node: a,
                msg: format!("stacked features differ: {:?} vs {:?}", g.shape(a), s0),
            });
        }
        let y = g.matmul(a, w, Some(b))?;
        let s = g.shape(y).to_vec();
        rows.push(g.reshape(y, &[1, s[0], s[1], s[2]])?);
    }
    if rows.len() == 1 {
        return Ok(rows[0]);
    }
    g.concat(&rows, 0)
}

/// `[H*W, 1, N]` additive mask from per-agent, per-cell validity.
pub fn agent_mask(valid: &[Vec<bool>]) -> Tensor {
    let n = valid.len();
    let cells = valid.first().map_or(0, Vec::len);
    let mut t = Tensor::zeros(&[cells, 1, n]);
    for (a, v) in valid.iter().enumerate() {
        for (cell, &ok) in v.iter().enumerate() {
            if !ok {
                t.data[cell * n + a] = MASKED_SCORE;
            }
        }
    }
    t
}

pub struct AttentionNodes {
    /// `[H, W, C]`.
    pub out: NodeId,
    /// `[H*W, 1, N]` softmax weights over agents.
    pub weights: NodeId,
}

/// Per-cell attention: the ego row queries every agent's row.
pub fn cross_agent_attention_graph(g: &mut Graph, store: &ParamStore, stack: NodeId, mask: Option<&Tensor>) -> Result<AttentionNodes> {
    let s = g.shape(stack).to_vec();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::Shape {
            node: stack,
            msg: format!("stack must be [N, H, W, C] with N >= 1, got {s:?}"),
        });
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let ego = g.slice(stack, 0, 0, 1)?;
    let ego = g.reshape(ego, &[h * w, 1, c])?;
    let q = proj(g, store, "local", "q", ego)?;
    let cells = g.permute(stack, &[1, 2, 0, 3])?;
    let cells = g.reshape(cells, &[h * w, n, c])?;
    let k = proj(g, store, "local", "k", cells)?;
    let v = proj(g, store, "local", "v", cells)?;
    let scores = g.bmm(q, k, true)?;
    let mut scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
    if let Some(m) = mask {
        let m = g.constant(m.clone());
        scores = g.add(scores, m)?;
    }
    let weights = g.softmax_last(scores)?;
    let mixed = g.bmm(weights, v, false)?;
    let mixed = g.reshape(mixed, &[h, w, c])?;
    let out = proj(g, store, "local", "o", mixed)?;
    Ok(AttentionNodes { out, weights })
}

/// Value-level cross-agent attention with every agent valid everywhere.
pub fn cross_agent_attention(stack: &Tensor, store: &ParamStore) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let s = g.input("stack", stack.clone(), false);
    let a = cross_agent_attention_graph(&mut g, store, s, None)?;
    Ok((g.value(a.out).clone(), g.value(a.weights).clone()))
}

/// `X + WinAttn(X)` over non-overlapping `window x window` tiles.
pub fn window_attention_graph(g: &mut Graph, store: &ParamStore, x: NodeId, window: usize) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Shape {
            node: x,
            msg: format!("window {window} must tile {h}x{w}"),
        });
    }
    let (nh, nw) = (h / window, w / window);
    let t = g.reshape(x, &[nh, window, nw, window, c])?;
    let t = g.permute(t, &[0, 2, 1, 3, 4])?;
    let tokens = g.reshape(t, &[nh * nw, window * window, c])?;
    let q = proj(g, store, "global", "q", tokens)?;
    let k = proj(g, store, "global", "k", tokens)?;
    let v = proj(g, store, "global", "v", tokens)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
    let att = g.softmax_last(scores)?;
    let mixed = g.bmm(att, v, false)?;
    let o = proj(g, store, "global", "o", mixed)?;
    let o = g.reshape(o, &[nh, nw, window, window, c])?;
    let o = g.permute(o, &[0, 2, 1, 3, 4])?;
    let o = g.reshape(o, &[h, w, c])?;
    g.add(x, o)
}

/// One agent's contribution to a fusion.
#[derive(Clone)]
pub struct FusionAgent {
    /// `[g, g, C + 3]` in the agent's own frame.
    pub feature: NodeId,
    pub plan: Arc<WarpPlan>,
    /// False for a dropped message: the agent is masked everywhere.
    pub present: bool,
}

pub struct FusionNodes {
    pub stack: NodeId,
    pub local: AttentionNodes,
    pub mc: Option<McNodes>,
    /// `[H', W', C]` fused ego map.
    pub fused: NodeId,
}

pub fn fuse_graph(g: &mut Graph, store: &ParamStore, agents: &[FusionAgent], use_mc: bool, window: usize) -> Result<FusionNodes> {
    if agents.is_empty() {
        return Err(Error::Precondition("fusion needs the ego agent".into()));
    }
    let mut aligned = Vec::with_capacity(agents.len());
    let mut valid = Vec::with_capacity(agents.len());
    for (i, a) in agents.iter().enumerate() {
        aligned.push(align_graph(g, a.feature, &a.plan)?);
        // the ego always attends to itself
        valid.push(a.plan.valid.iter().map(|&v| i == 0 || (v && a.present)).collect::<Vec<bool>>());
    }
    let stack = stack_project_graph(g, store, &aligned)?;
    let mask = (agents.len() > 1).then(|| agent_mask(&valid));
    let local = cross_agent_attention_graph(g, store, stack, mask.as_ref())?;
    let mut x = local.out;
    let mut mc = None;
    if use_mc {
        let m = mc_adapter_graph(g, store, MC_PREFIX, x)?;
        x = m.out;
        mc = Some(m);
    }
    let fused = window_attention_graph(g, store, x, window)?;
    Ok(FusionNodes { stack, local, mc, fused })
}

/// Fused ego map plus per-cell agent weights `[H*W, 1, N]`.
pub struct FuseOutput {
    pub h: Tensor,
    pub weights: Tensor,
}

/// Value-level fusion. `features[0]` is the ego; every feature carries the
/// pose it was produced at.
pub fn fuse(features: &[BEVFeature], store: &ParamStore, use_mc: bool, cfg: &ModelConfig) -> Result<FuseOutput> {
    let ego = features
        .first()
        .ok_or_else(|| Error::Precondition("fusion needs the ego agent".into()))?
        .pose;
    let gsz = cfg.feature_grid();
    let mut g = Graph::new();
    let mut agents = Vec::with_capacity(features.len());
    for f in features {
        agents.push(FusionAgent {
            feature: g.input("feature", f.tensor.clone(), false),
            plan: Arc::new(warp_plan(&f.pose, &ego, cfg.scene.world_range, gsz)),
            present: true,
        });
    }
    let n = fuse_graph(&mut g, store, &agents, use_mc, cfg.window)?;
    Ok(FuseOutput {
        h: g.value(n.fused).clone(),
        weights: g.value(n.local.weights).clone(),
    })
}

/// Writes `row,col,agent,weight` for every cell and agent.
pub fn write_attention_heatmap(path: &Path, weights: &Tensor, grid: usize) -> Result<()> {
    let n = weights.last_dim();
    if weights.len() != grid * grid * n {
        return Err(Error::Precondition(format!(
            "weights {:?} do not cover a {grid}x{grid} grid",
            weights.shape
        )));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "row,col,agent,weight")?;
    for cell in 0..grid * grid {
        for a in 0..n {
            writeln!(out, "{},{},{},{}", cell / grid, cell % grid, a, weights.data[cell * n + a])?;
        }
    }
    out.flush()?;
    Ok(())
}
