//! Per-modality BEV encoders.
//!
//! Every agent runs `stem -> block1 -> [ha] -> block2 -> [ha] -> shrink ->
//! [ha post] -> positions`. Stems differ by modality; everything after the
//! stem has the same shape for every modality, so a `[G/4, G/4, C + 3]`
//! feature comes out regardless of sensor.

use std::sync::Arc;

use rand::Rng;

use crate::adapters::{ha_adapter_graph, init_ha_adapter, select_modality_conv, AdapterSite, ConvKind};
use crate::autograd::{Graph, NodeId, OpKind, ParamStore, ScatterPlan};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::rng::param_rng;
use crate::scene::{AgentSpec, ModalityKind, Observation, Payload};
use crate::tensor::Tensor;

pub const POSITION_CHANNELS: usize = 3;
pub const HA_SITES: [&str; 3] = ["block1", "block2", "post"];

/// Encoder output: `[H', W', C + 3]` in the producing agent's frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BEVFeature {
    pub tensor: Tensor,
    pub pose: Pose,
    pub agent_index: usize,
}

fn he_uniform(name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    let mut rng = param_rng(seed, name);
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
}

fn insert_conv(p: &mut ParamStore, name: &str, k: usize, ci: usize, co: usize, seed: u64) -> Result<()> {
    let w = format!("{name}/w");
    p.insert(&w, he_uniform(&w, &[k, k, ci, co], k * k * ci, seed), true)?;
    p.insert(&format!("{name}/b"), Tensor::zeros(&[co]), true)
}

fn insert_linear(p: &mut ParamStore, name: &str, ci: usize, co: usize, seed: u64) -> Result<()> {
    let w = format!("{name}/w");
    p.insert(&w, he_uniform(&w, &[ci, co], ci, seed), true)?;
    p.insert(&format!("{name}/b"), Tensor::zeros(&[co]), true)
}

/// Stem input width before the RBF lift of the depth stem.
fn depth_input_width(cfg: &ModelConfig) -> usize {
    cfg.depth_bins + 1
}

/// Fresh stem parameters for `spec` under `enc/<id>/stem`.
pub fn init_stem(spec: AgentSpec, cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut p = ParamStore::new();
    let pre = format!("enc/{}/stem", spec.id);
    let c0 = cfg.stem_channels;
    match spec.modality {
        ModalityKind::Pillar | ModalityKind::Bev => insert_conv(&mut p, &pre, 3, 1, c0, seed)?,
        ModalityKind::Voxel => insert_conv(&mut p, &pre, 3, cfg.scene.z_slabs, c0, seed)?,
        ModalityKind::Depth => {
            insert_linear(&mut p, &format!("{pre}/fc1"), depth_input_width(cfg), cfg.depth_hidden, seed)?;
            insert_linear(&mut p, &format!("{pre}/fc2"), cfg.depth_hidden, cfg.depth_bins + c0, seed)?;
        }
    }
    Ok(p)
}

/// Fresh modality-agnostic trunk (blocks and shrink) under `enc/<id>`.
pub fn init_trunk(id: usize, cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut p = ParamStore::new();
    let (c0, c1, c2, c) = (cfg.stem_channels, cfg.block1_channels, cfg.block2_channels, cfg.channels);
    insert_conv(&mut p, &format!("enc/{id}/block1/down"), 3, c0, c1, seed)?;
    insert_conv(&mut p, &format!("enc/{id}/block1/conv"), 3, c1, c1, seed)?;
    insert_conv(&mut p, &format!("enc/{id}/block2/down"), 3, c1, c2, seed)?;
    insert_conv(&mut p, &format!("enc/{id}/block2/conv"), 3, c2, c2, seed)?;
    insert_conv(&mut p, &format!("enc/{id}/shrink"), 1, c2, c, seed)?;
    Ok(p)
}

pub fn init_encoder(spec: AgentSpec, cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = init_stem(spec, cfg, seed)?;
    p.extend(init_trunk(spec.id, cfg, seed)?)?;
    Ok(p)
}

/// Adapter kind used at each site, in `HA_SITES` order.
pub fn ha_site_kinds(modality: ModalityKind) -> [ConvKind; 3] {
    let inner = select_modality_conv(modality, AdapterSite::EncoderInternal);
    [inner, inner, select_modality_conv(modality, AdapterSite::PostEncoder)]
}

fn ha_site_widths(cfg: &ModelConfig) -> [usize; 3] {
    [cfg.block1_channels, cfg.block2_channels, cfg.channels]
}

/// Fresh HA adapters for all three sites of agent `spec` under `ha/<id>`.
pub fn init_ha_set(spec: AgentSpec, cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut p = ParamStore::new();
    for ((site, kind), width) in HA_SITES.iter().zip(ha_site_kinds(spec.modality)).zip(ha_site_widths(cfg)) {
        p.extend(init_ha_adapter(&format!("ha/{}/{site}", spec.id), kind, width, cfg.adapter_ratio, seed)?)?;
    }
    Ok(p)
}

/// Normalized cell-center coordinates: `(2c - (n - 1)) / (n - 1)`, or 0 for n = 1.
pub fn normalized_coord(c: usize, n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    (2.0 * c as f64 - (n - 1) as f64) / (n - 1) as f64
}

/// `[H, W, 3]` positional block: normalized x (columns), normalized y
/// (rows) and a constant 1, scaled by the per-cell `valid` flag.
pub fn position_grid(h: usize, w: usize, valid: Option<&[bool]>) -> Tensor {
    let mut t = Tensor::zeros(&[h, w, POSITION_CHANNELS]);
    for r in 0..h {
        for c in 0..w {
            if valid.is_some_and(|v| !v[r * w + c]) {
                continue;
            }
            let o = (r * w + c) * POSITION_CHANNELS;
            t.data[o] = normalized_coord(c, w);
            t.data[o + 1] = normalized_coord(r, h);
            t.data[o + 2] = 1.0;
        }
    }
    t
}

pub fn append_position_channels(feature: &Tensor) -> Result<Tensor> {
    if feature.rank() != 3 {
        return Err(Error::Precondition(format!("feature must be [H, W, C], got {:?}", feature.shape)));
    }
    let (h, w, c) = (feature.shape[0], feature.shape[1], feature.shape[2]);
    let pos = position_grid(h, w, None);
    let mut data = Vec::with_capacity(h * w * (c + POSITION_CHANNELS));
    for cell in 0..h * w {
        data.extend_from_slice(&feature.data[cell * c..][..c]);
        data.extend_from_slice(&pos.data[cell * POSITION_CHANNELS..][..POSITION_CHANNELS]);
    }
    Ok(Tensor::new(vec![h, w, c + POSITION_CHANNELS], data))
}

/// Occupancy after a same-padded 3x3 stride-2 conv: a cell is occupied when
/// any input cell of its receptive field is.
pub fn downsample_mask(mask: &Tensor) -> Tensor {
    let (h, w) = (mask.shape[0], mask.shape[1]);
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(&[ho, wo]);
    for r in 0..ho {
        for c in 0..wo {
            let hit = (0..3).any(|dr| {
                (0..3).any(|dc| {
                    let (y, x) = ((2 * r + dr) as isize - 1, (2 * c + dc) as isize - 1);
                    y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.data[y as usize * w + x as usize] != 0.0
                })
            });
            if hit {
                out.data[r * wo + c] = 1.0;
            }
        }
    }
    out
}

/// Range-bin center, meters.
pub fn depth_bin_center(d: usize, cfg: &ModelConfig) -> f64 {
    (d as f64 + 0.5) * cfg.scene.world_range / cfg.depth_bins as f64
}

/// Ground-truth range bin of a return.
pub fn depth_bin_of(range: f64, cfg: &ModelConfig) -> usize {
    let bw = cfg.scene.world_range / cfg.depth_bins as f64;
    ((range / bw).floor() as usize).min(cfg.depth_bins - 1)
}

/// Per-azimuth stem input: Gaussian range encoding over the bin centers
/// plus a validity flag. Rays without a return encode as all zeros.
pub fn depth_features(ranges: &[f64], cfg: &ModelConfig) -> Tensor {
    let d = cfg.depth_bins;
    let bw = cfg.scene.world_range / d as f64;
    let width = depth_input_width(cfg);
    let mut t = Tensor::zeros(&[ranges.len(), width]);
    for (a, &r) in ranges.iter().enumerate() {
        if !r.is_finite() {
            continue;
        }
        for b in 0..d {
            let z = (r - depth_bin_center(b, cfg)) / bw;
            t.data[a * width + b] = (-0.5 * z * z).exp();
        }
        t.data[a * width + d] = 1.0;
    }
    t
}

/// Routes each (azimuth, range-bin) sample to the grid cell containing its
/// bin center, in the sensing agent's frame.
pub fn lift_plan(cfg: &ModelConfig) -> ScatterPlan {
    let sc = &cfg.scene;
    let mut dst = Vec::with_capacity(sc.azimuth_bins * cfg.depth_bins);
    for a in 0..sc.azimuth_bins {
        let (s, c) = sc.ray_angle(a).sin_cos();
        for d in 0..cfg.depth_bins {
            let r = depth_bin_center(d, cfg);
            dst.push(sc.cell_of((r * c, r * s)).map(|(row, col)| row * sc.grid + col));
        }
    }
    ScatterPlan {
        dst,
        out_rows: sc.grid * sc.grid,
    }
}

/// Nodes of the depth stem needed for its auxiliary loss.
#[derive(Clone, Debug)]
pub struct DepthNodes {
    /// `[A, D]` range-bin logits.
    pub logits: NodeId,
    /// `[A, D]` softmax over range bins.
    pub prob: NodeId,
    /// True bin per azimuth (as f64) and 0/1 validity weight.
    pub class: Tensor,
    pub weight: Tensor,
}

#[derive(Clone, Debug)]
pub struct EncoderNodes {
    /// `[H', W', C + 3]`.
    pub feature: NodeId,
    pub depth: Option<DepthNodes>,
}

fn log1p(t: &Tensor) -> Tensor {
    t.map(|v| v.ln_1p())
}

/// Records the encoder for one observation. Adapter parameters are read
/// from `ha/<id>/...` when `adapters` is set.
pub fn encoder_graph(
    g: &mut Graph,
    store: &ParamStore,
    spec: AgentSpec,
    obs: &Observation,
    cfg: &ModelConfig,
    adapters: bool,
) -> Result<EncoderNodes> {
    if obs.modality != spec.modality {
        return Err(Error::ModalityMismatch {
            expected: spec.modality.to_string(),
            got: obs.modality.to_string(),
        });
    }
    let id = spec.id;
    let p = |g: &mut Graph, s: &str| g.param(store, &format!("enc/{id}/{s}"));
    let gs = cfg.scene.grid;
    let mut depth = None;
    let mut mask = None;
    let stem = match &obs.payload {
        Payload::Pillar(t) | Payload::Bev(t) => {
            let x = g.input("obs", log1p(t), false);
            let (w, b) = (p(g, "stem/w")?, p(g, "stem/b")?);
            let h = g.conv2d(x, w, b, 1)?;
            g.relu(h)?
        }
        Payload::Voxel { slabs, mask: m } => {
            let x = g.input("obs", log1p(slabs), false);
            let mn = g.constant(m.clone());
            mask = Some(m.clone());
            let (w, b) = (p(g, "stem/w")?, p(g, "stem/b")?);
            let h = g.sparse_conv(x, w, b, mn)?;
            g.relu(h)?
        }
        Payload::Depth(ranges) => {
            if ranges.len() != cfg.scene.azimuth_bins {
                return Err(Error::Precondition(format!(
                    "depth payload has {} azimuths, expected {}",
                    ranges.len(),
                    cfg.scene.azimuth_bins
                )));
            }
            let (a, d, c0) = (ranges.len(), cfg.depth_bins, cfg.stem_channels);
            let x = g.input("obs", depth_features(ranges, cfg), false);
            let (w1, b1) = (p(g, "stem/fc1/w")?, p(g, "stem/fc1/b")?);
            let h = g.matmul(x, w1, Some(b1))?;
            let h = g.relu(h)?;
            let (w2, b2) = (p(g, "stem/fc2/w")?, p(g, "stem/fc2/b")?);
            let out = g.matmul(h, w2, Some(b2))?;
            let logits = g.slice(out, 1, 0, d)?;
            let ctx = g.slice(out, 1, d, c0)?;
            let prob = g.softmax_last(logits)?;
            let pr = g.reshape(prob, &[a, d, 1])?;
            let cr = g.reshape(ctx, &[a, 1, c0])?;
            let lifted = g.mul(pr, cr)?;
            let rows = g.reshape(lifted, &[a * d, c0])?;
            let splat = g.scatter_rows(rows, Arc::new(lift_plan(cfg)))?;
            let class = Tensor::new(
                vec![a],
                ranges.iter().map(|&r| if r.is_finite() { depth_bin_of(r, cfg) as f64 } else { 0.0 }).collect(),
            );
            let weight = Tensor::new(vec![a], ranges.iter().map(|r| if r.is_finite() { 1.0 } else { 0.0 }).collect());
            depth = Some(DepthNodes {
                logits,
                prob,
                class,
                weight,
            });
            g.reshape(splat, &[gs, gs, c0])?
        }
    };

    let kinds = ha_site_kinds(spec.modality);
    let block = |g: &mut Graph, x: NodeId, name: &str| -> Result<NodeId> {
        let (w, b) = (p(g, &format!("{name}/down/w"))?, p(g, &format!("{name}/down/b"))?);
        let h = g.conv2d(x, w, b, 2)?;
        let h = g.relu(h)?;
        let (w, b) = (p(g, &format!("{name}/conv/w"))?, p(g, &format!("{name}/conv/b"))?);
        let h = g.conv2d(h, w, b, 1)?;
        g.relu(h)
    };
    let adapt = |g: &mut Graph, x: NodeId, site: usize, mask: Option<&Tensor>| -> Result<NodeId> {
        let m = match (kinds[site], mask) {
            (ConvKind::SparseConv, Some(m)) => Some(g.constant(m.clone())),
            _ => None,
        };
        ha_adapter_graph(g, store, &format!("ha/{id}/{}", HA_SITES[site]), kinds[site], x, m)
    };

    let mask1 = mask.as_ref().map(downsample_mask);
    let mask2 = mask1.as_ref().map(downsample_mask);
    let mut x = block(g, stem, "block1")?;
    if adapters {
        x = adapt(g, x, 0, mask1.as_ref())?;
    }
    x = block(g, x, "block2")?;
    if adapters {
        x = adapt(g, x, 1, mask2.as_ref())?;
    }
    let (w, b) = (p(g, "shrink/w")?, p(g, "shrink/b")?);
    x = g.conv2d(x, w, b, 1)?;
    if adapters {
        x = adapt(g, x, 2, None)?;
    }
    let s = g.shape(x).to_vec();
    let pos = g.constant(position_grid(s[0], s[1], None));
    let feature = g.concat(&[x, pos], 2)?;
    Ok(EncoderNodes { feature, depth })
}

/// Weighted cross-entropy of the depth stem against true range bins.
pub fn depth_loss_graph(g: &mut Graph, depth: &DepthNodes) -> Result<NodeId> {
    let class = g.constant(depth.class.clone());
    let weight = g.constant(depth.weight.clone());
    g.apply(OpKind::CrossEntropy, &[depth.logits, class, weight])
}

/// Value-level encoder pass for agent `agent_index` of a scene.
pub fn encode_agent(
    obs: &Observation,
    store: &ParamStore,
    spec: AgentSpec,
    cfg: &ModelConfig,
    adapters: bool,
    pose: Pose,
    agent_index: usize,
) -> Result<BEVFeature> {
    let mut g = Graph::new();
    let n = encoder_graph(&mut g, store, spec, obs, cfg, adapters)?;
    Ok(BEVFeature {
        tensor: g.value(n.feature).clone(),
        pose,
        agent_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinates_span_unit_interval() {
        assert_eq!(normalized_coord(0, 12), -1.0);
        assert_eq!(normalized_coord(11, 12), 1.0);
        assert_eq!(normalized_coord(2, 5), 0.0);
    }

    #[test]
    fn mask_downsampling_covers_receptive_field() {
        let mut m = Tensor::zeros(&[4, 4]);
        m.data[4 + 2] = 1.0; // (1, 2)
        let d = downsample_mask(&m);
        // (1, 2) lies in the fields of outputs (0, 1) and (1, 1)
        assert_eq!(d.data, vec![0.0, 1.0, 0.0, 1.0]);
    }
}
