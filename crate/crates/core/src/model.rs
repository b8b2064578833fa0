//! End-to-end forward pass: encoders, fusion, head and objective for one
//! ego view of one scene.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autograd::{Graph, NodeId, ParamStore};
use crate::config::ModelConfig;
use crate::detection::{
    breakdown, build_targets, decode_detections, head_graph, head_values, loss_graph, DetectionMap, FocalParams,
    HeadNodes, LossBreakdown, LossWeights,
};
use crate::encoder::{depth_loss_graph, encoder_graph, encode_agent};
use crate::error::{Error, Result};
use crate::fusion::{fuse_graph, warp_plan, FusionAgent, MC_PREFIX};
use crate::geometry::{OrientedBox, Pose};
use crate::scene::{cell_index, ground_truth_boxes, render_observation, AgentSpec, GtMode, Observation, Scene};
use crate::tensor::Tensor;

pub fn has_ha(params: &ParamStore, id: usize) -> bool {
    params.contains(&format!("ha/{id}/post/up/w"))
}

pub fn has_mc(params: &ParamStore) -> bool {
    params.contains(&format!("{MC_PREFIX}/up/w"))
}

/// One participating agent as the ego receives it.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentInput {
    pub spec: AgentSpec,
    pub obs: Observation,
    /// Pose the message claims; drives alignment.
    pub pose: Pose,
    /// False when the message was dropped.
    pub present: bool,
}

/// A training or evaluation example: agent 0 is the ego.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene_id: String,
    pub agents: Vec<AgentInput>,
    pub ego_pose: Pose,
    /// Ground truth in the ego frame, restricted to the ego grid.
    pub gt: Vec<OrientedBox>,
    /// Encoder outputs, reused while every encoder is frozen.
    pub cache: Option<Vec<Tensor>>,
}

/// Ground-truth boxes in `ego`'s frame whose centers fall on its grid.
pub fn boxes_in_frame(boxes: &[OrientedBox], ego: &Pose, cfg: &ModelConfig) -> Vec<OrientedBox> {
    boxes
        .iter()
        .map(|b| b.to_frame(ego))
        .filter(|b| cell_index((b.cx, b.cy), cfg.scene.world_range, cfg.feature_grid()).is_some())
        .collect()
}

/// Sample with scene agents `agents` (ego first) and the given truth.
pub fn make_sample(scene: &Scene, agents: &[usize], gt: &GtMode, cfg: &ModelConfig) -> Result<Sample> {
    let ego = *agents
        .first()
        .ok_or_else(|| Error::Precondition("sample needs an ego agent".into()))?;
    if let Some(&bad) = agents.iter().find(|&&a| a >= scene.agents.len()) {
        return Err(Error::Precondition(format!("scene has no agent {bad}")));
    }
    let ego_pose = scene.agents[ego].pose;
    let inputs = agents
        .iter()
        .map(|&a| AgentInput {
            spec: scene.agents[a].spec,
            obs: render_observation(scene, a, &cfg.scene),
            pose: scene.agents[a].pose,
            present: true,
        })
        .collect();
    Ok(Sample {
        scene_id: format!("{}", scene.seed),
        agents: inputs,
        ego_pose,
        gt: boxes_in_frame(&ground_truth_boxes(scene, gt, &cfg.scene), &ego_pose, cfg),
        cache: None,
    })
}

/// Encoder features of every agent, for caching.
pub fn encode_sample(params: &ParamStore, sample: &Sample, cfg: &ModelConfig) -> Result<Vec<Tensor>> {
    sample
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| Ok(encode_agent(&a.obs, params, a.spec, cfg, has_ha(params, a.spec.id), a.pose, i)?.tensor))
        .collect()
}

pub struct ForwardNodes {
    pub head: HeadNodes,
    pub depth_terms: Vec<NodeId>,
    pub weights: NodeId,
}

pub fn forward_graph(g: &mut Graph, params: &ParamStore, sample: &Sample, cfg: &ModelConfig) -> Result<ForwardNodes> {
    let gsz = cfg.feature_grid();
    let mut agents = Vec::with_capacity(sample.agents.len());
    let mut depth_terms = Vec::new();
    for (i, a) in sample.agents.iter().enumerate() {
        let feature = match &sample.cache {
            Some(c) => g.input("cached_feature", c[i].clone(), false),
            None => {
                let n = encoder_graph(g, params, a.spec, &a.obs, cfg, has_ha(params, a.spec.id))?;
                if let Some(d) = &n.depth {
                    depth_terms.push(depth_loss_graph(g, d)?);
                }
                n.feature
            }
        };
        let feature = if a.present {
            feature
        } else {
            let zeros = Tensor::zeros(g.shape(feature));
            g.constant(zeros)
        };
        agents.push(FusionAgent {
            feature,
            plan: Arc::new(warp_plan(&a.pose, &sample.ego_pose, cfg.scene.world_range, gsz)),
            present: a.present,
        });
    }
    let f = fuse_graph(g, params, &agents, has_mc(params), cfg.window)?;
    let head = head_graph(g, params, f.fused)?;
    Ok(ForwardNodes {
        head,
        depth_terms,
        weights: f.local.weights,
    })
}

/// Loss and gradients of every trainable parameter for one sample.
pub fn sample_grads(
    params: &ParamStore,
    sample: &Sample,
    cfg: &ModelConfig,
    w: &LossWeights,
    fp: &FocalParams,
) -> Result<(BTreeMap<String, Tensor>, LossBreakdown)> {
    let mut g = Graph::new();
    let f = forward_graph(&mut g, params, sample, cfg)?;
    let targets = build_targets(&sample.gt, cfg.scene.world_range, cfg.feature_grid());
    let l = loss_graph(&mut g, &f.head, &targets, w, fp, &f.depth_terms)?;
    let grads = g.backward(l.total)?;
    Ok((grads.param_grads(&g, params), breakdown(&g, &l)))
}

pub fn predict_map(params: &ParamStore, sample: &Sample, cfg: &ModelConfig) -> Result<(DetectionMap, Tensor)> {
    let mut g = Graph::new();
    let f = forward_graph(&mut g, params, sample, cfg)?;
    Ok((head_values(&g, &f.head), g.value(f.weights).clone()))
}

/// Decoding thresholds used for evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeParams {
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.1,
        }
    }
}

pub fn predict(params: &ParamStore, sample: &Sample, cfg: &ModelConfig, dp: &DecodeParams) -> Result<Vec<OrientedBox>> {
    let (map, _) = predict_map(params, sample, cfg)?;
    decode_detections(&map, dp.score_threshold, dp.nms_iou, cfg.scene.world_range)
}
