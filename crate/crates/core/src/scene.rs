//! Deterministic synthetic multi-agent BEV worlds.
//!
//! A scene is a square world with static oriented boxes and a handful of
//! sensing agents. Each agent casts a fan of rays; the first box a ray
//! meets produces a return and hides everything behind it. Those returns
//! are formatted per sensing modality and also define which boxes each
//! agent can see.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{intersection_area, OrientedBox, Pose};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Pillar,
    Voxel,
    Depth,
    Bev,
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            ModalityKind::Pillar => "pillar",
            ModalityKind::Voxel => "voxel",
            ModalityKind::Depth => "depth",
            ModalityKind::Bev => "bev",
        })
    }
}

impl FromStr for ModalityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pillar" => Ok(ModalityKind::Pillar),
            "voxel" => Ok(ModalityKind::Voxel),
            "depth" => Ok(ModalityKind::Depth),
            "bev" => Ok(ModalityKind::Bev),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Which encoder an agent runs and what it senses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    /// Encoder identity; parameters live under `enc/<id>/`.
    pub id: usize,
    pub modality: ModalityKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneAgent {
    pub spec: AgentSpec,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    #[serde(rename = "world_range_m")]
    pub world_range: f64,
    pub agents: Vec<SceneAgent>,
    pub objects: Vec<OrientedBox>,
}

/// World and sensor geometry shared by generation and rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Square half-extent of the world and sensor range, meters.
    pub world_range: f64,
    /// BEV grid cells per side.
    pub grid: usize,
    /// Height slabs of the voxel payload.
    pub z_slabs: usize,
    pub azimuth_bins: usize,
    pub object_width: (f64, f64),
    pub object_length: (f64, f64),
    /// Agents are placed within this half-extent around the origin.
    pub agent_spread: f64,
    /// Agent headings are drawn from `[-h, h]`; pi means any heading.
    pub agent_heading_spread: f64,
    pub min_agent_gap: f64,
    /// Clearance between boxes and between boxes and agents.
    pub object_gap: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            world_range: 51.2,
            grid: 96,
            z_slabs: 4,
            azimuth_bins: 360,
            object_width: (4.0, 6.0),
            object_length: (8.0, 12.0),
            agent_spread: 20.0,
            agent_heading_spread: PI / 12.0,
            min_agent_gap: 10.0,
            object_gap: 0.5,
        }
    }
}

impl SceneConfig {
    pub fn cell_size(&self) -> f64 {
        2.0 * self.world_range / self.grid as f64
    }

    /// Grid cell `(row, col)` holding a frame-local point; rows follow y,
    /// columns follow x.
    pub fn cell_of(&self, p: (f64, f64)) -> Option<(usize, usize)> {
        cell_index(p, self.world_range, self.grid)
    }

    pub fn ray_angle(&self, a: usize) -> f64 {
        -PI + (a as f64 + 0.5) * 2.0 * PI / self.azimuth_bins as f64
    }
}

/// Cell of a frame-local point on a `grid x grid` lattice spanning
/// `[-range, range]^2`. Points on a boundary go to the lower index.
pub fn cell_index(p: (f64, f64), range: f64, grid: usize) -> Option<(usize, usize)> {
    let cs = 2.0 * range / grid as f64;
    let idx = |v: f64| -> Option<usize> {
        let u = (v + range) / cs;
        if !(0.0..=grid as f64).contains(&u) {
            return None;
        }
        let i = (u.ceil() as isize - 1).max(0) as usize;
        (i < grid).then_some(i)
    };
    Some((idx(p.1)?, idx(p.0)?))
}

/// Center of cell `(row, col)` in frame-local meters.
pub fn cell_center(row: usize, col: usize, range: f64, grid: usize) -> (f64, f64) {
    let cs = 2.0 * range / grid as f64;
    ((col as f64 + 0.5) * cs - range, (row as f64 + 0.5) * cs - range)
}

/// Builds a reproducible scene: one agent per roster entry, `n_objects`
/// non-overlapping boxes.
pub fn generate_scene(seed: u64, roster: &[AgentSpec], n_objects: usize, cfg: &SceneConfig) -> Result<Scene> {
    const ATTEMPTS: usize = 1000;
    if roster.is_empty() || roster.len() > 8 {
        return Err(Error::Precondition(format!("scene needs 1..=8 agents, got {}", roster.len())));
    }
    if n_objects > 64 {
        return Err(Error::Precondition(format!("scene allows at most 64 objects, got {n_objects}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cfg.world_range;

    let mut agents: Vec<SceneAgent> = Vec::with_capacity(roster.len());
    for spec in roster {
        let mut placed = None;
        for _ in 0..ATTEMPTS {
            let s = cfg.agent_spread.min(r);
            let h = cfg.agent_heading_spread.clamp(0.0, PI);
            let pose = Pose::new(rng.gen_range(-s..=s), rng.gen_range(-s..=s), rng.gen_range(-1.0..1.0) * h);
            if agents.iter().all(|a| a.pose.distance(&pose) >= cfg.min_agent_gap) {
                placed = Some(pose);
                break;
            }
        }
        let pose = placed.ok_or_else(|| {
            Error::Infeasible(format!("agent poses must be pairwise >= {} m apart", cfg.min_agent_gap))
        })?;
        agents.push(SceneAgent { spec: *spec, pose });
    }

    let mut objects: Vec<OrientedBox> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let mut placed = None;
        for _ in 0..ATTEMPTS {
            let w = rng.gen_range(cfg.object_width.0..=cfg.object_width.1);
            let l = rng.gen_range(cfg.object_length.0..=cfg.object_length.1);
            let margin = l.hypot(w) / 2.0;
            let lim = r - margin;
            let b = OrientedBox::new(rng.gen_range(-lim..=lim), rng.gen_range(-lim..=lim), w, l, rng.gen_range(-PI..PI));
            let padded = OrientedBox {
                w: b.w + 2.0 * cfg.object_gap,
                l: b.l + 2.0 * cfg.object_gap,
                ..b
            };
            let clear_of_agents = agents.iter().all(|a| {
                let p = a.pose;
                (p.x - b.cx).hypot(p.y - b.cy) > margin + 1.0 + cfg.object_gap
            });
            if clear_of_agents && objects.iter().all(|o| intersection_area(&padded, o) == 0.0) {
                placed = Some(b);
                break;
            }
        }
        objects.push(placed.ok_or_else(|| Error::Infeasible("objects must not overlap".into()))?);
    }
    Ok(Scene {
        seed,
        world_range: r,
        agents,
        objects,
    })
}

/// One ray's first return.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub object: usize,
    pub range: f64,
    /// Return point in the agent frame.
    pub point: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// `[H, W, 1]` return counts.
    Pillar(Tensor),
    /// `[H, W, Z]` slab counts plus the `[H, W]` occupancy mask.
    Voxel { slabs: Tensor, mask: Tensor },
    /// Range per azimuth bin, meters; `inf` where nothing returns.
    Depth(Vec<f64>),
    /// Pre-rendered BEV occupancy `[H, W, 1]`.
    Bev(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub modality: ModalityKind,
    pub payload: Payload,
    /// First return per ray, in azimuth order.
    pub hits: Vec<Option<RayHit>>,
}

/// Ray-casts from one pose against the scene's boxes.
pub fn cast_rays(scene: &Scene, pose: &Pose, cfg: &SceneConfig) -> Vec<Option<RayHit>> {
    (0..cfg.azimuth_bins)
        .map(|a| {
            let theta = cfg.ray_angle(a);
            let (s, c) = (pose.yaw + theta).sin_cos();
            let mut best: Option<(usize, f64)> = None;
            for (i, obj) in scene.objects.iter().enumerate() {
                if let Some(t) = obj.ray_hit((pose.x, pose.y), (c, s)) {
                    if t <= scene.world_range && best.is_none_or(|(_, bt)| t < bt) {
                        best = Some((i, t));
                    }
                }
            }
            best.map(|(object, range)| {
                let (ls, lc) = theta.sin_cos();
                RayHit {
                    object,
                    range,
                    point: (range * lc, range * ls),
                }
            })
        })
        .collect()
}

/// Slabs a return fills. Boxes are taken to span the lower three slabs.
fn slabs_for_hit(z_slabs: usize) -> std::ops::Range<usize> {
    0..z_slabs.min(3)
}

/// Renders agent `agent_index` with its own modality.
pub fn render_observation(scene: &Scene, agent_index: usize, cfg: &SceneConfig) -> Observation {
    let modality = scene.agents[agent_index].spec.modality;
    render_as(scene, agent_index, modality, cfg)
}

/// Renders from an agent's pose with an explicit modality.
pub fn render_as(scene: &Scene, agent_index: usize, modality: ModalityKind, cfg: &SceneConfig) -> Observation {
    let pose = scene.agents[agent_index].pose;
    let hits = cast_rays(scene, &pose, cfg);
    let g = cfg.grid;
    let payload = match modality {
        ModalityKind::Pillar | ModalityKind::Bev => {
            let mut counts = Tensor::zeros(&[g, g, 1]);
            for h in hits.iter().flatten() {
                if let Some((r, c)) = cfg.cell_of(h.point) {
                    counts.data[r * g + c] += 1.0;
                }
            }
            if modality == ModalityKind::Pillar {
                Payload::Pillar(counts)
            } else {
                Payload::Bev(counts.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
            }
        }
        ModalityKind::Voxel => {
            let z = cfg.z_slabs;
            let mut slabs = Tensor::zeros(&[g, g, z]);
            let mut mask = Tensor::zeros(&[g, g]);
            for h in hits.iter().flatten() {
                if let Some((r, c)) = cfg.cell_of(h.point) {
                    for s in slabs_for_hit(z) {
                        slabs.data[(r * g + c) * z + s] += 1.0;
                    }
                }
            }
            for cell in 0..g * g {
                if slabs.data[cell * z..][..z].iter().any(|&v| v > 0.0) {
                    mask.data[cell] = 1.0;
                }
            }
            Payload::Voxel { slabs, mask }
        }
        ModalityKind::Depth => Payload::Depth(hits.iter().map(|h| h.map_or(f64::INFINITY, |h| h.range)).collect()),
    };
    Observation {
        modality,
        payload,
        hits,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GtMode {
    Single(usize),
    Collaborative,
}

/// Indices of objects with at least one unoccluded return from any of `agents`.
pub fn visible_objects(scene: &Scene, agents: &[usize], cfg: &SceneConfig) -> Vec<usize> {
    let mut seen = vec![false; scene.objects.len()];
    for &a in agents {
        for h in cast_rays(scene, &scene.agents[a].pose, cfg).into_iter().flatten() {
            seen[h.object] = true;
        }
    }
    seen.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i).collect()
}

/// Ground-truth boxes in the world frame, in object order.
pub fn ground_truth_boxes(scene: &Scene, mode: &GtMode, cfg: &SceneConfig) -> Vec<OrientedBox> {
    let agents: Vec<usize> = match mode {
        GtMode::Single(a) => vec![*a],
        GtMode::Collaborative => (0..scene.agents.len()).collect(),
    };
    visible_objects(scene, &agents, cfg).into_iter().map(|i| scene.objects[i]).collect()
}

impl Scene {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
