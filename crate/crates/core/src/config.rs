use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detection::{FocalParams, LossWeights};
use crate::error::{Error, Result};
use crate::model::DecodeParams;
use crate::scene::{AgentSpec, ModalityKind, SceneConfig};

/// Network widths and geometry shared by every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scene: SceneConfig,
    /// Stem output width.
    pub stem_channels: usize,
    pub block1_channels: usize,
    pub block2_channels: usize,
    /// Unified feature width after shrink.
    pub channels: usize,
    /// Range bins of the depth lift.
    pub depth_bins: usize,
    pub depth_hidden: usize,
    /// Bottleneck ratio for both adapter families.
    pub adapter_ratio: usize,
    /// Side of the square windows in global attention.
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            stem_channels: 16,
            block1_channels: 32,
            block2_channels: 64,
            channels: 32,
            depth_bins: 16,
            depth_hidden: 32,
            adapter_ratio: 4,
            window: 4,
        }
    }
}

impl ModelConfig {
    /// Side of the encoder output grid (two stride-2 blocks).
    pub fn feature_grid(&self) -> usize {
        self.scene.grid.div_ceil(2).div_ceil(2)
    }

    pub fn feature_cell(&self) -> f64 {
        2.0 * self.scene.world_range / self.feature_grid() as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scene.grid % 4 != 0 || self.scene.grid == 0 {
            return bad(format!("grid must be a positive multiple of 4, got {}", self.scene.grid));
        }
        if self.window == 0 || self.feature_grid() % self.window != 0 {
            return bad(format!("window {} must divide the feature grid {}", self.window, self.feature_grid()));
        }
        if self.adapter_ratio < 2 {
            return bad("adapter_ratio must be >= 2".into());
        }
        for (name, c) in [
            ("block1_channels", self.block1_channels),
            ("block2_channels", self.block2_channels),
            ("channels", self.channels),
        ] {
            if c % self.adapter_ratio != 0 || c == 0 {
                return bad(format!("{name}={c} must be a positive multiple of adapter_ratio"));
            }
        }
        if self.stem_channels == 0 || self.depth_bins == 0 || self.depth_hidden == 0 {
            return bad("channel widths must be positive".into());
        }
        if !(self.scene.world_range > 0.0) {
            return bad("world_range must be positive".into());
        }
        if self.scene.z_slabs == 0 || self.scene.azimuth_bins == 0 {
            return bad("z_slabs and azimuth_bins must be positive".into());
        }
        Ok(())
    }
}

/// Optimizer used by every training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Everything a run needs, read from a flat `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Agent modalities, ego first. Agents sharing a modality share an encoder.
    pub roster: Vec<AgentSpec>,
    /// Homogeneous ego-modality agents per base-training scene.
    pub base_agents: usize,
    pub objects_per_scene: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// First scene seed of the training set; scene `i` uses `train_seed + i`.
    pub train_seed: u64,
    pub eval_seed: u64,
    /// Parameter initialization and channel noise.
    pub seed: u64,
    pub base_steps: usize,
    pub lhft_steps: usize,
    pub gcft_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossWeights,
    pub focal: FocalParams,
    pub decode: DecodeParams,
    pub sweep_variances: Vec<f64>,
    pub sweep_latencies: Vec<usize>,
    pub drop_probability: f64,
    /// Agent speed along its heading, meters per frame.
    pub agent_speed: f64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            roster: roster_from_modalities(&[
                ModalityKind::Pillar,
                ModalityKind::Depth,
                ModalityKind::Voxel,
                ModalityKind::Depth,
            ]),
            base_agents: 2,
            objects_per_scene: 16,
            train_scenes: 200,
            eval_scenes: 50,
            train_seed: 0,
            eval_seed: 1_000_000,
            seed: 7,
            base_steps: 800,
            lhft_steps: 400,
            gcft_steps: 150,
            batch: 4,
            lr: 2e-3,
            optimizer: OptimizerKind::Adam,
            loss: LossWeights::default(),
            focal: FocalParams::default(),
            decode: DecodeParams::default(),
            sweep_variances: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            sweep_latencies: vec![0, 1, 2],
            drop_probability: 0.0,
            agent_speed: 1.0,
            threads: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Encoder ids by first appearance of each modality.
pub fn roster_from_modalities(mods: &[ModalityKind]) -> Vec<AgentSpec> {
    let mut seen: Vec<ModalityKind> = Vec::new();
    mods.iter()
        .map(|&m| {
            let id = seen.iter().position(|&s| s == m).unwrap_or_else(|| {
                seen.push(m);
                seen.len() - 1
            });
            AgentSpec { id, modality: m }
        })
        .collect()
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for key `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Config(format!("key `{key}` needs two comma-separated numbers, got `{v}`"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn ego(&self) -> AgentSpec {
        self.roster[0]
    }

    /// Sets one key. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key.trim() {
            "world_range" => m.scene.world_range = parse(key, v)?,
            "grid" => m.scene.grid = parse(key, v)?,
            "z_slabs" => m.scene.z_slabs = parse(key, v)?,
            "azimuth_bins" => m.scene.azimuth_bins = parse(key, v)?,
            "object_width" => m.scene.object_width = parse_pair(key, v)?,
            "object_length" => m.scene.object_length = parse_pair(key, v)?,
            "agent_spread" => m.scene.agent_spread = parse(key, v)?,
            "agent_heading_spread" => m.scene.agent_heading_spread = parse(key, v)?,
            "min_agent_gap" => m.scene.min_agent_gap = parse(key, v)?,
            "stem_channels" => m.stem_channels = parse(key, v)?,
            "block1_channels" => m.block1_channels = parse(key, v)?,
            "block2_channels" => m.block2_channels = parse(key, v)?,
            "channels" => m.channels = parse(key, v)?,
            "depth_bins" => m.depth_bins = parse(key, v)?,
            "depth_hidden" => m.depth_hidden = parse(key, v)?,
            "adapter_ratio" => m.adapter_ratio = parse(key, v)?,
            "window" => m.window = parse(key, v)?,
            "roster" => self.roster = roster_from_modalities(&parse_list::<ModalityKind>(key, v)?),
            "base_agents" => self.base_agents = parse(key, v)?,
            "objects_per_scene" => self.objects_per_scene = parse(key, v)?,
            "train_scenes" => self.train_scenes = parse(key, v)?,
            "eval_scenes" => self.eval_scenes = parse(key, v)?,
            "train_seed" => self.train_seed = parse(key, v)?,
            "eval_seed" => self.eval_seed = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "base_steps" => self.base_steps = parse(key, v)?,
            "lhft_steps" => self.lhft_steps = parse(key, v)?,
            "gcft_steps" => self.gcft_steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "optimizer" => self.optimizer = parse(key, v)?,
            "lambda_cls" => self.loss.cls = parse(key, v)?,
            "lambda_reg" => self.loss.reg = parse(key, v)?,
            "lambda_dir" => self.loss.dir = parse(key, v)?,
            "lambda_depth" => self.loss.depth = parse(key, v)?,
            "focal_alpha" => self.focal.alpha = parse(key, v)?,
            "focal_gamma" => self.focal.gamma = parse(key, v)?,
            "smooth_l1_beta" => self.focal.beta = parse(key, v)?,
            "score_threshold" => self.decode.score_threshold = parse(key, v)?,
            "nms_iou" => self.decode.nms_iou = parse(key, v)?,
            "sweep_variances" => self.sweep_variances = parse_list(key, v)?,
            "sweep_latencies" => self.sweep_latencies = parse_list(key, v)?,
            "drop_probability" => self.drop_probability = parse(key, v)?,
            "agent_speed" => self.agent_speed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let s = &m.scene;
        vec![
            ("world_range", s.world_range.to_string()),
            ("grid", s.grid.to_string()),
            ("z_slabs", s.z_slabs.to_string()),
            ("azimuth_bins", s.azimuth_bins.to_string()),
            ("object_width", join(&[s.object_width.0, s.object_width.1])),
            ("object_length", join(&[s.object_length.0, s.object_length.1])),
            ("agent_spread", s.agent_spread.to_string()),
            ("agent_heading_spread", s.agent_heading_spread.to_string()),
            ("min_agent_gap", s.min_agent_gap.to_string()),
            ("stem_channels", m.stem_channels.to_string()),
            ("block1_channels", m.block1_channels.to_string()),
            ("block2_channels", m.block2_channels.to_string()),
            ("channels", m.channels.to_string()),
            ("depth_bins", m.depth_bins.to_string()),
            ("depth_hidden", m.depth_hidden.to_string()),
            ("adapter_ratio", m.adapter_ratio.to_string()),
            ("window", m.window.to_string()),
            ("roster", join(&self.roster.iter().map(|a| a.modality).collect::<Vec<_>>())),
            ("base_agents", self.base_agents.to_string()),
            ("objects_per_scene", self.objects_per_scene.to_string()),
            ("train_scenes", self.train_scenes.to_string()),
            ("eval_scenes", self.eval_scenes.to_string()),
            ("train_seed", self.train_seed.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("seed", self.seed.to_string()),
            ("base_steps", self.base_steps.to_string()),
            ("lhft_steps", self.lhft_steps.to_string()),
            ("gcft_steps", self.gcft_steps.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", self.lr.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("lambda_cls", self.loss.cls.to_string()),
            ("lambda_reg", self.loss.reg.to_string()),
            ("lambda_dir", self.loss.dir.to_string()),
            ("lambda_depth", self.loss.depth.to_string()),
            ("focal_alpha", self.focal.alpha.to_string()),
            ("focal_gamma", self.focal.gamma.to_string()),
            ("smooth_l1_beta", self.focal.beta.to_string()),
            ("score_threshold", self.decode.score_threshold.to_string()),
            ("nms_iou", self.decode.nms_iou.to_string()),
            ("sweep_variances", join(&self.sweep_variances)),
            ("sweep_latencies", join(&self.sweep_latencies)),
            ("drop_probability", self.drop_probability.to_string()),
            ("agent_speed", self.agent_speed.to_string()),
            ("threads", self.threads.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ]
    }

    pub fn to_kv_string(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// a key may appear once.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("key `{k}` given twice")));
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.loss.validate()?;
        if self.roster.is_empty() || self.roster.len() > 8 {
            return bad(format!("roster needs 1..=8 agents, got {}", self.roster.len()));
        }
        if self.base_agents == 0 || self.base_agents > 8 {
            return bad(format!("base_agents must be in 1..=8, got {}", self.base_agents));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        if !(self.focal.alpha > 0.0 && self.focal.alpha < 1.0) || self.focal.gamma < 0.0 || !(self.focal.beta > 0.0) {
            return bad("focal_alpha in (0,1), focal_gamma >= 0 and smooth_l1_beta > 0 required".into());
        }
        for (k, v) in [
            ("score_threshold", self.decode.score_threshold),
            ("nms_iou", self.decode.nms_iou),
            ("drop_probability", self.drop_probability),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1], got {v}"));
            }
        }
        if let Some(v) = self.sweep_variances.iter().find(|v| !(0.0..=0.8).contains(*v)) {
            return bad(format!("sweep variance {v} outside [0, 0.8]"));
        }
        if !(self.agent_speed >= 0.0 && self.agent_speed.is_finite()) {
            return bad("agent_speed must be finite and nonnegative".into());
        }
        let (w, l) = (self.model.scene.object_width, self.model.scene.object_length);
        if !(w.0 > 0.0 && w.0 <= w.1 && l.0 > 0.0 && l.0 <= l.1) {
            return bad("object size ranges must be positive and ordered".into());
        }
        Ok(())
    }
}
