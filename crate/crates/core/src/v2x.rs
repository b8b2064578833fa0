//! Simulated transmission layer: pose noise, latency and message drops
//! between agents, plus the robustness sweep built on top of it.
//!
//! Noise touches only the pose a message carries, never its feature
//! payload. Every random draw comes from a stream keyed by
//! `(seed, "channel", scene, agent, stamp)`, so results do not depend on
//! evaluation order.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::autograd::ParamStore;
use crate::config::RunConfig;
use crate::detection::evaluate_ap_pooled;
use crate::encoder::BEVFeature;
use crate::error::{Error, Result};
use crate::geometry::{OrientedBox, Pose};
use crate::model::{make_sample, predict, Sample};
use crate::orchestration::make_scenes;
use crate::rng::stream;
use crate::scene::{render_observation, AgentSpec, GtMode, Scene};

/// Yaw noise variance relative to the translation variance.
pub const YAW_VARIANCE_SCALE: f64 = 0.1;
pub const MAX_POSE_VARIANCE: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelConfig {
    /// m² for x and y; yaw gets `YAW_VARIANCE_SCALE` times this in rad².
    pub pose_noise_variance: f64,
    pub latency_frames: usize,
    pub drop_probability: f64,
}

impl ChannelConfig {
    pub fn clean() -> Self {
        Self {
            pose_noise_variance: 0.0,
            latency_frames: 0,
            drop_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_POSE_VARIANCE).contains(&self.pose_noise_variance) {
            return Err(Error::Precondition(format!(
                "pose noise variance must lie in [0, {MAX_POSE_VARIANCE}], got {}",
                self.pose_noise_variance
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(Error::Precondition(format!(
                "drop probability must lie in [0, 1], got {}",
                self.drop_probability
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMessage {
    pub sender: usize,
    pub feature: BEVFeature,
    /// The pose the sender claims, possibly noisy.
    pub pose: Pose,
    pub stamp: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Delivery {
    Delivered(FeatureMessage),
    Dropped,
}

/// Stream for one message of `agent` at `stamp` in scene `scene`.
pub fn channel_stream(seed: u64, scene: u64, agent: usize, stamp: u64) -> ChaCha8Rng {
    stream(seed, &["channel", &scene.to_string(), &agent.to_string(), &stamp.to_string()])
}

/// Zero-mean Gaussian noise on x, y (variance `variance`) and yaw
/// (variance `YAW_VARIANCE_SCALE * variance`). Variance 0 draws nothing
/// and returns the pose unchanged.
pub fn apply_pose_noise(pose: &Pose, variance: f64, rng: &mut impl Rng) -> Result<Pose> {
    if !(0.0..=MAX_POSE_VARIANCE).contains(&variance) {
        return Err(Error::Precondition(format!(
            "pose noise variance must lie in [0, {MAX_POSE_VARIANCE}], got {variance}"
        )));
    }
    if variance == 0.0 {
        return Ok(*pose);
    }
    let t = Normal::new(0.0, variance.sqrt()).expect("positive std");
    let r = Normal::new(0.0, (YAW_VARIANCE_SCALE * variance).sqrt()).expect("positive std");
    let (dx, dy, dyaw) = (t.sample(rng), t.sample(rng), r.sample(rng));
    Ok(Pose::new(pose.x + dx, pose.y + dy, pose.yaw + dyaw))
}

/// Noisy carried pose, or `None` when the message is lost. Noise is drawn
/// before the drop decision so both are fixed by the stream alone.
fn transmit(pose: &Pose, ch: &ChannelConfig, rng: &mut impl Rng) -> Result<Option<Pose>> {
    ch.validate()?;
    let noisy = apply_pose_noise(pose, ch.pose_noise_variance, rng)?;
    let dropped = ch.drop_probability > 0.0 && rng.gen::<f64>() < ch.drop_probability;
    Ok((!dropped).then_some(noisy))
}

pub fn broadcast(feature: BEVFeature, pose: &Pose, stamp: u64, ch: &ChannelConfig, rng: &mut impl Rng) -> Result<Delivery> {
    if !feature.tensor.is_finite() {
        return Err(Error::Precondition("broadcast feature must be finite".into()));
    }
    Ok(match transmit(pose, ch, rng)? {
        Some(p) => Delivery::Delivered(FeatureMessage {
            sender: feature.agent_index,
            feature,
            pose: p,
            stamp,
        }),
        None => Delivery::Dropped,
    })
}

/// The message stamped `current - latency`, where `current` is the newest
/// stamp in `history`; falls back to the oldest message when that stamp is
/// not held.
pub fn apply_latency(history: &[FeatureMessage], latency_frames: usize) -> Result<&FeatureMessage> {
    let newest = history
        .iter()
        .max_by_key(|m| m.stamp)
        .ok_or_else(|| Error::Precondition("latency needs a nonempty message history".into()))?;
    let want = newest.stamp.saturating_sub(latency_frames as u64);
    let oldest = history.iter().min_by_key(|m| m.stamp).expect("nonempty");
    Ok(history.iter().find(|m| m.stamp == want).unwrap_or(oldest))
}

/// Where an agent moving at `speed` m/frame along its heading was
/// `frames_ago` frames before it reached `now`.
pub fn track_pose(now: &Pose, speed: f64, frames_ago: usize) -> Pose {
    let d = speed * frames_ago as f64;
    let (s, c) = now.yaw.sin_cos();
    Pose::new(now.x - d * c, now.y - d * s, now.yaw)
}

/// Stamp of the current frame. Tracks start here minus the history.
pub const CURRENT_STAMP: u64 = 16;

/// An evaluation sample as the ego receives it through `ch`. The ego's
/// own input is exact; every other agent's message is rendered at its
/// stale track pose, carries a noisy pose and may be dropped. A clean
/// channel reproduces `make_sample` exactly.
pub fn channel_sample(
    scene: &Scene,
    agents: &[usize],
    gt: &GtMode,
    rc: &RunConfig,
    ch: &ChannelConfig,
    seed: u64,
) -> Result<Sample> {
    let mut sample = make_sample(scene, agents, gt, &rc.model)?;
    let latency = ch.latency_frames.min(CURRENT_STAMP as usize);
    let stamp = CURRENT_STAMP - latency as u64;
    for (slot, &a) in agents.iter().enumerate().skip(1) {
        let true_pose = scene.agents[a].pose;
        let old = track_pose(&true_pose, rc.agent_speed, latency);
        if latency > 0 {
            let mut past = scene.clone();
            past.agents[a].pose = old;
            sample.agents[slot].obs = render_observation(&past, a, &rc.model.scene);
        }
        let mut rng = channel_stream(seed, scene.seed, a, stamp);
        match transmit(&old, ch, &mut rng)? {
            Some(p) => sample.agents[slot].pose = p,
            None => sample.agents[slot].present = false,
        }
    }
    Ok(sample)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub variance: f64,
    pub latency_frames: usize,
    pub iou_threshold: f64,
    pub ap: f64,
    pub n_scenes: usize,
    pub seed: u64,
}

pub const SWEEP_HEADER: &str = "variance,latency_frames,iou_threshold,ap,n_scenes,seed";

/// Collaborative AP@0.5 and AP@0.7 of `params` on the held-out scenes of
/// `roster` for every `(variance, latency)` cell, variance-major.
pub fn robustness_sweep(
    params: &ParamStore,
    rc: &RunConfig,
    roster: &[AgentSpec],
    variances: &[f64],
    latencies: &[usize],
) -> Result<Vec<SweepRow>> {
    for &v in variances {
        ChannelConfig {
            pose_noise_variance: v,
            latency_frames: 0,
            drop_probability: rc.drop_probability,
        }
        .validate()?;
    }
    let scenes = make_scenes(roster, rc.eval_seed, rc.eval_scenes, rc)?;
    let agents: Vec<usize> = (0..roster.len()).collect();
    let mut rows = Vec::new();
    for &variance in variances {
        for &latency in latencies {
            let ch = ChannelConfig {
                pose_noise_variance: variance,
                latency_frames: latency,
                drop_probability: rc.drop_probability,
            };
            let pairs: Vec<(Vec<OrientedBox>, Vec<OrientedBox>)> = scenes
                .par_iter()
                .map(|s| {
                    let sample = channel_sample(s, &agents, &GtMode::Collaborative, rc, &ch, rc.seed)?;
                    Ok((predict(params, &sample, &rc.model, &rc.decode)?, sample.gt))
                })
                .collect::<Result<_>>()?;
            for thr in [0.5, 0.7] {
                rows.push(SweepRow {
                    variance,
                    latency_frames: latency,
                    iou_threshold: thr,
                    ap: evaluate_ap_pooled(&pairs, thr),
                    n_scenes: scenes.len(),
                    seed: rc.seed,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variance, r.latency_frames, r.iou_threshold, r.ap, r.n_scenes, r.seed
        ));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn feature() -> BEVFeature {
        BEVFeature {
            tensor: Tensor::zeros(&[2, 2, 4]),
            pose: Pose::identity(),
            agent_index: 3,
        }
    }

    #[test]
    fn clean_channel_keeps_pose() {
        let p = Pose::new(1.5, -2.0, 0.3);
        let mut rng = channel_stream(0, 0, 1, 0);
        match broadcast(feature(), &p, 0, &ChannelConfig::clean(), &mut rng).unwrap() {
            Delivery::Delivered(m) => {
                assert_eq!(m.pose, p);
                assert_eq!(m.sender, 3);
            }
            Delivery::Dropped => panic!("clean channel dropped"),
        }
    }

    #[test]
    fn certain_drop() {
        let ch = ChannelConfig {
            drop_probability: 1.0,
            ..ChannelConfig::clean()
        };
        for s in 0..20 {
            let mut rng = channel_stream(0, 0, 1, s);
            assert_eq!(broadcast(feature(), &Pose::identity(), s, &ch, &mut rng).unwrap(), Delivery::Dropped);
        }
    }

    #[test]
    fn track_moves_back_along_heading() {
        let now = Pose::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let p = track_pose(&now, 1.0, 2);
        assert!((p.x).abs() < 1e-12 && (p.y + 2.0).abs() < 1e-12);
    }
}
