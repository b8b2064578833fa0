//! Staged training: base model, per-agent adapter tuning (LHFT), global
//! collaborative tuning (GCFT), and evaluation.
//!
//! A training step evaluates its scene batch in parallel, then sums the
//! per-scene gradients in batch order before a single-threaded update, so
//! results do not depend on the thread count.

pub mod checkpoint;
pub mod freeze;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::adapters::init_mc_adapter;
use crate::autograd::{sgd_step, Adam, ParamStore};
use crate::config::{ModelConfig, OptimizerKind, RunConfig};
use crate::detection::{evaluate_ap_pooled, ApRow, FocalParams, LossBreakdown, LossWeights};
use crate::encoder::{init_encoder, init_ha_set, init_stem, init_trunk};
use crate::error::{Error, Result};
use crate::fusion::{init_fusion, MC_PREFIX};
use crate::detection::init_head;
use crate::geometry::OrientedBox;
use crate::model::{encode_sample, make_sample, predict, sample_grads, DecodeParams, Sample};
use crate::scene::{generate_scene, AgentSpec, GtMode, Scene};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StageRecord};
pub use freeze::{count_trainable_params, FreezeMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Base,
    Lhft(usize),
    Gcft,
}

impl Stage {
    pub fn label(&self) -> String {
        match self {
            Stage::Base => "base".into(),
            Stage::Lhft(a) => format!("lhft{a}"),
            Stage::Gcft => "gcft".into(),
        }
    }

    pub fn mask(&self, ego: usize) -> FreezeMask {
        match self {
            Stage::Base => FreezeMask::base(ego),
            Stage::Lhft(a) => FreezeMask::lhft(*a),
            Stage::Gcft => FreezeMask::gcft(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub stage: Stage,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub weights: LossWeights,
    pub focal: FocalParams,
}

impl TrainPlan {
    pub fn from_config(rc: &RunConfig, stage: Stage) -> Self {
        let steps = match stage {
            Stage::Base => rc.base_steps,
            Stage::Lhft(_) => rc.lhft_steps,
            Stage::Gcft => rc.gcft_steps,
        };
        Self {
            stage,
            steps,
            lr: rc.lr,
            batch: rc.batch,
            seed: rc.seed,
            optimizer: rc.optimizer,
            weights: rc.loss,
            focal: rc.focal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        self.weights.validate()
    }
}

/// One stage-log row: batch-mean loss terms after a step's forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub stage: String,
    pub loss: LossBreakdown,
}

pub const STAGE_LOG_HEADER: &str = "step,stage,total_loss,classification,regression,direction,depth";

/// Appends rows, writing the header when the file is new or empty.
pub fn append_stage_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut out = String::new();
    if fresh {
        out.push_str(STAGE_LOG_HEADER);
        out.push('\n');
    }
    for r in rows {
        let l = &r.loss;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.stage, l.total, l.classification, l.regression, l.direction, l.depth
        ));
    }
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Runs `f` on a pool of `threads` workers (0 means one per core).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Mask-driven optimization over `samples`. Step `s` uses samples
/// `s * batch ..` cyclically.
pub fn train(params: &mut ParamStore, samples: &[Sample], plan: &TrainPlan, cfg: &ModelConfig) -> Result<Vec<LogRow>> {
    plan.validate()?;
    if samples.is_empty() {
        return Err(Error::Precondition("no training samples".into()));
    }
    let mut adam = Adam::default();
    let mut log = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        let batch: Vec<&Sample> = (0..plan.batch).map(|j| &samples[(step * plan.batch + j) % samples.len()]).collect();
        let p: &ParamStore = params;
        let results: Vec<Result<(BTreeMap<String, Tensor>, LossBreakdown)>> = batch
            .par_iter()
            .map(|s| sample_grads(p, s, cfg, &plan.weights, &plan.focal))
            .collect();
        let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss = LossBreakdown {
            total: 0.0,
            classification: 0.0,
            regression: 0.0,
            direction: 0.0,
            depth: 0.0,
        };
        for r in results {
            let (grads, l) = r.map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step },
                other => other,
            })?;
            if !l.total.is_finite() {
                return Err(Error::Diverged { step });
            }
            loss.total += l.total;
            loss.classification += l.classification;
            loss.regression += l.regression;
            loss.direction += l.direction;
            loss.depth += l.depth;
            for (k, g) in grads {
                match sum.get_mut(&k) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        sum.insert(k, g);
                    }
                }
            }
        }
        let inv = 1.0 / plan.batch as f64;
        for g in sum.values_mut() {
            g.data.iter_mut().for_each(|v| *v *= inv);
            if !g.is_finite() {
                return Err(Error::Diverged { step });
            }
        }
        loss.total *= inv;
        loss.classification *= inv;
        loss.regression *= inv;
        loss.direction *= inv;
        loss.depth *= inv;
        match plan.optimizer {
            OptimizerKind::Sgd => sgd_step(params, &sum, plan.lr)?,
            OptimizerKind::Adam => adam.step(params, &sum, plan.lr)?,
        }
        log.push(LogRow {
            step,
            stage: plan.stage.label(),
            loss,
        });
    }
    Ok(log)
}

/// Scenes with seeds `first .. first + n`, generated in parallel.
pub fn make_scenes(roster: &[AgentSpec], first: u64, n: usize, rc: &RunConfig) -> Result<Vec<Scene>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| generate_scene(first + i, roster, rc.objects_per_scene, &rc.model.scene))
        .collect()
}

/// Samples over the first `k` roster agents with the given truth.
pub fn make_samples(scenes: &[Scene], k: usize, gt: &GtMode, cfg: &ModelConfig) -> Result<Vec<Sample>> {
    let agents: Vec<usize> = (0..k).collect();
    scenes.par_iter().map(|s| make_sample(s, &agents, gt, cfg)).collect()
}

/// Fills encoder caches; valid while no encoder or HA adapter trains.
pub fn cache_features(params: &ParamStore, samples: &mut [Sample], cfg: &ModelConfig) -> Result<()> {
    let feats: Vec<Result<Vec<Tensor>>> = samples.par_iter().map(|s| encode_sample(params, s, cfg)).collect();
    for (s, f) in samples.iter_mut().zip(feats) {
        s.cache = Some(f?);
    }
    Ok(())
}

/// Result of one stage.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub ckpt: Checkpoint,
    pub log: Vec<LogRow>,
    pub trainable: usize,
    pub warnings: Vec<String>,
}

/// A stage with its parameters masked and its data built, ready to train.
#[derive(Clone, Debug)]
pub struct PreparedStage {
    pub plan: TrainPlan,
    pub params: ParamStore,
    pub samples: Vec<Sample>,
    pub provenance: Vec<StageRecord>,
    pub warnings: Vec<String>,
}

impl PreparedStage {
    pub fn trainable(&self) -> usize {
        self.params.trainable_numel()
    }

    pub fn run(self, cfg: &ModelConfig) -> Result<StageOutput> {
        let Self {
            plan,
            mut params,
            samples,
            mut provenance,
            warnings,
        } = self;
        let trainable = params.trainable_numel();
        let log = train(&mut params, &samples, &plan, cfg)?;
        provenance.push(StageRecord {
            stage: plan.stage.label(),
            steps: plan.steps,
            lr: plan.lr,
            seed: plan.seed,
            trainable_params: trainable,
            final_loss: log.last().map_or(f64::NAN, |r| r.loss.total),
        });
        Ok(StageOutput {
            ckpt: Checkpoint { params, provenance },
            log,
            trainable,
            warnings,
        })
    }
}

/// Fresh ego encoder, fusion and head.
pub fn init_base_params(rc: &RunConfig) -> Result<ParamStore> {
    let mut p = init_encoder(rc.ego(), &rc.model, rc.seed)?;
    p.extend(init_fusion(&rc.model, rc.seed)?)?;
    p.extend(init_head(rc.model.channels, rc.seed)?)?;
    Ok(p)
}

/// Stage 1: full training of ego encoder, fusion and head on scenes of
/// `base_agents` homogeneous ego-modality agents.
pub fn prepare_base(rc: &RunConfig) -> Result<PreparedStage> {
    rc.validate()?;
    let plan = TrainPlan::from_config(rc, Stage::Base);
    plan.validate()?;
    let mut params = init_base_params(rc)?;
    let ego = rc.ego();
    plan.stage.mask(ego.id).apply(&mut params)?;
    let roster = vec![ego; rc.base_agents];
    let scenes = make_scenes(&roster, rc.train_seed, rc.train_scenes, rc)?;
    let samples = make_samples(&scenes, rc.base_agents, &GtMode::Collaborative, &rc.model)?;
    Ok(PreparedStage {
        plan,
        params,
        samples,
        provenance: Vec::new(),
        warnings: Vec::new(),
    })
}

pub fn train_base(rc: &RunConfig) -> Result<StageOutput> {
    prepare_base(rc)?.run(&rc.model)
}

/// Adds agent `new`'s encoder: trunk copied from the ego encoder where
/// shapes agree, fresh stem, fresh HA adapters. Returns warnings for any
/// tensor that had to be freshly initialized instead.
pub fn attach_agent(params: &mut ParamStore, new: AgentSpec, ego: usize, cfg: &ModelConfig, seed: u64) -> Result<Vec<String>> {
    if new.id == ego {
        return Err(Error::Precondition(format!("agent id {ego} is the ego encoder; pick another id")));
    }
    remove_prefix(params, &format!("enc/{}", new.id));
    remove_prefix(params, &format!("ha/{}", new.id));
    let mut warnings = Vec::new();
    let fresh = init_trunk(new.id, cfg, seed)?;
    for (name, t, _) in fresh.iter() {
        let src = name.replacen(&format!("enc/{}/", new.id), &format!("enc/{ego}/"), 1);
        match params.get(&src) {
            Some(s) if s.shape == t.shape => {
                let copy = s.clone();
                params.insert(name, copy, true)?;
            }
            _ => {
                warnings.push(format!("{name}: no shape-compatible `{src}`, freshly initialized"));
                params.insert(name, t.clone(), true)?;
            }
        }
    }
    params.extend(init_stem(new, cfg, seed)?)?;
    params.extend(init_ha_set(new, cfg, seed)?)?;
    Ok(warnings)
}

fn remove_prefix(params: &mut ParamStore, prefix: &str) {
    let stale: Vec<String> = params
        .names()
        .filter(|n| freeze::prefix_matches(prefix, n))
        .map(str::to_string)
        .collect();
    for n in stale {
        params.remove(&n);
    }
}

/// Stage 2: integrate `new` by training only its stem and HA adapters on
/// its own single-agent truth, with the new agent as the fusion ego.
pub fn prepare_lhft(rc: &RunConfig, base: &Checkpoint, new: AgentSpec) -> Result<PreparedStage> {
    rc.validate()?;
    let plan = TrainPlan::from_config(rc, Stage::Lhft(new.id));
    plan.validate()?;
    let mut params = base.params.clone();
    let warnings = attach_agent(&mut params, new, rc.ego().id, &rc.model, rc.seed)?;
    plan.stage.mask(rc.ego().id).apply(&mut params)?;
    let scenes = make_scenes(&[new], rc.train_seed, rc.train_scenes, rc)?;
    let samples = make_samples(&scenes, 1, &GtMode::Single(0), &rc.model)?;
    Ok(PreparedStage {
        plan,
        params,
        samples,
        provenance: base.provenance.clone(),
        warnings,
    })
}

pub fn run_lhft(rc: &RunConfig, base: &Checkpoint, new: AgentSpec) -> Result<StageOutput> {
    prepare_lhft(rc, base, new)?.run(&rc.model)
}

/// Runs LHFT for every roster encoder other than the ego's, in roster order.
pub fn run_lhft_all(rc: &RunConfig, base: &Checkpoint) -> Result<Vec<StageOutput>> {
    let mut outs: Vec<StageOutput> = Vec::new();
    let mut done = std::collections::BTreeSet::new();
    for spec in rc.roster.iter().skip(1) {
        if spec.id == rc.ego().id || !done.insert(spec.id) {
            continue;
        }
        let prev = outs.last().map_or(base, |o| &o.ckpt);
        outs.push(run_lhft(rc, prev, *spec)?);
    }
    Ok(outs)
}

/// Stage 3: insert the MC adapter and train only it on the full roster
/// with collaborative truth. Encoder outputs are cached since every
/// encoder is frozen.
pub fn prepare_gcft(rc: &RunConfig, ckpt: &Checkpoint) -> Result<PreparedStage> {
    rc.validate()?;
    if rc.roster.len() < 2 {
        return Err(Error::Precondition("GCFT needs at least two agents in the roster".into()));
    }
    for spec in &rc.roster {
        if !ckpt.params.contains(&format!("enc/{}/shrink/w", spec.id)) {
            return Err(Error::Precondition(format!(
                "checkpoint has no encoder for agent id {} ({}); run lhft first",
                spec.id, spec.modality
            )));
        }
    }
    let plan = TrainPlan::from_config(rc, Stage::Gcft);
    plan.validate()?;
    let mut params = ckpt.params.clone();
    remove_prefix(&mut params, "mc");
    params.extend(init_mc_adapter(MC_PREFIX, rc.model.channels, rc.model.adapter_ratio, rc.seed)?)?;
    plan.stage.mask(rc.ego().id).apply(&mut params)?;
    let scenes = make_scenes(&rc.roster, rc.train_seed, rc.train_scenes, rc)?;
    let mut samples = make_samples(&scenes, rc.roster.len(), &GtMode::Collaborative, &rc.model)?;
    cache_features(&params, &mut samples, &rc.model)?;
    Ok(PreparedStage {
        plan,
        params,
        samples,
        provenance: ckpt.provenance.clone(),
        warnings: Vec::new(),
    })
}

pub fn run_gcft(rc: &RunConfig, ckpt: &Checkpoint) -> Result<StageOutput> {
    prepare_gcft(rc, ckpt)?.run(&rc.model)
}

/// Held-out samples over the first `k` roster agents. Truth is the
/// collaborative coverage of the whole roster, so every `k` is scored
/// against the same boxes.
pub fn eval_samples(rc: &RunConfig, roster: &[AgentSpec], k: usize, first: u64, n: usize) -> Result<Vec<Sample>> {
    if k == 0 || k > roster.len() {
        return Err(Error::Precondition(format!("cannot evaluate {k} of {} agents", roster.len())));
    }
    let scenes = make_scenes(roster, first, n, rc)?;
    make_samples(&scenes, k, &GtMode::Collaborative, &rc.model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ap50: f64,
    pub ap70: f64,
    pub rows: Vec<ApRow>,
}

pub fn predict_all(params: &ParamStore, samples: &[Sample], cfg: &ModelConfig, dp: &DecodeParams) -> Result<Vec<Vec<OrientedBox>>> {
    samples.par_iter().map(|s| predict(params, s, cfg, dp)).collect()
}

/// Pooled AP@0.5 and AP@0.7 plus per-scene rows; the pooled values appear
/// as `all` rows when there is at least one scene.
pub fn evaluate(params: &ParamStore, samples: &[Sample], cfg: &ModelConfig, dp: &DecodeParams) -> Result<EvalReport> {
    let preds = predict_all(params, samples, cfg, dp)?;
    let pairs: Vec<(Vec<OrientedBox>, Vec<OrientedBox>)> =
        preds.into_iter().zip(samples).map(|(p, s)| (p, s.gt.clone())).collect();
    let mut rows = Vec::new();
    let mut pooled = [0.0; 2];
    for (i, thr) in [0.5, 0.7].into_iter().enumerate() {
        for (pair, s) in pairs.iter().zip(samples) {
            rows.push(ApRow {
                scene_id: s.scene_id.clone(),
                n_agents: s.agents.len(),
                iou_threshold: thr,
                ap: evaluate_ap_pooled(std::slice::from_ref(pair), thr),
            });
        }
        pooled[i] = evaluate_ap_pooled(&pairs, thr);
        if let Some(s) = samples.first() {
            rows.push(ApRow {
                scene_id: "all".into(),
                n_agents: s.agents.len(),
                iou_threshold: thr,
                ap: pooled[i],
            });
        }
    }
    Ok(EvalReport {
        ap50: pooled[0],
        ap70: pooled[1],
        rows,
    })
}
