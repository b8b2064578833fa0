//! Command-line front end. Each subcommand loads a flat `key = value`
//! config, applies `--set key=value` overrides, and runs one stage or
//! report. Exit codes: 0 ok, 2 config, 3 missing artifact, 4 precondition,
//! 1 anything else.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::autograd::ParamStore;
use crate::config::RunConfig;
use crate::detection::write_ap_report;
use crate::error::{Error, Result};
use crate::orchestration::{
    append_stage_log, count_trainable_params, eval_samples, evaluate, prepare_base, prepare_gcft, prepare_lhft,
    with_threads, Checkpoint, FreezeMask, PreparedStage, StageOutput,
};
use crate::scene::{generate_scene, AgentSpec};
use crate::v2x::{robustness_sweep, write_sweep_csv};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_PRECONDITION: i32 = 4;

pub const STAGE_LOG: &str = "stage_log.csv";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING,
        Error::Precondition(_)
        | Error::Infeasible(_)
        | Error::ModalityMismatch { .. }
        | Error::UnmatchedPrefix(_)
        | Error::UnknownPrefix(_)
        | Error::CheckpointVersion { .. }
        | Error::CheckpointTruncated(_)
        | Error::CheckpointFormat(_) => EXIT_PRECONDITION,
        _ => EXIT_INTERNAL,
    }
}

#[derive(Debug, Parser)]
#[command(name = "heatv2x", version, about = "Staged heterogeneous collaborative perception on a synthetic V2X world")]
pub struct Cli {
    /// Flat `key = value` config; defaults apply when omitted.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides one config key; repeatable and applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stage 1: full training of the ego encoder, fusion and head.
    TrainBase {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 2: attach encoder `agent` and train its stem and HA adapters.
    Lhft {
        #[arg(long)]
        base: PathBuf,
        /// Encoder id from the roster.
        #[arg(long)]
        agent: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 3: insert and train the MC adapter on the full roster.
    Gcft {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-scene and pooled AP@0.5/0.7 as CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene seeds `first..end` (end exclusive).
        #[arg(long)]
        seeds: Option<String>,
        /// Leading roster agents that participate.
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AP over a pose-noise variance by latency grid as CSV.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated variances; the config's list when omitted.
        #[arg(long)]
        variances: Option<String>,
        /// Comma-separated latencies in frames.
        #[arg(long)]
        latencies: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter count selected by a comma-separated prefix mask.
    Params {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "")]
        mask: String,
    },
    /// Writes one generated scene as JSON.
    SceneDump {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut rc = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        rc.set(k, v)?;
    }
    rc.validate()?;
    Ok(rc)
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let rc = load_config(cli)?;
    let threads = rc.threads;
    let mut buf = Vec::new();
    let res = with_threads(threads, || dispatch(&cli.command, &rc, &mut buf))?;
    out.write_all(&buf)?;
    res
}

fn dispatch(cmd: &Command, rc: &RunConfig, out: &mut Vec<u8>) -> Result<()> {
    match cmd {
        Command::TrainBase { out: path } => {
            let stage = prepare_base(rc)?;
            finish_stage(stage, rc, path.as_deref(), "base.ckpt", out)
        }
        Command::Lhft { base, agent, out: path } => {
            let base = Checkpoint::load(base)?;
            let spec = roster_agent(rc, *agent)?;
            let stage = prepare_lhft(rc, &base, spec)?;
            finish_stage(stage, rc, path.as_deref(), &format!("lhft_{agent}.ckpt"), out)
        }
        Command::Gcft { ckpt, out: path } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let stage = prepare_gcft(rc, &ckpt)?;
            finish_stage(stage, rc, path.as_deref(), "gcft.ckpt", out)
        }
        Command::Eval {
            ckpt,
            seeds,
            agents,
            out: path,
        } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let (first, n) = match seeds {
                Some(s) => parse_seed_range(s)?,
                None => (rc.eval_seed, rc.eval_scenes),
            };
            let k = agents.unwrap_or(rc.roster.len());
            if k == 0 || k > rc.roster.len() {
                return Err(Error::Config(format!("--agents must be in 1..={}, got {k}", rc.roster.len())));
            }
            require_encoders(&ckpt.params, &rc.roster[..k])?;
            let samples = eval_samples(rc, &rc.roster, k, first, n)?;
            let report = evaluate(&ckpt.params, &samples, &rc.model, &rc.decode)?;
            let path = output_path(rc, path.as_deref(), "eval.csv")?;
            write_ap_report(&path, &report.rows)?;
            if n > 0 {
                writeln!(out, "ap50 {:.4} ap70 {:.4} over {n} scenes, {k} agents", report.ap50, report.ap70)?;
            }
            writeln!(out, "wrote {}", path.display())?;
            Ok(())
        }
        Command::Sweep {
            ckpt,
            variances,
            latencies,
            out: path,
        } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let mut rc = rc.clone();
            if let Some(v) = variances {
                rc.set("sweep_variances", v)?;
            }
            if let Some(l) = latencies {
                rc.set("sweep_latencies", l)?;
            }
            rc.validate()?;
            require_encoders(&ckpt.params, &rc.roster)?;
            let rows = robustness_sweep(&ckpt.params, &rc, &rc.roster, &rc.sweep_variances, &rc.sweep_latencies)?;
            let path = output_path(&rc, path.as_deref(), "sweep.csv")?;
            write_sweep_csv(&path, &rows)?;
            writeln!(out, "{} rows, wrote {}", rows.len(), path.display())?;
            Ok(())
        }
        Command::Params { ckpt, mask } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let mask = FreezeMask::parse(mask);
            let n = count_trainable_params(&ckpt.params, &mask)?;
            let total = ckpt.params.numel();
            writeln!(out, "mask,params,total_params")?;
            let label = mask.prefixes().collect::<Vec<_>>().join(";");
            writeln!(out, "{label},{n},{total}")?;
            Ok(())
        }
        Command::SceneDump { seed, out: path } => {
            let scene = generate_scene(*seed, &rc.roster, rc.objects_per_scene, &rc.model.scene)?;
            let path = output_path(rc, path.as_deref(), &format!("scene_{seed}.json"))?;
            std::fs::write(&path, scene.to_json()?)?;
            writeln!(out, "wrote {}", path.display())?;
            Ok(())
        }
    }
}

fn finish_stage(stage: PreparedStage, rc: &RunConfig, path: Option<&Path>, default: &str, out: &mut Vec<u8>) -> Result<()> {
    let mask = stage.plan.stage.mask(rc.ego().id);
    let label = stage.plan.stage.label();
    writeln!(out, "{label}: trainable parameters {}", count_trainable_params(&stage.params, &mask)?)?;
    let StageOutput { ckpt, log, warnings, .. } = stage.run(&rc.model)?;
    for w in &warnings {
        writeln!(out, "warning: {w}")?;
    }
    let path = output_path(rc, path, default)?;
    ckpt.save(&path)?;
    append_stage_log(&rc.out_dir.join(STAGE_LOG), &log)?;
    if let Some(last) = log.last() {
        writeln!(out, "{label}: final loss {:.6}", last.loss.total)?;
    }
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

/// `path`, or `default` inside the output directory (created on demand).
fn output_path(rc: &RunConfig, path: Option<&Path>, default: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&rc.out_dir)?;
    Ok(path.map_or_else(|| rc.out_dir.join(default), Path::to_path_buf))
}

fn roster_agent(rc: &RunConfig, id: usize) -> Result<AgentSpec> {
    rc.roster
        .iter()
        .copied()
        .find(|a| a.id == id)
        .ok_or_else(|| Error::Config(format!("no roster agent has encoder id {id}")))
}

fn require_encoders(params: &ParamStore, agents: &[AgentSpec]) -> Result<()> {
    for a in agents {
        if !params.contains(&format!("enc/{}/shrink/w", a.id)) {
            return Err(Error::Precondition(format!(
                "checkpoint has no encoder for agent id {} ({}); run lhft first",
                a.id, a.modality
            )));
        }
    }
    Ok(())
}

/// `first..end`, end exclusive.
pub fn parse_seed_range(s: &str) -> Result<(u64, usize)> {
    let bad = || Error::Config(format!("--seeds expects FIRST..END, got `{s}`"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if b < a {
        return Err(bad());
    }
    Ok((a, (b - a) as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seed_range("5..8").unwrap(), (5, 3));
        assert_eq!(parse_seed_range("5..5").unwrap(), (5, 0));
        assert!(parse_seed_range("8..5").is_err());
        assert!(parse_seed_range("x").is_err());
    }

    #[test]
    fn codes() {
        assert_eq!(exit_code(&Error::Config("k".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::MissingArtifact("a".into())), EXIT_MISSING);
        assert_eq!(exit_code(&Error::Precondition("p".into())), EXIT_PRECONDITION);
        assert_eq!(exit_code(&Error::Diverged { step: 3 }), EXIT_INTERNAL);
    }
}
