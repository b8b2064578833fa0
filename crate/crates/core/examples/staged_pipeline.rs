//! Base training, late fine-tuning of a depth agent and global fine-tuning
//! on a small configuration, with AP after every stage.

use heatv2x::config::{roster_from_modalities, RunConfig};
use heatv2x::orchestration::{eval_samples, evaluate, run_gcft, run_lhft, train_base};
use heatv2x::scene::ModalityKind;

fn main() -> heatv2x::Result<()> {
    let mut rc = RunConfig::default();
    rc.roster = roster_from_modalities(&[ModalityKind::Pillar, ModalityKind::Depth]);
    rc.train_scenes = 80;
    rc.eval_scenes = 20;
    rc.base_steps = 400;
    rc.lhft_steps = 150;
    rc.gcft_steps = 60;
    rc.validate()?;
    let ap = |ckpt: &heatv2x::orchestration::Checkpoint, k: usize| -> heatv2x::Result<f64> {
        let samples = eval_samples(&rc, &rc.roster, k, rc.eval_seed, rc.eval_scenes)?;
        Ok(evaluate(&ckpt.params, &samples, &rc.model, &rc.decode)?.ap50)
    };

    let base = train_base(&rc)?;
    println!("base: {} trainable, loss {:.3} -> {:.3}, ego-only AP@0.5 {:.3}",
        base.trainable, base.log[0].loss.total, base.log.last().unwrap().loss.total, ap(&base.ckpt, 1)?);
    let lhft = run_lhft(&rc, &base.ckpt, rc.roster[1])?;
    println!("lhft: {} trainable, AP@0.5 ego {:.3}, with depth agent {:.3}", lhft.trainable, ap(&lhft.ckpt, 1)?, ap(&lhft.ckpt, 2)?);
    let gcft = run_gcft(&rc, &lhft.ckpt)?;
    println!("gcft: {} trainable, AP@0.5 with depth agent {:.3}", gcft.trainable, ap(&gcft.ckpt, 2)?);
    let stages: Vec<&str> = gcft.ckpt.provenance.iter().map(|r| r.stage.as_str()).collect();
    println!("provenance {}", stages.join(" -> "));
    Ok(())
}
