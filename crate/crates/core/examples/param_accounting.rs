//! Counts what each training stage may touch in a model with every
//! adapter attached.

use heatv2x::config::RunConfig;
use heatv2x::fusion::MC_PREFIX;
use heatv2x::adapters::init_mc_adapter;
use heatv2x::orchestration::{attach_agent, count_trainable_params, init_base_params, FreezeMask};

fn main() -> heatv2x::Result<()> {
    let rc = RunConfig::default();
    let ego = rc.ego().id;
    let mut params = init_base_params(&rc)?;
    for spec in rc.roster.iter().skip(1) {
        if params.names().any(|n| n.starts_with(&format!("ha/{}/", spec.id))) {
            continue;
        }
        attach_agent(&mut params, *spec, ego, &rc.model, rc.seed)?;
    }
    params.extend(init_mc_adapter(MC_PREFIX, rc.model.channels, rc.model.adapter_ratio, rc.seed)?)?;
    let total = params.numel();
    println!("total parameters {total}");
    let mut stages = vec![("base".to_string(), FreezeMask::base(ego))];
    let mut seen = vec![ego];
    for spec in rc.roster.iter().skip(1) {
        if seen.contains(&spec.id) {
            continue;
        }
        seen.push(spec.id);
        stages.push((format!("lhft agent {} ({})", spec.id, spec.modality), FreezeMask::lhft(spec.id)));
    }
    stages.push(("gcft".into(), FreezeMask::gcft()));
    for (name, mask) in stages {
        let n = count_trainable_params(&params, &mask)?;
        println!("  {name:<22} {n:>8} trainable ({:5.2}%)", 100.0 * n as f64 / total as f64);
    }
    Ok(())
}
