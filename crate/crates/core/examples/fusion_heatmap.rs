//! Fuses three agents' features into the ego frame and writes the per-cell
//! attention each agent receives as CSV.

use heatv2x::config::RunConfig;
use heatv2x::encoder::{encode_agent, init_encoder};
use heatv2x::fusion::{fuse, init_fusion, write_attention_heatmap};
use heatv2x::scene::{generate_scene, render_observation};

fn main() -> heatv2x::Result<()> {
    let mut rc = RunConfig::default();
    rc.roster.truncate(3);
    let cfg = &rc.model;
    let scene = generate_scene(11, &rc.roster, rc.objects_per_scene, &cfg.scene)?;
    let mut store = init_fusion(cfg, 5)?;
    let mut features = Vec::new();
    for (i, a) in scene.agents.iter().enumerate() {
        let enc = init_encoder(a.spec, cfg, 10 + i as u64)?;
        features.push(encode_agent(&render_observation(&scene, i, &cfg.scene), &enc, a.spec, cfg, false, a.pose, i)?);
        store.extend(enc)?;
    }
    let out = fuse(&features, &store, false, cfg)?;
    let n = features.len();
    let cells = out.weights.len() / n;
    for a in 0..n {
        let mean = (0..cells).map(|c| out.weights.data[c * n + a]).sum::<f64>() / cells as f64;
        let dist = scene.agents[a].pose.distance(&scene.agents[0].pose);
        println!("agent {a} ({:>6}, {dist:5.1} m from ego): mean weight {mean:.3}", scene.agents[a].spec.modality);
    }
    println!("fused map {:?}", out.h.shape);
    let path = std::env::temp_dir().join("heatv2x_attention.csv");
    write_attention_heatmap(&path, &out.weights, cfg.feature_grid())?;
    println!("wrote {}", path.display());
    Ok(())
}
