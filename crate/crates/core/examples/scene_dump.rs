//! Generates one scene, reports what each agent sees and writes the scene
//! as JSON next to the working directory.

use heatv2x::config::RunConfig;
use heatv2x::scene::{generate_scene, render_observation, visible_objects, Payload};

fn main() -> heatv2x::Result<()> {
    let rc = RunConfig::default();
    let cfg = &rc.model.scene;
    let scene = generate_scene(7, &rc.roster, rc.objects_per_scene, cfg)?;
    println!("scene {}: {} objects, {} agents", scene.seed, scene.objects.len(), scene.agents.len());
    for (i, a) in scene.agents.iter().enumerate() {
        let obs = render_observation(&scene, i, cfg);
        let returns = obs.hits.iter().flatten().count();
        let detail = match &obs.payload {
            Payload::Pillar(t) | Payload::Bev(t) => format!("occupied cells {}", t.data.iter().filter(|&&v| v > 0.0).count()),
            Payload::Voxel { mask, .. } => format!("occupied columns {}", mask.data.iter().filter(|&&v| v > 0.0).count()),
            Payload::Depth(r) => format!("nearest return {:.2} m", r.iter().cloned().fold(f64::INFINITY, f64::min)),
        };
        println!(
            "  agent {i} ({:>6}) at ({:6.1}, {:6.1}): {returns:3} of {} rays hit, sees {:2} objects, {detail}",
            a.spec.modality,
            a.pose.x,
            a.pose.y,
            cfg.azimuth_bins,
            visible_objects(&scene, &[i], cfg).len(),
        );
    }
    let all: Vec<usize> = (0..scene.agents.len()).collect();
    println!("  together the agents see {} objects", visible_objects(&scene, &all, cfg).len());
    let path = std::env::temp_dir().join("heatv2x_scene_7.json");
    scene.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}
