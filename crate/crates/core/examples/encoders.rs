//! Runs every modality's encoder on the same scene and shows that a fresh
//! set of adapters leaves the feature map untouched.

use heatv2x::config::RunConfig;
use heatv2x::encoder::{encode_agent, init_encoder, init_ha_set, ha_site_kinds};
use heatv2x::scene::{generate_scene, render_as, AgentSpec, ModalityKind};

fn main() -> heatv2x::Result<()> {
    let rc = RunConfig::default();
    let cfg = &rc.model;
    let scene = generate_scene(3, &rc.roster, rc.objects_per_scene, &cfg.scene)?;
    let pose = scene.agents[0].pose;
    for (id, modality) in [ModalityKind::Pillar, ModalityKind::Voxel, ModalityKind::Depth, ModalityKind::Bev].into_iter().enumerate() {
        let spec = AgentSpec { id, modality };
        let obs = render_as(&scene, 0, modality, &cfg.scene);
        let enc = init_encoder(spec, cfg, 1)?;
        let plain = encode_agent(&obs, &enc, spec, cfg, false, pose, 0)?;
        let mut with_ha = enc.clone();
        with_ha.extend(init_ha_set(spec, cfg, 2)?)?;
        let adapted = encode_agent(&obs, &with_ha, spec, cfg, true, pose, 0)?;
        let energy = plain.tensor.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "{modality:>6}: feature {:?}, {} params, norm {energy:.3}, adapters {:?} identical at init: {}",
            plain.tensor.shape,
            enc.numel(),
            ha_site_kinds(modality),
            plain.tensor.bitwise_eq(&adapted.tensor),
        );
    }
    Ok(())
}
