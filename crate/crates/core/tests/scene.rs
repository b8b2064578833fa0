use std::f64::consts::PI;

use heatv2x::config::{roster_from_modalities, ModelConfig};
use heatv2x::geometry::{rotated_iou, OrientedBox, Pose};
use heatv2x::scene::{
    cast_rays, cell_center, cell_index, generate_scene, ground_truth_boxes, render_as, render_observation,
    visible_objects, AgentSpec, GtMode, ModalityKind, Payload, Scene, SceneAgent, SceneConfig,
};
use proptest::prelude::*;

fn roster(n: usize) -> Vec<AgentSpec> {
    roster_from_modalities(&[ModalityKind::Pillar, ModalityKind::Depth, ModalityKind::Voxel, ModalityKind::Depth][..n])
}

fn hand_scene(agents: &[Pose], objects: Vec<OrientedBox>) -> Scene {
    Scene {
        seed: 0,
        world_range: 51.2,
        agents: agents
            .iter()
            .map(|&pose| SceneAgent {
                spec: AgentSpec {
                    id: 0,
                    modality: ModalityKind::Pillar,
                },
                pose,
            })
            .collect(),
        objects,
    }
}

#[test]
fn generation_is_reproducible() {
    let cfg = SceneConfig::default();
    let a = generate_scene(7, &roster(4), 12, &cfg).unwrap();
    let b = generate_scene(7, &roster(4), 12, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(Scene::from_json(&a.to_json().unwrap()).unwrap(), a);
    assert_ne!(a, generate_scene(8, &roster(4), 12, &cfg).unwrap());
}

#[test]
fn empty_scene_is_valid() {
    let cfg = SceneConfig::default();
    let s = generate_scene(3, &roster(2), 0, &cfg).unwrap();
    assert!(s.objects.is_empty());
    assert!(render_observation(&s, 0, &cfg).hits.iter().all(Option::is_none));
}

#[test]
fn preconditions_are_enforced() {
    let cfg = SceneConfig::default();
    assert!(generate_scene(0, &[], 4, &cfg).is_err());
    assert!(generate_scene(0, &vec![roster(1)[0]; 9], 4, &cfg).is_err());
}

#[test]
fn cells_follow_row_y_col_x_with_lower_boundary() {
    // 4 cells of 2 m over [-4, 4]
    assert_eq!(cell_index((-3.0, 1.0), 4.0, 4), Some((2, 0)));
    assert_eq!(cell_index((0.0, 0.0), 4.0, 4), Some((1, 1)));
    assert_eq!(cell_index((-4.0, 4.0), 4.0, 4), Some((3, 0)));
    assert_eq!(cell_index((4.01, 0.0), 4.0, 4), None);
    assert_eq!(cell_center(2, 0, 4.0, 4), (-3.0, 1.0));
}

#[test]
fn occluded_object_contributes_nothing() {
    let cfg = SceneConfig::default();
    // a wide wall at 10 m hides a small box at 25 m
    let wall = OrientedBox::new(10.0, 0.0, 30.0, 2.0, 0.0);
    let hidden = OrientedBox::new(25.0, 0.0, 2.0, 2.0, 0.0);
    let s = hand_scene(&[Pose::identity()], vec![wall, hidden]);
    let obs = render_observation(&s, 0, &cfg);
    assert!(obs.hits.iter().flatten().all(|h| h.object == 0));
    let Payload::Pillar(counts) = &obs.payload else { panic!("pillar payload expected") };
    for x in [24.5, 25.0, 25.5] {
        for y in [-0.5, 0.0, 0.5] {
            let (r, c) = cfg.cell_of((x, y)).unwrap();
            assert_eq!(counts.data[r * cfg.grid + c], 0.0);
        }
    }
    assert_eq!(visible_objects(&s, &[0], &cfg), vec![0]);
}

#[test]
fn depth_range_matches_ray_box_intersection() {
    let cfg = SceneConfig::default();
    let mc = ModelConfig::default();
    let l = 4.0;
    let s = hand_scene(&[Pose::identity()], vec![OrientedBox::new(10.0, 0.0, 2.0, l, 0.0)]);
    let obs = render_as(&s, 0, ModalityKind::Depth, &cfg);
    let Payload::Depth(r) = &obs.payload else { panic!("depth payload expected") };
    assert_eq!(r.len(), cfg.azimuth_bins);
    let min = r.iter().cloned().fold(f64::INFINITY, f64::min);
    let step = cfg.world_range / mc.depth_bins as f64;
    assert!((min - (10.0 - l / 2.0)).abs() < step);
    assert!(r.iter().all(|&v| v > 0.0));
    assert_eq!(r.iter().filter(|v| v.is_finite()).count(), obs.hits.iter().flatten().count());
}

#[test]
fn voxel_mask_marks_nonempty_columns() {
    let cfg = SceneConfig::default();
    let s = generate_scene(5, &roster(3), 16, &cfg).unwrap();
    let obs = render_as(&s, 0, ModalityKind::Voxel, &cfg);
    let Payload::Voxel { slabs, mask } = &obs.payload else { panic!("voxel payload expected") };
    let z = cfg.z_slabs;
    assert_eq!(slabs.shape, vec![cfg.grid, cfg.grid, z]);
    for cell in 0..cfg.grid * cfg.grid {
        let any = slabs.data[cell * z..][..z].iter().any(|&v| v > 0.0);
        assert_eq!(mask.data[cell] == 1.0, any);
    }
    assert!(mask.data.iter().any(|&m| m == 1.0));
}

#[test]
fn blind_agent_is_helped_by_a_partner() {
    let cfg = SceneConfig::default();
    let wall = OrientedBox::new(10.0, 0.0, 30.0, 2.0, 0.0);
    let target = OrientedBox::new(25.0, 0.0, 2.0, 4.0, 0.0);
    // agent 1 stands behind the wall next to the target
    let s = hand_scene(&[Pose::identity(), Pose::new(35.0, 0.0, PI)], vec![wall, target]);
    assert_eq!(ground_truth_boxes(&s, &GtMode::Single(0), &cfg), vec![wall]);
    assert_eq!(ground_truth_boxes(&s, &GtMode::Collaborative, &cfg), vec![wall, target]);
}

#[test]
fn lone_agent_without_occluders_sees_everything() {
    let cfg = SceneConfig::default();
    let objs = vec![
        OrientedBox::new(20.0, 0.0, 2.0, 4.0, 0.4),
        OrientedBox::new(-15.0, 10.0, 2.0, 4.0, 1.0),
        OrientedBox::new(0.0, -30.0, 2.0, 4.0, -0.3),
    ];
    let s = hand_scene(&[Pose::identity()], objs.clone());
    assert_eq!(ground_truth_boxes(&s, &GtMode::Single(0), &cfg), objs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_scenes_respect_their_contract(seed in 0u64..10_000, n in 1usize..=4) {
        let cfg = SceneConfig::default();
        let s = generate_scene(seed, &roster(n), 16, &cfg).unwrap();
        prop_assert_eq!(s.agents.len(), n);
        for (i, a) in s.objects.iter().enumerate() {
            prop_assert!(a.w > 0.0 && a.l > 0.0);
            for b in &s.objects[i + 1..] {
                prop_assert_eq!(rotated_iou(a, b), 0.0);
            }
        }
        for (i, a) in s.agents.iter().enumerate() {
            prop_assert!(a.pose.yaw > -PI && a.pose.yaw <= PI);
            for b in &s.agents[i + 1..] {
                prop_assert!(a.pose.distance(&b.pose) >= cfg.min_agent_gap);
            }
        }
        // truth grows with agents and contains each agent's own truth
        let mut prev = Vec::new();
        for k in 1..=n {
            let agents: Vec<usize> = (0..k).collect();
            let v = visible_objects(&s, &agents, &cfg);
            prop_assert!(prev.iter().all(|i| v.contains(i)));
            prev = v;
        }
        let collab = ground_truth_boxes(&s, &GtMode::Collaborative, &cfg);
        for a in 0..n {
            for b in ground_truth_boxes(&s, &GtMode::Single(a), &cfg) {
                prop_assert!(collab.contains(&b));
            }
        }
    }

    #[test]
    fn every_return_is_the_first_hit(seed in 0u64..10_000) {
        let cfg = SceneConfig::default();
        let s = generate_scene(seed, &roster(2), 16, &cfg).unwrap();
        let pose = s.agents[1].pose;
        for (a, hit) in cast_rays(&s, &pose, &cfg).into_iter().enumerate() {
            let (sn, cs) = (pose.yaw + cfg.ray_angle(a)).sin_cos();
            let nearest = s
                .objects
                .iter()
                .enumerate()
                .filter_map(|(i, o)| o.ray_hit((pose.x, pose.y), (cs, sn)).map(|t| (i, t)))
                .filter(|&(_, t)| t <= cfg.world_range)
                .min_by(|x, y| x.1.total_cmp(&y.1));
            match (hit, nearest) {
                (None, None) => {}
                (Some(h), Some((i, t))) => {
                    prop_assert_eq!(h.object, i);
                    prop_assert!((h.range - t).abs() < 1e-12);
                    let (wx, wy) = pose.to_world(h.point);
                    prop_assert!((wx - (pose.x + t * cs)).abs() < 1e-9 && (wy - (pose.y + t * sn)).abs() < 1e-9);
                }
                other => prop_assert!(false, "ray {} disagrees: {:?}", a, other),
            }
        }
    }
}
