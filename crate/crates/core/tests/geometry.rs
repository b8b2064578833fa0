mod common;

use std::f64::consts::PI;

use heatv2x::geometry::{normalize_angle, rotated_iou, Affine2, OrientedBox, Pose};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn iou_matches_raster_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..25 {
        let a = OrientedBox::new(0.0, 0.0, rng.gen_range(1.0..4.0), rng.gen_range(2.0..8.0), rng.gen_range(-PI..PI));
        let b = OrientedBox::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(1.0..4.0),
            rng.gen_range(2.0..8.0),
            rng.gen_range(-PI..PI),
        );
        let oracle = common::raster_iou(&a, &b, 1000);
        assert!((rotated_iou(&a, &b) - oracle).abs() < 1e-3, "{a:?} {b:?}");
    }
}

#[test]
fn iou_special_cases() {
    let a = OrientedBox::new(1.0, 2.0, 2.0, 4.0, 0.3);
    assert!((rotated_iou(&a, &a) - 1.0).abs() < 1e-12);
    let far = OrientedBox::new(50.0, 2.0, 2.0, 4.0, 0.3);
    assert_eq!(rotated_iou(&a, &far), 0.0);
    // a half-length shift along the heading leaves a third of the union shared
    let (s, c) = 0.3f64.sin_cos();
    let shifted = OrientedBox::new(1.0 + 2.0 * c, 2.0 + 2.0 * s, 2.0, 4.0, 0.3);
    assert!((rotated_iou(&a, &shifted) - 1.0 / 3.0).abs() < 1e-9);
}

#[test]
fn affine_matches_pose_composition() {
    let src = Pose::new(3.0, -1.0, 0.7);
    let ego = Pose::new(-2.0, 4.0, -1.2);
    let m = Affine2::ego_to_src(&src, &ego);
    for p in [(0.0, 0.0), (5.0, -3.0), (-7.5, 2.25)] {
        let want = src.to_local(ego.to_world(p));
        let got = m.apply(p);
        assert!((want.0 - got.0).abs() < 1e-12 && (want.1 - got.1).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn angles_normalize_into_half_open_interval(a in -100.0f64..100.0) {
        let n = normalize_angle(a);
        prop_assert!(n > -PI && n <= PI);
        let k = ((a - n) / (2.0 * PI)).round();
        prop_assert!((k * 2.0 * PI - (a - n)).abs() < 1e-9);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(
        x in -3.0f64..3.0, y in -3.0f64..3.0, w in 0.5f64..4.0, l in 0.5f64..6.0, t in -PI..PI, u in -PI..PI,
    ) {
        let a = OrientedBox::new(0.0, 0.0, 2.0, 4.0, t);
        let b = OrientedBox::new(x, y, w, l, u);
        let ab = rotated_iou(&a, &b);
        prop_assert!((ab - rotated_iou(&b, &a)).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
    }

    #[test]
    fn box_frame_round_trip(x in -20.0f64..20.0, y in -20.0f64..20.0, t in -PI..PI, px in -5.0f64..5.0, py in -5.0f64..5.0) {
        let frame = Pose::new(px, py, t * 0.5);
        let b = OrientedBox::new(x, y, 2.0, 4.0, t);
        let local = b.to_frame(&frame);
        let (wx, wy) = frame.to_world((local.cx, local.cy));
        prop_assert!((wx - x).abs() < 1e-9 && (wy - y).abs() < 1e-9);
        prop_assert!((rotated_iou(&b, &OrientedBox::new(wx, wy, 2.0, 4.0, local.yaw + frame.yaw)) - 1.0).abs() < 1e-9);
    }
}
