use heatv2x::autograd::{Graph, OpKind};
use heatv2x::detection::{
    build_targets, decode_detections, encode_box, evaluate_ap, evaluate_ap_pooled, head_forward, init_head,
    total_loss, DepthTarget, DetectionMap, FocalParams, LossWeights, DIR_BINS, REG_DIMS,
};
use heatv2x::geometry::OrientedBox;
use heatv2x::Tensor;
use proptest::prelude::*;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// 4x4 map over [-8, 8] with every cell far below threshold.
fn empty_map() -> DetectionMap {
    DetectionMap {
        obj: Tensor::full(&[4, 4, 1], -30.0),
        reg: Tensor::zeros(&[4, 4, REG_DIMS]),
        dir: Tensor::zeros(&[4, 4, DIR_BINS]),
    }
}

fn place(map: &mut DetectionMap, b: &OrientedBox, row: usize, col: usize, score: f64) {
    let cell = row * 4 + col;
    map.obj.data[cell] = logit(score);
    map.reg.data[cell * REG_DIMS..][..REG_DIMS].copy_from_slice(&encode_box(b, row, col, 8.0, 4));
    let front = b.yaw.cos() >= 0.0;
    map.dir.data[cell * DIR_BINS..][..DIR_BINS].copy_from_slice(if front { &[1.0, -1.0] } else { &[-1.0, 1.0] });
}

#[test]
fn focal_loss_matches_hand_values() {
    let (p_pos, p_neg) = (0.7, 0.2);
    let (alpha, gamma) = (0.25, 2.0);
    let mut g = Graph::new();
    let z = g.input("z", Tensor::new(vec![2, 1, 1], vec![logit(p_pos), logit(p_neg)]), false);
    let y = g.constant(Tensor::new(vec![2, 1, 1], vec![1.0, 0.0]));
    let l = g.apply(OpKind::FocalLoss { alpha, gamma }, &[z, y]).unwrap();
    let pos = -alpha * (1.0 - p_pos).powf(gamma) * p_pos.ln();
    let neg = -(1.0 - alpha) * p_neg.powf(gamma) * (1.0 - p_neg).ln();
    // one positive, so the normalizer is 1
    assert!((g.value(l).item() - (pos + neg)).abs() < 1e-9);
}

#[test]
fn all_zero_loss_weights_are_rejected() {
    let w = LossWeights {
        cls: 0.0,
        reg: 0.0,
        dir: 0.0,
        depth: 0.0,
    };
    assert!(w.validate().is_err());
    let neg = LossWeights {
        reg: -1.0,
        ..LossWeights::default()
    };
    assert!(neg.validate().is_err());
}

#[test]
fn head_shapes_follow_the_map() {
    let head = init_head(32, 0).unwrap();
    let m = head_forward(&Tensor::zeros(&[24, 24, 32]), &head).unwrap();
    assert_eq!(m.obj.shape, vec![24, 24, 1]);
    assert_eq!(m.reg.shape, vec![24, 24, REG_DIMS]);
    assert_eq!(m.dir.shape, vec![24, 24, DIR_BINS]);
    // the objectness bias starts at the 1% prior
    assert!((m.obj.data[0] - logit(0.01)).abs() < 1e-12);
}

#[test]
fn decoding_inverts_the_target_encoding() {
    for yaw in [0.3, 2.5, -2.9, -0.8] {
        let b = OrientedBox::new(-1.3, 2.6, 1.8, 4.4, yaw);
        let mut m = empty_map();
        place(&mut m, &b, 2, 1, 0.8);
        let out = decode_detections(&m, 0.05, 0.1, 8.0).unwrap();
        assert_eq!(out.len(), 1);
        let d = out[0];
        for (x, y) in [(d.cx, b.cx), (d.cy, b.cy), (d.w, b.w), (d.l, b.l), (d.yaw, b.yaw), (d.score, 0.8)] {
            assert!((x - y).abs() < 1e-9, "{d:?} vs {b:?}");
        }
    }
}

#[test]
fn very_low_logits_decode_to_nothing() {
    let mut m = empty_map();
    m.obj = Tensor::full(&[4, 4, 1], -20.0);
    assert!(decode_detections(&m, 0.05, 0.1, 8.0).unwrap().is_empty());
    assert!(decode_detections(&m, 1.5, 0.1, 8.0).is_err());
}

#[test]
fn nms_keeps_the_higher_score() {
    let a = OrientedBox::new(-1.0, -1.0, 2.0, 4.0, 0.0);
    let b = OrientedBox::new(1.0, -1.0, 2.0, 4.0, 0.0); // IoU 1/3 with a
    let mut m = empty_map();
    place(&mut m, &a, 1, 1, 0.9);
    place(&mut m, &b, 1, 2, 0.8);
    let out = decode_detections(&m, 0.05, 0.15, 8.0).unwrap();
    assert_eq!(out.len(), 1);
    assert!((out[0].score - 0.9).abs() < 1e-12);
    // under a looser NMS both survive, best first
    let both = decode_detections(&m, 0.05, 0.5, 8.0).unwrap();
    assert_eq!(both.len(), 2);
    assert!(both[0].score > both[1].score);
}

fn shifted(b: &OrientedBox, dx: f64, score: f64) -> OrientedBox {
    OrientedBox::new(b.cx + dx, b.cy, b.w, b.l, b.yaw).with_score(score)
}

#[test]
fn ap_follows_the_precision_staircase() {
    let gts = vec![OrientedBox::new(0.0, 0.0, 2.0, 4.0, 0.0), OrientedBox::new(20.0, 0.0, 2.0, 4.0, 0.0)];
    let preds = vec![
        shifted(&gts[0], 0.0, 0.9),
        OrientedBox::new(-20.0, 5.0, 2.0, 4.0, 0.0).with_score(0.8),
        shifted(&gts[1], 0.0, 0.7),
    ];
    // TP, FP, TP: 0.5 * 1 + 0.5 * 2/3
    assert!((evaluate_ap(&preds, &gts, 0.5) - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    // a duplicate of a matched box is a false positive
    let dup = vec![shifted(&gts[0], 0.0, 0.9), shifted(&gts[0], 0.0, 0.8)];
    assert!((evaluate_ap(&dup, &gts, 0.5) - 0.5).abs() < 1e-12);
    assert_eq!(evaluate_ap(&[], &gts, 0.5), 0.0);
    assert_eq!(evaluate_ap(&[], &[], 0.5), 1.0);
}

#[test]
fn breakdown_recombines_to_the_total() {
    let head = init_head(8, 3).unwrap();
    let h = Tensor::new(vec![6, 6, 8], (0..288).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.5).collect());
    let pred = head_forward(&h, &head).unwrap();
    let gt = vec![OrientedBox::new(1.0, 2.0, 2.0, 4.5, 0.4), OrientedBox::new(-5.0, -3.0, 2.2, 5.0, 2.8)];
    let logits = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect());
    let class = Tensor::new(vec![3], vec![0.0, 3.0, 1.0]);
    let weight = Tensor::new(vec![3], vec![1.0, 1.0, 0.0]);
    let w = LossWeights::default();
    let fp = FocalParams::default();
    let depth = DepthTarget {
        logits: &logits,
        class: &class,
        weight: &weight,
    };
    let b = total_loss(&pred, &gt, &w, &fp, Some(depth), 8.0).unwrap();
    assert!(b.depth > 0.0 && b.regression > 0.0 && b.direction > 0.0);
    assert!((b.recombine(&w) - b.total).abs() < 1e-12);

    let only_cls = LossWeights {
        cls: 1.0,
        reg: 0.0,
        dir: 0.0,
        depth: 0.0,
    };
    let c = total_loss(&pred, &gt, &only_cls, &fp, None, 8.0).unwrap();
    assert_eq!(c.total, c.classification);
    assert_eq!(c.classification, b.classification);
}

#[test]
fn each_box_claims_the_cell_holding_its_center() {
    let gt = vec![
        OrientedBox::new(-7.0, -7.0, 1.0, 2.0, 0.0),
        OrientedBox::new(-6.5, -6.5, 1.0, 2.0, 0.0),
        OrientedBox::new(5.0, 1.0, 1.0, 2.0, 3.0),
        OrientedBox::new(50.0, 0.0, 1.0, 2.0, 0.0),
    ];
    let t = build_targets(&gt, 8.0, 4);
    assert_eq!(t.weight.sum(), 2.0);
    assert_eq!(t.owner[0], Some(0));
    assert_eq!(t.owner[2 * 4 + 3], Some(2));
    assert_eq!(t.dir.data[2 * 4 + 3], 1.0);
}

fn boxes() -> impl Strategy<Value = Vec<(f64, f64, f64, f64)>> {
    prop::collection::vec((-40.0f64..40.0, -40.0f64..40.0, -3.0f64..3.0, 0.01f64..1.0), 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ap_is_bounded_and_monotone_in_threshold(
        g in boxes(),
        jitter in prop::collection::vec((-1.5f64..1.5, -1.5f64..1.5, 0.01f64..1.0), 12),
        scale in 0.01f64..1.0,
    ) {
        let gts: Vec<OrientedBox> = g.iter().map(|&(x, y, yaw, _)| OrientedBox::new(x, y, 2.0, 4.5, yaw)).collect();
        let preds: Vec<OrientedBox> = gts
            .iter()
            .zip(&jitter)
            .map(|(b, &(dx, dy, s))| OrientedBox::new(b.cx + dx, b.cy + dy, b.w, b.l, b.yaw).with_score(s))
            .collect();
        let a50 = evaluate_ap(&preds, &gts, 0.5);
        let a70 = evaluate_ap(&preds, &gts, 0.7);
        prop_assert!((0.0..=1.0).contains(&a50) && (0.0..=1.0).contains(&a70));
        prop_assert!(a70 <= a50 + 1e-12);
        // only the ranking matters
        let scaled: Vec<OrientedBox> = preds.iter().map(|b| b.with_score(b.score * scale)).collect();
        prop_assert_eq!(evaluate_ap(&scaled, &gts, 0.5), a50);
        // pooling one scene is the scene itself
        prop_assert_eq!(evaluate_ap_pooled(&[(preds.clone(), gts.clone())], 0.5), a50);
    }
}
