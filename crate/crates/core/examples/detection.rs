//! Target encoding, decoding with NMS, and average precision on hand-made
//! boxes.

use heatv2x::detection::{build_targets, decode_cell, encode_box, evaluate_ap, DIR_BINS};
use heatv2x::geometry::{rotated_iou, OrientedBox};

fn main() {
    let (range, grid) = (51.2, 24);
    let gt = vec![
        OrientedBox::new(3.1, -7.4, 1.9, 4.5, 0.4),
        OrientedBox::new(-12.0, 20.2, 2.0, 4.8, -2.6),
        OrientedBox::new(30.5, 8.8, 1.8, 4.2, 1.57),
    ];
    let t = build_targets(&gt, range, grid);
    println!("{} positive cells of {}", t.owner.iter().flatten().count(), grid * grid);
    for b in &gt {
        let (row, col) = heatv2x::scene::cell_index((b.cx, b.cy), range, grid).expect("inside the grid");
        let reg = encode_box(b, row, col, range, grid);
        let mut dir = [0.0; DIR_BINS];
        dir[heatv2x::detection::direction_bin(b.yaw)] = 1.0;
        let back = decode_cell(&reg, &dir, row, col, range, grid);
        println!("  cell ({row:2}, {col:2}) round trip IoU {:.6}, yaw {:+.3} -> {:+.3}", rotated_iou(b, &back), b.yaw, back.yaw);
    }
    // one hit, one near miss, one duplicate
    let preds = vec![
        gt[0].with_score(0.9),
        OrientedBox::new(-12.6, 20.9, 2.0, 4.8, -2.4).with_score(0.8),
        gt[0].with_score(0.7),
    ];
    for thr in [0.5, 0.7] {
        println!("AP@{thr}: {:.4}", evaluate_ap(&preds, &gt, thr));
    }
}
