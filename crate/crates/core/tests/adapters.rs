mod common;

use heatv2x::adapters::{
    ha_adapter_forward, ha_adapter_graph, init_ha_adapter, init_mc_adapter, mc_adapter_forward, mc_adapter_graph,
    select_modality_conv, AdapterSite, ConvKind,
};
use heatv2x::autograd::Graph;
use heatv2x::scene::ModalityKind;
use heatv2x::Tensor;

use common::{module_grad_error, random, randomized};

const KINDS: [ConvKind; 4] = [ConvKind::Conv, ConvKind::SparseConv, ConvKind::DSConv, ConvKind::BEVConv];

fn checker_mask(h: usize, w: usize) -> Tensor {
    Tensor::new(vec![h, w], (0..h * w).map(|i| ((i / w + i % w) % 3 != 0) as u8 as f64).collect())
}

#[test]
fn conv_adapter_has_552_parameters_at_width_32() {
    // down 32*8 + 8, up 8*32 + 32
    let p = init_ha_adapter("ha/0/post", ConvKind::Conv, 32, 4, 0).unwrap();
    assert_eq!(p.numel(), 552);
    assert_eq!(p.trainable_numel(), 552);
    assert_eq!(init_ha_adapter("a", ConvKind::BEVConv, 32, 4, 0).unwrap().numel(), 9 * 32 * 8 + 8 + 288);
}

#[test]
fn kind_follows_modality_and_site() {
    let internal = |m| select_modality_conv(m, AdapterSite::EncoderInternal);
    assert_eq!(internal(ModalityKind::Pillar), ConvKind::Conv);
    assert_eq!(internal(ModalityKind::Voxel), ConvKind::SparseConv);
    assert_eq!(internal(ModalityKind::Depth), ConvKind::DSConv);
    assert_eq!(select_modality_conv(ModalityKind::Depth, AdapterSite::PostEncoder), ConvKind::BEVConv);
}

#[test]
fn up_projection_starts_at_zero_and_init_is_seeded() {
    for kind in KINDS {
        let p = init_ha_adapter("x", kind, 16, 4, 9).unwrap();
        assert!(p.get("x/up/w").unwrap().data.iter().all(|&v| v == 0.0));
        assert_eq!(p.digest(), init_ha_adapter("x", kind, 16, 4, 9).unwrap().digest());
        assert_ne!(p.digest(), init_ha_adapter("x", kind, 16, 4, 10).unwrap().digest());
    }
    let mc = init_mc_adapter("mc/mid", 32, 4, 1).unwrap();
    assert!(mc.get("mc/mid/up/w").unwrap().data.iter().all(|&v| v == 0.0));
}

#[test]
fn fresh_adapters_are_identities() {
    let x = random(&[6, 6, 8], 1);
    let mask = checker_mask(6, 6);
    for kind in KINDS {
        let p = init_ha_adapter("a", kind, 8, 4, 2).unwrap();
        let y = ha_adapter_forward(&x, &p, "a", kind, Some(&mask)).unwrap();
        assert!(y.bitwise_eq(&x), "{kind:?}");
    }
    let p = init_mc_adapter("m", 8, 4, 2).unwrap();
    assert!(mc_adapter_forward(&x, &p, "m").unwrap().bitwise_eq(&x));
}

#[test]
fn sparse_conv_with_full_mask_equals_dense_conv() {
    let x = random(&[6, 6, 8], 3);
    let dense = randomized(&init_ha_adapter("a", ConvKind::Conv, 8, 4, 0).unwrap(), 40);
    let ones = Tensor::ones(&[6, 6]);
    let a = ha_adapter_forward(&x, &dense, "a", ConvKind::Conv, None).unwrap();
    let b = ha_adapter_forward(&x, &dense, "a", ConvKind::SparseConv, Some(&ones)).unwrap();
    assert!(a.data.iter().zip(&b.data).all(|(p, q)| (p - q).abs() < 1e-12));
    // empty cells pass straight through the residual
    let mask = checker_mask(6, 6);
    let c = ha_adapter_forward(&x, &dense, "a", ConvKind::SparseConv, Some(&mask)).unwrap();
    for cell in 0..36 {
        if mask.data[cell] == 0.0 {
            assert_eq!(&c.data[cell * 8..][..8], &x.data[cell * 8..][..8]);
        }
    }
}

#[test]
fn mc_branch_is_spatially_linear_on_constant_input() {
    // layer norm maps a constant map to beta, so fa is constant and each
    // depthwise branch only sees zero padding at the border
    let p = randomized(&init_mc_adapter("m", 16, 4, 0).unwrap(), 7);
    let x = Tensor::full(&[9, 9, 16], 0.3);
    let mut g = Graph::new();
    let xi = g.input("x", x, false);
    let n = mc_adapter_graph(&mut g, &p, "m", xi).unwrap();
    let fa = g.value(n.fa);
    let fb = g.value(n.fb);
    let h = 4;
    for ch in 0..h {
        let v = fa.at(&[0, 0, ch]);
        assert!((0..81).all(|cell| (fa.data[cell * h + ch] - v).abs() < 1e-12));
        // interior cell: every tap lands inside the map
        let mut want = 0.0;
        for k in [3usize, 5, 7] {
            let w = p.get(&format!("m/branch{k}/w")).unwrap();
            let taps: f64 = (0..k * k).map(|t| w.data[t * h + ch]).sum();
            want += taps * v + p.get(&format!("m/branch{k}/b")).unwrap().data[ch];
        }
        assert!((fb.at(&[4, 4, ch]) - want).abs() < 1e-12);
    }
}

fn check_adapter(kind: Option<ConvKind>, shape: &[usize], seed: u64) {
    let c = shape[2];
    let p = match kind {
        Some(k) => randomized(&init_ha_adapter("a", k, c, 4, seed).unwrap(), seed * 100),
        None => randomized(&init_mc_adapter("a", c, 4, seed).unwrap(), seed * 100),
    };
    let mask = checker_mask(shape[0], shape[1]);
    let err = module_grad_error(&p, &random(shape, seed + 1), seed, |g, store, x| match kind {
        Some(k) => {
            let m = (k == ConvKind::SparseConv).then(|| g.constant(mask.clone()));
            ha_adapter_graph(g, store, "a", k, x, m)
        }
        None => mc_adapter_graph(g, store, "a", x).map(|n| n.out),
    });
    assert!(err < 1e-5, "{kind:?} {shape:?}: relative error {err}");
}

#[test]
fn adapter_gradients_match_finite_differences() {
    for (i, kind) in KINDS.into_iter().enumerate() {
        check_adapter(Some(kind), &[6, 6, 8], i as u64 + 1);
        check_adapter(Some(kind), &[8, 8, 16], i as u64 + 11);
    }
    check_adapter(None, &[6, 6, 8], 21);
    check_adapter(None, &[8, 8, 16], 22);
}
