//! Residual bottleneck adapters.
//!
//! The hetero-aware (HA) adapter is `x + Up(ReLU(Down(x)))` where the
//! convolution flavour follows the host encoder's modality. The
//! multi-cognitive (MC) adapter adds layer norm, three depthwise branches
//! (3x3, 5x5, 7x7) averaged and aggregated by a 1x1 conv with an inner
//! skip, and a GeLU before the up-projection. Both start with a zero
//! up-projection, so a fresh adapter is an exact identity.

use rand::Rng;

use crate::autograd::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::param_rng;
use crate::scene::ModalityKind;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvKind {
    /// Dense 1x1 projections.
    Conv,
    /// 1x1 projections evaluated only on occupied cells.
    SparseConv,
    /// Depthwise 3x3 followed by a pointwise projection.
    DSConv,
    /// Dense 3x3 down-projection over the BEV map.
    BEVConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterSite {
    EncoderInternal,
    PostEncoder,
}

pub fn select_modality_conv(modality: ModalityKind, site: AdapterSite) -> ConvKind {
    match (site, modality) {
        (AdapterSite::PostEncoder, _) | (_, ModalityKind::Bev) => ConvKind::BEVConv,
        (AdapterSite::EncoderInternal, ModalityKind::Pillar) => ConvKind::Conv,
        (AdapterSite::EncoderInternal, ModalityKind::Voxel) => ConvKind::SparseConv,
        (AdapterSite::EncoderInternal, ModalityKind::Depth) => ConvKind::DSConv,
    }
}

fn uniform(name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    let mut rng = param_rng(seed, name);
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
}

/// Fresh HA adapter parameters under `prefix`, all marked trainable.
pub fn init_ha_adapter(prefix: &str, kind: ConvKind, channels: usize, ratio: usize, seed: u64) -> Result<ParamStore> {
    if ratio < 2 || channels % ratio != 0 {
        return Err(Error::Attribute(format!("adapter width {channels} not divisible by ratio {ratio}")));
    }
    let hidden = channels / ratio;
    let mut p = ParamStore::new();
    let n = |s: &str| format!("{prefix}/{s}");
    match kind {
        ConvKind::Conv | ConvKind::SparseConv => {
            p.insert(&n("down/w"), uniform(&n("down/w"), &[1, 1, channels, hidden], channels, seed), true)?;
        }
        ConvKind::DSConv => {
            p.insert(&n("down/dw"), uniform(&n("down/dw"), &[3, 3, channels], 9, seed), true)?;
            p.insert(&n("down/dw_b"), Tensor::zeros(&[channels]), true)?;
            p.insert(&n("down/w"), uniform(&n("down/w"), &[1, 1, channels, hidden], channels, seed), true)?;
        }
        ConvKind::BEVConv => {
            p.insert(&n("down/w"), uniform(&n("down/w"), &[3, 3, channels, hidden], 9 * channels, seed), true)?;
        }
    }
    p.insert(&n("down/b"), Tensor::zeros(&[hidden]), true)?;
    p.insert(&n("up/w"), Tensor::zeros(&[1, 1, hidden, channels]), true)?;
    p.insert(&n("up/b"), Tensor::zeros(&[channels]), true)?;
    Ok(p)
}

/// Records an HA adapter on `x`. `mask` is the `[H, W]` occupancy used by
/// the sparse kind.
pub fn ha_adapter_graph(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    kind: ConvKind,
    x: NodeId,
    mask: Option<NodeId>,
) -> Result<NodeId> {
    let p = |g: &mut Graph, s: &str| g.param(store, &format!("{prefix}/{s}"));
    let (dw, db) = (p(g, "down/w")?, p(g, "down/b")?);
    let (uw, ub) = (p(g, "up/w")?, p(g, "up/b")?);
    let branch = match kind {
        ConvKind::Conv | ConvKind::BEVConv => {
            let h = g.conv2d(x, dw, db, 1)?;
            let a = g.relu(h)?;
            g.conv2d(a, uw, ub, 1)?
        }
        ConvKind::SparseConv => {
            let m = mask.ok_or_else(|| Error::Precondition("sparse adapter needs an occupancy mask".into()))?;
            let h = g.sparse_conv(x, dw, db, m)?;
            let a = g.relu(h)?;
            g.sparse_conv(a, uw, ub, m)?
        }
        ConvKind::DSConv => {
            let (kw, kb) = (p(g, "down/dw")?, p(g, "down/dw_b")?);
            let d = g.depthwise(x, kw, kb)?;
            let h = g.conv2d(d, dw, db, 1)?;
            let a = g.relu(h)?;
            g.conv2d(a, uw, ub, 1)?
        }
    };
    g.add(x, branch)
}

/// Value-level HA adapter.
pub fn ha_adapter_forward(x: &Tensor, store: &ParamStore, prefix: &str, kind: ConvKind, mask: Option<&Tensor>) -> Result<Tensor> {
    let mut g = Graph::new();
    let xi = g.input("x", x.clone(), false);
    let m = mask.map(|m| g.constant(m.clone()));
    let y = ha_adapter_graph(&mut g, store, prefix, kind, xi, m)?;
    Ok(g.value(y).clone())
}

pub const MC_KERNELS: [usize; 3] = [3, 5, 7];

/// Fresh MC adapter parameters under `prefix`, all marked trainable.
pub fn init_mc_adapter(prefix: &str, channels: usize, ratio: usize, seed: u64) -> Result<ParamStore> {
    if ratio < 2 || channels % ratio != 0 {
        return Err(Error::Attribute(format!("adapter width {channels} not divisible by ratio {ratio}")));
    }
    let hidden = channels / ratio;
    let mut p = ParamStore::new();
    let n = |s: &str| format!("{prefix}/{s}");
    p.insert(&n("ln/gamma"), Tensor::ones(&[channels]), true)?;
    p.insert(&n("ln/beta"), Tensor::zeros(&[channels]), true)?;
    p.insert(&n("down/w"), uniform(&n("down/w"), &[1, 1, channels, hidden], channels, seed), true)?;
    p.insert(&n("down/b"), Tensor::zeros(&[hidden]), true)?;
    for k in MC_KERNELS {
        let name = n(&format!("branch{k}/w"));
        p.insert(&name, uniform(&name, &[k, k, hidden], k * k, seed), true)?;
        p.insert(&n(&format!("branch{k}/b")), Tensor::zeros(&[hidden]), true)?;
    }
    p.insert(&n("agg/w"), uniform(&n("agg/w"), &[1, 1, hidden, hidden], hidden, seed), true)?;
    p.insert(&n("agg/b"), Tensor::zeros(&[hidden]), true)?;
    p.insert(&n("up/w"), Tensor::zeros(&[1, 1, hidden, channels]), true)?;
    p.insert(&n("up/b"), Tensor::zeros(&[channels]), true)?;
    Ok(p)
}

/// Intermediate nodes of one MC adapter pass.
#[derive(Clone, Copy, Debug)]
pub struct McNodes {
    pub fa: NodeId,
    pub fb: NodeId,
    pub fc: NodeId,
    pub out: NodeId,
}

pub fn mc_adapter_graph(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<McNodes> {
    let p = |g: &mut Graph, s: &str| g.param(store, &format!("{prefix}/{s}"));
    if g.shape(x).len() != 3 {
        return Err(Error::Shape {
            node: x,
            msg: format!("MC adapter expects [H, W, C], got {:?}", g.shape(x)),
        });
    }
    let (gamma, beta) = (p(g, "ln/gamma")?, p(g, "ln/beta")?);
    let normed = g.layer_norm(x, gamma, beta)?;
    let (dw, db) = (p(g, "down/w")?, p(g, "down/b")?);
    let fa = g.conv2d(normed, dw, db, 1)?;
    let mut fb = None;
    for k in MC_KERNELS {
        let (w, b) = (p(g, &format!("branch{k}/w"))?, p(g, &format!("branch{k}/b"))?);
        let y = g.depthwise(fa, w, b)?;
        fb = Some(match fb {
            None => y,
            Some(acc) => g.add(acc, y)?,
        });
    }
    let fb = fb.expect("three branches");
    let avg = g.scale(fb, 1.0 / MC_KERNELS.len() as f64)?;
    let (aw, ab) = (p(g, "agg/w")?, p(g, "agg/b")?);
    let agg = g.conv2d(avg, aw, ab, 1)?;
    let fc = g.add(agg, fa)?;
    let act = g.gelu(fc)?;
    let (uw, ub) = (p(g, "up/w")?, p(g, "up/b")?);
    let up = g.conv2d(act, uw, ub, 1)?;
    let out = g.add(x, up)?;
    Ok(McNodes { fa, fb, fc, out })
}

pub fn mc_adapter_forward(x: &Tensor, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let mut g = Graph::new();
    let xi = g.input("x", x.clone(), false);
    let n = mc_adapter_graph(&mut g, store, prefix, xi)?;
    Ok(g.value(n.out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispatch_table() {
        use AdapterSite::*;
        assert_eq!(select_modality_conv(ModalityKind::Pillar, EncoderInternal), ConvKind::Conv);
        assert_eq!(select_modality_conv(ModalityKind::Voxel, EncoderInternal), ConvKind::SparseConv);
        assert_eq!(select_modality_conv(ModalityKind::Depth, EncoderInternal), ConvKind::DSConv);
        assert_eq!(select_modality_conv(ModalityKind::Bev, EncoderInternal), ConvKind::BEVConv);
        for m in [ModalityKind::Pillar, ModalityKind::Voxel, ModalityKind::Depth, ModalityKind::Bev] {
            assert_eq!(select_modality_conv(m, PostEncoder), ConvKind::BEVConv);
        }
    }

    #[test]
    fn ratio_must_divide_width() {
        assert!(init_ha_adapter("ha", ConvKind::Conv, 30, 4, 0).is_err());
        assert!(init_mc_adapter("mc", 32, 1, 0).is_err());
    }
}
