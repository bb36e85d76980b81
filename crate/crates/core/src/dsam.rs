//! Deeply supervised attention module.
//!
//! Each backbone level gets one: the level's features are averaged over time,
//! a 3×3 convolution (+ReLU) yields saliency features `S`, and a 1×1
//! convolution yields a single-channel activation map `A`. The spatial softmax
//! of `A` at native resolution is the attention map `M` that reweights the
//! backbone features as `(1 + M) ⊙ X`. `S` and `A` are upsampled to image size
//! for the saliency head and for deep supervision.

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;

/// Graph handles of one level's attention-module parameters.
#[derive(Debug, Clone, Copy)]
pub struct DsamParams {
    /// `[Cs, C, 3, 3]`
    pub feat_w: NodeId,
    /// `[Cs]`
    pub feat_b: NodeId,
    /// `[1, Cs, 1, 1]`
    pub act_w: NodeId,
    /// `[1]`
    pub act_b: NodeId,
    pub level: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DsamOutput {
    /// Saliency features at native resolution, `[Cs, h, w]`.
    pub s: NodeId,
    /// Activation map at native resolution, `[h, w]`.
    pub a: NodeId,
    /// Attention map, `[h, w]`, sums to one.
    pub m: NodeId,
    /// `[Cs, H0, W0]`, present when upsampling was requested.
    pub s_up: Option<NodeId>,
    /// `[H0, W0]`, present when upsampling was requested.
    pub a_up: Option<NodeId>,
}

/// Runs the attention module on `x [C,T,h,w]`. With `target = None` the
/// supervision branch is skipped and only `S`, `A` and `M` are produced.
pub fn dsam_forward(
    g: &mut Graph,
    x: NodeId,
    p: &DsamParams,
    target: Option<(usize, usize)>,
) -> Result<DsamOutput> {
    let pooled = g.temporal_avg_pool(x)?;
    let feat = g.conv2d_spatial(pooled, p.feat_w, [1, 1], [1, 1])?;
    let feat = g.bias_add(feat, p.feat_b)?;
    let s = g.relu(feat)?;
    let act = g.conv2d_spatial(s, p.act_w, [1, 1], [0, 0])?;
    let act = g.bias_add(act, p.act_b)?;
    let shape = g.value(act).shape().to_vec();
    let a = g.reshape(act, &shape[1..])?;
    let m = g.spatial_softmax(a)?;

    let (s_up, a_up) = match target {
        Some(size) => {
            let s_up = g.upsample_spatial(s, size)?;
            let a_up = g.upsample_spatial(act, size)?;
            let a_up = g.reshape(a_up, &[size.0, size.1])?;
            (Some(s_up), Some(a_up))
        }
        None => (None, None),
    };
    Ok(DsamOutput { s, a, m, s_up, a_up })
}

/// `(1 + M) ⊙ X`, with `M` broadcast over channels and time.
pub fn apply_attention(g: &mut Graph, x: NodeId, m: NodeId) -> Result<NodeId> {
    g.apply_attention(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(g: &mut Graph, rng: &mut ChaCha8Rng, c: usize, cs: usize) -> DsamParams {
        let mut rnd = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-0.5..0.5));
        DsamParams {
            feat_w: g.param(rnd(&[cs, c, 3, 3])),
            feat_b: g.param(rnd(&[cs])),
            act_w: g.param(rnd(&[1, cs, 1, 1])),
            act_b: g.param(Tensor::zeros(&[1])),
            level: 1,
        }
    }

    #[test]
    fn zero_input_gives_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let p = params(&mut g, &mut rng, 3, 4);
        let x = g.constant(Tensor::zeros(&[3, 2, 4, 5]));
        let out = dsam_forward(&mut g, x, &p, Some((8, 10))).unwrap();
        let m = g.value(out.m);
        assert!(m.data().iter().all(|&v| (v - 1.0 / 20.0).abs() < 1e-15));
    }

    #[test]
    fn attention_sums_to_one_and_shapes_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let p = params(&mut g, &mut rng, 3, 4);
        let x = g.constant(Tensor::from_fn(&[3, 3, 4, 4], |_| rng.random_range(-1.0..1.0)));
        let out = dsam_forward(&mut g, x, &p, Some((9, 7))).unwrap();
        assert!((g.value(out.m).sum() - 1.0).abs() < 1e-12);
        assert!(g.value(out.m).data().iter().all(|&v| v >= 0.0));
        assert_eq!(g.value(out.s_up.unwrap()).shape(), &[4, 9, 7]);
        assert_eq!(g.value(out.a_up.unwrap()).shape(), &[9, 7]);

        let none = dsam_forward(&mut g, x, &p, None).unwrap();
        assert!(none.s_up.is_none() && none.a_up.is_none());
    }

    #[test]
    fn apply_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = Tensor::from_fn(&[2, 3, 2, 2], |_| rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let x = g.constant(xv.clone());
        let zero = g.constant(Tensor::zeros(&[2, 2]));
        let y = apply_attention(&mut g, x, zero).unwrap();
        assert_eq!(g.value(y), &xv);

        let uniform = g.constant(Tensor::full(&[2, 2], 0.25));
        let y = apply_attention(&mut g, x, uniform).unwrap();
        for (a, b) in g.value(y).data().iter().zip(xv.data()) {
            assert_eq!(*a, 1.25 * b);
        }

        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(apply_attention(&mut g, x, bad).is_err());
    }
}
