//! Co-attention, spatial attention and channel self-attention.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Axis, ConvGeometry, PoolMode, Shape};

/// 1×1 convolution applied to the transferred feature inside [`corr`].
#[derive(Clone, Copy, Debug)]
pub struct CorrParams<'t> {
    pub kernel: Var<'t>,
    pub bias: Option<Var<'t>>,
}

/// 7×7 convolution over the pooled `[avg, max]` channel maps.
#[derive(Clone, Copy, Debug)]
pub struct SpatialAttentionParams<'t> {
    pub kernel: Var<'t>,
    pub bias: Option<Var<'t>>,
}

/// Residual gain of the channel self-attention, a scalar.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttentionParams<'t> {
    pub gamma: Var<'t>,
}

pub const SPATIAL_KERNEL: usize = 7;

fn flatten(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    x.reshape(Shape::new(s.n, 1, s.c, s.plane()))
}

/// Co-attention of `q` guided by `p`, returning `(output, affinity)`.
///
/// The affinity is `softmax_columns(P̂ᵀQ̂ / √c)` of shape `(n, 1, hw, hw)`:
/// entry `(i, j)` weighs position `i` of `p` for position `j` of `q`, and
/// every column sums to one. The transferred feature `P̂ · affinity` is
/// passed through the 1×1 convolution and added to `q`.
pub fn corr_with_affinity<'t>(
    p: Var<'t>,
    q: Var<'t>,
    params: &CorrParams<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let s = p.shape();
    if s != q.shape() {
        return Err(Error::ShapeMismatch {
            op: "corr",
            left: s,
            right: q.shape(),
        });
    }
    let pf = flatten(p)?;
    let qf = flatten(q)?;
    let affinity = pf
        .transpose()
        .matmul(qf)?
        .scale(1.0 / (s.c as f64).sqrt())
        .softmax(Axis::Height);
    let transferred = pf.matmul(affinity)?.reshape(s)?;
    let out = transferred
        .conv2d(params.kernel, params.bias, ConvGeometry::pointwise())?
        .add(q)?;
    Ok((out, affinity))
}

pub fn corr<'t>(p: Var<'t>, q: Var<'t>, params: &CorrParams<'t>) -> Result<Var<'t>> {
    corr_with_affinity(p, q, params).map(|(out, _)| out)
}

/// Single-channel attention map in (0, 1): sigmoid of a 7×7 convolution over
/// the channel-average and channel-max maps.
pub fn spatial_attention<'t>(x: Var<'t>, params: &SpatialAttentionParams<'t>) -> Result<Var<'t>> {
    let avg = x.pool(PoolMode::ChannelAvg)?;
    let max = x.pool(PoolMode::ChannelMax)?;
    let pooled = x.tape().concat_channels(&[avg, max])?;
    Ok(pooled
        .conv2d(params.kernel, params.bias, ConvGeometry::same(SPATIAL_KERNEL, 1))?
        .sigmoid())
}

/// Channel self-attention with a residual gain.
///
/// The `c×c` energy `X·Xᵀ` is replaced entrywise by `rowmax − energy` before
/// the row softmax, and the attended features are scaled by `gamma` and added
/// back onto the input.
pub fn channel_self_attention<'t>(x: Var<'t>, params: &ChannelAttentionParams<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let xf = flatten(x)?;
    let attention = xf
        .matmul(xf.transpose())?
        .max_minus(Axis::Width)
        .softmax(Axis::Width);
    attention
        .matmul(xf)?
        .reshape(s)?
        .scale_by(params.gamma)?
        .add(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{all_coordinates, grad_check, Tape};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(23)
    }

    fn identity_1x1(c: usize) -> Tensor {
        let mut k = Tensor::zeros(Shape::new(c, c, 1, 1));
        for i in 0..c {
            k.set(i, i, 0, 0, 1.0);
        }
        k
    }

    /// Loop-based co-attention oracle with an identity output convolution.
    fn corr_oracle(p: &Tensor, q: &Tensor) -> Tensor {
        let s = p.shape();
        let hw = s.plane();
        let mut out = q.clone();
        for n in 0..s.n {
            let pv = |c: usize, i: usize| p.data()[(n * s.c + c) * hw + i];
            let qv = |c: usize, i: usize| q.data()[(n * s.c + c) * hw + i];
            for j in 0..hw {
                let logits: Vec<f64> = (0..hw)
                    .map(|i| (0..s.c).map(|c| pv(c, i) * qv(c, j)).sum::<f64>() / (s.c as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for c in 0..s.c {
                    let t: f64 = (0..hw).map(|i| pv(c, i) * (logits[i] - m).exp() / z).sum();
                    out.data_mut()[(n * s.c + c) * hw + j] += t;
                }
            }
        }
        out
    }

    /// Loop-based channel self-attention oracle.
    fn csa_oracle(x: &Tensor, gamma: f64) -> Tensor {
        let s = x.shape();
        let hw = s.plane();
        let mut out = x.clone();
        for n in 0..s.n {
            let xv = |c: usize, i: usize| x.data()[(n * s.c + c) * hw + i];
            for a in 0..s.c {
                let energy: Vec<f64> = (0..s.c)
                    .map(|b| (0..hw).map(|i| xv(a, i) * xv(b, i)).sum())
                    .collect();
                let rowmax = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let shifted: Vec<f64> = energy.iter().map(|e| rowmax - e).collect();
                let m = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = shifted.iter().map(|v| (v - m).exp()).sum();
                for i in 0..hw {
                    let attended: f64 = (0..s.c).map(|b| (shifted[b] - m).exp() / z * xv(b, i)).sum();
                    out.data_mut()[(n * s.c + a) * hw + i] += gamma * attended;
                }
            }
        }
        out
    }

    #[test]
    fn corr_matches_loop_oracle() {
        let mut r = rng();
        let p = Tensor::random_uniform(Shape::new(1, 2, 2, 2), -1.0, 1.0, &mut r);
        let q = Tensor::random_uniform(Shape::new(1, 2, 2, 2), -1.0, 1.0, &mut r);
        let tape = Tape::new();
        let params = CorrParams {
            kernel: tape.leaf(identity_1x1(2)),
            bias: None,
        };
        let out = corr(tape.leaf(p.clone()), tape.leaf(q.clone()), &params).unwrap();
        assert!(out.value().max_abs_diff(&corr_oracle(&p, &q)) < 1e-10);
    }

    #[test]
    fn corr_single_position_is_conv_of_p_plus_q() {
        let mut r = rng();
        let p = Tensor::random_uniform(Shape::new(2, 3, 1, 1), -1.0, 1.0, &mut r);
        let q = Tensor::random_uniform(Shape::new(2, 3, 1, 1), -1.0, 1.0, &mut r);
        let k = Tensor::random_uniform(Shape::new(3, 3, 1, 1), -1.0, 1.0, &mut r);
        let tape = Tape::new();
        let params = CorrParams {
            kernel: tape.leaf(k.clone()),
            bias: None,
        };
        let (out, aff) = corr_with_affinity(tape.leaf(p.clone()), tape.leaf(q.clone()), &params).unwrap();
        assert_eq!(aff.value().data(), &[1.0, 1.0]);
        let conv = crate::tensor::conv2d_with(&p, &k, None, ConvGeometry::pointwise()).unwrap();
        let want = crate::tensor::binary_ew(&conv, &q, crate::tensor::BinaryOp::Add).unwrap();
        assert!(out.value().max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn corr_uniform_guide_transfers_uniform_feature() {
        let mut r = rng();
        let v = [0.3, -1.2, 0.8];
        let mut p = Tensor::zeros(Shape::new(1, 3, 2, 3));
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..3 {
                    p.set(0, c, y, x, v[c]);
                }
            }
        }
        let q = Tensor::random_uniform(p.shape(), -1.0, 1.0, &mut r);
        let k = Tensor::random_uniform(Shape::new(3, 3, 1, 1), -1.0, 1.0, &mut r);
        let tape = Tape::new();
        let params = CorrParams {
            kernel: tape.leaf(k.clone()),
            bias: None,
        };
        let out = corr(tape.leaf(p.clone()), tape.leaf(q.clone()), &params).unwrap();
        // T equals v at every position, so out - q equals conv(v) everywhere.
        for c in 0..3 {
            let conv_v: f64 = (0..3).map(|ci| k.at(c, ci, 0, 0) * v[ci]).sum();
            for y in 0..2 {
                for x in 0..3 {
                    let d = out.value().at(0, c, y, x) - q.at(0, c, y, x);
                    assert!((d - conv_v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn corr_affinity_columns_are_normalised() {
        let mut r = rng();
        let s = Shape::new(2, 4, 3, 2);
        let tape = Tape::new();
        let params = CorrParams {
            kernel: tape.leaf(identity_1x1(4)),
            bias: None,
        };
        let p = tape.leaf(Tensor::random_uniform(s, -2.0, 2.0, &mut r));
        let q = tape.leaf(Tensor::random_uniform(s, -2.0, 2.0, &mut r));
        let (out, aff) = corr_with_affinity(p, q, &params).unwrap();
        assert_eq!(out.shape(), s);
        let a = aff.value();
        for n in 0..2 {
            for j in 0..6 {
                let col: f64 = (0..6).map(|i| a.at(n, 0, i, j)).sum();
                assert!((col - 1.0).abs() < 1e-9);
            }
        }
        assert!(corr(p, tape.leaf(Tensor::zeros(Shape::new(2, 4, 2, 3))), &params).is_err());
    }

    #[test]
    fn spatial_attention_of_zeros_is_half() {
        let tape = Tape::new();
        let params = SpatialAttentionParams {
            kernel: tape.leaf(Tensor::random_uniform(Shape::new(1, 2, 7, 7), -1.0, 1.0, &mut rng())),
            bias: Some(tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)))),
        };
        let map = spatial_attention(tape.leaf(Tensor::zeros(Shape::new(2, 5, 4, 3))), &params).unwrap();
        assert_eq!(map.shape(), Shape::new(2, 1, 4, 3));
        assert!(map.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn spatial_attention_peaks_at_blob_centre() {
        let mut x = Tensor::zeros(Shape::new(1, 3, 9, 9));
        for c in 0..3 {
            for y in 3..6 {
                for xx in 4..7 {
                    x.set(0, c, y, xx, 1.0);
                }
            }
        }
        let tape = Tape::new();
        let params = SpatialAttentionParams {
            // Averaging over the central 3×3 taps only: a 7×7 box would plateau.
            kernel: tape.leaf(Tensor::full(Shape::new(1, 2, 7, 7), 0.0).map_indexed(|i, _| {
                let (ky, kx) = ((i % 49) / 7, i % 7);
                if (2..5).contains(&ky) && (2..5).contains(&kx) {
                    1.0 / 18.0
                } else {
                    0.0
                }
            })),
            bias: None,
        };
        let map = spatial_attention(tape.leaf(x), &params).unwrap().value();
        let (mut best, mut arg) = (f64::MIN, (0, 0));
        for y in 0..9 {
            for xx in 0..9 {
                if map.at(0, 0, y, xx) > best {
                    best = map.at(0, 0, y, xx);
                    arg = (y, xx);
                }
            }
        }
        assert_eq!(arg, (4, 5));
        assert!(map.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn spatial_attention_ignores_channel_order() {
        let mut r = rng();
        let x = Tensor::random_uniform(Shape::new(1, 3, 4, 4), -1.0, 1.0, &mut r);
        let perm = crate::tensor::concat_channels(&[
            &crate::tensor::slice_channels(&x, 2, 1).unwrap(),
            &crate::tensor::slice_channels(&x, 0, 2).unwrap(),
        ])
        .unwrap();
        let k = Tensor::random_uniform(Shape::new(1, 2, 7, 7), -1.0, 1.0, &mut r);
        let run = |t: &Tensor| {
            let tape = Tape::new();
            let params = SpatialAttentionParams {
                kernel: tape.leaf(k.clone()),
                bias: None,
            };
            let v = spatial_attention(tape.leaf(t.clone()), &params).unwrap().value();
            (*v).clone()
        };
        assert!(run(&x).max_abs_diff(&run(&perm)) < 1e-14);
    }

    #[test]
    fn csa_zero_gain_is_identity() {
        let x = Tensor::random_uniform(Shape::new(2, 3, 2, 2), -1.0, 1.0, &mut rng());
        let tape = Tape::new();
        let params = ChannelAttentionParams {
            gamma: tape.leaf(Tensor::scalar(0.0)),
        };
        let out = channel_self_attention(tape.leaf(x.clone()), &params).unwrap();
        assert_eq!(out.value().data(), x.data());
    }

    #[test]
    fn csa_single_channel_scales_input() {
        let x = Tensor::random_uniform(Shape::new(1, 1, 3, 2), -1.0, 1.0, &mut rng());
        let tape = Tape::new();
        let params = ChannelAttentionParams {
            gamma: tape.leaf(Tensor::scalar(0.5)),
        };
        let out = channel_self_attention(tape.leaf(x.clone()), &params).unwrap();
        assert!(out.value().max_abs_diff(&x.scale(1.5)) < 1e-15);
    }

    #[test]
    fn csa_matches_loop_oracle() {
        let x = Tensor::random_uniform(Shape::new(1, 3, 2, 2), -1.0, 1.0, &mut rng());
        let tape = Tape::new();
        let params = ChannelAttentionParams {
            gamma: tape.leaf(Tensor::scalar(1.0)),
        };
        let out = channel_self_attention(tape.leaf(x.clone()), &params).unwrap();
        assert!(out.value().max_abs_diff(&csa_oracle(&x, 1.0)) < 1e-10);
    }

    #[test]
    fn attention_gradients_match_central_differences() {
        let mut r = rng();
        let s = Shape::new(1, 3, 2, 3);
        let params = vec![
            Tensor::random_uniform(s, -1.0, 1.0, &mut r),
            Tensor::random_uniform(s, -1.0, 1.0, &mut r),
            Tensor::random_uniform(Shape::new(3, 3, 1, 1), -1.0, 1.0, &mut r),
            Tensor::random_uniform(Shape::new(1, 2, 7, 7), -0.3, 0.3, &mut r),
            Tensor::scalar(0.4),
        ];
        let weights = Tensor::random_uniform(s, -1.0, 1.0, &mut r);
        let report = grad_check(&params, &all_coordinates(&params), 1e-4, |tape, v| {
            let cp = CorrParams { kernel: v[2], bias: None };
            let sp = SpatialAttentionParams { kernel: v[3], bias: None };
            let ap = ChannelAttentionParams { gamma: v[4] };
            let c = corr(v[0], v[1], &cp)?;
            let m = spatial_attention(v[0].mul(v[1])?, &sp)?;
            let out = channel_self_attention(c.mul(m)?, &ap)?;
            Ok(out.mul(tape.leaf(weights.clone()))?.sum())
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }
}
