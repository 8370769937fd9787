//! Spatial ops: im2col convolution lowering, 2x2 max pooling, bilinear 2x
//! upsampling. Convolution is expressed as im2col followed by one matmul so
//! a single well-tested kernel carries both directions.

use rayon::prelude::*;

use super::{c, Element, Tensor};
use crate::error::TensorError;

fn expect_rank4<E: Element>(op: &'static str, x: &Tensor<E>) -> Result<[usize; 4], TensorError> {
    match x.shape() {
        &[b, ch, h, w] => Ok([b, ch, h, w]),
        other => Err(TensorError::InvalidShape {
            op,
            msg: format!("expected [B,C,H,W] tensor, got {other:?}"),
        }),
    }
}

fn conv_extent(op: &'static str, name: &str, input: usize, k: usize, stride: usize, padding: usize) -> Result<usize, TensorError> {
    let span = input + 2 * padding;
    if span < k || (span - k) % stride != 0 {
        return Err(TensorError::InvalidShape {
            op,
            msg: format!(
                "output {name} ({input} + 2*{padding} - {k})/{stride} + 1 is not a positive integer"
            ),
        });
    }
    Ok((span - k) / stride + 1)
}

/// Unfold k×k patches of `x` into rows: output is `[B*OH*OW, C*k*k]`, one
/// row per output position, channel-major within the row.
pub fn im2col<E: Element>(
    x: &Tensor<E>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>, TensorError> {
    let [b, ch, h, w] = expect_rank4("im2col", x)?;
    if k == 0 || stride == 0 {
        return Err(TensorError::InvalidShape {
            op: "im2col",
            msg: format!("kernel {k} and stride {stride} must be at least 1"),
        });
    }
    let oh = conv_extent("im2col", "height", h, k, stride, padding)?;
    let ow = conv_extent("im2col", "width", w, k, stride, padding)?;
    let row_len = ch * k * k;
    let rows = b * oh * ow;

    let mut cols = vec![E::zero(); rows * row_len];
    {
        let guard = x.data();
        let data: &[E] = &guard;
        cols.par_chunks_mut(row_len).enumerate().for_each(|(r, row)| {
            let bi = r / (oh * ow);
            let oy = (r / ow) % oh;
            let ox = r % ow;
            let mut slot = 0usize;
            for ci in 0..ch {
                let plane = &data[(bi * ch + ci) * h * w..(bi * ch + ci + 1) * h * w];
                for ky in 0..k {
                    let y = (oy * stride + ky) as isize - padding as isize;
                    for kx in 0..k {
                        let x_pos = (ox * stride + kx) as isize - padding as isize;
                        row[slot] = if y >= 0 && (y as usize) < h && x_pos >= 0 && (x_pos as usize) < w {
                            plane[y as usize * w + x_pos as usize]
                        } else {
                            E::zero()
                        };
                        slot += 1;
                    }
                }
            }
        });
    }

    let in_numel = x.numel();
    Ok(Tensor::from_op(
        cols,
        vec![rows, row_len],
        vec![x.clone()],
        Box::new(move |up, _| {
            // col2im: scatter patch gradients back; batches are disjoint so
            // parallelism over the batch keeps accumulation deterministic.
            let mut g = vec![E::zero(); in_numel];
            g.par_chunks_mut(ch * h * w).enumerate().for_each(|(bi, gb)| {
                for r in bi * oh * ow..(bi + 1) * oh * ow {
                    let oy = (r / ow) % oh;
                    let ox = r % ow;
                    let row = &up[r * row_len..(r + 1) * row_len];
                    let mut slot = 0usize;
                    for ci in 0..ch {
                        for ky in 0..k {
                            let y = (oy * stride + ky) as isize - padding as isize;
                            for kx in 0..k {
                                let x_pos = (ox * stride + kx) as isize - padding as isize;
                                if y >= 0 && (y as usize) < h && x_pos >= 0 && (x_pos as usize) < w {
                                    let idx = ci * h * w + y as usize * w + x_pos as usize;
                                    gb[idx] = gb[idx] + row[slot];
                                }
                                slot += 1;
                            }
                        }
                    }
                }
            });
            vec![Some(g)]
        }),
    ))
}

/// Cross-correlation of `x [B,C_in,H,W]` with `weight [C_out,C_in,k,k]` plus
/// per-channel `bias [C_out]`.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>, TensorError> {
    let [b, c_in, h, w] = expect_rank4("conv2d", x)?;
    let [c_out, wc_in, k, k2] = expect_rank4("conv2d", weight)?;
    if wc_in != c_in || k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if bias.shape() != [c_out] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: vec![c_out],
            rhs: bias.shape().to_vec(),
        });
    }
    let oh = conv_extent("conv2d", "height", h, k, stride, padding)?;
    let ow = conv_extent("conv2d", "width", w, k, stride, padding)?;

    let cols = im2col(x, k, stride, padding)?; // [B*OH*OW, C_in*k*k]
    let w_flat = weight.reshape(&[c_out, c_in * k * k])?.transpose()?;
    let out = cols.matmul(&w_flat)?.add(bias)?; // [B*OH*OW, C_out]
    out.reshape(&[b, oh, ow, c_out])?.permute(&[0, 3, 1, 2])
}

/// Non-overlapping 2x2 max pooling; spatial extents must be even.
pub fn maxpool2x2<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
    let [b, ch, h, w] = expect_rank4("maxpool2x2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::InvalidShape {
            op: "maxpool2x2",
            msg: format!("spatial extents {h}x{w} must be even"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let planes = b * ch;
    let mut out = vec![E::zero(); planes * oh * ow];
    let mut argmax = vec![0usize; planes * oh * ow];
    {
        let guard = x.data();
        let data: &[E] = &guard;
        out.par_chunks_mut(oh * ow)
            .zip(argmax.par_chunks_mut(oh * ow))
            .enumerate()
            .for_each(|(p, (o_plane, a_plane))| {
                let plane = &data[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = plane[2 * oy * w + 2 * ox];
                        let mut best_idx = 2 * oy * w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = (2 * oy + dy) * w + 2 * ox + dx;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                        o_plane[oy * ow + ox] = best;
                        a_plane[oy * ow + ox] = p * h * w + best_idx;
                    }
                }
            });
    }
    let in_numel = x.numel();
    Ok(Tensor::from_op(
        out,
        vec![b, ch, oh, ow],
        vec![x.clone()],
        Box::new(move |up, _| {
            let mut g = vec![E::zero(); in_numel];
            for (&src, &u) in argmax.iter().zip(up) {
                g[src] = g[src] + u;
            }
            vec![Some(g)]
        }),
    ))
}

/// Interpolation table for one axis of a 2x bilinear upsample
/// (half-pixel-centered sampling, edges clamped).
fn lerp_table(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Double both spatial extents by bilinear interpolation.
pub fn bilinear_upsample2x<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
    let [b, ch, h, w] = expect_rank4("bilinear_upsample2x", x)?;
    let (oh, ow) = (2 * h, 2 * w);
    let ty = lerp_table(h);
    let tx = lerp_table(w);
    let planes = b * ch;
    let mut out = vec![E::zero(); planes * oh * ow];
    {
        let guard = x.data();
        let data: &[E] = &guard;
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, o_plane)| {
            let plane = &data[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1, fy) = ty[oy];
                let (wy0, wy1) = (c::<E>(1.0 - fy), c::<E>(fy));
                for ox in 0..ow {
                    let (x0, x1, fx) = tx[ox];
                    let (wx0, wx1) = (c::<E>(1.0 - fx), c::<E>(fx));
                    o_plane[oy * ow + ox] = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                        + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
                }
            }
        });
    }
    let ty_b = ty.clone();
    let tx_b = tx.clone();
    Ok(Tensor::from_op(
        out,
        vec![b, ch, oh, ow],
        vec![x.clone()],
        Box::new(move |up, _| {
            let mut g = vec![E::zero(); planes * h * w];
            g.par_chunks_mut(h * w).enumerate().for_each(|(p, g_plane)| {
                let u_plane = &up[p * oh * ow..(p + 1) * oh * ow];
                for oy in 0..oh {
                    let (y0, y1, fy) = ty_b[oy];
                    for ox in 0..ow {
                        let (x0, x1, fx) = tx_b[ox];
                        let u = u_plane[oy * ow + ox];
                        g_plane[y0 * w + x0] = g_plane[y0 * w + x0] + c::<E>((1.0 - fy) * (1.0 - fx)) * u;
                        g_plane[y0 * w + x1] = g_plane[y0 * w + x1] + c::<E>((1.0 - fy) * fx) * u;
                        g_plane[y1 * w + x0] = g_plane[y1 * w + x0] + c::<E>(fy * (1.0 - fx)) * u;
                        g_plane[y1 * w + x1] = g_plane[y1 * w + x1] + c::<E>(fy * fx) * u;
                    }
                }
            });
            vec![Some(g)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_preserves_input() {
        // 1x1 conv whose weight is the per-channel identity.
        let x = Tensor::new((0..2 * 3 * 4 * 4).map(|v| v as f64 * 0.1).collect(), &[2, 3, 4, 4]).unwrap();
        let mut w = vec![0.0f64; 3 * 3];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let weight = Tensor::new(w, &[3, 3, 1, 1]).unwrap();
        let bias = Tensor::zeros(&[3]);
        let y = conv2d(&x, &weight, &bias, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv_output_shape() {
        let x = Tensor::<f64>::zeros(&[1, 3, 8, 8]);
        let w = Tensor::<f64>::zeros(&[5, 3, 3, 3]);
        let b = Tensor::<f64>::zeros(&[5]);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 5, 8, 8]);
    }

    #[test]
    fn conv_rejects_non_integer_extent() {
        let x = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        let w = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let b = Tensor::<f64>::zeros(&[1]);
        let err = conv2d(&x, &w, &b, 2, 0).unwrap_err();
        assert!(err.to_string().contains("(5 + 2*0 - 2)/2 + 1"), "{err}");
    }

    #[test]
    fn conv_known_values_3x3() {
        // Single 3x3 patch, all-ones kernel: output = sum of the patch.
        let x = Tensor::new((1..=9).map(|v| v as f64).collect(), &[1, 1, 3, 3]).unwrap();
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let b = Tensor::new(vec![0.5f64], &[1]).unwrap();
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 45.5);
    }

    #[test]
    fn maxpool_picks_maximum_and_routes_gradient() {
        let x = Tensor::param(vec![1.0f64, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let y = maxpool2x2(&x).unwrap();
        assert_eq!(y.to_vec(), vec![4.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_rejects_odd_extents() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(maxpool2x2(&x).is_err());
    }

    #[test]
    fn pool_then_upsample_restores_shape() {
        let x = Tensor::<f64>::ones(&[2, 3, 8, 6]);
        let y = bilinear_upsample2x(&maxpool2x2(&x).unwrap()).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 2.5);
        let y = bilinear_upsample2x(&x).unwrap();
        assert!(y.to_vec().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn im2col_identity_for_1x1() {
        let x = Tensor::new((0..8).map(|v| v as f64).collect(), &[1, 2, 2, 2]).unwrap();
        let cols = im2col(&x, 1, 1, 0).unwrap();
        assert_eq!(cols.shape(), &[4, 2]);
        // Row for position (y,x) holds the two channel values there.
        assert_eq!(cols.to_vec(), vec![0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);
    }
}
