//! Normalization and related composite primitives.

use super::{c, Element, Tensor};
use crate::error::TensorError;

/// Layer norm over the trailing block of size `d` (groups = numel/d).
fn ln_trailing<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
    d: usize,
) -> Tensor<E> {
    let numel = x.numel();
    let groups = numel / d;
    let eps_e = c::<E>(eps);
    let mut out = vec![E::zero(); numel];
    {
        let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
        for g in 0..groups {
            let xs = &xd[g * d..(g + 1) * d];
            let mean = xs.iter().copied().sum::<E>() / c::<E>(d as f64);
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / c::<E>(d as f64);
            let inv_std = E::one() / (var + eps_e).sqrt();
            for j in 0..d {
                out[g * d + j] = (xs[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
    }
    let (xc, gc) = (x.clone(), gamma.clone());
    let shape = x.shape().to_vec();
    Tensor::from_op(
        out,
        shape,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |up, _| {
            let (xd, gd) = (xc.data(), gc.data());
            let mut dx = vec![E::zero(); xd.len()];
            let mut dgamma = vec![E::zero(); d];
            let mut dbeta = vec![E::zero(); d];
            let d_e = c::<E>(d as f64);
            for g in 0..xd.len() / d {
                let xs = &xd[g * d..(g + 1) * d];
                let us = &up[g * d..(g + 1) * d];
                let mean = xs.iter().copied().sum::<E>() / d_e;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / d_e;
                let inv_std = E::one() / (var + eps_e).sqrt();

                let mut sum_dxhat = E::zero();
                let mut sum_dxhat_xhat = E::zero();
                for j in 0..d {
                    let xhat = (xs[j] - mean) * inv_std;
                    let dxhat = us[j] * gd[j];
                    dgamma[j] = dgamma[j] + us[j] * xhat;
                    dbeta[j] = dbeta[j] + us[j];
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                }
                for j in 0..d {
                    let xhat = (xs[j] - mean) * inv_std;
                    let dxhat = us[j] * gd[j];
                    dx[g * d + j] = inv_std / d_e * (d_e * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }),
    )
}

/// Layer normalization over an arbitrary set of dimensions: per remaining
/// index, the selected dims are jointly normalized to zero mean / unit
/// variance and then affinely mapped by `gamma`/`beta` (whose shapes must
/// equal the normalized extents, in the order given).
pub fn layer_norm<E: Element>(
    x: &Tensor<E>,
    dims: &[usize],
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>, TensorError> {
    let rank = x.ndim();
    let mut seen = vec![false; rank];
    for &d in dims {
        if d >= rank {
            return Err(TensorError::DimOutOfRange { op: "layer_norm", dim: d, rank });
        }
        if std::mem::replace(&mut seen[d], true) {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                msg: format!("duplicate dimension {d}"),
            });
        }
    }
    let norm_shape: Vec<usize> = dims.iter().map(|&d| x.shape()[d]).collect();
    if gamma.shape() != norm_shape.as_slice() || beta.shape() != norm_shape.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: norm_shape,
            rhs: gamma.shape().to_vec(),
        });
    }
    let block: usize = norm_shape.iter().product();

    let trailing: Vec<usize> = (rank - dims.len()..rank).collect();
    if dims == trailing.as_slice() {
        return Ok(ln_trailing(x, gamma, beta, eps, block));
    }
    // Move the normalized dims to the back, normalize, and undo.
    let kept: Vec<usize> = (0..rank).filter(|d| !dims.contains(d)).collect();
    let perm: Vec<usize> = kept.iter().chain(dims.iter()).copied().collect();
    let mut inverse = vec![0usize; rank];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let y = ln_trailing(&x.permute(&perm)?, gamma, beta, eps, block);
    y.permute(&inverse)
}

/// Softmax along `dim` (max-subtracted for stability).
pub fn softmax<E: Element>(x: &Tensor<E>, dim: usize) -> Result<Tensor<E>, TensorError> {
    if dim >= x.ndim() {
        return Err(TensorError::DimOutOfRange { op: "softmax", dim, rank: x.ndim() });
    }
    let shape = x.shape().to_vec();
    let axis = shape[dim];
    let outer: usize = shape[..dim].iter().product();
    let inner: usize = shape[dim + 1..].iter().product();
    let mut out = vec![E::zero(); x.numel()];
    {
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * axis * inner + a * inner + i;
                let mut max = xd[at(0)];
                for a in 1..axis {
                    if xd[at(a)] > max {
                        max = xd[at(a)];
                    }
                }
                let mut denom = E::zero();
                for a in 0..axis {
                    let e = (xd[at(a)] - max).exp();
                    out[at(a)] = e;
                    denom = denom + e;
                }
                for a in 0..axis {
                    out[at(a)] = out[at(a)] / denom;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        shape,
        vec![x.clone()],
        Box::new(move |up, y| {
            let mut g = vec![E::zero(); up.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| o * axis * inner + a * inner + i;
                    let mut dot = E::zero();
                    for a in 0..axis {
                        dot = dot + up[at(a)] * y[at(a)];
                    }
                    for a in 0..axis {
                        g[at(a)] = y[at(a)] * (up[at(a)] - dot);
                    }
                }
            }
            vec![Some(g)]
        }),
    ))
}

/// Elementwise binary cross-entropy on raw logits:
/// `max(x,0) - x*t + ln(1 + exp(-|x|))`, algebraically equal to
/// `-(t*ln(sigmoid(x)) + (1-t)*ln(1-sigmoid(x)))` but safe for saturated
/// logits in single precision. Targets are treated as constants.
pub fn bce_with_logits<E: Element>(
    logits: &Tensor<E>,
    targets: &Tensor<E>,
) -> Result<Tensor<E>, TensorError> {
    if logits.shape() != targets.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "bce_with_logits",
            lhs: logits.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let t = targets.to_vec();
    let out: Vec<E> = logits
        .data()
        .iter()
        .zip(&t)
        .map(|(&x, &ti)| x.max(E::zero()) - x * ti + (E::one() + (-x.abs()).exp()).ln())
        .collect();
    let shape = logits.shape().to_vec();
    let lc = logits.clone();
    Ok(Tensor::from_op(
        out,
        shape,
        vec![logits.clone()],
        Box::new(move |up, _| {
            let xd = lc.data();
            let g = up
                .iter()
                .zip(xd.iter().zip(&t))
                .map(|(&u, (&x, &ti))| u * (E::one() / (E::one() + (-x).exp()) - ti))
                .collect();
            vec![Some(g)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::<f64>::full(&[1, 4], 3.0);
        let s = softmax(&x, 1).unwrap();
        for v in s.to_vec() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(vec![0.1f64, -2.0, 3.0, 0.5, 1.0, -1.0], &[2, 3]).unwrap();
        let s = softmax(&x, 1).unwrap();
        let v = s.to_vec();
        for r in 0..2 {
            let row_sum: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_dim_out_of_range() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(softmax(&x, 2), Err(TensorError::DimOutOfRange { .. })));
    }

    #[test]
    fn layer_norm_constant_input_yields_beta() {
        let x = Tensor::<f64>::full(&[2, 5], 7.0);
        let gamma = Tensor::<f64>::ones(&[5]);
        let beta = Tensor::new(vec![1.0f64, 2.0, 3.0, 4.0, 5.0], &[5]).unwrap();
        let y = layer_norm(&x, &[1], &gamma, &beta, 1e-5).unwrap();
        let v = y.to_vec();
        for r in 0..2 {
            for j in 0..5 {
                assert!((v[r * 5 + j] - (j + 1) as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_normalizes_mean_and_variance() {
        let x = Tensor::new((0..12).map(|v| v as f64 * 1.7 - 3.0).collect(), &[3, 4]).unwrap();
        let gamma = Tensor::<f64>::ones(&[4]);
        let beta = Tensor::<f64>::zeros(&[4]);
        let y = layer_norm(&x, &[1], &gamma, &beta, 1e-10).unwrap();
        let v = y.to_vec();
        for r in 0..3 {
            let row = &v[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn layer_norm_over_middle_dim_matches_manual() {
        // Normalize over dim 1 of [2,3,2]: each (b, :, k) lane independently.
        let x = Tensor::new((0..12).map(|v| (v as f64).sin()).collect(), &[2, 3, 2]).unwrap();
        let gamma = Tensor::<f64>::ones(&[3]);
        let beta = Tensor::<f64>::zeros(&[3]);
        let y = layer_norm(&x, &[1], &gamma, &beta, 1e-9).unwrap();
        let (xv, yv) = (x.to_vec(), y.to_vec());
        for b in 0..2 {
            for k in 0..2 {
                let lane: Vec<f64> = (0..3).map(|c| xv[b * 6 + c * 2 + k]).collect();
                let mean = lane.iter().sum::<f64>() / 3.0;
                let var = lane.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / 3.0;
                for (ci, &lv) in lane.iter().enumerate() {
                    let expect = (lv - mean) / (var + 1e-9).sqrt();
                    let got = yv[b * 6 + ci * 2 + k];
                    assert!((got - expect).abs() < 1e-9, "lane ({b},{ci},{k}): {got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn bce_matches_naive_formula_on_moderate_logits() {
        let x = Tensor::new(vec![0.3f64, -1.2, 2.0], &[3]).unwrap();
        let t = Tensor::new(vec![1.0f64, 0.0, 1.0], &[3]).unwrap();
        let out = bce_with_logits(&x, &t).unwrap().to_vec();
        for i in 0..3 {
            let p = 1.0 / (1.0 + (-x.to_vec()[i]).exp());
            let ti = t.to_vec()[i];
            let naive = -(ti * p.ln() + (1.0 - ti) * (1.0 - p).ln());
            assert!((out[i] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_finite_for_saturated_f32_logits() {
        let x = Tensor::new(vec![40.0f32, -40.0], &[2]).unwrap();
        let t = Tensor::new(vec![0.0f32, 1.0], &[2]).unwrap();
        let out = bce_with_logits(&x, &t).unwrap().to_vec();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(out.iter().all(|&v| v > 30.0), "saturated wrong prediction must cost ~|logit|");
    }
}
