//! Shape manipulation: broadcasting, reshape, permute, concat, slice.

use super::{Element, Tensor};
use crate::error::TensorError;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn pad_left(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    padded
}

/// Right-aligned broadcast result of two shapes; each dimension must match
/// or be 1 on one side.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (pad_left(a, rank), pad_left(b, rank));
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        out[d] = match (pa[d], pb[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
            }
        };
    }
    Ok(out)
}

/// True when `from` (right-aligned) equals the trailing dims of `to`, with
/// only size-1 dims in front — i.e. the data simply repeats cyclically.
fn is_cyclic_suffix(from: &[usize], to: &[usize]) -> bool {
    let pf = pad_left(from, to.len());
    let split = to.len() - from.len().min(to.len());
    let lead_ones = pf.iter().take_while(|&&d| d == 1).count();
    pf[lead_ones.max(split)..] == to[lead_ones.max(split)..] && pf[..lead_ones.max(split)].iter().all(|&d| d == 1)
}

/// Materialize `data` of shape `from` broadcast to shape `to`.
pub(crate) fn expand_to<E: Element>(data: &[E], from: &[usize], to: &[usize]) -> Vec<E> {
    let out_numel: usize = to.iter().product();
    if data.len() == out_numel {
        return data.to_vec();
    }
    if is_cyclic_suffix(from, to) {
        let mut out = Vec::with_capacity(out_numel);
        while out.len() < out_numel {
            out.extend_from_slice(data);
        }
        return out;
    }
    let rank = to.len();
    let pf = pad_left(from, rank);
    let from_strides = strides(&pf);
    // stride 0 along broadcast dims
    let eff: Vec<usize> = (0..rank).map(|d| if pf[d] == 1 { 0 } else { from_strides[d] }).collect();
    let mut out = vec![E::zero(); out_numel];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += eff[d];
            if coords[d] < to[d] {
                break;
            }
            coords[d] = 0;
            src -= eff[d] * to[d];
        }
    }
    out
}

/// Sum `grad` of broadcast shape `from` back down to shape `to`.
pub(crate) fn reduce_to<E: Element>(grad: &[E], from: &[usize], to: &[usize]) -> Vec<E> {
    let to_numel: usize = to.iter().product();
    if grad.len() == to_numel {
        return grad.to_vec();
    }
    if is_cyclic_suffix(to, from) {
        let mut out = vec![E::zero(); to_numel];
        for chunk in grad.chunks_exact(to_numel) {
            for (o, &g) in out.iter_mut().zip(chunk) {
                *o = *o + g;
            }
        }
        return out;
    }
    let rank = from.len();
    let pt = pad_left(to, rank);
    let to_strides = strides(&pt);
    let eff: Vec<usize> = (0..rank).map(|d| if pt[d] == 1 { 0 } else { to_strides[d] }).collect();
    let mut out = vec![E::zero(); to_numel];
    let mut coords = vec![0usize; rank];
    let mut dst = 0usize;
    for &g in grad {
        out[dst] = out[dst] + g;
        for d in (0..rank).rev() {
            coords[d] += 1;
            dst += eff[d];
            if coords[d] < from[d] {
                break;
            }
            coords[d] = 0;
            dst -= eff[d] * from[d];
        }
    }
    out
}

fn permute_copy<E: Element>(data: &[E], shape: &[usize], axes: &[usize]) -> (Vec<E>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_stride: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![E::zero(); data.len()];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += src_stride[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= src_stride[d] * out_shape[d];
        }
    }
    (out, out_shape)
}

impl<E: Element> Tensor<E> {
    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                msg: format!("cannot reshape {:?} ({} elements) to {:?} ({} elements)", self.shape(), self.numel(), shape, numel),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |up, _| vec![Some(up.to_vec())]),
        ))
    }

    /// Reorder dimensions; `axes` must be a permutation of `0..ndim`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<E>, TensorError> {
        let rank = self.ndim();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                msg: format!("{axes:?} is not a permutation of 0..{rank}"),
            });
        }
        let (out, out_shape) = permute_copy(&self.data(), self.shape(), axes);
        let mut inverse = vec![0usize; rank];
        for (d, &a) in axes.iter().enumerate() {
            inverse[a] = d;
        }
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |up, _| {
                let (g, _) = permute_copy(up, &os, &inverse);
                vec![Some(g)]
            }),
        ))
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Tensor<E>, TensorError> {
        if self.ndim() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                msg: format!("expected rank-2 tensor, got {:?}", self.shape()),
            });
        }
        self.permute(&[1, 0])
    }

    /// Contiguous sub-range `[start, end)` along `dim` (copied).
    pub fn slice(&self, dim: usize, start: usize, end: usize) -> Result<Tensor<E>, TensorError> {
        if dim >= self.ndim() {
            return Err(TensorError::DimOutOfRange { op: "slice", dim, rank: self.ndim() });
        }
        let extent = self.shape()[dim];
        if start >= end || end > extent {
            return Err(TensorError::InvalidShape {
                op: "slice",
                msg: format!("range {start}..{end} invalid for extent {extent} along dim {dim}"),
            });
        }
        let outer: usize = self.shape()[..dim].iter().product();
        let inner: usize = self.shape()[dim + 1..].iter().product();
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        {
            let data = self.data();
            for o in 0..outer {
                let base = o * extent * inner + start * inner;
                out.extend_from_slice(&data[base..base + width * inner]);
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[dim] = width;
        let in_numel = self.numel();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |up, _| {
                let mut g = vec![E::zero(); in_numel];
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    g[base..base + width * inner].copy_from_slice(&up[o * width * inner..(o + 1) * width * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }
}

/// Concatenate tensors along `dim`; all other extents must match.
pub fn concat<E: Element>(tensors: &[&Tensor<E>], dim: usize) -> Result<Tensor<E>, TensorError> {
    let first = tensors.first().ok_or_else(|| TensorError::InvalidShape {
        op: "concat",
        msg: "empty tensor list".into(),
    })?;
    let rank = first.ndim();
    if dim >= rank {
        return Err(TensorError::DimOutOfRange { op: "concat", dim, rank });
    }
    for t in tensors {
        if t.ndim() != rank
            || (0..rank).any(|d| d != dim && t.shape()[d] != first.shape()[d])
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    let extents: Vec<usize> = tensors.iter().map(|t| t.shape()[dim]).collect();
    let total: usize = extents.iter().sum();
    let outer: usize = first.shape()[..dim].iter().product();
    let inner: usize = first.shape()[dim + 1..].iter().product();

    let mut out_shape = first.shape().to_vec();
    out_shape[dim] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (t, &ext) in tensors.iter().zip(&extents) {
            let data = t.data();
            out.extend_from_slice(&data[o * ext * inner..(o + 1) * ext * inner]);
        }
    }
    let parents: Vec<Tensor<E>> = tensors.iter().map(|t| (*t).clone()).collect();
    let ext_bwd = extents.clone();
    Ok(Tensor::from_op(
        out,
        out_shape,
        parents,
        Box::new(move |up, _| {
            let mut grads: Vec<Vec<E>> = ext_bwd.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
            let mut cursor = 0usize;
            for _ in 0..outer {
                for (g, &ext) in grads.iter_mut().zip(&ext_bwd) {
                    g.extend_from_slice(&up[cursor..cursor + ext * inner]);
                    cursor += ext * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::concat;

    #[test]
    fn concat_shape_arithmetic() {
        let a = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        let b = Tensor::<f64>::ones(&[2, 3, 3, 3]);
        let out = concat(&[&a, &b], 1).unwrap();
        assert_eq!(out.shape(), &[2, 5, 3, 3]);
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let a = Tensor::new(vec![1.0f64, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::new(vec![5.0f64, 6.0], &[2, 1]).unwrap();
        let cat = concat(&[&a, &b], 1).unwrap();
        assert_eq!(cat.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(cat.slice(1, 0, 2).unwrap().to_vec(), a.to_vec());
        assert_eq!(cat.slice(1, 2, 3).unwrap().to_vec(), b.to_vec());
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let a = Tensor::param(vec![0.0f64; 4], &[2, 2]).unwrap();
        let b = Tensor::param(vec![0.0f64; 2], &[2, 1]).unwrap();
        let cat = concat(&[&a, &b], 1).unwrap();
        let w = Tensor::new(vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        cat.mul(&w).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0, 4.0, 5.0]);
        assert_eq!(b.grad().unwrap(), vec![3.0, 6.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::new((0..24).map(|v| v as f64).collect(), &[2, 3, 4]).unwrap();
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn transpose_known() {
        let x = Tensor::new(vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let t = x.transpose().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn slice_dim_out_of_range() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        assert!(x.slice(5, 0, 1).is_err());
    }

    #[test]
    fn reshape_rejects_numel_change() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(x.reshape(&[7]).is_err());
    }
}
