//! Elementwise, matrix and reduction primitives with their backward rules.

use rayon::prelude::*;

use super::shape::{expand_to, reduce_to};
use super::{c, Element, Tensor};
use crate::error::TensorError;

/// Below this many multiply-accumulates a matmul stays single-threaded.
const PAR_FLOPS: usize = 1 << 16;

// ── Raw kernels (shared by forward and backward paths) ───────────────

/// C[m,n] += A[m,k] @ B[k,n]
pub(crate) fn mm_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    let row = |c_row: &mut [E], a_row: &[E]| {
        for (&a_ip, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + a_ip * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(|(c_row, a_row)| row(c_row, a_row));
    } else {
        for (c_row, a_row) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(c_row, a_row);
        }
    }
}

/// C[m,n] += A[m,k] @ B[n,k]^T — both operands walked along contiguous rows.
pub(crate) fn mm_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    let row = |c_row: &mut [E], a_row: &[E]| {
        for (cv, b_row) in c_row.iter_mut().zip(b.chunks_exact(k)) {
            let mut acc = E::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *cv = *cv + acc;
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(|(c_row, a_row)| row(c_row, a_row));
    } else {
        for (c_row, a_row) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(c_row, a_row);
        }
    }
}

/// C[k,n] += A[m,k]^T @ B[m,n] — parallelized over output rows (gather form).
pub(crate) fn mm_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    let row = |c_row: &mut [E], p: usize| {
        for i in 0..m {
            let a_ip = a[i * k + p];
            let b_row = &b[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + a_ip * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(p, c_row)| row(c_row, p));
    } else {
        for (p, c_row) in out.chunks_mut(n).enumerate() {
            row(c_row, p);
        }
    }
}

// ── Elementwise binary ops with broadcasting ─────────────────────────

fn binary_broadcast<E: Element>(
    op: &'static str,
    a: &Tensor<E>,
    b: &Tensor<E>,
    fwd: impl Fn(E, E) -> E,
    // (upstream, a_i, b_i) -> (da_i, db_i)
    bwd: impl Fn(E, E, E) -> (E, E) + 'static,
) -> Result<Tensor<E>, TensorError> {
    let out_shape = super::shape::broadcast_shapes(op, a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let out: Vec<E> = if a.shape() == b.shape() {
        ad.iter().zip(bd.iter()).map(|(&x, &y)| fwd(x, y)).collect()
    } else {
        let ax = expand_to(&ad, a.shape(), &out_shape);
        let bx = expand_to(&bd, b.shape(), &out_shape);
        ax.iter().zip(bx.iter()).map(|(&x, &y)| fwd(x, y)).collect()
    };
    drop((ad, bd));

    let (ac, bc) = (a.clone(), b.clone());
    let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
    let os = out_shape.clone();
    Ok(Tensor::from_op(
        out,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |up, _| {
            let (ad, bd) = (ac.data(), bc.data());
            let same = a_shape == b_shape;
            let (ax, bx);
            let (a_sl, b_sl): (&[E], &[E]) = if same {
                (&ad, &bd)
            } else {
                ax = expand_to(&ad, &a_shape, &os);
                bx = expand_to(&bd, &b_shape, &os);
                (&ax, &bx)
            };
            let mut da = vec![E::zero(); up.len()];
            let mut db = vec![E::zero(); up.len()];
            for i in 0..up.len() {
                let (ga, gb) = bwd(up[i], a_sl[i], b_sl[i]);
                da[i] = ga;
                db[i] = gb;
            }
            let da = reduce_to(&da, &os, &a_shape);
            let db = reduce_to(&db, &os, &b_shape);
            vec![Some(da), Some(db)]
        }),
    ))
}

// ── Unary helper ─────────────────────────────────────────────────────

fn unary<E: Element>(
    x: &Tensor<E>,
    fwd: impl Fn(E) -> E,
    // (x_i, y_i) -> dy_i/dx_i
    dfn: impl Fn(E, E) -> E + 'static,
) -> Tensor<E> {
    let out: Vec<E> = x.data().iter().map(|&v| fwd(v)).collect();
    let shape = x.shape().to_vec();
    let xc = x.clone();
    Tensor::from_op(
        out,
        shape,
        vec![x.clone()],
        Box::new(move |up, out| {
            let xd = xc.data();
            let g = up
                .iter()
                .zip(xd.iter().zip(out.iter()))
                .map(|(&u, (&xi, &yi))| u * dfn(xi, yi))
                .collect();
            vec![Some(g)]
        }),
    )
}

fn gelu_scalar<E: Element>(x: E) -> E {
    let k = c::<E>((2.0 / std::f64::consts::PI).sqrt());
    let a = c::<E>(0.044715);
    let half = c::<E>(0.5);
    half * x * (E::one() + (k * (x + a * x * x * x)).tanh())
}

fn gelu_grad_scalar<E: Element>(x: E) -> E {
    let k = c::<E>((2.0 / std::f64::consts::PI).sqrt());
    let a = c::<E>(0.044715);
    let half = c::<E>(0.5);
    let three = c::<E>(3.0);
    let inner = k * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = E::one() - t * t;
    let d_inner = k * (E::one() + three * a * x * x);
    half * (E::one() + t) + half * x * sech2 * d_inner
}

// ── Public op surface ────────────────────────────────────────────────

impl<E: Element> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        binary_broadcast("add", self, other, |a, b| a + b, |u, _, _| (u, u))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        binary_broadcast("sub", self, other, |a, b| a - b, |u, _, _| (u, -u))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        binary_broadcast("mul", self, other, |a, b| a * b, |u, a, b| (u * b, u * a))
    }

    pub fn div(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        binary_broadcast("div", self, other, |a, b| a / b, |u, a, b| (u / b, -u * a / (b * b)))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        if self.ndim() != 2 || other.ndim() != 2 {
            return Err(TensorError::InvalidShape {
                op: "matmul",
                msg: format!("expected rank-2 operands, got {:?} and {:?}", self.shape(), other.shape()),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![E::zero(); m * n];
        mm_nn(&self.data(), &other.data(), m, k, n, &mut out);
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |up, _| {
                let (ad, bd) = (ac.data(), bc.data());
                let mut da = vec![E::zero(); m * k];
                let mut db = vec![E::zero(); k * n];
                mm_nt(up, &bd, m, n, k, &mut da); // dA = G @ B^T
                mm_tn(&ad, up, m, k, n, &mut db); // dB = A^T @ G
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// Batched matrix product: [N,m,k] @ [N,k,n] -> [N,m,n].
    pub fn bmm(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        if self.ndim() != 3 || other.ndim() != 3 || self.shape()[0] != other.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (nb, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (k2, n) = (other.shape()[1], other.shape()[2]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![E::zero(); nb * m * n];
        {
            let (ag, bg) = (self.data(), other.data());
            let (ad, bd): (&[E], &[E]) = (&ag, &bg);
            out.par_chunks_mut(m * n)
                .zip(ad.par_chunks(m * k).zip(bd.par_chunks(k * n)))
                .for_each(|(o, (a, b))| mm_nn(a, b, m, k, n, o));
        }
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            vec![nb, m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |up, _| {
                let (ag, bg) = (ac.data(), bc.data());
                let (ad, bd): (&[E], &[E]) = (&ag, &bg);
                let mut da = vec![E::zero(); nb * m * k];
                let mut db = vec![E::zero(); nb * k * n];
                da.par_chunks_mut(m * k)
                    .zip(up.par_chunks(m * n).zip(bd.par_chunks(k * n)))
                    .for_each(|(o, (g, b))| mm_nt(g, b, m, n, k, o));
                db.par_chunks_mut(k * n)
                    .zip(ad.par_chunks(m * k).zip(up.par_chunks(m * n)))
                    .for_each(|(o, (a, g))| mm_tn(a, g, m, k, n, o));
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn neg(&self) -> Tensor<E> {
        unary(self, |x| -x, |_, _| -E::one())
    }

    pub fn sin(&self) -> Tensor<E> {
        unary(self, |x| x.sin(), |x, _| x.cos())
    }

    pub fn cos(&self) -> Tensor<E> {
        unary(self, |x| x.cos(), |x, _| -x.sin())
    }

    pub fn exp(&self) -> Tensor<E> {
        unary(self, |x| x.exp(), |_, y| y)
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        unary(self, |x| E::one() / (E::one() + (-x).exp()), |_, y| y * (E::one() - y))
    }

    pub fn gelu(&self) -> Tensor<E> {
        unary(self, gelu_scalar, |x, _| gelu_grad_scalar(x))
    }

    pub fn tanh_act(&self) -> Tensor<E> {
        unary(self, |x| x.tanh(), |_, y| E::one() - y * y)
    }

    /// Natural logarithm; rejects non-positive entries.
    pub fn log(&self) -> Result<Tensor<E>, TensorError> {
        if let Some((i, &v)) = self.data().iter().enumerate().find(|(_, v)| **v <= E::zero()) {
            return Err(TensorError::LogDomain { index: i, value: super::fl(v) });
        }
        Ok(unary(self, |x| x.ln(), |x, _| E::one() / x))
    }

    pub fn scale(&self, s: E) -> Tensor<E> {
        unary(self, move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: E) -> Tensor<E> {
        unary(self, move |x| x + s, |_, _| E::one())
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor<E> {
        let total: E = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![total],
            vec![1],
            vec![self.clone()],
            Box::new(move |up, _| vec![Some(vec![up[0]; n])]),
        )
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Tensor<E> {
        let n = self.numel();
        let inv = E::one() / c::<E>(n as f64);
        let total: E = self.data().iter().copied().sum();
        Tensor::from_op(
            vec![total * inv],
            vec![1],
            vec![self.clone()],
            Box::new(move |up, _| vec![Some(vec![up[0] * inv; n])]),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use crate::error::TensorError;

    #[test]
    fn add_elementwise() {
        let a = Tensor::new(vec![1.0f64, 2.0], &[2]).unwrap();
        let b = Tensor::new(vec![3.0f64, 4.0], &[2]).unwrap();
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn add_broadcasts_trailing_bias() {
        let a = Tensor::new(vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::new(vec![10.0f64, 20.0, 30.0], &[3]).unwrap();
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn add_broadcast_backward_sums_over_batch() {
        let a = Tensor::param(vec![1.0f64; 6], &[2, 3]).unwrap();
        let b = Tensor::param(vec![0.0f64; 3], &[3]).unwrap();
        a.add(&b).unwrap().sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn add_rejects_incompatible_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 4]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "error must name both shapes: {msg}");
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(vec![1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]).unwrap();
        let a = Tensor::new((1..=9).map(|v| v as f64).collect(), &[3, 3]).unwrap();
        assert_eq!(eye.matmul(&a).unwrap().to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_known_values() {
        let a = Tensor::new(vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::new((1..=12).map(|v| v as f64).collect(), &[3, 4]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert_eq!(c.to_vec(), vec![38.0, 44.0, 50.0, 56.0, 83.0, 98.0, 113.0, 128.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn bmm_matches_per_slice_matmul() {
        let a = Tensor::new((0..12).map(|v| v as f64 * 0.5).collect(), &[2, 2, 3]).unwrap();
        let b = Tensor::new((0..18).map(|v| v as f64 * 0.25).collect(), &[2, 3, 3]).unwrap();
        let out = a.bmm(&b).unwrap();
        for batch in 0..2 {
            let a_s = Tensor::new(a.to_vec()[batch * 6..(batch + 1) * 6].to_vec(), &[2, 3]).unwrap();
            let b_s = Tensor::new(b.to_vec()[batch * 9..(batch + 1) * 9].to_vec(), &[3, 3]).unwrap();
            let expect = a_s.matmul(&b_s).unwrap().to_vec();
            assert_eq!(&out.to_vec()[batch * 6..(batch + 1) * 6], &expect[..]);
        }
    }

    #[test]
    fn trig_at_zero() {
        let z = Tensor::<f64>::zeros(&[4]);
        assert_eq!(z.cos().to_vec(), vec![1.0; 4]);
        assert_eq!(z.sin().to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn sigmoid_symmetry_at_zero() {
        let z = Tensor::<f64>::zeros(&[1]);
        assert_eq!(z.sigmoid().item(), 0.5);
    }

    #[test]
    fn log_rejects_non_positive_with_index() {
        let x = Tensor::new(vec![1.0f64, -0.5, 2.0], &[3]).unwrap();
        match x.log() {
            Err(TensorError::LogDomain { index, value }) => {
                assert_eq!(index, 1);
                assert_eq!(value, -0.5);
            }
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn mean_backward_spreads_uniformly() {
        let x = Tensor::param(vec![1.0f64, 2.0, 3.0, 4.0], &[4]).unwrap();
        x.mean().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }
}
