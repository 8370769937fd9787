//! Learnable 2D positional embedding and window-based multi-head
//! self-attention.
//!
//! Attention runs independently inside non-overlapping `w x w` windows:
//! standard scaled dot-product over the w^2 tokens of each window, with no
//! intra-window positional term and no window shifting. Positional
//! information comes solely from [`PositionalEmbedding2d`] added before the
//! attention block.

use rand::Rng;

use crate::error::TensorError;
use crate::tensor::{softmax, Element, Tensor};

/// Additive learnable position table of shape `[1, C, H, W]`.
#[derive(Debug, Clone)]
pub struct PositionalEmbedding2d<E: Element> {
    pub table: Tensor<E>,
}

impl<E: Element> PositionalEmbedding2d<E> {
    /// Zero-mean Gaussian init, std 0.02.
    pub fn new<R: Rng>(channels: usize, h: usize, w: usize, rng: &mut R) -> Self {
        PositionalEmbedding2d { table: Tensor::param_randn(&[1, channels, h, w], 0.02, rng) }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        if x.ndim() != 4 || x.shape()[1..] != self.table.shape()[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "add_positional",
                lhs: x.shape().to_vec(),
                rhs: self.table.shape().to_vec(),
            });
        }
        x.add(&self.table)
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        vec![(format!("{prefix}.table"), self.table.clone())]
    }
}

/// Multi-head scaled dot-product attention within non-overlapping windows.
#[derive(Debug, Clone)]
pub struct WindowAttention<E: Element> {
    pub window: usize,
    pub heads: usize,
    pub w_q: Tensor<E>,
    pub b_q: Tensor<E>,
    pub w_k: Tensor<E>,
    pub b_k: Tensor<E>,
    pub w_v: Tensor<E>,
    pub b_v: Tensor<E>,
    pub w_o: Tensor<E>,
    pub b_o: Tensor<E>,
}

impl<E: Element> WindowAttention<E> {
    pub fn new<R: Rng>(channels: usize, window: usize, heads: usize, rng: &mut R) -> Self {
        assert!(window >= 1 && heads >= 1, "window and head count must be positive");
        assert!(
            channels % heads == 0,
            "channels {channels} not divisible by {heads} heads"
        );
        let proj = |rng: &mut R| Tensor::param_randn(&[channels, channels], 0.02, rng);
        WindowAttention {
            window,
            heads,
            w_q: proj(rng),
            b_q: Tensor::param_zeros(&[channels]),
            w_k: proj(rng),
            b_k: Tensor::param_zeros(&[channels]),
            w_v: proj(rng),
            b_v: Tensor::param_zeros(&[channels]),
            w_o: proj(rng),
            b_o: Tensor::param_zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        Ok(self.forward_with_weights(x)?.0)
    }

    /// Forward pass that also returns the attention weights
    /// `[windows*heads, tokens, tokens]` for inspection.
    pub fn forward_with_weights(&self, x: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>), TensorError> {
        let (ch, w) = (self.channels(), self.window);
        let [b, c, h, width] = match x.shape() {
            &[b, c, h, wd] => [b, c, h, wd],
            other => {
                return Err(TensorError::InvalidShape {
                    op: "window_attention",
                    msg: format!("expected [B,C,H,W] input, got {other:?}"),
                })
            }
        };
        if c != ch {
            return Err(TensorError::ShapeMismatch {
                op: "window_attention",
                lhs: x.shape().to_vec(),
                rhs: vec![ch, ch],
            });
        }
        if h % w != 0 || width % w != 0 {
            return Err(TensorError::InvalidShape {
                op: "window_attention",
                msg: format!("feature map {h}x{width} not divisible by window size {w}"),
            });
        }
        let (hw, ww) = (h / w, width / w);
        let windows = b * hw * ww;
        let tokens = w * w;
        let dh = ch / self.heads;

        // [B,C,H,W] -> [windows, tokens, C]
        let t = x
            .reshape(&[b, c, hw, w, ww, w])?
            .permute(&[0, 2, 4, 3, 5, 1])?
            .reshape(&[windows * tokens, c])?;

        let project = |wp: &Tensor<E>, bp: &Tensor<E>| -> Result<Tensor<E>, TensorError> {
            // [windows*tokens, C] -> [windows*heads, tokens, dh]
            t.matmul(wp)?
                .add(bp)?
                .reshape(&[windows, tokens, self.heads, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[windows * self.heads, tokens, dh])
        };
        let q = project(&self.w_q, &self.b_q)?;
        let k = project(&self.w_k, &self.b_k)?;
        let v = project(&self.w_v, &self.b_v)?;

        let scale = crate::tensor::c::<E>(1.0 / (dh as f64).sqrt());
        let scores = q.bmm(&k.permute(&[0, 2, 1])?)?.scale(scale);
        let attn = softmax(&scores, 2)?;
        let ctx = attn.bmm(&v)?; // [windows*heads, tokens, dh]

        let merged = ctx
            .reshape(&[windows, self.heads, tokens, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[windows * tokens, c])?;
        let out = merged.matmul(&self.w_o)?.add(&self.b_o)?;

        // [windows, tokens, C] -> [B,C,H,W]
        let out = out
            .reshape(&[b, hw, ww, w, w, c])?
            .permute(&[0, 5, 1, 3, 2, 4])?
            .reshape(&[b, c, h, width])?;
        Ok((out, attn))
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        vec![
            (format!("{prefix}.w_q"), self.w_q.clone()),
            (format!("{prefix}.b_q"), self.b_q.clone()),
            (format!("{prefix}.w_k"), self.w_k.clone()),
            (format!("{prefix}.b_k"), self.b_k.clone()),
            (format!("{prefix}.w_v"), self.w_v.clone()),
            (format!("{prefix}.b_v"), self.b_v.clone()),
            (format!("{prefix}.w_o"), self.w_o.clone()),
            (format!("{prefix}.b_o"), self.b_o.clone()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel = shape.iter().product();
        Tensor::new((0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn zero_positional_table_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pe = PositionalEmbedding2d::<f64>::new(3, 4, 4, &mut rng);
        pe.table = Tensor::param_zeros(&[1, 3, 4, 4]);
        let x = rand_input(&[2, 3, 4, 4], 1);
        assert_eq!(pe.forward(&x).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn positional_gradient_is_batch_sum_of_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pe = PositionalEmbedding2d::<f64>::new(2, 2, 2, &mut rng);
        let x = Tensor::param(vec![0.0; 3 * 2 * 2 * 2], &[3, 2, 2, 2]).unwrap();
        let weights = rand_input(&[3, 2, 2, 2], 3);
        pe.forward(&x).unwrap().mul(&weights).unwrap().sum().backward().unwrap();
        let g = pe.table.grad().unwrap();
        let wv = weights.to_vec();
        for i in 0..8 {
            let batch_sum: f64 = (0..3).map(|b| wv[b * 8 + i]).sum();
            assert!((g[i] - batch_sum).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pe = PositionalEmbedding2d::<f64>::new(3, 4, 4, &mut rng);
        assert!(pe.forward(&Tensor::zeros(&[1, 3, 8, 8])).is_err());
    }

    #[test]
    fn shape_preserved_over_valid_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (c, heads, w, h, wd) in [(4, 2, 2, 4, 6), (8, 4, 1, 3, 3), (6, 3, 3, 6, 9)] {
            let attn = WindowAttention::<f64>::new(c, w, heads, &mut rng);
            let x = rand_input(&[2, c, h, wd], 6);
            let y = attn.forward(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
        }
    }

    #[test]
    fn indivisible_extents_are_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let attn = WindowAttention::<f64>::new(4, 3, 2, &mut rng);
        let err = attn.forward(&Tensor::zeros(&[1, 4, 4, 6])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('4') && msg.contains('6') && msg.contains('3'), "must name H, W, w: {msg}");
    }

    #[test]
    fn window_size_one_reduces_to_output_projection_of_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let attn = WindowAttention::<f64>::new(4, 1, 2, &mut rng);
        let x = rand_input(&[2, 4, 3, 3], 9);
        let y = attn.forward(&x).unwrap();
        // softmax over a single token is 1, so out = (x Wv + bv) Wo + bo pointwise
        let (xv, wv, bv, wo, bo) = (x.to_vec(), attn.w_v.to_vec(), attn.b_v.to_vec(), attn.w_o.to_vec(), attn.b_o.to_vec());
        let yv = y.to_vec();
        for b in 0..2 {
            for pos in 0..9 {
                let vec_at = |buf: &[f64], c: usize| buf[b * 4 * 9 + c * 9 + pos];
                let mut v_proj = [0.0; 4];
                for j in 0..4 {
                    v_proj[j] = bv[j] + (0..4).map(|i| vec_at(&xv, i) * wv[i * 4 + j]).sum::<f64>();
                }
                for j in 0..4 {
                    let expect = bo[j] + (0..4).map(|i| v_proj[i] * wo[i * 4 + j]).sum::<f64>();
                    assert!((vec_at(&yv, j) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let attn = WindowAttention::<f64>::new(4, 2, 2, &mut rng);
        let x = rand_input(&[1, 4, 4, 4], 11);
        let (_, weights) = attn.forward_with_weights(&x).unwrap();
        let v = weights.to_vec();
        let tokens = 4;
        for lane in v.chunks(tokens) {
            let s: f64 = lane.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn window_locality() {
        // Zeroing the content of one window never changes another window's output.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let attn = WindowAttention::<f64>::new(4, 2, 2, &mut rng);
        let x = rand_input(&[1, 4, 4, 4], 13);
        let y_full = attn.forward(&x).unwrap().to_vec();

        // zero out the top-left 2x2 window across all channels
        let mut data = x.to_vec();
        for ci in 0..4 {
            for (yy, xx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                data[ci * 16 + yy * 4 + xx] = 0.0;
            }
        }
        let x2 = Tensor::new(data, &[1, 4, 4, 4]).unwrap();
        let y_zeroed = attn.forward(&x2).unwrap().to_vec();

        for ci in 0..4 {
            for yy in 0..4 {
                for xx in 0..4 {
                    let idx = ci * 16 + yy * 4 + xx;
                    let in_top_left = yy < 2 && xx < 2;
                    if !in_top_left {
                        assert!(
                            (y_full[idx] - y_zeroed[idx]).abs() < 1e-12,
                            "output outside the zeroed window changed at c={ci} y={yy} x={xx}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn permutation_equivariance_within_window() {
        // Swap two tokens inside the single window; outputs swap identically.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let attn = WindowAttention::<f64>::new(4, 2, 2, &mut rng);
        let x = rand_input(&[1, 4, 2, 2], 15);
        let y = attn.forward(&x).unwrap().to_vec();

        let mut data = x.to_vec();
        for ci in 0..4 {
            data.swap(ci * 4, ci * 4 + 3); // swap positions (0,0) and (1,1)
        }
        let y_perm = attn.forward(&Tensor::new(data, &[1, 4, 2, 2]).unwrap()).unwrap().to_vec();
        for ci in 0..4 {
            assert!((y[ci * 4] - y_perm[ci * 4 + 3]).abs() < 1e-12);
            assert!((y[ci * 4 + 3] - y_perm[ci * 4]).abs() < 1e-12);
            assert!((y[ci * 4 + 1] - y_perm[ci * 4 + 1]).abs() < 1e-12);
            assert!((y[ci * 4 + 2] - y_perm[ci * 4 + 2]).abs() < 1e-12);
        }
    }
}
