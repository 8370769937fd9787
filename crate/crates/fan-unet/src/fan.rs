//! Fourier Analysis Network layers and the classical Fourier-series
//! machinery they are derived from.
//!
//! A FAN layer splits its width into a periodic part, passed through cos and
//! sin after a linear map, and a conventional nonlinear part; the three
//! blocks are concatenated in the fixed order `[cos | sin | activated]`.
//! [`FourierSeries`] and [`FanSeriesParams`] provide the series form that
//! motivates the layer and double as independent oracles in the tests.

use rand::Rng;

use crate::error::TensorError;
use crate::tensor::{concat, conv2d, Element, Tensor};

// ── Activations ──────────────────────────────────────────────────────

/// Named nonlinearity for the conventional branch of a FAN layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Gelu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<E: Element>(&self, x: &Tensor<E>) -> Tensor<E> {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Tanh => x.tanh_act(),
            Activation::Identity => x.scale(E::one()),
        }
    }
}

// ── Fourier series (reference oracle) ────────────────────────────────

/// Truncated Fourier series with period `period`:
/// `a0 + sum_n (a_n cos(2πnx/T) + b_n sin(2πnx/T))`.
#[derive(Debug, Clone)]
pub struct FourierSeries {
    pub period: f64,
    pub a0: f64,
    pub cos_coeffs: Vec<f64>,
    pub sin_coeffs: Vec<f64>,
}

impl FourierSeries {
    /// Evaluate the partial sum at `x`.
    pub fn eval(&self, x: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI / self.period;
        let mut acc = self.a0;
        for (n, (&a, &b)) in self.cos_coeffs.iter().zip(&self.sin_coeffs).enumerate() {
            let arg = w * (n + 1) as f64 * x;
            acc += a * arg.cos() + b * arg.sin();
        }
        acc
    }

    pub fn harmonics(&self) -> usize {
        self.cos_coeffs.len()
    }
}

/// Fit the first `harmonics` Fourier coefficients of `f` over one period by
/// composite trapezoidal quadrature. `a0` is the mean of `f`; the harmonic
/// coefficients carry the standard `2/T` normalization so that fitting
/// `sin(2πx/T)` yields `b_1 = 1`.
///
/// `quadrature_points` must be at least `64 * harmonics`.
pub fn fourier_coefficients(
    f: impl Fn(f64) -> f64,
    period: f64,
    harmonics: usize,
    quadrature_points: usize,
) -> FourierSeries {
    assert!(period > 0.0, "period must be positive");
    assert!(harmonics >= 1, "need at least one harmonic");
    assert!(
        quadrature_points >= 64 * harmonics,
        "quadrature_points {quadrature_points} < 64 * {harmonics}"
    );
    let q = quadrature_points;
    let h = period / q as f64;
    let samples: Vec<(f64, f64)> = (0..=q).map(|i| (i as f64 * h, f(i as f64 * h))).collect();

    // trapezoid: (h/2) * (f0 + 2 f1 + ... + fQ)
    let trapezoid = |g: &dyn Fn(f64, f64) -> f64| -> f64 {
        let mut acc = 0.5 * (g(samples[0].0, samples[0].1) + g(samples[q].0, samples[q].1));
        for &(x, fx) in &samples[1..q] {
            acc += g(x, fx);
        }
        acc * h
    };

    let w = 2.0 * std::f64::consts::PI / period;
    let a0 = trapezoid(&|_, fx| fx) / period;
    let mut cos_coeffs = Vec::with_capacity(harmonics);
    let mut sin_coeffs = Vec::with_capacity(harmonics);
    for n in 1..=harmonics {
        let wn = w * n as f64;
        cos_coeffs.push(trapezoid(&|x, fx| fx * (wn * x).cos()) * 2.0 / period);
        sin_coeffs.push(trapezoid(&|x, fx| fx * (wn * x).sin()) * 2.0 / period);
    }
    FourierSeries { period, a0, cos_coeffs, sin_coeffs }
}

// ── Learnable series form ────────────────────────────────────────────

/// Learnable matrix form of a truncated Fourier series:
/// `f(x) = B + W_cos · cos(W_in x) + W_sin · sin(W_in x)`.
#[derive(Debug, Clone)]
pub struct FanSeriesParams<E: Element> {
    /// `[d_y]`
    pub bias: Tensor<E>,
    /// `[N, d_x]`
    pub w_in: Tensor<E>,
    /// `[d_y, N]`
    pub w_cos: Tensor<E>,
    /// `[d_y, N]`
    pub w_sin: Tensor<E>,
}

impl<E: Element> FanSeriesParams<E> {
    pub fn d_x(&self) -> usize {
        self.w_in.shape()[1]
    }

    pub fn d_y(&self) -> usize {
        self.bias.shape()[0]
    }

    fn validate(&self) -> Result<(), TensorError> {
        let n = self.w_in.shape()[0];
        let d_y = self.d_y();
        for (name, t) in [("w_cos", &self.w_cos), ("w_sin", &self.w_sin)] {
            if t.shape() != [d_y, n] {
                return Err(TensorError::InvalidShape {
                    op: "fan_series_eval",
                    msg: format!("{name} has shape {:?}, expected [{d_y}, {n}]", t.shape()),
                });
            }
        }
        Ok(())
    }
}

/// Evaluate the series form on a `[d_x]` input, differentiably.
pub fn fan_series_eval<E: Element>(
    params: &FanSeriesParams<E>,
    x: &Tensor<E>,
) -> Result<Tensor<E>, TensorError> {
    params.validate()?;
    if x.shape() != [params.d_x()] {
        return Err(TensorError::ShapeMismatch {
            op: "fan_series_eval",
            lhs: x.shape().to_vec(),
            rhs: vec![params.d_x()],
        });
    }
    let d_y = params.d_y();
    let z = params.w_in.matmul(&x.reshape(&[params.d_x(), 1])?)?; // [N,1]
    let periodic = params.w_cos.matmul(&z.cos())?.add(&params.w_sin.matmul(&z.sin())?)?;
    params.bias.reshape(&[d_y, 1])?.add(&periodic)?.reshape(&[d_y])
}

// ── 1D FAN layer ─────────────────────────────────────────────────────

/// FAN layer on `[batch, d_x]` features:
/// `[cos(x W_p) || sin(x W_p) || act(x W_g + b_g)]`.
///
/// The periodic branch has no bias in the 1D form; `periodic_bias` exists so
/// the layer can mirror the 2D variant, whose 1x1 convolutions carry one.
#[derive(Debug, Clone)]
pub struct FanLayer1d<E: Element> {
    /// `[d_x, d_p]` periodic projection.
    pub w_p: Tensor<E>,
    /// `[d_x, d_g]` nonlinear projection.
    pub w_g: Tensor<E>,
    /// `[d_g]`
    pub b_g: Tensor<E>,
    /// Optional `[d_p]` bias added before cos/sin.
    pub periodic_bias: Option<Tensor<E>>,
    pub activation: Activation,
}

impl<E: Element> FanLayer1d<E> {
    pub fn new<R: Rng>(d_x: usize, d_p: usize, d_g: usize, activation: Activation, rng: &mut R) -> Self {
        assert!(d_p >= 1 && d_g >= 1, "branch widths must be at least 1");
        FanLayer1d {
            w_p: Tensor::param_kaiming(&[d_x, d_p], d_x, rng),
            w_g: Tensor::param_kaiming(&[d_x, d_g], d_x, rng),
            b_g: Tensor::param_zeros(&[d_g]),
            periodic_bias: None,
            activation,
        }
    }

    pub fn d_p(&self) -> usize {
        self.w_p.shape()[1]
    }

    pub fn d_g(&self) -> usize {
        self.w_g.shape()[1]
    }

    /// Width of the concatenated output: `2*d_p + d_g`.
    pub fn output_dim(&self) -> usize {
        2 * self.d_p() + self.d_g()
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        if x.ndim() != 2 || x.shape()[1] != self.w_p.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "fan_layer_1d",
                lhs: x.shape().to_vec(),
                rhs: self.w_p.shape().to_vec(),
            });
        }
        let mut p = x.matmul(&self.w_p)?;
        if let Some(bias) = &self.periodic_bias {
            p = p.add(bias)?;
        }
        let g = x.matmul(&self.w_g)?.add(&self.b_g)?;
        concat(&[&p.cos(), &p.sin(), &self.activation.apply(&g)], 1)
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        let mut out = vec![
            (format!("{prefix}.w_p"), self.w_p.clone()),
            (format!("{prefix}.w_g"), self.w_g.clone()),
            (format!("{prefix}.b_g"), self.b_g.clone()),
        ];
        if let Some(b) = &self.periodic_bias {
            out.push((format!("{prefix}.b_p"), b.clone()));
        }
        out
    }
}

// ── 2D FAN layer ─────────────────────────────────────────────────────

/// FAN layer on `[B, C, H, W]` feature maps. Two 1x1 convolutions produce
/// the periodic pre-activation `P` and the nonlinear branch `G`; the output
/// concatenates `[cos(P) | sin(P) | act(G)]` along channels.
#[derive(Debug, Clone)]
pub struct FanLayer2d<E: Element> {
    /// `[d_p, C_in, 1, 1]`
    pub w_p: Tensor<E>,
    /// `[d_p]`
    pub b_p: Tensor<E>,
    /// `[d_g, C_in, 1, 1]`
    pub w_g: Tensor<E>,
    /// `[d_g]`
    pub b_g: Tensor<E>,
    pub activation: Activation,
}

/// Split a requested output width: `d_p = floor(p_ratio * c_out)` channels
/// for each trig block, the remaining `c_out - 2*d_p` for the nonlinear one.
pub fn split_channels(c_out: usize, p_ratio: f64) -> (usize, usize) {
    assert!(p_ratio > 0.0 && p_ratio < 0.5, "p_ratio must lie in (0, 0.5)");
    let d_p = ((c_out as f64) * p_ratio).floor() as usize;
    let d_p = d_p.max(1);
    (d_p, c_out - 2 * d_p)
}

impl<E: Element> FanLayer2d<E> {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, p_ratio: f64, activation: Activation, rng: &mut R) -> Self {
        let (d_p, d_g) = split_channels(c_out, p_ratio);
        assert!(d_g >= 1, "output width {c_out} too small for ratio {p_ratio}");
        FanLayer2d {
            w_p: Tensor::param_kaiming(&[d_p, c_in, 1, 1], c_in, rng),
            b_p: Tensor::param_zeros(&[d_p]),
            w_g: Tensor::param_kaiming(&[d_g, c_in, 1, 1], c_in, rng),
            b_g: Tensor::param_zeros(&[d_g]),
            activation,
        }
    }

    pub fn d_p(&self) -> usize {
        self.w_p.shape()[0]
    }

    pub fn d_g(&self) -> usize {
        self.w_g.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.w_p.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        2 * self.d_p() + self.d_g()
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let p = conv2d(x, &self.w_p, &self.b_p, 1, 0)?;
        let g = conv2d(x, &self.w_g, &self.b_g, 1, 0)?;
        concat(&[&p.cos(), &p.sin(), &self.activation.apply(&g)], 1)
    }

    /// The matching 1D layer (periodic bias included), for per-pixel
    /// comparison against the 2D path.
    pub fn as_pointwise_1d(&self) -> FanLayer1d<E> {
        let c_in = self.in_channels();
        // [d, c_in, 1, 1] -> [c_in, d]
        let to_2d = |w: &Tensor<E>, d: usize| {
            Tensor::new(w.to_vec(), &[d, c_in]).unwrap().transpose().unwrap().detached()
        };
        FanLayer1d {
            w_p: to_2d(&self.w_p, self.d_p()),
            w_g: to_2d(&self.w_g, self.d_g()),
            b_g: self.b_g.detached(),
            periodic_bias: Some(self.b_p.detached()),
            activation: self.activation,
        }
    }

    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        vec![
            (format!("{prefix}.w_p"), self.w_p.clone()),
            (format!("{prefix}.b_p"), self.b_p.clone()),
            (format!("{prefix}.w_g"), self.w_g.clone()),
            (format!("{prefix}.b_g"), self.b_g.clone()),
        ]
    }
}
