//! Sine-extrapolation comparison: a tiny FAN model against a
//! parameter-matched MLP, trained identically on `sin(x)` over one range and
//! scored on a disjoint out-of-distribution range.
//!
//! The FAN model is one [`FanLayer1d`] followed by a linear readout; the MLP
//! is one GELU hidden layer sized so both models have exactly the same
//! number of learnable scalars.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fan::{Activation, FanLayer1d};
use crate::tensor::Tensor;
use crate::trainer::AdamW;

const TAU: f64 = std::f64::consts::TAU;

#[derive(Debug, Clone)]
pub struct SineExperimentConfig {
    pub train_points: usize,
    pub eval_points: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Periodic width of the FAN layer; nonlinear width is `2 * d_p`.
    pub d_p: usize,
    /// Training domain `[-train_span, train_span]` and OOD domain
    /// `[train_span, 2 * train_span]`, both in multiples of 2π.
    pub train_span_periods: f64,
}

impl Default for SineExperimentConfig {
    fn default() -> Self {
        SineExperimentConfig {
            train_points: 256,
            eval_points: 256,
            steps: 8000,
            learning_rate: 1e-2,
            seed: 0,
            d_p: 8,
            train_span_periods: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelScore {
    pub name: String,
    pub param_count: usize,
    pub train_mse: f64,
    pub ood_mse: f64,
}

#[derive(Debug)]
pub struct SineExperimentOutcome {
    pub fan: ModelScore,
    pub mlp: ModelScore,
    /// (x, sin x, fan prediction, mlp prediction) over train + OOD domains.
    pub curve: Vec<(f64, f64, f64, f64)>,
}

struct FanRegressor {
    layer: FanLayer1d<f64>,
    readout_w: Tensor<f64>,
    readout_b: Tensor<f64>,
}

impl FanRegressor {
    fn new(d_p: usize, rng: &mut ChaCha8Rng) -> Self {
        let layer = FanLayer1d::new(1, d_p, 2 * d_p, Activation::Gelu, rng);
        let width = layer.output_dim();
        FanRegressor {
            layer,
            readout_w: Tensor::param_kaiming(&[width, 1], width, rng),
            readout_b: Tensor::param_zeros(&[1]),
        }
    }

    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        self.layer
            .forward(x)
            .and_then(|h| h.matmul(&self.readout_w))
            .and_then(|y| y.add(&self.readout_b))
            .expect("fan regressor shapes are static")
    }

    fn parameters(&self) -> Vec<(String, Tensor<f64>)> {
        let mut p = self.layer.parameters("fan");
        p.push(("readout.w".into(), self.readout_w.clone()));
        p.push(("readout.b".into(), self.readout_b.clone()));
        p
    }
}

struct MlpRegressor {
    w1: Tensor<f64>,
    b1: Tensor<f64>,
    w2: Tensor<f64>,
    b2: Tensor<f64>,
}

impl MlpRegressor {
    fn new(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        MlpRegressor {
            w1: Tensor::param_kaiming(&[1, hidden], 1, rng),
            b1: Tensor::param_zeros(&[hidden]),
            w2: Tensor::param_kaiming(&[hidden, 1], hidden, rng),
            b2: Tensor::param_zeros(&[1]),
        }
    }

    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        x.matmul(&self.w1)
            .and_then(|h| h.add(&self.b1))
            .map(|h| h.gelu())
            .and_then(|h| h.matmul(&self.w2))
            .and_then(|y| y.add(&self.b2))
            .expect("mlp shapes are static")
    }

    fn parameters(&self) -> Vec<(String, Tensor<f64>)> {
        vec![
            ("w1".into(), self.w1.clone()),
            ("b1".into(), self.b1.clone()),
            ("w2".into(), self.w2.clone()),
            ("b2".into(), self.b2.clone()),
        ]
    }
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

fn train_regressor(
    forward: &dyn Fn(&Tensor<f64>) -> Tensor<f64>,
    params: &[(String, Tensor<f64>)],
    xs: &Tensor<f64>,
    ys: &Tensor<f64>,
    steps: usize,
    lr: f64,
) {
    let mut opt = AdamW::<f64>::new(lr, 0.0, steps as u64);
    opt.grad_clip_norm = None;
    opt.min_lr = lr * 0.05;
    for _ in 0..steps {
        let pred = forward(xs);
        let diff = pred.sub(ys).expect("shapes fixed");
        let loss = diff.mul(&diff).expect("shapes fixed").mean();
        for (_, p) in params {
            p.zero_grad();
        }
        loss.backward().expect("scalar loss");
        opt.apply_step(params);
    }
}

/// Run the comparison. Both models share the data, the optimizer settings
/// and the step budget; they differ only in architecture.
pub fn run_sine_experiment(cfg: &SineExperimentConfig) -> SineExperimentOutcome {
    let span = cfg.train_span_periods * TAU;
    let train_x = grid(-span, span, cfg.train_points);
    let ood_x = grid(span, 2.0 * span, cfg.eval_points);
    let train_y: Vec<f64> = train_x.iter().map(|&x| x.sin()).collect();
    let ood_y: Vec<f64> = ood_x.iter().map(|&x| x.sin()).collect();

    let xs = Tensor::new(train_x.clone(), &[cfg.train_points, 1]).unwrap();
    let ys = Tensor::new(train_y.clone(), &[cfg.train_points, 1]).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fan = FanRegressor::new(cfg.d_p, &mut rng);
    let fan_params = fan.parameters();
    let fan_count: usize = fan_params.iter().map(|(_, t)| t.numel()).sum();

    // hidden width solving 3h + 1 == fan parameter count, exact match
    let hidden = (fan_count - 1) / 3;
    let mlp = MlpRegressor::new(hidden, &mut rng);
    let mlp_params = mlp.parameters();
    let mlp_count: usize = mlp_params.iter().map(|(_, t)| t.numel()).sum();
    assert_eq!(fan_count, mlp_count, "models must be parameter-matched");

    train_regressor(&|x| fan.forward(x), &fan_params, &xs, &ys, cfg.steps, cfg.learning_rate);
    train_regressor(&|x| mlp.forward(x), &mlp_params, &xs, &ys, cfg.steps, cfg.learning_rate);

    let predict = |f: &dyn Fn(&Tensor<f64>) -> Tensor<f64>, xs: &[f64]| -> Vec<f64> {
        f(&Tensor::new(xs.to_vec(), &[xs.len(), 1]).unwrap()).to_vec()
    };
    let fan_train = predict(&|x| fan.forward(x), &train_x);
    let fan_ood = predict(&|x| fan.forward(x), &ood_x);
    let mlp_train = predict(&|x| mlp.forward(x), &train_x);
    let mlp_ood = predict(&|x| mlp.forward(x), &ood_x);

    let curve_x = grid(-span, 2.0 * span, 3 * cfg.eval_points / 2);
    let fan_curve = predict(&|x| fan.forward(x), &curve_x);
    let mlp_curve = predict(&|x| mlp.forward(x), &curve_x);
    let curve = curve_x
        .iter()
        .enumerate()
        .map(|(i, &x)| (x, x.sin(), fan_curve[i], mlp_curve[i]))
        .collect();

    SineExperimentOutcome {
        fan: ModelScore {
            name: "fan".into(),
            param_count: fan_count,
            train_mse: mse(&fan_train, &train_y),
            ood_mse: mse(&fan_ood, &ood_y),
        },
        mlp: ModelScore {
            name: "mlp".into(),
            param_count: mlp_count,
            train_mse: mse(&mlp_train, &train_y),
            ood_mse: mse(&mlp_ood, &ood_y),
        },
        curve,
    }
}

impl SineExperimentOutcome {
    /// `fan_vs_mlp.csv`: one row per model with train and OOD MSE.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut text = String::from("model,train_mse,ood_mse\n");
        for score in [&self.fan, &self.mlp] {
            text.push_str(&format!("{},{:.8},{:.8}\n", score.name, score.train_mse, score.ood_mse));
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Render target and predictions: black = sin, blue = FAN, red = MLP.
    pub fn write_plot(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let (w, h) = (900u32, 420u32);
        let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
        let xs: Vec<f64> = self.curve.iter().map(|c| c.0).collect();
        let (x_min, x_max) = (xs[0], xs[xs.len() - 1]);
        let (y_min, y_max) = (-2.5f64, 2.5f64);

        let to_px = |x: f64, y: f64| -> (i64, i64) {
            let px = ((x - x_min) / (x_max - x_min) * (w as f64 - 1.0)).round() as i64;
            let py = ((y_max - y.clamp(y_min, y_max)) / (y_max - y_min) * (h as f64 - 1.0)).round() as i64;
            (px, py)
        };
        let mut line = |a: (i64, i64), b: (i64, i64), color: [u8; 3]| {
            let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
            for s in 0..=steps {
                let x = a.0 + (b.0 - a.0) * s / steps;
                let y = a.1 + (b.1 - a.1) * s / steps;
                if x >= 0 && x < w as i64 && y >= 0 && y < h as i64 {
                    img.put_pixel(x as u32, y as u32, image::Rgb(color));
                }
            }
        };

        // axis at y = 0 and the train/OOD boundary
        line(to_px(x_min, 0.0), to_px(x_max, 0.0), [200, 200, 200]);
        let boundary = x_min + (x_max - x_min) * 2.0 / 3.0;
        line(to_px(boundary, y_min), to_px(boundary, y_max), [200, 200, 200]);

        for series in 0..3 {
            let color = [[0, 0, 0], [40, 90, 220], [220, 60, 50]][series];
            for pair in self.curve.windows(2) {
                let pick = |c: &(f64, f64, f64, f64)| match series {
                    0 => c.1,
                    1 => c.2,
                    _ => c.3,
                };
                line(to_px(pair[0].0, pick(&pair[0])), to_px(pair[1].0, pick(&pair[1])), color);
            }
        }
        img.save(path)?;
        Ok(())
    }
}
