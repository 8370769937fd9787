//! Central finite-difference gradient checking.
//!
//! Verifies reverse-mode gradients against numerical differentiation of the
//! forward pass only, so it stays independent of every backward rule it
//! checks. Run in `f64`: the default step of 1e-4 puts the truncation error
//! far below the tolerances used by the test suite.

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    /// Worst normalized error over all checked parameter elements.
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} (max rel err {:.3e}, tol {:.1e}, {} elements)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.elements_checked
        )
    }
}

/// Normalized difference: absolute when both values are small, relative
/// otherwise.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

/// Check the reverse-mode gradient of `f` with respect to every leaf in
/// `params` using central finite differences with step `step`.
///
/// `f` must rebuild its graph from the passed leaves on every call and
/// return a scalar loss. Parameter buffers are perturbed in place and
/// restored afterwards.
pub fn check_gradients(
    name: &str,
    params: &[Tensor<f64>],
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>, TensorError>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, TensorError> {
    for p in params {
        p.zero_grad();
    }
    let loss = f(params)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut max_rel_err = 0.0f64;
    let mut elements_checked = 0usize;
    for (p, pg) in params.iter().zip(&analytic) {
        for i in 0..p.numel() {
            let original = p.data()[i];
            p.data_mut()[i] = original + step;
            let plus = f(params)?.item();
            p.data_mut()[i] = original - step;
            let minus = f(params)?.item();
            p.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * step);
            max_rel_err = max_rel_err.max(rel_err(pg[i], numeric));
            elements_checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err,
        tolerance,
        elements_checked,
    })
}

// ── Full suite over primitives and composite layers ──────────────────

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_param(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let numel = shape.iter().product();
    Tensor::param((0..numel).map(|_| rng.gen_range(lo..hi)).collect(), shape).unwrap()
}

fn weight_like(t: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let w: Vec<f64> = (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(w, t.shape()).unwrap()
}

fn scalarize(y: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let w = weight_like(y, rng);
    y.mul(&w).unwrap().sum()
}

/// Worst-case check of one op across `seeds` random draws.
fn seeded_check(
    name: &str,
    seeds: u64,
    tolerance: f64,
    make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    f: &dyn Fn(&[Tensor<f64>], &mut ChaCha8Rng) -> Result<Tensor<f64>, TensorError>,
) -> GradCheckReport {
    let mut worst = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        tolerance,
        elements_checked: 0,
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = make(&mut rng);
        let mut loss_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let report = check_gradients(
            name,
            &params,
            &|ps| f(ps, &mut loss_rng.clone()),
            DEFAULT_STEP,
            tolerance,
        )
        .expect("gradient check setup must be valid");
        worst.max_rel_err = worst.max_rel_err.max(report.max_rel_err);
        worst.elements_checked += report.elements_checked;
    }
    worst
}

/// Finite-difference verification of every primitive and every composite
/// layer, `seeds` random draws each: rel err < 1e-5 for primitives and
/// layers, < 1e-3 for a tiny end-to-end model.
pub fn full_suite(seeds: u64) -> Vec<GradCheckReport> {
    use crate::attention::WindowAttention;
    use crate::fan::{Activation, FanLayer1d, FanLayer2d};
    use crate::loss::{combined_loss, LossConfig};
    use crate::model::{FanUnet, UNetConfig, VisionFanBlock, VisionFanBlockConfig};
    use crate::tensor::{bce_with_logits, bilinear_upsample2x, conv2d, layer_norm, maxpool2x2, softmax, concat};

    const TOL: f64 = 1e-5;
    let mut reports = Vec::new();

    reports.push(seeded_check(
        "add/mul/div (broadcast)",
        seeds,
        TOL,
        &|r| vec![rand_param(&[2, 4], r, -2.0, 2.0), rand_param(&[4], r, 0.5, 2.0)],
        &|ps, r| {
            let y = ps[0].add(&ps[1])?.mul(&ps[1])?.div(&ps[1])?;
            Ok(scalarize(&y, r))
        },
    ));
    reports.push(seeded_check(
        "sin/cos/sigmoid/gelu/exp",
        seeds,
        TOL,
        &|r| vec![rand_param(&[3, 3], r, -2.0, 2.0)],
        &|ps, r| {
            let y = ps[0].sin().add(&ps[0].cos())?.add(&ps[0].sigmoid())?.add(&ps[0].gelu())?.add(&ps[0].exp())?;
            Ok(scalarize(&y, r))
        },
    ));
    reports.push(seeded_check(
        "log",
        seeds,
        TOL,
        &|r| vec![rand_param(&[3, 3], r, 0.5, 2.5)],
        &|ps, r| Ok(scalarize(&ps[0].log()?, r)),
    ));
    reports.push(seeded_check(
        "matmul",
        seeds,
        TOL,
        &|r| vec![rand_param(&[3, 4], r, -2.0, 2.0), rand_param(&[4, 2], r, -2.0, 2.0)],
        &|ps, r| Ok(scalarize(&ps[0].matmul(&ps[1])?, r)),
    ));
    reports.push(seeded_check(
        "bmm",
        seeds,
        TOL,
        &|r| vec![rand_param(&[2, 3, 4], r, -2.0, 2.0), rand_param(&[2, 4, 3], r, -2.0, 2.0)],
        &|ps, r| Ok(scalarize(&ps[0].bmm(&ps[1])?, r)),
    ));
    reports.push(seeded_check(
        "mean/sum/reshape/permute/slice/concat",
        seeds,
        TOL,
        &|r| vec![rand_param(&[2, 3, 4], r, -2.0, 2.0), rand_param(&[2, 2, 4], r, -2.0, 2.0)],
        &|ps, r| {
            let cat = concat(&[&ps[0], &ps[1]], 1)?;
            let y = cat.slice(1, 1, 4)?.permute(&[2, 0, 1])?.reshape(&[4, 6])?;
            Ok(scalarize(&y, r)?.add(&ps[0].mean())?.add(&ps[1].sum().scale(0.1))?.sum())
        },
    ));
    reports.push(seeded_check(
        "conv2d",
        seeds,
        TOL,
        &|r| {
            vec![
                rand_param(&[1, 2, 5, 5], r, -2.0, 2.0),
                rand_param(&[3, 2, 3, 3], r, -1.0, 1.0),
                rand_param(&[3], r, -1.0, 1.0),
            ]
        },
        &|ps, r| Ok(scalarize(&conv2d(&ps[0], &ps[1], &ps[2], 1, 1)?, r)),
    ));
    reports.push(seeded_check(
        "maxpool2x2",
        seeds,
        TOL,
        &|r| {
            // shuffled lattice keeps entries well separated (no FD kinks)
            let mut vals: Vec<f64> = (0..16).map(|i| -2.0 + i as f64 * 0.25).collect();
            for i in (1..16usize).rev() {
                let j = r.gen_range(0..=i);
                vals.swap(i, j);
            }
            vec![Tensor::param(vals, &[1, 1, 4, 4]).unwrap()]
        },
        &|ps, r| Ok(scalarize(&maxpool2x2(&ps[0])?, r)),
    ));
    reports.push(seeded_check(
        "bilinear_upsample2x",
        seeds,
        TOL,
        &|r| vec![rand_param(&[1, 2, 3, 4], r, -2.0, 2.0)],
        &|ps, r| Ok(scalarize(&bilinear_upsample2x(&ps[0])?, r)),
    ));
    reports.push(seeded_check(
        "layer_norm",
        seeds,
        TOL,
        &|r| {
            vec![
                rand_param(&[2, 3, 4], r, -2.0, 2.0),
                rand_param(&[3], r, 0.5, 1.5),
                rand_param(&[3], r, -0.5, 0.5),
            ]
        },
        &|ps, r| Ok(scalarize(&layer_norm(&ps[0], &[1], &ps[1], &ps[2], 1e-5)?, r)),
    ));
    reports.push(seeded_check(
        "softmax",
        seeds,
        TOL,
        &|r| vec![rand_param(&[2, 5], r, -2.0, 2.0)],
        &|ps, r| Ok(scalarize(&softmax(&ps[0], 1)?, r)),
    ));
    reports.push(seeded_check(
        "bce_with_logits",
        seeds,
        TOL,
        &|r| {
            let t: Vec<f64> = (0..8).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            vec![rand_param(&[2, 4], r, -2.0, 2.0), Tensor::param(t, &[2, 4]).unwrap()]
        },
        &|ps, r| Ok(scalarize(&bce_with_logits(&ps[0], &ps[1].detached())?, r)),
    ));

    reports.push(seeded_check(
        "fan_layer_1d",
        seeds,
        TOL,
        &|r| {
            let layer = FanLayer1d::<f64>::new(3, 2, 3, Activation::Gelu, r);
            vec![
                rand_param(&[2, 3], r, -2.0, 2.0),
                layer.w_p,
                layer.w_g,
                layer.b_g.detached_param(r),
            ]
        },
        &|ps, r| {
            let layer = FanLayer1d {
                w_p: ps[1].clone(),
                w_g: ps[2].clone(),
                b_g: ps[3].clone(),
                periodic_bias: None,
                activation: Activation::Gelu,
            };
            Ok(scalarize(&layer.forward(&ps[0])?, r))
        },
    ));
    reports.push(seeded_check(
        "fan_layer_2d",
        seeds,
        TOL,
        &|r| {
            let layer = FanLayer2d::<f64>::new(3, 8, 0.25, Activation::Gelu, r);
            vec![
                rand_param(&[1, 3, 4, 4], r, -2.0, 2.0),
                layer.w_p,
                layer.b_p.detached_param(r),
                layer.w_g,
                layer.b_g.detached_param(r),
            ]
        },
        &|ps, r| {
            let layer = FanLayer2d {
                w_p: ps[1].clone(),
                b_p: ps[2].clone(),
                w_g: ps[3].clone(),
                b_g: ps[4].clone(),
                activation: Activation::Gelu,
            };
            Ok(scalarize(&layer.forward(&ps[0])?, r))
        },
    ));
    reports.push(seeded_check(
        "window_attention",
        seeds,
        TOL,
        &|r| {
            let attn = WindowAttention::<f64>::new(4, 2, 2, r);
            let mut ps = vec![rand_param(&[1, 4, 4, 4], r, -1.0, 1.0)];
            ps.extend(attn.parameters("a").into_iter().map(|(_, t)| t));
            ps
        },
        &|ps, r| {
            let attn = WindowAttention {
                window: 2,
                heads: 2,
                w_q: ps[1].clone(),
                b_q: ps[2].clone(),
                w_k: ps[3].clone(),
                b_k: ps[4].clone(),
                w_v: ps[5].clone(),
                b_v: ps[6].clone(),
                w_o: ps[7].clone(),
                b_o: ps[8].clone(),
            };
            Ok(scalarize(&attn.forward(&ps[0])?, r))
        },
    ));
    reports.push(seeded_check(
        "vision_fan_block",
        seeds,
        TOL,
        &|r| {
            let cfg = VisionFanBlockConfig {
                channels: 4,
                window_size: 2,
                num_heads: 2,
                p_ratio: 0.25,
                enable_positional: true,
                enable_attention: true,
                enable_fan_ffn: true,
            };
            let block = VisionFanBlock::<f64>::new(&cfg, 4, 4, r).unwrap();
            let mut ps = vec![rand_param(&[1, 4, 4, 4], r, -1.0, 1.0)];
            let mut named = Vec::new();
            block.parameters("b", &mut named);
            ps.extend(named.into_iter().map(|(_, t)| t));
            // keep the block alive through its parameter handles
            std::mem::forget(block);
            ps
        },
        &|_, _| unreachable!("replaced below"),
    ));
    // the block check needs the block itself, not just raw tensors; rebuild
    // it around shared parameter handles instead.
    let idx = reports.len() - 1;
    reports[idx] = vision_fan_block_check(seeds);

    reports.push(seeded_check(
        "combined_loss",
        seeds,
        1e-4,
        &|r| {
            let t: Vec<f64> = (0..32).map(|_| if r.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
            vec![rand_param(&[2, 1, 4, 4], r, -2.0, 2.0), Tensor::param(t, &[2, 1, 4, 4]).unwrap()]
        },
        &|ps, _| {
            combined_loss(&LossConfig::default(), &ps[0], &ps[1].detached()).map_err(|_| {
                TensorError::InvalidShape { op: "combined_loss", msg: "loss setup".into() }
            })
        },
    ));

    // tiny full model: resolution 16, base 4, one stage
    let model_cfg = UNetConfig {
        input_resolution: 16,
        num_stages: 1,
        base_channels: 4,
        window_size: 4,
        num_heads: 2,
        ..UNetConfig::default()
    };
    let mut worst = GradCheckReport {
        name: "fan_unet (tiny, end-to-end)".into(),
        max_rel_err: 0.0,
        tolerance: 1e-3,
        elements_checked: 0,
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let model = FanUnet::<f64>::new(&model_cfg, seed).unwrap();
        let x = rand_param(&[1, 3, 16, 16], &mut rng, 0.0, 1.0).detached();
        let mask: Vec<f64> = (0..256).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::new(mask, &[1, 1, 16, 16]).unwrap();
        let params: Vec<Tensor<f64>> = model.parameters().into_iter().map(|(_, t)| t).collect();
        let report = check_gradients(
            "fan_unet",
            &params,
            &|_| {
                let logits = model.forward(&x).map_err(|_| TensorError::InvalidShape {
                    op: "fan_unet",
                    msg: "forward".into(),
                })?;
                combined_loss(&LossConfig::default(), &logits, &mask).map_err(|_| TensorError::InvalidShape {
                    op: "fan_unet",
                    msg: "loss".into(),
                })
            },
            DEFAULT_STEP,
            1e-3,
        )
        .expect("model gradient check must run");
        worst.max_rel_err = worst.max_rel_err.max(report.max_rel_err);
        worst.elements_checked += report.elements_checked;
    }
    reports.push(worst);

    reports
}

fn vision_fan_block_check(seeds: u64) -> GradCheckReport {
    use crate::model::{VisionFanBlock, VisionFanBlockConfig};

    let mut worst = GradCheckReport {
        name: "vision_fan_block".into(),
        max_rel_err: 0.0,
        tolerance: 1e-5,
        elements_checked: 0,
    };
    let cfg = VisionFanBlockConfig {
        channels: 4,
        window_size: 2,
        num_heads: 2,
        p_ratio: 0.25,
        enable_positional: true,
        enable_attention: true,
        enable_fan_ffn: true,
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB10C);
        let block = VisionFanBlock::<f64>::new(&cfg, 4, 4, &mut rng).unwrap();
        let x = rand_param(&[1, 4, 4, 4], &mut rng, -1.0, 1.0);
        let mut named = Vec::new();
        block.parameters("b", &mut named);
        let mut params = vec![x];
        params.extend(named.into_iter().map(|(_, t)| t));
        let mut loss_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFACE);
        let report = check_gradients(
            "vision_fan_block",
            &params,
            &|ps| {
                let y = block.forward(&ps[0])?;
                Ok(scalarize(&y, &mut loss_rng.clone()))
            },
            DEFAULT_STEP,
            1e-5,
        )
        .expect("block gradient check must run");
        worst.max_rel_err = worst.max_rel_err.max(report.max_rel_err);
        worst.elements_checked += report.elements_checked;
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_on_a_correct_gradient() {
        let x = Tensor::param(vec![0.4, -1.1, 0.9], &[3]).unwrap();
        let report = check_gradients(
            "sin-square",
            &[x],
            &|ps| Ok(ps[0].sin().mul(&ps[0].sin())?.sum()),
            DEFAULT_STEP,
            1e-7,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // exp's derivative is exp, so checking sin against exp's forward fails.
        let x = Tensor::param(vec![0.3], &[1]).unwrap();
        let loss = x.sin().sum();
        loss.backward().unwrap();
        let analytic = x.grad().unwrap()[0];
        let wrong = analytic + 0.5;
        assert!(rel_err(wrong, analytic) > 0.1);
    }
}
