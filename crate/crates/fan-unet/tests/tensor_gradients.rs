//! Finite-difference verification of every autodiff primitive.
//!
//! All checks run in f64 with the central-difference oracle from
//! `fan_unet::gradcheck`; tolerances follow the engine's contract of
//! rel err < 1e-5 on random inputs in [-2, 2].

use fan_unet::gradcheck::{check_gradients, DEFAULT_STEP};
use fan_unet::tensor::{bce_with_logits, bilinear_upsample2x, concat, conv2d, layer_norm, maxpool2x2, softmax, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;
const SEEDS: u64 = 50;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_param(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::param(data, shape).unwrap()
}

/// Random weights that turn a non-scalar output into a scalar loss, so the
/// full Jacobian is exercised rather than just row sums.
fn weighted_sum(y: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let w: Vec<f64> = (0..y.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = Tensor::new(w, y.shape()).unwrap();
    y.mul(&w).unwrap().sum()
}

#[test]
fn elementwise_binary_ops() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let a = rand_param(&[2, 3], &mut r, -2.0, 2.0);
        let b = rand_param(&[2, 3], &mut r, -2.0, 2.0);
        let mut wr = rng(seed + 1000);
        for (name, f) in [
            ("add", 0usize),
            ("sub", 1),
            ("mul", 2),
        ] {
            let mut wr2 = wr.clone();
            let report = check_gradients(
                name,
                &[a.clone(), b.clone()],
                &|ps| {
                    let y = match f {
                        0 => ps[0].add(&ps[1])?,
                        1 => ps[0].sub(&ps[1])?,
                        _ => ps[0].mul(&ps[1])?,
                    };
                    Ok(weighted_sum(&y, &mut wr2.clone()))
                },
                DEFAULT_STEP,
                TOL,
            )
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report}");
        }
        // div with denominator bounded away from zero
        let d = rand_param(&[2, 3], &mut r, 0.5, 2.0);
        let report = check_gradients(
            "div",
            &[a.clone(), d],
            &|ps| Ok(weighted_sum(&ps[0].div(&ps[1])?, &mut wr.clone())),
            DEFAULT_STEP,
            TOL,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report}");
    }
}

#[test]
fn broadcast_add_and_mul() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let a = rand_param(&[2, 4], &mut r, -2.0, 2.0);
        let bias = rand_param(&[4], &mut r, -2.0, 2.0);
        let leading = rand_param(&[1, 2, 4], &mut r, -2.0, 2.0);
        let mut wr = rng(seed + 2000);
        for op in 0..2 {
            let report = check_gradients(
                "broadcast",
                &[a.clone(), bias.clone(), leading.clone()],
                &|ps| {
                    let y = if op == 0 {
                        ps[0].add(&ps[1])?
                    } else {
                        ps[0].mul(&ps[1])?
                    };
                    let y = y.reshape(&[1, 2, 4])?.add(&ps[2])?;
                    Ok(weighted_sum(&y, &mut wr.clone()))
                },
                DEFAULT_STEP,
                TOL,
            )
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report}");
        }
    }
}

#[test]
fn unary_ops() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let x = rand_param(&[3, 3], &mut r, -2.0, 2.0);
        let pos = rand_param(&[3, 3], &mut r, 0.5, 2.5);
        let mut wr = rng(seed + 3000);
        for (name, which) in [
            ("sin", 0usize),
            ("cos", 1),
            ("sigmoid", 2),
            ("gelu", 3),
            ("exp", 4),
            ("neg", 5),
            ("scale", 6),
            ("tanh", 7),
        ] {
            let report = check_gradients(
                name,
                &[x.clone()],
                &|ps| {
                    let y = match which {
                        0 => ps[0].sin(),
                        1 => ps[0].cos(),
                        2 => ps[0].sigmoid(),
                        3 => ps[0].gelu(),
                        4 => ps[0].exp(),
                        5 => ps[0].neg(),
                        6 => ps[0].scale(1.7),
                        _ => ps[0].tanh_act(),
                    };
                    Ok(weighted_sum(&y, &mut wr.clone()))
                },
                DEFAULT_STEP,
                TOL,
            )
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report}");
        }
        let report = check_gradients(
            "log",
            &[pos],
            &|ps| Ok(weighted_sum(&ps[0].log()?, &mut wr.clone())),
            DEFAULT_STEP,
            TOL,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report}");
    }
}

#[test]
fn sin_slope_at_0_3_matches_cos() {
    // d/dx sin(x) at 0.3 is cos(0.3); the finite-difference slope agrees
    // to much better than 1e-6 relative error.
    let x = Tensor::param(vec![0.3], &[1]).unwrap();
    let report = check_gradients("sin@0.3", &[x.clone()], &|ps| Ok(ps[0].sin().sum()), DEFAULT_STEP, 1e-6).unwrap();
    assert!(report.passed(), "{report}");
    x.zero_grad();
    let loss = x.sin().sum();
    loss.backward().unwrap();
    assert!((x.grad().unwrap()[0] - 0.3f64.cos()).abs() < 1e-12);
}

#[test]
fn matmul_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let a = rand_param(&[3, 4], &mut r, -2.0, 2.0);
        let b = rand_param(&[4, 2], &mut r, -2.0, 2.0);
        let mut wr = rng(seed + 4000);
        let report = check_gradients(
            "matmul",
            &[a, b],
            &|ps| Ok(weighted_sum(&ps[0].matmul(&ps[1])?, &mut wr.clone())),
            DEFAULT_STEP,
            TOL,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report}");
    }
}

#[test]
fn matmul_sum_grad_is_column_sums_of_rhs() {
    // loss = sum(A@B): dL/dA[i,p] = sum_j B[p,j], identical for every row i.
    let mut r = rng(7);
    let a = rand_param(&[3, 4], &mut r, -2.0, 2.0);
    let b = rand_param(&[4, 5], &mut r, -2.0, 2.0);
    let loss = a.matmul(&b).unwrap().sum();
    loss.backward().unwrap();
    let ga = a.grad().unwrap();
    let bv = b.to_vec();
    for i in 0..3 {
        for p in 0..4 {
            let col_sum: f64 = (0..5).map(|j| bv[p * 5 + j]).sum();
            assert!((ga[i * 4 + p] - col_sum).abs() < 1e-12);
        }
    }
    // and the finite-difference oracle agrees tighter than 1e-6
    let report = check_gradients(
        "matmul-sum",
        &[a, b],
        &|ps| Ok(ps[0].matmul(&ps[1])?.sum()),
        DEFAULT_STEP,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn bmm_gradients() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let a = rand_param(&[2, 3, 4], &mut r, -2.0, 2.0);
        let b = rand_param(&[2, 4, 3], &mut r, -2.0, 2.0);
        let mut wr = rng(seed + 5000);
        let report = check_gradients(
            "bmm",
            &[a, b],
            &|ps| Ok(weighted_sum(&ps[0].bmm(&ps[1])?, &mut wr.clone())),
            DEFAULT_STEP,
            TOL,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report}");
    }
}

#[test]
fn conv2d_gradients_input_weight_bias() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let x = rand_param(&[1, 2, 5, 5], &mut r, -2.0, 2.0);
        let w = rand_param(&[3, 2, 3, 3], &mut r, -1.0, 1.0);
        let b = rand_param(&[3], &mut r, -1.0, 1.0);
        let mut wr = rng(seed + 6000);
        let report = check_gradients(
            "conv2d",
            &[x, w, b],
            &|ps| Ok(weighted_sum(&conv2d(&ps[0], &ps[1], &ps[2], 1, 1)?, &mut wr.clone())),
            DEFAULT_STEP,
            TOL,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report}");
    }
}

#[test]
fn conv2d_strided_gradients() {
    let mut r = rng(11);
    let x = rand_param(&[2, 2, 7, 7], &mut r, -2.0, 2.0);
    let w = rand_param(&[4, 2, 3, 3], &mut r, -1.0, 1.0);
    let b = rand_param(&[4], &mut r, -1.0, 1.0);
    let mut wr = rng(999);
    let report = check_gradients(
        "conv2d-stride2",
        &[x, w, b],
        &|ps| Ok(weighted_sum(&conv2d(&ps[0], &ps[1], &ps[2], 2, 1)?, &mut wr.clone())),
        DEFAULT_STEP,
        TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn maxpool_gradients() {
    // Values on a shuffled lattice keep pool entries separated by far more
    // than the FD step, so the max is locally smooth.
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut vals: Vec<f64> = (0..16).map(|i| -2.0 + i as f64 * 0.25).collect();
        for i in (1..16).rev() {
            let j = r.gen_range(0..=i);
            vals.swap(i, j);
        }
        let x = Tensor::param(vals, &[1, 1, 4, 4]).unwrap();
        let mut wr = rng(seed + 7000);
        let report = check_gradients(
            "maxpool2x2",
            &[x],
            &|ps| Ok(weighted_sum(&maxpool2x2(&ps[0])?, &mut wr.clone())),
            DEFAULT_STEP,
            TOL,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report}");
    }
}

#[test]
fn upsample_gradients() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let x = rand_param(&[1, 2, 3, 4], &mut r, -2.0, 2.0);
        let mut wr = rng(seed + 8000);
        let report = check_gradients(
            "bilinear_upsample2x",
            &[x],
            &|ps| Ok(weighted_sum(&bilinear_upsample2x(&ps[0])?, &mut wr.clone())),
            DEFAULT_STEP,
            TOL,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report}");
    }
}

#[test]
fn layer_norm_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let x = rand_param(&[2, 3, 4], &mut r, -2.0, 2.0);
        let gamma = rand_param(&[4], &mut r, 0.5, 1.5);
        let beta = rand_param(&[4], &mut r, -0.5, 0.5);
        let mut wr = rng(seed + 9000);
        let report = check_gradients(
            "layer_norm",
            &[x, gamma, beta],
            &|ps| Ok(weighted_sum(&layer_norm(&ps[0], &[2], &ps[1], &ps[2], 1e-5)?, &mut wr.clone())),
            DEFAULT_STEP,
            TOL,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report}");
    }
}

#[test]
fn layer_norm_channel_dim_gradients() {
    let mut r = rng(3);
    let x = rand_param(&[2, 3, 2, 2], &mut r, -2.0, 2.0);
    let gamma = rand_param(&[3], &mut r, 0.5, 1.5);
    let beta = rand_param(&[3], &mut r, -0.5, 0.5);
    let mut wr = rng(31);
    let report = check_gradients(
        "layer_norm-channels",
        &[x, gamma, beta],
        &|ps| Ok(weighted_sum(&layer_norm(&ps[0], &[1], &ps[1], &ps[2], 1e-5)?, &mut wr.clone())),
        DEFAULT_STEP,
        TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn softmax_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let x = rand_param(&[2, 5], &mut r, -2.0, 2.0);
        let mut wr = rng(seed + 10_000);
        let report = check_gradients(
            "softmax",
            &[x],
            &|ps| Ok(weighted_sum(&softmax(&ps[0], 1)?, &mut wr.clone())),
            DEFAULT_STEP,
            TOL,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report}");
    }
}

#[test]
fn bce_with_logits_gradients() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let x = rand_param(&[2, 4], &mut r, -2.0, 2.0);
        let t: Vec<f64> = (0..8).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let t = Tensor::new(t, &[2, 4]).unwrap();
        let mut wr = rng(seed + 11_000);
        let report = check_gradients(
            "bce_with_logits",
            &[x],
            &|ps| Ok(weighted_sum(&bce_with_logits(&ps[0], &t)?, &mut wr.clone())),
            DEFAULT_STEP,
            TOL,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report}");
    }
}

#[test]
fn shape_ops_gradients() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let a = rand_param(&[2, 3, 4], &mut r, -2.0, 2.0);
        let b = rand_param(&[2, 2, 4], &mut r, -2.0, 2.0);
        let mut wr = rng(seed + 12_000);
        let report = check_gradients(
            "reshape-permute-slice-concat",
            &[a, b],
            &|ps| {
                let cat = concat(&[&ps[0], &ps[1]], 1)?; // [2,5,4]
                let sl = cat.slice(1, 1, 4)?; // [2,3,4]
                let pm = sl.permute(&[2, 0, 1])?; // [4,2,3]
                let rs = pm.reshape(&[4, 6])?;
                Ok(weighted_sum(&rs, &mut wr.clone()))
            },
            DEFAULT_STEP,
            TOL,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report}");
    }
}

#[test]
fn random_composite_graphs() {
    // Four-op pipelines drawn from a mixed op set, exercised end to end.
    for seed in 0..SEEDS {
        let mut r = rng(seed + 500);
        let x = rand_param(&[2, 4], &mut r, -1.5, 1.5);
        let w = rand_param(&[4, 4], &mut r, -1.0, 1.0);
        let ops: Vec<usize> = (0..4).map(|_| r.gen_range(0..6)).collect();
        let mut wr = rng(seed + 13_000);
        let report = check_gradients(
            "composite",
            &[x, w],
            &|ps| {
                let mut y = ps[0].matmul(&ps[1])?;
                for &op in &ops {
                    y = match op {
                        0 => y.sin(),
                        1 => y.gelu(),
                        2 => y.sigmoid(),
                        3 => y.mul(&y)?,
                        4 => y.add_scalar(0.3),
                        _ => softmax(&y, 1)?,
                    };
                }
                Ok(weighted_sum(&y, &mut wr.clone()))
            },
            DEFAULT_STEP,
            TOL,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed} ops {ops:?}: {report}");
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    // grad of (a*f + b*g) == a*grad(f) + b*grad(g)
    let mut r = rng(42);
    let x = rand_param(&[3, 3], &mut r, -2.0, 2.0);
    let (a, b) = (1.7, -0.6);

    let f = |x: &Tensor<f64>| x.sin().sum();
    let g = |x: &Tensor<f64>| x.mul(x).unwrap().mean();

    x.zero_grad();
    f(&x).backward().unwrap();
    let gf = x.grad().unwrap();

    x.zero_grad();
    g(&x).backward().unwrap();
    let gg = x.grad().unwrap();

    x.zero_grad();
    f(&x).scale(a).add(&g(&x).scale(b)).unwrap().backward().unwrap();
    let combined = x.grad().unwrap();

    for i in 0..combined.len() {
        assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
    }
}
