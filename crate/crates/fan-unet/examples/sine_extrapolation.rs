//! FAN vs parameter-matched MLP on sine extrapolation.
//!
//! Trains both models on sin(x) over [-4π, 4π] and evaluates on the unseen
//! range [4π, 8π]. The FAN model keeps extrapolating because the periodic
//! structure lives in its cos/sin features; the MLP does not.
//!
//! Run: cargo run --release --example sine_extrapolation

use fan_unet::demo::{run_sine_experiment, SineExperimentConfig};

fn main() {
    let cfg = SineExperimentConfig::default();
    println!(
        "training FAN and MLP: {} points, {} steps, lr {}, seed {}",
        cfg.train_points, cfg.steps, cfg.learning_rate, cfg.seed
    );
    let start = std::time::Instant::now();
    let out = run_sine_experiment(&cfg);
    println!("done in {:.1?}", start.elapsed());
    println!("{:<6} {:>7} {:>12} {:>12}", "model", "params", "train_mse", "ood_mse");
    for score in [&out.fan, &out.mlp] {
        println!(
            "{:<6} {:>7} {:>12.6} {:>12.6}",
            score.name, score.param_count, score.train_mse, score.ood_mse
        );
    }
    let dir = std::path::Path::new("target/sine_extrapolation");
    out.write_csv(&dir.join("fan_vs_mlp.csv")).unwrap();
    out.write_plot(&dir.join("fan_vs_mlp.png")).unwrap();
    println!("wrote {}", dir.display());
}
