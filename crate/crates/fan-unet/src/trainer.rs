//! Optimization loop, checkpointing and run-directory bookkeeping.
//!
//! One run directory holds `config.json` (the resolved configuration echo),
//! `history.csv` with one row per epoch, and the `best.ckpt` / `last.ckpt`
//! archives. Checkpoints embed optimizer state, so resuming from `last.ckpt`
//! continues bit-for-bit where the interrupted run left off.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::data::{augment, LoadedDataset, SegmentationBatch};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, ConfusionAccumulator, LossConfig, MetricsReport};
use crate::model::{FanUnet, UNetConfig};
use crate::tensor::{c, fl, Element, Tensor};

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,miou,dsc,acc,spe,sen";

// ── Optimizer ────────────────────────────────────────────────────────

/// Adam with decoupled weight decay and a cosine learning-rate schedule.
pub struct AdamW<E: Element> {
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: Option<f64>,
    pub total_steps: u64,
    pub step: u64,
    first_moment: Vec<Vec<E>>,
    second_moment: Vec<Vec<E>>,
}

impl<E: Element> AdamW<E> {
    pub fn new(lr: f64, weight_decay: f64, total_steps: u64) -> Self {
        AdamW {
            lr,
            min_lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            grad_clip_norm: Some(1.0),
            total_steps,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// Cosine decay from `lr` to `min_lr`; pure in (step, config).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps <= 1 {
            return self.lr;
        }
        let progress = (step.min(self.total_steps) as f64 - 1.0).max(0.0) / (self.total_steps as f64 - 1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    fn ensure_state(&mut self, params: &[(String, Tensor<E>)]) {
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|(_, p)| vec![E::zero(); p.numel()]).collect();
            self.second_moment = params.iter().map(|(_, p)| vec![E::zero(); p.numel()]).collect();
        }
    }

    /// Apply one update from the gradients currently stored on `params`.
    /// Parameters with no gradient are treated as zero-gradient (weight
    /// decay still applies).
    pub fn apply_step(&mut self, params: &[(String, Tensor<E>)]) {
        self.ensure_state(params);
        self.step += 1;
        let lr = self.lr_at(self.step);

        let clip_scale = match self.grad_clip_norm {
            Some(max_norm) => {
                let mut sq_sum = 0.0f64;
                for (_, p) in params {
                    if let Some(g) = p.grad() {
                        sq_sum += g.iter().map(|&v| fl(v) * fl(v)).sum::<f64>();
                    }
                }
                let norm = sq_sum.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        let b1 = c::<E>(self.beta1);
        let b2 = c::<E>(self.beta2);
        let one = E::one();
        let bias1 = c::<E>(1.0 - self.beta1.powi(self.step as i32));
        let bias2 = c::<E>(1.0 - self.beta2.powi(self.step as i32));
        let lr_e = c::<E>(lr);
        let eps = c::<E>(self.eps);
        let wd = c::<E>(self.weight_decay);
        let clip = c::<E>(clip_scale);

        for (idx, (_, p)) in params.iter().enumerate() {
            let grad = p.grad();
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            let mut data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(E::zero(), |g| g[i]) * clip;
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] = data[i] - lr_e * (m_hat / (v_hat.sqrt() + eps)) - lr_e * wd * data[i];
            }
        }
    }

    /// Moment buffers as named tensors (for checkpointing).
    pub fn state_tensors(&self, params: &[(String, Tensor<E>)]) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        for ((name, p), (m, v)) in params.iter().zip(self.first_moment.iter().zip(&self.second_moment)) {
            out.push((format!("opt.m.{name}"), Tensor::new(m.clone(), p.shape()).unwrap()));
            out.push((format!("opt.v.{name}"), Tensor::new(v.clone(), p.shape()).unwrap()));
        }
        out
    }

    /// Restore moment buffers saved by [`Self::state_tensors`].
    pub fn restore_state(&mut self, ckpt: &Checkpoint, params: &[(String, Tensor<E>)], step: u64) -> Result<()> {
        self.ensure_state(params);
        self.step = step;
        for (idx, (name, p)) in params.iter().enumerate() {
            for (prefix, buf) in [("opt.m.", &mut self.first_moment[idx]), ("opt.v.", &mut self.second_moment[idx])] {
                let key = format!("{prefix}{name}");
                let rec = ckpt
                    .tensor(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state '{key}'")))?;
                if rec.shape != p.shape() {
                    return Err(Error::Checkpoint(format!("optimizer state '{key}' shape mismatch")));
                }
                *buf = rec.values.iter().map(|&x| c::<E>(x)).collect();
            }
        }
        Ok(())
    }
}

// ── Train configuration ──────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
    pub loss: LossConfig,
    pub model: UNetConfig,
    pub out_dir: PathBuf,
    pub resume_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            augment: true,
            loss: LossConfig::default(),
            model: UNetConfig::default(),
            out_dir: PathBuf::from("runs/default"),
            resume_from: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// One history row.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub metrics: MetricsReport,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.train_loss,
            self.val_loss,
            self.metrics.miou,
            self.metrics.dsc,
            self.metrics.acc,
            self.metrics.spe,
            self.metrics.sen
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_dsc: f64,
    pub best_epoch: usize,
    pub params_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: UNetConfig,
    epochs_completed: usize,
    optimizer_step: u64,
    best_dsc: f64,
    train_config: TrainConfig,
}

fn epoch_seed(seed: u64, epoch: usize, salt: u64) -> u64 {
    (seed ^ salt)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch as u64)
        .wrapping_mul(0xD1B5_4A32_D192_ED03)
}

// ── Training ─────────────────────────────────────────────────────────

fn forward_loss<E: Element>(
    model: &FanUnet<E>,
    cfg: &LossConfig,
    batch: &SegmentationBatch<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let logits = model.forward(&batch.images)?;
    let loss = combined_loss(cfg, &logits, &batch.masks)?;
    Ok((logits, loss))
}

/// Evaluate a model over a dataset: mean loss plus pooled confusion metrics.
pub fn evaluate_model<E: Element>(
    model: &FanUnet<E>,
    loss_cfg: &LossConfig,
    data: &LoadedDataset<E>,
    batch_size: usize,
) -> Result<(f64, MetricsReport)> {
    let order = data.epoch_order(None);
    let mut acc = ConfusionAccumulator::default();
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for batch in data.batches(batch_size, &order) {
        let (logits, loss) = forward_loss(model, loss_cfg, &batch)?;
        acc.add(&logits, &batch.masks, 0.5)?;
        loss_sum += fl(loss.item());
        batches += 1;
    }
    Ok((loss_sum / batches.max(1) as f64, acc.report()))
}

/// Run the optimization loop. Writes `config.json`, `history.csv`,
/// `best.ckpt` (highest validation DSC) and `last.ckpt` under
/// `cfg.out_dir`; returns the per-epoch history.
pub fn train<E: Element>(
    cfg: &TrainConfig,
    train_data: &LoadedDataset<E>,
    val_data: Option<&LoadedDataset<E>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if train_data.resolution != cfg.model.input_resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} does not match model input resolution {}",
            train_data.resolution, cfg.model.input_resolution
        )));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.json"), serde_json::to_string_pretty(cfg).unwrap())?;

    let model = FanUnet::<E>::new(&cfg.model, cfg.seed)?;
    let params = model.parameters();
    let steps_per_epoch = train_data.len().div_ceil(cfg.batch_size) as u64;
    let mut opt = AdamW::<E>::new(cfg.learning_rate, cfg.weight_decay, cfg.epochs as u64 * steps_per_epoch);

    let mut start_epoch = 0usize;
    let mut best_dsc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut history: Vec<EpochRecord> = Vec::new();

    if let Some(resume) = &cfg.resume_from {
        let ckpt = checkpoint::load(resume)?;
        let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("incompatible metadata in {}: {e}", resume.display())))?;
        if meta.model.input_resolution != cfg.model.input_resolution {
            return Err(Error::Config(format!(
                "checkpoint was trained at resolution {}, config says {}",
                meta.model.input_resolution, cfg.model.input_resolution
            )));
        }
        checkpoint::restore_parameters(&ckpt, &params)?;
        opt.restore_state(&ckpt, &params, meta.optimizer_step)?;
        start_epoch = meta.epochs_completed;
        best_dsc = meta.best_dsc;
    }

    let history_path = cfg.out_dir.join("history.csv");
    let mut history_file = if start_epoch == 0 {
        let mut f = std::fs::File::create(&history_path)?;
        writeln!(f, "{HISTORY_HEADER}")?;
        f
    } else {
        std::fs::OpenOptions::new().create(true).append(true).open(&history_path)?
    };

    let eval_data = val_data.unwrap_or(train_data);
    for epoch in start_epoch..cfg.epochs {
        let order = train_data.epoch_order(Some(epoch_seed(cfg.seed, epoch, 0x51)));
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (bi, batch) in train_data.batches(cfg.batch_size, &order).into_iter().enumerate() {
            let batch = if cfg.augment {
                augment(&batch, epoch_seed(cfg.seed, epoch, 0xA6 + bi as u64))
            } else {
                batch
            };
            let (_, loss) = forward_loss(&model, &cfg.loss, &batch)?;
            let loss_val = fl(loss.item());
            if !loss_val.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, step {} (batch {bi})",
                    opt.step + 1
                )));
            }
            model.zero_grad();
            loss.backward().map_err(Error::Tensor)?;
            opt.apply_step(&params);
            loss_sum += loss_val;
            n_batches += 1;
        }
        let train_loss = loss_sum / n_batches.max(1) as f64;
        let (val_loss, metrics) = evaluate_model(&model, &cfg.loss, eval_data, cfg.batch_size)?;

        let record = EpochRecord { epoch: epoch + 1, train_loss, val_loss, metrics };
        writeln!(history_file, "{}", record.csv_row())?;
        history_file.flush()?;

        let save_with = |path: &Path, best: f64| -> Result<()> {
            let meta = CheckpointMeta {
                model: cfg.model.clone(),
                epochs_completed: epoch + 1,
                optimizer_step: opt.step,
                best_dsc: best,
                train_config: cfg.clone(),
            };
            let mut tensors = params.clone();
            tensors.extend(opt.state_tensors(&params));
            checkpoint::save(path, &serde_json::to_value(&meta).unwrap(), &tensors)
        };
        if metrics.dsc > best_dsc {
            best_dsc = metrics.dsc;
            best_epoch = epoch + 1;
            save_with(&cfg.out_dir.join("best.ckpt"), best_dsc)?;
        }
        save_with(&cfg.out_dir.join("last.ckpt"), best_dsc)?;
        history.push(record);
    }

    Ok(TrainOutcome { history, best_dsc, best_epoch, params_count: model.count_parameters() })
}

/// Load a checkpoint and score it on a dataset split.
pub fn evaluate_run<E: Element>(checkpoint_path: &Path, data: &LoadedDataset<E>, batch_size: usize) -> Result<MetricsReport> {
    let (model, meta) = load_model::<E>(checkpoint_path)?;
    if data.resolution != meta.input_resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} does not match checkpoint resolution {}",
            data.resolution, meta.input_resolution
        )));
    }
    let loss_cfg = LossConfig::default();
    let (_, report) = evaluate_model(&model, &loss_cfg, data, batch_size)?;
    Ok(report)
}

/// Rebuild the model a checkpoint was saved from and restore its weights.
pub fn load_model<E: Element>(checkpoint_path: &Path) -> Result<(FanUnet<E>, UNetConfig)> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("incompatible metadata: {e}")))?;
    let model = FanUnet::<E>::new(&meta.model, 0)?;
    checkpoint::restore_parameters(&ckpt, &model.parameters())?;
    Ok((model, meta.model))
}
