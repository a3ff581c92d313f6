//! The training loop: seeded batching and augmentation, deep-supervision
//! loss, AdamW with the warmup/cosine schedule, per-step logging and
//! periodic checkpoints.

use crate::config::{LossKind, RunConfig};
use crate::data::{augment, load_sample, sample_rng, scan_dataset, split, stack_batch, write_warning_manifest, SampleRecord};
use crate::{checkpoint, Error, Result};
use nusg_core::blocks::Mode;
use nusg_core::loss::{deep_supervision_loss, weighted_focal_loss, FocalParams};
use nusg_core::model::Model;
use nusg_core::optim::{lr_at, AdamW, AdamWConfig, Schedule};
use nusg_core::params::ParamId;
use nusg_core::rng::mix_seed;
use nusg_core::tensor::Graph;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut text = String::from("step,loss,lr,wall_ms\n");
        for r in &self.steps {
            text.push_str(&format!("{},{:.8},{:.10},{:.3}\n", r.step, r.loss, r.lr, r.wall_ms));
        }
        std::fs::write(path, text).map_err(Error::io(path))
    }

    /// Trailing moving average of the loss column; entry i averages the
    /// window ending at step i (only defined once the window is full).
    pub fn moving_average(&self, window: usize) -> Vec<(u64, f64)> {
        let losses: Vec<f64> = self.steps.iter().map(|r| r.loss).collect();
        (window - 1..losses.len())
            .map(|i| {
                let s: f64 = losses[i + 1 - window..=i].iter().sum();
                (self.steps[i].step, s / window as f64)
            })
            .collect()
    }
}

pub struct TrainSummary {
    pub model: Model<f32>,
    pub log: TrainLog,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Scan, split and train on the training partition.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    let (records, warnings) = scan_dataset(&cfg.data_root)?;
    if !warnings.is_empty() {
        let manifest = cfg.log.with_file_name("scan_warnings.txt");
        write_warning_manifest(&manifest, &warnings)?;
    }
    let (train_records_v, _test) = split(&records, cfg.train_fraction, cfg.seed)?;
    train_on(cfg, &train_records_v)
}

/// Train on an explicit record list (no split); the toolkit's overfit
/// smoke tests drive this directly.
pub fn train_on(cfg: &RunConfig, records: &[SampleRecord]) -> Result<TrainSummary> {
    if records.is_empty() {
        return Err(Error::Data("no training records".into()));
    }
    let size = cfg.input_size;
    let mut model = Model::<f32>::build(cfg.arch, cfg.seed)?;
    let schedule = Schedule::new(cfg.base_lr, cfg.warmup_steps, cfg.steps)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        },
        model.store(),
    );
    let focal = FocalParams {
        gamma: cfg.focal_gamma,
        alpha: cfg.focal_alpha,
        lambda_max: cfg.focal_lambda_max,
        mu_ref: cfg.focal_mu_ref,
    };

    let n = records.len();
    let batch = cfg.batch_size.min(n);
    let batches_per_epoch = (n / batch).max(1) as u64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut order_epoch = u64::MAX;
    let mut log = TrainLog::default();
    let mut saved_any = false;

    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let epoch = step / batches_per_epoch;
        if epoch != order_epoch {
            order = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch, u64::MAX));
            order.shuffle(&mut rng);
            order_epoch = epoch;
        }
        let slot = (step % batches_per_epoch) as usize;
        let picks = &order[slot * batch..slot * batch + batch];

        let mut samples = Vec::with_capacity(picks.len());
        for &idx in picks {
            let (img, msk) = load_sample(&records[idx], (size, size))?;
            if cfg.augment {
                let mut rng = sample_rng(cfg.seed, epoch, idx as u64);
                samples.push(augment(&img, &msk, &cfg.aug, &mut rng));
            } else {
                samples.push((img, msk));
            }
        }
        let (images, masks) = stack_batch(&samples);

        let mut graph = Graph::new();
        let x = graph.constant(images);
        let fwd = model.forward(&mut graph, x, Mode::Train)?;
        let loss_var = match cfg.loss {
            LossKind::Bce => deep_supervision_loss(&mut graph, &fwd.outputs, &masks)?,
            LossKind::Focal => weighted_focal_loss(&mut graph, &fwd.outputs, &masks, &focal)?,
        };
        let loss = graph.value(loss_var)[0] as f64;
        if !loss.is_finite() {
            let kept = if saved_any {
                format!("; last good checkpoint retained at {}", cfg.checkpoint.display())
            } else {
                String::new()
            };
            let _ = log.write_csv(&cfg.log);
            return Err(Error::Train(format!("non-finite loss at step {step}{kept}")));
        }
        graph.backward(loss_var)?;
        for (pid, vals) in &fwd.stat_updates {
            model.store_mut().tensor_mut(*pid).data_mut().copy_from_slice(vals);
        }
        let mut grads: Vec<(ParamId, &[f32])> = Vec::with_capacity(fwd.bindings.len());
        for &(pid, vid) in &fwd.bindings {
            let g = graph.grad(vid).ok_or_else(|| {
                Error::Train(format!(
                    "no gradient reached parameter '{}'",
                    model.store().get(pid).name
                ))
            })?;
            grads.push((pid, g));
        }
        let lr = lr_at(step, &schedule);
        opt.step(model.store_mut(), &grads, lr)?;

        log.steps.push(StepRecord {
            step,
            loss,
            lr,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            checkpoint::save(&cfg.checkpoint, model.store())?;
            saved_any = true;
        }
    }

    checkpoint::save(&cfg.checkpoint, model.store())?;
    log.write_csv(&cfg.log)?;
    Ok(TrainSummary {
        model,
        log,
        checkpoint_path: cfg.checkpoint.clone(),
        log_path: cfg.log.clone(),
    })
}
