//! Training loops: AdamW, linear warmup then linear decay to zero, padded
//! batches with the final partial batch dropped, JSONL metrics, and
//! log-spaced checkpointing.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    next_token_loss_value, pad_batch, save_checkpoint, AdamState, Gradients, Model,
};
use crate::rng;
use crate::tokenizer::Tokenizer;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub batch: usize,
    /// Total number of rows consumed over training; epochs follow as
    /// `total_rows / dataset_rows`.
    pub total_rows: u64,
    pub seed: u64,
    /// Steps at which to write numbered checkpoints (besides the final one).
    pub checkpoint_steps: Vec<u64>,
    /// Fraction of rows held out for validation loss.
    pub val_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Metrics-log cadence in steps.
    pub log_every: u64,
}

impl TrainConfig {
    /// Full-scale pretraining defaults: lr 3e-4, weight decay 0.01, 50-step
    /// warmup, batch 128.
    pub fn pretrain_defaults(total_rows: u64, seed: u64) -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 0.01,
            warmup_steps: 50,
            batch: 128,
            total_rows,
            seed,
            checkpoint_steps: Vec::new(),
            val_fraction: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            log_every: 50,
        }
    }

    /// Fine-tuning defaults: identical except the 30x smaller learning rate.
    pub fn finetune_defaults(total_rows: u64, seed: u64) -> Self {
        TrainConfig {
            lr: 1e-5,
            ..Self::pretrain_defaults(total_rows, seed)
        }
    }

    pub fn total_steps(&self, _dataset_rows: usize) -> u64 {
        self.total_rows / self.batch as u64
    }
}

/// Piecewise-linear schedule: 0 at step 0, peak at `warmup`, back to 0 at
/// `total`. The update for completed-step count `s` uses `lr_at(s)`, so the
/// very first update runs at 0 and the last one just above 0.
pub fn lr_at(peak: f64, warmup: u64, total: u64, step: u64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    if step <= warmup {
        if warmup == 0 {
            return peak;
        }
        peak * step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Powers of two up to `total`, plus `total` itself.
pub fn log_spaced_checkpoints(total: u64) -> Vec<u64> {
    let mut steps: Vec<u64> = std::iter::successors(Some(1u64), |s| s.checked_mul(2))
        .take_while(|&s| s < total)
        .collect();
    if total > 0 {
        steps.push(total);
    }
    steps
}

/// One AdamW update. Decoupled weight decay applies to the weight matrices
/// only (norm gains are left undecayed, the usual transformer convention).
pub fn adamw_step(
    model: &mut Model<f32>,
    grads: &Gradients<f32>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (beta1 as f32, beta2 as f32);
    let epsf = eps as f32;
    let lrf = lr as f32;
    let grad_views = grads.named_tensors();
    for (idx, (_, mut p)) in model.params.named_tensors_mut().into_iter().enumerate() {
        let is_matrix = p.ndim() == 2;
        let g = grad_views[idx].1.as_slice().unwrap();
        let m = state.m[idx].as_slice_mut().unwrap();
        let v = state.v[idx].as_slice_mut().unwrap();
        let ps = p.as_slice_mut().unwrap();
        for i in 0..ps.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / bc1 as f32;
            let vhat = v[i] / bc2 as f32;
            let mut update = lrf * mhat / (vhat.sqrt() + epsf);
            if is_matrix {
                update += lrf * weight_decay as f32 * ps[i];
            }
            ps[i] -= update;
        }
    }
}

/// Deterministic row order for an epoch: a keyed shuffle of `0..n` addressed
/// by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng::keyed_shuffle(&mut idx, seed, &format!("epoch/{epoch}"));
    idx
}

#[derive(Clone, Debug, Serialize)]
struct MetricsRecord {
    step: u64,
    lr: f64,
    train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_loss: Option<f64>,
    wall_ms: u128,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_val_loss: Option<f64>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Called at epoch boundaries with (epoch index, model); evaluation hooks for
/// fine-tuning runs plug in here.
pub type EpochHook<'a> = &'a mut dyn FnMut(u64, &Model<f32>) -> Result<()>;

pub struct TrainSession<'a> {
    pub tokenizer: &'a Tokenizer,
    pub recipe_fingerprint: String,
    pub out_dir: PathBuf,
    pub epoch_hook: Option<EpochHook<'a>>,
}

/// Runs the training loop over pre-rendered dataset lines.
///
/// Deterministic: batch composition, padding and update order depend only on
/// `(lines, cfg)`. Divergence (non-finite loss) aborts with an error.
pub fn train(
    model: &mut Model<f32>,
    lines: &[String],
    cfg: &TrainConfig,
    session: &mut TrainSession,
) -> Result<TrainOutcome> {
    if lines.is_empty() {
        return Err(Error::DatasetSpec("training dataset is empty".into()));
    }
    if cfg.batch >= 512 {
        log::warn!(
            "batch size {} is known to degrade both target and standard task performance",
            cfg.batch
        );
    }
    std::fs::create_dir_all(&session.out_dir)
        .map_err(|e| Error::io(&session.out_dir, e))?;

    // encode once; rows must fit the model's context
    let mut encoded: Vec<Vec<u32>> = Vec::with_capacity(lines.len());
    for line in lines {
        let ids = session.tokenizer.encode(line)?;
        if ids.len() > model.cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: model.cfg.max_seq,
            });
        }
        encoded.push(ids);
    }

    // held-out validation slice
    let n_val = ((encoded.len() as f64) * cfg.val_fraction).floor() as usize;
    let mut split: Vec<usize> = (0..encoded.len()).collect();
    rng::keyed_shuffle(&mut split, cfg.seed, "valsplit");
    let (val_idx, train_idx) = split.split_at(n_val);
    if train_idx.len() < cfg.batch {
        return Err(Error::DatasetSpec(format!(
            "dataset too small: {} training rows for batch {}",
            train_idx.len(),
            cfg.batch
        )));
    }
    let val_batches: Vec<Array2<u32>> = val_idx
        .chunks(cfg.batch)
        .map(|chunk| pad_batch(&chunk.iter().map(|&i| encoded[i].clone()).collect::<Vec<_>>()))
        .collect();

    let total_steps = cfg.total_steps(train_idx.len());
    if total_steps == 0 {
        return Err(Error::DatasetSpec("total_rows smaller than one batch".into()));
    }

    let metrics_path = session.out_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(
        std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?,
    );
    metrics
        .write_all(
            format!(
                "{}\n",
                serde_json::json!({ "fingerprint": session.recipe_fingerprint })
            )
            .as_bytes(),
        )
        .map_err(|e| Error::io(&metrics_path, e))?;

    let mut state = AdamState::zeros_like(&model.params);
    let mut grads = Gradients::zeros(&model.cfg);
    let started = Instant::now();
    let mut step: u64 = 0;
    let mut epoch: u64 = 0;
    let mut initial_loss = f64::NAN;
    #[allow(unused_assignments)]
    let mut last_loss = f64::NAN;
    let mut last_val: Option<f64> = None;

    'outer: loop {
        let order = epoch_order(train_idx.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < cfg.batch {
                break; // final partial batch dropped
            }
            let rows: Vec<Vec<u32>> = chunk.iter().map(|&i| encoded[train_idx[i]].clone()).collect();
            let tokens = pad_batch(&rows);

            zero_grads(&mut grads);
            let loss = model.loss_and_grad(&tokens, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            let lr = lr_at(cfg.lr, cfg.warmup_steps, total_steps, step);
            adamw_step(
                model,
                &grads,
                &mut state,
                lr,
                cfg.weight_decay,
                cfg.beta1,
                cfg.beta2,
                cfg.eps,
            );
            if step == 0 {
                initial_loss = loss;
            }
            last_loss = loss;
            step += 1;

            let log_now = step % cfg.log_every.max(1) == 0 || step == total_steps || step == 1;
            if log_now {
                let val_loss = validation_loss(model, &val_batches)?;
                last_val = val_loss;
                let rec = MetricsRecord {
                    step,
                    lr,
                    train_loss: loss,
                    val_loss,
                    wall_ms: started.elapsed().as_millis(),
                };
                serde_json::to_writer(&mut metrics, &rec)
                    .map_err(|e| Error::Config(format!("metrics write: {e}")))?;
                metrics
                    .write_all(b"\n")
                    .map_err(|e| Error::io(&metrics_path, e))?;
            }
            if cfg.checkpoint_steps.contains(&step) && step != total_steps {
                let p = session.out_dir.join(format!("ckpt_step{step}.bin"));
                save_checkpoint(
                    &p,
                    model,
                    &session.tokenizer.spec(),
                    step,
                    &session.recipe_fingerprint,
                    None,
                )?;
            }
            if step >= total_steps {
                break 'outer;
            }
        }
        epoch += 1;
        if let Some(hook) = session.epoch_hook.as_mut() {
            hook(epoch, model)?;
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let checkpoint_path = session.out_dir.join("ckpt_final.bin");
    save_checkpoint(
        &checkpoint_path,
        model,
        &session.tokenizer.spec(),
        step,
        &session.recipe_fingerprint,
        Some(&state),
    )?;
    Ok(TrainOutcome {
        steps: step,
        initial_loss,
        final_loss: last_loss,
        final_val_loss: last_val,
        metrics_path,
        checkpoint_path,
    })
}

fn zero_grads(grads: &mut Gradients<f32>) {
    for (_, mut t) in grads.named_tensors_mut() {
        t.fill(0.0);
    }
}

fn validation_loss(model: &Model<f32>, val_batches: &[Array2<u32>]) -> Result<Option<f64>> {
    if val_batches.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for batch in val_batches {
        let fwd = model.forward(batch, &[])?;
        total += next_token_loss_value(&fwd.logits, batch)? * batch.dim().0 as f64;
        n += batch.dim().0;
    }
    Ok(Some(total / n as f64))
}
