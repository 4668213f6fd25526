//! Optimization loop: batched gradient accumulation over per-video graphs,
//! Adam updates under a warmup + cosine schedule, JSON-line-friendly metric
//! records, periodic checkpoints, and divergence handling that preserves the
//! last finite state.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assign::{assign_targets, AssignConfig, AssignedTargets};
use crate::autodiff::{Graph, Tensor};
use crate::checkpoint::save_checkpoint;
use crate::data::VideoData;
use crate::error::{Error, Result};
use crate::loss::{composite_loss, LossConfig};
use crate::model::Model;
use crate::optim::{Adam, GradBuffer, Schedule};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Center-sampling radius, in level strides.
    pub center_radius: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config("warmup epochs exceed total epochs".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// One metrics-log line.
#[derive(Debug, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        loss: f64,
        loss_cls: f64,
        loss_reg: f64,
        num_pos: usize,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
    },
    Eval {
        epoch: usize,
        split: String,
        avg_map: f64,
    },
    Fault {
        step: usize,
        detail: String,
    },
}

/// A video with its precomputed assignment targets.
pub struct TrainItem {
    pub features: Tensor,
    pub targets: AssignedTargets,
}

/// Assign targets once per video against the model's pyramid geometry.
pub fn prepare_items(
    model: &Model,
    videos: &[VideoData],
    center_radius: f64,
) -> Result<Vec<TrainItem>> {
    let assign_cfg = AssignConfig {
        center_radius,
        bins: model.cfg.bins,
    };
    videos
        .iter()
        .map(|v| {
            let lengths = model.pyramid_cfg().level_lengths(v.features.t_len());
            let targets =
                assign_targets(&v.segments, &lengths, v.features.delta_seconds, &assign_cfg)?;
            Ok(TrainItem {
                features: v.features.values.clone(),
                targets,
            })
        })
        .collect()
}

#[derive(Debug)]
pub struct TrainReport {
    pub steps_run: usize,
    pub final_step: usize,
    pub last_loss: f64,
}

/// Per-epoch evaluation hook: returns `(split, avg_map)` to log, or `None`.
pub type EpochHook<'a> = &'a mut dyn FnMut(&Model, usize) -> Result<Option<(String, f64)>>;

/// Run (or resume) training.
///
/// Steps per epoch is `ceil(items / batch_size)`; the schedule spans
/// `epochs * steps_per_epoch` optimizer steps. Identical `(config, seed)`
/// runs produce bitwise-identical loss curves. On a numeric fault the model
/// is rolled back to the last finite state, a checkpoint is written if a path
/// was given, and the numeric error is returned.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    model: &mut Model,
    adam: &mut Adam,
    items: &[TrainItem],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    start_epoch: usize,
    checkpoint_path: Option<&Path>,
    sink: &mut dyn FnMut(&LogRecord),
    mut epoch_hook: Option<EpochHook>,
) -> Result<TrainReport> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let spe = items.len().div_ceil(cfg.batch_size);
    let schedule = Schedule {
        lr0: cfg.lr,
        warmup_steps: cfg.warmup_epochs * spe,
        total_steps: cfg.epochs * spe,
    };
    let mut grads = GradBuffer::zeros(&model.store);
    let mut step = start_epoch * spe;
    let mut steps_run = 0usize;
    let mut last_loss = f64::NAN;
    let mut last_good: Vec<Tensor> = model
        .store
        .ids()
        .map(|id| model.store.get(id).clone())
        .collect();

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = schedule.lr_at(step);
            grads.reset();
            let inv = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            let mut batch_cls = 0.0;
            let mut batch_reg = 0.0;
            let mut batch_pos = 0usize;
            let mut fault: Option<Error> = None;
            for &vi in chunk {
                let item = &items[vi];
                let outcome = (|| -> Result<()> {
                    let mut g = Graph::new();
                    let fwd = model.forward(&mut g, &item.features, true)?;
                    let out = composite_loss(
                        &mut g,
                        &fwd,
                        &item.targets,
                        model.cfg.num_classes,
                        loss_cfg,
                    )?;
                    if !out.total.is_finite() {
                        return Err(Error::numeric("total loss"));
                    }
                    g.backward(out.loss)?;
                    grads.accumulate(&g, &fwd.bound, inv);
                    batch_loss += inv * out.total;
                    batch_cls += inv * out.cls;
                    batch_reg += inv * out.reg;
                    batch_pos += out.num_pos;
                    Ok(())
                })();
                if let Err(e) = outcome {
                    fault = Some(e);
                    break;
                }
            }
            let fault = fault.or_else(|| adam.step(&mut model.store, &grads, lr).err());
            if let Some(e) = fault {
                for (id, good) in model
                    .store
                    .ids()
                    .collect::<Vec<_>>()
                    .into_iter()
                    .zip(last_good)
                {
                    *model.store.get_mut(id) = good;
                }
                sink(&LogRecord::Fault {
                    step,
                    detail: e.to_string(),
                });
                if let Some(path) = checkpoint_path {
                    save_checkpoint(path, model, Some(adam), step as u64, epoch as u64)?;
                }
                return Err(e);
            }
            for (i, id) in model
                .store
                .ids()
                .collect::<Vec<_>>()
                .into_iter()
                .enumerate()
            {
                last_good[i] = model.store.get(id).clone();
            }
            sink(&LogRecord::Step {
                step,
                epoch,
                lr,
                loss: batch_loss,
                loss_cls: batch_cls,
                loss_reg: batch_reg,
                num_pos: batch_pos,
            });
            last_loss = batch_loss;
            epoch_loss += batch_loss;
            epoch_batches += 1;
            step += 1;
            steps_run += 1;
        }
        sink(&LogRecord::Epoch {
            epoch,
            mean_loss: epoch_loss / epoch_batches as f64,
        });
        if let Some(hook) = epoch_hook.as_mut() {
            if let Some((split, avg_map)) = hook(model, epoch)? {
                sink(&LogRecord::Eval {
                    epoch,
                    split,
                    avg_map,
                });
            }
        }
        if let Some(path) = checkpoint_path {
            save_checkpoint(path, model, Some(adam), step as u64, (epoch + 1) as u64)?;
        }
    }
    Ok(TrainReport {
        steps_run,
        final_step: step,
        last_loss,
    })
}
