//! Subcommand implementations: synth, train, eval, infer.

use std::fs;
use std::io::Write;

use tagdet_core::checkpoint::{load_checkpoint, restore_model, save_checkpoint};
use tagdet_core::data::{
    load_dataset, Dataset, PredictionFile, ScoredSegmentJson, VideoPredictions,
};
use tagdet_core::error::{Error, Result};
use tagdet_core::eval::{
    mean_average_precision, parse_thresholds, render_table, EvalReport, VideoEval,
};
use tagdet_core::infer::{evaluate_model, infer_split};
use tagdet_core::model::Model;
use tagdet_core::optim::{Adam, AdamConfig};
use tagdet_core::train::{prepare_items, train_loop, LogRecord};

use crate::config::RunConfig;

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let synth = cfg.synth_config();
    let ds = tagdet_core::data::generate_synthetic(&synth)?;
    ds.write(&cfg.data_dir)?;
    let total_segments: usize = ds.videos.iter().map(|v| v.segments.len()).sum();
    println!(
        "wrote {} videos ({} classes, {} segments) to {}",
        ds.videos.len(),
        ds.labels.len(),
        total_segments,
        cfg.data_dir.display()
    );
    for (split, ids) in &ds.splits {
        println!("  split {split}: {} videos", ids.len());
    }
    Ok(())
}

pub(crate) fn load_dataset_for(cfg: &RunConfig, split: &str) -> Result<Dataset> {
    load_dataset(&cfg.data_dir, split)
}

fn adam_config(cfg: &RunConfig) -> AdamConfig {
    AdamConfig {
        weight_decay: cfg.train_weight_decay,
        ..AdamConfig::default()
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dataset = load_dataset_for(cfg, &cfg.train_split)?;
    if dataset.videos.is_empty() {
        return Err(Error::Config(format!(
            "split '{}' has no videos",
            cfg.train_split
        )));
    }
    let in_dim = dataset.videos[0].features.dim();
    let model_cfg = cfg.model_config(in_dim, dataset.num_classes());
    fs::create_dir_all(&cfg.out_dir)?;
    let ckpt_path = cfg.out_dir.join("checkpoint.tadc");
    let log_path = cfg.out_dir.join("train_log.jsonl");

    let (mut model, mut adam, start_epoch) = if cfg.train_resume.is_empty() {
        let model = Model::new(model_cfg, cfg.seed)?;
        let adam = Adam::new(&model.store, adam_config(cfg));
        (model, adam, 0)
    } else {
        let ckpt = load_checkpoint(std::path::Path::new(&cfg.train_resume))?;
        if ckpt.config != model_cfg {
            return Err(Error::Config(
                "resume checkpoint geometry disagrees with the configured model".into(),
            ));
        }
        let (model, adam) = restore_model(&ckpt, adam_config(cfg))?;
        (model, adam, ckpt.epoch as usize)
    };

    let items = prepare_items(&model, &dataset.videos, cfg.loss_center_radius)?;
    let loss_cfg = cfg.loss_config()?;
    let train_cfg = cfg.train_config();

    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let mut sink = |rec: &LogRecord| {
        let line = serde_json::to_string(rec).expect("serializable record");
        writeln!(log, "{line}").expect("writable log");
    };

    let eval_every = cfg.train_eval_every;
    let eval_split = cfg.train_eval_split.clone();
    let eval_videos = if eval_every > 0 {
        load_dataset_for(cfg, &eval_split)?.videos
    } else {
        Vec::new()
    };
    let labels = dataset.labels.clone();
    let thresholds = parse_thresholds(&cfg.eval_thresholds)?;
    let icfg = cfg.infer_config()?;
    let mut hook = move |m: &Model, epoch: usize| -> Result<Option<(String, f64)>> {
        if eval_every == 0 || (epoch + 1) % eval_every != 0 {
            return Ok(None);
        }
        let report = evaluate_model(m, &eval_videos, &icfg, &labels, &thresholds)?;
        Ok(Some((
            eval_split.clone(),
            report.average_map.unwrap_or(0.0),
        )))
    };

    let report = train_loop(
        &mut model,
        &mut adam,
        &items,
        &loss_cfg,
        &train_cfg,
        start_epoch,
        Some(&ckpt_path),
        &mut sink,
        Some(&mut hook),
    )?;
    save_checkpoint(
        &ckpt_path,
        &model,
        Some(&adam),
        report.final_step as u64,
        cfg.train_epochs as u64,
    )?;
    println!(
        "trained {} steps (final loss {:.4}); checkpoint at {}",
        report.final_step,
        report.last_loss,
        ckpt_path.display()
    );
    println!("metrics log: {}", log_path.display());
    Ok(())
}

fn load_model_for(cfg: &RunConfig, dataset: &Dataset) -> Result<Model> {
    let ckpt = load_checkpoint(&cfg.checkpoint_path())?;
    if ckpt.config.num_classes != dataset.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, dataset has {}",
            ckpt.config.num_classes,
            dataset.num_classes()
        )));
    }
    if ckpt.config.in_dim != dataset.videos[0].features.dim() {
        return Err(Error::Config(format!(
            "checkpoint expects feature dim {}, dataset has {}",
            ckpt.config.in_dim,
            dataset.videos[0].features.dim()
        )));
    }
    let (model, _) = restore_model(&ckpt, AdamConfig::default())?;
    Ok(model)
}

/// Evaluate either a predictions file or the checkpointed model on a split.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let dataset = load_dataset_for(cfg, &cfg.eval_split)?;
    let thresholds = parse_thresholds(&cfg.eval_thresholds)?;
    let report = if cfg.eval_predictions.is_empty() {
        let model = load_model_for(cfg, &dataset)?;
        evaluate_model(
            &model,
            &dataset.videos,
            &cfg.infer_config()?,
            &dataset.labels,
            &thresholds,
        )?
    } else {
        let preds = PredictionFile::read(std::path::Path::new(&cfg.eval_predictions))?;
        let pairs: Vec<VideoEval> = dataset
            .videos
            .iter()
            .map(|v| {
                let id = &v.features.video_id;
                let predictions = preds
                    .videos
                    .iter()
                    .find(|p| &p.id == id)
                    .map(|p| {
                        p.segments
                            .iter()
                            .map(|s| tagdet_core::postprocess::ScoredSegment {
                                start: s.start,
                                end: s.end,
                                class_id: s.label,
                                score: s.score,
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                VideoEval {
                    predictions,
                    ground_truth: v.segments.clone(),
                }
            })
            .collect();
        mean_average_precision(&pairs, &dataset.labels, &thresholds)?
    };

    fs::create_dir_all(&cfg.out_dir)?;
    let json_path = cfg.out_dir.join(format!("eval_{}.json", cfg.eval_split));
    fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    let table = render_table(&thresholds, &[("ours".to_string(), &report)]);
    let table_path = cfg.out_dir.join(format!("eval_{}.txt", cfg.eval_split));
    fs::write(&table_path, &table)?;
    print!("{table}");
    if report.no_gt {
        println!(
            "split '{}' has no ground truth: mAP undefined",
            cfg.eval_split
        );
    }
    println!("report: {} / {}", json_path.display(), table_path.display());
    Ok(report)
}

pub fn cmd_infer(cfg: &RunConfig) -> Result<PredictionFile> {
    let dataset = load_dataset_for(cfg, &cfg.infer_split)?;
    let model = load_model_for(cfg, &dataset)?;
    let detections = infer_split(&model, &dataset.videos, &cfg.infer_config()?)?;
    let file = PredictionFile {
        videos: detections
            .into_iter()
            .zip(&dataset.videos)
            .map(|(segments, v)| VideoPredictions {
                id: v.features.video_id.clone(),
                segments: segments
                    .into_iter()
                    .map(|s| ScoredSegmentJson {
                        start: s.start,
                        end: s.end,
                        label: s.class_id,
                        score: s.score,
                    })
                    .collect(),
            })
            .collect(),
    };
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg
        .out_dir
        .join(format!("predictions_{}.json", cfg.infer_split));
    file.write(&path)?;
    let total: usize = file.videos.iter().map(|v| v.segments.len()).sum();
    println!(
        "wrote {total} detections over {} videos to {}",
        file.videos.len(),
        path.display()
    );
    Ok(file)
}
