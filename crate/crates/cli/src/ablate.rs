//! Ablation matrix: the four convolution-fusion strategies crossed with the
//! context branch on/off, trained under one seed and reported as two tables
//! (branch influence and fusion-strategy comparison).

use std::fs;

use serde::Serialize;

use tagdet_core::error::{Error, Result};
use tagdet_core::eval::{parse_thresholds, render_table, EvalReport};
use tagdet_core::infer::evaluate_model;
use tagdet_core::model::Model;
use tagdet_core::optim::{Adam, AdamConfig};
use tagdet_core::tag::FusionMode;
use tagdet_core::train::{prepare_items, train_loop};

use crate::config::RunConfig;

#[derive(Clone, Debug, Serialize)]
pub struct AblateRun {
    pub fusion: String,
    pub use_context: bool,
    pub use_gating: bool,
    pub init_hash: String,
    pub report: EvalReport,
}

#[derive(Debug, Serialize)]
pub struct AblateReport {
    pub seed: u64,
    pub eval_split: String,
    pub thresholds: Vec<f64>,
    pub runs: Vec<AblateRun>,
    pub branch_table: String,
    pub fusion_table: String,
}

const MODES: [FusionMode; 4] = [
    FusionMode::Baseline,
    FusionMode::Average,
    FusionMode::Maximum,
    FusionMode::Gating,
];

pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblateReport> {
    let dataset = crate::commands::load_dataset_for(cfg, &cfg.train_split)?;
    let eval_dataset = crate::commands::load_dataset_for(cfg, &cfg.eval_split)?;
    if dataset.videos.is_empty() {
        return Err(Error::Config(format!(
            "split '{}' has no videos",
            cfg.train_split
        )));
    }
    let in_dim = dataset.videos[0].features.dim();
    let thresholds = parse_thresholds(&cfg.eval_thresholds)?;
    let loss_cfg = cfg.loss_config()?;
    let mut train_cfg = cfg.train_config();
    if cfg.ablate_epochs > 0 {
        train_cfg.epochs = cfg.ablate_epochs;
        train_cfg.warmup_epochs = train_cfg.warmup_epochs.min(cfg.ablate_epochs / 2);
    }
    let icfg = cfg.infer_config()?;

    let mut runs = Vec::new();
    for mode in MODES {
        for use_context in [false, true] {
            // gating "off" means the baseline fusion; the flag mirrors the
            // branch-influence rows while `mode` drives the fusion rows
            let use_gating = mode != FusionMode::Baseline;
            let model_cfg = {
                let mut mc = cfg.model_config(in_dim, dataset.num_classes());
                mc.fusion = mode.name().to_string();
                mc.use_context = use_context;
                mc.use_gating = use_gating;
                mc
            };
            let mut model = Model::new(model_cfg, cfg.seed)?;
            let init_hash = format!("{:016x}", model.store.content_hash());
            let mut adam = Adam::new(
                &model.store,
                AdamConfig {
                    weight_decay: cfg.train_weight_decay,
                    ..AdamConfig::default()
                },
            );
            let items = prepare_items(&model, &dataset.videos, cfg.loss_center_radius)?;
            train_loop(
                &mut model,
                &mut adam,
                &items,
                &loss_cfg,
                &train_cfg,
                0,
                None,
                &mut |_| {},
                None,
            )?;
            let report = evaluate_model(
                &model,
                &eval_dataset.videos,
                &icfg,
                &dataset.labels,
                &thresholds,
            )?;
            runs.push(AblateRun {
                fusion: mode.name().to_string(),
                use_context,
                use_gating,
                init_hash,
                report,
            });
        }
    }

    let find = |fusion: FusionMode, ctx: bool| -> &AblateRun {
        runs.iter()
            .find(|r| r.fusion == fusion.name() && r.use_context == ctx)
            .expect("run matrix covers all cells")
    };
    let branch_rows = [
        (
            "without gating, without context",
            find(FusionMode::Baseline, false),
        ),
        (
            "with gating, without context",
            find(FusionMode::Gating, false),
        ),
        (
            "without gating, with context",
            find(FusionMode::Baseline, true),
        ),
        ("with gating, with context", find(FusionMode::Gating, true)),
    ];
    let fusion_rows = [
        ("baseline", find(FusionMode::Baseline, true)),
        ("average", find(FusionMode::Average, true)),
        ("maximum", find(FusionMode::Maximum, true)),
        ("gating (ours)", find(FusionMode::Gating, true)),
    ];
    let branch_table = render_table(
        &thresholds,
        &branch_rows
            .iter()
            .map(|(n, r)| (n.to_string(), &r.report))
            .collect::<Vec<_>>(),
    );
    let fusion_table = render_table(
        &thresholds,
        &fusion_rows
            .iter()
            .map(|(n, r)| (n.to_string(), &r.report))
            .collect::<Vec<_>>(),
    );

    let report = AblateReport {
        seed: cfg.seed,
        eval_split: cfg.eval_split.clone(),
        thresholds,
        runs,
        branch_table,
        fusion_table,
    };
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(
        cfg.out_dir.join("ablation_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let text = format!(
        "Branch influence\n{}\nFusion strategies\n{}",
        report.branch_table, report.fusion_table
    );
    fs::write(cfg.out_dir.join("ablation_tables.txt"), &text)?;
    print!("{text}");
    Ok(report)
}
