//! Run configuration: a flat dotted-key namespace with frozen defaults,
//! loadable from a TOML document and overridable with `--key=value` pairs.
//! Unknown keys are errors; silent typos don't exist.

use std::path::{Path, PathBuf};

use tagdet_core::error::{Error, Result};
use tagdet_core::eval::parse_thresholds;
use tagdet_core::loss::{IouKind, LossConfig};
use tagdet_core::model::ModelConfig;
use tagdet_core::postprocess::NmsMethod;
use tagdet_core::tag::FusionMode;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,

    pub synth_num_videos: usize,
    pub synth_t: usize,
    pub synth_d: usize,
    pub synth_num_classes: usize,
    pub synth_segments_min: usize,
    pub synth_segments_max: usize,
    pub synth_seg_len_min: usize,
    pub synth_seg_len_max: usize,
    pub synth_noise: f64,
    pub synth_proto_seed: u64,
    pub synth_data_seed: u64,
    pub synth_delta_seconds: f64,
    pub synth_val_fraction: f64,

    pub model_dim: usize,
    pub model_levels: usize,
    pub model_embed_kernel: usize,
    pub model_conv_window: usize,
    pub model_scale_k: f64,
    /// 0 means "same as model.dim".
    pub model_gate_hidden: usize,
    pub model_fusion: String,
    pub model_use_context: bool,
    pub model_use_gating: bool,
    pub model_bins: usize,
    pub model_head_depth: usize,
    pub model_head_kernel: usize,

    pub loss_focal_alpha: f64,
    pub loss_focal_gamma: f64,
    pub loss_iou: String,
    pub loss_cls_weight: f64,
    pub loss_reg_weight: f64,
    pub loss_quality_floor: f64,
    pub loss_center_radius: f64,

    pub train_epochs: usize,
    pub train_warmup_epochs: usize,
    pub train_lr: f64,
    pub train_batch_size: usize,
    pub train_weight_decay: f64,
    pub train_split: String,
    pub train_eval_every: usize,
    pub train_eval_split: String,
    pub train_resume: String,

    pub infer_lambda: f64,
    pub infer_pre_nms_topk: usize,
    pub infer_nms: String,
    pub infer_nms_sigma: f64,
    pub infer_nms_iou_threshold: f64,
    pub infer_score_floor: f64,
    pub infer_split: String,

    pub eval_split: String,
    pub eval_thresholds: String,
    pub eval_checkpoint: String,
    pub eval_predictions: String,

    /// 0 means "use train.epochs".
    pub ablate_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            data_dir: PathBuf::from("data/synth"),
            out_dir: PathBuf::from("runs/exp"),

            synth_num_videos: 20,
            synth_t: 128,
            synth_d: 16,
            synth_num_classes: 3,
            synth_segments_min: 2,
            synth_segments_max: 4,
            synth_seg_len_min: 8,
            synth_seg_len_max: 24,
            synth_noise: 0.3,
            synth_proto_seed: 101,
            synth_data_seed: 202,
            synth_delta_seconds: 1.0,
            synth_val_fraction: 0.25,

            model_dim: 16,
            model_levels: 5,
            model_embed_kernel: 3,
            model_conv_window: 3,
            model_scale_k: 3.0,
            model_gate_hidden: 0,
            model_fusion: "gating".into(),
            model_use_context: true,
            model_use_gating: true,
            model_bins: 16,
            model_head_depth: 1,
            model_head_kernel: 3,

            loss_focal_alpha: 0.25,
            loss_focal_gamma: 2.0,
            loss_iou: "iou".into(),
            loss_cls_weight: 1.0,
            loss_reg_weight: 1.0,
            loss_quality_floor: 0.01,
            loss_center_radius: 1.5,

            train_epochs: 250,
            train_warmup_epochs: 125,
            train_lr: 1e-4,
            train_batch_size: 2,
            train_weight_decay: 0.0,
            train_split: "train".into(),
            train_eval_every: 0,
            train_eval_split: "train".into(),
            train_resume: String::new(),

            infer_lambda: 1e-3,
            infer_pre_nms_topk: 2000,
            infer_nms: "gaussian".into(),
            infer_nms_sigma: 0.5,
            infer_nms_iou_threshold: 0.3,
            infer_score_floor: 1e-3,
            infer_split: "val".into(),

            eval_split: "val".into(),
            eval_thresholds: "0.3:0.1:0.7".into(),
            eval_checkpoint: String::new(),
            eval_predictions: String::new(),

            ablate_epochs: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("bad value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad boolean '{value}' for key '{key}'"
        ))),
    }
}

impl RunConfig {
    /// Apply one dotted-key assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data.dir" => self.data_dir = PathBuf::from(value),
            "out.dir" => self.out_dir = PathBuf::from(value),

            "synth.num_videos" => self.synth_num_videos = parse(key, value)?,
            "synth.t" => self.synth_t = parse(key, value)?,
            "synth.d" => self.synth_d = parse(key, value)?,
            "synth.num_classes" => self.synth_num_classes = parse(key, value)?,
            "synth.segments_min" => self.synth_segments_min = parse(key, value)?,
            "synth.segments_max" => self.synth_segments_max = parse(key, value)?,
            "synth.seg_len_min" => self.synth_seg_len_min = parse(key, value)?,
            "synth.seg_len_max" => self.synth_seg_len_max = parse(key, value)?,
            "synth.noise" => self.synth_noise = parse(key, value)?,
            "synth.proto_seed" => self.synth_proto_seed = parse(key, value)?,
            "synth.data_seed" => self.synth_data_seed = parse(key, value)?,
            "synth.delta_seconds" => self.synth_delta_seconds = parse(key, value)?,
            "synth.val_fraction" => self.synth_val_fraction = parse(key, value)?,

            "model.dim" => self.model_dim = parse(key, value)?,
            "model.levels" => self.model_levels = parse(key, value)?,
            "model.embed_kernel" => self.model_embed_kernel = parse(key, value)?,
            "model.conv_window" => self.model_conv_window = parse(key, value)?,
            "model.scale_k" => self.model_scale_k = parse(key, value)?,
            "model.gate_hidden" => self.model_gate_hidden = parse(key, value)?,
            "model.fusion" => self.model_fusion = value.to_string(),
            "model.use_context" => self.model_use_context = parse_bool(key, value)?,
            "model.use_gating" => self.model_use_gating = parse_bool(key, value)?,
            "model.bins" => self.model_bins = parse(key, value)?,
            "model.head_depth" => self.model_head_depth = parse(key, value)?,
            "model.head_kernel" => self.model_head_kernel = parse(key, value)?,

            "loss.focal_alpha" => self.loss_focal_alpha = parse(key, value)?,
            "loss.focal_gamma" => self.loss_focal_gamma = parse(key, value)?,
            "loss.iou" => self.loss_iou = value.to_string(),
            "loss.cls_weight" => self.loss_cls_weight = parse(key, value)?,
            "loss.reg_weight" => self.loss_reg_weight = parse(key, value)?,
            "loss.quality_floor" => self.loss_quality_floor = parse(key, value)?,
            "loss.center_radius" => self.loss_center_radius = parse(key, value)?,

            "train.epochs" => self.train_epochs = parse(key, value)?,
            "train.warmup_epochs" => self.train_warmup_epochs = parse(key, value)?,
            "train.lr" => self.train_lr = parse(key, value)?,
            "train.batch_size" => self.train_batch_size = parse(key, value)?,
            "train.weight_decay" => self.train_weight_decay = parse(key, value)?,
            "train.split" => self.train_split = value.to_string(),
            "train.eval_every" => self.train_eval_every = parse(key, value)?,
            "train.eval_split" => self.train_eval_split = value.to_string(),
            "train.resume" => self.train_resume = value.to_string(),

            "infer.lambda" => self.infer_lambda = parse(key, value)?,
            "infer.pre_nms_topk" => self.infer_pre_nms_topk = parse(key, value)?,
            "infer.nms" => self.infer_nms = value.to_string(),
            "infer.nms_sigma" => self.infer_nms_sigma = parse(key, value)?,
            "infer.nms_iou_threshold" => self.infer_nms_iou_threshold = parse(key, value)?,
            "infer.score_floor" => self.infer_score_floor = parse(key, value)?,
            "infer.split" => self.infer_split = value.to_string(),

            "eval.split" => self.eval_split = value.to_string(),
            "eval.thresholds" => self.eval_thresholds = value.to_string(),
            "eval.checkpoint" => self.eval_checkpoint = value.to_string(),
            "eval.predictions" => self.eval_predictions = value.to_string(),

            "ablate.epochs" => self.ablate_epochs = parse(key, value)?,

            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Load from an optional TOML file, then apply `key=value` overrides.
    pub fn from_sources(config_path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = config_path {
            if !path.is_file() {
                return Err(Error::MissingInput(format!(
                    "config file {}",
                    path.display()
                )));
            }
            let text = std::fs::read_to_string(path)?;
            let doc: toml::Value = text
                .parse()
                .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
            let mut flat = Vec::new();
            flatten("", &doc, &mut flat)?;
            for (key, value) in flat {
                cfg.set(&key, &value)?;
            }
        }
        for raw in overrides {
            let stripped = raw.strip_prefix("--").unwrap_or(raw);
            let (key, value) = stripped
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{raw}' must be --key=value")))?;
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        FusionMode::parse(&self.model_fusion)?;
        IouKind::parse(&self.loss_iou)?;
        parse_thresholds(&self.eval_thresholds)?;
        self.nms_method()?;
        Ok(())
    }

    /// Model geometry for a dataset with the given feature dim and classes.
    pub fn model_config(&self, in_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            in_dim,
            dim: self.model_dim,
            levels: self.model_levels,
            embed_kernel: self.model_embed_kernel,
            conv_window: self.model_conv_window,
            scale_k: self.model_scale_k,
            gate_hidden: if self.model_gate_hidden == 0 {
                self.model_dim
            } else {
                self.model_gate_hidden
            },
            fusion: self.model_fusion.clone(),
            use_context: self.model_use_context,
            use_gating: self.model_use_gating,
            num_classes,
            bins: self.model_bins,
            head_depth: self.model_head_depth,
            head_kernel: self.model_head_kernel,
        }
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let cfg = LossConfig {
            focal_alpha: self.loss_focal_alpha,
            focal_gamma: self.loss_focal_gamma,
            iou_kind: IouKind::parse(&self.loss_iou)?,
            cls_weight: self.loss_cls_weight,
            reg_weight: self.loss_reg_weight,
            quality_floor: self.loss_quality_floor,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn nms_method(&self) -> Result<NmsMethod> {
        match self.infer_nms.as_str() {
            "gaussian" => Ok(NmsMethod::Gaussian {
                sigma: self.infer_nms_sigma,
            }),
            "linear" => Ok(NmsMethod::Linear {
                iou_threshold: self.infer_nms_iou_threshold,
            }),
            "hard" => Ok(NmsMethod::Hard {
                iou_threshold: self.infer_nms_iou_threshold,
            }),
            other => Err(Error::Config(format!(
                "unknown nms method '{other}' (expected gaussian|linear|hard)"
            ))),
        }
    }

    pub fn infer_config(&self) -> Result<tagdet_core::infer::InferConfig> {
        Ok(tagdet_core::infer::InferConfig {
            lambda: self.infer_lambda,
            pre_nms_top_k: self.infer_pre_nms_topk,
            method: self.nms_method()?,
            score_floor: self.infer_score_floor,
        })
    }

    pub fn synth_config(&self) -> tagdet_core::data::SynthConfig {
        tagdet_core::data::SynthConfig {
            num_videos: self.synth_num_videos,
            t: self.synth_t,
            d: self.synth_d,
            num_classes: self.synth_num_classes,
            segments_min: self.synth_segments_min,
            segments_max: self.synth_segments_max,
            seg_len_min: self.synth_seg_len_min,
            seg_len_max: self.synth_seg_len_max,
            noise: self.synth_noise,
            proto_seed: self.synth_proto_seed,
            seed: self.synth_data_seed,
            delta_seconds: self.synth_delta_seconds,
            val_fraction: self.synth_val_fraction,
        }
    }

    pub fn train_config(&self) -> tagdet_core::train::TrainConfig {
        tagdet_core::train::TrainConfig {
            epochs: self.train_epochs,
            warmup_epochs: self.train_warmup_epochs,
            lr: self.train_lr,
            batch_size: self.train_batch_size,
            seed: self.seed,
            center_radius: self.loss_center_radius,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.eval_checkpoint.is_empty() {
            self.out_dir.join("checkpoint.tadc")
        } else {
            PathBuf::from(&self.eval_checkpoint)
        }
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) -> Result<()> {
    match value {
        toml::Value::Table(table) => {
            for (k, v) in table {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out)?;
            }
            Ok(())
        }
        toml::Value::String(s) => {
            out.push((prefix.to_string(), s.clone()));
            Ok(())
        }
        toml::Value::Integer(i) => {
            out.push((prefix.to_string(), i.to_string()));
            Ok(())
        }
        toml::Value::Float(f) => {
            out.push((prefix.to_string(), f.to_string()));
            Ok(())
        }
        toml::Value::Boolean(b) => {
            out.push((prefix.to_string(), b.to_string()));
            Ok(())
        }
        _ => Err(Error::Config(format!(
            "config key '{prefix}' has an unsupported value type"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_is_an_error() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("model.dims", "32").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = RunConfig::from_sources(
            None,
            &[
                "--model.dim=32".into(),
                "model.dim=24".into(),
                "--train.lr=5e-4".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.model_dim, 24);
        assert_eq!(cfg.train_lr, 5e-4);
    }

    #[test]
    fn toml_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 9\nmodel.fusion = \"maximum\"\n[train]\nepochs = 12\nlr = 2e-4\n",
        )
        .unwrap();
        let cfg = RunConfig::from_sources(Some(&path), &[]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model_fusion, "maximum");
        assert_eq!(cfg.train_epochs, 12);
        assert_eq!(cfg.train_lr, 2e-4);
    }

    #[test]
    fn bad_fusion_name_rejected() {
        let err = RunConfig::from_sources(None, &["model.fusion=median".into()]).unwrap_err();
        assert!(err.to_string().contains("unknown fusion mode"));
    }

    #[test]
    fn unknown_toml_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[optimizer]\nlr = 1.0\n").unwrap();
        assert!(RunConfig::from_sources(Some(&path), &[]).is_err());
    }
}
