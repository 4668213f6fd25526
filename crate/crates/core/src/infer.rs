//! Inference pipeline: per-instant predictions, decoding, score filtering,
//! Soft-NMS, and split-level evaluation. Videos are processed in parallel;
//! each gets its own graph.

use rayon::prelude::*;

use crate::data::VideoData;
use crate::error::Result;
use crate::eval::{mean_average_precision, EvalReport, VideoEval};
use crate::head::decode;
use crate::model::Model;
use crate::postprocess::{filter_candidates, soft_nms, NmsMethod, ScoredSegment};

#[derive(Clone, Copy, Debug)]
pub struct InferConfig {
    /// Score threshold applied before NMS.
    pub lambda: f64,
    /// Candidate cap per video before NMS.
    pub pre_nms_top_k: usize,
    pub method: NmsMethod,
    /// Final score floor; decayed segments below it are dropped.
    pub score_floor: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            lambda: 1e-3,
            pre_nms_top_k: 2000,
            method: NmsMethod::Gaussian { sigma: 0.5 },
            score_floor: 1e-3,
        }
    }
}

/// Detect segments in one video.
pub fn infer_video(
    model: &Model,
    video: &crate::data::FeatureSequence,
    cfg: &InferConfig,
) -> Result<Vec<ScoredSegment>> {
    let preds = model.predict(&video.values)?;
    let strides: Vec<usize> = (0..model.cfg.levels).map(|l| 1 << l).collect();
    let decoded = decode(
        &preds,
        &strides,
        video.delta_seconds,
        video.duration_seconds,
    );
    let candidates = filter_candidates(decoded, cfg.lambda, cfg.pre_nms_top_k);
    soft_nms(&candidates, cfg.method, cfg.score_floor)
}

/// Detect segments across a split, in video order.
pub fn infer_split(
    model: &Model,
    videos: &[VideoData],
    cfg: &InferConfig,
) -> Result<Vec<Vec<ScoredSegment>>> {
    videos
        .par_iter()
        .map(|v| infer_video(model, &v.features, cfg))
        .collect()
}

/// Run the detector over a split and score it against the ground truth.
pub fn evaluate_model(
    model: &Model,
    videos: &[VideoData],
    cfg: &InferConfig,
    labels: &[String],
    thresholds: &[f64],
) -> Result<EvalReport> {
    let detections = infer_split(model, videos, cfg)?;
    let pairs: Vec<VideoEval> = detections
        .into_iter()
        .zip(videos)
        .map(|(predictions, v)| VideoEval {
            predictions,
            ground_truth: v.segments.clone(),
        })
        .collect();
    mean_average_precision(&pairs, labels, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::model::{Model, ModelConfig};

    #[test]
    fn untrained_model_produces_finite_report() {
        let synth = SynthConfig {
            num_videos: 2,
            t: 32,
            d: 4,
            num_classes: 2,
            segments_min: 1,
            segments_max: 2,
            seg_len_min: 6,
            seg_len_max: 10,
            noise: 0.2,
            proto_seed: 1,
            seed: 2,
            delta_seconds: 1.0,
            val_fraction: 0.0,
        };
        let ds = generate_synthetic(&synth).unwrap();
        let model = Model::new(
            ModelConfig {
                in_dim: 4,
                dim: 4,
                levels: 2,
                embed_kernel: 3,
                conv_window: 3,
                scale_k: 3.0,
                gate_hidden: 4,
                fusion: "gating".into(),
                use_context: true,
                use_gating: true,
                num_classes: 2,
                bins: 8,
                head_depth: 1,
                head_kernel: 3,
            },
            3,
        )
        .unwrap();
        let report = evaluate_model(
            &model,
            &ds.videos,
            &InferConfig::default(),
            &ds.labels,
            &[0.3, 0.5, 0.7],
        )
        .unwrap();
        assert!(!report.no_gt);
        for t in &report.per_threshold {
            let v = t.map.unwrap();
            assert!(v.is_finite() && (0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn ground_truth_as_predictions_scores_one() {
        let synth = SynthConfig {
            num_videos: 3,
            t: 48,
            d: 4,
            num_classes: 3,
            segments_min: 1,
            segments_max: 3,
            seg_len_min: 4,
            seg_len_max: 10,
            noise: 0.1,
            proto_seed: 5,
            seed: 6,
            delta_seconds: 0.5,
            val_fraction: 0.0,
        };
        let ds = generate_synthetic(&synth).unwrap();
        let pairs: Vec<crate::eval::VideoEval> = ds
            .videos
            .iter()
            .map(|v| crate::eval::VideoEval {
                predictions: v
                    .segments
                    .iter()
                    .map(|s| ScoredSegment {
                        start: s.start,
                        end: s.end,
                        class_id: s.class_id,
                        score: 0.99,
                    })
                    .collect(),
                ground_truth: v.segments.clone(),
            })
            .collect();
        let report =
            mean_average_precision(&pairs, &ds.labels, &[0.3, 0.4, 0.5, 0.6, 0.7]).unwrap();
        assert_eq!(report.average_map, Some(1.0));
    }
}
