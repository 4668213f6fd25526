//! mAP@IoU evaluation: greedy score-ordered matching per class and threshold,
//! all-points interpolated average precision, and the aligned report table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ActionSegment;
use crate::error::{Error, Result};
use crate::postprocess::{temporal_iou, ScoredSegment};

/// Per-video pairing of detector output and ground truth.
#[derive(Clone, Debug, Default)]
pub struct VideoEval {
    pub predictions: Vec<ScoredSegment>,
    pub ground_truth: Vec<ActionSegment>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ThresholdReport {
    pub threshold: f64,
    /// AP per class label; `None` for classes with no ground truth.
    pub per_class_ap: BTreeMap<String, Option<f64>>,
    /// Mean over classes with ground truth; `None` when no class has any.
    pub map: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub per_threshold: Vec<ThresholdReport>,
    /// Arithmetic mean of the per-threshold mAPs.
    pub average_map: Option<f64>,
    /// True when the split has no ground truth at all: mAP is undefined,
    /// never silently zero.
    pub no_gt: bool,
}

/// A prediction with its ranking context, shared with the test oracles so
/// that ranking is identical on both routes.
#[derive(Clone, Debug)]
pub struct RankedPrediction {
    pub video: usize,
    pub span: (f64, f64),
    pub score: f64,
}

/// Canonical ranking: score descending, then earlier start, earlier end,
/// lower video index.
pub fn rank_predictions(preds: &mut [RankedPrediction]) {
    preds.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.span.0.partial_cmp(&b.span.0).unwrap())
            .then(a.span.1.partial_cmp(&b.span.1).unwrap())
            .then(a.video.cmp(&b.video))
    });
}

/// Ground truth pooled for one class: (video index, span).
pub type PooledGroundTruth = Vec<(usize, (f64, f64))>;

/// Per-class predictions and ground truths pooled over a split.
pub fn pool_class(
    videos: &[VideoEval],
    class_id: usize,
) -> (Vec<RankedPrediction>, PooledGroundTruth) {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (vi, v) in videos.iter().enumerate() {
        for p in &v.predictions {
            if p.class_id == class_id {
                preds.push(RankedPrediction {
                    video: vi,
                    span: p.span(),
                    score: p.score,
                });
            }
        }
        for gt in &v.ground_truth {
            if gt.class_id == class_id {
                gts.push((vi, (gt.start, gt.end)));
            }
        }
    }
    rank_predictions(&mut preds);
    (preds, gts)
}

/// AP for one class at one threshold: greedy matching in score order (each
/// ground truth matchable once, same video, IoU >= threshold; best-IoU ground
/// truth wins), then the all-points precision-envelope integral.
fn average_precision(
    preds: &[RankedPrediction],
    gts: &[(usize, (f64, f64))],
    threshold: f64,
) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut matched = vec![false; gts.len()];
    let mut tp = vec![false; preds.len()];
    for (pi, p) in preds.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, (vid, span)) in gts.iter().enumerate() {
            if *vid != p.video || matched[gi] {
                continue;
            }
            let iou = temporal_iou(p.span, *span);
            if iou < threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, best_iou)) => iou > best_iou,
            };
            if better {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            tp[pi] = true;
        }
    }
    // precision-recall curve with envelope
    let num_gt = gts.len() as f64;
    let mut precisions = Vec::with_capacity(preds.len());
    let mut recalls = Vec::with_capacity(preds.len());
    let mut tps = 0usize;
    for (i, hit) in tp.iter().enumerate() {
        if *hit {
            tps += 1;
        }
        precisions.push(tps as f64 / (i + 1) as f64);
        recalls.push(tps as f64 / num_gt);
    }
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..precisions.len() {
        ap += (recalls[i] - prev_recall) * precisions[i];
        prev_recall = recalls[i];
    }
    Some(ap)
}

/// Evaluate a split at the given IoU thresholds.
pub fn mean_average_precision(
    videos: &[VideoEval],
    labels: &[String],
    thresholds: &[f64],
) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return Err(Error::Config("no IoU thresholds given".into()));
    }
    if labels.is_empty() {
        return Err(Error::Config("no classes given".into()));
    }
    let pooled: Vec<_> = (1..=labels.len()).map(|c| pool_class(videos, c)).collect();
    let no_gt = pooled.iter().all(|(_, gts)| gts.is_empty());
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let mut per_class_ap = BTreeMap::new();
        let mut sum = 0.0;
        let mut counted = 0usize;
        for (ci, label) in labels.iter().enumerate() {
            let (preds, gts) = &pooled[ci];
            let ap = average_precision(preds, gts, threshold);
            if let Some(v) = ap {
                sum += v;
                counted += 1;
            }
            per_class_ap.insert(label.clone(), ap);
        }
        let map = if counted > 0 {
            Some(sum / counted as f64)
        } else {
            None
        };
        per_threshold.push(ThresholdReport {
            threshold,
            per_class_ap,
            map,
        });
    }
    let maps: Vec<f64> = per_threshold.iter().filter_map(|t| t.map).collect();
    let average_map = if maps.is_empty() {
        None
    } else {
        Some(maps.iter().sum::<f64>() / maps.len() as f64)
    };
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        per_threshold,
        average_map,
        no_gt,
    })
}

/// Parse a `start:step:end` threshold specification, e.g. `0.3:0.1:0.7`.
pub fn parse_thresholds(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "threshold spec '{spec}' must be start:step:end"
        )));
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Config(format!("bad number '{s}' in threshold spec")))
    };
    let (start, step, end) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
    if step <= 0.0 || end < start {
        return Err(Error::Config(format!("degenerate threshold spec '{spec}'")));
    }
    let mut out = Vec::new();
    let mut v = start;
    while v <= end + 1e-9 {
        out.push((v * 1e6).round() / 1e6);
        v += step;
    }
    Ok(out)
}

/// Render rows of mAP values (fractions) as an aligned percentage table with
/// one column per threshold plus the running average.
pub fn render_table(thresholds: &[f64], rows: &[(String, &EvalReport)]) -> String {
    let mut out = String::new();
    let label_width = rows
        .iter()
        .map(|(name, _)| name.len())
        .chain(std::iter::once("Method".len()))
        .max()
        .unwrap_or(6);
    out.push_str(&format!("{:<label_width$}", "Method"));
    for t in thresholds {
        out.push_str(&format!(" {:>6}", format!("{t:.2}")));
    }
    out.push_str(&format!(" {:>6}\n", "Avg"));
    for (name, report) in rows {
        out.push_str(&format!("{name:<label_width$}"));
        for tr in &report.per_threshold {
            match tr.map {
                Some(v) => out.push_str(&format!(" {:>6.1}", v * 100.0)),
                None => out.push_str(&format!(" {:>6}", "n/a")),
            }
        }
        match report.average_map {
            Some(v) => out.push_str(&format!(" {:>6.1}\n", v * 100.0)),
            None => out.push_str(&format!(" {:>6}\n", "n/a")),
        }
    }
    out
}
