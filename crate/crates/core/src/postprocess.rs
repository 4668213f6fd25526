//! Inference-time filtering and Soft-NMS deduplication.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A scored candidate segment in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSegment {
    pub start: f64,
    pub end: f64,
    /// 1-based class id.
    pub class_id: usize,
    pub score: f64,
}

impl ScoredSegment {
    pub fn span(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

/// Temporal IoU of two segments: intersection length over union length.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NmsMethod {
    /// Scores decay by (1 - IoU) when IoU exceeds the threshold.
    Linear { iou_threshold: f64 },
    /// Scores decay by exp(-IoU^2 / sigma).
    Gaussian { sigma: f64 },
    /// Classic suppression (debug only): drop everything above the threshold.
    Hard { iou_threshold: f64 },
}

impl NmsMethod {
    /// Multiplicative decay applied to a segment overlapping the current pick
    /// with the given IoU. `None` means the segment is removed outright.
    fn decay(&self, iou: f64) -> Option<f64> {
        match *self {
            NmsMethod::Linear { iou_threshold } => {
                Some(if iou > iou_threshold { 1.0 - iou } else { 1.0 })
            }
            NmsMethod::Gaussian { sigma } => Some((-iou * iou / sigma).exp()),
            NmsMethod::Hard { iou_threshold } => {
                if iou > iou_threshold {
                    None
                } else {
                    Some(1.0)
                }
            }
        }
    }
}

/// Deterministic ordering: score descending, then earlier start, earlier end,
/// lower class id.
pub fn rank_order(a: &ScoredSegment, b: &ScoredSegment) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap()
        .then(a.start.partial_cmp(&b.start).unwrap())
        .then(a.end.partial_cmp(&b.end).unwrap())
        .then(a.class_id.cmp(&b.class_id))
}

/// Soft-NMS over one video's candidates; classes are processed independently.
///
/// Iteratively moves the highest-scoring remaining segment to the output and
/// decays the scores of the same-class rest by the method's factor; segments
/// falling below `score_floor` are dropped. Output is sorted by final score.
pub fn soft_nms(
    segments: &[ScoredSegment],
    method: NmsMethod,
    score_floor: f64,
) -> Result<Vec<ScoredSegment>> {
    match method {
        NmsMethod::Gaussian { sigma } if sigma <= 0.0 => {
            return Err(Error::Config("gaussian soft-nms sigma must be > 0".into()));
        }
        NmsMethod::Linear { iou_threshold } | NmsMethod::Hard { iou_threshold }
            if !(0.0..=1.0).contains(&iou_threshold) =>
        {
            return Err(Error::Config("nms iou threshold must be in [0, 1]".into()));
        }
        _ => {}
    }
    let mut out = Vec::with_capacity(segments.len());
    let mut pool: Vec<ScoredSegment> = segments.to_vec();
    while !pool.is_empty() {
        let best = pool
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| rank_order(a, b))
            .map(|(i, _)| i)
            .unwrap();
        let pick = pool.swap_remove(best);
        pool.retain_mut(|s| {
            if s.class_id != pick.class_id {
                return true;
            }
            let iou = temporal_iou(pick.span(), s.span());
            match method.decay(iou) {
                None => false,
                Some(f) => {
                    s.score *= f;
                    s.score >= score_floor
                }
            }
        });
        out.push(pick);
    }
    out.sort_by(rank_order);
    Ok(out)
}

/// Pre-NMS candidate filtering: keep scores above `lambda`, capped at the
/// `top_k` best.
pub fn filter_candidates(
    mut segments: Vec<ScoredSegment>,
    lambda: f64,
    top_k: usize,
) -> Vec<ScoredSegment> {
    segments.retain(|s| s.score >= lambda);
    segments.sort_by(rank_order);
    segments.truncate(top_k);
    segments
}
