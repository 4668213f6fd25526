//! Independent reference implementations used only by the test suites.
//!
//! These deliberately re-derive results along a different code path than the
//! production implementations they check: Soft-NMS as a literal per-class
//! decay recursion, and average precision as an explicit PR-table with
//! interpolation computed per unique recall level.

use crate::data::ActionSegment;
use crate::eval::{rank_predictions, RankedPrediction, VideoEval};
use crate::postprocess::{NmsMethod, ScoredSegment};

fn iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let lo = if a.0 > b.0 { a.0 } else { b.0 };
    let hi = if a.1 < b.1 { a.1 } else { b.1 };
    let inter = if hi > lo { hi - lo } else { 0.0 };
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn reference_order(a: &ScoredSegment, b: &ScoredSegment) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap()
        .then(a.start.partial_cmp(&b.start).unwrap())
        .then(a.end.partial_cmp(&b.end).unwrap())
        .then(a.class_id.cmp(&b.class_id))
}

/// Brute-force Soft-NMS: explicit per-class pools, literal decay recursion.
pub fn soft_nms_reference(
    segments: &[ScoredSegment],
    method: NmsMethod,
    score_floor: f64,
) -> Vec<ScoredSegment> {
    let mut classes: Vec<usize> = segments.iter().map(|s| s.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut kept: Vec<ScoredSegment> = Vec::new();
    for class_id in classes {
        let mut pool: Vec<ScoredSegment> = segments
            .iter()
            .filter(|s| s.class_id == class_id)
            .cloned()
            .collect();
        while !pool.is_empty() {
            // literal argmax scan with the deterministic tie-break
            let mut best = 0;
            for i in 1..pool.len() {
                if reference_order(&pool[i], &pool[best]) == std::cmp::Ordering::Less {
                    best = i;
                }
            }
            let pick = pool.remove(best);
            let mut next = Vec::with_capacity(pool.len());
            for mut s in pool {
                let ov = iou((pick.start, pick.end), (s.start, s.end));
                let keep = match method {
                    NmsMethod::Linear { iou_threshold } => {
                        if ov > iou_threshold {
                            s.score *= 1.0 - ov;
                        }
                        true
                    }
                    NmsMethod::Gaussian { sigma } => {
                        s.score *= (-ov * ov / sigma).exp();
                        true
                    }
                    NmsMethod::Hard { iou_threshold } => ov <= iou_threshold,
                };
                if keep && s.score >= score_floor {
                    next.push(s);
                }
            }
            pool = next;
            kept.push(pick);
        }
    }
    kept.sort_by(reference_order);
    kept
}

/// Brute-force AP: explicit PR table, interpolated precision evaluated at
/// each unique recall level.
pub fn average_precision_reference(
    videos: &[VideoEval],
    class_id: usize,
    threshold: f64,
) -> Option<f64> {
    let mut preds: Vec<RankedPrediction> = Vec::new();
    let mut gts: Vec<(usize, (f64, f64))> = Vec::new();
    for (vi, v) in videos.iter().enumerate() {
        for p in &v.predictions {
            if p.class_id == class_id {
                preds.push(RankedPrediction {
                    video: vi,
                    span: (p.start, p.end),
                    score: p.score,
                });
            }
        }
        for g in &v.ground_truth {
            if g.class_id == class_id {
                gts.push((vi, (g.start, g.end)));
            }
        }
    }
    if gts.is_empty() {
        return None;
    }
    rank_predictions(&mut preds);

    let mut taken = vec![false; gts.len()];
    let mut table: Vec<(f64, f64)> = Vec::new(); // (precision, recall) per rank
    let mut hits = 0usize;
    for (rank, p) in preds.iter().enumerate() {
        let mut chosen: Option<usize> = None;
        let mut chosen_iou = -1.0;
        for (gi, (vid, span)) in gts.iter().enumerate() {
            if *vid != p.video || taken[gi] {
                continue;
            }
            let ov = iou(p.span, *span);
            if ov >= threshold && ov > chosen_iou {
                chosen = Some(gi);
                chosen_iou = ov;
            }
        }
        if let Some(gi) = chosen {
            taken[gi] = true;
            hits += 1;
        }
        table.push((
            hits as f64 / (rank + 1) as f64,
            hits as f64 / gts.len() as f64,
        ));
    }

    // integrate over unique recall levels with interpolated precision
    let mut recalls: Vec<f64> = table.iter().map(|(_, r)| *r).filter(|r| *r > 0.0).collect();
    recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let p_interp = table
            .iter()
            .filter(|(_, rr)| *rr >= r)
            .map(|(pp, _)| *pp)
            .fold(0.0, f64::max);
        ap += (r - prev) * p_interp;
        prev = r;
    }
    Some(ap)
}

/// Brute-force mAP across classes and thresholds, mirroring the report shape.
pub fn map_reference(
    videos: &[VideoEval],
    num_classes: usize,
    thresholds: &[f64],
) -> (Vec<Option<f64>>, Option<f64>) {
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut sum = 0.0;
        let mut counted = 0usize;
        for c in 1..=num_classes {
            if let Some(ap) = average_precision_reference(videos, c, t) {
                sum += ap;
                counted += 1;
            }
        }
        per_threshold.push(if counted > 0 {
            Some(sum / counted as f64)
        } else {
            None
        });
    }
    let maps: Vec<f64> = per_threshold.iter().flatten().copied().collect();
    let avg = if maps.is_empty() {
        None
    } else {
        Some(maps.iter().sum::<f64>() / maps.len() as f64)
    };
    (per_threshold, avg)
}

/// Convenience used by the fuzz-style comparisons in the suites.
pub fn random_eval_instance(
    rng: &mut rand_chacha::ChaCha8Rng,
    max_preds: usize,
    max_gts: usize,
    num_classes: usize,
    num_videos: usize,
) -> Vec<VideoEval> {
    use rand::Rng;
    (0..num_videos)
        .map(|_| {
            let np = rng.gen_range(0..=max_preds);
            let ng = rng.gen_range(0..=max_gts);
            let predictions = (0..np)
                .map(|_| {
                    let start = rng.gen_range(0.0..50.0);
                    let len = rng.gen_range(0.5..15.0);
                    ScoredSegment {
                        start,
                        end: start + len,
                        class_id: rng.gen_range(1..=num_classes),
                        score: rng.gen_range(0.01..1.0),
                    }
                })
                .collect();
            let ground_truth = (0..ng)
                .map(|_| {
                    let start = rng.gen_range(0.0..50.0);
                    let len = rng.gen_range(0.5..15.0);
                    ActionSegment {
                        start,
                        end: start + len,
                        class_id: rng.gen_range(1..=num_classes),
                    }
                })
                .collect();
            VideoEval {
                predictions,
                ground_truth,
            }
        })
        .collect()
}
