//! Label assignment: center sampling over the pyramid geometry.
//!
//! An instant t at level l (stride s_l) is positive for segment a when
//! its grid position t*s_l lies inside the segment, within rho*s_l of the
//! segment center, and the larger of its two boundary distances falls in
//! level l's regression range. Overlap ties go to the shortest segment.

use crate::data::ActionSegment;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AssignConfig {
    /// Center-sampling radius rho, in level-stride units.
    pub center_radius: f64,
    /// Boundary bins per side (fixes the per-level regression ranges).
    pub bins: usize,
}

/// Half-open regression range (lo, hi] in input-grid units for level `l`
/// (0-based); level 0 starts closed at 0 and the top level is unbounded.
pub fn regression_range(level: usize, num_levels: usize, bins: usize) -> (f64, f64) {
    let unit = (bins - 1) as f64;
    let lo = if level == 0 {
        0.0
    } else {
        unit * (1 << (level - 1)) as f64
    };
    let hi = if level + 1 == num_levels {
        f64::INFINITY
    } else {
        unit * (1 << level) as f64
    };
    (lo, hi)
}

/// Per-level assignment targets, index-aligned with the level's instants.
#[derive(Clone, Debug)]
pub struct LevelTargets {
    pub stride: usize,
    /// 0 = background, else the 1-based class id.
    pub class: Vec<usize>,
    /// Start/end distances in level units; meaningful only at positives.
    pub d_start: Vec<f64>,
    pub d_end: Vec<f64>,
    /// Ground-truth boundaries in input-grid units; meaningful only at positives.
    pub gt_start: Vec<f64>,
    pub gt_end: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AssignedTargets {
    pub levels: Vec<LevelTargets>,
    pub num_pos: usize,
    pub num_neg: usize,
    /// Segments skipped because they fall outside the feature-grid extent.
    pub rejected: usize,
}

/// Assign targets for one video.
///
/// `level_lengths` are the pyramid level lengths; level l has stride `2^l`.
/// `delta_seconds` converts segment times into grid units.
pub fn assign_targets(
    segments: &[ActionSegment],
    level_lengths: &[usize],
    delta_seconds: f64,
    cfg: &AssignConfig,
) -> Result<AssignedTargets> {
    if cfg.center_radius <= 0.0 {
        return Err(Error::Config("center radius must be > 0".into()));
    }
    if cfg.bins < 2 {
        return Err(Error::Config("assignment needs at least 2 bins".into()));
    }
    let num_levels = level_lengths.len();
    let grid_extent = level_lengths[0] as f64;
    let mut rejected = 0usize;
    let usable: Vec<(f64, f64, usize)> = segments
        .iter()
        .filter_map(|s| {
            if s.start < 0.0 || s.end <= s.start {
                rejected += 1;
                log::warn!("rejecting malformed segment [{}, {}]", s.start, s.end);
                return None;
            }
            let gs = s.start / delta_seconds;
            let ge = s.end / delta_seconds;
            if ge > grid_extent + 1e-9 || gs < -1e-9 {
                rejected += 1;
                log::warn!(
                    "rejecting segment [{}, {}]: outside feature grid extent {}",
                    s.start,
                    s.end,
                    grid_extent * delta_seconds
                );
                return None;
            }
            Some((gs, ge, s.class_id))
        })
        .collect();

    let mut num_pos = 0usize;
    let mut total = 0usize;
    let mut levels = Vec::with_capacity(num_levels);
    for (l, &len) in level_lengths.iter().enumerate() {
        let stride = 1usize << l;
        let s_l = stride as f64;
        let (range_lo, range_hi) = regression_range(l, num_levels, cfg.bins);
        let mut class = vec![0usize; len];
        let mut d_start = vec![0.0; len];
        let mut d_end = vec![0.0; len];
        let mut gt_start = vec![0.0; len];
        let mut gt_end = vec![0.0; len];
        for t in 0..len {
            let pos = t as f64 * s_l;
            // best candidate: shortest qualifying segment, then earliest, then lowest class
            let mut best: Option<(f64, f64, usize)> = None;
            for &(gs, ge, cid) in &usable {
                if pos < gs || pos > ge {
                    continue;
                }
                let center = 0.5 * (gs + ge);
                if (pos - center).abs() > cfg.center_radius * s_l {
                    continue;
                }
                let max_d = (pos - gs).max(ge - pos);
                let in_range = if l == 0 {
                    max_d <= range_hi
                } else {
                    max_d > range_lo && max_d <= range_hi
                };
                if !in_range {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bs, be, bc)) => {
                        let (dur, bdur) = (ge - gs, be - bs);
                        dur < bdur - 1e-12
                            || ((dur - bdur).abs() <= 1e-12
                                && (gs < bs - 1e-12 || ((gs - bs).abs() <= 1e-12 && cid < bc)))
                    }
                };
                if better {
                    best = Some((gs, ge, cid));
                }
            }
            if let Some((gs, ge, cid)) = best {
                class[t] = cid;
                d_start[t] = (pos - gs) / s_l;
                d_end[t] = (ge - pos) / s_l;
                gt_start[t] = gs;
                gt_end[t] = ge;
                num_pos += 1;
            }
        }
        total += len;
        levels.push(LevelTargets {
            stride,
            class,
            d_start,
            d_end,
            gt_start,
            gt_end,
        });
    }
    Ok(AssignedTargets {
        levels,
        num_pos,
        num_neg: total - num_pos,
        rejected,
    })
}
