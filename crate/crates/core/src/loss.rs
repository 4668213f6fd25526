//! Composite detection loss: focal classification over sigmoid outputs plus
//! an IoU regression loss on positives, with the positive classification term
//! weighted by the (detached) temporal IoU of the current regression.

use serde::{Deserialize, Serialize};

use crate::assign::AssignedTargets;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ModelForward;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IouKind {
    /// 1 - IoU, in [0, 1].
    Plain,
    /// 1 - GIoU (1-D generalized IoU), in [0, 2].
    Generalized,
}

impl IouKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "iou" => Ok(IouKind::Plain),
            "giou" => Ok(IouKind::Generalized),
            other => Err(Error::Config(format!(
                "unknown iou loss '{other}' (expected iou|giou)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub iou_kind: IouKind,
    pub cls_weight: f64,
    pub reg_weight: f64,
    /// Floor applied to the IoU quality weight so cold-start positives keep
    /// a classification gradient.
    pub quality_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            iou_kind: IouKind::Plain,
            cls_weight: 1.0,
            reg_weight: 1.0,
            quality_floor: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.focal_alpha && self.focal_alpha < 1.0) {
            return Err(Error::Config("focal alpha must be in (0, 1)".into()));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::Config("focal gamma must be >= 0".into()));
        }
        if self.quality_floor < 0.0 || self.quality_floor > 1.0 {
            return Err(Error::Config("quality floor must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scalar loss var plus detached term values for logging.
pub struct LossOutput {
    pub loss: Var,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub num_pos: usize,
    pub num_neg: usize,
}

/// Temporal IoU of two 1-D segments.
pub fn segment_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Focal map over a `[T, C]` logit map against a 0/1 target mask:
/// `alpha (1-p)^gamma softplus(-x)` on positives and
/// `(1-alpha) p^gamma softplus(x)` on negatives.
fn focal_map(g: &mut Graph, logits: Var, mask: Var, alpha: f64, gamma: f64) -> Result<Var> {
    let p = g.sigmoid(logits)?;
    let one_minus_p = g.one_minus(p)?;
    let neg_logits = g.neg(logits)?;
    let pos_focus = g.pow_scalar(one_minus_p, gamma)?;
    let pos_ce = g.softplus(neg_logits)?;
    let pos_term = g.mul(pos_focus, pos_ce)?;
    let pos_term = g.mul_scalar(pos_term, alpha)?;
    let neg_focus = g.pow_scalar(p, gamma)?;
    let neg_ce = g.softplus(logits)?;
    let neg_term = g.mul(neg_focus, neg_ce)?;
    let neg_term = g.mul_scalar(neg_term, 1.0 - alpha)?;
    let pos_masked = g.mul(mask, pos_term)?;
    let inv_mask = g.one_minus(mask)?;
    let neg_masked = g.mul(inv_mask, neg_term)?;
    g.add(pos_masked, neg_masked)
}

/// Differentiable IoU loss row for one level.
///
/// Predicted boundaries come from the level's `[T, 1]` distance estimates;
/// ground-truth boundaries are constants in grid units. Negative rows use the
/// dummy span [0, 1] and are masked out by the caller's weights.
fn iou_loss_rows(
    g: &mut Graph,
    d_start: Var,
    d_end: Var,
    stride: usize,
    gt_start: &[f64],
    gt_end: &[f64],
    kind: IouKind,
) -> Result<Var> {
    let t_len = gt_start.len();
    let positions: Vec<f64> = (0..t_len).map(|t| (t * stride) as f64).collect();
    let pos_col = g.constant(Tensor::col_vec(&positions));
    let gs_col = g.constant(Tensor::col_vec(gt_start));
    let ge_col = g.constant(Tensor::col_vec(gt_end));

    let ds_grid = g.mul_scalar(d_start, stride as f64)?;
    let de_grid = g.mul_scalar(d_end, stride as f64)?;
    let pred_start = g.sub(pos_col, ds_grid)?;
    let pred_end = g.add(pos_col, de_grid)?;

    let inter_hi = g.emin(pred_end, ge_col)?;
    let inter_lo = g.emax(pred_start, gs_col)?;
    let inter_raw = g.sub(inter_hi, inter_lo)?;
    let inter = g.relu(inter_raw)?;

    let pred_len = g.sub(pred_end, pred_start)?;
    let gt_len = g.sub(ge_col, gs_col)?;
    let sum_len = g.add(pred_len, gt_len)?;
    let union = g.sub(sum_len, inter)?;
    let iou = g.div(inter, union)?;
    match kind {
        IouKind::Plain => g.one_minus(iou),
        IouKind::Generalized => {
            let hull_hi = g.emax(pred_end, ge_col)?;
            let hull_lo = g.emin(pred_start, gs_col)?;
            let hull = g.sub(hull_hi, hull_lo)?;
            let slack = g.sub(hull, union)?;
            let penalty = g.div(slack, hull)?;
            let giou = g.sub(iou, penalty)?;
            g.one_minus(giou)
        }
    }
}

/// Assemble the composite loss for one video.
///
/// `L = (1/N_pos) sum_pos (q_iou * L_cls + L_reg) + (1/N_neg) sum_neg L_cls`
/// where `q_iou` is the temporal IoU between the currently decoded prediction
/// and its ground truth, floored and treated as a constant weight.
pub fn composite_loss(
    g: &mut Graph,
    fwd: &ModelForward,
    targets: &AssignedTargets,
    num_classes: usize,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    if fwd.levels.len() != targets.levels.len() {
        return Err(Error::shape(
            "composite_loss",
            format!(
                "{} forward levels vs {} target levels",
                fwd.levels.len(),
                targets.levels.len()
            ),
        ));
    }
    let num_pos = targets.num_pos;
    let num_neg = targets.num_neg;
    let inv_pos = if num_pos > 0 {
        1.0 / num_pos as f64
    } else {
        0.0
    };
    let inv_neg = if num_neg > 0 {
        1.0 / num_neg as f64
    } else {
        0.0
    };

    let mut cls_terms: Vec<Var> = Vec::new();
    let mut reg_terms: Vec<Var> = Vec::new();
    for (level, tgt) in fwd.levels.iter().zip(&targets.levels) {
        let t_len = tgt.class.len();
        if level.len != t_len {
            return Err(Error::shape(
                "composite_loss",
                format!("level length {} vs target length {}", level.len, t_len),
            ));
        }
        // one-hot target mask over classes
        let mut mask = Tensor::zeros(&[t_len, num_classes]);
        for (t, &c) in tgt.class.iter().enumerate() {
            if c > 0 {
                mask.set(t, c - 1, 1.0);
            }
        }
        let mask = g.constant(mask);
        let focal = focal_map(g, level.head.cls, mask, cfg.focal_alpha, cfg.focal_gamma)
            .map_err(|e| wrap_term(e, "classification"))?;
        let per_instant = g.sum_axis(focal, 1)?;

        // detached per-instant weights
        let ds = g.value(level.d_start).data().to_vec();
        let de = g.value(level.d_end).data().to_vec();
        let s_l = tgt.stride as f64;
        let mut cls_w = vec![0.0; t_len];
        let mut reg_w = vec![0.0; t_len];
        let mut gs_safe = vec![0.0; t_len];
        let mut ge_safe = vec![1.0; t_len];
        for t in 0..t_len {
            if tgt.class[t] > 0 {
                let pos = t as f64 * s_l;
                let pred = (pos - ds[t] * s_l, pos + de[t] * s_l);
                let quality =
                    segment_iou(pred, (tgt.gt_start[t], tgt.gt_end[t])).max(cfg.quality_floor);
                cls_w[t] = quality * cfg.cls_weight * inv_pos;
                reg_w[t] = cfg.reg_weight * inv_pos;
                gs_safe[t] = tgt.gt_start[t];
                ge_safe[t] = tgt.gt_end[t];
            } else {
                cls_w[t] = cfg.cls_weight * inv_neg;
            }
        }
        let cls_w = g.constant(Tensor::col_vec(&cls_w));
        let weighted = g.mul(per_instant, cls_w)?;
        cls_terms.push(g.sum_all(weighted)?);

        if num_pos > 0 {
            let reg_rows = iou_loss_rows(
                g,
                level.d_start,
                level.d_end,
                tgt.stride,
                &gs_safe,
                &ge_safe,
                cfg.iou_kind,
            )
            .map_err(|e| wrap_term(e, "regression"))?;
            let reg_w = g.constant(Tensor::col_vec(&reg_w));
            let weighted = g.mul(reg_rows, reg_w)?;
            reg_terms.push(g.sum_all(weighted)?);
        }
    }

    let mut cls_total = cls_terms[0];
    for t in &cls_terms[1..] {
        cls_total = g.add(cls_total, *t)?;
    }
    let cls_value = g.value(cls_total).data()[0];
    if !cls_value.is_finite() {
        return Err(Error::numeric("classification loss"));
    }

    let (loss, reg_value) = if reg_terms.is_empty() {
        (cls_total, 0.0)
    } else {
        let mut reg_total = reg_terms[0];
        for t in &reg_terms[1..] {
            reg_total = g.add(reg_total, *t)?;
        }
        let reg_value = g.value(reg_total).data()[0];
        if !reg_value.is_finite() {
            return Err(Error::numeric("regression loss"));
        }
        (g.add(cls_total, reg_total)?, reg_value)
    };
    Ok(LossOutput {
        loss,
        total: g.value(loss).data()[0],
        cls: cls_value,
        reg: reg_value,
        num_pos,
        num_neg,
    })
}

fn wrap_term(e: Error, term: &str) -> Error {
    match e {
        Error::Numeric { context } => Error::numeric(format!("{term} loss ({context})")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::{assign_targets, AssignConfig};
    use crate::data::ActionSegment;
    use crate::model::{Model, ModelConfig};
    use crate::params::uniform;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            in_dim: 4,
            dim: 6,
            levels: 2,
            embed_kernel: 3,
            conv_window: 3,
            scale_k: 3.0,
            gate_hidden: 6,
            fusion: "gating".into(),
            use_context: true,
            use_gating: true,
            num_classes: 2,
            bins: 8,
            head_depth: 1,
            head_kernel: 3,
        };
        Model::new(cfg, 11).unwrap()
    }

    #[test]
    fn iou_identities() {
        assert_eq!(segment_iou((0.0, 10.0), (0.0, 10.0)), 1.0);
        assert_eq!(segment_iou((0.0, 1.0), (5.0, 6.0)), 0.0);
        assert!((segment_iou((0.0, 10.0), (5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_regression_zeroes_reg_loss() {
        // hand-built single-level forward where the decoded prediction equals
        // the ground truth exactly
        let mut g = Graph::new();
        let d_start = g.constant(Tensor::col_vec(&[2.0, 3.0]));
        let d_end = g.constant(Tensor::col_vec(&[4.0, 3.0]));
        let rows = iou_loss_rows(
            &mut g,
            d_start,
            d_end,
            1,
            &[-2.0, -2.0],
            &[4.0, 4.0],
            IouKind::Plain,
        )
        .unwrap();
        // instant 0: pred [-2, 4] == gt -> loss 0; instant 1: pred [-2, 4] == gt
        assert!(g.value(rows).data()[0].abs() < 1e-12);
        assert!(g.value(rows).data()[1].abs() < 1e-12);
    }

    #[test]
    fn plain_iou_loss_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut g = Graph::new();
            let t_len = 4;
            let ds = uniform(&mut rng, &[t_len, 1], 0.0, 7.0);
            let de = uniform(&mut rng, &[t_len, 1], 0.0, 7.0);
            let d_start = g.constant(ds);
            let d_end = g.constant(de);
            let gs: Vec<f64> = (0..t_len).map(|t| t as f64 - 3.0).collect();
            let ge: Vec<f64> = (0..t_len).map(|t| t as f64 + 2.0).collect();
            let rows = iou_loss_rows(&mut g, d_start, d_end, 1, &gs, &ge, IouKind::Plain).unwrap();
            for v in g.value(rows).data() {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn focal_hand_value() {
        // single positive with p = 0.6, gamma 2, alpha 0.25:
        // term = -0.25 * 0.4^2 * ln 0.6
        let mut g = Graph::new();
        let logit = (0.6f64 / 0.4).ln();
        let logits = g.constant(Tensor::scalar(logit));
        let mask = g.constant(Tensor::scalar(1.0));
        let out = focal_map(&mut g, logits, mask, 0.25, 2.0).unwrap();
        let expect = -0.25 * 0.4f64.powi(2) * 0.6f64.ln();
        assert!((g.value(out).data()[0] - expect).abs() < 1e-12);
        assert!((g.value(out).data()[0] - 0.020426).abs() < 1e-4);
    }

    #[test]
    fn gamma_zero_reduces_to_scaled_bce() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::row_vec(&[0.3, -1.2, 2.0]));
        let mask = g.constant(Tensor::row_vec(&[1.0, 0.0, 1.0]));
        let out = focal_map(&mut g, logits, mask, 0.5, 0.0).unwrap();
        for (i, (&l, &m)) in [0.3f64, -1.2, 2.0].iter().zip(&[1.0, 0.0, 1.0]).enumerate() {
            let p = 1.0 / (1.0 + (-l).exp());
            let bce = if m > 0.5 {
                -(p.ln())
            } else {
                -((1.0 - p).ln())
            };
            assert!((g.value(out).data()[i] - 0.5 * bce).abs() < 1e-12, "i={i}");
        }
    }

    #[test]
    fn composite_loss_runs_and_is_nonnegative() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = uniform(&mut rng, &[16, 4], -1.0, 1.0);
        let segments = [ActionSegment {
            start: 4.0,
            end: 12.0,
            class_id: 1,
        }];
        let lengths = model.pyramid_cfg().level_lengths(16);
        let targets = assign_targets(
            &segments,
            &lengths,
            1.0,
            &AssignConfig {
                center_radius: 1.5,
                bins: 8,
            },
        )
        .unwrap();
        assert!(targets.num_pos > 0);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &x, true).unwrap();
        let out = composite_loss(&mut g, &fwd, &targets, 2, &LossConfig::default()).unwrap();
        assert!(out.total >= 0.0);
        assert!(out.cls > 0.0);
        assert!(out.reg > 0.0);
        g.backward(out.loss).unwrap();
    }

    #[test]
    fn no_positives_only_negative_classification() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = uniform(&mut rng, &[16, 4], -1.0, 1.0);
        let lengths = model.pyramid_cfg().level_lengths(16);
        let targets = assign_targets(
            &[],
            &lengths,
            1.0,
            &AssignConfig {
                center_radius: 1.5,
                bins: 8,
            },
        )
        .unwrap();
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &x, true).unwrap();
        let out = composite_loss(&mut g, &fwd, &targets, 2, &LossConfig::default()).unwrap();
        assert_eq!(out.num_pos, 0);
        assert_eq!(out.reg, 0.0);
        assert!(out.total > 0.0);
        g.backward(out.loss).unwrap();
        // gradient still reaches the classification head
        let grad = fwd.bound.grad(&g, model.head.cls_out.w);
        assert!(grad.is_some());
        assert!(grad.unwrap().data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn quality_weight_is_detached_from_gradient() {
        // gradients must be identical whether the weight is computed in-loop
        // or supplied as a frozen constant; with constants there is no path,
        // so two backward passes over the same graph state must agree.
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = uniform(&mut rng, &[16, 4], -1.0, 1.0);
        let segments = [ActionSegment {
            start: 4.0,
            end: 12.0,
            class_id: 1,
        }];
        let lengths = model.pyramid_cfg().level_lengths(16);
        let targets = assign_targets(
            &segments,
            &lengths,
            1.0,
            &AssignConfig {
                center_radius: 1.5,
                bins: 8,
            },
        )
        .unwrap();

        let grads = |cfg: &LossConfig| -> Vec<f64> {
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &x, true).unwrap();
            let out = composite_loss(&mut g, &fwd, &targets, 2, cfg).unwrap();
            g.backward(out.loss).unwrap();
            let mut flat = Vec::new();
            for id in model.store.ids() {
                if let Some(t) = fwd.bound.grad(&g, id) {
                    flat.extend_from_slice(t.data());
                } else {
                    flat.extend(std::iter::repeat_n(0.0, model.store.get(id).numel()));
                }
            }
            flat
        };
        // raising the floor to 1.0 pins every quality weight to 1: the
        // difference between runs is exactly the (frozen) weight values, so
        // regression gradients must be identical in both runs.
        let base = grads(&LossConfig::default());
        let pinned = grads(&LossConfig {
            quality_floor: 1.0,
            ..LossConfig::default()
        });
        assert_eq!(base.len(), pinned.len());
        // the classification head gradients differ (weights differ), but the
        // boundary-head gradients (reg loss path) must match exactly since the
        // quality weight never enters the regression term.
        let mut order = Vec::new();
        let mut offset = 0usize;
        for id in model.store.ids() {
            let n = model.store.get(id).numel();
            order.push((model.store.name(id).to_string(), offset, n));
            offset += n;
        }
        for (name, off, n) in order {
            if name.starts_with("head.start_out") || name.starts_with("head.end_out") {
                for i in off..off + n {
                    assert_eq!(base[i], pinned[i], "{name}[{}]", i - off);
                }
            }
        }
    }
}
