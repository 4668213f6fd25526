//! Shared prediction head: classification scores plus statistically estimated
//! start/end boundary distances at every instant of every pyramid level.
//!
//! Boundary distances are expectations over a relative probability
//! distribution: for bins b in 0..B, the start-side logit at instant t is
//! `start[t-b, b] + center[t, b]` (indices clamped), softmax over b, and the
//! distance is the expected bin index. The end side mirrors it with `t+b` and
//! the second half of the center-offset map.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{conv_init, normal_init, Bound, ParamStore};
use crate::postprocess::ScoredSegment;
use crate::tag::ConvParams;

#[derive(Clone, Copy, Debug)]
pub struct HeadConfig {
    /// Number of action classes C (background is implicit).
    pub num_classes: usize,
    /// Boundary bins per side B.
    pub bins: usize,
    /// Number of conv+relu blocks in each tower.
    pub depth: usize,
    /// Tower/output convolution kernel length (odd).
    pub kernel: usize,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("head needs at least one class".into()));
        }
        if self.bins == 0 {
            return Err(Error::Config("head needs at least one boundary bin".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "head kernel {} must be odd",
                self.kernel
            )));
        }
        Ok(())
    }
}

/// Class-prior probability used to initialize the classification bias so an
/// untrained model predicts mostly background under the focal loss.
const CLASS_PRIOR: f64 = 0.02;

/// Head parameters. One set serves every pyramid level.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub cfg: HeadConfig,
    pub cls_tower: Vec<ConvParams>,
    pub reg_tower: Vec<ConvParams>,
    pub cls_out: ConvParams,
    pub start_out: ConvParams,
    pub end_out: ConvParams,
    pub center_out: ConvParams,
}

impl HeadParams {
    pub fn build(
        store: &mut ParamStore,
        dim: usize,
        cfg: HeadConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let tower = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            (0..cfg.depth)
                .map(|i| ConvParams {
                    w: store.add(format!("head.{name}{i}.w"), conv_init(rng, dim, dim, k)),
                    b: store.add(format!("head.{name}{i}.b"), Tensor::zeros(&[1, dim])),
                })
                .collect::<Vec<_>>()
        };
        let cls_tower = tower(store, rng, "cls_tower");
        let reg_tower = tower(store, rng, "reg_tower");
        let cls_bias = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        let cls_out = ConvParams {
            w: store.add(
                "head.cls_out.w",
                normal_init(rng, &[cfg.num_classes, dim, k], 0.01),
            ),
            b: store.add(
                "head.cls_out.b",
                Tensor::full(&[1, cfg.num_classes], cls_bias),
            ),
        };
        // boundary and offset heads start at zero: uniform bin distributions
        let zconv = |store: &mut ParamStore, name: &str, out: usize| ConvParams {
            w: store.add(format!("head.{name}.w"), Tensor::zeros(&[out, dim, k])),
            b: store.add(format!("head.{name}.b"), Tensor::zeros(&[1, out])),
        };
        Ok(HeadParams {
            cfg,
            cls_tower,
            reg_tower,
            cls_out,
            start_out: zconv(store, "start_out", cfg.bins),
            end_out: zconv(store, "end_out", cfg.bins),
            center_out: zconv(store, "center_out", 2 * cfg.bins),
        })
    }

    fn run_tower(
        &self,
        g: &mut Graph,
        bound: &Bound,
        tower: &[ConvParams],
        mut x: Var,
    ) -> Result<Var> {
        for conv in tower {
            x = g.conv1d(x, bound.var(conv.w), Some(bound.var(conv.b)), 1)?;
            x = g.relu(x)?;
        }
        Ok(x)
    }

    /// Per-instant logit maps for one pyramid level.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, feat: Var) -> Result<HeadOutputs> {
        let cls_feat = self.run_tower(g, bound, &self.cls_tower, feat)?;
        let reg_feat = self.run_tower(g, bound, &self.reg_tower, feat)?;
        let conv = |g: &mut Graph, p: &ConvParams, x: Var| {
            g.conv1d(x, bound.var(p.w), Some(bound.var(p.b)), 1)
        };
        Ok(HeadOutputs {
            cls: conv(g, &self.cls_out, cls_feat)?,
            start: conv(g, &self.start_out, reg_feat)?,
            end: conv(g, &self.end_out, reg_feat)?,
            center: conv(g, &self.center_out, reg_feat)?,
        })
    }
}

/// Logit maps for one level: `cls [T, C]`, `start/end [T, B]`, `center [T, 2B]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub cls: Var,
    pub start: Var,
    pub end: Var,
    pub center: Var,
}

/// Differentiable boundary expectation for a whole level.
/// Returns `(d_start, d_end)`, both `[T, 1]`, values in `[0, B-1]`.
pub fn estimate_boundaries_graph(
    g: &mut Graph,
    out: &HeadOutputs,
    bins: usize,
) -> Result<(Var, Var)> {
    let center_start = g.slice_cols(out.center, 0, bins)?;
    let center_end = g.slice_cols(out.center, bins, 2 * bins)?;
    let bin_values: Vec<f64> = (0..bins).map(|b| b as f64).collect();
    let bins_col = g.constant(Tensor::col_vec(&bin_values));

    let start_shifted = g.bin_shift(out.start, true)?;
    let combined_start = g.add(start_shifted, center_start)?;
    let p_start = g.softmax(combined_start, 1)?;
    let d_start = g.matmul(p_start, bins_col)?;

    let end_shifted = g.bin_shift(out.end, false)?;
    let combined_end = g.add(end_shifted, center_end)?;
    let p_end = g.softmax(combined_end, 1)?;
    let d_end = g.matmul(p_end, bins_col)?;
    Ok((d_start, d_end))
}

/// Value-level boundary expectation over raw logit maps. Independent of the
/// graph route; used by decoding and as a cross-check in tests.
pub fn estimate_boundaries(start: &Tensor, end: &Tensor, center: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let t_len = start.rows();
    let bins = start.cols();
    assert_eq!(center.cols(), 2 * bins, "center map must hold 2B logits");
    let clamp = |v: isize| v.clamp(0, t_len as isize - 1) as usize;
    let expectation = |logits: &[f64]| -> f64 {
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let mut acc = 0.0;
        for (b, l) in logits.iter().enumerate() {
            let e = (l - mx).exp();
            z += e;
            acc += b as f64 * e;
        }
        acc / z
    };
    let mut d_start = Vec::with_capacity(t_len);
    let mut d_end = Vec::with_capacity(t_len);
    let mut buf = vec![0.0; bins];
    for t in 0..t_len {
        for b in 0..bins {
            buf[b] = start.at(clamp(t as isize - b as isize), b) + center.at(t, b);
        }
        d_start.push(expectation(&buf));
        for b in 0..bins {
            buf[b] = end.at(clamp(t as isize + b as isize), b) + center.at(t, bins + b);
        }
        d_end.push(expectation(&buf));
    }
    (d_start, d_end)
}

/// Raw per-instant model output at one pyramid level.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub level: usize,
    pub instant: usize,
    /// Per-class probabilities in (0, 1).
    pub scores: Vec<f64>,
    /// Start/end distances in level-instant units, within [0, B-1].
    pub d_start: f64,
    pub d_end: f64,
}

/// Decode per-instant predictions to scored segments in seconds.
///
/// `start = (t - d_start) * stride * delta_seconds`, symmetrically for the
/// end; class is the argmax and the confidence its probability. Degenerate
/// segments (start >= end after clipping to the video extent) are discarded.
pub fn decode(
    predictions: &[Prediction],
    strides: &[usize],
    delta_seconds: f64,
    duration_seconds: f64,
) -> Vec<ScoredSegment> {
    let mut out = Vec::new();
    for p in predictions {
        let stride = strides[p.level] as f64;
        let start = (p.instant as f64 - p.d_start) * stride * delta_seconds;
        let end = (p.instant as f64 + p.d_end) * stride * delta_seconds;
        let start = start.max(0.0);
        let end = end.min(duration_seconds.max(0.0));
        if start >= end {
            continue;
        }
        let (best, score) = p
            .scores
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .expect("at least one class");
        out.push(ScoredSegment {
            start,
            end,
            class_id: best + 1,
            score,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::uniform;
    use rand_chacha::rand_core::SeedableRng;

    fn test_cfg() -> HeadConfig {
        HeadConfig {
            num_classes: 3,
            bins: 4,
            depth: 1,
            kernel: 3,
        }
    }

    fn build(dim: usize, seed: u64) -> (ParamStore, HeadParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = HeadParams::build(&mut store, dim, test_cfg(), &mut rng).unwrap();
        (store, head)
    }

    #[test]
    fn zero_final_layers_give_neutral_outputs() {
        let (mut store, head) = build(4, 1);
        // zero the classification output too
        *store.get_mut(head.cls_out.w) = Tensor::zeros(&[3, 4, 3]);
        *store.get_mut(head.cls_out.b) = Tensor::zeros(&[1, 3]);
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g, false);
        let feat = g.constant(uniform(
            &mut ChaCha8Rng::seed_from_u64(2),
            &[6, 4],
            -1.0,
            1.0,
        ));
        let out = head.forward(&mut g, &bound, feat).unwrap();
        let probs = g.sigmoid(out.cls).unwrap();
        for v in g.value(probs).data() {
            assert_eq!(*v, 0.5);
        }
        // boundary heads are zero-initialized by construction: uniform bins
        let (d_start, d_end) = estimate_boundaries_graph(&mut g, &out, 4).unwrap();
        for v in g.value(d_start).data().iter().chain(g.value(d_end).data()) {
            assert!((v - 1.5).abs() < 1e-12); // (B-1)/2
        }
    }

    #[test]
    fn output_shapes_per_level_length() {
        let (store, head) = build(4, 3);
        for len in [1usize, 4, 9] {
            let mut g = Graph::new();
            let bound = store.bind_all(&mut g, false);
            let feat = g.constant(uniform(
                &mut ChaCha8Rng::seed_from_u64(4),
                &[len, 4],
                -1.0,
                1.0,
            ));
            let out = head.forward(&mut g, &bound, feat).unwrap();
            assert_eq!(g.value(out.cls).shape(), &[len, 3]);
            assert_eq!(g.value(out.start).shape(), &[len, 4]);
            assert_eq!(g.value(out.end).shape(), &[len, 4]);
            assert_eq!(g.value(out.center).shape(), &[len, 8]);
        }
    }

    #[test]
    fn shared_head_identical_features_identical_logits() {
        let (store, head) = build(4, 5);
        let feat_t = uniform(&mut ChaCha8Rng::seed_from_u64(6), &[5, 4], -1.0, 1.0);
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g, false);
        let f1 = g.constant(feat_t.clone());
        let f2 = g.constant(feat_t);
        let o1 = head.forward(&mut g, &bound, f1).unwrap();
        let o2 = head.forward(&mut g, &bound, f2).unwrap();
        assert_eq!(g.value(o1.cls).data(), g.value(o2.cls).data());
        assert_eq!(g.value(o1.start).data(), g.value(o2.start).data());
    }

    #[test]
    fn mutating_head_changes_every_level() {
        let (mut store, head) = build(3, 7);
        let feats: Vec<Tensor> = (0..3)
            .map(|i| uniform(&mut ChaCha8Rng::seed_from_u64(10 + i), &[4, 3], -1.0, 1.0))
            .collect();
        let run = |store: &ParamStore| -> Vec<Vec<f64>> {
            let mut g = Graph::new();
            let bound = store.bind_all(&mut g, false);
            feats
                .iter()
                .map(|f| {
                    let fv = g.constant(f.clone());
                    let o = head.forward(&mut g, &bound, fv).unwrap();
                    g.value(o.cls).data().to_vec()
                })
                .collect()
        };
        let before = run(&store);
        store.get_mut(head.cls_out.b).data_mut()[0] += 1.0;
        let after = run(&store);
        for (b, a) in before.iter().zip(&after) {
            assert_ne!(b, a);
        }
    }

    #[test]
    fn boundary_expectation_hand_case() {
        // B=3, combined logits [ln1, ln2, ln4] -> p = [1/7, 2/7, 4/7], d = 10/7
        let t_len = 4;
        let row = [1.0f64.ln(), 2.0f64.ln(), 4.0f64.ln()];
        let start = Tensor::from_rows(&vec![row.to_vec(); t_len]).unwrap();
        let end = Tensor::from_rows(&vec![row.to_vec(); t_len]).unwrap();
        let center = Tensor::zeros(&[t_len, 6]);
        let (d_start, d_end) = estimate_boundaries(&start, &end, &center);
        for v in d_start.iter().chain(d_end.iter()) {
            assert!((v - 10.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_one_hot_bin_zero() {
        let t_len = 3;
        let mut row = vec![0.0; 4];
        row[0] = 60.0; // overwhelming mass at bin 0
        let start = Tensor::from_rows(&vec![row.clone(); t_len]).unwrap();
        let end = Tensor::from_rows(&vec![row; t_len]).unwrap();
        let center = Tensor::zeros(&[t_len, 8]);
        let (d_start, d_end) = estimate_boundaries(&start, &end, &center);
        for v in d_start.iter().chain(d_end.iter()) {
            assert!(*v < 1e-12);
        }
    }

    #[test]
    fn boundary_logit_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let start = uniform(&mut rng, &[5, 4], -2.0, 2.0);
        let end = uniform(&mut rng, &[5, 4], -2.0, 2.0);
        let center = uniform(&mut rng, &[5, 8], -2.0, 2.0);
        let (d1, e1) = estimate_boundaries(&start, &end, &center);
        // shift all center logits at every instant by a constant
        let mut center2 = center.clone();
        for v in center2.data_mut() {
            *v += 7.5;
        }
        let (d2, e2) = estimate_boundaries(&start, &end, &center2);
        for (a, b) in d1.iter().zip(&d2).chain(e1.iter().zip(&e2)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_route_matches_value_route() {
        let (store, head) = build(4, 9);
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g, false);
        let feat = g.constant(uniform(
            &mut ChaCha8Rng::seed_from_u64(21),
            &[7, 4],
            -1.0,
            1.0,
        ));
        let out = head.forward(&mut g, &bound, feat).unwrap();
        let (gv_s, gv_e) = estimate_boundaries_graph(&mut g, &out, 4).unwrap();
        let (pv_s, pv_e) =
            estimate_boundaries(g.value(out.start), g.value(out.end), g.value(out.center));
        for (a, b) in g.value(gv_s).data().iter().zip(&pv_s) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(gv_e).data().iter().zip(&pv_e) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_arithmetic_and_degenerates() {
        let preds = vec![
            Prediction {
                level: 0,
                instant: 10,
                scores: vec![0.2, 0.9],
                d_start: 2.0,
                d_end: 3.0,
            },
            Prediction {
                level: 0,
                instant: 4,
                scores: vec![0.5, 0.1],
                d_start: 0.0,
                d_end: 0.0,
            },
            Prediction {
                level: 1,
                instant: 10,
                scores: vec![0.2, 0.9],
                d_start: 2.0,
                d_end: 3.0,
            },
        ];
        let segs = decode(&preds, &[1, 2], 1.0, 100.0);
        assert_eq!(segs.len(), 2); // zero-width discarded
        assert_eq!(
            segs[0],
            ScoredSegment {
                start: 8.0,
                end: 13.0,
                class_id: 2,
                score: 0.9
            }
        );
        // doubled stride scales both offset and length
        assert_eq!(segs[1].start, 16.0);
        assert_eq!(segs[1].end, 26.0);
    }
}
