//! Temporal attention gating layer.
//!
//! Output is the sum of three branches plus a residual connection:
//! a convolution branch fusing two parallel 1-D convolutions of different
//! window sizes, a context branch cross-attending from each instant to the
//! boundary frames of its receptive field, and an instant branch built from
//! temporally pooled features.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{affine_init, conv_init, Bound, ParamId, ParamStore};

/// Strategy for fusing the two convolution responses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Per-instant convex combination through a learned sigmoid gate.
    Gating,
    /// Plain average of the two responses.
    Average,
    /// Elementwise maximum of the two responses.
    Maximum,
    /// Sum of the two responses weighted by a third convolution.
    Baseline,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gating" => Ok(FusionMode::Gating),
            "average" => Ok(FusionMode::Average),
            "maximum" => Ok(FusionMode::Maximum),
            "baseline" => Ok(FusionMode::Baseline),
            other => Err(Error::Config(format!(
                "unknown fusion mode '{other}' (expected gating|average|maximum|baseline)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::Gating => "gating",
            FusionMode::Average => "average",
            FusionMode::Maximum => "maximum",
            FusionMode::Baseline => "baseline",
        }
    }
}

/// Round to the nearest odd integer, rounding even results up.
pub fn round_to_odd(x: f64) -> usize {
    let n = x.round() as usize;
    if n % 2 == 1 {
        n.max(1)
    } else {
        n + 1
    }
}

/// Geometry of one layer.
#[derive(Clone, Copy, Debug)]
pub struct TagConfig {
    /// Channel width D.
    pub dim: usize,
    /// Narrow convolution window w (odd).
    pub conv_window: usize,
    /// Window-scale hyperparameter k; the wide window is round_to_odd(k * w).
    pub scale_k: f64,
    /// Hidden width of the gate MLP.
    pub gate_hidden: usize,
    /// Baseline-fusion convolution window w' (odd).
    pub baseline_window: usize,
}

impl TagConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("layer dim must be >= 1".into()));
        }
        if self.conv_window % 2 == 0 || self.baseline_window % 2 == 0 {
            return Err(Error::Config(format!(
                "convolution windows must be odd, got w={} w'={}",
                self.conv_window, self.baseline_window
            )));
        }
        if self.gate_hidden == 0 {
            return Err(Error::Config("gate hidden width must be >= 1".into()));
        }
        if self.wide_window() <= self.conv_window {
            return Err(Error::Config(format!(
                "wide window {} must exceed w={} (scale_k too small)",
                self.wide_window(),
                self.conv_window
            )));
        }
        Ok(())
    }

    /// The wide convolution window kw.
    pub fn wide_window(&self) -> usize {
        round_to_odd(self.scale_k * self.conv_window as f64)
    }

    /// Boundary-frame offset: the receptive radius of the wide convolution.
    pub fn boundary_radius(&self) -> usize {
        self.wide_window() / 2
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AffineParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl AffineParams {
    pub fn apply(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        g.affine(x, bound.var(self.w), bound.var(self.b))
    }
}

/// All learnable parameters of one layer, as ids into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct TagLayerParams {
    pub cfg: TagConfig,
    pub conv_w: ConvParams,
    pub conv_kw: ConvParams,
    pub gate_w1: ParamId,
    pub gate_b1: ParamId,
    pub gate_w2: ParamId,
    pub gate_b2: ParamId,
    pub attn_q: AffineParams,
    pub attn_k: AffineParams,
    pub attn_v: AffineParams,
    pub attn_out: AffineParams,
    pub instant_fc: AffineParams,
    pub baseline_conv: ConvParams,
}

impl TagLayerParams {
    /// Create and register all parameters under `prefix`.
    ///
    /// The gate head and the attention output projection start at zero, so a
    /// fresh layer behaves like the average fusion with a silent context
    /// branch.
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        cfg: TagConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let h = cfg.gate_hidden;
        let kw = cfg.wide_window();
        let conv =
            |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, k: usize| ConvParams {
                w: store.add(format!("{prefix}.{name}.w"), conv_init(rng, d, d, k)),
                b: store.add(format!("{prefix}.{name}.b"), Tensor::zeros(&[1, d])),
            };
        let affine =
            |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, zero: bool| AffineParams {
                w: store.add(
                    format!("{prefix}.{name}.w"),
                    if zero {
                        Tensor::zeros(&[d, d])
                    } else {
                        affine_init(rng, d, d)
                    },
                ),
                b: store.add(format!("{prefix}.{name}.b"), Tensor::zeros(&[1, d])),
            };
        Ok(TagLayerParams {
            cfg,
            conv_w: conv(store, rng, "conv_w", cfg.conv_window),
            conv_kw: conv(store, rng, "conv_kw", kw),
            gate_w1: store.add(format!("{prefix}.gate.w1"), affine_init(rng, 2 * d, h)),
            gate_b1: store.add(format!("{prefix}.gate.b1"), Tensor::zeros(&[1, h])),
            gate_w2: store.add(format!("{prefix}.gate.w2"), Tensor::zeros(&[h, 1])),
            gate_b2: store.add(format!("{prefix}.gate.b2"), Tensor::zeros(&[1, 1])),
            attn_q: affine(store, rng, "attn_q", false),
            attn_k: affine(store, rng, "attn_k", false),
            attn_v: affine(store, rng, "attn_v", false),
            attn_out: affine(store, rng, "attn_out", true),
            instant_fc: affine(store, rng, "instant_fc", false),
            baseline_conv: conv(store, rng, "baseline_conv", cfg.baseline_window),
        })
    }

    /// The two parallel convolution responses, both `[T, D]` (same padding).
    pub fn conv_outputs(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        let narrow = g.conv1d(
            x,
            bound.var(self.conv_w.w),
            Some(bound.var(self.conv_w.b)),
            1,
        )?;
        let wide = g.conv1d(
            x,
            bound.var(self.conv_kw.w),
            Some(bound.var(self.conv_kw.b)),
            1,
        )?;
        Ok((narrow, wide))
    }

    /// Gate coefficients from the two convolution responses: `[T, 1]` in (0, 1).
    pub fn gate_from_convs(
        &self,
        g: &mut Graph,
        bound: &Bound,
        narrow: Var,
        wide: Var,
    ) -> Result<Var> {
        let cat = g.concat_cols(&[narrow, wide])?;
        let hidden = g.affine(cat, bound.var(self.gate_w1), bound.var(self.gate_b1))?;
        let hidden = g.relu(hidden)?;
        let logit = g.affine(hidden, bound.var(self.gate_w2), bound.var(self.gate_b2))?;
        g.sigmoid(logit)
    }

    /// Gate coefficients for raw input `x`.
    pub fn gate(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let (narrow, wide) = self.conv_outputs(g, bound, x)?;
        self.gate_from_convs(g, bound, narrow, wide)
    }

    /// Convolution branch under the chosen fusion mode.
    pub fn convolution_branch(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        mode: FusionMode,
    ) -> Result<Var> {
        let (narrow, wide) = self.conv_outputs(g, bound, x)?;
        match mode {
            FusionMode::Gating => {
                let beta = self.gate_from_convs(g, bound, narrow, wide)?;
                fuse_gating(g, narrow, wide, beta)
            }
            FusionMode::Average => fuse_average(g, narrow, wide),
            FusionMode::Maximum => g.emax(narrow, wide),
            FusionMode::Baseline => {
                let weight = g.conv1d(
                    x,
                    bound.var(self.baseline_conv.w),
                    Some(bound.var(self.baseline_conv.b)),
                    1,
                )?;
                fuse_baseline(g, narrow, wide, weight)
            }
        }
    }

    /// Cross-attention from each instant (query) to the boundary frames of its
    /// receptive field (keys/values), indices clamped at the sequence edges.
    pub fn context_branch(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let r = self.cfg.boundary_radius() as isize;
        context_attention(
            g,
            x,
            r,
            &self.attn_q,
            &self.attn_k,
            &self.attn_v,
            &self.attn_out,
            bound,
        )
    }

    /// Instant branch: ReLU(FC(temporal mean)), a `[1, D]` row broadcast on
    /// summation.
    pub fn instant_branch(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let pooled = g.avg_pool_time(x)?;
        let fc = self.instant_fc.apply(g, bound, pooled)?;
        g.relu(fc)
    }

    /// Full layer: enabled branches plus the residual input.
    ///
    /// Disabling gating replaces the convolution fusion with the baseline
    /// formula; disabling context drops the attention branch.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        mode: FusionMode,
        use_context: bool,
        use_gating: bool,
    ) -> Result<Var> {
        let effective = if use_gating {
            mode
        } else {
            FusionMode::Baseline
        };
        let local = self.convolution_branch(g, bound, x, effective)?;
        let mut acc = g.add(local, x)?;
        if use_context {
            let ctx = self.context_branch(g, bound, x)?;
            acc = g.add(acc, ctx)?;
        }
        let instant = self.instant_branch(g, bound, x)?;
        g.add_row(acc, instant)
    }
}

/// Per-instant convex combination `beta * narrow + (1 - beta) * wide`.
pub fn fuse_gating(g: &mut Graph, narrow: Var, wide: Var, beta: Var) -> Result<Var> {
    let a = g.scale_rows(narrow, beta)?;
    let complement = g.one_minus(beta)?;
    let b = g.scale_rows(wide, complement)?;
    g.add(a, b)
}

/// Plain average `(narrow + wide) / 2`.
pub fn fuse_average(g: &mut Graph, narrow: Var, wide: Var) -> Result<Var> {
    let s = g.add(narrow, wide)?;
    g.mul_scalar(s, 0.5)
}

/// Baseline fusion `weight * (narrow + wide)`.
pub fn fuse_baseline(g: &mut Graph, narrow: Var, wide: Var, weight: Var) -> Result<Var> {
    let s = g.add(narrow, wide)?;
    g.mul(weight, s)
}

/// Scaled dot-product cross-attention between each instant and the two frames
/// at `t - r` and `t + r` (clamped), with an output projection.
#[allow(clippy::too_many_arguments)]
fn context_attention(
    g: &mut Graph,
    x: Var,
    r: isize,
    attn_q: &AffineParams,
    attn_k: &AffineParams,
    attn_v: &AffineParams,
    attn_out: &AffineParams,
    bound: &Bound,
) -> Result<Var> {
    let d = g.value(x).cols() as f64;
    let scale = 1.0 / d.sqrt();
    let left = g.shift_clamp(x, -r)?;
    let right = g.shift_clamp(x, r)?;
    let q = attn_q.apply(g, bound, x)?;
    let k_left = attn_k.apply(g, bound, left)?;
    let k_right = attn_k.apply(g, bound, right)?;
    let v_left = attn_v.apply(g, bound, left)?;
    let v_right = attn_v.apply(g, bound, right)?;
    let logit_left = g.rowwise_dot(q, k_left)?;
    let logit_left = g.mul_scalar(logit_left, scale)?;
    let logit_right = g.rowwise_dot(q, k_right)?;
    let logit_right = g.mul_scalar(logit_right, scale)?;
    let logits = g.concat_cols(&[logit_left, logit_right])?;
    let weights = g.softmax(logits, 1)?;
    let w_left = g.slice_cols(weights, 0, 1)?;
    let w_right = g.slice_cols(weights, 1, 2)?;
    let a = g.scale_rows(v_left, w_left)?;
    let b = g.scale_rows(v_right, w_right)?;
    let mixed = g.add(a, b)?;
    attn_out.apply(g, bound, mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::uniform;
    use rand_chacha::rand_core::SeedableRng;

    pub(crate) fn test_cfg(dim: usize) -> TagConfig {
        TagConfig {
            dim,
            conv_window: 3,
            scale_k: 3.0,
            gate_hidden: dim,
            baseline_window: 3,
        }
    }

    fn build_layer(dim: usize, seed: u64) -> (ParamStore, TagLayerParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = TagLayerParams::build(&mut store, "tag", test_cfg(dim), &mut rng).unwrap();
        (store, layer)
    }

    fn zero_layer(dim: usize) -> (ParamStore, TagLayerParams) {
        let (mut store, layer) = build_layer(dim, 0);
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        (store, layer)
    }

    fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
        *store.get_mut(id) = t;
    }

    #[test]
    fn wide_window_and_radius() {
        let cfg = test_cfg(4);
        assert_eq!(cfg.wide_window(), 9);
        assert_eq!(cfg.boundary_radius(), 4);
        let even = TagConfig {
            scale_k: 2.0,
            ..cfg
        };
        assert_eq!(even.wide_window(), 7); // 6 rounded up to odd
    }

    #[test]
    fn config_rejects_bad_geometry() {
        let cfg = TagConfig {
            conv_window: 4,
            ..test_cfg(4)
        };
        assert!(cfg.validate().is_err());
        let cfg = TagConfig {
            scale_k: 1.0,
            ..test_cfg(4)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn instant_branch_constant_input_identity_fc() {
        // FC = identity, nonnegative constant rows: branch returns the row.
        let (mut store, layer) = zero_layer(2);
        set(
            &mut store,
            layer.instant_fc.w,
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        );
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g, false);
        let x = g.constant(Tensor::from_rows(&vec![vec![0.5, 2.0]; 4]).unwrap());
        let out = layer.instant_branch(&mut g, &bound, x).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 2]);
        assert!((g.value(out).data()[0] - 0.5).abs() < 1e-15);
        assert!((g.value(out).data()[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn instant_branch_relu_kills_negative_fc() {
        let (mut store, layer) = zero_layer(2);
        set(
            &mut store,
            layer.instant_fc.b,
            Tensor::row_vec(&[-1.0, -2.0]),
        );
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g, false);
        let x = g.constant(uniform(
            &mut ChaCha8Rng::seed_from_u64(1),
            &[5, 2],
            0.0,
            1.0,
        ));
        let out = layer.instant_branch(&mut g, &bound, x).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0]);
    }

    #[test]
    fn instant_branch_hand_case() {
        // T=2, D=1, x=[[2],[4]], FC = multiply by 0.5: mean 3 -> 1.5
        let (mut store, layer) = zero_layer(1);
        set(&mut store, layer.instant_fc.w, Tensor::scalar(0.5));
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g, false);
        let x = g.constant(Tensor::col_vec(&[2.0, 4.0]));
        let out = layer.instant_branch(&mut g, &bound, x).unwrap();
        assert!((g.value(out).data()[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn gate_is_half_when_head_is_zero() {
        let (store, layer) = build_layer(3, 5);
        // gate_w2/gate_b2 start at zero by construction
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g, false);
        let x = g.constant(uniform(
            &mut ChaCha8Rng::seed_from_u64(2),
            &[7, 3],
            -1.0,
            1.0,
        ));
        let beta = layer.gate(&mut g, &bound, x).unwrap();
        assert_eq!(g.value(beta).shape(), &[7, 1]);
        for v in g.value(beta).data() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn gate_saturates_with_large_bias() {
        let (mut store, layer) = build_layer(3, 5);
        set(&mut store, layer.gate_b2, Tensor::scalar(40.0));
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g, false);
        let x = g.constant(uniform(
            &mut ChaCha8Rng::seed_from_u64(2),
            &[7, 3],
            -1.0,
            1.0,
        ));
        let beta = layer.gate(&mut g, &bound, x).unwrap();
        for v in g.value(beta).data() {
            assert!(*v > 1.0 - 1e-12);
        }
    }

    #[test]
    fn gate_hand_sigma_two() {
        // D=1, T=1, both convs output 1.0, MLP reduces to sum: beta = sigma(2)
        let (mut store, layer) = zero_layer(1);
        // identity center taps so conv(x) = x = 1
        set(
            &mut store,
            layer.conv_w.w,
            Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap(),
        );
        set(
            &mut store,
            layer.conv_kw.w,
            Tensor::new(
                vec![1, 1, 9],
                vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            )
            .unwrap(),
        );
        // gate MLP: hidden = relu(cat . [1;1]) = 2, logit = 1 * hidden
        set(
            &mut store,
            layer.gate_w1,
            Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
        );
        set(&mut store, layer.gate_w2, Tensor::scalar(1.0));
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g, false);
        let x = g.constant(Tensor::col_vec(&[1.0]));
        let beta = layer.gate(&mut g, &bound, x).unwrap();
        assert!((g.value(beta).data()[0] - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn gating_fusion_hand_case() {
        // conv_w out [1,2,3], conv_kw out [3,0,3], beta [1, 0, 0.25] -> [1, 0, 3]
        let mut g = Graph::new();
        let narrow = g.constant(Tensor::col_vec(&[1.0, 2.0, 3.0]));
        let wide = g.constant(Tensor::col_vec(&[3.0, 0.0, 3.0]));
        let beta = g.constant(Tensor::col_vec(&[1.0, 0.0, 0.25]));
        let out = fuse_gating(&mut g, narrow, wide, beta).unwrap();
        let got = g.value(out).data();
        assert!((got[0] - 1.0).abs() < 1e-15);
        assert!(got[1].abs() < 1e-15);
        assert!((got[2] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn gating_at_half_equals_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = uniform(&mut rng, &[6, 4], -2.0, 2.0);
        let b = uniform(&mut rng, &[6, 4], -2.0, 2.0);
        let mut g = Graph::new();
        let narrow = g.constant(a);
        let wide = g.constant(b);
        let beta = g.constant(Tensor::full(&[6, 1], 0.5));
        let gated = fuse_gating(&mut g, narrow, wide, beta).unwrap();
        let avg = fuse_average(&mut g, narrow, wide).unwrap();
        assert!(g.value(gated).max_abs_diff(g.value(avg)) <= 1e-12);
    }

    #[test]
    fn degenerate_fusion_when_conv_outputs_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = uniform(&mut rng, &[5, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let narrow = g.constant(a.clone());
        let wide = g.constant(a.clone());
        let beta = g.constant(uniform(&mut rng, &[5, 1], 0.0, 1.0));
        let gated = fuse_gating(&mut g, narrow, wide, beta).unwrap();
        let avg = fuse_average(&mut g, narrow, wide).unwrap();
        let max = g.emax(narrow, wide).unwrap();
        for out in [gated, avg, max] {
            assert!(g.value(out).max_abs_diff(&a) <= 1e-12);
        }
    }

    #[test]
    fn context_identical_boundaries_ignores_logits() {
        // both boundary frames identical: output = out(v(boundary)) regardless of weights
        let (mut store, layer) = build_layer(2, 19);
        set(
            &mut store,
            layer.attn_out.w,
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        );
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g, false);
        // constant sequence: every boundary frame equals every other frame
        let row = vec![0.7, -0.3];
        let x = g.constant(Tensor::from_rows(&vec![row.clone(); 9]).unwrap());
        let out = layer.context_branch(&mut g, &bound, x).unwrap();

        // independent expectation: attn_out(attn_v(row))
        let xrow = g.constant(Tensor::from_rows(&[row]).unwrap());
        let v = layer.attn_v.apply(&mut g, &bound, xrow).unwrap();
        let expect = layer.attn_out.apply(&mut g, &bound, v).unwrap();
        for t in 0..9 {
            for c in 0..2 {
                assert!((g.value(out).at(t, c) - g.value(expect).at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn context_zero_query_gives_mean_of_values() {
        let (mut store, layer) = build_layer(2, 23);
        // zero query projection -> all logits zero -> uniform weights
        set(&mut store, layer.attn_q.w, Tensor::zeros(&[2, 2]));
        set(
            &mut store,
            layer.attn_v.w,
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        );
        set(&mut store, layer.attn_v.b, Tensor::zeros(&[1, 2]));
        set(
            &mut store,
            layer.attn_out.w,
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        );
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g, false);
        let rows: Vec<Vec<f64>> = (0..9).map(|t| vec![t as f64, -(t as f64)]).collect();
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let out = layer.context_branch(&mut g, &bound, x).unwrap();
        let r = layer.cfg.boundary_radius();
        assert_eq!(r, 4);
        // at t=4: boundaries are rows 0 and 8 -> mean = row 4
        assert!((g.value(out).at(4, 0) - 4.0).abs() < 1e-12);
        assert!((g.value(out).at(4, 1) + 4.0).abs() < 1e-12);
    }

    #[test]
    fn context_hand_attention_weights() {
        // D=1, identity projections, boundaries 2 and 4 around center 1:
        // weights softmax([2,4]), output ~ 3.7616
        let (mut store, layer) = zero_layer(1);
        for p in [layer.attn_q, layer.attn_k, layer.attn_v, layer.attn_out] {
            set(&mut store, p.w, Tensor::scalar(1.0));
        }
        let r = layer.cfg.boundary_radius();
        let t_len = 2 * r + 1;
        let mut vals = vec![0.0; t_len];
        vals[0] = 2.0;
        vals[r] = 1.0;
        vals[t_len - 1] = 4.0;
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g, false);
        let x = g.constant(Tensor::col_vec(&vals));
        let out = layer.context_branch(&mut g, &bound, x).unwrap();
        assert!((g.value(out).at(r, 0) - 3.7616).abs() < 1e-4);
    }

    #[test]
    fn tag_forward_zero_params_is_identity() {
        for t in [1usize, 2, 7, 64] {
            let (store, layer) = zero_layer(3);
            let mut g = Graph::new();
            let bound = store.bind_all(&mut g, false);
            let x_t = uniform(&mut ChaCha8Rng::seed_from_u64(t as u64), &[t, 3], -2.0, 2.0);
            let x = g.constant(x_t.clone());
            for mode in [
                FusionMode::Gating,
                FusionMode::Average,
                FusionMode::Maximum,
                FusionMode::Baseline,
            ] {
                let out = layer.forward(&mut g, &bound, x, mode, true, true).unwrap();
                assert!(
                    g.value(out).max_abs_diff(&x_t) <= 1e-12,
                    "mode {mode:?} T={t}"
                );
            }
        }
    }

    #[test]
    fn tag_forward_zero_input_zero_biases_is_zero() {
        let (store, layer) = build_layer(3, 31);
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g, false);
        let x = g.constant(Tensor::zeros(&[6, 3]));
        let out = layer
            .forward(&mut g, &bound, x, FusionMode::Gating, true, true)
            .unwrap();
        for v in g.value(out).data() {
            assert!(v.abs() <= 1e-12);
        }
    }

    #[test]
    fn tag_forward_composes_branches() {
        let (store, layer) = build_layer(3, 37);
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g, false);
        let x_t = uniform(&mut ChaCha8Rng::seed_from_u64(41), &[10, 3], -1.0, 1.0);
        let x = g.constant(x_t.clone());
        let full = layer
            .forward(&mut g, &bound, x, FusionMode::Gating, true, true)
            .unwrap();

        let local = layer
            .convolution_branch(&mut g, &bound, x, FusionMode::Gating)
            .unwrap();
        let ctx = layer.context_branch(&mut g, &bound, x).unwrap();
        let inst = layer.instant_branch(&mut g, &bound, x).unwrap();
        let s = g.add(local, ctx).unwrap();
        let s = g.add(s, x).unwrap();
        let expect = g.add_row(s, inst).unwrap();
        assert!(g.value(full).max_abs_diff(g.value(expect)) <= 1e-12);
    }

    #[test]
    fn no_gating_flag_uses_baseline_fusion() {
        let (store, layer) = build_layer(3, 43);
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g, false);
        let x_t = uniform(&mut ChaCha8Rng::seed_from_u64(47), &[8, 3], -1.0, 1.0);
        let x = g.constant(x_t);
        let no_gate = layer
            .forward(&mut g, &bound, x, FusionMode::Gating, true, false)
            .unwrap();
        let baseline = layer
            .forward(&mut g, &bound, x, FusionMode::Baseline, true, true)
            .unwrap();
        assert!(g.value(no_gate).max_abs_diff(g.value(baseline)) <= 1e-12);
    }

    #[test]
    fn output_shape_matches_input_shape() {
        for (t, d) in [(1usize, 1usize), (2, 3), (17, 5)] {
            let (store, layer) = build_layer(d, 53);
            let mut g = Graph::new();
            let bound = store.bind_all(&mut g, false);
            let x = g.constant(uniform(
                &mut ChaCha8Rng::seed_from_u64(59),
                &[t, d],
                -1.0,
                1.0,
            ));
            let out = layer
                .forward(&mut g, &bound, x, FusionMode::Gating, true, true)
                .unwrap();
            assert_eq!(g.value(out).shape(), &[t, d]);
        }
    }
}
