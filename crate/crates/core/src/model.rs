//! Full detector: embedding + pyramid of temporal layers + shared head.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::head::{estimate_boundaries_graph, HeadConfig, HeadOutputs, HeadParams, Prediction};
use crate::params::{Bound, ParamStore};
use crate::pyramid::{PyramidConfig, PyramidParams};
use crate::tag::{FusionMode, TagConfig};

/// Everything needed to rebuild a model with identical geometry.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub in_dim: usize,
    pub dim: usize,
    pub levels: usize,
    pub embed_kernel: usize,
    pub conv_window: usize,
    pub scale_k: f64,
    pub gate_hidden: usize,
    pub fusion: String,
    pub use_context: bool,
    pub use_gating: bool,
    pub num_classes: usize,
    pub bins: usize,
    pub head_depth: usize,
    pub head_kernel: usize,
}

impl ModelConfig {
    pub fn fusion_mode(&self) -> Result<FusionMode> {
        FusionMode::parse(&self.fusion)
    }

    pub fn pyramid_config(&self) -> Result<PyramidConfig> {
        Ok(PyramidConfig {
            levels: self.levels,
            in_dim: self.in_dim,
            dim: self.dim,
            embed_kernel: self.embed_kernel,
            tag: TagConfig {
                dim: self.dim,
                conv_window: self.conv_window,
                scale_k: self.scale_k,
                gate_hidden: self.gate_hidden,
                baseline_window: self.conv_window,
            },
            fusion: self.fusion_mode()?,
            use_context: self.use_context,
            use_gating: self.use_gating,
        })
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            num_classes: self.num_classes,
            bins: self.bins,
            depth: self.head_depth,
            kernel: self.head_kernel,
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub pyramid: PyramidParams,
    pub head: HeadParams,
    pyramid_cfg: PyramidConfig,
}

/// Head outputs and boundary estimates for one pyramid level.
pub struct LevelForward {
    pub stride: usize,
    pub len: usize,
    pub head: HeadOutputs,
    /// `[T_l, 1]` start distances in level units.
    pub d_start: Var,
    /// `[T_l, 1]` end distances in level units.
    pub d_end: Var,
}

/// One full forward pass over a video.
pub struct ModelForward {
    pub bound: Bound,
    pub levels: Vec<LevelForward>,
}

impl Model {
    /// Build a freshly initialized model. Identical `(cfg, seed)` pairs yield
    /// bitwise-identical parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let pyramid_cfg = cfg.pyramid_config()?;
        cfg.head_config().validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pyramid = PyramidParams::build(&mut store, &pyramid_cfg, &mut rng)?;
        let head = HeadParams::build(&mut store, cfg.dim, cfg.head_config(), &mut rng)?;
        Ok(Model {
            cfg,
            store,
            pyramid,
            head,
            pyramid_cfg,
        })
    }

    pub fn pyramid_cfg(&self) -> &PyramidConfig {
        &self.pyramid_cfg
    }

    /// Refresh the cached pyramid config after mutating `cfg` (ablations swap
    /// fusion mode and branch flags without rebuilding parameters).
    pub fn set_variant(
        &mut self,
        fusion: FusionMode,
        use_context: bool,
        use_gating: bool,
    ) -> Result<()> {
        self.cfg.fusion = fusion.name().to_string();
        self.cfg.use_context = use_context;
        self.cfg.use_gating = use_gating;
        self.pyramid_cfg = self.cfg.pyramid_config()?;
        Ok(())
    }

    /// Run the detector over one feature sequence.
    ///
    /// `trainable` binds parameters as differentiable leaves; inference binds
    /// them as constants.
    pub fn forward(
        &self,
        g: &mut Graph,
        features: &Tensor,
        trainable: bool,
    ) -> Result<ModelForward> {
        if features.shape().len() != 2 || features.cols() != self.cfg.in_dim {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "features shape {:?} vs expected [T, {}]",
                    features.shape(),
                    self.cfg.in_dim
                ),
            ));
        }
        let bound = self.store.bind_all(g, trainable);
        let x = g.constant(features.clone());
        let level_feats = self.pyramid.forward(g, &bound, &self.pyramid_cfg, x)?;
        let mut levels = Vec::with_capacity(level_feats.len());
        for (l, feat) in level_feats.into_iter().enumerate() {
            let head = self.head.forward(g, &bound, feat)?;
            let (d_start, d_end) = estimate_boundaries_graph(g, &head, self.cfg.bins)?;
            levels.push(LevelForward {
                stride: PyramidConfig::stride(l),
                len: g.value(feat).rows(),
                head,
                d_start,
                d_end,
            });
        }
        Ok(ModelForward { bound, levels })
    }

    /// Inference helper: per-instant predictions with sigmoid class scores.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, features, false)?;
        let mut preds = Vec::new();
        for (l, level) in fwd.levels.iter().enumerate() {
            let probs = g.sigmoid(level.head.cls)?;
            let probs = g.value(probs);
            let ds = g.value(level.d_start).data();
            let de = g.value(level.d_end).data();
            for t in 0..level.len {
                let scores = (0..self.cfg.num_classes).map(|c| probs.at(t, c)).collect();
                preds.push(Prediction {
                    level: l,
                    instant: t,
                    scores,
                    d_start: ds[t],
                    d_end: de[t],
                });
            }
        }
        Ok(preds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::uniform;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            in_dim: 4,
            dim: 6,
            levels: 3,
            embed_kernel: 3,
            conv_window: 3,
            scale_k: 3.0,
            gate_hidden: 6,
            fusion: "gating".into(),
            use_context: true,
            use_gating: true,
            num_classes: 2,
            bins: 4,
            head_depth: 1,
            head_kernel: 3,
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(tiny_config(), 5).unwrap();
        let b = Model::new(tiny_config(), 5).unwrap();
        assert_eq!(a.store.content_hash(), b.store.content_hash());
        let c = Model::new(tiny_config(), 6).unwrap();
        assert_ne!(a.store.content_hash(), c.store.content_hash());
    }

    #[test]
    fn variants_share_initialization() {
        let mut a = Model::new(tiny_config(), 5).unwrap();
        a.set_variant(FusionMode::Baseline, false, false).unwrap();
        let b = Model::new(tiny_config(), 5).unwrap();
        assert_eq!(a.store.content_hash(), b.store.content_hash());
    }

    #[test]
    fn forward_produces_all_levels() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = uniform(&mut rng, &[16, 4], -1.0, 1.0);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &x, false).unwrap();
        assert_eq!(fwd.levels.len(), 3);
        assert_eq!(fwd.levels[0].len, 16);
        assert_eq!(fwd.levels[1].len, 8);
        assert_eq!(fwd.levels[2].len, 4);
        assert_eq!(fwd.levels[2].stride, 4);
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let mut g = Graph::new();
        let x = Tensor::zeros(&[8, 5]);
        assert!(model.forward(&mut g, &x, false).is_err());
    }

    #[test]
    fn predict_scores_in_unit_interval() {
        let model = Model::new(tiny_config(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = uniform(&mut rng, &[12, 4], -1.0, 1.0);
        let preds = model.predict(&x).unwrap();
        assert_eq!(preds.len(), 12 + 6 + 3);
        for p in preds {
            for s in &p.scores {
                assert!(*s > 0.0 && *s < 1.0);
            }
            assert!(p.d_start >= 0.0 && p.d_start <= 3.0);
            assert!(p.d_end >= 0.0 && p.d_end <= 3.0);
        }
    }
}
