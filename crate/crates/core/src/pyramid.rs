//! Multi-resolution feature pyramid: input embedding followed by L levels,
//! each applying a temporal layer and stride-2 max-pool downsampling.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{conv_init, Bound, ParamId, ParamStore};
use crate::tag::{ConvParams, FusionMode, TagConfig, TagLayerParams};

#[derive(Clone, Debug)]
pub struct PyramidConfig {
    /// Number of pyramid levels (>= 1).
    pub levels: usize,
    /// Input feature dimension.
    pub in_dim: usize,
    /// Model channel width D.
    pub dim: usize,
    /// Embedding convolution kernel length (odd).
    pub embed_kernel: usize,
    /// Layer geometry forwarded to every level.
    pub tag: TagConfig,
    /// Convolution fusion strategy.
    pub fusion: FusionMode,
    pub use_context: bool,
    pub use_gating: bool,
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        if self.embed_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "embed kernel {} must be odd",
                self.embed_kernel
            )));
        }
        if self.in_dim == 0 || self.dim == 0 {
            return Err(Error::Config("feature dims must be >= 1".into()));
        }
        self.tag.validate()
    }

    /// Temporal stride of level `l` (0-based) in input-instant units.
    pub fn stride(level: usize) -> usize {
        1 << level
    }

    /// Temporal lengths of all levels for an input of length `t`.
    pub fn level_lengths(&self, t: usize) -> Vec<usize> {
        let mut lens = Vec::with_capacity(self.levels);
        let mut cur = t;
        for l in 0..self.levels {
            if l > 0 {
                cur = cur.div_ceil(2);
            }
            lens.push(cur);
        }
        lens
    }
}

/// Input embedding: conv + ReLU + layer normalization, length preserving.
#[derive(Clone, Debug)]
pub struct EmbedParams {
    pub conv: ConvParams,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl EmbedParams {
    pub fn build(store: &mut ParamStore, cfg: &PyramidConfig, rng: &mut ChaCha8Rng) -> Self {
        EmbedParams {
            conv: ConvParams {
                w: store.add(
                    "embed.conv.w",
                    conv_init(rng, cfg.dim, cfg.in_dim, cfg.embed_kernel),
                ),
                b: store.add("embed.conv.b", Tensor::zeros(&[1, cfg.dim])),
            },
            ln_gamma: store.add("embed.ln.gamma", Tensor::full(&[1, cfg.dim], 1.0)),
            ln_beta: store.add("embed.ln.beta", Tensor::zeros(&[1, cfg.dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let y = g.conv1d(x, bound.var(self.conv.w), Some(bound.var(self.conv.b)), 1)?;
        let y = g.relu(y)?;
        g.layer_norm(y, bound.var(self.ln_gamma), bound.var(self.ln_beta), LN_EPS)
    }
}

pub const LN_EPS: f64 = 1e-5;

/// All pyramid parameters: the embedding plus one layer per level.
#[derive(Clone, Debug)]
pub struct PyramidParams {
    pub embed: EmbedParams,
    pub levels: Vec<TagLayerParams>,
}

impl PyramidParams {
    pub fn build(
        store: &mut ParamStore,
        cfg: &PyramidConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let embed = EmbedParams::build(store, cfg, rng);
        let mut levels = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            levels.push(TagLayerParams::build(
                store,
                &format!("level{l}"),
                cfg.tag,
                rng,
            )?);
        }
        Ok(PyramidParams { embed, levels })
    }

    /// Level features: level 0 is `tag(embed(x))`; level l+1 is
    /// `tag(maxpool2(level l))`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        cfg: &PyramidConfig,
        x: Var,
    ) -> Result<Vec<Var>> {
        let mut outputs = Vec::with_capacity(self.levels.len());
        let mut cur = self.embed.forward(g, bound, x)?;
        for (l, layer) in self.levels.iter().enumerate() {
            if l > 0 {
                cur = g.max_pool_time2(cur)?;
            }
            cur = layer.forward(g, bound, cur, cfg.fusion, cfg.use_context, cfg.use_gating)?;
            outputs.push(cur);
        }
        Ok(outputs)
    }
}
