use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Flat registry of named learnable tensors. Creation order is deterministic
/// and doubles as the serialization and optimizer-state order.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Overwrite a parameter's values in place (checkpoint restore).
    pub fn restore(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .id_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name} in checkpoint")))?;
        if self.get(id).shape() != tensor.shape() {
            return Err(Error::Config(format!(
                "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                tensor.shape(),
                self.get(id).shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    /// Bind every parameter into `graph`. Trainable binds as differentiable
    /// leaves, otherwise as constants (inference).
    pub fn bind_all(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.leaf(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// FNV-1a hash over names, shapes and value bits. Used by determinism checks.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, t) in self.iter() {
            for b in name.as_bytes() {
                eat(*b);
            }
            for d in t.shape() {
                for b in (*d as u64).to_le_bytes() {
                    eat(b);
                }
            }
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

/// Per-graph binding of every parameter, aligned with store order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wrap an explicit var list (gradient checking binds leaves itself).
    pub fn from_vars(vars: Vec<Var>) -> Bound {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Pull this graph's accumulated gradient for `id`, if any.
    pub fn grad<'g>(&self, graph: &'g Graph, id: ParamId) -> Option<&'g Tensor> {
        graph.grad(self.var(id))
    }
}

/// Gaussian init with the given standard deviation.
pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("valid normal");
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// He-style init for a conv weight `[out, in, k]`.
pub fn conv_init(rng: &mut ChaCha8Rng, d_out: usize, d_in: usize, k: usize) -> Tensor {
    let std = (2.0 / (d_in * k) as f64).sqrt();
    normal_init(rng, &[d_out, d_in, k], std)
}

/// Xavier-style init for an affine weight `[in, out]`.
pub fn affine_init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Tensor {
    let std = (1.0 / d_in as f64).sqrt();
    normal_init(rng, &[d_in, d_out], std)
}

/// Uniform in [lo, hi), used by tests to build arbitrary tensors.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("uniform shape")
}
