//! Finite-difference gradient checking.
//!
//! The checker re-runs a forward-only closure under central perturbation of
//! each input element; it never consults the analytic backward rules it is
//! used to validate. Test-support code, kept in the library so integration
//! and acceptance targets can share it.

use crate::autodiff::{Graph, Tensor, Var};

/// Central-difference step used throughout the test suite.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative tolerance used throughout the test suite.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Worst relative error over all elements of all checked inputs.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub elements: usize,
}

/// Relative error with an absolute floor so near-zero gradients compare sanely.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Check the analytic gradients of `build` against central finite differences.
///
/// `build` constructs a fresh graph from the given leaf inputs and returns a
/// scalar loss var. Returns the worst relative error across all elements.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], step: f64) -> CheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    // analytic pass
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let loss = build(&mut graph, &vars);
    graph
        .backward(loss)
        .expect("backward failed in gradient check");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            graph
                .grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    // numeric pass: forward-only evaluations
    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &vs);
        g.value(l).data()[0]
    };

    let mut max_rel = 0.0f64;
    let mut elements = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic[i].data()[e];
            max_rel = max_rel.max(rel_err(a, numeric));
            elements += 1;
        }
    }
    CheckReport {
        max_rel_err: max_rel,
        elements,
    }
}

/// Assert helper over [`check_gradients`] with the standard step/tolerance.
pub fn assert_gradients<F>(build: F, inputs: &[Tensor], what: &str)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let report = check_gradients(build, inputs, DEFAULT_STEP);
    assert!(
        report.max_rel_err <= DEFAULT_TOL,
        "{what}: finite-difference mismatch, max rel err {} over {} elements",
        report.max_rel_err,
        report.elements
    );
}

/// Gradient check a whole model's composite loss by perturbing the parameter
/// store directly. The loss config must make the quality weight constant
/// (`quality_floor = 1.0`), otherwise the detached weight shows up in the
/// numeric derivative but not the analytic one.
pub fn check_model_loss_gradients(
    model: &mut crate::model::Model,
    features: &Tensor,
    targets: &crate::assign::AssignedTargets,
    loss_cfg: &crate::loss::LossConfig,
    step: f64,
) -> CheckReport {
    use crate::loss::composite_loss;
    assert_eq!(
        loss_cfg.quality_floor, 1.0,
        "model-loss FD check needs the quality weight pinned"
    );
    let eval = |model: &crate::model::Model| -> f64 {
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, features, false).expect("forward");
        composite_loss(&mut g, &fwd, targets, model.cfg.num_classes, loss_cfg)
            .expect("loss")
            .total
    };
    // analytic
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, features, true).expect("forward");
    let out = composite_loss(&mut g, &fwd, targets, model.cfg.num_classes, loss_cfg).expect("loss");
    g.backward(out.loss).expect("backward");
    let ids: Vec<_> = model.store.ids().collect();
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|id| {
            fwd.bound
                .grad(&g, *id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(model.store.get(*id).shape()))
        })
        .collect();
    drop(g);

    let mut max_rel = 0.0f64;
    let mut elements = 0usize;
    for (k, id) in ids.iter().enumerate() {
        for e in 0..model.store.get(*id).numel() {
            let orig = model.store.get(*id).data()[e];
            model.store.get_mut(*id).data_mut()[e] = orig + step;
            let plus = eval(model);
            model.store.get_mut(*id).data_mut()[e] = orig - step;
            let minus = eval(model);
            model.store.get_mut(*id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            max_rel = max_rel.max(rel_err(analytic[k].data()[e], numeric));
            elements += 1;
        }
    }
    CheckReport {
        max_rel_err: max_rel,
        elements,
    }
}

/// Named finite-difference checks over every differentiable operation, from
/// single primitives up through the pyramid, head and losses. Both the
/// integration tests and the acceptance suite run these.
pub mod suite {
    use super::*;
    use crate::assign::{assign_targets, AssignConfig};
    use crate::data::ActionSegment;
    use crate::head::{estimate_boundaries_graph, HeadConfig, HeadParams};
    use crate::loss::{IouKind, LossConfig};
    use crate::model::{Model, ModelConfig};
    use crate::params::{uniform, Bound, ParamStore};
    use crate::pyramid::{PyramidConfig, PyramidParams};
    use crate::tag::{FusionMode, TagConfig, TagLayerParams};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub struct SuiteResult {
        pub name: &'static str,
        pub instances: usize,
        pub max_rel_err: f64,
        pub elements: usize,
    }

    fn tag_cfg(dim: usize) -> TagConfig {
        TagConfig {
            dim,
            conv_window: 3,
            scale_k: 3.0,
            gate_hidden: dim,
            baseline_window: 3,
        }
    }

    /// Bind a param store's tensors plus the input as check leaves and run a
    /// layer-level builder.
    fn layer_check<F>(seed: u64, dim: usize, t_len: usize, build: F) -> CheckReport
    where
        F: Fn(&mut Graph, &TagLayerParams, &Bound, Var, &Tensor) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = TagLayerParams::build(&mut store, "t", tag_cfg(dim), &mut rng).unwrap();
        // random re-init so zero-initialized heads also get checked off-zero
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = uniform(&mut rng, &shape, -0.7, 0.7);
        }
        let mut inputs: Vec<Tensor> = store.ids().map(|id| store.get(id).clone()).collect();
        inputs.push(uniform(&mut rng, &[t_len, dim], -1.0, 1.0));
        let probe = uniform(&mut rng, &[t_len, dim], -1.0, 1.0);
        let n_params = inputs.len() - 1;
        check_gradients(
            |g, vars| {
                let bound = Bound::from_vars(vars[..n_params].to_vec());
                build(g, &layer, &bound, vars[n_params], &probe)
            },
            &inputs,
            DEFAULT_STEP,
        )
    }

    pub fn conv1d(instances: usize) -> SuiteResult {
        let mut worst = CheckReport {
            max_rel_err: 0.0,
            elements: 0,
        };
        for seed in 0..instances as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = uniform(&mut rng, &[6, 3], -1.0, 1.0);
            let w = uniform(&mut rng, &[2, 3, 5], -0.7, 0.7);
            let b = uniform(&mut rng, &[1, 2], -0.5, 0.5);
            let probe = uniform(&mut rng, &[6, 2], -1.0, 1.0);
            let report = check_gradients(
                |g, v| {
                    let y = g.conv1d(v[0], v[1], Some(v[2]), 1).unwrap();
                    let p = g.constant(probe.clone());
                    let m = g.mul(y, p).unwrap();
                    g.sum_all(m).unwrap()
                },
                &[x, w, b],
                DEFAULT_STEP,
            );
            worst = merge(worst, report);
        }
        named("conv1d", instances, worst)
    }

    pub fn gate(instances: usize) -> SuiteResult {
        let mut worst = CheckReport {
            max_rel_err: 0.0,
            elements: 0,
        };
        for seed in 0..instances as u64 {
            let report = layer_check(2000 + seed, 3, 6, |g, layer, bound, x, probe| {
                let beta = layer.gate(g, bound, x).unwrap();
                let p = g.constant(Tensor::col_vec(&probe.data()[..g.value(beta).rows()]));
                let m = g.mul(beta, p).unwrap();
                g.sum_all(m).unwrap()
            });
            worst = merge(worst, report);
        }
        named("gate", instances, worst)
    }

    pub fn context_attention(instances: usize) -> SuiteResult {
        let mut worst = CheckReport {
            max_rel_err: 0.0,
            elements: 0,
        };
        for seed in 0..instances as u64 {
            let report = layer_check(3000 + seed, 3, 7, |g, layer, bound, x, probe| {
                let ctx = layer.context_branch(g, bound, x).unwrap();
                let p = g.constant(probe.clone());
                let m = g.mul(ctx, p).unwrap();
                g.sum_all(m).unwrap()
            });
            worst = merge(worst, report);
        }
        named("context_attention", instances, worst)
    }

    pub fn instant_branch(instances: usize) -> SuiteResult {
        let mut worst = CheckReport {
            max_rel_err: 0.0,
            elements: 0,
        };
        for seed in 0..instances as u64 {
            let report = layer_check(4000 + seed, 3, 5, |g, layer, bound, x, probe| {
                let inst = layer.instant_branch(g, bound, x).unwrap();
                let p = g.constant(Tensor::row_vec(&probe.data()[..3]));
                let m = g.mul(inst, p).unwrap();
                g.sum_all(m).unwrap()
            });
            worst = merge(worst, report);
        }
        named("instant_branch", instances, worst)
    }

    pub fn tag_layer_full(instances: usize) -> SuiteResult {
        let mut worst = CheckReport {
            max_rel_err: 0.0,
            elements: 0,
        };
        for seed in 0..instances as u64 {
            let mode = match seed % 4 {
                0 => FusionMode::Gating,
                1 => FusionMode::Average,
                2 => FusionMode::Maximum,
                _ => FusionMode::Baseline,
            };
            let report = layer_check(5000 + seed, 3, 6, move |g, layer, bound, x, probe| {
                let y = layer.forward(g, bound, x, mode, true, true).unwrap();
                let p = g.constant(probe.clone());
                let m = g.mul(y, p).unwrap();
                g.sum_all(m).unwrap()
            });
            worst = merge(worst, report);
        }
        named("tag_layer", instances, worst)
    }

    pub fn pyramid(instances: usize) -> SuiteResult {
        let mut worst = CheckReport {
            max_rel_err: 0.0,
            elements: 0,
        };
        for seed in 0..instances as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
            let cfg = PyramidConfig {
                levels: 2,
                in_dim: 3,
                dim: 3,
                embed_kernel: 3,
                tag: tag_cfg(3),
                fusion: FusionMode::Gating,
                use_context: true,
                use_gating: true,
            };
            let mut store = ParamStore::new();
            let params = PyramidParams::build(&mut store, &cfg, &mut rng).unwrap();
            for id in store.ids().collect::<Vec<_>>() {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = uniform(&mut rng, &shape, -0.6, 0.6);
            }
            let mut inputs: Vec<Tensor> = store.ids().map(|id| store.get(id).clone()).collect();
            inputs.push(uniform(&mut rng, &[7, 3], -1.0, 1.0));
            let n_params = inputs.len() - 1;
            // probe a scalar of every pyramid level
            let probes = [
                uniform(&mut rng, &[7, 3], -1.0, 1.0),
                uniform(&mut rng, &[4, 3], -1.0, 1.0),
            ];
            let report = check_gradients(
                |g, vars| {
                    let bound = Bound::from_vars(vars[..n_params].to_vec());
                    let levels = params.forward(g, &bound, &cfg, vars[n_params]).unwrap();
                    let mut total = None;
                    for (level, probe) in levels.iter().zip(&probes) {
                        let p = g.constant(probe.clone());
                        let m = g.mul(*level, p).unwrap();
                        let s = g.sum_all(m).unwrap();
                        total = Some(match total {
                            None => s,
                            Some(acc) => g.add(acc, s).unwrap(),
                        });
                    }
                    total.unwrap()
                },
                &inputs,
                DEFAULT_STEP,
            );
            worst = merge(worst, report);
        }
        named("pyramid", instances, worst)
    }

    pub fn head(instances: usize) -> SuiteResult {
        let mut worst = CheckReport {
            max_rel_err: 0.0,
            elements: 0,
        };
        for seed in 0..instances as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
            let cfg = HeadConfig {
                num_classes: 2,
                bins: 4,
                depth: 1,
                kernel: 3,
            };
            let mut store = ParamStore::new();
            let head = HeadParams::build(&mut store, 3, cfg, &mut rng).unwrap();
            for id in store.ids().collect::<Vec<_>>() {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = uniform(&mut rng, &shape, -0.6, 0.6);
            }
            let mut inputs: Vec<Tensor> = store.ids().map(|id| store.get(id).clone()).collect();
            inputs.push(uniform(&mut rng, &[5, 3], -1.0, 1.0));
            let n_params = inputs.len() - 1;
            let probe_cls = uniform(&mut rng, &[5, 2], -1.0, 1.0);
            let probe_d = uniform(&mut rng, &[5, 1], -1.0, 1.0);
            let report = check_gradients(
                |g, vars| {
                    let bound = Bound::from_vars(vars[..n_params].to_vec());
                    let out = head.forward(g, &bound, vars[n_params]).unwrap();
                    let (ds, de) = estimate_boundaries_graph(g, &out, 4).unwrap();
                    let pc = g.constant(probe_cls.clone());
                    let pd = g.constant(probe_d.clone());
                    let a = g.mul(out.cls, pc).unwrap();
                    let b = g.mul(ds, pd).unwrap();
                    let c = g.mul(de, pd).unwrap();
                    let sa = g.sum_all(a).unwrap();
                    let sb = g.sum_all(b).unwrap();
                    let sc = g.sum_all(c).unwrap();
                    let s = g.add(sa, sb).unwrap();
                    g.add(s, sc).unwrap()
                },
                &inputs,
                DEFAULT_STEP,
            );
            worst = merge(worst, report);
        }
        named("head", instances, worst)
    }

    fn loss_check(
        instances: usize,
        name: &'static str,
        cls_weight: f64,
        reg_weight: f64,
    ) -> SuiteResult {
        let mut worst = CheckReport {
            max_rel_err: 0.0,
            elements: 0,
        };
        for seed in 0..instances as u64 {
            let cfg = ModelConfig {
                in_dim: 3,
                dim: 4,
                levels: 2,
                embed_kernel: 3,
                conv_window: 3,
                scale_k: 3.0,
                gate_hidden: 4,
                fusion: "gating".into(),
                use_context: true,
                use_gating: true,
                num_classes: 2,
                bins: 4,
                head_depth: 1,
                head_kernel: 3,
            };
            let mut model = Model::new(cfg, 8000 + seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8500 + seed);
            let x = uniform(&mut rng, &[12, 3], -1.0, 1.0);
            let segments = [
                ActionSegment {
                    start: 2.0,
                    end: 8.0,
                    class_id: 1,
                },
                ActionSegment {
                    start: 9.0,
                    end: 12.0,
                    class_id: 2,
                },
            ];
            let lengths = model.pyramid_cfg().level_lengths(12);
            let targets = assign_targets(
                &segments,
                &lengths,
                1.0,
                &AssignConfig {
                    center_radius: 1.5,
                    bins: 4,
                },
            )
            .unwrap();
            let loss_cfg = LossConfig {
                focal_alpha: 0.25,
                focal_gamma: 2.0,
                iou_kind: if seed % 2 == 0 {
                    IouKind::Plain
                } else {
                    IouKind::Generalized
                },
                cls_weight,
                reg_weight,
                quality_floor: 1.0,
            };
            let report =
                check_model_loss_gradients(&mut model, &x, &targets, &loss_cfg, DEFAULT_STEP);
            worst = merge(worst, report);
        }
        named(name, instances, worst)
    }

    pub fn focal_loss(instances: usize) -> SuiteResult {
        loss_check(instances, "focal_loss", 1.0, 0.0)
    }

    pub fn iou_loss(instances: usize) -> SuiteResult {
        loss_check(instances, "iou_loss", 0.0, 1.0)
    }

    fn merge(a: CheckReport, b: CheckReport) -> CheckReport {
        CheckReport {
            max_rel_err: a.max_rel_err.max(b.max_rel_err),
            elements: a.elements + b.elements,
        }
    }

    fn named(name: &'static str, instances: usize, r: CheckReport) -> SuiteResult {
        SuiteResult {
            name,
            instances,
            max_rel_err: r.max_rel_err,
            elements: r.elements,
        }
    }

    /// Every named check at `instances` random instances each.
    pub fn run_all(instances: usize) -> Vec<SuiteResult> {
        vec![
            conv1d(instances),
            gate(instances),
            context_attention(instances),
            instant_branch(instances),
            tag_layer_full(instances),
            pyramid(instances),
            head(instances),
            focal_loss(instances),
            iou_loss(instances),
        ]
    }
}
