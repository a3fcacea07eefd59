//! Finite-difference gradient-check suite over every tape operator and the
//! full training objective.
//!
//! Each check draws seeded points with entries in `[−1, 1]`. The network
//! checks only accept points where the objective is smooth at the scale of
//! the stencil: the ReLU pattern is the same at every probe, and every
//! feature map that distillation normalises has norm at least
//! [`MIN_MAP_NORM`]. Nearly dead maps make `m/‖m‖` so curved that the
//! central difference itself is off by more than the tolerance.

use rand::Rng as _;

use crate::autodiff::{grad_check, NodeId, Tape, Tensor};
use crate::distillation::{distill_loss_stage, temperature, total_loss, DistillConfig};
use crate::error::{contract_err, Result};
use crate::network::{classification_loss, Model, NetworkConfig, StageSpec};
use crate::rng::{rng_for, stream, Rng};
use crate::significance::{normalize, ClassMatrix, SignificanceTable};

pub const EPS: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const TRIALS: usize = 10;
pub const MIN_MAP_NORM: f64 = 0.5;
const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub trials: usize,
    /// Draws discarded as kinked or ill-conditioned.
    pub rejected: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type LossFn = Box<dyn Fn(&mut Tape, NodeId) -> Result<NodeId>>;
type PatternFn = Box<dyn Fn(&Tensor) -> Result<Probe>>;

/// ReLU activity and the smallest normalised feature map at one point.
struct Probe {
    active: Vec<bool>,
    min_norm: f64,
}

struct Trial {
    x: Tensor,
    f: LossFn,
    /// Smoothness probe for network checks.
    pattern: Option<PatternFn>,
}

struct Check {
    name: &'static str,
    build: fn(&mut Rng, bool) -> Result<Trial>,
}

fn uniform(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Uniform in `[−1, 1]` with `|x| ≥ 1e-2`.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 1e-2 {
            *v = if *v < 0.0 {
                -1e-2 - v.abs()
            } else {
                1e-2 + v.abs()
            };
        }
    }
    t
}

/// `Σ w ⊙ out` with fixed random `w`, so every output element matters.
fn project(tape: &mut Tape, out: NodeId, w: &Tensor) -> Result<NodeId> {
    let w = tape.constant(w.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn plain(x: Tensor, f: impl Fn(&mut Tape, NodeId) -> Result<NodeId> + 'static) -> Trial {
    Trial {
        x,
        f: Box::new(f),
        pattern: None,
    }
}

fn tanh_derivative(x: f64) -> f64 {
    1.0 - x.tanh().powi(2)
}

fn corrupted_tanh_derivative(x: f64) -> f64 {
    1.0 - x.tanh()
}

fn registry() -> Vec<Check> {
    vec![
        Check {
            name: "matmul.lhs",
            build: |rng, _| {
                let b = uniform(rng, &[4, 2]);
                let w = uniform(rng, &[3, 2]);
                Ok(plain(uniform(rng, &[3, 4]), move |t, x| {
                    let b = t.constant(b.clone());
                    let y = t.matmul(x, b)?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "matmul.rhs",
            build: |rng, _| {
                let a = uniform(rng, &[3, 4]);
                let w = uniform(rng, &[3, 2]);
                Ok(plain(uniform(rng, &[4, 2]), move |t, x| {
                    let a = t.constant(a.clone());
                    let y = t.matmul(a, x)?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "transpose",
            build: |rng, _| {
                let w = uniform(rng, &[4, 3]);
                Ok(plain(uniform(rng, &[3, 4]), move |t, x| {
                    let y = t.transpose(x)?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "conv2d.input",
            build: |rng, _| {
                let k = uniform(rng, &[3, 2, 3, 3]);
                let w = uniform(rng, &[3, 5, 5]);
                Ok(plain(uniform(rng, &[2, 5, 5]), move |t, x| {
                    let k = t.constant(k.clone());
                    let y = t.conv2d(x, k, 1, 1)?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "conv2d.kernel",
            build: |rng, _| {
                let input = uniform(rng, &[2, 2, 5, 5]);
                let w = uniform(rng, &[2, 3, 3, 3]);
                Ok(plain(uniform(rng, &[3, 2, 3, 3]), move |t, k| {
                    let x = t.constant(input.clone());
                    let y = t.conv2d(x, k, 2, 1)?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "bias_add.input",
            build: |rng, _| {
                let b = uniform(rng, &[3]);
                let w = uniform(rng, &[2, 3, 2, 2]);
                Ok(plain(uniform(rng, &[2, 3, 2, 2]), move |t, x| {
                    let b = t.constant(b.clone());
                    let y = t.bias_add(x, b)?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "bias_add.bias",
            build: |rng, _| {
                let input = uniform(rng, &[4, 3]);
                let w = uniform(rng, &[4, 3]);
                Ok(plain(uniform(rng, &[3]), move |t, b| {
                    let x = t.constant(input.clone());
                    let y = t.bias_add(x, b)?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "relu",
            build: |rng, _| {
                let w = uniform(rng, &[12]);
                Ok(plain(away_from_zero(rng, &[12]), move |t, x| {
                    let y = t.relu(x);
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "grid_mean",
            build: |rng, _| {
                let w = uniform(rng, &[3]);
                Ok(plain(uniform(rng, &[3, 4, 4]), move |t, x| {
                    let y = t.grid_mean(x)?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "grid_sum",
            build: |rng, _| {
                let w = uniform(rng, &[2, 3]);
                Ok(plain(uniform(rng, &[2, 3, 3, 3]), move |t, x| {
                    let y = t.grid_sum(x)?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "reshape",
            build: |rng, _| {
                let w = uniform(rng, &[3, 4]);
                Ok(plain(uniform(rng, &[2, 6]), move |t, x| {
                    let y = t.reshape(x, &[3, 4])?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "add",
            build: |rng, _| {
                let c = uniform(rng, &[5]);
                let w = uniform(rng, &[5]);
                Ok(plain(uniform(rng, &[5]), move |t, x| {
                    let c = t.constant(c.clone());
                    let y = t.add(x, c)?;
                    let y = t.mul(y, x)?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "sub",
            build: |rng, _| {
                let c = uniform(rng, &[5]);
                let w = uniform(rng, &[5]);
                Ok(plain(uniform(rng, &[5]), move |t, x| {
                    let c = t.constant(c.clone());
                    let y = t.sub(c, x)?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "mul",
            build: |rng, _| {
                let c = uniform(rng, &[2, 3]);
                let w = uniform(rng, &[2, 3]);
                Ok(plain(uniform(rng, &[2, 3]), move |t, x| {
                    let c = t.constant(c.clone());
                    let y = t.mul(c, x)?;
                    let y = t.mul(y, x)?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "square",
            build: |rng, _| {
                let w = uniform(rng, &[6]);
                Ok(plain(uniform(rng, &[6]), move |t, x| {
                    let y = t.square(x);
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "scale",
            build: |rng, _| {
                let w = uniform(rng, &[6]);
                let factor = rng.random_range(-3.0..3.0);
                Ok(plain(uniform(rng, &[6]), move |t, x| {
                    let y = t.scale(x, factor);
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "mul_scalar.tensor",
            build: |rng, _| {
                let s = uniform(rng, &[1]);
                let w = uniform(rng, &[2, 2]);
                Ok(plain(uniform(rng, &[2, 2]), move |t, x| {
                    let s = t.constant(s.clone());
                    let y = t.mul_scalar(x, s)?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "mul_scalar.scalar",
            build: |rng, _| {
                let a = uniform(rng, &[2, 2]);
                let w = uniform(rng, &[2, 2]);
                Ok(plain(uniform(rng, &[1]), move |t, s| {
                    let a = t.constant(a.clone());
                    let y = t.mul_scalar(a, s)?;
                    let y = t.mul_scalar(y, s)?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "sum",
            build: |rng, _| {
                Ok(plain(uniform(rng, &[2, 3]), move |t, x| {
                    let sq = t.square(x);
                    Ok(t.sum(sq))
                }))
            },
        },
        Check {
            name: "mean",
            build: |rng, _| {
                Ok(plain(uniform(rng, &[2, 3]), move |t, x| {
                    let sq = t.square(x);
                    Ok(t.mean(sq))
                }))
            },
        },
        Check {
            name: "normalize_groups",
            build: |rng, _| {
                let w = uniform(rng, &[3, 4]);
                Ok(plain(uniform(rng, &[3, 4]), move |t, x| {
                    let y = t.normalize_groups(x, 4, 1e-8)?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "cross_entropy",
            build: |rng, _| {
                let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
                let w = uniform(rng, &[4]);
                Ok(plain(uniform(rng, &[4, 5]), move |t, x| {
                    let y = t.cross_entropy(x, &labels)?;
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "elementwise.tanh",
            build: |rng, corrupt| {
                let w = uniform(rng, &[6]);
                let d = if corrupt {
                    corrupted_tanh_derivative
                } else {
                    tanh_derivative
                };
                Ok(plain(uniform(rng, &[6]), move |t, x| {
                    let y = t.elementwise(x, f64::tanh, d);
                    project(t, y, &w)
                }))
            },
        },
        Check {
            name: "network.cl.stage1_kernel",
            build: |rng, _| network_trial(rng, Target::Classification, 0),
        },
        Check {
            name: "total_loss.stage1_kernel",
            build: |rng, _| network_trial(rng, Target::Total, 0),
        },
        Check {
            name: "total_loss.stage2_kernel",
            build: |rng, _| network_trial(rng, Target::Total, 2),
        },
        Check {
            name: "total_loss.embed_weight",
            build: |rng, _| network_trial(rng, Target::Total, 4),
        },
        Check {
            name: "total_loss.proxies",
            build: |rng, _| network_trial(rng, Target::Total, 6),
        },
    ]
}

/// Names of every registered check, in run order.
pub fn check_names() -> Vec<&'static str> {
    registry().iter().map(|c| c.name).collect()
}

#[derive(Clone, Copy)]
enum Target {
    Classification,
    Total,
}

fn small_model(rng: &mut Rng, classes: usize) -> Result<Model> {
    let cfg = NetworkConfig {
        stages: vec![
            StageSpec {
                channels: 2,
                kernel: 3,
                stride: 1,
            },
            StageSpec {
                channels: 2,
                kernel: 3,
                stride: 1,
            },
        ],
        embed_dim: 8,
        input_shape: [1, 6, 6],
        eta: 1.0,
        eta_learnable: true,
    };
    let mut model = Model::new(cfg, rng)?;
    model.grow(classes, rng)?;
    Ok(model)
}

fn nodes_with(tape: &mut Tape, model: &Model, index: usize, node: NodeId) -> Result<Vec<NodeId>> {
    Ok(model
        .param_tensors()?
        .into_iter()
        .enumerate()
        .map(|(i, t)| if i == index { node } else { tape.constant(t) })
        .collect())
}

/// Network with parameter `index` exposed as the checked input. The total
/// objective distills all three stages from a perturbed snapshot with
/// Frobenius normalisation on, over a batch mixing old and new classes.
fn network_trial(rng: &mut Rng, target: Target, index: usize) -> Result<Trial> {
    let old_classes = 3;
    let mut old = small_model(rng, old_classes)?;
    for p in old.params_mut() {
        if p.name.ends_with(".bias") {
            p.data
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.1..=0.1));
        }
    }
    let mut model = old.clone();
    model.grow(1, rng)?;
    for p in model.params_mut() {
        if p.name == "classifier.eta" {
            continue;
        }
        for v in p.data.iter_mut() {
            *v += rng.random_range(-0.1..=0.1);
        }
    }
    let x_batch = uniform(rng, &[3, 1, 6, 6]);
    let labels = vec![0, 3, 2];
    let start = model.param_tensors()?[index].clone();

    let (old_feats, _) = old.snapshot(0).infer(&x_batch)?;
    let dims = model.config().feature_dims();
    let raw: Vec<ClassMatrix> = dims
        .iter()
        .map(|&d| {
            let rows: Vec<Vec<f64>> = (0..old_classes)
                .map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            ClassMatrix::from_rows(&rows)
        })
        .collect::<Result<_>>()?;
    let table = SignificanceTable::initial(normalize(&raw)?, 0.4)?;
    let mut dcfg = DistillConfig::for_conv_stages(2, 1.5);
    dcfg.stages_enabled = vec![1, 2, 3];
    let tau = temperature(old_classes + 1, 1)?;

    let pattern_model = model.clone();
    let pattern_x = x_batch.clone();
    let pattern: PatternFn = Box::new(move |p: &Tensor| {
        let mut tape = Tape::new();
        let node = tape.constant(p.clone());
        let params = nodes_with(&mut tape, &pattern_model, index, node)?;
        let out = pattern_model.forward_with(&mut tape, &pattern_x, params)?;
        let conv = &out.features[..out.features.len() - 1];
        let active = conv
            .iter()
            .flat_map(|&f| {
                tape.value(f)
                    .data()
                    .iter()
                    .map(|&v| v > 0.0)
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut min_norm = f64::INFINITY;
        for &f in &out.features {
            let s = tape.shape(f);
            let group = if s.len() == 4 { s[2] * s[3] } else { s[1] };
            for g in tape.value(f).data().chunks(group) {
                min_norm = min_norm.min(g.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
        }
        Ok(Probe { active, min_norm })
    });
    let f: LossFn = Box::new(move |tape: &mut Tape, node: NodeId| {
        let params = nodes_with(tape, &model, index, node)?;
        let out = model.forward_with(tape, &x_batch, params)?;
        let cl = classification_loss(tape, out.logits, &labels)?;
        match target {
            Target::Classification => Ok(cl),
            Target::Total => {
                let mut stages = vec![None; out.features.len()];
                for &j in &dcfg.stages_enabled {
                    stages[j - 1] = distill_loss_stage(
                        tape,
                        j,
                        out.features[j - 1],
                        &old_feats[j - 1],
                        &labels,
                        &table,
                        old_classes,
                        &dcfg,
                    )?;
                }
                total_loss(tape, cl, &stages, &dcfg.stages_enabled, dcfg.alpha, tau)
            }
        }
    });
    Ok(Trial {
        x: start,
        f,
        pattern: Some(pattern),
    })
}

fn smooth_at(pattern: &PatternFn, x: &Tensor) -> Result<bool> {
    let base = pattern(x)?;
    if base.min_norm < MIN_MAP_NORM {
        return Ok(false);
    }
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        for delta in [EPS, -EPS] {
            probe.data_mut()[i] = orig + delta;
            if pattern(&probe)?.active != base.active {
                return Ok(false);
            }
        }
        probe.data_mut()[i] = orig;
    }
    Ok(true)
}

/// Runs every check over [`TRIALS`] seeded points. `corrupt` swaps in a
/// wrong backward rule for one operator, as a negative control.
pub fn run_suite(seed: u64, corrupt: bool) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for (ci, check) in registry().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        let mut accepted = 0;
        let mut rejected = 0;
        let mut attempt = 0u64;
        while accepted < TRIALS {
            if rejected > MAX_ATTEMPTS {
                return contract_err(format!(
                    "{}: no smooth point in {MAX_ATTEMPTS} draws",
                    check.name
                ));
            }
            let mut rng = rng_for(seed, &[stream::GRADCHECK, ci as u64, attempt]);
            attempt += 1;
            let trial = (check.build)(&mut rng, corrupt)?;
            if let Some(p) = &trial.pattern {
                if !smooth_at(p, &trial.x)? {
                    rejected += 1;
                    continue;
                }
            }
            let err = grad_check(|t, x| (trial.f)(t, x), &trial.x, EPS)?;
            worst = worst.max(err);
            accepted += 1;
        }
        results.push(CheckResult {
            name: check.name,
            max_rel_error: worst,
            trials: accepted,
            rejected,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names = check_names();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn nodes_with_replaces_one_param() {
        let mut rng = rng_for(0, &[]);
        let model = small_model(&mut rng, 2).unwrap();
        let mut tape = Tape::new();
        let node = tape.param(model.param_tensors().unwrap()[0].clone());
        let params = nodes_with(&mut tape, &model, 0, node).unwrap();
        assert_eq!(params[0], node);
        assert!(params[1..].iter().all(|&p| !tape.requires_grad(p)));
    }
}
