//! Per-task training, balanced fine-tuning and evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use super::config::{Method, RunConfig};
use super::metrics::{MetricsLog, MetricsRow};
use super::stream::{build_task_stream, TaskStream};
use crate::autodiff::{Tape, Tensor};
use crate::distillation::{distill_loss_stage, temperature, total_loss, DistillConfig};
use crate::error::{contract_err, Error, Result};
use crate::exemplar::{select_random, ExemplarStore};
use crate::network::{classification_loss, Model, ModelSnapshot};
use crate::rng::{derive_seed, rng_for, stream};
use crate::significance::{estimate_task_significance, SignificanceTable};
use crate::ClassId;

/// Fine-tuning runs at this fraction of the base learning rate.
pub const FINETUNE_LR_FACTOR: f64 = 0.01;
const EVAL_BATCH: usize = 256;

/// Step schedule: ×0.1 from 60% of the epochs and ×0.01 from 85%.
pub fn scheduled_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let progress = epoch as f64 / epochs as f64;
    if progress >= 0.85 {
        base * 0.01
    } else if progress >= 0.6 {
        base * 0.1
    } else {
        base
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `grads` follows [`Model::params_mut`] order; `None` leaves the
    /// parameter untouched.
    pub fn step(&mut self, model: &mut Model, grads: &[Option<Vec<f64>>], lr: f64) {
        let params = model.params_mut();
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            if !p.trainable {
                continue;
            }
            // the classifier grows between tasks, never within one
            v.resize(p.data.len(), 0.0);
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            for ((w, &gi), vi) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + wd * *w;
                *w -= lr * *vi;
            }
        }
    }
}

/// What a batch step distills against.
pub struct DistillTarget<'a> {
    pub snapshot: &'a ModelSnapshot,
    pub table: &'a SignificanceTable,
    pub cfg: &'a DistillConfig,
    pub tau: f64,
}

/// One minibatch of the total objective; returns the loss value.
pub fn train_step(
    model: &mut Model,
    sgd: &mut Sgd,
    lr: f64,
    x: &Tensor,
    labels: &[ClassId],
    distill: Option<&DistillTarget<'_>>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, x, true)?;
    let cl = classification_loss(&mut tape, out.logits, labels)?;
    let loss = match distill {
        Some(d) if d.cfg.alpha > 0.0 => {
            let (old_feats, _) = d.snapshot.infer(x)?;
            let num_old = d.snapshot.model().num_classes();
            let mut stage_losses = vec![None; out.features.len()];
            for &j in &d.cfg.stages_enabled {
                stage_losses[j - 1] = distill_loss_stage(
                    &mut tape,
                    j,
                    out.features[j - 1],
                    &old_feats[j - 1],
                    labels,
                    d.table,
                    num_old,
                    d.cfg,
                )?;
            }
            total_loss(
                &mut tape,
                cl,
                &stage_losses,
                &d.cfg.stages_enabled,
                d.cfg.alpha,
                d.tau,
            )?
        }
        _ => cl,
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Contract(format!("loss diverged to {value}")));
    }
    tape.backward(loss)?;
    let grads: Vec<Option<Vec<f64>>> = out
        .params
        .iter()
        .map(|&p| tape.grad(p).map(<[f64]>::to_vec))
        .collect();
    sgd.step(model, &grads, lr);
    Ok(value)
}

/// Test accuracy over tasks `0..=t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub overall: f64,
    pub per_task: Vec<f64>,
    /// Test-set size of each task.
    pub per_task_counts: Vec<usize>,
}

pub fn evaluate(model: &Model, stream: &TaskStream, t: usize) -> Result<Evaluation> {
    evaluate_with(|x| model.predict(x), stream, t)
}

/// Evaluation against any batch predictor.
pub fn evaluate_with<P>(mut predict: P, stream: &TaskStream, t: usize) -> Result<Evaluation>
where
    P: FnMut(&Tensor) -> Result<Vec<ClassId>>,
{
    let mut per_task = Vec::with_capacity(t + 1);
    let mut per_task_counts = Vec::with_capacity(t + 1);
    let (mut correct, mut total) = (0usize, 0usize);
    for task in &stream.tasks[..=t] {
        let mut hit = 0;
        for chunk in task.test.chunks(EVAL_BATCH) {
            let inputs: Vec<&Tensor> = chunk.iter().map(|&i| &stream.test[i].input).collect();
            let pred = predict(&Tensor::stack(&inputs)?)?;
            hit += chunk
                .iter()
                .zip(&pred)
                .filter(|(&i, &p)| stream.test[i].label == p)
                .count();
        }
        let n = task.test.len();
        per_task.push(if n == 0 { 0.0 } else { hit as f64 / n as f64 });
        per_task_counts.push(n);
        correct += hit;
        total += n;
    }
    Ok(Evaluation {
        overall: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        per_task,
        per_task_counts,
    })
}

/// Everything carried from one task to the next.
#[derive(Clone, Debug)]
pub struct Learner {
    pub model: Model,
    pub snapshot: Option<ModelSnapshot>,
    pub table: Option<SignificanceTable>,
    pub store: ExemplarStore,
    next_task: usize,
}

impl Learner {
    pub fn new(cfg: &RunConfig, stream: &TaskStream) -> Result<Self> {
        let net = cfg.network_config(stream.input_shape);
        let model = Model::new(net, &mut rng_for(cfg.seed, &[stream::INIT]))?;
        cfg.distill_config()
            .validate(model.config().num_feature_stages())?;
        Ok(Self {
            model,
            snapshot: None,
            table: None,
            store: ExemplarStore::new(
                cfg.exemplars.budget,
                cfg.exemplars.strategy,
                derive_seed(cfg.seed, &[stream::EXEMPLAR]),
            )?,
            next_task: 0,
        })
    }

    /// Index of the next task to train.
    pub fn next_task(&self) -> usize {
        self.next_task
    }

    /// Full per-task procedure: main training, balanced fine-tune,
    /// significance estimation, exemplar selection and snapshot.
    pub fn train_task(&mut self, t: usize, stream: &TaskStream, cfg: &RunConfig) -> Result<()> {
        self.train_main(t, stream, cfg)?;
        if t > 0 {
            self.balanced_finetune(t, stream, cfg, cfg.finetune.epochs)?;
        }
        self.finish_task(t, stream, cfg)
    }

    fn check_task(&self, t: usize) -> Result<()> {
        if t != self.next_task {
            return contract_err(format!("expected task {}, got {t}", self.next_task));
        }
        if t > 0 {
            match (&self.snapshot, &self.table) {
                (Some(s), Some(_)) if s.task_id() + 1 == t => {}
                (None, _) => {
                    return contract_err(format!("task {t} needs a snapshot of task {}", t - 1))
                }
                (_, None) => {
                    return contract_err(format!(
                        "task {t} needs the significance table of task {}",
                        t - 1
                    ))
                }
                (Some(s), _) => {
                    return contract_err(format!(
                        "snapshot is from task {}, need {}",
                        s.task_id(),
                        t - 1
                    ))
                }
            }
        }
        Ok(())
    }

    /// Distillation settings for task `t` after the method is applied;
    /// `None` at the base task or when α is 0.
    fn distill_parts(
        &self,
        t: usize,
        stream: &TaskStream,
        cfg: &RunConfig,
    ) -> Result<Option<(DistillConfig, SignificanceTable, f64)>> {
        let dcfg = cfg.distill_config();
        if t == 0 || dcfg.alpha == 0.0 {
            return Ok(None);
        }
        let table = self.table.as_ref().expect("checked");
        let table = if cfg.method == Method::UniformSignificance {
            table.uniform_like()
        } else {
            table.clone()
        };
        let tau = temperature(stream.classes_seen(t), stream.task(t).classes.len())?;
        Ok(Some((dcfg, table, tau)))
    }

    /// Minibatch SGD over `D^t ∪ E` with the stepped schedule.
    pub fn train_main(&mut self, t: usize, stream: &TaskStream, cfg: &RunConfig) -> Result<()> {
        self.check_task(t)?;
        let new = stream.task(t).classes.len();
        if self.model.num_classes() + new != stream.classes_seen(t) {
            return contract_err("classifier size does not match the stream");
        }
        self.model
            .grow(new, &mut rng_for(cfg.seed, &[stream::GROW, t as u64]))?;
        let mut indices = stream.task(t).train.clone();
        for (_, idx) in self.store.iter() {
            indices.extend_from_slice(idx);
        }
        let o = &cfg.optimizer;
        self.run_epochs(t, 0, stream, cfg, &indices, o.epochs, |e| {
            scheduled_lr(o.lr, e, o.epochs)
        })
    }

    /// The class-balanced set used by [`Learner::balanced_finetune`]: stored
    /// exemplars for old classes and a seeded subset of at most `budget`
    /// samples for each new class.
    pub fn balanced_set(
        &self,
        t: usize,
        stream: &TaskStream,
        cfg: &RunConfig,
    ) -> Result<Vec<usize>> {
        let budget = cfg.exemplars.budget;
        let mut out = Vec::new();
        for class in 0..stream.classes_seen(t) {
            let picked: Vec<usize> = match self.store.class(class) {
                Some(idx) => idx.iter().copied().take(budget).collect(),
                None => {
                    let all = stream.class_train_indices(class);
                    if all.is_empty() {
                        return contract_err(format!(
                            "class {class} has no samples to fine-tune on"
                        ));
                    }
                    let seed = derive_seed(cfg.seed, &[stream::FINETUNE]);
                    let mut pos = select_random(all.len(), budget, seed, class)?;
                    pos.sort_unstable();
                    pos.into_iter().map(|p| all[p]).collect()
                }
            };
            out.extend(picked);
        }
        Ok(out)
    }

    /// Class-balanced fine-tuning at base lr × 0.01 with the distillation
    /// term unchanged.
    pub fn balanced_finetune(
        &mut self,
        t: usize,
        stream: &TaskStream,
        cfg: &RunConfig,
        epochs: usize,
    ) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        let set = self.balanced_set(t, stream, cfg)?;
        let lr = cfg.optimizer.lr * FINETUNE_LR_FACTOR;
        self.run_epochs(t, 1, stream, cfg, &set, epochs, |_| lr)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_epochs<L: Fn(usize) -> f64>(
        &mut self,
        t: usize,
        phase: u64,
        stream: &TaskStream,
        cfg: &RunConfig,
        indices: &[usize],
        epochs: usize,
        lr_at: L,
    ) -> Result<()> {
        let parts = self.distill_parts(t, stream, cfg)?;
        let target = parts.as_ref().map(|(dcfg, table, tau)| DistillTarget {
            snapshot: self.snapshot.as_ref().expect("checked"),
            table,
            cfg: dcfg,
            tau: *tau,
        });
        let mut model = self.model.clone();
        let mut sgd = Sgd::new(cfg.optimizer.momentum, cfg.optimizer.weight_decay);
        let mut order = indices.to_vec();
        for epoch in 0..epochs {
            let mut rng = rng_for(cfg.seed, &[stream::SHUFFLE, t as u64, phase, epoch as u64]);
            order.shuffle(&mut rng);
            let lr = lr_at(epoch);
            let mut loss_sum = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.optimizer.batch_size) {
                let inputs: Vec<&Tensor> = chunk.iter().map(|&i| &stream.train[i].input).collect();
                let labels: Vec<ClassId> = chunk.iter().map(|&i| stream.train[i].label).collect();
                let x = Tensor::stack(&inputs)?;
                loss_sum += train_step(&mut model, &mut sgd, lr, &x, &labels, target.as_ref())?;
                batches += 1;
            }
            log::debug!(
                "task {t} phase {phase} epoch {epoch}: lr {lr:.5} loss {:.5}",
                loss_sum / batches.max(1) as f64
            );
        }
        self.model = model;
        Ok(())
    }

    /// Significance estimation over `D^t ∪ E`, exemplar selection for the
    /// new classes and the snapshot of `M^t`.
    pub fn finish_task(&mut self, t: usize, stream: &TaskStream, cfg: &RunConfig) -> Result<()> {
        self.check_task(t)?;
        let mut idx = stream.task(t).train.clone();
        for (_, e) in self.store.iter() {
            idx.extend_from_slice(e);
        }
        let samples: Vec<(&Tensor, ClassId)> = idx
            .iter()
            .map(|&i| (&stream.train[i].input, stream.train[i].label))
            .collect();
        let table = estimate_task_significance(
            &self.model,
            &samples,
            self.table.as_ref(),
            cfg.significance.beta,
            cfg.optimizer.batch_size.max(32),
        )?;
        debug_assert_eq!(table.task_id(), t);

        let new_classes: Vec<(ClassId, Vec<usize>)> = stream
            .task(t)
            .classes
            .iter()
            .map(|&c| (c, stream.class_train_indices(c)))
            .collect();
        let model = &self.model;
        self.store.rebuild(&new_classes, |ids| {
            let mut out = Vec::with_capacity(ids.len());
            for chunk in ids.chunks(EVAL_BATCH) {
                let inputs: Vec<&Tensor> = chunk.iter().map(|&i| &stream.train[i].input).collect();
                out.extend(model.embed(&Tensor::stack(&inputs)?)?);
            }
            Ok(out)
        })?;
        self.table = Some(table);
        self.snapshot = Some(self.model.snapshot(t));
        self.next_task = t + 1;
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for metrics, significance tables, models and exemplars.
    pub out_dir: Option<PathBuf>,
    /// Record wall-clock time per task; otherwise `wall_ms` is 0 so that
    /// repeated runs produce identical files.
    pub wall_time: bool,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub log: MetricsLog,
    pub evaluations: Vec<Evaluation>,
    pub learner: Learner,
    pub stream: TaskStream,
}

/// Runs the whole protocol for one config.
pub fn run_experiment(cfg: &RunConfig, opts: &RunOptions) -> Result<RunResult> {
    cfg.validate()?;
    let dataset = cfg.dataset()?;
    let stream = build_task_stream(
        &dataset,
        cfg.stream.base_classes,
        cfg.stream.increment,
        cfg.stream.ordering_seed,
    )?;
    drop(dataset);
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    }
    let mut learner = Learner::new(cfg, &stream)?;
    let mut log = MetricsLog::default();
    let mut evaluations = Vec::new();
    for t in 0..stream.num_tasks() {
        let start = Instant::now();
        learner.train_task(t, &stream, cfg)?;
        let eval = evaluate(&learner.model, &stream, t)?;
        let wall_ms = if opts.wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        log::info!(
            "[{}] task {t}: {} classes, accuracy {:.4}",
            cfg.method.name(),
            stream.classes_seen(t),
            eval.overall
        );
        log.push(MetricsRow {
            task: t,
            classes_seen: stream.classes_seen(t),
            overall_acc: eval.overall,
            per_task_accs: eval.per_task.clone(),
            wall_ms,
        });
        if let Some(dir) = &opts.out_dir {
            write_task_artifacts(dir, t, &learner)?;
        }
        evaluations.push(eval);
    }
    if let Some(dir) = &opts.out_dir {
        let mut f = std::fs::File::create(dir.join("exemplars.csv"))?;
        learner.store.write_manifest(&mut f)?;
        let f = std::fs::File::create(dir.join("metrics.csv"))?;
        log.write_csv(std::io::BufWriter::new(f))?;
    }
    Ok(RunResult {
        log,
        evaluations,
        learner,
        stream,
    })
}

fn write_task_artifacts(dir: &Path, t: usize, learner: &Learner) -> Result<()> {
    let table = learner.table.as_ref().expect("set after each task");
    let f = std::fs::File::create(dir.join(format!("significance_task{t}.csv")))?;
    table.write_csv(std::io::BufWriter::new(f))?;
    std::fs::write(
        dir.join(format!("significance_task{t}.bin")),
        table.to_bytes(),
    )?;
    std::fs::write(
        dir.join(format!("model_task{t}.bin")),
        learner.model.to_bytes()?,
    )?;
    Ok(())
}
