//! Ordered class-incremental task stream.

use rand::seq::SliceRandom;

use super::data::{Dataset, Sample};
use crate::error::{contract_err, Result};
use crate::rng::{rng_for, stream};
use crate::ClassId;

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    /// Class ids (arrival order) introduced by this task.
    pub classes: Vec<ClassId>,
    /// Indices into [`TaskStream::train`].
    pub train: Vec<usize>,
    /// Indices into [`TaskStream::test`].
    pub test: Vec<usize>,
}

/// A dataset relabelled so that class ids follow arrival order: task `t`
/// owns the contiguous range `[r^{t−1}, r^t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub input_shape: [usize; 3],
    /// `class_order[i]` is the dataset label that became class `i`.
    pub class_order: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, t: usize) -> &Task {
        &self.tasks[t]
    }

    /// `r^t`: classes seen after task `t`.
    pub fn classes_seen(&self, t: usize) -> usize {
        self.tasks[..=t].iter().map(|k| k.classes.len()).sum()
    }

    /// Task that introduced `class`.
    pub fn task_of(&self, class: ClassId) -> usize {
        self.tasks
            .iter()
            .position(|k| k.classes.contains(&class))
            .expect("class belongs to a task")
    }

    /// Train indices of one class, in dataset order.
    pub fn class_train_indices(&self, class: ClassId) -> Vec<usize> {
        let t = self.task_of(class);
        self.tasks[t]
            .train
            .iter()
            .copied()
            .filter(|&i| self.train[i].label == class)
            .collect()
    }
}

/// Splits `dataset` into a base task of `base_classes` classes followed by
/// tasks of `increment` classes, under a class permutation seeded by
/// `ordering_seed`.
pub fn build_task_stream(
    dataset: &Dataset,
    base_classes: usize,
    increment: usize,
    ordering_seed: u64,
) -> Result<TaskStream> {
    let k = dataset.num_classes;
    if base_classes == 0 || base_classes > k {
        return contract_err(format!(
            "base_classes must lie in 1..={k}, got {base_classes}"
        ));
    }
    if increment == 0 {
        return contract_err("increment must be >= 1");
    }
    if !(k - base_classes).is_multiple_of(increment) {
        return contract_err(format!(
            "{} classes after the base task do not split into increments of {increment}",
            k - base_classes
        ));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng_for(ordering_seed, &[stream::ORDERING]));
    let mut rank = vec![0; k];
    for (i, &c) in order.iter().enumerate() {
        rank[c] = i;
    }
    let relabel = |s: &Sample| Sample {
        input: s.input.clone(),
        label: rank[s.label],
    };
    let train: Vec<Sample> = dataset.train.iter().map(relabel).collect();
    let test: Vec<Sample> = dataset.test.iter().map(relabel).collect();

    let mut bounds = vec![(0, base_classes)];
    while bounds.last().expect("base").1 < k {
        let lo = bounds.last().expect("base").1;
        bounds.push((lo, lo + increment));
    }
    let in_range = |samples: &[Sample], (lo, hi): (usize, usize)| -> Vec<usize> {
        samples
            .iter()
            .enumerate()
            .filter(|(_, s)| (lo..hi).contains(&s.label))
            .map(|(i, _)| i)
            .collect()
    };
    let tasks = bounds
        .iter()
        .map(|&b| Task {
            classes: (b.0..b.1).collect(),
            train: in_range(&train, b),
            test: in_range(&test, b),
        })
        .collect();
    Ok(TaskStream {
        input_shape: dataset.input_shape,
        class_order: order,
        train,
        test,
        tasks,
    })
}
