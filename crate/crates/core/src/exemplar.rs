//! Fixed per-class exemplar memory.
//!
//! Exemplars are stored as indices into the training samples of their
//! class, so later models recompute their features from the raw inputs.
//! Once a class is stored its selection never changes.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::rng::{rng_for, stream};
use crate::ClassId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Herding,
    Random,
    ClosestToMean,
}

impl SelectionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Herding => "herding",
            Self::Random => "random",
            Self::ClosestToMean => "closest_to_mean",
        }
    }
}

fn prototype(embeddings: &[Vec<f64>]) -> Vec<f64> {
    let dim = embeddings[0].len();
    let mut mu = vec![0.0; dim];
    for e in embeddings {
        mu.iter_mut().zip(e).for_each(|(m, v)| *m += v);
    }
    let n = embeddings.len() as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    mu
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y))
}

/// Greedy herding: step `k` adds the unselected sample that brings the mean
/// of the selection closest to the class prototype. Ties go to the lower
/// index. Returns positions in selection order.
pub fn select_herding(embeddings: &[Vec<f64>], budget: usize) -> Result<Vec<usize>> {
    check(embeddings.len(), budget)?;
    let mu = prototype(embeddings);
    let dim = mu.len();
    let take = budget.min(embeddings.len());
    let mut chosen = vec![false; embeddings.len()];
    let mut running = vec![0.0; dim];
    let mut order = Vec::with_capacity(take);
    for k in 1..=take {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in embeddings.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            let d = running
                .iter()
                .zip(e)
                .zip(&mu)
                .fold(0.0, |acc, ((s, x), m)| {
                    let diff = m - (s + x) / k as f64;
                    acc + diff * diff
                });
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("unselected sample remains");
        chosen[i] = true;
        running
            .iter_mut()
            .zip(&embeddings[i])
            .for_each(|(s, x)| *s += x);
        order.push(i);
    }
    Ok(order)
}

/// The `budget` samples nearest the prototype, nearest first; ties go to
/// the lower index.
pub fn select_closest_to_mean(embeddings: &[Vec<f64>], budget: usize) -> Result<Vec<usize>> {
    check(embeddings.len(), budget)?;
    let mu = prototype(embeddings);
    let mut ranked: Vec<(f64, usize)> = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| (dist2(e, &mu), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked
        .into_iter()
        .take(budget.min(embeddings.len()))
        .map(|(_, i)| i)
        .collect())
}

/// Uniform selection without replacement, seeded by `(seed, class)`.
pub fn select_random(n: usize, budget: usize, seed: u64, class: ClassId) -> Result<Vec<usize>> {
    check(n, budget)?;
    if budget >= n {
        return Ok((0..n).collect());
    }
    let mut rng = rng_for(seed, &[stream::EXEMPLAR, class as u64]);
    Ok(sample(&mut rng, n, budget).into_vec())
}

fn check(n: usize, budget: usize) -> Result<()> {
    if n == 0 {
        return contract_err("cannot select exemplars from an empty class");
    }
    if budget == 0 {
        return contract_err("exemplar budget must be >= 1");
    }
    Ok(())
}

/// Retained samples per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarStore {
    budget_per_class: usize,
    strategy: SelectionStrategy,
    seed: u64,
    classes: BTreeMap<ClassId, Vec<usize>>,
}

impl ExemplarStore {
    pub fn new(budget_per_class: usize, strategy: SelectionStrategy, seed: u64) -> Result<Self> {
        if budget_per_class == 0 {
            return contract_err("exemplar budget must be >= 1");
        }
        Ok(Self {
            budget_per_class,
            strategy,
            seed,
            classes: BTreeMap::new(),
        })
    }

    pub fn budget(&self) -> usize {
        self.budget_per_class
    }

    pub fn strategy(&self) -> SelectionStrategy {
        self.strategy
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Sample indices retained for `class`, in selection order.
    pub fn class(&self, class: ClassId) -> Option<&[usize]> {
        self.classes.get(&class).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &[usize])> {
        self.classes.iter().map(|(&c, v)| (c, v.as_slice()))
    }

    /// Selects exemplars for each new class. `candidates` gives the class's
    /// sample indices; `embed` maps those indices to embeddings. Classes
    /// already stored are left unchanged.
    pub fn rebuild<F>(&mut self, new_classes: &[(ClassId, Vec<usize>)], mut embed: F) -> Result<()>
    where
        F: FnMut(&[usize]) -> Result<Vec<Vec<f64>>>,
    {
        for (class, candidates) in new_classes {
            if self.classes.contains_key(class) {
                continue;
            }
            let positions = match self.strategy {
                SelectionStrategy::Random => {
                    select_random(candidates.len(), self.budget_per_class, self.seed, *class)?
                }
                SelectionStrategy::Herding => {
                    select_herding(&embed(candidates)?, self.budget_per_class)?
                }
                SelectionStrategy::ClosestToMean => {
                    select_closest_to_mean(&embed(candidates)?, self.budget_per_class)?
                }
            };
            let picked = positions.into_iter().map(|p| candidates[p]).collect();
            self.classes.insert(*class, picked);
        }
        Ok(())
    }

    /// Manifest CSV with columns `class,rank,sample_index`.
    pub fn write_manifest<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "class,rank,sample_index")?;
        for (class, idx) in &self.classes {
            for (rank, i) in idx.iter().enumerate() {
                writeln!(w, "{class},{rank},{i}")?;
            }
        }
        Ok(())
    }
}
