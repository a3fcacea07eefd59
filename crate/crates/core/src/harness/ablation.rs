//! Ablation studies: a base config expanded into named arms.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::{Method, RunConfig};
use super::metrics::MetricsLog;
use super::train::{run_experiment, RunOptions};
use crate::error::{contract_err, Error, Result};
use crate::exemplar::SelectionStrategy;

pub const BUDGETS: [usize; 5] = [5, 10, 20, 50, 100];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Study {
    /// Class-wise significance against a uniform table.
    Significance,
    /// All configured stages against the last one only.
    Stages,
    /// Exemplar selection strategies.
    Sampling,
    /// Per-class exemplar budget.
    Budget,
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "significance" => Ok(Self::Significance),
            "stages" => Ok(Self::Stages),
            "sampling" => Ok(Self::Sampling),
            "budget" => Ok(Self::Budget),
            _ => contract_err(format!(
                "unknown study `{s}` (expected significance, stages, sampling or budget)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    pub config: RunConfig,
}

/// Arms of `study`, all sharing the base config's master seed.
pub fn arms(study: Study, base: &RunConfig) -> Vec<Arm> {
    let with = |name: String, f: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Arm { name, config }
    };
    match study {
        Study::Significance => vec![
            with("exacfs".into(), &|c| c.method = Method::Exacfs),
            with("uniform_significance".into(), &|c| {
                c.method = Method::UniformSignificance
            }),
        ],
        Study::Stages => vec![
            with("all_stages".into(), &|c| c.method = Method::Exacfs),
            with("last_stage_only".into(), &|c| {
                c.method = Method::LastStageOnly
            }),
        ],
        Study::Sampling => [
            SelectionStrategy::Herding,
            SelectionStrategy::Random,
            SelectionStrategy::ClosestToMean,
        ]
        .into_iter()
        .map(|s| with(s.name().into(), &|c| c.exemplars.strategy = s))
        .collect(),
        Study::Budget => BUDGETS
            .into_iter()
            .map(|b| with(format!("budget_{b}"), &|c| c.exemplars.budget = b))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub name: String,
    pub log: MetricsLog,
}

/// Runs every arm, at most `jobs` at a time. Results keep arm order.
/// With `out_dir`, arm `a` writes into `out_dir/a`.
pub fn run_arms(
    arms: &[Arm],
    jobs: usize,
    out_dir: Option<&Path>,
    wall_time: bool,
) -> Result<Vec<ArmResult>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<MetricsLog>>>> =
        Mutex::new((0..arms.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, arms.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(arm) = arms.get(i) else { break };
                let opts = RunOptions {
                    out_dir: out_dir.map(|d| d.join(&arm.name)),
                    wall_time,
                };
                let res = run_experiment(&arm.config, &opts).map(|r| r.log);
                slots.lock().expect("no panics while held")[i] = Some(res);
            });
        }
    });
    slots
        .into_inner()
        .expect("threads joined")
        .into_iter()
        .zip(arms)
        .map(|(slot, arm)| {
            let log = slot.expect("every arm ran")?;
            Ok(ArmResult {
                name: arm.name.clone(),
                log,
            })
        })
        .collect()
}

/// `comparison.csv`: one row per arm.
pub fn write_comparison<W: Write>(mut w: W, results: &[ArmResult]) -> Result<()> {
    writeln!(w, "arm,avg_incremental_accuracy,final_acc")?;
    for r in results {
        let last = r.log.rows.last().map_or(0.0, |row| row.overall_acc);
        writeln!(w, "{},{},{last:.6}", r.name, r.log.average_field()?)?;
    }
    Ok(())
}

/// Expands, runs and writes a study under `out_dir`.
pub fn run_ablation(
    study: Study,
    base: &RunConfig,
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<ArmResult>> {
    let arms = arms(study, base);
    std::fs::create_dir_all(out_dir)?;
    let results = run_arms(&arms, jobs, Some(out_dir), false)?;
    let f = std::fs::File::create(out_dir.join("comparison.csv"))?;
    write_comparison(std::io::BufWriter::new(f), &results)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        RunConfig::from_json(include_str!("../../../../configs/smoke.json")).unwrap()
    }

    #[test]
    fn arm_counts_and_names() {
        let b = base();
        assert_eq!(arms(Study::Sampling, &b).len(), 3);
        assert_eq!(arms(Study::Stages, &b).len(), 2);
        assert_eq!(arms(Study::Significance, &b).len(), 2);
        let budget = arms(Study::Budget, &b);
        let sizes: Vec<usize> = budget.iter().map(|a| a.config.exemplars.budget).collect();
        assert_eq!(sizes, BUDGETS);
        assert!(budget.iter().all(|a| a.config.seed == b.seed));
        assert!("memory".parse::<Study>().is_err());
        assert_eq!("budget".parse::<Study>().unwrap(), Study::Budget);
    }
}
