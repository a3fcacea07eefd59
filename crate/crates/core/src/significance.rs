//! Class-wise feature significance.
//!
//! For every feature stage `j` and component `q`, the significance of class
//! `c` is the mean, over class-`c` samples, of the squared per-sample loss
//! gradient with respect to that component. Conv feature gradients are
//! averaged over their spatial grid before squaring. Raw means are
//! normalised so each component sums to one across classes, then blended
//! with the previous task's table by an exponential moving average.

use std::io::Write;

use crate::autodiff::{Tape, Tensor};
use crate::container;
use crate::error::{contract_err, dim_err, Result};
use crate::network::{Model, ModelSnapshot};
use crate::ClassId;

/// Row-major `classes × dims` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMatrix {
    classes: usize,
    dims: usize,
    data: Vec<f64>,
}

impl ClassMatrix {
    pub fn zeros(classes: usize, dims: usize) -> Self {
        Self {
            classes,
            dims,
            data: vec![0.0; classes * dims],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dims) {
            return dim_err("ragged rows");
        }
        Ok(Self {
            classes: rows.len(),
            dims,
            data: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn row(&self, class: ClassId) -> &[f64] {
        &self.data[class * self.dims..(class + 1) * self.dims]
    }

    pub fn row_mut(&mut self, class: ClassId) -> &mut [f64] {
        &mut self.data[class * self.dims..(class + 1) * self.dims]
    }

    pub fn get(&self, class: ClassId, component: usize) -> f64 {
        self.data[class * self.dims + component]
    }

    /// Sum over classes of component `q`.
    pub fn column_sum(&self, q: usize) -> f64 {
        (0..self.classes).fold(0.0, |acc, c| acc + self.get(c, q))
    }
}

/// Running sums of squared collapsed gradients, per stage and class.
#[derive(Clone, Debug)]
pub struct Accumulator {
    sums: Vec<ClassMatrix>,
    counts: Vec<usize>,
}

impl Accumulator {
    pub fn new(num_classes: usize, stage_dims: &[usize]) -> Self {
        Self {
            sums: stage_dims
                .iter()
                .map(|&d| ClassMatrix::zeros(num_classes, d))
                .collect(),
            counts: vec![0; num_classes],
        }
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn sums(&self) -> &[ClassMatrix] {
        &self.sums
    }

    /// Adds one sample's feature gradients. Each gradient is either a conv
    /// gradient `[d×h×w]` (collapsed by grid mean) or a dense gradient `[d]`.
    pub fn accumulate(&mut self, grads: &[Tensor], label: ClassId) -> Result<()> {
        if grads.len() != self.sums.len() {
            return dim_err(format!(
                "expected {} stage gradients, got {}",
                self.sums.len(),
                grads.len()
            ));
        }
        if label >= self.counts.len() {
            return contract_err(format!("label {label} outside [0, {})", self.counts.len()));
        }
        for (j, (g, sums)) in grads.iter().zip(&self.sums).enumerate() {
            let ok = match g.rank() {
                1 => g.shape()[0] == sums.dims,
                3 => g.shape()[0] == sums.dims,
                _ => false,
            };
            if !ok {
                return dim_err(format!(
                    "stage {} gradient {:?} does not match {} components",
                    j + 1,
                    g.shape(),
                    sums.dims
                ));
            }
        }
        for (g, sums) in grads.iter().zip(&mut self.sums) {
            let collapsed = collapse(g);
            for (s, v) in sums.row_mut(label).iter_mut().zip(&collapsed) {
                *s += v * v;
            }
        }
        self.counts[label] += 1;
        Ok(())
    }

    /// Divides every class row by its sample count.
    pub fn finalize(&self) -> Result<Vec<ClassMatrix>> {
        if let Some(c) = self.counts.iter().position(|&n| n == 0) {
            return contract_err(format!("class {c} has no samples"));
        }
        Ok(self
            .sums
            .iter()
            .map(|m| {
                let mut out = m.clone();
                for (c, &n) in self.counts.iter().enumerate() {
                    out.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
                }
                out
            })
            .collect())
    }
}

fn collapse(g: &Tensor) -> Vec<f64> {
    if g.rank() == 1 {
        return g.data().to_vec();
    }
    let cells = g.shape()[1] * g.shape()[2];
    g.data()
        .chunks(cells)
        .map(|c| c.iter().fold(0.0, |acc, &v| acc + v) / cells as f64)
        .collect()
}

/// Divides each entry by its component's sum over classes. An all-zero
/// component becomes uniform `1/r` and is logged.
pub fn normalize(raw: &[ClassMatrix]) -> Result<Vec<ClassMatrix>> {
    let mut out = Vec::with_capacity(raw.len());
    for (j, m) in raw.iter().enumerate() {
        if m.data.iter().any(|&v| !(v >= 0.0)) {
            return contract_err(format!("stage {} has a negative or NaN entry", j + 1));
        }
        let mut n = m.clone();
        for q in 0..m.dims {
            let total = m.column_sum(q);
            if total > 0.0 {
                for c in 0..m.classes {
                    n.data[c * m.dims + q] = m.get(c, q) / total;
                }
            } else {
                log::warn!(
                    "stage {} component {q}: all-zero significance, using uniform 1/{}",
                    j + 1,
                    m.classes
                );
                for c in 0..m.classes {
                    n.data[c * m.dims + q] = 1.0 / m.classes as f64;
                }
            }
        }
        out.push(n);
    }
    Ok(out)
}

/// Exponentially averaged, normalised class-wise significances.
#[derive(Clone, Debug, PartialEq)]
pub struct SignificanceTable {
    stages: Vec<ClassMatrix>,
    beta: f64,
    task_id: usize,
}

impl SignificanceTable {
    /// Base-task table: the fresh significances as they are.
    pub fn initial(fresh: Vec<ClassMatrix>, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(Self {
            stages: fresh,
            beta,
            task_id: 0,
        })
    }

    pub fn stages(&self) -> &[ClassMatrix] {
        &self.stages
    }

    /// Matrix of feature stage `j` (1-based).
    pub fn stage(&self, j: usize) -> &ClassMatrix {
        &self.stages[j - 1]
    }

    pub fn num_classes(&self) -> usize {
        self.stages.first().map_or(0, ClassMatrix::classes)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    /// Same shape, every entry `1/r` (class-agnostic weighting).
    pub fn uniform_like(&self) -> Self {
        let r = self.num_classes() as f64;
        let stages = self
            .stages
            .iter()
            .map(|m| ClassMatrix {
                classes: m.classes,
                dims: m.dims,
                data: vec![1.0 / r; m.data.len()],
            })
            .collect();
        Self {
            stages,
            beta: self.beta,
            task_id: self.task_id,
        }
    }

    /// `β·old + (1−β)·fresh` for classes already in the table; classes new in
    /// `fresh` take their fresh value. Advances the task id.
    pub fn ema_update(&self, fresh: &[ClassMatrix], beta: f64) -> Result<Self> {
        check_beta(beta)?;
        if fresh.len() != self.stages.len() {
            return dim_err(format!(
                "fresh table has {} stages, expected {}",
                fresh.len(),
                self.stages.len()
            ));
        }
        let mut stages = Vec::with_capacity(fresh.len());
        for (j, (old, new)) in self.stages.iter().zip(fresh).enumerate() {
            if new.dims != old.dims || new.classes < old.classes {
                return dim_err(format!(
                    "stage {}: fresh {}×{} cannot extend old {}×{}",
                    j + 1,
                    new.classes,
                    new.dims,
                    old.classes,
                    old.dims
                ));
            }
            let mut out = new.clone();
            for c in 0..old.classes {
                for (o, (&prev, &cur)) in out
                    .row_mut(c)
                    .iter_mut()
                    .zip(old.row(c).iter().zip(new.row(c)))
                {
                    *o = beta * prev + (1.0 - beta) * cur;
                }
            }
            stages.push(out);
        }
        Ok(Self {
            stages,
            beta,
            task_id: self.task_id + 1,
        })
    }

    /// Audit CSV with columns `stage,component,class,value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "stage,component,class,value")?;
        for (j, m) in self.stages.iter().enumerate() {
            for q in 0..m.dims {
                for c in 0..m.classes {
                    writeln!(w, "{},{},{},{}", j + 1, q, c, m.get(c, q))?;
                }
            }
        }
        Ok(())
    }

    /// Binary companion: a `[beta, task_id]` header tensor followed by one
    /// `[classes×dims]` tensor per stage.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Tensor::vector(vec![self.beta, self.task_id as f64]);
        let mats: Vec<Tensor> = self
            .stages
            .iter()
            .map(|m| Tensor::new(vec![m.classes, m.dims], m.data.clone()).expect("shape"))
            .collect();
        let mut refs = vec![&header];
        refs.extend(mats.iter());
        container::to_bytes(&refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let tensors = container::read_tensors(bytes)?;
        let (header, mats) = tensors
            .split_first()
            .ok_or_else(|| crate::Error::Contract("empty significance container".into()))?;
        if header.numel() != 2 {
            return dim_err("significance header must hold [beta, task_id]");
        }
        let stages = mats
            .iter()
            .map(|t| {
                if t.rank() != 2 {
                    return dim_err(format!("stage tensor {:?} is not a matrix", t.shape()));
                }
                Ok(ClassMatrix {
                    classes: t.shape()[0],
                    dims: t.shape()[1],
                    data: t.data().to_vec(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            stages,
            beta: header.data()[0],
            task_id: header.data()[1] as usize,
        })
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return contract_err(format!("beta must lie in [0, 1], got {beta}"));
    }
    Ok(())
}

/// Per-sample loss gradients with respect to every feature stage, for a
/// batch. Samples do not interact in the forward pass, so the gradient of
/// the summed per-sample losses with respect to sample `k`'s features is
/// exactly the gradient of `l_k` alone.
pub fn per_sample_feature_grads(
    model: &Model,
    x: &Tensor,
    labels: &[ClassId],
) -> Result<Vec<Vec<Tensor>>> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, x, true)?;
    let losses = tape.cross_entropy(out.logits, labels)?;
    let total = tape.sum(losses);
    tape.backward(total)?;
    let n = labels.len();
    let mut per_sample: Vec<Vec<Tensor>> = vec![Vec::with_capacity(out.features.len()); n];
    for &f in &out.features {
        let g = tape
            .grad_tensor(f)
            .unwrap_or_else(|| Tensor::zeros(tape.shape(f)));
        for (k, slot) in per_sample.iter_mut().enumerate() {
            slot.push(g.slice_outer(k)?);
        }
    }
    Ok(per_sample)
}

/// Estimates this task's table from a trained model over
/// `D^t ∪ E^{0~t−1}`, given as `(input, label)` pairs in a fixed order.
///
/// The accumulation runs in data order; `batch_size` only sets how many
/// samples share one tape.
pub fn estimate_task_significance(
    model: &Model,
    samples: &[(&Tensor, ClassId)],
    previous: Option<&SignificanceTable>,
    beta: f64,
    batch_size: usize,
) -> Result<SignificanceTable> {
    check_beta(beta)?;
    let num_classes = model.num_classes();
    let dims = model.config().feature_dims();
    let mut acc = Accumulator::new(num_classes, &dims);
    for chunk in samples.chunks(batch_size.max(1)) {
        let inputs: Vec<&Tensor> = chunk.iter().map(|(x, _)| *x).collect();
        let labels: Vec<ClassId> = chunk.iter().map(|&(_, y)| y).collect();
        let x = Tensor::stack(&inputs)?;
        let grads = per_sample_feature_grads(model, &x, &labels)?;
        for (g, &y) in grads.iter().zip(&labels) {
            acc.accumulate(g, y)?;
        }
    }
    let fresh = normalize(&acc.finalize()?)?;
    match previous {
        None => SignificanceTable::initial(fresh, beta),
        Some(prev) => prev.ema_update(&fresh, beta),
    }
}

/// Convenience for checking that an old model's table covers its classes.
pub fn covers(table: &SignificanceTable, snapshot: &ModelSnapshot) -> bool {
    table.num_classes() == snapshot.model().num_classes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn dense_gradient_squares_componentwise() {
        let mut acc = Accumulator::new(3, &[2]);
        acc.accumulate(&[dense(&[0.3, -0.4])], 2).unwrap();
        let row = acc.sums()[0].row(2);
        assert!((row[0] - 0.09).abs() < 1e-15 && (row[1] - 0.16).abs() < 1e-15);
        assert_eq!(acc.counts(), &[0, 0, 1]);
    }

    #[test]
    fn conv_gradient_mean_then_square() {
        let mut acc = Accumulator::new(1, &[1]);
        acc.accumulate(&[Tensor::full(&[1, 2, 2], 0.5)], 0).unwrap();
        assert_eq!(acc.sums()[0].row(0), &[0.25]);
        // mean first: +1 and -1 cancel
        let g = Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap();
        acc.accumulate(&[g], 0).unwrap();
        assert_eq!(acc.sums()[0].row(0), &[0.25]);
    }

    #[test]
    fn identical_samples_double() {
        let mut acc = Accumulator::new(1, &[2]);
        acc.accumulate(&[dense(&[0.1, 0.2])], 0).unwrap();
        let once = acc.sums()[0].row(0).to_vec();
        acc.accumulate(&[dense(&[0.1, 0.2])], 0).unwrap();
        let twice = acc.sums()[0].row(0);
        assert_eq!(twice, &[once[0] * 2.0, once[1] * 2.0]);
        assert_eq!(acc.counts()[0], 2);
    }

    #[test]
    fn accumulate_rejects_bad_shapes() {
        let mut acc = Accumulator::new(2, &[2, 3]);
        assert!(acc.accumulate(&[dense(&[1.0, 2.0])], 0).is_err());
        assert!(acc
            .accumulate(&[dense(&[1.0, 2.0]), dense(&[1.0, 2.0])], 0)
            .is_err());
        assert!(acc
            .accumulate(&[dense(&[1.0, 2.0]), dense(&[1.0, 2.0, 3.0])], 5)
            .is_err());
    }

    #[test]
    fn finalize_divides_by_count() {
        let mut acc = Accumulator::new(1, &[2]);
        acc.sums[0].row_mut(0).copy_from_slice(&[0.2, 0.4]);
        acc.counts[0] = 2;
        let raw = acc.finalize().unwrap();
        assert_eq!(raw[0].row(0), &[0.1, 0.2]);

        let mut single = Accumulator::new(1, &[1]);
        single.accumulate(&[dense(&[0.5])], 0).unwrap();
        assert_eq!(single.finalize().unwrap()[0].row(0), &[0.25]);

        let empty = Accumulator::new(2, &[1]);
        let err = empty.finalize().unwrap_err().to_string();
        assert!(err.contains("class 0"), "{err}");
    }

    #[test]
    fn normalize_cases() {
        let raw = ClassMatrix::from_rows(&[vec![0.1], vec![0.3]]).unwrap();
        let n = normalize(&[raw]).unwrap();
        assert!((n[0].get(0, 0) - 0.25).abs() < 1e-15);
        assert!((n[0].get(1, 0) - 0.75).abs() < 1e-15);

        let one = ClassMatrix::from_rows(&[vec![0.3, 2.0]]).unwrap();
        assert_eq!(normalize(&[one]).unwrap()[0].row(0), &[1.0, 1.0]);

        let zeros = ClassMatrix::zeros(4, 1);
        let n = normalize(&[zeros]).unwrap();
        assert!((0..4).all(|c| n[0].get(c, 0) == 0.25));
    }

    #[test]
    fn ema_examples() {
        let old =
            SignificanceTable::initial(vec![ClassMatrix::from_rows(&[vec![1.0]]).unwrap()], 0.4)
                .unwrap();
        let fresh = vec![ClassMatrix::from_rows(&[vec![0.5], vec![0.5]]).unwrap()];
        let t = old.ema_update(&fresh, 0.4).unwrap();
        assert!((t.stage(1).get(0, 0) - 0.7).abs() < 1e-12);
        assert_eq!(t.stage(1).get(1, 0), 0.5);
        assert_eq!(t.task_id(), 1);

        assert_eq!(old.ema_update(&fresh, 1.0).unwrap().stage(1).get(0, 0), 1.0);
        assert_eq!(old.ema_update(&fresh, 0.0).unwrap().stage(1).get(0, 0), 0.5);
        assert!(old.ema_update(&fresh, 1.5).is_err());
        assert!(old.ema_update(&fresh, -0.1).is_err());
    }

    #[test]
    fn csv_and_binary_forms() {
        let t = SignificanceTable::initial(
            vec![ClassMatrix::from_rows(&[vec![0.25, 1.0], vec![0.75, 0.0]]).unwrap()],
            0.4,
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("stage,component,class,value\n1,0,0,0.25\n1,0,1,0.75\n"));
        assert_eq!(SignificanceTable::from_bytes(&t.to_bytes()).unwrap(), t);
    }

    proptest! {
        #[test]
        fn ema_constant_fresh_is_fixed_point(v in 0.0f64..1.0, beta in 0.0f64..=1.0, tasks in 1usize..8) {
            let m = ClassMatrix::from_rows(&[vec![v]]).unwrap();
            let mut t = SignificanceTable::initial(vec![m.clone()], beta).unwrap();
            for _ in 0..tasks {
                t = t.ema_update(std::slice::from_ref(&m), beta).unwrap();
            }
            // exact for beta in {0,1}; a convex blend of equal values otherwise
            prop_assert!((t.stage(1).get(0, 0) - v).abs() <= f64::EPSILON * 4.0);
        }

        #[test]
        fn normalized_columns_sum_to_one(rows in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 3), 1..6)) {
            let n = normalize(&[ClassMatrix::from_rows(&rows).unwrap()]).unwrap();
            for q in 0..3 {
                prop_assert!((n[0].column_sum(q) - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn scaling_a_class_never_lowers_it(
            rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 2..5),
            lambda in 1.0f64..5.0,
        ) {
            let raw_of = |scale: f64| {
                let mut acc = Accumulator::new(rows.len(), &[2]);
                for (c, r) in rows.iter().enumerate() {
                    let s = if c == 0 { scale } else { 1.0 };
                    acc.accumulate(&[dense(&[r[0] * s, r[1] * s])], c).unwrap();
                }
                normalize(&acc.finalize().unwrap()).unwrap()
            };
            let base = raw_of(1.0);
            let scaled = raw_of(lambda);
            for q in 0..2 {
                prop_assert!(scaled[0].get(0, q) >= base[0].get(0, q) - 1e-12);
            }
        }
    }
}
