//! Significance-weighted feature distillation and the total objective.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{contract_err, dim_err, Result};
use crate::significance::SignificanceTable;
use crate::ClassId;

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    /// Weight of the distillation sum in the total loss.
    pub alpha: f64,
    /// Feature stages (1-based) that contribute.
    pub stages_enabled: Vec<usize>,
    /// Whether new-class samples join the distillation mean.
    pub include_new_class_samples: bool,
    /// Per-component weight used for new-class samples.
    pub new_class_significance: f64,
    /// Divide every channel map by its Frobenius norm before differencing.
    pub frobenius_normalize: bool,
    pub eps_norm: f64,
}

impl DistillConfig {
    /// All conv stages, embedder excluded.
    pub fn for_conv_stages(num_conv_stages: usize, alpha: f64) -> Self {
        Self {
            alpha,
            stages_enabled: (1..=num_conv_stages).collect(),
            include_new_class_samples: true,
            new_class_significance: 1.0,
            frobenius_normalize: true,
            eps_norm: 1e-8,
        }
    }

    pub fn validate(&self, num_stages: usize) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return contract_err(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if self.alpha > 0.0 && self.stages_enabled.is_empty() {
            return contract_err("distillation needs at least one enabled stage");
        }
        if let Some(&j) = self
            .stages_enabled
            .iter()
            .find(|&&j| j == 0 || j > num_stages)
        {
            return contract_err(format!("stage {j} outside 1..={num_stages}"));
        }
        if !(self.new_class_significance >= 0.0) {
            return contract_err("new_class_significance must be >= 0");
        }
        if !(self.eps_norm > 0.0) {
            return contract_err("eps_norm must be positive");
        }
        Ok(())
    }
}

/// `√(r_t / c_t)`: grows as old classes outnumber new ones.
pub fn temperature(r_t: usize, c_t: usize) -> Result<f64> {
    if c_t == 0 || c_t > r_t {
        return contract_err(format!(
            "temperature needs 0 < c_t <= r_t, got r_t={r_t}, c_t={c_t}"
        ));
    }
    Ok((r_t as f64 / c_t as f64).sqrt())
}

/// Per-component squared distance between new features (on the tape) and
/// old features (constants), for a batch: `[n×d×h×w] → [n×d]` (squared
/// Frobenius norm per channel map) or `[n×d] → [n×d]` (squared difference).
///
/// With `normalize`, each channel map is first divided by
/// `max(‖map‖_F, eps)`; for dense features the whole vector is scaled by its
/// L2 norm.
pub fn delta_features(
    tape: &mut Tape,
    f_new: NodeId,
    f_old: &Tensor,
    normalize: bool,
    eps: f64,
) -> Result<NodeId> {
    let shape = tape.shape(f_new).to_vec();
    if shape != f_old.shape() {
        return dim_err(format!("delta_features: {shape:?} vs {:?}", f_old.shape()));
    }
    let group = match shape.len() {
        4 => shape[2] * shape[3],
        2 => shape[1],
        _ => {
            return dim_err(format!(
                "delta_features: unsupported feature shape {shape:?}"
            ))
        }
    };
    let old = tape.constant(f_old.clone());
    let (new, old) = if normalize {
        (
            tape.normalize_groups(f_new, group, eps)?,
            tape.normalize_groups(old, group, eps)?,
        )
    } else {
        (f_new, old)
    };
    let diff = tape.sub(new, old)?;
    let sq = tape.square(diff);
    if shape.len() == 4 {
        tape.grid_sum(sq)
    } else {
        Ok(sq)
    }
}

/// [`delta_features`] for a single un-batched sample (`[d×h×w]` or `[d]`),
/// returning plain values.
pub fn delta_features_value(
    f_new: &Tensor,
    f_old: &Tensor,
    normalize: bool,
    eps: f64,
) -> Result<Vec<f64>> {
    let mut batched = vec![1];
    batched.extend_from_slice(f_new.shape());
    let mut tape = Tape::new();
    let new = tape.constant(f_new.reshaped(&batched)?);
    let old = f_old.reshaped(&{
        let mut s = vec![1];
        s.extend_from_slice(f_old.shape());
        s
    })?;
    let d = delta_features(&mut tape, new, &old, normalize, eps)?;
    Ok(tape.value(d).data().to_vec())
}

/// Per-sample weight rows for stage `j`: the table row for old classes,
/// `new_class_significance` everywhere for new classes (or no row when
/// new-class samples are excluded).
fn stage_weights(
    j: usize,
    dims: usize,
    labels: &[ClassId],
    table: &SignificanceTable,
    num_old_classes: usize,
    cfg: &DistillConfig,
) -> Result<(Vec<f64>, usize)> {
    if table.num_classes() < num_old_classes {
        return contract_err(format!(
            "significance table covers {} classes, old model has {num_old_classes}",
            table.num_classes()
        ));
    }
    let m = table.stage(j);
    if m.dims() != dims {
        return dim_err(format!(
            "stage {j}: table has {} components, features {dims}",
            m.dims()
        ));
    }
    let mut w = Vec::with_capacity(labels.len() * dims);
    let mut count = 0;
    for &y in labels {
        if y < num_old_classes {
            w.extend_from_slice(m.row(y));
            count += 1;
        } else if cfg.include_new_class_samples {
            w.extend(std::iter::repeat_n(cfg.new_class_significance, dims));
            count += 1;
        } else {
            w.extend(std::iter::repeat_n(0.0, dims));
        }
    }
    Ok((w, count))
}

/// Distillation loss of stage `j` (1-based) over a batch: the mean over
/// contributing samples of `⟨w(label), Δf_j⟩`. `None` when no sample
/// contributes.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss_stage(
    tape: &mut Tape,
    j: usize,
    f_new: NodeId,
    f_old: &Tensor,
    labels: &[ClassId],
    table: &SignificanceTable,
    num_old_classes: usize,
    cfg: &DistillConfig,
) -> Result<Option<NodeId>> {
    let delta = delta_features(tape, f_new, f_old, cfg.frobenius_normalize, cfg.eps_norm)?;
    let shape = tape.shape(delta).to_vec();
    if shape[0] != labels.len() {
        return dim_err(format!(
            "{} labels for a batch of {}",
            labels.len(),
            shape[0]
        ));
    }
    let (w, count) = stage_weights(j, shape[1], labels, table, num_old_classes, cfg)?;
    if count == 0 {
        return Ok(None);
    }
    let w = tape.constant(Tensor::new(shape, w)?);
    let weighted = tape.mul(delta, w)?;
    let total = tape.sum(weighted);
    Ok(Some(tape.scale(total, 1.0 / count as f64)))
}

/// `CL + α·τ·Σ_j DL_j` over enabled stages. `stage_losses[j-1]` holds stage
/// `j`'s loss, if computed.
pub fn total_loss(
    tape: &mut Tape,
    cl: NodeId,
    stage_losses: &[Option<NodeId>],
    enabled: &[usize],
    alpha: f64,
    tau: f64,
) -> Result<NodeId> {
    let terms: Vec<NodeId> = enabled
        .iter()
        .filter_map(|&j| stage_losses.get(j - 1).copied().flatten())
        .collect();
    if alpha == 0.0 || terms.is_empty() {
        return Ok(cl);
    }
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t)?;
    }
    let scaled = tape.scale(sum, alpha * tau);
    tape.add(cl, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::significance::ClassMatrix;

    fn table(rows: &[Vec<f64>]) -> SignificanceTable {
        SignificanceTable::initial(vec![ClassMatrix::from_rows(rows).unwrap()], 0.4).unwrap()
    }

    #[test]
    fn temperature_values() {
        assert!((temperature(60, 10).unwrap() - 6f64.sqrt()).abs() < 1e-12);
        assert!((temperature(60, 10).unwrap() - 2.449).abs() < 1e-3);
        assert!((temperature(51, 1).unwrap() - 7.141).abs() < 1e-3);
        assert_eq!(temperature(5, 5).unwrap(), 1.0);
        assert!(temperature(5, 0).is_err());
    }

    #[test]
    fn delta_dense_and_identical() {
        let new = Tensor::vector(vec![1.0, 2.0]);
        let old = Tensor::vector(vec![1.0, 0.0]);
        assert_eq!(
            delta_features_value(&new, &old, false, 1e-8).unwrap(),
            vec![0.0, 4.0]
        );
        assert_eq!(
            delta_features_value(&new, &new, true, 1e-8).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn delta_conv_normalized_hand_case() {
        let new = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let old = Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let d = delta_features_value(&new, &old, true, 1e-8).unwrap();
        assert_eq!(d, vec![2.0]);
        // unnormalized with a scaled map: ‖(3,0,0,−1)‖² = 10
        let new = Tensor::new(vec![1, 2, 2], vec![3.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            delta_features_value(&new, &old, false, 1e-8).unwrap(),
            vec![10.0]
        );
        assert_eq!(
            delta_features_value(&new, &old, true, 1e-8).unwrap(),
            vec![2.0]
        );
    }

    #[test]
    fn delta_shape_mismatch() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert!(delta_features_value(&a, &b, false, 1e-8).is_err());
    }

    fn stage_loss(
        new: &[f64],
        old: &[f64],
        labels: &[usize],
        t: &SignificanceTable,
        num_old: usize,
        cfg: &DistillConfig,
    ) -> Result<Option<f64>> {
        let n = labels.len();
        let d = new.len() / n;
        let mut tape = Tape::new();
        let f = tape.param(Tensor::new(vec![n, d], new.to_vec()).unwrap());
        let o = Tensor::new(vec![n, d], old.to_vec()).unwrap();
        let l = distill_loss_stage(&mut tape, 1, f, &o, labels, t, num_old, cfg)?;
        Ok(l.map(|l| tape.value(l).item()))
    }

    fn dense_cfg() -> DistillConfig {
        DistillConfig {
            stages_enabled: vec![1],
            frobenius_normalize: false,
            ..DistillConfig::for_conv_stages(1, 1.0)
        }
    }

    #[test]
    fn stage_loss_examples() {
        let t = table(&[vec![0.25, 0.75], vec![0.75, 0.25]]);
        let cfg = dense_cfg();
        // identical → 0
        assert_eq!(
            stage_loss(&[1.0, 2.0], &[1.0, 2.0], &[0], &t, 2, &cfg).unwrap(),
            Some(0.0)
        );
        // w=[0.25,0.75], Δf=[4,0] → 1
        assert_eq!(
            stage_loss(&[2.0, 0.0], &[0.0, 0.0], &[0], &t, 2, &cfg).unwrap(),
            Some(1.0)
        );
        // doubling weights doubles the loss
        let t2 = table(&[vec![0.5, 1.5], vec![1.5, 0.5]]);
        assert_eq!(
            stage_loss(&[2.0, 0.0], &[0.0, 0.0], &[0], &t2, 2, &cfg).unwrap(),
            Some(2.0)
        );
    }

    #[test]
    fn new_class_samples_use_fixed_weight() {
        let t = table(&[vec![0.25, 0.75]]);
        let mut cfg = dense_cfg();
        // sample 0 old: 0.25*4 = 1; sample 1 new: 1*(1+1) = 2; mean 1.5
        let v = stage_loss(&[2.0, 0.0, 1.0, 1.0], &[0.0; 4], &[0, 1], &t, 1, &cfg).unwrap();
        assert_eq!(v, Some(1.5));
        cfg.include_new_class_samples = false;
        let v = stage_loss(&[2.0, 0.0, 1.0, 1.0], &[0.0; 4], &[0, 1], &t, 1, &cfg).unwrap();
        assert_eq!(v, Some(1.0));
        assert_eq!(
            stage_loss(&[1.0, 1.0], &[0.0; 2], &[1], &t, 1, &cfg).unwrap(),
            None
        );
    }

    #[test]
    fn missing_old_class_is_an_error() {
        let t = table(&[vec![0.25, 0.75]]);
        let err = stage_loss(&[1.0, 1.0], &[0.0; 2], &[1], &t, 2, &dense_cfg());
        assert!(matches!(err, Err(crate::Error::Contract(_))));
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::new();
        let cl = tape.constant(Tensor::scalar(1.0));
        let a = tape.constant(Tensor::scalar(0.5));
        let b = tape.constant(Tensor::scalar(0.5));
        let l = total_loss(&mut tape, cl, &[Some(a), Some(b)], &[1, 2], 4.0, 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 5.0);
        let l = total_loss(&mut tape, cl, &[Some(a), Some(b)], &[1, 2], 0.0, 3.0).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let l = total_loss(&mut tape, cl, &[None, None], &[1, 2], 4.0, 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        // masking to the last stage equals zeroing the others
        let zero = tape.constant(Tensor::scalar(0.0));
        let masked = total_loss(&mut tape, cl, &[Some(a), Some(b)], &[2], 4.0, 2.0).unwrap();
        let zeroed = total_loss(&mut tape, cl, &[Some(zero), Some(b)], &[1, 2], 4.0, 2.0).unwrap();
        assert_eq!(tape.value(masked).item(), tape.value(zeroed).item());
    }

    #[test]
    fn config_validation() {
        let cfg = DistillConfig::for_conv_stages(2, 4.0);
        assert!(cfg.validate(3).is_ok());
        assert!(DistillConfig {
            stages_enabled: vec![4],
            ..cfg.clone()
        }
        .validate(3)
        .is_err());
        assert!(DistillConfig {
            stages_enabled: vec![],
            ..cfg.clone()
        }
        .validate(3)
        .is_err());
        assert!(DistillConfig { alpha: -1.0, ..cfg }.validate(3).is_err());
    }
}
