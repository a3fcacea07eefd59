//! The incremental model: convolutional stages, a dense embedder and a
//! growing cosine classifier.
//!
//! Features are reported per stage in order, conv stages first (post-ReLU
//! maps `[n×d×h×w]`) and the embedder output last (`[n×d_L]`, not
//! normalised). Only the classifier takes cosines.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::container;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::rng::Rng;
use crate::ClassId;

const EMBED_NORM_EPS: f64 = 1e-12;

/// One convolutional stage: `channels` output maps, square `kernel`,
/// `stride`, "same" padding of `kernel / 2`, followed by ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub stages: Vec<StageSpec>,
    pub embed_dim: usize,
    /// `(channels, height, width)` of one input sample.
    pub input_shape: [usize; 3],
    pub eta: f64,
    pub eta_learnable: bool,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return contract_err("network needs at least one convolutional stage");
        }
        if self.embed_dim < 2 {
            return contract_err(format!("embed_dim must be >= 2, got {}", self.embed_dim));
        }
        if self.input_shape.contains(&0) {
            return contract_err(format!(
                "input shape {:?} has a zero dimension",
                self.input_shape
            ));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return contract_err(format!("eta must be positive, got {}", self.eta));
        }
        let mut shape = self.input_shape;
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.kernel == 0 || s.stride == 0 {
                return contract_err(format!("stage {} has a zero dimension: {s:?}", i + 1));
            }
            shape = stage_output(shape, s).ok_or_else(|| {
                Error::Contract(format!(
                    "stage {} kernel {} exceeds input {shape:?}",
                    i + 1,
                    s.kernel
                ))
            })?;
        }
        Ok(())
    }

    /// Number of feature stages `L` (conv stages plus the embedder).
    pub fn num_feature_stages(&self) -> usize {
        self.stages.len() + 1
    }

    /// Output shape of every conv stage for one sample.
    pub fn conv_output_shapes(&self) -> Vec<[usize; 3]> {
        let mut shape = self.input_shape;
        self.stages
            .iter()
            .map(|s| {
                shape = stage_output(shape, s).expect("validated config");
                shape
            })
            .collect()
    }

    /// Component count `d_j` of every feature stage `j = 1..=L`.
    pub fn feature_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.stages.iter().map(|s| s.channels).collect();
        dims.push(self.embed_dim);
        dims
    }

    fn flat_dim(&self) -> usize {
        let last = *self
            .conv_output_shapes()
            .last()
            .expect("at least one stage");
        last.iter().product()
    }
}

fn stage_output(input: [usize; 3], s: &StageSpec) -> Option<[usize; 3]> {
    let pad = s.kernel / 2;
    let [_, h, w] = input;
    if s.kernel > h + 2 * pad || s.kernel > w + 2 * pad {
        return None;
    }
    Some([
        s.channels,
        (h + 2 * pad - s.kernel) / s.stride + 1,
        (w + 2 * pad - s.kernel) / s.stride + 1,
    ])
}

#[derive(Clone, Debug, PartialEq)]
struct ConvStage {
    kernel: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

/// Cosine classifier with one unit-initialised proxy per class and a shared
/// scale `eta`: `logit_c = eta · cos(embedding, proxy_c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrowingClassifier {
    embed_dim: usize,
    proxies: Vec<f64>,
    eta: f64,
    eta_learnable: bool,
}

impl GrowingClassifier {
    pub fn new(embed_dim: usize, eta: f64, eta_learnable: bool) -> Self {
        Self {
            embed_dim,
            proxies: Vec::new(),
            eta,
            eta_learnable,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.proxies.len() / self.embed_dim
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn proxy(&self, class: ClassId) -> &[f64] {
        &self.proxies[class * self.embed_dim..(class + 1) * self.embed_dim]
    }

    pub fn proxy_mut(&mut self, class: ClassId) -> &mut [f64] {
        &mut self.proxies[class * self.embed_dim..(class + 1) * self.embed_dim]
    }

    /// Appends `c_new` proxies drawn from a standard Gaussian and scaled to
    /// unit length. Existing proxies are untouched.
    pub fn grow(&mut self, c_new: usize, rng: &mut Rng) -> Result<()> {
        if c_new == 0 {
            return contract_err("grow needs at least one new class");
        }
        for _ in 0..c_new {
            let mut v: Vec<f64> = (0..self.embed_dim)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                v[0] = 1.0;
            } else {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            self.proxies.extend(v);
        }
        Ok(())
    }

    fn proxies_tensor(&self) -> Result<Tensor> {
        let r = self.num_classes();
        if r == 0 {
            return contract_err("classifier has no classes yet");
        }
        for c in 0..r {
            let norm = self.proxy(c).iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return contract_err(format!("proxy for class {c} has norm {norm}"));
            }
        }
        Tensor::new(vec![r, self.embed_dim], self.proxies.clone())
    }
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `f_1 … f_L`.
    pub features: Vec<NodeId>,
    pub logits: NodeId,
    /// Parameter leaves, in [`Model::params_mut`] order.
    pub params: Vec<NodeId>,
}

/// Mutable view of one parameter tensor.
pub struct ParamMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
    /// Whether weight decay applies.
    pub decay: bool,
    /// False for a frozen classifier scale.
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: NetworkConfig,
    convs: Vec<ConvStage>,
    embed_weight: Tensor,
    embed_bias: Tensor,
    classifier: GrowingClassifier,
}

impl Model {
    /// He-initialised conv stages, zero biases, no classes.
    pub fn new(config: NetworkConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut c_in = config.input_shape[0];
        let mut convs = Vec::with_capacity(config.stages.len());
        for s in &config.stages {
            let fan_in = c_in * s.kernel * s.kernel;
            let std = (2.0 / fan_in as f64).sqrt();
            let shape = [s.channels, c_in, s.kernel, s.kernel];
            convs.push(ConvStage {
                kernel: gaussian(&shape, std, rng),
                bias: Tensor::zeros(&[s.channels]),
                stride: s.stride,
                padding: s.kernel / 2,
            });
            c_in = s.channels;
        }
        let flat = config.flat_dim();
        let embed_weight = gaussian(&[flat, config.embed_dim], (1.0 / flat as f64).sqrt(), rng);
        let embed_bias = Tensor::zeros(&[config.embed_dim]);
        let classifier = GrowingClassifier::new(config.embed_dim, config.eta, config.eta_learnable);
        Ok(Self {
            config,
            convs,
            embed_weight,
            embed_bias,
            classifier,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn classifier(&self) -> &GrowingClassifier {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut GrowingClassifier {
        &mut self.classifier
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn grow(&mut self, c_new: usize, rng: &mut Rng) -> Result<()> {
        self.classifier.grow(c_new, rng)
    }

    /// Conv kernel of stage `stage` (0-based), mutable, for tests and
    /// hand-built models.
    pub fn conv_kernel_mut(&mut self, stage: usize) -> &mut Tensor {
        &mut self.convs[stage].kernel
    }

    /// Parameter values in canonical order, as [`Model::params_mut`].
    pub fn param_tensors(&self) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 4);
        for c in &self.convs {
            out.push(c.kernel.clone());
            out.push(c.bias.clone());
        }
        out.push(self.embed_weight.clone());
        out.push(self.embed_bias.clone());
        out.push(self.classifier.proxies_tensor()?);
        out.push(Tensor::scalar(self.classifier.eta));
        Ok(out)
    }

    /// All parameters in canonical order: per stage kernel and bias, embedder
    /// weight and bias, classifier proxies, classifier scale.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.push(ParamMut {
                name: format!("stage{}.kernel", i + 1),
                data: c.kernel.data_mut(),
                decay: true,
                trainable: true,
            });
            out.push(ParamMut {
                name: format!("stage{}.bias", i + 1),
                data: c.bias.data_mut(),
                decay: true,
                trainable: true,
            });
        }
        out.push(ParamMut {
            name: "embed.weight".into(),
            data: self.embed_weight.data_mut(),
            decay: true,
            trainable: true,
        });
        out.push(ParamMut {
            name: "embed.bias".into(),
            data: self.embed_bias.data_mut(),
            decay: true,
            trainable: true,
        });
        out.push(ParamMut {
            name: "classifier.proxies".into(),
            data: &mut self.classifier.proxies,
            decay: true,
            trainable: true,
        });
        let eta_learnable = self.classifier.eta_learnable;
        out.push(ParamMut {
            name: "classifier.eta".into(),
            data: std::slice::from_mut(&mut self.classifier.eta),
            decay: false,
            trainable: eta_learnable,
        });
        out
    }

    /// Runs `x` (`[n×c×h×w]`) through the network on `tape`. With
    /// `track_grad` the parameters become gradient leaves; otherwise they are
    /// constants.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, track_grad: bool) -> Result<ForwardOutput> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.config.input_shape {
            return dim_err(format!(
                "input {s:?} does not match [n, {:?}]",
                self.config.input_shape
            ));
        }
        let tensors = self.param_tensors()?;
        let eta_idx = tensors.len() - 1;
        let params: Vec<NodeId> = tensors
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let learnable = i != eta_idx || self.classifier.eta_learnable;
                if track_grad && learnable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        self.forward_with(tape, x, params)
    }

    /// [`Model::forward`] over caller-made parameter nodes, given in
    /// [`Model::param_tensors`] order.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        params: Vec<NodeId>,
    ) -> Result<ForwardOutput> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.config.input_shape {
            return dim_err(format!(
                "input {s:?} does not match [n, {:?}]",
                self.config.input_shape
            ));
        }
        if params.len() != 2 * self.convs.len() + 4 {
            return dim_err(format!(
                "expected {} parameter nodes, got {}",
                2 * self.convs.len() + 4,
                params.len()
            ));
        }
        let n = s[0];
        let mut h = tape.constant(x.clone());
        let mut features = Vec::with_capacity(self.config.num_feature_stages());
        for (i, c) in self.convs.iter().enumerate() {
            let conv = tape.conv2d(h, params[2 * i], c.stride, c.padding)?;
            let biased = tape.bias_add(conv, params[2 * i + 1])?;
            h = tape.relu(biased);
            features.push(h);
        }
        let base = 2 * self.convs.len();
        let flat = tape.reshape(h, &[n, self.config.flat_dim()])?;
        let embed = tape.matmul(flat, params[base])?;
        let embed = tape.bias_add(embed, params[base + 1])?;
        features.push(embed);

        let e_hat = tape.normalize_groups(embed, self.config.embed_dim, EMBED_NORM_EPS)?;
        let p_hat =
            tape.normalize_groups(params[base + 2], self.config.embed_dim, EMBED_NORM_EPS)?;
        let p_t = tape.transpose(p_hat)?;
        let cos = tape.matmul(e_hat, p_t)?;
        let logits = tape.mul_scalar(cos, params[base + 3])?;
        Ok(ForwardOutput {
            features,
            logits,
            params,
        })
    }

    /// Forward pass without gradients, returning feature and logit values.
    pub fn infer(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x, false)?;
        let feats = out
            .features
            .iter()
            .map(|&f| tape.value(f).clone())
            .collect();
        Ok((feats, tape.value(out.logits).clone()))
    }

    /// Embedder outputs `f_L` for a batch, one row per sample.
    pub fn embed(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (feats, _) = self.infer(x)?;
        let e = feats.last().expect("embedder feature");
        Ok(e.data()
            .chunks(self.config.embed_dim)
            .map(<[f64]>::to_vec)
            .collect())
    }

    /// Arg-max class per sample; ties go to the lower class index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<ClassId>> {
        let (_, logits) = self.infer(x)?;
        let k = self.num_classes();
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    pub fn snapshot(&self, task_id: usize) -> ModelSnapshot {
        ModelSnapshot {
            model: self.clone(),
            task_id,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.param_tensors()?;
        let refs: Vec<&Tensor> = tensors.iter().collect();
        Ok(container::to_bytes(&refs))
    }

    /// Rebuilds a model for `config` from [`Model::to_bytes`] output.
    pub fn from_bytes(config: NetworkConfig, bytes: &[u8]) -> Result<Self> {
        config.validate()?;
        let tensors = container::read_tensors(bytes)?;
        let expected = 2 * config.stages.len() + 4;
        if tensors.len() != expected {
            return dim_err(format!(
                "expected {expected} tensors, found {}",
                tensors.len()
            ));
        }
        let mut it = tensors.into_iter();
        let mut c_in = config.input_shape[0];
        let mut convs = Vec::new();
        for s in &config.stages {
            let kernel = it.next().expect("counted");
            let bias = it.next().expect("counted");
            if kernel.shape() != [s.channels, c_in, s.kernel, s.kernel]
                || bias.shape() != [s.channels]
            {
                return dim_err(format!(
                    "stage tensors {:?}/{:?} do not match {s:?}",
                    kernel.shape(),
                    bias.shape()
                ));
            }
            convs.push(ConvStage {
                kernel,
                bias,
                stride: s.stride,
                padding: s.kernel / 2,
            });
            c_in = s.channels;
        }
        let embed_weight = it.next().expect("counted");
        let embed_bias = it.next().expect("counted");
        let proxies = it.next().expect("counted");
        let eta = it.next().expect("counted");
        if embed_weight.shape() != [config.flat_dim(), config.embed_dim]
            || embed_bias.shape() != [config.embed_dim]
            || proxies.rank() != 2
            || proxies.shape()[1] != config.embed_dim
            || eta.numel() != 1
        {
            return dim_err("embedder or classifier tensors do not match the config");
        }
        let classifier = GrowingClassifier {
            embed_dim: config.embed_dim,
            proxies: proxies.into_data(),
            eta: eta.item(),
            eta_learnable: config.eta_learnable,
        };
        Ok(Self {
            config,
            convs,
            embed_weight,
            embed_bias,
            classifier,
        })
    }
}

fn gaussian(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Frozen copy of the model at the end of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    model: Model,
    task_id: usize,
}

impl ModelSnapshot {
    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn infer(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        self.model.infer(x)
    }

    /// A live model starting from this snapshot.
    pub fn to_model(&self) -> Model {
        self.model.clone()
    }
}

/// Mean cross-entropy of `logits` (`[n×r]`) against `labels`.
pub fn classification_loss(tape: &mut Tape, logits: NodeId, labels: &[ClassId]) -> Result<NodeId> {
    let per_sample = tape.cross_entropy(logits, labels)?;
    Ok(tape.mean(per_sample))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    pub(crate) fn small_config() -> NetworkConfig {
        NetworkConfig {
            stages: vec![
                StageSpec {
                    channels: 3,
                    kernel: 3,
                    stride: 1,
                },
                StageSpec {
                    channels: 4,
                    kernel: 3,
                    stride: 2,
                },
            ],
            embed_dim: 5,
            input_shape: [1, 6, 6],
            eta: 10.0,
            eta_learnable: true,
        }
    }

    fn batch(n: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, &[99]);
        gaussian(&[n, 1, 6, 6], 1.0, &mut rng)
    }

    #[test]
    fn two_stages_give_three_features() {
        let mut rng = rng_for(1, &[]);
        let mut m = Model::new(small_config(), &mut rng).unwrap();
        m.grow(3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &batch(2, 0), true).unwrap();
        assert_eq!(out.features.len(), 3);
        assert_eq!(tape.shape(out.features[0]), &[2, 3, 6, 6]);
        assert_eq!(tape.shape(out.features[1]), &[2, 4, 3, 3]);
        assert_eq!(tape.shape(out.features[2]), &[2, 5]);
        assert_eq!(tape.shape(out.logits), &[2, 3]);
        assert_eq!(m.config().feature_dims(), vec![3, 4, 5]);
    }

    #[test]
    fn zero_proxy_is_rejected() {
        let mut rng = rng_for(1, &[]);
        let mut m = Model::new(small_config(), &mut rng).unwrap();
        m.grow(2, &mut rng).unwrap();
        m.classifier_mut().proxy_mut(1).fill(0.0);
        let mut tape = Tape::new();
        assert!(matches!(
            m.forward(&mut tape, &batch(1, 0), false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn logits_bounded_by_eta() {
        let mut rng = rng_for(2, &[]);
        let mut m = Model::new(small_config(), &mut rng).unwrap();
        m.grow(4, &mut rng).unwrap();
        let (_, logits) = m.infer(&batch(8, 3)).unwrap();
        assert!(logits.data().iter().all(|v| v.abs() <= 10.0 + 1e-12));
    }

    #[test]
    fn grow_keeps_existing_proxies_and_logits() {
        let mut rng = rng_for(3, &[]);
        let mut m = Model::new(small_config(), &mut rng).unwrap();
        m.grow(5, &mut rng).unwrap();
        let before = m.classifier().proxies.clone();
        let x = batch(3, 4);
        let (_, l_before) = m.infer(&x).unwrap();
        m.grow(10, &mut rng).unwrap();
        assert_eq!(m.num_classes(), 15);
        assert_eq!(&m.classifier().proxies[..before.len()], &before[..]);
        let (_, l_after) = m.infer(&x).unwrap();
        for r in 0..3 {
            assert_eq!(
                &l_before.data()[r * 5..r * 5 + 5],
                &l_after.data()[r * 15..r * 15 + 5]
            );
        }
        for c in 5..15 {
            let norm: f64 = m
                .classifier()
                .proxy(c)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        assert!(m.grow(0, &mut rng).is_err());
    }

    #[test]
    fn snapshot_is_frozen_and_bit_equal() {
        let mut rng = rng_for(4, &[]);
        let mut m = Model::new(small_config(), &mut rng).unwrap();
        m.grow(2, &mut rng).unwrap();
        let x = batch(2, 5);
        let snap = m.snapshot(3);
        assert_eq!(snap.task_id(), 3);
        assert_eq!(snap.infer(&x).unwrap(), m.infer(&x).unwrap());
        let captured = snap.infer(&x).unwrap();
        for p in m.params_mut() {
            p.data.iter_mut().for_each(|v| *v += 0.01);
        }
        assert_eq!(snap.infer(&x).unwrap(), captured);
        assert_ne!(m.infer(&x).unwrap(), captured);
        assert_eq!(snap.to_model().infer(&x).unwrap(), captured);
    }

    #[test]
    fn serialization_roundtrip() {
        let mut rng = rng_for(5, &[]);
        let mut m = Model::new(small_config(), &mut rng).unwrap();
        m.grow(3, &mut rng).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"EXFS");
        let back = Model::from_bytes(small_config(), &bytes).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn input_shape_mismatch() {
        let mut rng = rng_for(6, &[]);
        let mut m = Model::new(small_config(), &mut rng).unwrap();
        m.grow(1, &mut rng).unwrap();
        assert!(matches!(
            m.infer(&Tensor::zeros(&[1, 2, 6, 6])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn classification_loss_uniform_and_mean() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 4]));
        let l = classification_loss(&mut tape, z, &[0]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let z = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap());
        let per = tape.cross_entropy(z, &[0, 0]).unwrap();
        let (l1, l2) = (tape.value(per).data()[0], tape.value(per).data()[1]);
        let mean = classification_loss(&mut tape, z, &[0, 0]).unwrap();
        assert!((tape.value(mean).item() - (l1 + l2) / 2.0).abs() < 1e-15);

        let z = tape.constant(Tensor::new(vec![1, 2], vec![200.0, 0.0]).unwrap());
        let l = classification_loss(&mut tape, z, &[0]).unwrap();
        assert!(tape.value(l).item() < 1e-12);
        assert!(classification_loss(&mut tape, z, &[2]).is_err());
    }

    #[test]
    fn cosine_logits_scale_invariant() {
        let mut tape = Tape::new();
        let mut rng = rng_for(7, &[]);
        let mut c = GrowingClassifier::new(3, 10.0, true);
        c.grow(2, &mut rng).unwrap();
        let p = c.proxies_tensor().unwrap();
        let logits = |tape: &mut Tape, e: Vec<f64>| {
            let e = tape.constant(Tensor::new(vec![1, 3], e).unwrap());
            let eh = tape.normalize_groups(e, 3, EMBED_NORM_EPS).unwrap();
            let pn = tape.constant(p.clone());
            let ph = tape.normalize_groups(pn, 3, EMBED_NORM_EPS).unwrap();
            let pt = tape.transpose(ph).unwrap();
            let cos = tape.matmul(eh, pt).unwrap();
            tape.value(cos).data().to_vec()
        };
        let a = logits(&mut tape, vec![0.2, -0.5, 0.7]);
        let b = logits(&mut tape, vec![0.6, -1.5, 2.1]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
