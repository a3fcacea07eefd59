//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward rule needs. Inputs always precede the node that consumes them, so
//! insertion order is a topological order and backward is a single reverse
//! sweep.

use super::Tensor;
use crate::error::{contract_err, dim_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: NodeId,
        rows: usize,
        cols: usize,
    },
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        geom: ConvGeom,
    },
    BiasAdd {
        x: NodeId,
        bias: NodeId,
        outer: usize,
        channels: usize,
        inner: usize,
    },
    Relu {
        x: NodeId,
    },
    GridReduce {
        x: NodeId,
        cells: usize,
        mean: bool,
    },
    Reshape {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Square {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    MulScalar {
        x: NodeId,
        s: NodeId,
    },
    Sum {
        x: NodeId,
        mean: bool,
    },
    NormalizeGroups {
        x: NodeId,
        group: usize,
        eps: f64,
        /// Per-group norm before the eps guard.
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        classes: usize,
        softmax: Vec<f64>,
    },
    Elementwise {
        x: NodeId,
        derivative: fn(f64) -> f64,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only record of a forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Registers a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of `id`, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient of `id` as a tensor shaped like its value.
    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ---------------------------------------------------------------- ops

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul: {sa:?} · {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in row.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return dim_err(format!("transpose: expected rank 2, got {s:?}"));
        }
        let (rows, cols) = (s[0], s[1]);
        let av = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = av[r * cols + c];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        Ok(self.push(value, Op::Transpose { a, rows, cols }, &[a]))
    }

    /// Cross-correlation of `x` (`[c_in×h×w]` or batched `[n×c_in×h×w]`)
    /// with `kernel` (`[c_out×c_in×kh×kw]`), zero padding on every side.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        let batched = match sx.len() {
            3 => false,
            4 => true,
            _ => return dim_err(format!("conv2d: input must be rank 3 or 4, got {sx:?}")),
        };
        if sk.len() != 4 {
            return dim_err(format!("conv2d: kernel must be rank 4, got {sk:?}"));
        }
        if stride == 0 {
            return dim_err("conv2d: stride must be positive");
        }
        let (batch, c_in, h, w) = if batched {
            (sx[0], sx[1], sx[2], sx[3])
        } else {
            (1, sx[0], sx[1], sx[2])
        };
        let (c_out, kc, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != c_in {
            return dim_err(format!(
                "conv2d: input {sx:?} vs kernel {sk:?} channel mismatch"
            ));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return dim_err(format!(
                "conv2d: kernel {sk:?} larger than padded input {sx:?} (padding {padding})"
            ));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        };
        let out = conv_forward(self.value(x).data(), self.value(kernel).data(), &geom);
        let shape = if batched {
            vec![batch, c_out, oh, ow]
        } else {
            vec![c_out, oh, ow]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Conv2d { x, kernel, geom }, &[x, kernel]))
    }

    /// Adds `bias[c]` along the channel axis: axis 1 for rank 2 and 4,
    /// axis 0 for rank 1 and 3.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        let axis = match sx.len() {
            1 | 3 => 0,
            2 | 4 => 1,
            _ => return dim_err(format!("bias_add: unsupported rank {sx:?}")),
        };
        let channels = sx[axis];
        if sb != [channels] {
            return dim_err(format!("bias_add: bias {sb:?} does not match {sx:?}"));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut out = xv.to_vec();
        for o in 0..outer {
            for (c, &b) in bv.iter().enumerate() {
                let base = (o * channels + c) * inner;
                for v in &mut out[base..base + inner] {
                    *v += b;
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        let op = Op::BiasAdd {
            x,
            bias,
            outer,
            channels,
            inner,
        };
        Ok(self.push(value, op, &[x, bias]))
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = map(self.value(x), |v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Averages each channel over its spatial grid: `[d×h×w] → [d]`,
    /// `[n×d×h×w] → [n×d]`.
    pub fn grid_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.grid_reduce(x, true)
    }

    /// Sums each channel over its spatial grid.
    pub fn grid_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.grid_reduce(x, false)
    }

    fn grid_reduce(&mut self, x: NodeId, mean: bool) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let (out_shape, cells) = match s.len() {
            3 => (vec![s[0]], s[1] * s[2]),
            4 => (vec![s[0], s[1]], s[2] * s[3]),
            _ => {
                return dim_err(format!(
                    "grid reduction needs a [d×h×w] or [n×d×h×w] input, got {s:?}"
                ))
            }
        };
        let xv = self.value(x).data();
        let out: Vec<f64> = xv
            .chunks(cells)
            .map(|c| {
                let total = c.iter().fold(0.0, |acc, &v| acc + v);
                if mean {
                    total / cells as f64
                } else {
                    total
                }
            })
            .collect();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::GridReduce { x, cells, mean }, &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let value = map(self.value(x), |v| v * v);
        self.push(value, Op::Square { x }, &[x])
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = map(self.value(x), |v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// Multiplies every element of `x` by the one-element node `s`.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).numel() != 1 {
            return dim_err(format!("mul_scalar: {:?} is not a scalar", self.shape(s)));
        }
        let sv = self.value(s).item();
        let value = map(self.value(x), |v| v * sv);
        Ok(self.push(value, Op::MulScalar { x, s }, &[x, s]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.reduce_all(x, false)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.reduce_all(x, true)
    }

    fn reduce_all(&mut self, x: NodeId, mean: bool) -> NodeId {
        let xv = self.value(x).data();
        let total = xv.iter().fold(0.0, |acc, &v| acc + v);
        let v = if mean { total / xv.len() as f64 } else { total };
        self.push(Tensor::scalar(v), Op::Sum { x, mean }, &[x])
    }

    /// Divides each contiguous group of `group` elements by
    /// `max(‖group‖₂, eps)`.
    pub fn normalize_groups(&mut self, x: NodeId, group: usize, eps: f64) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let xv = self.value(x).data();
        if group == 0 || !xv.len().is_multiple_of(group) {
            return dim_err(format!(
                "normalize_groups: group {group} does not divide {s:?}"
            ));
        }
        let mut out = Vec::with_capacity(xv.len());
        let mut norms = Vec::with_capacity(xv.len() / group);
        for chunk in xv.chunks(group) {
            let norm = chunk.iter().fold(0.0, |acc, &v| acc + v * v).sqrt();
            let denom = norm.max(eps);
            out.extend(chunk.iter().map(|&v| v / denom));
            norms.push(norm);
        }
        let value = Tensor::new(s, out)?;
        let op = Op::NormalizeGroups {
            x,
            group,
            eps,
            norms,
        };
        Ok(self.push(value, op, &[x]))
    }

    /// Per-row `−log softmax(logits)[label]` for `[n×k]` logits: `→ [n]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return dim_err(format!(
                "cross_entropy: logits {s:?} with {} labels",
                labels.len()
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return contract_err(format!("label {bad} outside [0, {k})"));
        }
        let zv = self.value(logits).data();
        let mut softmax = vec![0.0; n * k];
        let mut losses = Vec::with_capacity(n);
        for (i, &y) in labels.iter().enumerate() {
            let row = &zv[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom = row.iter().fold(0.0, |acc, &z| acc + (z - max).exp());
            for (j, &z) in row.iter().enumerate() {
                softmax[i * k + j] = (z - max).exp() / denom;
            }
            losses.push(max + denom.ln() - row[y]);
        }
        let value = Tensor::new(vec![n], losses)?;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            classes: k,
            softmax,
        };
        Ok(self.push(value, op, &[logits]))
    }

    /// Applies `f` elementwise with a caller-supplied derivative.
    pub fn elementwise(
        &mut self,
        x: NodeId,
        f: fn(f64) -> f64,
        derivative: fn(f64) -> f64,
    ) -> NodeId {
        let value = map(self.value(x), f);
        self.push(value, Op::Elementwise { x, derivative }, &[x])
    }

    fn zip(&self, a: NodeId, b: NodeId, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return dim_err(format!("{name}: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), out)
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from the one-element `loss`, adding into the stored
    /// gradient of every node that requires one. Repeated calls accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let slot = &mut self.nodes[i].grad;
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let accum = |grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, v)| *a += v),
                slot => *slot = Some(contrib),
            }
        };
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;

        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if needs(a) {
                    // dA = dC · Bᵀ
                    let bv = val(b);
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let grow = &g[r * n..(r + 1) * n];
                            da[r * k + p] = grow.iter().zip(brow).fold(0.0, |s, (x, y)| s + x * y);
                        }
                    }
                    accum(grads, a, da);
                }
                if needs(b) {
                    // dB = Aᵀ · dC
                    let av = val(a);
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = av[r * k + p];
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += arp * gv;
                            }
                        }
                    }
                    accum(grads, b, db);
                }
            }
            &Op::Transpose { a, rows, cols } => {
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] = g[c * rows + r];
                    }
                }
                accum(grads, a, da);
            }
            &Op::Conv2d { x, kernel, geom } => {
                let (dx, dk) =
                    conv_backward(val(x), val(kernel), g, &geom, needs(x), needs(kernel));
                if let Some(dx) = dx {
                    accum(grads, x, dx);
                }
                if let Some(dk) = dk {
                    accum(grads, kernel, dk);
                }
            }
            &Op::BiasAdd {
                x,
                bias,
                outer,
                channels,
                inner,
            } => {
                if needs(x) {
                    accum(grads, x, g.to_vec());
                }
                if needs(bias) {
                    let mut db = vec![0.0; channels];
                    for o in 0..outer {
                        for (c, d) in db.iter_mut().enumerate() {
                            let base = (o * channels + c) * inner;
                            *d += g[base..base + inner].iter().fold(0.0, |s, v| s + v);
                        }
                    }
                    accum(grads, bias, db);
                }
            }
            &Op::Relu { x } => {
                let dx = val(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accum(grads, x, dx);
            }
            &Op::GridReduce { x, cells, mean } => {
                let factor = if mean { 1.0 / cells as f64 } else { 1.0 };
                let dx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * factor, cells))
                    .collect();
                accum(grads, x, dx);
            }
            &Op::Reshape { x } => accum(grads, x, g.to_vec()),
            &Op::Add { a, b } => {
                accum(grads, a, g.to_vec());
                accum(grads, b, g.to_vec());
            }
            &Op::Sub { a, b } => {
                accum(grads, a, g.to_vec());
                accum(grads, b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    accum(grads, a, g.iter().zip(val(b)).map(|(x, y)| x * y).collect());
                }
                if needs(b) {
                    accum(grads, b, g.iter().zip(val(a)).map(|(x, y)| x * y).collect());
                }
            }
            &Op::Square { x } => {
                let dx = g.iter().zip(val(x)).map(|(gv, v)| 2.0 * v * gv).collect();
                accum(grads, x, dx);
            }
            &Op::Scale { x, factor } => {
                accum(grads, x, g.iter().map(|v| v * factor).collect());
            }
            &Op::MulScalar { x, s } => {
                let sv = val(s)[0];
                if needs(x) {
                    accum(grads, x, g.iter().map(|v| v * sv).collect());
                }
                if needs(s) {
                    let ds = g.iter().zip(val(x)).fold(0.0, |acc, (gv, v)| acc + gv * v);
                    accum(grads, s, vec![ds]);
                }
            }
            &Op::Sum { x, mean } => {
                let len = val(x).len();
                let gv = if mean { g[0] / len as f64 } else { g[0] };
                accum(grads, x, vec![gv; len]);
            }
            Op::NormalizeGroups {
                x,
                group,
                eps,
                norms,
            } => {
                let y = self.nodes[i].value.data();
                let mut dx = Vec::with_capacity(y.len());
                for ((yc, gc), &norm) in y.chunks(*group).zip(g.chunks(*group)).zip(norms) {
                    if norm > *eps {
                        let dot = yc.iter().zip(gc).fold(0.0, |s, (a, b)| s + a * b);
                        dx.extend(yc.iter().zip(gc).map(|(yv, gv)| (gv - yv * dot) / norm));
                    } else {
                        dx.extend(gc.iter().map(|gv| gv / eps));
                    }
                }
                accum(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                classes,
                softmax,
            } => {
                let mut dz = softmax.clone();
                for (r, &y) in labels.iter().enumerate() {
                    dz[r * classes + y] -= 1.0;
                    for v in &mut dz[r * classes..(r + 1) * classes] {
                        *v *= g[r];
                    }
                }
                accum(grads, *logits, dz);
            }
            &Op::Elementwise { x, derivative } => {
                let dx = g
                    .iter()
                    .zip(val(x))
                    .map(|(gv, &v)| gv * derivative(v))
                    .collect();
                accum(grads, x, dx);
            }
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

/// Output rows `y` whose receptive field at kernel offset `i` lands inside
/// the input: `0 <= y*stride + i - padding < h`.
fn valid_range(i: usize, stride: usize, padding: usize, h: usize, oh: usize) -> (usize, usize) {
    let lo = if i >= padding {
        0
    } else {
        (padding - i).div_ceil(stride)
    };
    let hi = if h + padding > i {
        ((h + padding - i - 1) / stride + 1).min(oh)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_forward(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.c_out * g.oh * g.ow];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let obase = (b * g.c_out + o) * g.oh * g.ow;
            for c in 0..g.c_in {
                let xbase = (b * g.c_in + c) * g.h * g.w;
                for i in 0..g.kh {
                    let (ylo, yhi) = valid_range(i, g.stride, g.padding, g.h, g.oh);
                    for j in 0..g.kw {
                        let kv = k[((o * g.c_in + c) * g.kh + i) * g.kw + j];
                        let (xlo, xhi) = valid_range(j, g.stride, g.padding, g.w, g.ow);
                        for y in ylo..yhi {
                            let iy = y * g.stride + i - g.padding;
                            let orow = obase + y * g.ow;
                            let xrow = xbase + iy * g.w;
                            for xo in xlo..xhi {
                                let ix = xo * g.stride + j - g.padding;
                                out[orow + xo] += kv * x[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    x: &[f64],
    k: &[f64],
    grad: &[f64],
    g: &ConvGeom,
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut dx = want_x.then(|| vec![0.0; x.len()]);
    let mut dk = want_k.then(|| vec![0.0; k.len()]);
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let obase = (b * g.c_out + o) * g.oh * g.ow;
            for c in 0..g.c_in {
                let xbase = (b * g.c_in + c) * g.h * g.w;
                for i in 0..g.kh {
                    let (ylo, yhi) = valid_range(i, g.stride, g.padding, g.h, g.oh);
                    for j in 0..g.kw {
                        let kidx = ((o * g.c_in + c) * g.kh + i) * g.kw + j;
                        let kv = k[kidx];
                        let (xlo, xhi) = valid_range(j, g.stride, g.padding, g.w, g.ow);
                        let mut kacc = 0.0;
                        for y in ylo..yhi {
                            let iy = y * g.stride + i - g.padding;
                            let orow = obase + y * g.ow;
                            let xrow = xbase + iy * g.w;
                            for xo in xlo..xhi {
                                let ix = xo * g.stride + j - g.padding;
                                let gv = grad[orow + xo];
                                kacc += gv * x[xrow + ix];
                                if let Some(dx) = dx.as_mut() {
                                    dx[xrow + ix] += gv * kv;
                                }
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            dk[kidx] += kacc;
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let out = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let out = tape.matmul(a, v).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn conv_scaling_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_full_sum_and_kernel_grad() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.param(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(k).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_padding_and_stride_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1, 5, 5], 1.0));
        let k = tape.constant(Tensor::full(&[3, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 3, 3]);
        // corner sees a 2×2 window, centre a full 3×3
        let v = tape.value(y).data();
        assert_eq!(v[0], 4.0);
        assert_eq!(v[4], 9.0);
    }

    #[test]
    fn conv_kernel_too_large() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, k, 1, 0),
            Err(crate::Error::Dimension(_))
        ));
        assert!(tape.conv2d(x, k, 1, 1).is_ok());
    }

    #[test]
    fn relu_values_and_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn grid_mean_cases() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2, 2], &[1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0]));
        let y = tape.grid_mean(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0]);

        let single = tape.constant(t(&[1, 1, 1], &[5.0]));
        let y1 = tape.grid_mean(single).unwrap();
        assert_eq!(tape.value(y1).data(), &[5.0]);

        let bad = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.grid_mean(bad).is_err());
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
        assert!(matches!(tape.backward(sq), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let c = tape.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 4]));
        let l = tape.cross_entropy(z, &[2]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
        assert!(tape.cross_entropy(z, &[4]).is_err());
    }

    #[test]
    fn normalize_groups_unit_norm() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
        let y = tape.normalize_groups(x, 2, 1e-8).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8, 0.0, 0.0]);
    }
}
