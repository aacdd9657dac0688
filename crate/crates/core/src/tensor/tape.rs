use super::kernels::{self, ConvGeom};
use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Normalization statistics source for [`Tape::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    Depthwise { x: usize, w: usize, geom: ConvGeom },
    BatchNorm { x: usize, scale: usize, shift: usize, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    ChannelMask { x: usize, mask: usize },
    Gather { x: usize, map: Vec<Option<usize>> },
    GlobalAvgPool { x: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    SoftmaxCe { logits: usize, probs: Vec<T>, labels: Vec<usize> },
    Sigmoid { x: usize, inv_t: T },
    Sum { x: usize },
    Log { x: usize },
    Abs { x: usize },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    source: Option<(u8, usize)>,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape is built fresh for every forward pass; nodes are appended in
/// topological order so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], one slot per tape node.
#[derive(Debug)]
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.slots[var.0].as_deref()
    }
}

fn channel_split(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape.first().copied().unwrap_or(1);
    let c = shape.get(1).copied().unwrap_or(1);
    let inner = shape.iter().skip(2).product();
    (n, c, inner)
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(existing) => existing
            .iter_mut()
            .zip(contribution)
            .for_each(|(e, c)| *e = *e + c),
        None => *slot = Some(contribution),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            source: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape node is consistent")
    }

    /// Records a leaf; gradients are tracked when `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            op: Op::Leaf,
            requires_grad: tensor.requires_grad,
            source: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Binds a stored parameter as a leaf that reports its gradient back.
    pub fn param(&mut self, store: &ParamStore<T>, idx: usize) -> Var {
        let requires = store.get(idx).tensor.requires_grad;
        self.param_with(store, idx, requires)
    }

    /// Binds a parameter, overriding whether the tape tracks its gradient.
    pub fn param_with(&mut self, store: &ParamStore<T>, idx: usize, track: bool) -> Var {
        let t = &store.get(idx).tensor;
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: track,
            source: Some((store.tag(), idx)),
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn param_grads<'a>(
        &'a self,
        grads: &'a Gradients<T>,
    ) -> impl Iterator<Item = ((u8, usize), &'a [T])> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| {
            let key = n.source?;
            let g = grads.slots.get(i)?.as_deref()?;
            Some((key, g))
        })
    }

    /// Cross-correlation of an NCHW input with a `(k, k, c_in, c_out)` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize, layer: &str) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        let xs = self.shape(x).to_vec();
        if ks.len() != 4 || ks[0] != ks[1] {
            return Err(Error::dim(layer, format!("kernel shape {ks:?} is not (k, k, c_in, c_out)")));
        }
        if xs.len() != 4 || xs[1] != ks[2] {
            return Err(Error::dim(
                layer,
                format!("input {xs:?} has {} channels, kernel expects {}", xs.get(1).unwrap_or(&0), ks[2]),
            ));
        }
        let geom = ConvGeom::new(&xs, ks[0], ks[3], stride, pad)
            .ok_or_else(|| Error::dim(layer, format!("kernel {} does not fit input {xs:?}", ks[0])))?;
        let out = kernels::conv2d_forward(self.value(x), self.value(kernel), &geom);
        Ok(self.push(
            vec![geom.n, geom.c_out, geom.h_out, geom.w_out],
            out,
            Op::Conv2d { x: x.0, w: kernel.0, geom },
            &[x.0, kernel.0],
        ))
    }

    /// Per-channel convolution with a `(k, k, 1, c)` kernel.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize, layer: &str) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        let xs = self.shape(x).to_vec();
        if ks.len() != 4 || ks[0] != ks[1] || ks[2] != 1 {
            return Err(Error::dim(layer, format!("kernel shape {ks:?} is not (k, k, 1, c)")));
        }
        if xs.len() != 4 || xs[1] != ks[3] {
            return Err(Error::dim(layer, format!("input {xs:?} does not match {} depthwise channels", ks[3])));
        }
        let geom = ConvGeom::new(&xs, ks[0], ks[3], stride, pad)
            .ok_or_else(|| Error::dim(layer, format!("kernel {} does not fit input {xs:?}", ks[0])))?;
        let out = kernels::depthwise_forward(self.value(x), self.value(kernel), &geom);
        Ok(self.push(
            vec![geom.n, geom.c_out, geom.h_out, geom.w_out],
            out,
            Op::Depthwise { x: x.0, w: kernel.0, geom },
            &[x.0, kernel.0],
        ))
    }

    /// Batch normalization over the channel axis (axis 1).
    ///
    /// In train mode the batch statistics are returned so the caller can
    /// update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mode: NormMode<'_, T>,
        layer: &str,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        let (n, c, inner) = channel_split(&shape);
        if self.value(scale).len() != c || self.value(shift).len() != c {
            return Err(Error::dim(
                layer,
                format!(
                    "batch norm over {c} channels got scale {} / shift {}",
                    self.value(scale).len(),
                    self.value(shift).len()
                ),
            ));
        }
        let xv = self.value(x);
        let count = n * inner;
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        mean[ch] += xv[base..base + inner].iter().map(|v| v.f64()).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        var[ch] += xv[base..base + inner]
                            .iter()
                            .map(|v| (v.f64() - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1 { v / (count - 1) as f64 } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|v| *v /= count as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim(layer, "running statistics length differs from channels"));
                }
                (
                    mean.iter().map(|v| v.f64()).collect(),
                    var.iter().map(|v| v.f64()).collect(),
                    None,
                )
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + BN_EPS).sqrt())).collect();
        let (g, b) = (self.value(scale), self.value(shift));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                let m = T::of(mean[ch]);
                for i in base..base + inner {
                    let h = (xv[i] - m) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let train = stats.is_some();
        let var_out = self.push(
            shape,
            out,
            Op::BatchNorm {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
                xhat,
                inv_std,
                train,
            },
            &[x.0, scale.0, shift.0],
        );
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu { x: x.0 }, &[x.0])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                what,
                format!("operands {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x: x.0, c }, &[x.0])
    }

    /// Multiplies every channel (axis 1) of `x` by the matching entry of `mask`.
    pub fn channel_mask(&mut self, x: Var, mask: Var, site: &str) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, inner) = channel_split(&shape);
        let m = self.value(mask);
        if m.len() != c {
            return Err(Error::dim(site, format!("mask of {} entries over {c} channels", m.len())));
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                for i in base..base + inner {
                    out[i] = xv[i] * m[ch];
                }
            }
        }
        Ok(self.push(shape, out, Op::ChannelMask { x: x.0, mask: mask.0 }, &[x.0, mask.0]))
    }

    /// Builds a tensor whose channel `j` is channel `map[j]` of `x`, or zero.
    pub fn gather_channels(&mut self, x: Var, map: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, inner) = channel_split(&shape);
        if let Some(bad) = map.iter().flatten().find(|&&i| i >= c) {
            return Err(Error::dim("gather", format!("source channel {bad} out of {c}")));
        }
        let xv = self.value(x);
        let c_out = map.len();
        let mut out = vec![T::zero(); n * c_out * inner];
        for s in 0..n {
            for (j, src) in map.iter().enumerate() {
                if let Some(src) = src {
                    let from = (s * c + src) * inner;
                    let to = (s * c_out + j) * inner;
                    out[to..to + inner].copy_from_slice(&xv[from..from + inner]);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[1] = c_out;
        Ok(self.push(out_shape, out, Op::Gather { x: x.0, map: map.to_vec() }, &[x.0]))
    }

    /// Averages every channel over its spatial extent: `(N, C, H, W) -> (N, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c, inner) = channel_split(&shape);
        let xv = self.value(x);
        let out = (0..n * c)
            .map(|i| {
                let s: f64 = xv[i * inner..(i + 1) * inner].iter().map(|v| v.f64()).sum();
                T::of(s / inner as f64)
            })
            .collect();
        self.push(vec![n, c], out, Op::GlobalAvgPool { x: x.0 }, &[x.0])
    }

    /// `x (N, c_in) * w (c_in, c_out) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>, layer: &str) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim(layer, format!("linear input {xs:?} against weight {ws:?}")));
        }
        let (n, ci, co) = (xs[0], ws[0], ws[1]);
        if let Some(b) = b {
            if self.value(b).len() != co {
                return Err(Error::dim(layer, "bias length differs from output features"));
            }
        }
        let mut out = vec![T::zero(); n * co];
        if let Some(b) = b {
            let bv = self.value(b);
            out.chunks_mut(co).for_each(|row| row.copy_from_slice(bv));
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            n,
            ci,
            co,
            self.value(x),
            (ci as isize, 1),
            self.value(w),
            (co as isize, 1),
            beta,
            &mut out,
            (co as isize, 1),
        );
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        Ok(self.push(vec![n, co], out, Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0) }, &inputs))
    }

    /// Mean softmax cross-entropy of `(N, K)` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim(
                "cross entropy",
                format!("logits {shape:?} against {} labels", labels.len()),
            ));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::dim("cross entropy", format!("label {bad} out of {k} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * k];
        let mut loss = 0.0f64;
        for (s, &label) in labels.iter().enumerate() {
            let row = &lv[s * k..(s + 1) * k];
            let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                probs[s * k + j] = T::of(e / z);
            }
            loss -= row[label].f64() - max - z.ln();
        }
        let value = vec![T::of(loss / n as f64)];
        Ok(self.push(
            Vec::new(),
            value,
            Op::SoftmaxCe {
                logits: logits.0,
                probs,
                labels: labels.to_vec(),
            },
            &[logits.0],
        ))
    }

    /// Element-wise `1 / (1 + exp(-x / t))`.
    pub fn sigmoid_scaled(&mut self, x: Var, t: T) -> Result<Var> {
        if !(t > T::zero()) {
            return Err(Error::Temperature(t.f64()));
        }
        let inv_t = T::one() / t;
        let out = self
            .value(x)
            .iter()
            .map(|&v| T::of(stable_sigmoid(v.f64() * inv_t.f64())))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Sigmoid { x: x.0, inv_t }, &[x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|v| v.f64()).sum();
        self.push(Vec::new(), vec![T::of(s)], Op::Sum { x: x.0 }, &[x.0])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Log { x: x.0 }, &[x.0])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Abs { x: x.0 }, &[x.0])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut slots: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = slots[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut slots);
            slots[idx] = Some(g);
        }
        Ok(Gradients { slots })
    }

    /// Runs backward and adds parameter gradients into the given stores.
    pub fn backward_into(&self, loss: Var, stores: &mut [&mut ParamStore<T>]) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for store in stores.iter_mut() {
            store.accumulate(self, &grads);
        }
        Ok(grads)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], slots: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    g,
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    accumulate(&mut slots[*x], dx);
                }
                if let Some(dw) = dw {
                    accumulate(&mut slots[*w], dw);
                }
            }
            Op::Depthwise { x, w, geom } => {
                let (dx, dw) = kernels::depthwise_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    g,
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    accumulate(&mut slots[*x], dx);
                }
                if let Some(dw) = dw {
                    accumulate(&mut slots[*w], dw);
                }
            }
            Op::BatchNorm { x, scale, shift, xhat, inv_std, train } => {
                let (n, c, inner) = channel_split(&node.shape);
                let gamma = &self.nodes[*scale].value;
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                let mut sum_dxhat = vec![0.0f64; c];
                let mut sum_dxhat_xhat = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        for i in base..base + inner {
                            let gi = g[i].f64();
                            let h = xhat[i].f64();
                            dgamma[ch] += gi * h;
                            dbeta[ch] += gi;
                            let dh = gi * gamma[ch].f64();
                            sum_dxhat[ch] += dh;
                            sum_dxhat_xhat[ch] += dh * h;
                        }
                    }
                }
                if self.needs(*x) {
                    let count = (n * inner) as f64;
                    let mut dx = vec![T::zero(); g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * inner;
                            let is = inv_std[ch].f64();
                            let gm = gamma[ch].f64();
                            for i in base..base + inner {
                                let dh = g[i].f64() * gm;
                                dx[i] = T::of(if *train {
                                    is / count
                                        * (count * dh - sum_dxhat[ch] - xhat[i].f64() * sum_dxhat_xhat[ch])
                                } else {
                                    dh * is
                                });
                            }
                        }
                    }
                    accumulate(&mut slots[*x], dx);
                }
                if self.needs(*scale) {
                    accumulate(&mut slots[*scale], dgamma.into_iter().map(T::of).collect());
                }
                if self.needs(*shift) {
                    accumulate(&mut slots[*shift], dbeta.into_iter().map(T::of).collect());
                }
            }
            Op::Relu { x } => {
                let xv = &self.nodes[*x].value;
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &v)| if v > T::zero() { gi } else { T::zero() })
                    .collect();
                accumulate(&mut slots[*x], dx);
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(&mut slots[*a], g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(&mut slots[*b], g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    accumulate(&mut slots[*a], g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(&mut slots[*b], g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.needs(*a) {
                    accumulate(&mut slots[*a], g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect());
                }
                if self.needs(*b) {
                    accumulate(&mut slots[*b], g.iter().zip(av).map(|(&gi, &y)| gi * y).collect());
                }
            }
            Op::Scale { x, c } => {
                accumulate(&mut slots[*x], g.iter().map(|&v| v * *c).collect());
            }
            Op::ChannelMask { x, mask } => {
                let (n, c, inner) = channel_split(&node.shape);
                let xv = &self.nodes[*x].value;
                let mv = &self.nodes[*mask].value;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * inner;
                            for i in base..base + inner {
                                dx[i] = g[i] * mv[ch];
                            }
                        }
                    }
                    accumulate(&mut slots[*x], dx);
                }
                if self.needs(*mask) {
                    let mut dm = vec![0.0f64; c];
                    for s in 0..n {
                        for (ch, d) in dm.iter_mut().enumerate() {
                            let base = (s * c + ch) * inner;
                            *d += (base..base + inner).map(|i| g[i].f64() * xv[i].f64()).sum::<f64>();
                        }
                    }
                    accumulate(&mut slots[*mask], dm.into_iter().map(T::of).collect());
                }
            }
            Op::Gather { x, map } => {
                let src_shape = &self.nodes[*x].shape;
                let (n, c, inner) = channel_split(src_shape);
                let c_out = map.len();
                let mut dx = vec![T::zero(); n * c * inner];
                for s in 0..n {
                    for (j, src) in map.iter().enumerate() {
                        if let Some(src) = src {
                            let from = (s * c_out + j) * inner;
                            let to = (s * c + src) * inner;
                            for k in 0..inner {
                                dx[to + k] = dx[to + k] + g[from + k];
                            }
                        }
                    }
                }
                accumulate(&mut slots[*x], dx);
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, inner) = channel_split(&self.nodes[*x].shape);
                let scale = T::of(1.0 / inner as f64);
                let dx = g
                    .iter()
                    .flat_map(|&gi| std::iter::repeat(gi * scale).take(inner))
                    .collect();
                accumulate(&mut slots[*x], dx);
            }
            Op::Linear { x, w, b } => {
                let xs = &self.nodes[*x].shape;
                let ws = &self.nodes[*w].shape;
                let (n, ci, co) = (xs[0], ws[0], ws[1]);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * ci];
                    T::gemm(
                        n,
                        co,
                        ci,
                        g,
                        (co as isize, 1),
                        &self.nodes[*w].value,
                        (1, co as isize),
                        T::zero(),
                        &mut dx,
                        (ci as isize, 1),
                    );
                    accumulate(&mut slots[*x], dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); ci * co];
                    T::gemm(
                        ci,
                        n,
                        co,
                        &self.nodes[*x].value,
                        (1, ci as isize),
                        g,
                        (co as isize, 1),
                        T::zero(),
                        &mut dw,
                        (co as isize, 1),
                    );
                    accumulate(&mut slots[*w], dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0f64; co];
                        for row in g.chunks(co) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v.f64());
                        }
                        accumulate(&mut slots[*b], db.into_iter().map(T::of).collect());
                    }
                }
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let n = labels.len();
                let k = probs.len() / n.max(1);
                let scale = g[0].f64() / n as f64;
                let mut d: Vec<T> = probs.iter().map(|&p| T::of(p.f64() * scale)).collect();
                for (s, &l) in labels.iter().enumerate() {
                    d[s * k + l] = d[s * k + l] - T::of(scale);
                }
                accumulate(&mut slots[*logits], d);
            }
            Op::Sigmoid { x, inv_t } => {
                let dx = g
                    .iter()
                    .zip(&node.value)
                    .map(|(&gi, &y)| gi * y * (T::one() - y) * *inv_t)
                    .collect();
                accumulate(&mut slots[*x], dx);
            }
            Op::Sum { x } => {
                let len = self.nodes[*x].value.len();
                accumulate(&mut slots[*x], vec![g[0]; len]);
            }
            Op::Log { x } => {
                let xv = &self.nodes[*x].value;
                accumulate(&mut slots[*x], g.iter().zip(xv).map(|(&gi, &v)| gi / v).collect());
            }
            Op::Abs { x } => {
                let xv = &self.nodes[*x].value;
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &v)| {
                        if v > T::zero() {
                            gi
                        } else if v < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(&mut slots[*x], dx);
            }
        }
    }
}

/// Logistic function evaluated without overflow for large `|z|`.
pub fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
