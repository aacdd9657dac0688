//! Networks with indicator hooks and their forward pass.

mod mobilenet;
mod resnet;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::arch::{ArchitectureSpec, Block, LayerKind, LayerSpec, Shortcut};
use crate::error::{Error, Result};
use crate::indicators::SiteInfo;
use crate::tensor::{BatchStats, NormMode, ParamStore, Real, Tape, Tensor, Var};

pub use mobilenet::{build_mobilenet, build_mobilenet_with, MOBILENET_CIFAR};
pub use resnet::build_resnet;

/// Parameter-store tag used for network weights.
pub const WEIGHT_TAG: u8 = 0;

/// Momentum of the running batch-norm estimates.
pub const BN_MOMENTUM: f64 = 0.1;

/// Indices of one layer's tensors inside the parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub weight: usize,
    pub bias: Option<usize>,
    pub bn: Option<BnParams>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnParams {
    pub scale: usize,
    pub shift: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

/// Batch-norm mode of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// An architecture together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Real = f32> {
    pub spec: ArchitectureSpec,
    pub params: ParamStore<T>,
    layers: Vec<Option<LayerParams>>,
}

/// Output of [`Network::forward`].
pub struct Forward {
    pub logits: Var,
    /// Batch statistics per layer (train mode only).
    pub stats: Vec<(usize, BatchStats)>,
}

pub fn weight_name(layer: usize) -> String {
    format!("l{layer}.weight")
}

fn kernel_shape(l: &LayerSpec) -> Vec<usize> {
    match l.kind {
        LayerKind::DwConv => vec![l.k, l.k, 1, l.c_out],
        LayerKind::Linear => vec![l.c_in, l.c_out],
        _ => vec![l.k, l.k, l.c_in, l.c_out],
    }
}

impl<T: Real> Network<T> {
    /// Allocates parameters for `spec`: Kaiming fan-out normal kernels,
    /// unit BN scale, zero BN shift, uniform linear weights and zero bias.
    pub fn init<R: Rng + ?Sized>(spec: ArchitectureSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new(WEIGHT_TAG);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            if l.kind == LayerKind::Pool {
                layers.push(None);
                continue;
            }
            let shape = kernel_shape(l);
            let numel: usize = shape.iter().product();
            let data: Vec<T> = if l.kind == LayerKind::Linear {
                let bound = 1.0 / (l.c_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..numel).map(|_| T::of(dist.sample(rng))).collect()
            } else {
                let fan_out = if l.kind == LayerKind::DwConv {
                    l.k * l.k
                } else {
                    l.k * l.k * l.c_out
                };
                let dist = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).expect("positive std");
                (0..numel).map(|_| T::of(dist.sample(rng))).collect()
            };
            let weight = params.push(weight_name(i), Tensor::new(&shape, data)?.with_grad());
            let (bias, bn) = if l.kind == LayerKind::Linear {
                let b = params.push(format!("l{i}.bias"), Tensor::zeros(&[l.c_out]).with_grad());
                (Some(b), None)
            } else {
                let c = l.c_out;
                let bn = BnParams {
                    scale: params.push(format!("l{i}.bn.scale"), Tensor::filled(&[c], T::one()).with_grad()),
                    shift: params.push(format!("l{i}.bn.shift"), Tensor::zeros(&[c]).with_grad()),
                    running_mean: params.push(format!("l{i}.bn.running_mean"), Tensor::zeros(&[c])),
                    running_var: params.push(format!("l{i}.bn.running_var"), Tensor::filled(&[c], T::one())),
                };
                (None, Some(bn))
            };
            layers.push(Some(LayerParams { weight, bias, bn }));
        }
        Ok(Self { spec, params, layers })
    }

    /// Wraps an existing parameter store, checking every tensor's shape.
    pub fn from_parts(spec: ArchitectureSpec, params: ParamStore<T>) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let lookup = |name: String, shape: &[usize]| -> Result<usize> {
            let idx = params
                .index_of(&name)
                .ok_or_else(|| Error::Architecture(format!("missing parameter {name}")))?;
            if params.get(idx).tensor.shape() != shape {
                return Err(Error::dim(
                    name,
                    format!("stored {:?}, spec needs {shape:?}", params.get(idx).tensor.shape()),
                ));
            }
            Ok(idx)
        };
        for (i, l) in spec.layers.iter().enumerate() {
            if l.kind == LayerKind::Pool {
                layers.push(None);
                continue;
            }
            let weight = lookup(weight_name(i), &kernel_shape(l))?;
            let (bias, bn) = if l.kind == LayerKind::Linear {
                (Some(lookup(format!("l{i}.bias"), &[l.c_out])?), None)
            } else {
                let c = [l.c_out];
                (
                    None,
                    Some(BnParams {
                        scale: lookup(format!("l{i}.bn.scale"), &c)?,
                        shift: lookup(format!("l{i}.bn.shift"), &c)?,
                        running_mean: lookup(format!("l{i}.bn.running_mean"), &c)?,
                        running_var: lookup(format!("l{i}.bn.running_var"), &c)?,
                    }),
                )
            };
            layers.push(Some(LayerParams { weight, bias, bn }));
        }
        Ok(Self { spec, params, layers })
    }

    pub fn layer_params(&self, layer: usize) -> Option<LayerParams> {
        self.layers[layer]
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (layer, s) in stats {
            let Some(bn) = self.layers[*layer].and_then(|p| p.bn) else {
                continue;
            };
            let m = BN_MOMENTUM;
            let mean = self.params.get_mut(bn.running_mean).tensor.data_mut();
            for (r, b) in mean.iter_mut().zip(&s.mean) {
                *r = T::of((1.0 - m) * r.f64() + m * b);
            }
            let var = self.params.get_mut(bn.running_var).tensor.data_mut();
            for (r, b) in var.iter_mut().zip(&s.var_unbiased) {
                *r = T::of((1.0 - m) * r.f64() + m * b);
            }
        }
    }

    /// Forward pass.
    ///
    /// `masks`, when given, holds one tape value per indicator site; each
    /// masked layer's output is multiplied channel-wise by its site's values
    /// after conv -> BN -> ReLU (after the addition for residual outputs).
    /// `track_weights` controls whether weight gradients are recorded.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        masks: Option<&[Var]>,
        mode: Mode,
        track_weights: bool,
    ) -> Result<Forward> {
        if let Some(m) = masks {
            if m.len() != self.spec.num_sites() {
                return Err(Error::Site {
                    site: m.len().min(self.spec.num_sites()),
                    detail: format!("{} masks for {} sites", m.len(), self.spec.num_sites()),
                });
            }
            for (s, (&v, site)) in m.iter().zip(&self.spec.sites).enumerate() {
                if tape.value(v).len() != site.len {
                    return Err(Error::Site {
                        site: s,
                        detail: format!("mask has {} entries, site {} has {}", tape.value(v).len(), site.name, site.len),
                    });
                }
            }
        }
        let shape = tape.shape(input).to_vec();
        let [c, h, w] = self.spec.input;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::dim("input", format!("expected (N, {c}, {h}, {w}), got {shape:?}")));
        }
        let mut ctx = Ctx {
            net: self,
            tape,
            masks,
            mode,
            track: track_weights,
            stats: Vec::new(),
        };
        let mut x = input;
        for block in &self.spec.blocks {
            x = match block {
                Block::Conv { layer } => {
                    let y = ctx.conv_bn(x, *layer)?;
                    let y = ctx.tape.relu(y);
                    ctx.mask(y, self.spec.layers[*layer].out_site)?
                }
                Block::Residual { conv1, conv2, shortcut } => {
                    let y = ctx.conv_bn(x, *conv1)?;
                    let y = ctx.tape.relu(y);
                    let y = ctx.mask(y, self.spec.layers[*conv1].out_site)?;
                    let y = ctx.conv_bn(y, *conv2)?;
                    let skip = match shortcut {
                        Shortcut::Identity => x,
                        Shortcut::Gather(map) => ctx.tape.gather_channels(x, map)?,
                        Shortcut::Projection(p) => ctx.conv_bn(x, *p)?,
                    };
                    let y = ctx.tape.add(y, skip)?;
                    let y = ctx.tape.relu(y);
                    ctx.mask(y, self.spec.layers[*conv2].out_site)?
                }
                Block::Head { linear, .. } => {
                    let pooled = ctx.tape.global_avg_pool(x);
                    let p = self.layers[*linear].expect("linear layer has parameters");
                    let wv = ctx.bind(p.weight);
                    let bv = p.bias.map(|b| ctx.bind(b));
                    ctx.tape.linear(pooled, wv, bv, &format!("layer {linear}"))?
                }
            };
        }
        Ok(Forward {
            logits: x,
            stats: ctx.stats,
        })
    }
}

struct Ctx<'a, T: Real> {
    net: &'a Network<T>,
    tape: &'a mut Tape<T>,
    masks: Option<&'a [Var]>,
    mode: Mode,
    track: bool,
    stats: Vec<(usize, BatchStats)>,
}

impl<T: Real> Ctx<'_, T> {
    fn bind(&mut self, idx: usize) -> Var {
        let track = self.track && self.net.params.get(idx).tensor.requires_grad;
        self.tape.param_with(&self.net.params, idx, track)
    }

    fn conv_bn(&mut self, x: Var, layer: usize) -> Result<Var> {
        let spec = &self.net.spec.layers[layer];
        let p = self.net.layers[layer].expect("conv layer has parameters");
        let name = format!("layer {layer}");
        let kernel = self.bind(p.weight);
        let y = if spec.kind == LayerKind::DwConv {
            self.tape.depthwise_conv2d(x, kernel, spec.stride, spec.padding(), &name)?
        } else {
            self.tape.conv2d(x, kernel, spec.stride, spec.padding(), &name)?
        };
        let bn = p.bn.expect("conv layer has batch norm");
        let scale = self.bind(bn.scale);
        let shift = self.bind(bn.shift);
        let params = &self.net.params;
        let mode = match self.mode {
            Mode::Train => NormMode::Train,
            Mode::Eval => NormMode::Eval {
                mean: params.get(bn.running_mean).tensor.data(),
                var: params.get(bn.running_var).tensor.data(),
            },
        };
        let (out, stats) = self.tape.batch_norm(y, scale, shift, mode, &name)?;
        if let Some(s) = stats {
            self.stats.push((layer, s));
        }
        Ok(out)
    }

    fn mask(&mut self, x: Var, site: Option<usize>) -> Result<Var> {
        match (site, self.masks) {
            (Some(s), Some(m)) => {
                let name = &self.net.spec.sites[s].name;
                self.tape.channel_mask(x, m[s], name)
            }
            _ => Ok(x),
        }
    }
}

/// A plain chain of 3x3 convolutions, each with its own indicator site
/// except the first; used for small exhaustive checks.
pub fn plain_net(input: &[usize; 3], widths: &[usize], num_classes: usize) -> Result<ArchitectureSpec> {
    if widths.is_empty() {
        return Err(Error::Architecture("plain net needs at least one layer".into()));
    }
    let [c, h, w] = *input;
    let mut layers = Vec::new();
    let mut sites = Vec::new();
    let mut blocks = Vec::new();
    let mut stream = c;
    let mut stream_site = None;
    for (i, &width) in widths.iter().enumerate() {
        let out_site = (i > 0).then(|| {
            sites.push(SiteInfo {
                name: format!("conv{i}"),
                len: width,
                masks: Vec::new(),
            });
            sites.len() - 1
        });
        layers.push(LayerSpec {
            kind: LayerKind::Conv,
            k: 3,
            c_in: stream,
            c_out: width,
            stride: 1,
            h,
            w,
            in_site: stream_site,
            out_site,
        });
        blocks.push(Block::Conv { layer: i });
        stream = width;
        stream_site = out_site;
    }
    push_head(&mut layers, &mut blocks, stream, stream_site, h, num_classes);
    let mut spec = ArchitectureSpec {
        family: "plain".into(),
        input: *input,
        num_classes,
        layers,
        blocks,
        sites,
        residual_pairs: Vec::new(),
    };
    spec.refresh_site_masks();
    spec.validate()?;
    Ok(spec)
}

/// Appends global pooling and the classifier on top of `stream` channels.
pub(crate) fn push_head(
    layers: &mut Vec<LayerSpec>,
    blocks: &mut Vec<Block>,
    stream: usize,
    stream_site: Option<usize>,
    spatial: usize,
    num_classes: usize,
) {
    let pool = layers.len();
    layers.push(LayerSpec {
        kind: LayerKind::Pool,
        k: spatial,
        c_in: stream,
        c_out: stream,
        stride: 1,
        h: 1,
        w: 1,
        in_site: stream_site,
        out_site: stream_site,
    });
    layers.push(LayerSpec {
        kind: LayerKind::Linear,
        k: 1,
        c_in: stream,
        c_out: num_classes,
        stride: 1,
        h: 1,
        w: 1,
        in_site: stream_site,
        out_site: None,
    });
    blocks.push(Block::Head { pool, linear: pool + 1 });
}

/// Output size of a `k x k` convolution with `k / 2` padding.
pub(crate) fn conv_out(size: usize, k: usize, stride: usize) -> usize {
    (size + 2 * (k / 2) - k) / stride + 1
}

#[cfg(test)]
mod tests;
