//! Bi-level indicator search, fine-tuning and evaluation.
//!
//! Each search step alternates one update of the auxiliary parameters on a
//! validation batch (weights held fixed, first-order) with one weight update
//! on an augmented training batch (indicators held fixed). The temperature
//! is set per epoch from the schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::ArchitectureSpec;
use crate::data::{batch_order, Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::indicators::{BinarizeRule, IndicatorSet, ScheduleKind, TemperatureSchedule, TRACE_THRESHOLD};
use crate::models::{Mode, Network};
use crate::optim::{Adam, LrSchedule, Sgd};
use crate::regularizers::{self, RegularizerConfig, RegularizerValues};
use crate::tensor::{Tape, Var};

/// Threshold used to binarize when the temperature is never annealed.
pub const NO_ANNEALING_THRESHOLD: f64 = 0.55;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleKind,
    pub t0: f64,
    pub alpha_init_mean: f64,
    pub alpha_init_std: f64,
    pub w_lr: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub a_lr: f64,
    pub a_betas: (f64, f64),
    pub a_weight_decay: f64,
    /// Scale the auxiliary learning rate by `T / T0`, keeping Adam's step
    /// size constant relative to the width of the relaxed step.
    #[serde(default)]
    pub a_lr_follows_temperature: bool,
    pub reg: RegularizerConfig,
    /// Update indicators on the validation split (false merges the splits
    /// and updates both parameter groups on training batches).
    pub bilevel: bool,
    pub binarize: BinarizeRule,
    pub trace_every: usize,
    pub augment: bool,
    pub seed: u64,
}

impl SearchConfig {
    /// Defaults of the reference recipe for a given regularizer setup.
    pub fn new(reg: RegularizerConfig) -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            schedule: ScheduleKind::Linear,
            t0: 1.0,
            alpha_init_mean: 1.0,
            alpha_init_std: 0.1,
            w_lr: 0.1,
            w_momentum: 0.9,
            w_weight_decay: 5e-5,
            a_lr: 1e-3,
            a_betas: (0.5, 0.999),
            a_weight_decay: 1e-3,
            a_lr_follows_temperature: false,
            reg,
            bilevel: true,
            binarize: BinarizeRule::Sign,
            trace_every: 20,
            augment: true,
            seed: 0,
        }
    }

    /// Fixed temperature `T0` and thresholded binarization.
    pub fn without_annealing(mut self) -> Self {
        self.schedule = ScheduleKind::Fixed;
        self.binarize = BinarizeRule::Threshold {
            threshold: NO_ANNEALING_THRESHOLD,
        };
        self
    }

    pub fn validate(&self, spec: &ArchitectureSpec) -> Vec<String> {
        let mut errs = self.reg.validate(spec.total_flops() as f64);
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if !(self.t0 > 0.0) {
            errs.push(format!("t0 must be positive, got {}", self.t0));
        }
        if !(self.alpha_init_std >= 0.0) {
            errs.push("alpha_init_std must be non-negative".into());
        }
        for (name, v) in [
            ("w_lr", self.w_lr),
            ("w_momentum", self.w_momentum),
            ("w_weight_decay", self.w_weight_decay),
            ("a_lr", self.a_lr),
            ("a_weight_decay", self.a_weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        let (b1, b2) = self.a_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            errs.push(format!("a_betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.trace_every == 0 {
            errs.push("trace_every must be positive".into());
        }
        if spec.num_sites() == 0 {
            errs.push("the model has no indicator sites".into());
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Temperature in effect during the epoch.
    pub temperature: f64,
    pub w_lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Regularizers at the end of the epoch, after annealing.
    pub reg: RegularizerValues,
    pub flops_ratio: f64,
    pub trace_counts: Vec<usize>,
    pub binarized_fraction: f64,
    pub mean_discrepancy: f64,
}

/// One row of the recoverability trace: per main-path convolution, the
/// number of output channels whose relaxed indicator exceeds 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub temperature: f64,
    pub counts: Vec<usize>,
}

pub struct SearchState {
    pub net: Network<f32>,
    pub indicators: IndicatorSet,
    pub w_opt: Sgd,
    pub a_opt: Adam,
    pub epoch: usize,
    pub schedule: TemperatureSchedule,
    pub config: SearchConfig,
    w_lr: LrSchedule,
    rng: ChaCha8Rng,
}

/// Independent random streams derived from one seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl SearchState {
    pub fn new(spec: ArchitectureSpec, config: SearchConfig) -> Result<Self> {
        let errs = config.validate(&spec);
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let net = Network::init(spec, &mut stream(config.seed, 1))?;
        let schedule = TemperatureSchedule::new(config.schedule, config.t0, config.epochs)?;
        let indicators = IndicatorSet::init(
            net.spec.sites.clone(),
            config.alpha_init_mean,
            config.alpha_init_std,
            schedule.temperature_at(0)?,
            &mut stream(config.seed, 2),
        )?;
        Ok(Self {
            net,
            indicators,
            w_opt: Sgd::new(config.w_momentum, config.w_weight_decay),
            a_opt: Adam::new(config.a_betas, config.a_weight_decay),
            epoch: 0,
            schedule,
            w_lr: LrSchedule::Cosine {
                lr: config.w_lr,
                epochs: config.epochs,
            },
            rng: stream(config.seed, 3),
            config,
        })
    }

    pub fn regularizer_values(&self) -> Result<RegularizerValues> {
        regularizers::evaluate(&self.indicators.relaxed_all(), &self.net.spec, &self.config.reg)
    }

    pub fn trace_row(&self) -> TraceRow {
        TraceRow {
            epoch: self.epoch,
            temperature: self.indicators.temperature(),
            counts: trace_columns(&self.net.spec, &self.indicators.trace_counts(TRACE_THRESHOLD)),
        }
    }

    /// Adds the weighted regularizers to `loss` on the tape.
    fn regularized<T: crate::tensor::Real>(&self, tape: &mut Tape<T>, loss: Var, masks: &[Var]) -> Result<Var> {
        let reg = &self.config.reg;
        let spec = &self.net.spec;
        let mut total = loss;
        if reg.lambda_flops > 0.0 {
            let e = regularizers::flops_expectation(tape, masks, spec)?;
            let r = regularizers::flops_regularizer(tape, e, reg.target_flops, reg.epsilon)?;
            let r = tape.scale(r, T::of(reg.lambda_flops));
            total = tape.add(total, r)?;
        }
        if reg.lambda_sym > 0.0 && !spec.residual_pairs.is_empty() {
            let r = regularizers::symmetry(tape, masks, &spec.residual_pairs)?;
            let r = tape.scale(r, T::of(reg.lambda_sym));
            total = tape.add(total, r)?;
        }
        if reg.lambda_lasso > 0.0 {
            let r = regularizers::lasso(tape, masks)?;
            let r = tape.scale(r, T::of(reg.lambda_lasso));
            total = tape.add(total, r)?;
        }
        Ok(total)
    }

    fn alpha_lr(&self) -> f64 {
        if self.config.a_lr_follows_temperature {
            self.config.a_lr * self.indicators.temperature() / self.config.t0
        } else {
            self.config.a_lr
        }
    }

    fn diverged(&self, step: usize, what: &str, value: f64) -> Error {
        let alphas = self.indicators.alphas();
        let flat: Vec<f32> = alphas.iter().flatten().copied().collect();
        let (lo, hi) = flat.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        Error::Divergence {
            epoch: self.epoch,
            step,
            snapshot: format!(
                "{what} = {value}, temperature {}, alpha range [{lo}, {hi}]",
                self.indicators.temperature()
            ),
        }
    }

    /// One step on the auxiliary parameters; returns the data loss.
    fn alpha_step(&mut self, data: &Dataset, idx: &[usize], step: usize) -> Result<f64> {
        let (x, y) = data.batch(idx, None);
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(&x);
        let masks = self.indicators.bind(&mut tape, true)?;
        let out = self.net.forward(&mut tape, xv, Some(&masks), Mode::Train, false)?;
        let ce = tape.softmax_cross_entropy(out.logits, &y)?;
        let ce_value = tape.scalar(ce) as f64;
        let loss = self.regularized(&mut tape, ce, &masks)?;
        let total = tape.scalar(loss) as f64;
        if !total.is_finite() {
            return Err(self.diverged(step, "validation objective", total));
        }
        tape.backward_into(loss, &mut [self.indicators.store_mut()])?;
        let a_lr = self.alpha_lr();
        self.a_opt.step(self.indicators.store_mut(), a_lr);
        Ok(ce_value)
    }

    fn weight_step(&mut self, data: &Dataset, idx: &[usize], step: usize, lr: f64) -> Result<f64> {
        let augment = self.config.augment;
        let (x, y) = data.batch(idx, augment.then_some(&mut self.rng));
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(&x);
        let masks = self.indicators.bind(&mut tape, false)?;
        let out = self.net.forward(&mut tape, xv, Some(&masks), Mode::Train, true)?;
        let loss = tape.softmax_cross_entropy(out.logits, &y)?;
        let value = tape.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(self.diverged(step, "training loss", value));
        }
        tape.backward_into(loss, &mut [&mut self.net.params])?;
        self.w_opt.step(&mut self.net.params, lr);
        self.net.update_running_stats(&out.stats);
        Ok(value)
    }

    /// Single-level variant: both parameter groups step on one training
    /// batch; the regularizers only reach the auxiliary parameters.
    fn joint_step(&mut self, data: &Dataset, idx: &[usize], step: usize, lr: f64) -> Result<f64> {
        let augment = self.config.augment;
        let (x, y) = data.batch(idx, augment.then_some(&mut self.rng));
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(&x);
        let masks = self.indicators.bind(&mut tape, true)?;
        let out = self.net.forward(&mut tape, xv, Some(&masks), Mode::Train, true)?;
        let ce = tape.softmax_cross_entropy(out.logits, &y)?;
        let value = tape.scalar(ce) as f64;
        let loss = self.regularized(&mut tape, ce, &masks)?;
        let total = tape.scalar(loss) as f64;
        if !total.is_finite() {
            return Err(self.diverged(step, "joint objective", total));
        }
        let (params, alphas) = (&mut self.net.params, self.indicators.store_mut());
        tape.backward_into(loss, &mut [params, alphas])?;
        self.w_opt.step(&mut self.net.params, lr);
        let a_lr = self.alpha_lr();
        self.a_opt.step(self.indicators.store_mut(), a_lr);
        self.net.update_running_stats(&out.stats);
        Ok(value)
    }
}

/// Expands per-site counts to one column per main-path convolution;
/// unmasked convolutions report their full width.
pub fn trace_columns(spec: &ArchitectureSpec, site_counts: &[usize]) -> Vec<usize> {
    spec.main_path_convs()
        .into_iter()
        .map(|l| {
            let layer = &spec.layers[l];
            layer.out_site.map_or(layer.c_out, |s| site_counts[s])
        })
        .collect()
}

/// Runs one search epoch; the temperature is annealed at its end.
pub fn search_epoch(state: &mut SearchState, data: &SplitDataset) -> Result<EpochMetrics> {
    if state.epoch >= state.config.epochs {
        return Err(Error::EpochOutOfRange {
            epoch: state.epoch,
            n_max: state.config.epochs,
        });
    }
    let t = state.schedule.temperature_at(state.epoch)?;
    state.indicators.set_temperature(t)?;
    let lr = state.w_lr.at(state.epoch);
    let bs = state.config.batch_size;
    let (mut train_sum, mut train_n, mut val_sum, mut val_n) = (0.0, 0usize, 0.0, 0usize);

    if state.config.bilevel {
        let train_batches = batch_order(data.train.len(), bs, &mut state.rng);
        let val_batches = batch_order(data.val.len(), bs, &mut state.rng);
        for (step, tb) in train_batches.iter().enumerate() {
            let vb = &val_batches[step % val_batches.len()];
            val_sum += state.alpha_step(&data.val, vb, step)? * vb.len() as f64;
            val_n += vb.len();
            train_sum += state.weight_step(&data.train, tb, step, lr)? * tb.len() as f64;
            train_n += tb.len();
        }
    } else {
        let merged = merge(&data.train, &data.val);
        for (step, b) in batch_order(merged.len(), bs, &mut state.rng).iter().enumerate() {
            train_sum += state.joint_step(&merged, b, step, lr)? * b.len() as f64;
            train_n += b.len();
        }
    }

    state.epoch += 1;
    let next_t = state.schedule.temperature_at(state.epoch)?;
    state.indicators.set_temperature(next_t)?;
    let reg = state.regularizer_values()?;
    Ok(EpochMetrics {
        epoch: state.epoch,
        temperature: t,
        w_lr: lr,
        train_loss: train_sum / train_n.max(1) as f64,
        val_loss: if val_n > 0 { val_sum / val_n as f64 } else { f64::NAN },
        flops_ratio: reg.e_flops / state.net.spec.total_flops() as f64,
        reg,
        trace_counts: state.indicators.trace_counts(TRACE_THRESHOLD),
        binarized_fraction: state.indicators.binarized_fraction(0.01),
        mean_discrepancy: state.indicators.mean_discrepancy(),
    })
}

fn merge(a: &Dataset, b: &Dataset) -> Dataset {
    let mut out = a.clone();
    out.images.extend_from_slice(&b.images);
    out.labels.extend_from_slice(&b.labels);
    out
}

pub struct SearchResult {
    pub net: Network<f32>,
    pub indicators: IndicatorSet,
    pub metrics: Vec<EpochMetrics>,
    pub trace: Vec<TraceRow>,
    pub keep: Vec<Vec<bool>>,
    pub config: SearchConfig,
}

/// Runs the whole search. `on_epoch` observes each epoch's metrics (for
/// streaming logs).
pub fn run_search(
    spec: ArchitectureSpec,
    config: SearchConfig,
    data: &SplitDataset,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<SearchResult> {
    let mut state = SearchState::new(spec, config)?;
    let mut metrics = Vec::with_capacity(state.config.epochs);
    let mut trace = vec![state.trace_row()];
    while state.epoch < state.config.epochs {
        let m = search_epoch(&mut state, data)?;
        log::info!(
            "epoch {} T={:.4} train {:.4} val {:.4} flops {:.3} binarized {:.3}",
            m.epoch,
            m.temperature,
            m.train_loss,
            m.val_loss,
            m.flops_ratio,
            m.binarized_fraction
        );
        on_epoch(&m);
        metrics.push(m);
        if state.epoch % state.config.trace_every == 0 || state.epoch == state.config.epochs {
            trace.push(state.trace_row());
        }
    }
    let keep = state.indicators.binarize(state.config.binarize);
    Ok(SearchResult {
        net: state.net,
        indicators: state.indicators,
        metrics,
        trace,
        keep,
        config: state.config,
    })
}

/// Top-1 accuracy in eval mode.
pub fn accuracy(net: &Network<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk, None);
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(&x);
        let out = net.forward(&mut tape, xv, None, Mode::Eval, false)?;
        let logits = tape.value(out.logits);
        let k = data.num_classes;
        for (row, &label) in logits.chunks_exact(k).zip(&y) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            correct += (pred == label) as usize;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    /// L1 penalty on batch-norm scales (the slimming recipe); 0 disables.
    pub bn_l1: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 0.1,
            warmup: 5,
            momentum: 0.9,
            weight_decay: 5e-5,
            augment: true,
            bn_l1: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub accuracy: f64,
}

pub struct FinetuneResult {
    /// Weights at the epoch with the best evaluation accuracy.
    pub net: Network<f32>,
    pub best_accuracy: f64,
    pub history: Vec<FinetuneEpoch>,
}

/// Trains `net` with warmup-cosine SGD, evaluating on `eval` after every
/// epoch and keeping the best weights.
pub fn finetune(
    mut net: Network<f32>,
    train: &Dataset,
    eval: &Dataset,
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(&FinetuneEpoch),
) -> Result<FinetuneResult> {
    let schedule = LrSchedule::WarmupCosine {
        lr: cfg.lr,
        warmup: cfg.warmup,
        epochs: cfg.epochs,
    };
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut rng = stream(cfg.seed, 4);
    let mut best_accuracy = accuracy(&net, eval, cfg.batch_size)?;
    let mut best = net.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.at(epoch);
        let (mut sum, mut n) = (0.0, 0usize);
        for (step, b) in batch_order(train.len(), cfg.batch_size, &mut rng).iter().enumerate() {
            let (x, y) = train.batch(b, cfg.augment.then_some(&mut rng));
            let mut tape = Tape::<f32>::new();
            let xv = tape.leaf(&x);
            let out = net.forward(&mut tape, xv, None, Mode::Train, true)?;
            let loss = tape.softmax_cross_entropy(out.logits, &y)?;
            let value = tape.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    snapshot: format!("fine-tuning loss = {value}, lr {lr}"),
                });
            }
            tape.backward_into(loss, &mut [&mut net.params])?;
            if cfg.bn_l1 > 0.0 {
                add_bn_l1(&mut net, cfg.bn_l1 as f32);
            }
            opt.step(&mut net.params, lr);
            net.update_running_stats(&out.stats);
            sum += value * b.len() as f64;
            n += b.len();
        }
        let acc = accuracy(&net, eval, cfg.batch_size)?;
        let record = FinetuneEpoch {
            epoch: epoch + 1,
            lr,
            train_loss: sum / n.max(1) as f64,
            accuracy: acc,
        };
        log::info!("finetune epoch {} lr {:.4} loss {:.4} acc {:.4}", record.epoch, lr, record.train_loss, acc);
        on_epoch(&record);
        history.push(record);
        if acc > best_accuracy {
            best_accuracy = acc;
            best = net.clone();
        }
    }
    Ok(FinetuneResult {
        net: best,
        best_accuracy,
        history,
    })
}

fn add_bn_l1(net: &mut Network<f32>, lambda: f32) {
    for p in net.params.iter_mut() {
        if !p.name.ends_with("bn.scale") {
            continue;
        }
        let signs: Vec<f32> = p.tensor.data().iter().map(|v| if *v == 0.0 { 0.0 } else { v.signum() }).collect();
        if let Some(g) = p.tensor.grad.as_mut() {
            g.iter_mut().zip(signs).for_each(|(g, s)| *g += lambda * s);
        }
    }
}

/// Fresh weights for `spec`, for retraining a derived architecture from
/// scratch instead of inheriting searched weights.
pub fn reinitialize(spec: ArchitectureSpec, seed: u64) -> Result<Network<f32>> {
    Network::init(spec, &mut stream(seed, 5))
}
