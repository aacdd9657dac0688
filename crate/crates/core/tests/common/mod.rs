//! Central finite-difference gradient checks shared by the gradient and
//! acceptance suites.

#![allow(dead_code)]

use anneal_prune::arch::ArchitectureSpec;
use anneal_prune::indicators::{relaxed_indicator, relaxed_indicator_grad};
use anneal_prune::models::{build_mobilenet_with, build_resnet, plain_net};
use anneal_prune::regularizers;
use anneal_prune::tensor::{NormMode, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const SEEDS: u64 = 20;
pub const REL_TOL: f64 = 1e-3;
/// Coordinates whose gradient is numerically zero are compared absolutely.
const ABS_FLOOR: f64 = 1e-8;
const STEP: f64 = 1e-6;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

#[derive(Default)]
pub struct Tally {
    pub pass: usize,
    pub total: usize,
    pub worst: f64,
}

impl Tally {
    pub fn fraction(&self) -> f64 {
        self.pass as f64 / self.total as f64
    }

    pub fn assert(&self, name: &str) {
        let frac = self.pass as f64 / self.total as f64;
        println!("{name}: {}/{} coordinates within {REL_TOL} (worst {:.2e})", self.pass, self.total, self.worst);
        assert!(frac >= 0.95, "{name}: only {:.1}% of coordinates agree", 100.0 * frac);
    }
}

/// Compares tape gradients of `f(inputs)` with central differences. A
/// non-scalar output is contracted with a fixed random projection.
pub fn check<F>(tally: &mut Tally, rng: &mut ChaCha8Rng, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor<f64>], proj: Option<&[f64]>, track: bool| -> (f64, Vec<Vec<f64>>, Vec<f64>) {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let t = if track { t.clone().with_grad() } else { t.clone() };
                tape.leaf(&t)
            })
            .collect();
        let out = f(&mut tape, &vars);
        let n = tape.value(out).len();
        let proj: Vec<f64> = proj.map_or_else(|| vec![1.0; n], <[f64]>::to_vec);
        let loss = if n == 1 {
            tape.scale(out, proj[0])
        } else {
            let shape = tape.shape(out).to_vec();
            let p = tape.constant(&shape, proj.clone()).unwrap();
            let m = tape.mul(out, p).unwrap();
            tape.sum(m)
        };
        let value = tape.scalar(loss);
        let grads = if track {
            let g = tape.backward(loss).unwrap();
            vars.iter()
                .zip(inputs)
                .map(|(v, t)| g.get(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
                .collect()
        } else {
            Vec::new()
        };
        (value, grads, proj)
    };
    // Output size, to draw the projection.
    let (_, _, ones) = eval(inputs, None, false);
    let proj: Vec<f64> = (0..ones.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, analytic, _) = eval(inputs, Some(&proj), true);
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x = input.data()[j];
            let h = STEP * x.abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] = x + h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] = x - h;
            let numeric = (eval(&plus, Some(&proj), false).0 - eval(&minus, Some(&proj), false).0) / (2.0 * h);
            let a = analytic[i][j];
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let ok = err <= REL_TOL * scale || err <= ABS_FLOOR;
            if scale > ABS_FLOOR {
                tally.worst = tally.worst.max(err / scale);
            }
            tally.pass += ok as usize;
            tally.total += 1;
        }
    }
}

/// Runs `case` for every seed and returns the combined tally.
pub fn over_seeds(mut case: impl FnMut(&mut Tally, &mut ChaCha8Rng)) -> Tally {
    let mut tally = Tally::default();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        case(&mut tally, &mut rng);
    }
    tally
}


pub type Case = Box<dyn Fn(&mut Tally, &mut ChaCha8Rng)>;

fn site_inputs(rng: &mut ChaCha8Rng, spec: &ArchitectureSpec) -> Vec<Tensor<f64>> {
    spec.sites.iter().map(|s| uniform(rng, &[s.len], 0.05, 0.95)).collect()
}

/// Every differentiable tape operation and regularizer, by name.
pub fn cases() -> Vec<(String, Case)> {
    let mut out: Vec<(String, Case)> = Vec::new();
    let mut add = |name: &str, case: Case| out.push((name.to_string(), case));
    for stride in [1, 2] {
        add(
            &format!("conv2d stride {stride}"),
            Box::new(move |t, rng| {
                let x = randn(rng, &[2, 3, 5, 5]);
                let w = randn(rng, &[3, 3, 3, 4]);
                check(t, rng, &[x, w], |tape, v| tape.conv2d(v[0], v[1], stride, 1, "c").unwrap());
            }),
        );
        add(
            &format!("depthwise conv stride {stride}"),
            Box::new(move |t, rng| {
                let x = randn(rng, &[2, 3, 5, 5]);
                let w = randn(rng, &[3, 3, 1, 3]);
                check(t, rng, &[x, w], |tape, v| tape.depthwise_conv2d(v[0], v[1], stride, 1, "d").unwrap());
            }),
        );
    }
    add(
        "conv2d 1x1",
        Box::new(|t, rng| {
            let x = randn(rng, &[2, 3, 4, 4]);
            let w = randn(rng, &[1, 1, 3, 2]);
            check(t, rng, &[x, w], |tape, v| tape.conv2d(v[0], v[1], 2, 0, "c").unwrap());
        }),
    );
    add(
        "batch norm (train)",
        Box::new(|t, rng| {
            let x = randn(rng, &[4, 3, 2, 2]);
            let g = randn(rng, &[3]);
            let b = randn(rng, &[3]);
            check(t, rng, &[x, g, b], |tape, v| tape.batch_norm(v[0], v[1], v[2], NormMode::Train, "bn").unwrap().0);
        }),
    );
    add(
        "batch norm (eval)",
        Box::new(|t, rng| {
            let x = randn(rng, &[2, 3, 2, 2]);
            let g = randn(rng, &[3]);
            let b = randn(rng, &[3]);
            let mean = randn(rng, &[3]).into_data();
            let var = uniform(rng, &[3], 0.5, 2.0).into_data();
            check(t, rng, &[x, g, b], |tape, v| {
                tape.batch_norm(v[0], v[1], v[2], NormMode::Eval { mean: &mean, var: &var }, "bn")
                    .unwrap()
                    .0
            });
        }),
    );
    add(
        "relu",
        Box::new(|t, rng| {
            let x = randn(rng, &[3, 4]);
            check(t, rng, &[x], |tape, v| tape.relu(v[0]));
        }),
    );
    add(
        "add / sub / mul / scale",
        Box::new(|t, rng| {
            let a = randn(rng, &[2, 3]);
            let b = randn(rng, &[2, 3]);
            check(t, rng, &[a, b], |tape, v| {
                let s = tape.add(v[0], v[1]).unwrap();
                let d = tape.sub(v[0], v[1]).unwrap();
                let m = tape.mul(s, d).unwrap();
                tape.scale(m, 0.7)
            });
        }),
    );
    add(
        "log",
        Box::new(|t, rng| {
            let x = uniform(rng, &[5], 0.2, 3.0);
            check(t, rng, &[x], |tape, v| tape.log(v[0]));
        }),
    );
    add(
        "abs",
        Box::new(|t, rng| {
            let x = randn(rng, &[6]);
            check(t, rng, &[x], |tape, v| tape.abs(v[0]));
        }),
    );
    add(
        "sum",
        Box::new(|t, rng| {
            let x = randn(rng, &[2, 3, 2]);
            check(t, rng, &[x], |tape, v| tape.sum(v[0]));
        }),
    );
    add(
        "channel mask",
        Box::new(|t, rng| {
            let x = randn(rng, &[2, 3, 2, 2]);
            let m = uniform(rng, &[3], 0.0, 1.0);
            check(t, rng, &[x, m], |tape, v| tape.channel_mask(v[0], v[1], "s").unwrap());
        }),
    );
    add(
        "gather channels",
        Box::new(|t, rng| {
            let x = randn(rng, &[2, 3, 2, 2]);
            check(t, rng, &[x], |tape, v| tape.gather_channels(v[0], &[Some(2), None, Some(0), Some(2)]).unwrap());
        }),
    );
    add(
        "global average pool",
        Box::new(|t, rng| {
            let x = randn(rng, &[2, 3, 3, 3]);
            check(t, rng, &[x], |tape, v| tape.global_avg_pool(v[0]));
        }),
    );
    add(
        "linear",
        Box::new(|t, rng| {
            let x = randn(rng, &[3, 4]);
            let w = randn(rng, &[4, 5]);
            let b = randn(rng, &[5]);
            check(t, rng, &[x, w, b], |tape, v| tape.linear(v[0], v[1], Some(v[2]), "fc").unwrap());
        }),
    );
    add(
        "softmax cross-entropy",
        Box::new(|t, rng| {
            let logits = randn(rng, &[4, 5]);
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            check(t, rng, &[logits], |tape, v| tape.softmax_cross_entropy(v[0], &labels).unwrap());
        }),
    );
    add(
        "relaxed indicator (tape)",
        Box::new(|t, rng| {
            let temp = rng.gen_range(0.05..2.0);
            let x = Tensor::new(&[6], (0..6).map(|_| rng.gen_range(-3.0..3.0) * temp).collect()).unwrap();
            check(t, rng, &[x], |tape, v| tape.sigmoid_scaled(v[0], temp).unwrap());
        }),
    );
    for spec in [
        build_resnet(8, [2, 3, 4], 3, [1, 8, 8]).unwrap(),
        plain_net(&[2, 6, 6], &[3, 4, 4], 3).unwrap(),
        build_mobilenet_with(2, &[(3, 1), (4, 2)], 1.0, 3, [1, 8, 8]).unwrap(),
    ] {
        add(
            &format!("flops expectation ({})", spec.family),
            Box::new(move |t, rng| {
                let inputs = site_inputs(rng, &spec);
                let scale = 1.0 / spec.total_flops() as f64;
                check(t, rng, &inputs, |tape, v| {
                    let e = regularizers::flops_expectation(tape, v, &spec).unwrap();
                    // Keep the value O(1) so the relative test is meaningful.
                    tape.scale(e, scale)
                });
            }),
        );
    }
    // E well above, inside and well below the band [(1 - eps) F, F].
    for (label, lo, hi) in [("above", 1.2, 3.0), ("inside", 0.96, 0.99), ("below", 0.2, 0.9)] {
        add(
            &format!("flops regularizer ({label})"),
            Box::new(move |t, rng| {
                let target = 100.0;
                let e = Tensor::new(&[], vec![target * rng.gen_range(lo..hi)]).unwrap();
                check(t, rng, &[e], |tape, v| regularizers::flops_regularizer(tape, v[0], target, 0.05).unwrap());
            }),
        );
    }
    let spec = build_resnet(14, [3, 3, 4], 3, [1, 8, 8]).unwrap();
    let pairs = spec.residual_pairs.clone();
    assert!(!pairs.is_empty());
    let s1 = spec.clone();
    add(
        "symmetry",
        Box::new(move |t, rng| {
            let inputs = site_inputs(rng, &s1);
            check(t, rng, &inputs, |tape, v| regularizers::symmetry(tape, v, &pairs).unwrap());
        }),
    );
    add(
        "lasso",
        Box::new(move |t, rng| {
            let inputs = site_inputs(rng, &spec);
            check(t, rng, &inputs, |tape, v| regularizers::lasso(tape, v).unwrap());
        }),
    );
    out
}

/// Worst relative error of the closed-form `dH_T/dalpha` against central
/// differences over random `(alpha, T)` draws.
pub fn relaxed_indicator_scalar_worst() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let t: f64 = rng.gen_range(0.02..2.0);
            let alpha: f64 = rng.gen_range(-4.0..4.0) * t;
            let h = 1e-5 * t;
            let numeric = (relaxed_indicator(alpha + h, t).unwrap() - relaxed_indicator(alpha - h, t).unwrap()) / (2.0 * h);
            let analytic = relaxed_indicator_grad(alpha, t).unwrap();
            worst = worst.max((numeric - analytic).abs() / analytic.abs());
        }
    }
    worst
}
