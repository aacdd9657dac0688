//! Structural regularizers over relaxed channel indicators.
//!
//! Each regularizer has a tape form (differentiable in the auxiliary
//! parameters) and a plain `f64` form used for logging and tests.

use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureSpec, LayerKind, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub lambda_flops: f64,
    pub epsilon: f64,
    pub lambda_sym: f64,
    pub lambda_lasso: f64,
    /// Absolute FLOPs target `F`.
    pub target_flops: f64,
}

impl RegularizerConfig {
    /// Default weights; `residual` enables the symmetry term.
    pub fn new(target_flops: f64, residual: bool) -> Self {
        Self {
            lambda_flops: 2.0,
            epsilon: 0.05,
            lambda_sym: if residual { 0.01 } else { 0.0 },
            lambda_lasso: 0.0,
            target_flops,
        }
    }

    pub fn validate(&self, unpruned_flops: f64) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            errs.push(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.target_flops > 0.0) {
            errs.push(format!("target FLOPs must be positive, got {}", self.target_flops));
        } else if self.target_flops > unpruned_flops {
            errs.push(format!(
                "target FLOPs {} exceed the unpruned model's {unpruned_flops}",
                self.target_flops
            ));
        }
        for (name, v) in [
            ("lambda_flops", self.lambda_flops),
            ("lambda_sym", self.lambda_sym),
            ("lambda_lasso", self.lambda_lasso),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        errs
    }
}

/// `sum_l sum_i H_T(alpha_l^i)`.
pub fn lasso<T: Real>(tape: &mut Tape<T>, relaxed: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &r in relaxed {
        let s = tape.sum(r);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => tape.constant(&[], vec![T::zero()]),
    }
}

pub fn lasso_value(relaxed: &[Vec<f64>]) -> f64 {
    relaxed.iter().flatten().sum()
}

/// Effective channel count entering and leaving a layer: a site sum or the
/// full width when the side is unmasked.
enum Width {
    Fixed(f64),
    Site(usize),
}

fn layer_sides(l: &LayerSpec) -> (Width, Width) {
    let side = |site: Option<usize>, full: usize| match site {
        Some(s) => Width::Site(s),
        None => Width::Fixed(full as f64),
    };
    (side(l.in_site, l.c_in), side(l.out_site, l.c_out))
}

fn check_sites(spec: &ArchitectureSpec, lens: impl Iterator<Item = usize>) -> Result<()> {
    let lens: Vec<usize> = lens.collect();
    if lens.len() != spec.num_sites() {
        return Err(Error::Site {
            site: lens.len().min(spec.num_sites()),
            detail: format!("{} indicator vectors for {} sites", lens.len(), spec.num_sites()),
        });
    }
    for (s, (len, site)) in lens.iter().zip(&spec.sites).enumerate() {
        if *len != site.len {
            return Err(Error::Site {
                site: s,
                detail: format!("{len} indicators for {} channels", site.len),
            });
        }
    }
    Ok(())
}

/// Continuous FLOPs expectation: every layer contributes
/// `h * w * k^2 * (sum of input indicators) * (sum of output indicators)`;
/// depthwise layers use their shared site once and linear layers have a
/// unit cost factor.
pub fn flops_expectation<T: Real>(tape: &mut Tape<T>, relaxed: &[Var], spec: &ArchitectureSpec) -> Result<Var> {
    check_sites(spec, relaxed.iter().map(|&v| tape.value(v).len()))?;
    let sums: Vec<Var> = relaxed.iter().map(|&r| tape.sum(r)).collect();
    let mut constant = 0.0f64;
    let mut terms: Vec<Var> = Vec::new();
    for l in &spec.layers {
        let p = l.cost_factor() as f64;
        if p == 0.0 {
            continue;
        }
        let (input, output) = layer_sides(l);
        let term = if l.kind == LayerKind::DwConv {
            match output {
                Width::Fixed(c) => {
                    constant += p * c;
                    None
                }
                Width::Site(s) => Some(tape.scale(sums[s], T::of(p))),
            }
        } else {
            match (input, output) {
                (Width::Fixed(a), Width::Fixed(b)) => {
                    constant += p * a * b;
                    None
                }
                (Width::Fixed(c), Width::Site(s)) | (Width::Site(s), Width::Fixed(c)) => {
                    Some(tape.scale(sums[s], T::of(p * c)))
                }
                (Width::Site(a), Width::Site(b)) => {
                    let prod = tape.mul(sums[a], sums[b])?;
                    Some(tape.scale(prod, T::of(p)))
                }
            }
        };
        terms.extend(term);
    }
    let mut total = tape.constant(&[], vec![T::of(constant)])?;
    for t in terms {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

pub fn flops_expectation_value(relaxed: &[Vec<f64>], spec: &ArchitectureSpec) -> Result<f64> {
    check_sites(spec, relaxed.iter().map(Vec::len))?;
    let sums: Vec<f64> = relaxed.iter().map(|r| r.iter().sum()).collect();
    let width = |w: Width| match w {
        Width::Fixed(c) => c,
        Width::Site(s) => sums[s],
    };
    Ok(spec
        .layers
        .iter()
        .map(|l| {
            let p = l.cost_factor() as f64;
            let (input, output) = layer_sides(l);
            if l.kind == LayerKind::DwConv {
                p * width(output)
            } else {
                p * width(input) * width(output)
            }
        })
        .sum())
}

/// Which branch of the FLOPs regularizer is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopsBand {
    Above,
    Inside,
    Below,
}

pub fn flops_band(e: f64, target: f64, epsilon: f64) -> Result<FlopsBand> {
    if !(e > 0.0) {
        return Err(Error::NonPositiveFlops(e));
    }
    if !(target > 0.0) {
        return Err(Error::NonPositiveFlops(target));
    }
    let ratio = e / target;
    Ok(if ratio > 1.0 {
        FlopsBand::Above
    } else if ratio < 1.0 - epsilon {
        FlopsBand::Below
    } else {
        FlopsBand::Inside
    })
}

/// `log E` above the target, `-log E` below `(1 - eps) F`, zero in between.
pub fn flops_regularizer<T: Real>(tape: &mut Tape<T>, e: Var, target: f64, epsilon: f64) -> Result<Var> {
    match flops_band(tape.scalar(e).f64(), target, epsilon)? {
        FlopsBand::Above => Ok(tape.log(e)),
        FlopsBand::Below => {
            let l = tape.log(e);
            Ok(tape.scale(l, -T::one()))
        }
        FlopsBand::Inside => tape.constant(&[], vec![T::zero()]),
    }
}

pub fn flops_regularizer_value(e: f64, target: f64, epsilon: f64) -> Result<f64> {
    Ok(match flops_band(e, target, epsilon)? {
        FlopsBand::Above => e.ln(),
        FlopsBand::Below => -e.ln(),
        FlopsBand::Inside => 0.0,
    })
}

/// `sum over residual pairs |sum_i H(alpha_in) - sum_i H(alpha_out)|`.
pub fn symmetry<T: Real>(tape: &mut Tape<T>, relaxed: &[Var], pairs: &[(usize, usize)]) -> Result<Var> {
    let mut total = tape.constant(&[], vec![T::zero()])?;
    for &(a, b) in pairs {
        let (Some(&va), Some(&vb)) = (relaxed.get(a), relaxed.get(b)) else {
            return Err(Error::Site {
                site: a.max(b),
                detail: "residual pair references a missing site".into(),
            });
        };
        let sa = tape.sum(va);
        let sb = tape.sum(vb);
        let gap = tape.sub(sa, sb)?;
        let gap = tape.abs(gap);
        total = tape.add(total, gap)?;
    }
    Ok(total)
}

pub fn symmetry_value(relaxed: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs
        .iter()
        .map(|&(a, b)| (relaxed[a].iter().sum::<f64>() - relaxed[b].iter().sum::<f64>()).abs())
        .sum()
}

/// Values of every regularizer at one indicator state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerValues {
    pub e_flops: f64,
    pub r_flops: f64,
    pub r_sym: f64,
    pub r_lasso: f64,
}

pub fn evaluate(relaxed: &[Vec<f64>], spec: &ArchitectureSpec, cfg: &RegularizerConfig) -> Result<RegularizerValues> {
    let e = flops_expectation_value(relaxed, spec)?;
    Ok(RegularizerValues {
        e_flops: e,
        r_flops: flops_regularizer_value(e, cfg.target_flops, cfg.epsilon)?,
        r_sym: symmetry_value(relaxed, &spec.residual_pairs),
        r_lasso: lasso_value(relaxed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::indicators::SiteInfo;

    fn single_conv() -> ArchitectureSpec {
        // One 3x3 16->16 conv whose input and output are both masked.
        let mut spec = ArchitectureSpec {
            family: "test".into(),
            input: [16, 32, 32],
            num_classes: 16,
            layers: vec![LayerSpec {
                kind: LayerKind::Conv,
                k: 3,
                c_in: 16,
                c_out: 16,
                stride: 1,
                h: 32,
                w: 32,
                in_site: Some(0),
                out_site: Some(1),
            }],
            blocks: Vec::new(),
            sites: vec![
                SiteInfo { name: "in".into(), len: 16, masks: vec![] },
                SiteInfo { name: "out".into(), len: 16, masks: vec![] },
            ],
            residual_pairs: Vec::new(),
        };
        spec.refresh_site_masks();
        spec
    }

    #[test]
    fn lasso_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&[2], vec![1.0, 1.0]).unwrap();
        let h = tape.sigmoid_scaled(a, 1e-9).unwrap();
        let b = tape.constant(&[3], vec![0.0; 3]).unwrap();
        let hb = tape.sigmoid_scaled(b, 1.0).unwrap();
        let l = lasso(&mut tape, &[h, hb]).unwrap();
        assert_eq!(tape.scalar(l), 2.0 + 1.5);
        let pair = tape.constant(&[2], vec![1.0, -1.0]).unwrap();
        let hp = tape.sigmoid_scaled(pair, 1.0).unwrap();
        let l = lasso(&mut tape, &[hp]).unwrap();
        assert!((tape.scalar(l) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn flops_expectation_single_conv() {
        let spec = single_conv();
        let half = vec![vec![0.5; 16], vec![0.5; 16]];
        assert_eq!(flops_expectation_value(&half, &spec).unwrap(), 589_824.0);
        let full = vec![vec![1.0; 16], vec![1.0; 16]];
        assert_eq!(flops_expectation_value(&full, &spec).unwrap(), 2_359_296.0);
        let none = vec![vec![0.0; 16], vec![0.0; 16]];
        assert_eq!(flops_expectation_value(&none, &spec).unwrap(), 0.0);

        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = half.iter().map(|h| tape.constant(&[16], h.clone()).unwrap()).collect();
        let e = flops_expectation(&mut tape, &vars, &spec).unwrap();
        assert_eq!(tape.scalar(e), 589_824.0);
    }

    #[test]
    fn flops_expectation_rejects_wrong_sites() {
        let spec = single_conv();
        assert!(matches!(
            flops_expectation_value(&[vec![1.0; 16]], &spec),
            Err(Error::Site { .. })
        ));
        assert!(matches!(
            flops_expectation_value(&[vec![1.0; 16], vec![1.0; 15]], &spec),
            Err(Error::Site { site: 1, .. })
        ));
    }

    #[test]
    fn flops_regularizer_goldens() {
        let f = 1e6;
        assert_eq!(flops_regularizer_value(f, f, 0.05).unwrap(), 0.0);
        assert_eq!(flops_regularizer_value(0.95 * f, f, 0.05).unwrap(), 0.0);
        assert!((flops_regularizer_value(2.0 * f, f, 0.05).unwrap() - 2e6f64.ln()).abs() < 1e-9);
        assert!((flops_regularizer_value(2.0 * f, f, 0.05).unwrap() - 14.508_657_738_524_219).abs() < 1e-9);
        assert!((flops_regularizer_value(0.5 * f, f, 0.05).unwrap() + 13.122_363_377_404_328).abs() < 1e-9);
        assert!(matches!(flops_regularizer_value(0.0, f, 0.05), Err(Error::NonPositiveFlops(_))));
    }

    #[test]
    fn symmetry_goldens() {
        let same = vec![vec![0.3, 0.9], vec![0.3, 0.9]];
        assert_eq!(symmetry_value(&same, &[(0, 1)]), 0.0);
        let gap = vec![vec![1.0, 1.0, 1.0], vec![1.0; 5]];
        assert_eq!(symmetry_value(&gap, &[(0, 1)]), 2.0);
        let two = vec![vec![1.0, 1.0, 1.0], vec![1.0; 5], vec![0.5, 0.5], vec![0.5]];
        assert_eq!(symmetry_value(&two, &[(0, 1), (2, 3)]), 2.5);

        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = two.iter().map(|v| tape.constant(&[v.len()], v.clone()).unwrap()).collect();
        let s = symmetry(&mut tape, &vars, &[(0, 1), (2, 3)]).unwrap();
        assert_eq!(tape.scalar(s), 2.5);
    }

    #[test]
    fn symmetry_subgradient_is_zero_at_equality() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&crate::tensor::Tensor::new(&[2], vec![0.4, 0.6]).unwrap().with_grad());
        let b = tape.leaf(&crate::tensor::Tensor::new(&[2], vec![0.5, 0.5]).unwrap().with_grad());
        let s = symmetry(&mut tape, &[a, b], &[(0, 1)]).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = RegularizerConfig::new(2e6, true);
        assert!(cfg.validate(3e6).is_empty());
        cfg.epsilon = 1.5;
        cfg.target_flops = 4e6;
        assert_eq!(cfg.validate(3e6).len(), 2);
    }

    proptest::proptest! {
        #[test]
        fn symmetry_is_permutation_invariant(
            a in proptest::collection::vec(0.0f64..1.0, 6),
            b in proptest::collection::vec(0.0f64..1.0, 6),
            rot in 0usize..6,
        ) {
            let base = symmetry_value(&[a.clone(), b.clone()], &[(0, 1)]);
            let mut ar = a.clone();
            ar.rotate_left(rot);
            let mut br = b.clone();
            br.reverse();
            let permuted = symmetry_value(&[ar, br], &[(0, 1)]);
            proptest::prop_assert!((base - permuted).abs() < 1e-12);
        }

        #[test]
        fn dead_zone_is_closed(frac in 0.0f64..=1.0) {
            let f = 3.7e6;
            let eps = 0.05;
            let e = f * (1.0 - eps + eps * frac);
            proptest::prop_assert_eq!(flops_regularizer_value(e, f, eps).unwrap(), 0.0);
        }
    }
}
