//! Exact multiply-accumulate counting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::arch::ArchitectureSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    /// `(layer index, FLOPs)` for every layer, pooling included at 0.
    pub per_layer: Vec<(usize, u64)>,
    pub total: u64,
    /// `total / unpruned total`; 1 when the reference is empty.
    pub ratio_vs_unpruned: f64,
}

/// Discrete FLOPs of `spec`; the ratio is taken against itself (1.0).
pub fn discrete_flops(spec: &ArchitectureSpec) -> FlopsReport {
    let per_layer: Vec<(usize, u64)> = spec.layers.iter().enumerate().map(|(i, l)| (i, l.flops())).collect();
    let total = per_layer.iter().map(|&(_, f)| f).sum();
    FlopsReport {
        per_layer,
        total,
        ratio_vs_unpruned: 1.0,
    }
}

impl FlopsReport {
    /// Sets the ratio against an unpruned total.
    pub fn relative_to(mut self, unpruned_total: u64) -> Self {
        self.ratio_vs_unpruned = if unpruned_total == 0 {
            1.0
        } else {
            self.total as f64 / unpruned_total as f64
        };
        self
    }

    /// Fraction of FLOPs removed, `1 - ratio`.
    pub fn pruning_ratio(&self) -> f64 {
        1.0 - self.ratio_vs_unpruned
    }

    /// Compact `"1.01E8 (60.0%)"` form: total followed by the pruning ratio.
    pub fn summary(&self) -> String {
        format!("{} ({:.1}%)", sci(self.total as f64), 100.0 * self.pruning_ratio())
    }

    pub fn to_csv(&self, spec: &ArchitectureSpec) -> String {
        let mut out = String::from("layer,kind,k,c_in,c_out,h,w,flops\n");
        for &(i, f) in &self.per_layer {
            let l = &spec.layers[i];
            let _ = writeln!(out, "{i},{},{},{},{},{},{},{f}", l.kind.as_str(), l.k, l.c_in, l.c_out, l.h, l.w);
        }
        let _ = writeln!(out, "total,,,,,,,{}", self.total);
        out
    }
}

/// Scientific notation with two decimals and an upper-case exponent.
pub fn sci(v: f64) -> String {
    if v == 0.0 {
        return "0.00E0".into();
    }
    let s = format!("{v:.2e}");
    s.replace('e', "E")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_resnet;

    #[test]
    fn report_totals() {
        let spec = build_resnet(20, [16, 32, 64], 10, [3, 32, 32]).unwrap();
        let r = discrete_flops(&spec);
        assert_eq!(r.total, r.per_layer.iter().map(|p| p.1).sum::<u64>());
        assert_eq!(r.total, spec.total_flops());
        assert_eq!(r.ratio_vs_unpruned, 1.0);
        assert_eq!(r.clone().relative_to(r.total * 2).ratio_vs_unpruned, 0.5);
        assert!(r.to_csv(&spec).lines().count() == spec.layers.len() + 2);
    }

    #[test]
    fn summary_format() {
        let r = FlopsReport {
            per_layer: vec![],
            total: 101_000_000,
            ratio_vs_unpruned: 0.4,
        };
        assert_eq!(r.summary(), "1.01E8 (60.0%)");
        assert_eq!(sci(0.0), "0.00E0");
    }

    #[test]
    fn empty_spec_has_zero_flops() {
        let mut spec = build_resnet(8, [4, 4, 4], 2, [1, 8, 8]).unwrap();
        spec.layers.clear();
        assert_eq!(discrete_flops(&spec).total, 0);
    }
}
