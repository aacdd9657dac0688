//! Browser bindings for three interactive views: the relaxed indicator and
//! its temperature schedule, the FLOPs regularizer landscape, and
//! design-space width sampling.
//!
//! Every export takes plain numbers or strings and never throws; invalid
//! input yields an empty result (or `{"error": ...}` for JSON outputs), so
//! the page can redraw on every slider move.

use anneal_prune::design_space::{sample_instance, DesignSpaceConfig, SpaceKind};
use anneal_prune::indicators::{relaxed_indicator, ScheduleKind, TemperatureSchedule};
use anneal_prune::models::build_resnet;
use anneal_prune::regularizers::{flops_regularizer_value, symmetry_value};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn linspace(lo: f64, hi: f64, points: usize) -> impl Iterator<Item = f64> {
    let step = if points > 1 { (hi - lo) / (points - 1) as f64 } else { 0.0 };
    (0..points).map(move |i| lo + step * i as f64)
}

/// `H_T(alpha)` sampled at `points` evenly spaced alphas in `[lo, hi]`.
#[wasm_bindgen]
pub fn indicator_curve(temperature: f64, lo: f64, hi: f64, points: usize) -> Vec<f64> {
    linspace(lo, hi, points)
        .map(|a| relaxed_indicator(a, temperature))
        .collect::<Result<_, _>>()
        .unwrap_or_default()
}

/// Temperature at epochs `0..=n_max` for a schedule name
/// (`linear`, `cosine`, `smallT`, `fixed`).
#[wasm_bindgen]
pub fn temperature_schedule(kind: &str, t0: f64, n_max: usize) -> Vec<f64> {
    let Ok(kind) = kind.parse::<ScheduleKind>() else {
        return Vec::new();
    };
    let Ok(s) = TemperatureSchedule::new(kind, t0, n_max) else {
        return Vec::new();
    };
    (0..=n_max)
        .map(|n| s.temperature_at(n))
        .collect::<Result<_, _>>()
        .unwrap_or_default()
}

/// `R_FLOPs(E)` for a target of `target` FLOPs, against the ratio `E / F`
/// sampled in `[lo, hi]`.
#[wasm_bindgen]
pub fn flops_regularizer_curve(target: f64, epsilon: f64, lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if !(lo > 0.0) || !(target > 0.0) || !(0.0..1.0).contains(&epsilon) {
        return Vec::new();
    }
    linspace(lo, hi, points)
        .map(|r| flops_regularizer_value(r * target, target, epsilon))
        .collect::<Result<_, _>>()
        .unwrap_or_default()
}

#[derive(Serialize)]
struct SampledInstance {
    id: usize,
    widths: Vec<usize>,
    flops_ratio: f64,
    symmetry: f64,
}

#[derive(Serialize)]
struct SampledSpace {
    model: String,
    base_flops: u64,
    sites: Vec<(String, usize)>,
    instances: Vec<SampledInstance>,
}

fn sample(kind: &str, depth: usize, count: usize, seed: u32) -> Result<SampledSpace, String> {
    let kind: SpaceKind = kind.parse().map_err(|e| format!("{e}"))?;
    let spec = build_resnet(depth, [16, 32, 64], 10, [3, 32, 32]).map_err(|e| e.to_string())?;
    let cfg = DesignSpaceConfig::new(kind, count, seed as u64);
    let base = spec.total_flops() as f64;
    let mut instances = Vec::with_capacity(count);
    for id in 0..count.min(500) {
        let Some(inst) = sample_instance(&spec, &cfg, id).map_err(|e| e.to_string())? else {
            continue;
        };
        let hard: Vec<Vec<f64>> = spec
            .sites
            .iter()
            .zip(&inst.widths)
            .map(|(s, &w)| (0..s.len).map(|c| if c < w { 1.0 } else { 0.0 }).collect())
            .collect();
        instances.push(SampledInstance {
            id,
            flops_ratio: inst.flops as f64 / base,
            symmetry: symmetry_value(&hard, &spec.residual_pairs),
            widths: inst.widths,
        });
    }
    Ok(SampledSpace {
        model: format!("resnet-{depth}"),
        base_flops: spec.total_flops(),
        sites: spec.sites.iter().map(|s| (s.name.clone(), s.len)).collect(),
        instances,
    })
}

/// Samples `count` width assignments of a CIFAR-shaped ResNet from the
/// `random` or `constrained` space; returns JSON.
#[wasm_bindgen]
pub fn sample_design_space(kind: &str, depth: usize, count: usize, seed: u32) -> String {
    match sample(kind, depth, count, seed) {
        Ok(s) => serde_json::to_string(&s).expect("sample serializes"),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}
