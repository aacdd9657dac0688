//! Width-sampled baselines: Random, Constrained and BN-scale slimming.

use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureSpec, Block, Shortcut};
use crate::data::Dataset;
use crate::derive::prune_spec;
use crate::error::{Error, Result};
use crate::models::Network;
use crate::search::{finetune, reinitialize, FinetuneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    Random,
    Constrained,
}

impl std::str::FromStr for SpaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SpaceKind::Random),
            "constrained" => Ok(SpaceKind::Constrained),
            other => Err(Error::Config(vec![format!("unknown design space {other:?} (expected random or constrained)")])),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSpaceConfig {
    pub kind: SpaceKind,
    pub num_instances: usize,
    /// Inclusive discrete-FLOPs band instances must fall into.
    pub flops_band: Option<(f64, f64)>,
    /// Range of the width multiplier `u`; `(0.5, 1.0)` by default.
    pub u_range: (f64, f64),
    pub seed: u64,
    /// Rejection-sampling attempts per instance before giving up.
    pub max_attempts: usize,
}

impl DesignSpaceConfig {
    pub fn new(kind: SpaceKind, num_instances: usize, seed: u64) -> Self {
        Self {
            kind,
            num_instances,
            flops_band: None,
            u_range: (0.5, 1.0),
            seed,
            max_attempts: 1000,
        }
    }
}

/// `round_half_up(c * u)` clamped to `[max(1, ceil(c / 2)), c]`.
pub fn scaled_width(c: usize, u: f64) -> usize {
    let w = (c as f64 * u + 0.5).floor() as usize;
    let lo = c.div_ceil(2).max(1);
    w.clamp(lo, c.max(lo))
}

/// Groups of sites that must share one width: components of the residual
/// pairing graph. Unpaired sites form singletons.
pub fn width_groups(spec: &ArchitectureSpec) -> Vec<Vec<usize>> {
    let n = spec.num_sites();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for &(a, b) in &spec.residual_pairs {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for s in 0..n {
        let r = find(&mut parent, s);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(s);
    }
    groups
}

/// Per-site widths of one sampled instance.
pub fn sample_widths<R: Rng + ?Sized>(spec: &ArchitectureSpec, kind: SpaceKind, u_range: (f64, f64), rng: &mut R) -> Vec<usize> {
    let mut draw = || {
        if u_range.0 >= u_range.1 {
            u_range.1
        } else {
            rng.gen_range(u_range.0..=u_range.1)
        }
    };
    let lens = spec.site_lens();
    match kind {
        SpaceKind::Random => lens.iter().map(|&c| scaled_width(c, draw())).collect(),
        SpaceKind::Constrained => {
            let mut widths = vec![0; lens.len()];
            for group in width_groups(spec) {
                let u = draw();
                for s in group {
                    widths[s] = scaled_width(lens[s], u);
                }
            }
            widths
        }
    }
}

/// Keep-masks retaining the leading `widths[s]` channels of every site.
pub fn prefix_masks(spec: &ArchitectureSpec, widths: &[usize]) -> Vec<Vec<bool>> {
    spec.sites
        .iter()
        .zip(widths)
        .map(|(site, &w)| (0..site.len).map(|i| i < w).collect())
        .collect()
}

pub fn instance_from_widths(spec: &ArchitectureSpec, widths: &[usize]) -> Result<ArchitectureSpec> {
    let (pruned, _) = prune_spec(spec, &prefix_masks(spec, widths))?;
    pruned.validate()?;
    Ok(pruned)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: usize,
    pub seed: u64,
    pub widths: Vec<usize>,
    pub flops: u64,
    #[serde(skip)]
    pub spec: Option<ArchitectureSpec>,
}

/// Draws instance `id`; reproducible from `(config.seed, id)` alone.
/// Returns `None` when no draw lands in the FLOPs band.
pub fn sample_instance(base: &ArchitectureSpec, cfg: &DesignSpaceConfig, id: usize) -> Result<Option<Instance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(id as u64 + 1);
    for _ in 0..cfg.max_attempts.max(1) {
        let widths = sample_widths(base, cfg.kind, cfg.u_range, &mut rng);
        let spec = instance_from_widths(base, &widths)?;
        let flops = spec.total_flops();
        let inside = cfg
            .flops_band
            .is_none_or(|(lo, hi)| (lo..=hi).contains(&(flops as f64)));
        if inside {
            return Ok(Some(Instance {
                id,
                seed: cfg.seed,
                widths,
                flops,
                spec: Some(spec),
            }));
        }
    }
    Ok(None)
}

pub fn sample_space(base: &ArchitectureSpec, cfg: &DesignSpaceConfig) -> Result<Vec<Instance>> {
    let mut out = Vec::with_capacity(cfg.num_instances);
    for id in 0..cfg.num_instances {
        if let Some(inst) = sample_instance(base, cfg, id)? {
            out.push(inst);
        }
    }
    Ok(out)
}

/// Channel ranking of network slimming: channels are removed globally in
/// increasing order of `|BN scale|` (summed over every layer a site masks)
/// until the discrete FLOPs reach `target`. Every site keeps at least one
/// channel.
pub fn slimming_masks(net: &Network<f32>, target: f64) -> Result<Vec<Vec<bool>>> {
    let spec = &net.spec;
    let mut score: Vec<Vec<f64>> = spec.sites.iter().map(|s| vec![0.0; s.len]).collect();
    for (s, site) in spec.sites.iter().enumerate() {
        for &l in &site.masks {
            let Some(bn) = net.layer_params(l).and_then(|p| p.bn) else {
                continue;
            };
            for (acc, g) in score[s].iter_mut().zip(net.params.get(bn.scale).tensor.data()) {
                *acc += g.abs() as f64;
            }
        }
    }
    let mut order: Vec<(usize, usize)> = score
        .iter()
        .enumerate()
        .flat_map(|(s, v)| (0..v.len()).map(move |i| (s, i)))
        .collect();
    order.sort_by(|a, b| score[a.0][a.1].total_cmp(&score[b.0][b.1]).then(a.cmp(b)));
    let mut keep: Vec<Vec<bool>> = spec.sites.iter().map(|s| vec![true; s.len]).collect();
    let mut alive: Vec<usize> = spec.site_lens();
    let flops = |keep: &[Vec<bool>]| -> Result<f64> { Ok(prune_spec(spec, keep)?.0.total_flops() as f64) };
    let mut current = flops(&keep)?;
    for (s, i) in order {
        if current <= target {
            break;
        }
        if alive[s] == 1 {
            continue;
        }
        keep[s][i] = false;
        alive[s] -= 1;
        current = flops(&keep)?;
    }
    Ok(keep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub instance: Instance,
    pub accuracy: Option<f64>,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceSummary {
    pub kind: SpaceKind,
    pub results: Vec<InstanceResult>,
    /// `"ok"` or `"no instances in band"`.
    pub status: String,
    pub best: Option<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub best_instance: Option<usize>,
}

/// Samples the space and trains every instance from scratch with the
/// fine-tuning recipe. Divergent instances are flagged and excluded from
/// the statistics. Instances are spread over `threads` workers; each has
/// its own seed, so results do not depend on the thread count.
pub fn evaluate_space(
    base: &ArchitectureSpec,
    cfg: &DesignSpaceConfig,
    train: &Dataset,
    eval: &Dataset,
    recipe: &FinetuneConfig,
    threads: usize,
) -> Result<SpaceSummary> {
    let instances = sample_space(base, cfg)?;
    let train_one = |inst: &Instance| -> Result<InstanceResult> {
        let spec = inst.spec.clone().expect("sampled instances carry their spec");
        let seed = recipe.seed ^ (inst.id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let net = reinitialize(spec, seed)?;
        let run = FinetuneConfig { seed, ..recipe.clone() };
        let (accuracy, diverged) = match finetune(net, train, eval, &run, |_| {}) {
            Ok(r) => (Some(r.best_accuracy), false),
            Err(Error::Divergence { .. }) => (None, true),
            Err(e) => return Err(e),
        };
        Ok(InstanceResult {
            instance: inst.clone(),
            accuracy,
            diverged,
        })
    };
    let threads = threads.clamp(1, instances.len().max(1));
    let chunk = instances.len().div_ceil(threads).max(1);
    let results: Vec<Result<Vec<InstanceResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = instances
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&train_one).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("space worker panicked")).collect()
    });
    let mut all = Vec::with_capacity(instances.len());
    for r in results {
        all.extend(r?);
    }
    Ok(summarize(cfg.kind, all))
}

pub fn summarize(kind: SpaceKind, results: Vec<InstanceResult>) -> SpaceSummary {
    let accs: Vec<(usize, f64)> = results
        .iter()
        .filter_map(|r| r.accuracy.map(|a| (r.instance.id, a)))
        .collect();
    if results.is_empty() {
        return SpaceSummary {
            kind,
            results,
            status: "no instances in band".into(),
            best: None,
            mean: None,
            std: None,
            best_instance: None,
        };
    }
    let n = accs.len() as f64;
    let (best_instance, best) = accs
        .iter()
        .fold((None, None), |(bi, b): (Option<usize>, Option<f64>), &(id, a)| {
            if b.is_none_or(|b| a > b) {
                (Some(id), Some(a))
            } else {
                (bi, b)
            }
        });
    let mean = (!accs.is_empty()).then(|| accs.iter().map(|a| a.1).sum::<f64>() / n);
    let std = mean.map(|m| (accs.iter().map(|a| (a.1 - m).powi(2)).sum::<f64>() / n).sqrt());
    SpaceSummary {
        kind,
        results,
        status: "ok".into(),
        best,
        mean,
        std,
        best_instance,
    }
}

impl SpaceSummary {
    /// One row per instance: id, seed, FLOPs, accuracy, then one width
    /// column per indicator site.
    pub fn to_csv(&self, base: &ArchitectureSpec) -> String {
        let mut out = String::from("instance,seed,flops,accuracy,diverged");
        for s in &base.sites {
            let _ = write!(out, ",w_{}", s.name);
        }
        out.push('\n');
        for r in &self.results {
            let acc = r.accuracy.map_or(String::new(), |a| format!("{a:.6}"));
            let _ = write!(out, "{},{},{},{acc},{}", r.instance.id, r.instance.seed, r.instance.flops, r.diverged);
            for w in &r.instance.widths {
                let _ = write!(out, ",{w}");
            }
            out.push('\n');
        }
        out
    }
}

/// Whether every identity shortcut of `spec` is a pure identity.
pub fn identity_shortcuts_intact(spec: &ArchitectureSpec) -> bool {
    spec.blocks
        .iter()
        .all(|b| !matches!(b, Block::Residual { shortcut: Shortcut::Gather(_), .. }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_resnet;
    use crate::regularizers::symmetry_value;

    #[test]
    fn width_rounding() {
        assert_eq!(scaled_width(16, 1.0), 16);
        assert_eq!(scaled_width(16, 0.5), 8);
        assert_eq!(scaled_width(5, 0.5), 3);
        assert_eq!(scaled_width(10, 0.55), 6);
        assert_eq!(scaled_width(1, 0.5), 1);
    }

    #[test]
    fn forced_upper_bound_reproduces_base() {
        let base = build_resnet(14, [8, 16, 32], 10, [1, 16, 16]).unwrap();
        for kind in [SpaceKind::Random, SpaceKind::Constrained] {
            let mut cfg = DesignSpaceConfig::new(kind, 1, 3);
            cfg.u_range = (1.0, 1.0);
            let inst = sample_instance(&base, &cfg, 0).unwrap().unwrap();
            assert_eq!(inst.spec.unwrap(), base);
        }
    }

    #[test]
    fn constrained_groups_follow_stages() {
        let base = build_resnet(20, [16, 32, 64], 10, [3, 32, 32]).unwrap();
        let groups = width_groups(&base);
        // Nine singleton first-conv sites plus one stream group per stage.
        assert_eq!(groups.len(), 12);
        assert_eq!(groups.iter().filter(|g| g.len() == 3).count(), 3);
    }

    #[test]
    fn constrained_instances_are_symmetric() {
        let base = build_resnet(20, [16, 32, 64], 10, [3, 32, 32]).unwrap();
        let cfg = DesignSpaceConfig::new(SpaceKind::Constrained, 30, 7);
        for inst in sample_space(&base, &cfg).unwrap() {
            let masks = prefix_masks(&base, &inst.widths);
            let hard: Vec<Vec<f64>> = masks.iter().map(|m| m.iter().map(|&k| k as u8 as f64).collect()).collect();
            assert_eq!(symmetry_value(&hard, &base.residual_pairs), 0.0);
        }
    }

    #[test]
    fn widths_stay_in_range_and_are_reproducible() {
        let base = build_resnet(20, [16, 32, 64], 10, [3, 32, 32]).unwrap();
        let cfg = DesignSpaceConfig::new(SpaceKind::Random, 20, 11);
        let a = sample_space(&base, &cfg).unwrap();
        for inst in &a {
            for (w, c) in inst.widths.iter().zip(base.site_lens()) {
                assert!(*w >= c.div_ceil(2) && *w <= c);
            }
        }
        let again = sample_instance(&base, &cfg, 13).unwrap().unwrap();
        assert_eq!(again.widths, a[13].widths);
    }

    #[test]
    fn empty_band_reports_status() {
        let base = build_resnet(8, [8, 16, 32], 10, [1, 16, 16]).unwrap();
        let mut cfg = DesignSpaceConfig::new(SpaceKind::Random, 3, 1);
        cfg.flops_band = Some((1.0, 2.0));
        cfg.max_attempts = 5;
        assert!(sample_space(&base, &cfg).unwrap().is_empty());
        let s = summarize(SpaceKind::Random, vec![]);
        assert_eq!(s.status, "no instances in band");
        assert!(s.best.is_none());
    }

    #[test]
    fn slimming_hits_target() {
        use rand::SeedableRng;
        let base = build_resnet(8, [8, 16, 32], 10, [1, 16, 16]).unwrap();
        let mut net = Network::<f32>::init(base.clone(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in net.params.iter_mut() {
            if p.name.ends_with("bn.scale") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
            }
        }
        let target = 0.5 * base.total_flops() as f64;
        let keep = slimming_masks(&net, target).unwrap();
        let flops = prune_spec(&base, &keep).unwrap().0.total_flops() as f64;
        assert!(flops <= target && flops > 0.4 * target);
        assert!(keep.iter().all(|m| m.iter().any(|&k| k)));
    }
}
