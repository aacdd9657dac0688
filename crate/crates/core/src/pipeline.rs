//! Run directories: every command reads and writes artifacts under one
//! directory whose `manifest.json` records the configuration, seed,
//! artifact paths and timestamps.
//!
//! ```text
//! run/
//!   config.toml  manifest.json
//!   search/    metrics.ndjson  trace.csv  alphas.json  arch.txt  weights.bin
//!   derived/   arch.txt  weights.bin  provenance.json  flops.csv  flops.json
//!   finetune/  metrics.ndjson  arch.txt  weights.bin  provenance.json
//!   baseline/  metrics.ndjson  arch.txt  weights.bin
//!   eval.json  report.csv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::ArchitectureSpec;
use crate::data::Dataset;
use crate::config::{prepare_data, PreparedData, RunConfig};
use crate::derive::{self, PrunedModel, ARCH_FILE, WEIGHTS_FILE};
use crate::design_space::{self, DesignSpaceConfig, SpaceKind, SpaceSummary};
use crate::error::{Error, Result};
use crate::flops::{discrete_flops, FlopsReport};
use crate::models::Network;
use crate::search::{self, accuracy, EpochMetrics, FinetuneEpoch, SearchResult, TraceRow};
use crate::weights;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEvent {
    pub command: String,
    /// RFC 3339.
    pub at: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub created: String,
    pub updated: String,
    pub seed: u64,
    pub config: RunConfig,
    pub dataset_checksum: String,
    pub threads: usize,
    /// Artifact name -> path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    pub events: Vec<ManifestEvent>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl RunManifest {
    pub fn new(config: RunConfig, dataset_checksum: String, threads: usize) -> Self {
        let t = now();
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            created: t.clone(),
            updated: t,
            seed: config.seed,
            config,
            dataset_checksum,
            threads,
            artifacts: BTreeMap::new(),
            events: Vec::new(),
        }
    }

    pub fn load(run: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_text(&run.join(MANIFEST_FILE))?)?)
    }

    pub fn save(&self, run: &Path) -> Result<()> {
        write_file(&run.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)
    }

    fn record(&mut self, command: &str, artifacts: &[(&str, &str)]) {
        let t = now();
        self.updated = t.clone();
        self.events.push(ManifestEvent {
            command: command.into(),
            at: t,
        });
        for (k, v) in artifacts {
            self.artifacts.insert((*k).into(), (*v).into());
        }
    }

    pub fn artifact(&self, run: &Path, name: &str) -> Result<PathBuf> {
        self.artifacts
            .get(name)
            .map(|p| run.join(p))
            .ok_or_else(|| Error::Config(vec![format!("run {}: no {name} artifact yet", run.display())]))
    }
}

/// Saves a network as `arch.txt` + `weights.bin` under `dir`.
pub fn save_network(net: &Network<f32>, dir: &Path) -> Result<()> {
    write_file(&dir.join(ARCH_FILE), net.spec.to_text())?;
    weights::save(&net.params, &dir.join(WEIGHTS_FILE))
}

pub fn load_network(dir: &Path) -> Result<Network<f32>> {
    let spec = ArchitectureSpec::from_text(&read_text(&dir.join(ARCH_FILE))?)?;
    Network::from_parts(spec, weights::load(&dir.join(WEIGHTS_FILE))?)
}

/// Final indicator state of a search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSnapshot {
    pub temperature: f64,
    pub alphas: Vec<Vec<f32>>,
    pub keep: Vec<Vec<bool>>,
}

pub fn metrics_ndjson<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// `epoch,temperature,<one column per main-path convolution>`.
pub fn trace_csv(spec: &ArchitectureSpec, trace: &[TraceRow]) -> String {
    let mut out = String::from("epoch,temperature");
    for &l in &spec.main_path_convs() {
        let _ = write!(out, ",l{l}_{}", spec.layers[l].kind.as_str());
    }
    out.push('\n');
    for row in trace {
        let _ = write!(out, "{},{}", row.epoch, row.temperature);
        for c in &row.counts {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

/// What a dry run reports before any training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DryRun {
    pub model: String,
    pub parameters: usize,
    pub flops: u64,
    pub target_flops: f64,
    pub sites: Vec<(String, usize)>,
    pub residual_pairs: usize,
    pub train_examples: usize,
    pub val_examples: usize,
    pub eval_examples: usize,
    pub dataset_checksum: String,
}

/// Validates everything a search needs without training.
pub fn dry_run(cfg: &RunConfig) -> Result<DryRun> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let spec = cfg.build_spec()?;
    cfg.search_config(&spec)?;
    let data = prepare_data(cfg)?;
    Ok(DryRun {
        model: spec.family.clone(),
        parameters: spec.num_parameters(),
        flops: spec.total_flops(),
        target_flops: cfg.target_flops(&spec),
        sites: spec.sites.iter().map(|s| (s.name.clone(), s.len)).collect(),
        residual_pairs: spec.residual_pairs.len(),
        train_examples: data.split.train.len(),
        val_examples: data.split.val.len(),
        eval_examples: data.eval.len(),
        dataset_checksum: fingerprint(&data.train),
    })
}

/// The corpus file checksum, or a checksum of the generated examples.
fn fingerprint(data: &Dataset) -> String {
    data.checksum.clone().unwrap_or_else(|| {
        let mut bytes: Vec<u8> = data.images.iter().flat_map(|v| v.to_le_bytes()).collect();
        bytes.extend(data.labels.iter().flat_map(|&l| (l as u32).to_le_bytes()));
        crate::data::checksum(&bytes)
    })
}

fn prepared(cfg: &RunConfig) -> Result<(ArchitectureSpec, PreparedData)> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    Ok((cfg.build_spec()?, prepare_data(cfg)?))
}

/// Runs the search and writes `config.toml`, `manifest.json` and `search/`.
pub fn cmd_search(cfg: &RunConfig, run: &Path, threads: usize) -> Result<SearchResult> {
    let (spec, data) = prepared(cfg)?;
    let sc = cfg.search_config(&spec)?;
    let mut manifest = RunManifest::new(cfg.clone(), fingerprint(&data.train), threads);
    write_file(&run.join(CONFIG_FILE), cfg.to_toml())?;
    manifest.record("search:start", &[("config", CONFIG_FILE)]);
    manifest.save(run)?;

    // Stream metrics so a long run can be followed (and survives a crash).
    let metrics_path = run.join("search/metrics.ndjson");
    write_file(&metrics_path, "")?;
    let mut file = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut io_err = None;
    let result = search::run_search(spec.clone(), sc, &data.split, |m: &EpochMetrics| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(file, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::io(&metrics_path, e));
    }

    write_file(&run.join("search/trace.csv"), trace_csv(&spec, &result.trace))?;
    let snap = AlphaSnapshot {
        temperature: result.indicators.temperature(),
        alphas: result.indicators.alphas(),
        keep: result.keep.clone(),
    };
    write_file(&run.join("search/alphas.json"), serde_json::to_string(&snap)?)?;
    save_network(&result.net, &run.join("search"))?;
    manifest.record(
        "search",
        &[
            ("search_metrics", "search/metrics.ndjson"),
            ("trace", "search/trace.csv"),
            ("alphas", "search/alphas.json"),
            ("supernet", "search"),
        ],
    );
    manifest.save(run)?;
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeriveOutcome {
    pub flops: FlopsReport,
    pub site_widths: Vec<usize>,
    pub max_deviation: f64,
}

/// Derives the pruned network from a finished search.
pub fn cmd_derive(run: &Path) -> Result<DeriveOutcome> {
    let mut manifest = RunManifest::load(run)?;
    let supernet = load_network(&manifest.artifact(run, "supernet")?)?;
    let snap: AlphaSnapshot = serde_json::from_str(&read_text(&manifest.artifact(run, "alphas")?)?)?;
    let pruned = derive::derive(&supernet, &snap.keep)?;
    let data = prepare_data(&manifest.config)?;
    let n = data.eval.len().min(32);
    let (x, _) = data.eval.batch(&(0..n).collect::<Vec<_>>(), None);
    let max_deviation = derive::verify_equivalence(&pruned, &supernet, &snap.keep, &x)?;
    log::info!("pruned model matches the masked supernet to {max_deviation:.2e}");

    let dir = run.join("derived");
    pruned.save(&dir)?;
    let report = discrete_flops(&pruned.net.spec).relative_to(supernet.spec.total_flops());
    write_file(&dir.join("flops.csv"), report.to_csv(&pruned.net.spec))?;
    let outcome = DeriveOutcome {
        site_widths: pruned.site_widths(),
        flops: report,
        max_deviation,
    };
    write_file(&dir.join("flops.json"), serde_json::to_string_pretty(&outcome)?)?;
    manifest.record("derive", &[("derived", "derived"), ("flops", "derived/flops.json")]);
    manifest.save(run)?;
    Ok(outcome)
}

/// Fine-tunes the derived network (or retrains it from fresh weights).
pub fn cmd_finetune(run: &Path, scratch: bool, epochs: Option<usize>) -> Result<f64> {
    let mut manifest = RunManifest::load(run)?;
    let cfg = manifest.config.clone();
    let mut pruned = PrunedModel::load(&manifest.artifact(run, "derived")?)?;
    let data = prepare_data(&cfg)?;
    let mut ft = cfg.finetune_config();
    if let Some(e) = epochs {
        ft.epochs = e;
    }
    if scratch || cfg.finetune.scratch {
        pruned.net = search::reinitialize(pruned.net.spec.clone(), cfg.seed)?;
    }
    let mut rows: Vec<FinetuneEpoch> = Vec::new();
    let result = search::finetune(pruned.net, &data.train, &data.eval, &ft, |e| rows.push(e.clone()))?;
    let out = PrunedModel {
        net: result.net,
        provenance: pruned.provenance,
    };
    let dir = run.join("finetune");
    out.save(&dir)?;
    write_file(&dir.join("metrics.ndjson"), metrics_ndjson(&rows)?)?;
    manifest.record("finetune", &[("finetuned", "finetune"), ("finetune_metrics", "finetune/metrics.ndjson")]);
    manifest.save(run)?;
    Ok(result.best_accuracy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub unpruned_accuracy: f64,
    pub pruned_accuracy: f64,
    /// Unpruned minus pruned accuracy, in percentage points.
    pub acc_drop: f64,
    pub unpruned_flops: u64,
    pub pruned_flops: u64,
    pub pruning_ratio: f64,
}

/// Evaluates the fine-tuned network against an unpruned baseline trained
/// with the same recipe. The baseline is trained once and cached in the run.
pub fn cmd_eval(run: &Path) -> Result<EvalReport> {
    let mut manifest = RunManifest::load(run)?;
    let cfg = manifest.config.clone();
    let data = prepare_data(&cfg)?;
    let ft = cfg.finetune_config();
    let baseline = match manifest.artifacts.get("baseline") {
        Some(p) => load_network(&run.join(p))?,
        None => {
            let spec = cfg.build_spec()?;
            let net = search::reinitialize(spec, cfg.seed)?;
            let mut rows = Vec::new();
            let trained = search::finetune(net, &data.train, &data.eval, &ft, |e| rows.push(e.clone()))?.net;
            save_network(&trained, &run.join("baseline"))?;
            write_file(&run.join("baseline/metrics.ndjson"), metrics_ndjson(&rows)?)?;
            manifest.record("eval:baseline", &[("baseline", "baseline")]);
            trained
        }
    };
    let pruned_dir = manifest
        .artifact(run, "finetuned")
        .or_else(|_| manifest.artifact(run, "derived"))?;
    let pruned = load_network(&pruned_dir)?;
    let unpruned_accuracy = accuracy(&baseline, &data.eval, ft.batch_size)?;
    let pruned_accuracy = accuracy(&pruned, &data.eval, ft.batch_size)?;
    let flops = discrete_flops(&pruned.spec).relative_to(baseline.spec.total_flops());
    let report = EvalReport {
        model: baseline.spec.family.clone(),
        unpruned_accuracy,
        pruned_accuracy,
        acc_drop: 100.0 * (unpruned_accuracy - pruned_accuracy),
        unpruned_flops: baseline.spec.total_flops(),
        pruned_flops: flops.total,
        pruning_ratio: flops.pruning_ratio(),
    };
    write_file(&run.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    manifest.record("eval", &[("eval", "eval.json")]);
    manifest.save(run)?;
    Ok(report)
}

/// CSV plus a fixed-width table with the columns
/// `Model | Pruning Acc | Acc Drop | FLOPs (pruning ratio)`.
pub fn cmd_report(runs: &[PathBuf]) -> Result<(String, String)> {
    let mut csv = String::from("run,model,baseline_acc,pruning_acc,acc_drop,flops,pruning_ratio\n");
    let mut table = format!("{:<24} {:<12} {:>11} {:>9} {:>22}\n", "Run", "Model", "Pruning Acc", "Acc Drop", "FLOPs (pruning ratio)");
    for run in runs {
        let r: EvalReport = serde_json::from_str(&read_text(&run.join("eval.json"))?)?;
        let name = run.file_name().map_or_else(|| run.display().to_string(), |n| n.to_string_lossy().into_owned());
        let _ = writeln!(
            csv,
            "{name},{},{:.4},{:.4},{:.2},{},{:.4}",
            r.model, r.unpruned_accuracy, r.pruned_accuracy, r.acc_drop, r.pruned_flops, r.pruning_ratio
        );
        let flops = FlopsReport {
            per_layer: Vec::new(),
            total: r.pruned_flops,
            ratio_vs_unpruned: 1.0 - r.pruning_ratio,
        };
        let _ = writeln!(
            table,
            "{name:<24} {:<12} {:>10.2}% {:>9.2} {:>22}",
            r.model,
            100.0 * r.pruned_accuracy,
            r.acc_drop,
            flops.summary()
        );
    }
    Ok((csv, table))
}

/// Samples and trains a design space, writing `summary.json` and
/// `instances.csv` under `out`.
pub fn cmd_space(cfg: &RunConfig, space: &DesignSpaceConfig, out: &Path, threads: usize) -> Result<SpaceSummary> {
    let (spec, data) = prepared(cfg)?;
    let recipe = cfg.finetune_config();
    let summary = design_space::evaluate_space(&spec, space, &data.train, &data.eval, &recipe, threads)?;
    write_file(&out.join("instances.csv"), summary.to_csv(&spec))?;
    write_file(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Space config with the FLOPs band given as fractions of the base model.
pub fn space_config(kind: SpaceKind, n: usize, seed: u64, band: Option<(f64, f64)>, spec: &ArchitectureSpec) -> DesignSpaceConfig {
    let mut c = DesignSpaceConfig::new(kind, n, seed);
    c.flops_band = band.map(|(lo, hi)| {
        let total = spec.total_flops() as f64;
        (lo * total, hi * total)
    });
    c
}
