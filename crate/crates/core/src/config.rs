//! Declarative run configuration (TOML).
//!
//! ```toml
//! seed = 0
//!
//! [model]
//! family = "resnet"          # resnet | mobilenet
//! depth = 8
//! widths = [8, 16, 32]
//!
//! [dataset]
//! kind = "synthetic"         # synthetic | idx | csv
//!
//! [search]
//! epochs = 50
//! batch_size = 64
//!
//! [regularizers]
//! target_fraction = 0.6      # or target_flops = 1.5e7
//!
//! [finetune]
//! epochs = 30
//! ```
//!
//! Every field has a default except the FLOPs target; see `docs/config.md`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::ArchitectureSpec;
use crate::data::{self, CorpusFormat, Dataset, SplitDataset, SyntheticTask};
use crate::error::{Error, Result};
use crate::indicators::ScheduleKind;
use crate::models::{build_mobilenet, build_resnet};
use crate::regularizers::RegularizerConfig;
use crate::search::{FinetuneConfig, SearchConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub search: SearchSection,
    pub regularizers: RegSection,
    pub finetune: FinetuneSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            dataset: DatasetConfig::default(),
            search: SearchSection::default(),
            regularizers: RegSection::default(),
            finetune: FinetuneSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: String,
    pub depth: usize,
    pub widths: Vec<usize>,
    pub width_multiplier: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: "resnet".into(),
            depth: 8,
            widths: vec![8, 16, 32],
            width_multiplier: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: String,
    /// Training corpus for `idx` / `csv`.
    pub path: Option<PathBuf>,
    /// Held-out corpus for `idx` / `csv`; without it the split's
    /// validation half doubles as the evaluation set.
    pub test_path: Option<PathBuf>,
    /// `(C, H, W)`, required for `csv` unless rows are square one-channel images.
    pub shape: Option<[usize; 3]>,
    pub num_classes: usize,
    pub examples_per_class: usize,
    pub test_examples_per_class: usize,
    pub image_size: usize,
    pub noise: f64,
    pub split_ratio: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: "synthetic".into(),
            path: None,
            test_path: None,
            shape: None,
            num_classes: 10,
            examples_per_class: 100,
            test_examples_per_class: 50,
            image_size: 16,
            noise: SyntheticTask::DEFAULT_NOISE,
            split_ratio: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: String,
    pub t0: f64,
    pub w_lr: f64,
    pub w_weight_decay: f64,
    pub a_lr: f64,
    pub a_weight_decay: f64,
    pub a_lr_follows_temperature: bool,
    pub trace_every: usize,
    pub augment: bool,
    pub no_annealing: bool,
    pub no_bilevel: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            schedule: "linear".into(),
            t0: 1.0,
            w_lr: 0.1,
            w_weight_decay: 5e-5,
            // Desk-scale calibration: far fewer steps than the reference
            // recipe, and no decay pulling saturated indicators back.
            a_lr: 3e-2,
            a_weight_decay: 0.0,
            a_lr_follows_temperature: false,
            trace_every: 20,
            augment: true,
            no_annealing: false,
            no_bilevel: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegSection {
    pub target_fraction: Option<f64>,
    pub target_flops: Option<f64>,
    pub lambda_flops: Option<f64>,
    pub epsilon: Option<f64>,
    /// Defaults to 0.01 for residual networks and 0 otherwise.
    pub lambda_sym: Option<f64>,
    pub lambda_lasso: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub augment: bool,
    /// Retrain the derived architecture from fresh weights.
    pub scratch: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.1,
            warmup: 5,
            weight_decay: 5e-5,
            augment: true,
            scratch: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let at = e.span().map(|s| format!(" (byte {})", s.start)).unwrap_or_default();
            Error::Config(vec![format!("{}{at}", e.message())])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn build_spec(&self) -> Result<ArchitectureSpec> {
        let input = self.input_shape()?;
        let classes = self.num_classes()?;
        let m = &self.model;
        match m.family.as_str() {
            "resnet" => {
                let widths: [usize; 3] = m.widths.clone().try_into().map_err(|_| {
                    Error::Config(vec![format!("model.widths: residual networks take 3 stage widths, got {}", m.widths.len())])
                })?;
                build_resnet(m.depth, widths, classes, input)
            }
            "mobilenet" => build_mobilenet(m.width_multiplier, classes, input),
            other => Err(Error::Config(vec![format!("model.family: unknown family {other:?}")])),
        }
    }

    fn input_shape(&self) -> Result<[usize; 3]> {
        let d = &self.dataset;
        Ok(match d.kind.as_str() {
            "synthetic" => [1, d.image_size, d.image_size],
            _ => match d.shape {
                Some(s) => s,
                None => self.load_train()?.shape,
            },
        })
    }

    fn num_classes(&self) -> Result<usize> {
        Ok(match self.dataset.kind.as_str() {
            "synthetic" => self.dataset.num_classes,
            _ => self.load_train()?.num_classes,
        })
    }

    fn load_file(&self, path: &Path) -> Result<Dataset> {
        let format: CorpusFormat = self.dataset.kind.parse()?;
        data::load_small_image_corpus(path, format, self.dataset.shape)
    }

    fn load_train(&self) -> Result<Dataset> {
        let path = self
            .dataset
            .path
            .as_deref()
            .ok_or_else(|| Error::Config(vec![format!("dataset.path: required for kind = {:?}", self.dataset.kind)]))?;
        self.load_file(path)
    }

    /// Raw training pool and optional held-out set (unnormalized).
    pub fn load_data(&self) -> Result<(Dataset, Option<Dataset>)> {
        let d = &self.dataset;
        if d.kind == "synthetic" {
            let task = |per_class: usize, seed: u64| SyntheticTask {
                num_classes: d.num_classes,
                examples_per_class: per_class,
                image_size: d.image_size,
                noise: d.noise,
                seed,
            };
            // The held-out set uses an independent generator stream.
            let pool = data::make_synthetic_task(&task(d.examples_per_class, self.seed))?;
            let test = data::make_synthetic_task(&task(d.test_examples_per_class, self.seed ^ 0x7E57_0000_0000_0001))?;
            return Ok((pool, Some(test)));
        }
        let pool = self.load_train()?;
        let test = match &d.test_path {
            Some(p) => Some(self.load_file(p)?),
            None => None,
        };
        Ok((pool, test))
    }

    /// Every field-level problem at once.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let d = &self.dataset;
        match d.kind.as_str() {
            "synthetic" => {
                if d.num_classes < 2 {
                    errs.push("dataset.num_classes: need at least 2 classes".into());
                }
                if d.examples_per_class < 2 || d.test_examples_per_class == 0 {
                    errs.push("dataset.examples_per_class: need at least 2 (and a non-empty test set)".into());
                }
                if d.image_size < 4 {
                    errs.push("dataset.image_size: must be at least 4".into());
                }
            }
            "idx" | "csv" => {
                if d.path.is_none() {
                    errs.push(format!("dataset.path: required for kind = {:?}", d.kind));
                }
            }
            other => errs.push(format!("dataset.kind: unknown kind {other:?} (expected synthetic, idx or csv)")),
        }
        if !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
            errs.push(format!("dataset.split_ratio: must lie in (0, 1), got {}", d.split_ratio));
        }
        if !["resnet", "mobilenet"].contains(&self.model.family.as_str()) {
            errs.push(format!("model.family: unknown family {:?}", self.model.family));
        }
        if self.search.schedule.parse::<ScheduleKind>().is_err() {
            errs.push(format!("search.schedule: unknown schedule {:?}", self.search.schedule));
        }
        if self.search.batch_size == 0 {
            errs.push("search.batch_size: must be positive".into());
        }
        if self.finetune.batch_size == 0 {
            errs.push("finetune.batch_size: must be positive".into());
        }
        let r = &self.regularizers;
        match (r.target_fraction, r.target_flops) {
            (None, None) => errs.push("regularizers.target_fraction: a FLOPs target is required (or give target_flops)".into()),
            (Some(_), Some(_)) => errs.push("regularizers.target_flops: give either target_fraction or target_flops, not both".into()),
            (Some(f), None) if !(f > 0.0 && f <= 1.0) => {
                errs.push(format!("regularizers.target_fraction: must lie in (0, 1], got {f}"))
            }
            _ => {}
        }
        errs
    }

    /// Resolves the absolute FLOPs target against the unpruned spec.
    pub fn target_flops(&self, spec: &ArchitectureSpec) -> f64 {
        let r = &self.regularizers;
        r.target_flops
            .unwrap_or_else(|| r.target_fraction.unwrap_or(1.0) * spec.total_flops() as f64)
    }

    pub fn search_config(&self, spec: &ArchitectureSpec) -> Result<SearchConfig> {
        let residual = !spec.residual_pairs.is_empty();
        let mut reg = RegularizerConfig::new(self.target_flops(spec), residual);
        let r = &self.regularizers;
        if let Some(v) = r.lambda_flops {
            reg.lambda_flops = v;
        }
        if let Some(v) = r.epsilon {
            reg.epsilon = v;
        }
        if let Some(v) = r.lambda_sym {
            reg.lambda_sym = v;
        }
        if let Some(v) = r.lambda_lasso {
            reg.lambda_lasso = v;
        }
        let s = &self.search;
        let mut cfg = SearchConfig::new(reg);
        cfg.epochs = s.epochs;
        cfg.batch_size = s.batch_size;
        cfg.schedule = s.schedule.parse().map_err(|e: String| Error::Config(vec![format!("search.schedule: {e}")]))?;
        cfg.t0 = s.t0;
        cfg.w_lr = s.w_lr;
        cfg.w_weight_decay = s.w_weight_decay;
        cfg.a_lr = s.a_lr;
        cfg.a_weight_decay = s.a_weight_decay;
        cfg.a_lr_follows_temperature = s.a_lr_follows_temperature;
        cfg.trace_every = s.trace_every;
        cfg.augment = s.augment;
        cfg.bilevel = !s.no_bilevel;
        cfg.seed = self.seed;
        if s.no_annealing {
            cfg = cfg.without_annealing();
        }
        let errs = cfg.validate(spec);
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(cfg)
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            epochs: f.epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            warmup: f.warmup,
            weight_decay: f.weight_decay,
            augment: f.augment,
            seed: self.seed,
            ..FinetuneConfig::default()
        }
    }
}

/// Normalized search split plus the evaluation pair used by fine-tuning:
/// the full training pool and the held-out set, both normalized with the
/// pool's statistics.
pub struct PreparedData {
    pub split: SplitDataset,
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (pool, test) = cfg.load_data()?;
    let split = data::split(&pool, cfg.dataset.split_ratio, cfg.seed)?;
    let norm = pool.compute_normalization();
    let train = pool.normalized(&norm);
    let eval = match test {
        Some(t) => t.normalized(&norm),
        None => split.val.clone(),
    };
    Ok(PreparedData { split, train, eval })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
seed = 3
[model]
family = "resnet"
depth = 8
widths = [4, 8, 16]
[dataset]
kind = "synthetic"
num_classes = 4
examples_per_class = 10
image_size = 8
[regularizers]
target_fraction = 0.5
"#;

    #[test]
    fn parses_and_resolves_fraction() {
        let cfg = RunConfig::from_toml(BASIC).unwrap();
        assert!(cfg.validate().is_empty());
        let spec = cfg.build_spec().unwrap();
        let sc = cfg.search_config(&spec).unwrap();
        assert_eq!(sc.reg.target_flops, 0.5 * spec.total_flops() as f64);
        assert_eq!(sc.seed, 3);
        assert_eq!(sc.reg.lambda_sym, 0.0, "depth 8 has no residual pairs");
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn validation_lists_every_problem() {
        let text = r#"
[dataset]
kind = "csv"
split_ratio = 1.5
[search]
schedule = "quadratic"
"#;
        let errs = RunConfig::from_toml(text).unwrap().validate();
        assert_eq!(errs.len(), 4, "{errs:?}");
        assert!(errs.iter().any(|e| e.starts_with("dataset.path")));
        assert!(errs.iter().any(|e| e.starts_with("regularizers.target_fraction")));
    }

    #[test]
    fn unknown_field_is_rejected_with_offset() {
        let err = RunConfig::from_toml("[search]\nepoch = 3\n").unwrap_err();
        let Error::Config(msgs) = err else { panic!() };
        assert!(msgs[0].contains("epoch") && msgs[0].contains("byte"), "{msgs:?}");
    }

    #[test]
    fn ablation_toggles() {
        let mut cfg = RunConfig::from_toml(BASIC).unwrap();
        cfg.search.no_annealing = true;
        cfg.search.no_bilevel = true;
        let spec = cfg.build_spec().unwrap();
        let sc = cfg.search_config(&spec).unwrap();
        assert_eq!(sc.schedule, ScheduleKind::Fixed);
        assert!(!sc.bilevel);
    }
}
