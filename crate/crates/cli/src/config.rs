//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated
//! keys are errors. Every key has a default except `dataset` and `out`.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `dataset` | required | `synthetic` or `tsv` |
//! | `out` | required | output directory |
//! | `train_path`, `dev_path` | unset | TSV splits (`dataset = tsv`) |
//! | `tsv_tokens_col`, `tsv_label_col` | 0, 1 | TSV column mapping |
//! | `rule_seed` | 0 | synthetic labelling rule seed |
//! | `seq_len` | 16 | synthetic sequence length, CLS included |
//! | `train_samples`, `dev_samples` | 4096, 1024 | synthetic split sizes |
//! | `min_majority` | 0.6 | synthetic majority-group share |
//! | `num_layers`, `hidden_dim`, `num_heads`, `ffn_dim` | 2, 32, 4, 128 | encoder shape |
//! | `vocab_size`, `max_seq_len`, `num_labels`, `cls_token_id` | 64, 32, 2, 1 | vocabulary and sequence limits |
//! | `model_seed` | 0 | weight initialisation seed |
//! | `method` | smp | smp, magnitude, movement or dense |
//! | `mask_fn` | smp | local, global, smp or threshold |
//! | `threshold` | 0.5 | τ for `mask_fn = threshold` |
//! | `remaining` | 0.5 | final remaining ratio |
//! | `ramp_steps` | 60% of all steps | cubic schedule length |
//! | `lambda_r` | 400 | regularizer weight |
//! | `lr` | 0.02 | score learning rate |
//! | `weight_lr` | 0.001 | weight learning rate, baselines only |
//! | `batch_size`, `epochs` | 32, 4 | loop shape |
//! | `kd`, `teacher` | false, unset | distillation from a dense checkpoint |
//! | `seed` | 0 | batch order seed |
//! | `sweep_remaining` | 0.03,0.10,0.50,0.80 | sweep ratios |
//! | `sweep_methods` | smp,magnitude,movement | sweep methods |
//! | `min_row_weights` | 0 | compaction row threshold `k` |
//! | `probes` | 1024 | compaction probe batch size |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use smp_core::data::{Dataset, SyntheticSpec, TsvColumns};
use smp_core::model::ModelConfig;
use smp_core::pruning::MaskingFunction;
use smp_core::train::{Method, TrainConfig, DEFAULT_LAMBDA_R, DEFAULT_SCORE_LR, DEFAULT_WEIGHT_LR};
use smp_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic,
    Tsv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Option<DatasetSource>,
    pub out: Option<PathBuf>,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub tsv_columns: TsvColumns,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub method: Method,
    pub mask_fn: String,
    pub threshold: f64,
    pub remaining: f64,
    pub ramp_steps: Option<usize>,
    pub lambda_r: f64,
    pub lr: f64,
    pub weight_lr: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub kd: bool,
    pub teacher: Option<PathBuf>,
    pub seed: u64,
    pub sweep_remaining: Vec<f64>,
    pub sweep_methods: Vec<Method>,
    pub min_row_weights: usize,
    pub probes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            out: None,
            train_path: None,
            dev_path: None,
            tsv_columns: TsvColumns::default(),
            synthetic: SyntheticSpec::default(),
            model: ModelConfig::default(),
            model_seed: 0,
            method: Method::Smp,
            mask_fn: "smp".into(),
            threshold: 0.5,
            remaining: 0.5,
            ramp_steps: None,
            lambda_r: DEFAULT_LAMBDA_R,
            lr: DEFAULT_SCORE_LR,
            weight_lr: None,
            batch_size: 32,
            epochs: 4,
            kd: false,
            teacher: None,
            seed: 0,
            sweep_remaining: vec![0.03, 0.10, 0.50, 0.80],
            sweep_methods: vec![Method::Smp, Method::Magnitude, Method::Movement],
            min_row_weights: 0,
            probes: 1024,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

pub fn parse_method(value: &str) -> Result<Method> {
    Method::parse(value).ok_or_else(|| Error::Config(format!("unknown method {value:?}")))
}

fn list<T>(value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect()
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|x| x.display().to_string())
        .unwrap_or_default()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    n + 1
                )));
            }
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.synthetic;
        let m = &mut self.model;
        match key {
            "dataset" => {
                self.dataset = Some(match value {
                    "synthetic" => DatasetSource::Synthetic,
                    "tsv" => DatasetSource::Tsv,
                    _ => {
                        return Err(Error::Config(format!(
                            "dataset must be synthetic or tsv, got {value:?}"
                        )))
                    }
                })
            }
            "out" => self.out = parse_path(value),
            "train_path" => self.train_path = parse_path(value),
            "dev_path" => self.dev_path = parse_path(value),
            "tsv_tokens_col" => self.tsv_columns.tokens = parse_num(key, value)?,
            "tsv_label_col" => self.tsv_columns.label = parse_num(key, value)?,
            "rule_seed" => s.rule_seed = parse_num(key, value)?,
            "seq_len" => s.seq_len = parse_num(key, value)?,
            "train_samples" => s.train_samples = parse_num(key, value)?,
            "dev_samples" => s.dev_samples = parse_num(key, value)?,
            "min_majority" => s.min_majority = parse_num(key, value)?,
            "num_layers" => m.num_layers = parse_num(key, value)?,
            "hidden_dim" => m.hidden_dim = parse_num(key, value)?,
            "num_heads" => m.num_heads = parse_num(key, value)?,
            "ffn_dim" => m.ffn_dim = parse_num(key, value)?,
            "vocab_size" => m.vocab_size = parse_num(key, value)?,
            "max_seq_len" => m.max_seq_len = parse_num(key, value)?,
            "num_labels" => m.num_labels = parse_num(key, value)?,
            "cls_token_id" => m.cls_token_id = parse_num(key, value)?,
            "model_seed" => self.model_seed = parse_num(key, value)?,
            "method" => self.method = parse_method(value)?,
            "mask_fn" => {
                if !["local", "global", "smp", "threshold"].contains(&value) {
                    return Err(Error::Config(format!("unknown mask_fn {value:?}")));
                }
                self.mask_fn = value.to_string();
            }
            "threshold" => self.threshold = parse_num(key, value)?,
            "remaining" => self.remaining = parse_num(key, value)?,
            "ramp_steps" => self.ramp_steps = parse_opt(key, value)?,
            "lambda_r" => self.lambda_r = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "weight_lr" => self.weight_lr = parse_opt(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "kd" => self.kd = parse_bool(key, value)?,
            "teacher" => self.teacher = parse_path(value),
            "seed" => self.seed = parse_num(key, value)?,
            "sweep_remaining" => self.sweep_remaining = list(value, |v| parse_num(key, v))?,
            "sweep_methods" => self.sweep_methods = list(value, parse_method)?,
            "min_row_weights" => self.min_row_weights = parse_num(key, value)?,
            "probes" => self.probes = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let s = &self.synthetic;
        let m = &self.model;
        vec![
            (
                "dataset",
                match self.dataset {
                    Some(DatasetSource::Synthetic) => "synthetic".into(),
                    Some(DatasetSource::Tsv) => "tsv".into(),
                    None => String::new(),
                },
            ),
            ("out", path_str(&self.out)),
            ("train_path", path_str(&self.train_path)),
            ("dev_path", path_str(&self.dev_path)),
            ("tsv_tokens_col", self.tsv_columns.tokens.to_string()),
            ("tsv_label_col", self.tsv_columns.label.to_string()),
            ("rule_seed", s.rule_seed.to_string()),
            ("seq_len", s.seq_len.to_string()),
            ("train_samples", s.train_samples.to_string()),
            ("dev_samples", s.dev_samples.to_string()),
            ("min_majority", s.min_majority.to_string()),
            ("num_layers", m.num_layers.to_string()),
            ("hidden_dim", m.hidden_dim.to_string()),
            ("num_heads", m.num_heads.to_string()),
            ("ffn_dim", m.ffn_dim.to_string()),
            ("vocab_size", m.vocab_size.to_string()),
            ("max_seq_len", m.max_seq_len.to_string()),
            ("num_labels", m.num_labels.to_string()),
            ("cls_token_id", m.cls_token_id.to_string()),
            ("model_seed", self.model_seed.to_string()),
            ("method", self.method.name().into()),
            ("mask_fn", self.mask_fn.clone()),
            ("threshold", self.threshold.to_string()),
            ("remaining", self.remaining.to_string()),
            ("ramp_steps", opt_str(&self.ramp_steps)),
            ("lambda_r", self.lambda_r.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_lr", opt_str(&self.weight_lr)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("kd", self.kd.to_string()),
            ("teacher", path_str(&self.teacher)),
            ("seed", self.seed.to_string()),
            (
                "sweep_remaining",
                self.sweep_remaining
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            (
                "sweep_methods",
                self.sweep_methods
                    .iter()
                    .map(|m| m.name())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("min_row_weights", self.min_row_weights.to_string()),
            ("probes", self.probes.to_string()),
        ]
    }

    /// Text that [`ExperimentConfig::parse`] maps back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            if !v.is_empty() {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory: set `out` or pass --out".into()))
    }

    pub fn masking(&self) -> Result<MaskingFunction> {
        Ok(match self.mask_fn.as_str() {
            "local" => MaskingFunction::Local,
            "global" => MaskingFunction::Global,
            "smp" => MaskingFunction::Smp,
            "threshold" => MaskingFunction::Threshold(self.threshold),
            other => return Err(Error::Config(format!("unknown mask_fn {other:?}"))),
        })
    }

    /// Training settings for `method` at remaining ratio `remaining`.
    pub fn train_config(&self, method: Method, remaining: f64) -> Result<TrainConfig> {
        let weight_lr = match method {
            Method::Smp => None,
            _ => Some(self.weight_lr.unwrap_or(DEFAULT_WEIGHT_LR)),
        };
        let tc = TrainConfig {
            method,
            masking: self.masking()?,
            remaining: if method == Method::Dense {
                1.0
            } else {
                remaining
            },
            ramp_steps: self.ramp_steps,
            lambda_r: self.lambda_r,
            score_lr: self.lr,
            weight_lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            kd: self.kd,
            teacher: self.teacher.clone(),
            seed: self.seed,
        };
        tc.validate()?;
        Ok(tc)
    }

    /// Settings of the single run described by the file and flags.
    pub fn primary_train_config(&self) -> Result<TrainConfig> {
        if self.method == Method::Smp && self.weight_lr.is_some() {
            return Err(Error::Config(
                "smp keeps weights frozen; weight_lr must be unset".into(),
            ));
        }
        self.train_config(self.method, self.remaining)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            vocab_size: self.model.vocab_size,
            num_labels: self.model.num_labels,
            cls_token_id: self.model.cls_token_id,
            ..self.synthetic.clone()
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.validate()?;
        Ok(self.model)
    }

    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset {
            None => Err(Error::Config(
                "no dataset: set `dataset = synthetic` or `dataset = tsv`".into(),
            )),
            Some(DatasetSource::Synthetic) => self.synthetic_spec().generate(),
            Some(DatasetSource::Tsv) => {
                let get = |p: &Option<PathBuf>, k: &str| {
                    p.clone()
                        .ok_or_else(|| Error::Config(format!("dataset = tsv needs `{k}`")))
                };
                let train = get(&self.train_path, "train_path")?;
                let dev = get(&self.dev_path, "dev_path")?;
                let n = self.model.num_labels;
                Ok((
                    Dataset::load_tsv(&train, n, self.tsv_columns)?,
                    Dataset::load_tsv(&dev, n, self.tsv_columns)?,
                ))
            }
        }
    }
}
