//! Experiment configuration: a line-oriented `key = value` file with
//! `[section]` headers, defaults for every optional field, and validation
//! that reports every problem at once.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analytic::DEFAULT_BETA_GRID;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::inference::FusionConfig;
use crate::learners::{ConsolidationConfig, TrainConfig};
use crate::stream::TaskOrder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bicrcl,
    Finetune,
    Joint,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bicrcl" => Ok(Self::Bicrcl),
            "finetune" => Ok(Self::Finetune),
            "joint" => Ok(Self::Joint),
            other => Err(Error::InvalidParameter(format!(
                "unknown method {other:?} (bicrcl | finetune | joint)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bicrcl => "bicrcl",
            Self::Finetune => "finetune",
            Self::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub num_tasks: usize,
    pub order: TaskOrder,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_tasks: 5,
            order: TaskOrder::Shuffled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticConfig {
    /// Random-projection width; `None` means four times the embedding width.
    pub projection_dim: Option<usize>,
    /// Fixed ridge parameter; `None` selects one by cross-validation.
    pub beta: Option<f64>,
    pub beta_grid: Vec<f64>,
}

impl Default for AnalyticConfig {
    fn default() -> Self {
        Self {
            projection_dim: None,
            beta: None,
            beta_grid: DEFAULT_BETA_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub manifest: Option<PathBuf>,
    pub method: Method,
    pub seed: u64,
    pub output: PathBuf,
    /// Write a per-sample prediction CSV for every session.
    pub record_predictions: bool,
    pub tasks: TaskConfig,
    pub backbone: BackboneConfig,
    /// Optional backbone weight file; `None` builds the seeded network.
    pub backbone_weights: Option<PathBuf>,
    pub train: TrainConfig,
    pub consolidation: ConsolidationConfig,
    pub analytic: AnalyticConfig,
    pub fusion: FusionConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            method: Method::Bicrcl,
            seed: 0,
            output: PathBuf::from("crcl-out"),
            record_predictions: false,
            tasks: TaskConfig::default(),
            backbone: BackboneConfig::default(),
            backbone_weights: None,
            train: TrainConfig::default(),
            consolidation: ConsolidationConfig::default(),
            analytic: AnalyticConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

/// One configuration problem, keyed by its field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Default)]
struct Issues(Vec<ConfigIssue>);

impl Issues {
    fn push(&mut self, key: &str, message: impl Into<String>) {
        self.0.push(ConfigIssue {
            key: key.to_string(),
            message: message.into(),
        });
    }
}

fn parse_value<T: FromStr>(raw: &str, key: &str, line: usize, issues: &mut Issues) -> Option<T>
where
    T::Err: fmt::Display,
{
    match raw.parse::<T>() {
        Ok(v) => Some(v),
        Err(e) => {
            issues.push(key, format!("line {line}: cannot parse {raw:?}: {e}"));
            None
        }
    }
}

fn parse_grid(raw: &str) -> std::result::Result<Vec<f64>, String> {
    raw.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect()
}

impl ExperimentConfig {
    /// Parse config text. Relative paths resolve against `base`. Returns
    /// the config plus every parse problem found.
    fn parse(text: &str, base: &Path) -> (Self, Vec<ConfigIssue>) {
        let mut cfg = Self::default();
        let mut issues = Issues::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                issues.push(&format!("line {line_no}"), "expected `key = value` or `[section]`");
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            cfg.assign(&section, key, value, base, line_no, &mut issues);
        }
        (cfg, issues.0)
    }

    fn assign(&mut self, section: &str, key: &str, value: &str, base: &Path, line: usize, issues: &mut Issues) {
        macro_rules! set {
            ($field:expr, $path:expr) => {
                if let Some(v) = parse_value(value, $path, line, issues) {
                    $field = v;
                }
            };
        }
        match (section, key) {
            ("", "manifest") => self.manifest = Some(base.join(value)),
            ("", "method") => set!(self.method, "ExperimentConfig.method"),
            ("", "seed") => set!(self.seed, "ExperimentConfig.seed"),
            ("", "output") => self.output = base.join(value),
            ("", "record_predictions") => set!(self.record_predictions, "ExperimentConfig.record_predictions"),
            ("tasks", "num_tasks") => set!(self.tasks.num_tasks, "TaskSpec.num_tasks"),
            ("tasks", "order") => set!(self.tasks.order, "TaskSpec.order"),
            ("backbone", "hidden_dim") => set!(self.backbone.hidden_dim, "BackboneConfig.hidden_dim"),
            ("backbone", "embed_dim") => set!(self.backbone.embed_dim, "BackboneConfig.embed_dim"),
            ("backbone", "num_blocks") => set!(self.backbone.num_blocks, "BackboneConfig.num_blocks"),
            ("backbone", "adapter_dim") => set!(self.backbone.adapter_dim, "BackboneConfig.adapter_dim"),
            ("backbone", "seed") => set!(self.backbone.seed, "BackboneConfig.seed"),
            ("backbone", "bypass") => set!(self.backbone.bypass, "BackboneConfig.bypass"),
            ("backbone", "weights") => self.backbone_weights = Some(base.join(value)),
            ("train", "batch_size") => set!(self.train.batch_size, "TrainConfig.batch_size"),
            ("train", "epochs_first") => set!(self.train.epochs_first, "TrainConfig.epochs_first"),
            ("train", "epochs_later") => set!(self.train.epochs_later, "TrainConfig.epochs_later"),
            ("train", "lr_init") => set!(self.train.lr_init, "TrainConfig.lr_init"),
            ("train", "momentum") => set!(self.train.momentum, "TrainConfig.momentum"),
            ("train", "augment") => set!(self.train.augment, "TrainConfig.augment"),
            ("consolidation", "alpha") => set!(self.consolidation.alpha, "ConsolidationConfig.alpha"),
            ("analytic", "projection_dim") => {
                if value == "auto" {
                    self.analytic.projection_dim = None;
                } else if let Some(v) = parse_value(value, "AnalyticConfig.projection_dim", line, issues) {
                    self.analytic.projection_dim = Some(v);
                }
            }
            ("analytic", "beta") => {
                if value == "auto" {
                    self.analytic.beta = None;
                } else if let Some(v) = parse_value(value, "AnalyticConfig.beta", line, issues) {
                    self.analytic.beta = Some(v);
                }
            }
            ("analytic", "beta_grid") => match parse_grid(value) {
                Ok(grid) => self.analytic.beta_grid = grid,
                Err(e) => issues.push("AnalyticConfig.beta_grid", format!("line {line}: {e}")),
            },
            ("fusion", "tau") => set!(self.fusion.tau, "FusionConfig.tau"),
            ("fusion", "lambda") => set!(self.fusion.lambda, "FusionConfig.lambda"),
            _ => {
                let full = if section.is_empty() {
                    key.to_string()
                } else {
                    format!("{section}.{key}")
                };
                issues.push(&full, format!("line {line}: unknown key"));
            }
        }
    }

    /// Range and existence checks; returns every violation.
    pub fn check(&self) -> Vec<ConfigIssue> {
        let mut issues = Issues::default();
        match &self.manifest {
            None => issues.push("ExperimentConfig.manifest", "missing (set `manifest = <path>`)"),
            Some(p) if !p.is_file() => issues.push("ExperimentConfig.manifest", format!("{} does not exist", p.display())),
            Some(_) => {}
        }
        if let Some(p) = &self.backbone_weights {
            if !p.is_file() {
                issues.push("BackboneConfig.weights", format!("{} does not exist", p.display()));
            }
        }
        if self.tasks.num_tasks == 0 {
            issues.push("TaskSpec.num_tasks", "must be >= 1");
        }
        let b = &self.backbone;
        if !b.bypass {
            for (key, v) in [
                ("BackboneConfig.hidden_dim", b.hidden_dim),
                ("BackboneConfig.embed_dim", b.embed_dim),
                ("BackboneConfig.adapter_dim", b.adapter_dim),
            ] {
                if v == 0 {
                    issues.push(key, "must be >= 1");
                }
            }
            if b.adapter_dim >= b.hidden_dim && b.num_blocks > 0 {
                issues.push(
                    "BackboneConfig.adapter_dim",
                    format!("bottleneck {} must be smaller than hidden_dim {}", b.adapter_dim, b.hidden_dim),
                );
            }
        }
        let t = &self.train;
        if t.batch_size == 0 {
            issues.push("TrainConfig.batch_size", "must be >= 1");
        }
        if !(t.lr_init > 0.0 && t.lr_init.is_finite()) {
            issues.push("TrainConfig.lr_init", format!("must be > 0, got {}", t.lr_init));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            issues.push("TrainConfig.momentum", format!("must lie in [0, 1), got {}", t.momentum));
        }
        let alpha = self.consolidation.alpha;
        if !(0.0..=1.0).contains(&alpha) {
            issues.push("ConsolidationConfig.alpha", format!("must lie in [0, 1], got {alpha}"));
        }
        if let Some(m) = self.analytic.projection_dim {
            let d = if b.bypass { 0 } else { b.embed_dim };
            if m <= d {
                issues.push(
                    "AnalyticConfig.projection_dim",
                    format!("must exceed the embedding width {d}, got {m}"),
                );
            }
        }
        if let Some(beta) = self.analytic.beta {
            if !(beta > 0.0 && beta.is_finite()) {
                issues.push("AnalyticConfig.beta", format!("must be > 0, got {beta}"));
            }
        }
        if self.analytic.beta_grid.is_empty() {
            issues.push("AnalyticConfig.beta_grid", "must not be empty");
        } else if self.analytic.beta_grid.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            issues.push("AnalyticConfig.beta_grid", "values must be > 0");
        }
        if !(self.fusion.tau > 0.0 && self.fusion.tau.is_finite()) {
            issues.push("FusionConfig.tau", format!("must be > 0, got {}", self.fusion.tau));
        }
        if !(self.fusion.lambda >= 0.0 && self.fusion.lambda.is_finite()) {
            issues.push("FusionConfig.lambda", format!("must be >= 0, got {}", self.fusion.lambda));
        }
        issues.0
    }

    /// Parse text and run all checks.
    pub fn from_text(text: &str, base: &Path) -> std::result::Result<Self, Vec<ConfigIssue>> {
        let (cfg, mut issues) = Self::parse(text, base);
        issues.extend(cfg.check());
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(issues)
        }
    }

    /// Canonical text form. Parsing it (with an empty base) yields an equal
    /// config: floats use shortest round-trip formatting.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let path = |p: &Path| p.display().to_string();
        if let Some(m) = &self.manifest {
            let _ = writeln!(s, "manifest = {}", path(m));
        }
        let _ = writeln!(s, "method = {}", self.method);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "output = {}", path(&self.output));
        let _ = writeln!(s, "record_predictions = {}", self.record_predictions);
        let _ = writeln!(s, "\n[tasks]\nnum_tasks = {}\norder = {}", self.tasks.num_tasks, self.tasks.order);
        let b = &self.backbone;
        let _ = writeln!(
            s,
            "\n[backbone]\nhidden_dim = {}\nembed_dim = {}\nnum_blocks = {}\nadapter_dim = {}\nseed = {}\nbypass = {}",
            b.hidden_dim, b.embed_dim, b.num_blocks, b.adapter_dim, b.seed, b.bypass
        );
        if let Some(w) = &self.backbone_weights {
            let _ = writeln!(s, "weights = {}", path(w));
        }
        let t = &self.train;
        let _ = writeln!(
            s,
            "\n[train]\nbatch_size = {}\nepochs_first = {}\nepochs_later = {}\nlr_init = {:?}\nmomentum = {:?}\naugment = {}",
            t.batch_size, t.epochs_first, t.epochs_later, t.lr_init, t.momentum, t.augment
        );
        let _ = writeln!(s, "\n[consolidation]\nalpha = {:?}", self.consolidation.alpha);
        let a = &self.analytic;
        let opt = |v: Option<String>| v.unwrap_or_else(|| "auto".into());
        let grid: Vec<String> = a.beta_grid.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(
            s,
            "\n[analytic]\nprojection_dim = {}\nbeta = {}\nbeta_grid = {}",
            opt(a.projection_dim.map(|m| m.to_string())),
            opt(a.beta.map(|b| format!("{b:?}"))),
            grid.join(",")
        );
        let _ = writeln!(s, "\n[fusion]\ntau = {:?}\nlambda = {:?}", self.fusion.tau, self.fusion.lambda);
        s
    }
}

/// Read and validate a config file, collecting every problem.
pub fn validate_config(path: &Path) -> std::result::Result<ExperimentConfig, Vec<ConfigIssue>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        vec![ConfigIssue {
            key: path.display().to_string(),
            message: e.to_string(),
        }]
    })?;
    ExperimentConfig::from_text(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(issues: &[ConfigIssue]) -> Vec<&str> {
        issues.iter().map(|i| i.key.as_str()).collect()
    }

    #[test]
    fn empty_file_only_lacks_manifest() {
        let issues = ExperimentConfig::from_text("", Path::new(".")).unwrap_err();
        assert_eq!(keys(&issues), vec!["ExperimentConfig.manifest"]);
        let (cfg, parse) = ExperimentConfig::parse("", Path::new("."));
        assert!(parse.is_empty());
        assert_eq!(cfg.consolidation.alpha, 0.99);
        assert_eq!(cfg.fusion.tau, 0.1);
        assert_eq!(cfg.fusion.lambda, 0.5);
        assert_eq!(cfg.backbone.adapter_dim, 64);
        assert_eq!(cfg.train.batch_size, 48);
        assert_eq!((cfg.train.epochs_first, cfg.train.epochs_later), (20, 15));
        assert_eq!(cfg.train.lr_init, 0.01);
    }

    #[test]
    fn all_violations_reported() {
        let text = "[consolidation]\nalpha = 1.5\n[fusion]\ntau = 0\n[train]\nbatch_size = x\n";
        let issues = ExperimentConfig::from_text(text, Path::new(".")).unwrap_err();
        let k = keys(&issues);
        assert!(k.contains(&"ConsolidationConfig.alpha"), "{k:?}");
        assert!(k.contains(&"FusionConfig.tau"), "{k:?}");
        assert!(k.contains(&"TrainConfig.batch_size"), "{k:?}");
        assert!(k.contains(&"ExperimentConfig.manifest"), "{k:?}");
    }

    #[test]
    fn unknown_keys_and_bad_lines() {
        let (_, issues) = ExperimentConfig::parse("[train]\nlearning_rate = 1\nnonsense\n", Path::new("."));
        assert_eq!(keys(&issues), vec!["train.learning_rate", "line 3"]);
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.manifest = Some(PathBuf::from("/data/m.txt"));
        cfg.method = Method::Finetune;
        cfg.seed = 17;
        cfg.tasks.order = TaskOrder::Reversed;
        cfg.train.lr_init = 0.1 + 0.2;
        cfg.analytic.beta = Some(3.5e-3);
        cfg.analytic.projection_dim = Some(300);
        cfg.fusion.lambda = 1.0 / 3.0;
        let (back, issues) = ExperimentConfig::parse(&cfg.render(), Path::new(""));
        assert!(issues.is_empty(), "{issues:?}");
        assert_eq!(back, cfg);
        assert_eq!(back.render(), cfg.render());
    }

    #[test]
    fn comments_and_sections() {
        let text = "# top\nseed = 5 # inline\n\n[tasks]\nnum_tasks = 10\norder = reversed\n[analytic]\nbeta_grid = 0.1, 1, 10\n";
        let (cfg, issues) = ExperimentConfig::parse(text, Path::new("."));
        assert!(issues.is_empty());
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.tasks.num_tasks, 10);
        assert_eq!(cfg.tasks.order, TaskOrder::Reversed);
        assert_eq!(cfg.analytic.beta_grid, vec![0.1, 1.0, 10.0]);
    }
}
