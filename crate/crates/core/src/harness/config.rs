use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::synthetic::ToyConfig;
use crate::corpus::DEFAULT_SEQ_LEN;
use crate::error::{Error, Result};
use crate::gradstore::DEFAULT_PROJECTION_DIM;
use crate::metrics::OtConfig;
use crate::model::{OptimizerConfig, Task};
use crate::selector::{Method, ScoringRule, MAX_CHECKPOINTS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    Pipeline,
    Scaling,
    Leakage,
    Crossseed,
    ProjectionDim,
    Optimizer,
    MetricAblation,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Pipeline,
        ExperimentKind::Scaling,
        ExperimentKind::Leakage,
        ExperimentKind::Crossseed,
        ExperimentKind::ProjectionDim,
        ExperimentKind::Optimizer,
        ExperimentKind::MetricAblation,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Pipeline => "pipeline",
            ExperimentKind::Scaling => "scaling",
            ExperimentKind::Leakage => "leakage",
            ExperimentKind::Crossseed => "crossseed",
            ExperimentKind::ProjectionDim => "projection_dim",
            ExperimentKind::Optimizer => "optimizer",
            ExperimentKind::MetricAblation => "metric_ablation",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.replace('-', "_");
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind {s:?}")))
    }
}

/// Labeled data from JSONL files. The labeled corpus is split into the
/// victim's training set, a validation set and a test set; the seed pool
/// comes from its own file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileData {
    pub task: Task,
    pub labeled: PathBuf,
    pub pool: PathBuf,
    /// (train, validation, test)
    #[serde(default = "default_fractions")]
    pub fractions: (f64, f64, f64),
}

fn default_fractions() -> (f64, f64, f64) {
    (0.7, 0.1, 0.2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(ToyConfig),
    Files(FileData),
}

impl DataSource {
    pub fn task(&self) -> Task {
        match self {
            DataSource::Synthetic(t) => t.task,
            DataSource::Files(f) => f.task,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DataSource::Synthetic(t) => t.validate(),
            DataSource::Files(f) => {
                for p in [&f.labeled, &f.pool] {
                    if !p.exists() {
                        return Err(Error::Config(format!("{} does not exist", p.display())));
                    }
                }
                let (a, b, c) = f.fractions;
                if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
                    return Err(Error::Config("fractions must be positive and sum to 1".into()));
                }
                Ok(())
            }
        }
    }
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(ToyConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub embed_dim: usize,
    pub hidden_layer: bool,
    pub max_vocab: usize,
    pub seq_len: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_layer: false,
            max_vocab: 5000,
            seq_len: DEFAULT_SEQ_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionSpec {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "P")]
    pub checkpoints: usize,
    pub k: usize,
    pub rule: ScoringRule,
    pub batch_size: usize,
    pub methods: Vec<Method>,
}

impl Default for SelectionSpec {
    fn default() -> Self {
        Self {
            m: 500,
            checkpoints: 1,
            k: DEFAULT_PROJECTION_DIM,
            rule: ScoringRule::CosineSum,
            batch_size: 64,
            methods: Method::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingSpec {
    #[serde(rename = "M_list")]
    pub m_list: Vec<usize>,
}

impl Default for ScalingSpec {
    fn default() -> Self {
        Self {
            m_list: vec![100, 500, 1000],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LeakageSpec {
    pub fractions: Vec<f64>,
    pub pool_size: usize,
    pub methods: Vec<Method>,
}

impl Default for LeakageSpec {
    fn default() -> Self {
        Self {
            fractions: vec![0.1, 0.5, 0.9],
            pool_size: 2000,
            methods: vec![Method::Select],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossSeedSpec {
    /// Candidate pools: the pool side of each data source is used.
    pub seed_datasets: Vec<DataSource>,
    /// Tasks: the labeled side of each data source is used.
    pub test_tasks: Vec<DataSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionSpec {
    pub k_list: Vec<usize>,
    pub methods: Vec<Method>,
}

impl Default for ProjectionSpec {
    fn default() -> Self {
        Self {
            k_list: vec![512, 4096],
            methods: vec![Method::Select, Method::Random],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerGrid {
    /// Empty means the top-level victim optimizer.
    pub victim: Vec<OptimizerConfig>,
    /// Empty means the top-level retrain optimizer.
    pub retrain: Vec<OptimizerConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSpec {
    /// Replacement fractions are `i / steps` for `i = 0..=steps`.
    pub steps: usize,
    pub trials: usize,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self { steps: 10, trials: 5 }
    }
}

/// One structured document describing a run; every random choice is derived
/// from an entry of `seeds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub data: DataSource,
    pub model: ModelSpec,
    pub victim: OptimizerConfig,
    pub retrain: OptimizerConfig,
    pub selection: SelectionSpec,
    pub ot: OtConfig,
    /// Documents sampled from each side before computing transport distances.
    pub ot_sample: usize,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    /// Reuse stage artifacts under `<out_dir>/cache`.
    pub cache: bool,
    /// Concurrent jobs (seeds or grid cells).
    pub parallel: usize,
    pub scaling: ScalingSpec,
    pub leakage: LeakageSpec,
    pub crossseed: CrossSeedSpec,
    pub projection_dim: ProjectionSpec,
    pub optimizer: OptimizerGrid,
    pub metric_ablation: AblationSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Pipeline,
            data: DataSource::default(),
            model: ModelSpec::default(),
            victim: OptimizerConfig {
                learning_rate: 0.01,
                epochs: 10,
                ..OptimizerConfig::default()
            },
            retrain: OptimizerConfig {
                learning_rate: 0.01,
                epochs: 20,
                ..OptimizerConfig::default()
            },
            selection: SelectionSpec::default(),
            ot: OtConfig::default(),
            ot_sample: 256,
            seeds: vec![0, 1, 2],
            out_dir: None,
            cache: true,
            parallel: 1,
            scaling: ScalingSpec::default(),
            leakage: LeakageSpec::default(),
            crossseed: CrossSeedSpec::default(),
            projection_dim: ProjectionSpec::default(),
            optimizer: OptimizerGrid::default(),
            metric_ablation: AblationSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    pub fn cache_enabled(&self) -> bool {
        self.cache
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        self.data.validate()?;
        if let DataSource::Synthetic(t) = &self.data {
            let pool = if self.kind == ExperimentKind::Leakage {
                self.leakage.pool_size
            } else {
                t.pool
            };
            let largest = match self.kind {
                ExperimentKind::Scaling => self.scaling.m_list.iter().copied().max().unwrap_or(0),
                _ => self.selection.m,
            };
            if largest > pool {
                return bad(format!("M = {largest} exceeds the seed-pool size {pool}"));
            }
        }
        if self.selection.m == 0 {
            return bad("M must be positive".into());
        }
        if self.selection.checkpoints > MAX_CHECKPOINTS {
            return bad(format!("P = {} exceeds the limit of {MAX_CHECKPOINTS}", self.selection.checkpoints));
        }
        if self.selection.checkpoints == 0 || self.selection.k == 0 || self.selection.batch_size == 0 {
            return bad("P, k and batch_size must be positive".into());
        }
        if self.selection.methods.is_empty() {
            return bad("at least one selection method is required".into());
        }
        if self.model.embed_dim == 0 || self.model.seq_len == 0 || self.model.max_vocab < 3 {
            return bad("model needs embed_dim >= 1, seq_len >= 1 and max_vocab >= 3".into());
        }
        self.victim.validate()?;
        self.retrain.validate()?;
        if self.ot_sample == 0 {
            return bad("ot_sample must be positive".into());
        }
        match self.kind {
            ExperimentKind::Scaling if self.scaling.m_list.is_empty() => bad("scaling needs M_list".into()),
            ExperimentKind::Leakage
                if self.leakage.fractions.is_empty()
                    || self.leakage.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) =>
            {
                bad("leakage fractions must be non-empty and lie in [0, 1]".into())
            }
            ExperimentKind::Crossseed => {
                if self.crossseed.seed_datasets.is_empty() || self.crossseed.test_tasks.is_empty() {
                    return bad("crossseed needs seed_datasets and test_tasks".into());
                }
                for d in self.crossseed.seed_datasets.iter().chain(&self.crossseed.test_tasks) {
                    d.validate()?;
                }
                Ok(())
            }
            ExperimentKind::ProjectionDim if self.projection_dim.k_list.contains(&0) || self.projection_dim.k_list.is_empty() => {
                bad("k_list must be non-empty and positive".into())
            }
            ExperimentKind::Optimizer => {
                for o in self.optimizer.victim.iter().chain(&self.optimizer.retrain) {
                    o.validate()?;
                }
                Ok(())
            }
            ExperimentKind::MetricAblation if self.metric_ablation.steps == 0 || self.metric_ablation.trials == 0 => {
                bad("metric_ablation needs steps and trials".into())
            }
            _ => Ok(()),
        }
    }
}
