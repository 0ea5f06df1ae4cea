//! Experiment configuration: a TOML document, optionally overridden by flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use solman::cem::CemConfig;
use solman::lsmo::{TrainConfig, Z_EVAL_RANGE};
use solman::objective::ToyFunction;
use solman::planning::{Chomp, ChompConfig, CostConfig, PriorConfig, World2D};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ToyTrain,
    ToyEval,
    Cem,
    PlanTrain,
    PlanSample,
    PlanFinetune,
    Plot,
}

impl Mode {
    pub fn is_planning(self) -> bool {
        matches!(self, Mode::PlanTrain | Mode::PlanSample | Mode::PlanFinetune)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::ToyTrain => "toy-train",
            Mode::ToyEval => "toy-eval",
            Mode::Cem => "cem",
            Mode::PlanTrain => "plan-train",
            Mode::PlanSample => "plan-sample",
            Mode::PlanFinetune => "plan-finetune",
            Mode::Plot => "plot",
        }
    }
}

/// Evenly spaced latent values, written `lo:hi:count`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZGrid {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl ZGrid {
    pub const TOY: ZGrid = ZGrid { lo: Z_EVAL_RANGE.0, hi: Z_EVAL_RANGE.1, count: 200 };
    pub const PLANNING: ZGrid = ZGrid { lo: Z_EVAL_RANGE.0, hi: Z_EVAL_RANGE.1, count: 7 };
}

impl FromStr for ZGrid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let [lo, hi, count] = parts[..] else {
            return Err(format!("expected lo:hi:count, got {s:?}"));
        };
        let lo: f64 = lo.trim().parse().map_err(|e| format!("z grid lower end {lo:?}: {e}"))?;
        let hi: f64 = hi.trim().parse().map_err(|e| format!("z grid upper end {hi:?}: {e}"))?;
        let count: usize = count.trim().parse().map_err(|e| format!("z grid count {count:?}: {e}"))?;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(format!("z grid needs finite lo <= hi, got {lo}:{hi}"));
        }
        if count == 0 {
            return Err("z grid needs at least one point".into());
        }
        Ok(Self { lo, hi, count })
    }
}

impl fmt::Display for ZGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.lo, self.hi, self.count)
    }
}

impl Serialize for ZGrid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ZGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// Objective heatmap with decoded manifold points.
    Heatmap,
    /// World view with a fan of decoded trajectories.
    Fan,
    /// Loss, KL and capacity per epoch.
    Curves,
}

impl FromStr for PlotKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "heatmap" => Ok(Self::Heatmap),
            "fan" => Ok(Self::Fan),
            "curves" => Ok(Self::Curves),
            other => Err(CliError::Config(format!("unknown plot kind {other:?} (expected heatmap, fan or curves)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    pub kind: Option<String>,
    /// Curves CSV to plot; `{seed}` is replaced by each seed.
    pub curves: Option<String>,
}

/// Everything one invocation needs. Paths containing `{seed}` are expanded
/// once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    /// Toy function id, 1 to 4.
    pub function: u32,
    /// Built-in benchmark world, 1 to 3; ignored when `world_file` is set.
    pub benchmark: u32,
    pub world_file: Option<PathBuf>,
    pub checkpoint: Option<String>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub z_grid: Option<ZGrid>,
    /// Prior samples used as CHOMP starting points in `plan-finetune`.
    pub random_starts: usize,
    /// Overrides on top of the mode's training preset.
    pub train: toml::Table,
    pub cem: CemConfig,
    pub chomp: ChompConfig,
    pub cost: CostConfig,
    pub prior: PriorConfig,
    pub plot: PlotConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: None,
            function: 2,
            benchmark: 1,
            world_file: None,
            checkpoint: None,
            seeds: vec![0],
            out: PathBuf::from("out"),
            threads: None,
            z_grid: None,
            random_starts: 10,
            train: toml::Table::new(),
            cem: CemConfig::default(),
            chomp: ChompConfig::default(),
            cost: CostConfig::default(),
            prior: PriorConfig::default(),
            plot: PlotConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn mode(&self) -> CliResult<Mode> {
        self.mode.ok_or_else(|| CliError::Config("no mode given (set `mode` or pass --mode)".into()))
    }

    /// The mode's preset with the `[train]` table laid over it.
    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let preset = if self.mode()?.is_planning() { TrainConfig::planning() } else { TrainConfig::toy() };
        if self.train.is_empty() {
            return Ok(preset);
        }
        let mut table = toml::Table::try_from(&preset).map_err(|e| CliError::Config(format!("train preset: {e}")))?;
        for (k, v) in &self.train {
            if !table.contains_key(k) {
                return Err(CliError::Config(format!("unknown train field {k:?}")));
            }
            table.insert(k.clone(), v.clone());
        }
        table.try_into().map_err(|e| CliError::Config(format!("train: {e}")))
    }

    pub fn toy_function(&self) -> CliResult<ToyFunction> {
        ToyFunction::from_id(self.function).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn world(&self) -> CliResult<World2D> {
        match &self.world_file {
            Some(path) => World2D::load(path).map_err(|e| CliError::Config(e.to_string())),
            None => World2D::benchmark(self.benchmark).map_err(|e| CliError::Config(e.to_string())),
        }
    }

    pub fn z_grid(&self) -> CliResult<ZGrid> {
        Ok(self.z_grid.unwrap_or(if self.mode()?.is_planning() { ZGrid::PLANNING } else { ZGrid::TOY }))
    }

    pub fn plot_kind(&self) -> CliResult<PlotKind> {
        match &self.plot.kind {
            Some(k) => k.parse(),
            None => Err(CliError::Config("plot mode needs plot.kind".into())),
        }
    }

    /// Checkpoint path for one seed.
    pub fn checkpoint_path(&self, seed: u64) -> CliResult<PathBuf> {
        match &self.checkpoint {
            Some(t) => Ok(PathBuf::from(expand_seed(t, seed))),
            None => Ok(self.out.join(format!("model_seed{seed}.json"))),
        }
    }

    pub fn curves_path(&self, seed: u64) -> PathBuf {
        match &self.plot.curves {
            Some(t) => PathBuf::from(expand_seed(t, seed)),
            None => self.out.join(format!("curves_seed{seed}.csv")),
        }
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> CliResult<()> {
        let mode = self.mode()?;
        if self.seeds.is_empty() {
            return Err(CliError::Config("seed list is empty".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        let cfg_err = |e: solman::Error| CliError::Config(e.to_string());
        self.train_config()?.validate().map_err(cfg_err)?;
        match mode {
            Mode::ToyTrain | Mode::ToyEval => {
                self.toy_function()?;
            }
            Mode::Cem => {
                self.toy_function()?;
                self.cem.validate().map_err(cfg_err)?;
            }
            Mode::PlanTrain | Mode::PlanSample | Mode::PlanFinetune => {
                self.world()?;
                Chomp::new(self.prior.steps.max(1), self.chomp).map_err(cfg_err)?;
                let positive = |v: f64| v > 0.0;
                if self.prior.steps == 0 || !positive(self.prior.scale) || !positive(self.prior.dt) {
                    return Err(CliError::Config("prior needs steps >= 1, scale > 0 and dt > 0".into()));
                }
            }
            Mode::Plot => {
                self.plot_kind()?;
            }
        }
        let needs_checkpoint = matches!(mode, Mode::ToyEval | Mode::PlanSample | Mode::PlanFinetune)
            || (mode == Mode::Plot && self.plot_kind()? != PlotKind::Curves);
        for &seed in &self.seeds {
            if needs_checkpoint {
                let p = self.checkpoint_path(seed)?;
                if !p.is_file() {
                    return Err(CliError::Config(format!("checkpoint {} does not exist", p.display())));
                }
            }
            if mode == Mode::Plot && self.plot_kind()? == PlotKind::Curves {
                let p = self.curves_path(seed);
                if !p.is_file() {
                    return Err(CliError::Config(format!("curves file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

pub fn expand_seed(template: &str, seed: u64) -> String {
    template.replace("{seed}", &seed.to_string())
}
