use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, AttackTarget};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::peft::{Placement, PromptConfig, TuningStrategy};
use crate::tasks::{TaskKind, Vocab, IMAGE_VOCAB_SIZE};
use crate::train::{PretrainConfig, TrainConfig};

/// Sizes of the generated splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_samples: 1000,
            eval_samples: 100,
        }
    }
}

/// A model size for the timing report; unspecified fields keep the
/// experiment's model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleConfig {
    pub name: String,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
}

impl ScaleConfig {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            num_encoder_layers: self.num_encoder_layers,
            num_decoder_layers: self.num_decoder_layers,
            ..base.clone()
        }
    }
}

fn scale(name: &str, h: usize, heads: usize, f: usize, layers: usize) -> ScaleConfig {
    ScaleConfig {
        name: name.into(),
        hidden_dim: h,
        num_heads: heads,
        ffn_dim: f,
        num_encoder_layers: layers,
        num_decoder_layers: layers,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lengths: Vec<usize>,
    pub placements: Vec<Placement>,
    pub mlp_mid_dim: usize,
    pub adapter_bottleneck: usize,
    pub scales: Vec<ScaleConfig>,
    pub timing_reps: usize,
    /// Training samples per timing measurement.
    pub timing_samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lengths: vec![10, 16, 32, 64, 100, 120],
            placements: Placement::ALL.to_vec(),
            mlp_mid_dim: 64,
            adapter_bottleneck: 8,
            scales: vec![
                scale("small", 32, 2, 64, 1),
                scale("base", 64, 4, 128, 2),
                scale("large", 128, 4, 256, 3),
            ],
            timing_reps: 3,
            timing_samples: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessConfig {
    /// Multiples of the embedding RMS.
    pub epsilons: Vec<f64>,
    pub target: AttackTarget,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskKind>,
    /// Clean metrics closer than this count as the same accuracy band.
    pub band: f64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            epsilons: a.epsilons,
            target: a.target,
            seeds: vec![0, 1, 2, 3, 4],
            tasks: vec![TaskKind::Refer, TaskKind::Entail],
            band: 0.1,
        }
    }
}

impl RobustnessConfig {
    pub fn attack(&self, label_smoothing: f64) -> AttackConfig {
        AttackConfig {
            epsilons: self.epsilons.clone(),
            target: self.target,
            label_smoothing,
        }
    }
}

/// Everything one experiment needs. The top-level `seed` drives data
/// generation, pretraining, strategy initialization and batch order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Load this backbone checkpoint instead of pretraining.
    pub backbone: Option<PathBuf>,
    pub tasks: Vec<TaskKind>,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub strategy: TuningStrategy,
    pub data: DataConfig,
    pub sweep: SweepConfig,
    pub robustness: RobustnessConfig,
    /// `(strip_encoder_prompts, carry)` from the command line, applied to
    /// every prompt configuration built from this experiment.
    #[serde(skip)]
    pub prompt_flags: (bool, bool),
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            backbone: None,
            tasks: vec![TaskKind::Refer],
            model: ModelConfig::toy(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig {
                batch_size: 16,
                ..TrainConfig::default()
            },
            strategy: TuningStrategy::Prefix(PromptConfig::default()),
            data: DataConfig::default(),
            sweep: SweepConfig::default(),
            robustness: RobustnessConfig::default(),
            prompt_flags: (false, false),
        }
    }
}

fn downstream(tasks: &[TaskKind], field: &str) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Config(format!("{field} must not be empty")));
    }
    if let Some(t) = tasks.iter().find(|t| !TaskKind::DOWNSTREAM.contains(t)) {
        return Err(Error::Config(format!("{field}: {} is a pretraining task", t.name())));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.validate()?;
        let vocab = Vocab::new(m.grid_side).len();
        if m.vocab_size != vocab {
            return Err(Error::Config(format!(
                "model.vocab_size must be {vocab} for model.grid_side = {}, got {}",
                m.grid_side, m.vocab_size
            )));
        }
        if m.image_vocab_size != IMAGE_VOCAB_SIZE {
            return Err(Error::Config(format!(
                "model.image_vocab_size must be {IMAGE_VOCAB_SIZE}, got {}",
                m.image_vocab_size
            )));
        }
        self.train.validate()?;
        self.strategy.validate()?;
        downstream(&self.tasks, "tasks")?;
        downstream(&self.robustness.tasks, "robustness.tasks")?;
        if self.data.train_samples == 0 || self.data.eval_samples == 0 {
            return Err(Error::Config("data.train_samples and data.eval_samples must be >= 1".into()));
        }
        if self.sweep.lengths.is_empty() {
            return Err(Error::Config("sweep.lengths must not be empty".into()));
        }
        if self.sweep.placements.is_empty() {
            return Err(Error::Config("sweep.placements must not be empty".into()));
        }
        if self.sweep.mlp_mid_dim == 0 || self.sweep.adapter_bottleneck == 0 {
            return Err(Error::Config("sweep.mlp_mid_dim and sweep.adapter_bottleneck must be >= 1".into()));
        }
        if self.sweep.timing_reps < 3 {
            return Err(Error::Config(format!("sweep.timing_reps must be >= 3, got {}", self.sweep.timing_reps)));
        }
        if self.sweep.timing_samples == 0 {
            return Err(Error::Config("sweep.timing_samples must be >= 1".into()));
        }
        for s in &self.sweep.scales {
            s.apply(m)
                .validate()
                .map_err(|e| Error::Config(format!("sweep.scales[{}]: {e}", s.name)))?;
        }
        if self.robustness.seeds.is_empty() {
            return Err(Error::Config("robustness.seeds must not be empty".into()));
        }
        self.robustness.attack(self.train.label_smoothing).validate()?;
        if !(self.pretrain.lr >= 0.0 && self.pretrain.lr.is_finite()) {
            return Err(Error::Config(format!("pretrain.lr must be finite and >= 0, got {}", self.pretrain.lr)));
        }
        if self.pretrain.samples == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain.samples and pretrain.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Prompt settings used as the base of every prompt sweep.
    pub fn base_prompt(&self) -> PromptConfig {
        let mut p = self.strategy.prompt().cloned().unwrap_or_default();
        p.strip_encoder_prompts |= self.prompt_flags.0;
        p.carry |= self.prompt_flags.1;
        p
    }

    /// The run strategy with the command-line prompt flags applied.
    pub fn run_strategy(&self) -> TuningStrategy {
        match &self.strategy {
            TuningStrategy::Prefix(_) => TuningStrategy::Prefix(self.base_prompt()),
            other => other.clone(),
        }
    }
}
