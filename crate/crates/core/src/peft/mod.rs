//! Tuning strategies and the frozen/trainable partition.
//!
//! Prefix tuning prepends learned rows to the input of every selected
//! layer. Layer `j` always reads its own prompts: the prompt outputs of
//! layer `j - 1` are dropped (unless `carry` is set), so prompts act as
//! per-layer key/value context. The final encoder layer's prompt outputs
//! stay in the memory for cross-attention unless stripped.

mod prompt;

pub use prompt::{
    bake_reparam, generate_prompts, Placement, PromptBlock, PromptConfig, PromptGenerator,
    PromptInit, PromptMlp, PromptSite, Reparam,
};

pub use crate::model::inject_prefix;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamGroup, ParamId, ParamKind, PrefixInputs, Session, TransformerModel};
use crate::tasks::TaskSample;
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TuningStrategy {
    FullFinetune,
    Prefix(PromptConfig),
    Adapter { bottleneck_dim: usize },
    Bitfit,
}

impl TuningStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            TuningStrategy::FullFinetune => "full_finetune",
            TuningStrategy::Prefix(_) => "prefix",
            TuningStrategy::Adapter { .. } => "adapter",
            TuningStrategy::Bitfit => "bitfit",
        }
    }

    pub fn prompt(&self) -> Option<&PromptConfig> {
        match self {
            TuningStrategy::Prefix(p) => Some(p),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TuningStrategy::Prefix(p) => p.validate(),
            TuningStrategy::Adapter { bottleneck_dim: 0 } => {
                Err(Error::Config("strategy.bottleneck_dim must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Read-only summary of the partition.
#[derive(Clone, Debug, PartialEq)]
pub struct TunableView {
    pub trainable: Vec<ParamId>,
    pub frozen: Vec<ParamId>,
    pub trainable_count: usize,
    pub frozen_count: usize,
}

impl TunableView {
    pub fn total(&self) -> usize {
        self.trainable_count + self.frozen_count
    }

    pub fn fraction(&self) -> f64 {
        self.trainable_count as f64 / self.total() as f64
    }
}

/// A backbone with a strategy applied: extra parameters added and a
/// trainable mask over every parameter id.
#[derive(Clone, Debug)]
pub struct TunableModel {
    pub model: TransformerModel,
    pub strategy: TuningStrategy,
    pub prompts: Option<PromptGenerator>,
    trainable: Vec<bool>,
}

fn is_trainable(strategy: &TuningStrategy, group: ParamGroup, kind: ParamKind) -> bool {
    match strategy {
        TuningStrategy::FullFinetune => true,
        TuningStrategy::Prefix(_) => matches!(group, ParamGroup::Prompt | ParamGroup::PromptMlp),
        TuningStrategy::Adapter { .. } => group == ParamGroup::Adapter,
        // Every bias vector, which includes the output projection bias and
        // the layer norm shifts, but not the output weights.
        TuningStrategy::Bitfit => {
            group == ParamGroup::Backbone && matches!(kind, ParamKind::Bias | ParamKind::NormBias)
        }
    }
}

/// Add the strategy's parameters to `model` and mark the trainable set.
pub fn apply_strategy(mut model: TransformerModel, strategy: TuningStrategy, seed: u64) -> Result<TunableModel> {
    strategy.validate()?;
    if model.params.iter().any(|(_, p)| p.group != ParamGroup::Backbone) {
        return Err(Error::contract("apply_strategy expects a bare backbone"));
    }
    let mut prompts = None;
    match &strategy {
        TuningStrategy::Prefix(p) => prompts = Some(PromptGenerator::new(&mut model, p.clone(), seed)?),
        TuningStrategy::Adapter { bottleneck_dim } => model.add_adapters(*bottleneck_dim, seed),
        _ => {}
    }
    let mut t = TunableModel {
        model,
        strategy,
        prompts,
        trainable: Vec::new(),
    };
    t.refresh_mask();
    Ok(t)
}

impl TunableModel {
    fn refresh_mask(&mut self) {
        let mut mask = vec![false; self.model.params.capacity()];
        for (id, p) in self.model.params.iter() {
            mask[id.index()] = is_trainable(&self.strategy, p.group, p.kind);
        }
        self.trainable = mask;
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable.get(id.index()).copied().unwrap_or(false)
    }

    pub fn view(&self) -> TunableView {
        let mut v = TunableView {
            trainable: Vec::new(),
            frozen: Vec::new(),
            trainable_count: 0,
            frozen_count: 0,
        };
        for (id, p) in self.model.params.iter() {
            if self.is_trainable(id) {
                v.trainable.push(id);
                v.trainable_count += p.tensor.len();
            } else {
                v.frozen.push(id);
                v.frozen_count += p.tensor.len();
            }
        }
        v
    }

    /// Hash of backbone weights no non-finetune strategy ever updates
    /// (everything except bias vectors).
    pub fn shared_frozen_hash(&self) -> String {
        self.model.params.hash_where(|_, p| {
            p.group == ParamGroup::Backbone && !matches!(p.kind, ParamKind::Bias | ParamKind::NormBias)
        })
    }

    /// Hash of the parameters this strategy keeps frozen.
    pub fn frozen_hash(&self) -> String {
        let mask = &self.trainable;
        self.model.params.hash_where(|id, _| !mask[id.index()])
    }

    /// Collapse an MLP-reparameterized prompt generator in place.
    pub fn bake(&mut self) -> Result<bool> {
        let baked = match self.prompts.as_mut() {
            Some(g) => g.bake(&mut self.model)?,
            None => false,
        };
        if baked {
            if let TuningStrategy::Prefix(p) = &mut self.strategy {
                p.reparam = Reparam::None;
            }
            self.refresh_mask();
        }
        Ok(baked)
    }

    pub fn session(&self) -> Session<'_> {
        Session::new(&self.model.params).with_trainable(&self.trainable)
    }

    pub fn prefix_inputs<'a>(&'a self, s: &mut Session<'a>) -> Result<Option<PrefixInputs>> {
        match &self.prompts {
            Some(g) => Ok(Some(g.prefix_inputs(s)?)),
            None => Ok(None),
        }
    }

    pub fn loss<'a>(&'a self, s: &mut Session<'a>, sample: &TaskSample, smoothing: f64) -> Result<Var> {
        let prefix = self.prefix_inputs(s)?;
        self.model.loss(s, sample, prefix.as_ref(), smoothing)
    }

    pub fn predict<'a>(&'a self, s: &mut Session<'a>, sample: &TaskSample) -> Result<Vec<usize>> {
        let prefix = self.prefix_inputs(s)?;
        self.model.predict(s, sample, prefix.as_ref())
    }

    /// Teacher-forced logits `[T × V]`.
    pub fn logits<'a>(&'a self, s: &mut Session<'a>, sample: &TaskSample) -> Result<Var> {
        let prefix = self.prefix_inputs(s)?;
        let b = self.model.embed_inputs(s, sample, None)?;
        let mem = self.model.encoder_forward(s, &b, prefix.as_ref())?;
        let (input, _) = sample.teacher_forcing();
        self.model.decoder_forward(s, &mem, &input, prefix.as_ref())
    }
}

#[cfg(test)]
mod tests;
