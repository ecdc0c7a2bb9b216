//! Training loop, evaluation, backbone pretraining and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointHeader, MAGIC, VERSION};
pub use optim::{adam_step, ema_update, AdamConfig, AdamState};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{par_map, ExecMode};
use crate::model::{ModelConfig, ParamId, TransformerModel};
use crate::peft::{apply_strategy, TunableModel, TuningStrategy};
use crate::tasks::{
    acc_at_05, accuracy, corpus_bleu4, generate_pretrain_dataset, generate_split, parse_box,
    PretrainMix, TaskKind, TaskSample, Vocab,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Prompt-tuning learning rate.
    pub lr: f64,
    pub finetune_lr: f64,
    /// Used by adapter and bitfit.
    pub adapter_lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub label_smoothing: f64,
    pub ema_decay: Option<f64>,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_interval: usize,
    pub warmup_frac: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            finetune_lr: 1e-4,
            adapter_lr: 1e-3,
            batch_size: 128,
            steps: 1000,
            label_smoothing: 0.1,
            ema_decay: None,
            seed: 0,
            eval_interval: 100,
            warmup_frac: 0.05,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr", self.lr), ("finetune_lr", self.finetune_lr), ("adapter_lr", self.adapter_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "train.label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Config(format!("train.ema_decay must lie in [0, 1], got {d}")));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("train.warmup_frac must lie in [0, 1], got {}", self.warmup_frac)));
        }
        Ok(())
    }

    pub fn lr_for(&self, strategy: &TuningStrategy) -> f64 {
        match strategy {
            TuningStrategy::FullFinetune => self.finetune_lr,
            TuningStrategy::Prefix(_) => self.lr,
            TuningStrategy::Adapter { .. } | TuningStrategy::Bitfit => self.adapter_lr,
        }
    }

    /// Learning rate at 0-based `step`: linear warmup, then constant.
    pub fn schedule(&self, base: f64, step: usize) -> f64 {
        let warm = (self.warmup_frac * self.steps as f64).ceil() as usize;
        if warm == 0 || step >= warm {
            base
        } else {
            base * (step + 1) as f64 / warm as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub split: String,
    pub metric_name: String,
    pub value: f64,
    pub wall_ms: f64,
}

/// Append-only record of training and evaluation metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "step,split,metric_name,value,wall_ms";

    pub fn push(&mut self, step: usize, split: &str, metric_name: &str, value: f64, wall_ms: f64) {
        self.rows.push(MetricRow {
            step,
            split: split.into(),
            metric_name: metric_name.into(),
            value,
            wall_ms,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{:.3}", r.step, r.split, r.metric_name, r.value, r.wall_ms);
        }
        s
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Last value recorded for `(split, metric_name)`.
    pub fn last(&self, split: &str, metric_name: &str) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == split && r.metric_name == metric_name)
            .map(|r| r.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub metric: f64,
    pub loss: f64,
}

/// Task metric of predictions against the gold targets.
pub fn task_metric(kind: TaskKind, preds: &[Vec<usize>], samples: &[TaskSample]) -> Result<f64> {
    match kind {
        TaskKind::Refer => {
            let g = samples.first().map_or(8, |s| s.grid_side);
            let vocab = Vocab::new(g);
            let golds = samples
                .iter()
                .map(|s| parse_box(&s.target, &vocab).ok_or_else(|| Error::contract("refer target is not a box")))
                .collect::<Result<Vec<_>>>()?;
            let p: Vec<_> = preds.iter().map(|t| parse_box(t, &vocab)).collect();
            acc_at_05(&p, &golds)
        }
        TaskKind::Caption | TaskKind::GroundedCaption => {
            let refs: Vec<Vec<Vec<usize>>> = samples.iter().map(|s| vec![s.target.clone()]).collect();
            corpus_bleu4(preds, &refs)
        }
        TaskKind::Entail | TaskKind::Qa | TaskKind::Copy | TaskKind::Denoise => {
            let golds: Vec<Vec<usize>> = samples.iter().map(|s| s.target.clone()).collect();
            accuracy(preds, &golds)
        }
    }
}

/// Task metric and mean clean loss over single-kind `samples`.
pub fn evaluate(tm: &TunableModel, samples: &[TaskSample], smoothing: f64, mode: ExecMode) -> Result<EvalResult> {
    let kind = samples
        .first()
        .ok_or_else(|| Error::contract("evaluate needs at least one sample"))?
        .kind;
    if samples.iter().any(|s| s.kind != kind) {
        return Err(Error::contract("evaluate expects samples of a single task kind"));
    }
    let outs = par_map(mode, samples, |smp| -> Result<(Vec<usize>, f64)> {
        let mut s = tm.session();
        let pred = tm.predict(&mut s, smp)?;
        let mut s = tm.session();
        let l = tm.loss(&mut s, smp, smoothing)?;
        Ok((pred, s.tape.value(l).data()[0]))
    });
    let mut preds = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for o in outs {
        let (p, l) = o?;
        preds.push(p);
        loss += l;
    }
    Ok(EvalResult {
        metric: task_metric(kind, &preds, samples)?,
        loss: loss / samples.len() as f64,
    })
}

/// Mean loss and summed gradients of one batch, reduced in sample order.
pub fn batch_gradients(
    tm: &TunableModel,
    batch: &[&TaskSample],
    smoothing: f64,
    dropout_seed: u64,
    mode: ExecMode,
) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
    let rate = tm.model.config.dropout;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let outs = par_map(mode, &idx, |&i| -> Result<(f64, Vec<(ParamId, Tensor)>)> {
        let mut s = tm
            .session()
            .with_dropout(rate, dropout_seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64));
        let l = tm.loss(&mut s, batch[i], smoothing)?;
        let v = s.tape.value(l).data()[0];
        Ok((v, s.param_grads(l)?))
    });
    let mut total = 0.0;
    let mut acc: Vec<(ParamId, Tensor)> = Vec::new();
    for o in outs {
        let (l, g) = o?;
        total += l;
        if acc.is_empty() {
            acc = g;
        } else {
            for ((_, a), (_, b)) in acc.iter_mut().zip(&g) {
                a.add_assign(b);
            }
        }
    }
    let n = batch.len() as f64;
    for (_, g) in acc.iter_mut() {
        g.scale_in_place(1.0 / n);
    }
    Ok((total / n, acc))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: MetricsLog,
    pub steps: usize,
    /// Mean training loss of the last logging window.
    pub final_loss: f64,
    /// Best held-out metric and the step it was reached at.
    pub best: Option<(usize, f64)>,
    pub final_eval: Option<EvalResult>,
    pub wall_ms: f64,
}

fn swap_in(tm: &mut TunableModel, values: &BTreeMap<ParamId, Tensor>) -> Vec<(ParamId, Tensor)> {
    values
        .iter()
        .map(|(id, t)| (*id, std::mem::replace(tm.model.params.tensor_mut(*id), t.clone())))
        .collect()
}

/// Train the strategy's trainable set of `tm` on `train_set`, evaluating on
/// `eval_set` every `eval_interval` steps and at the end.
pub fn train(
    tm: &mut TunableModel,
    train_set: &[TaskSample],
    eval_set: &[TaskSample],
    cfg: &TrainConfig,
    mode: ExecMode,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let start = Instant::now();
    let ms = |s: &Instant| s.elapsed().as_secs_f64() * 1e3;
    let base_lr = cfg.lr_for(&tm.strategy);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut state = AdamState::new();
    let mut ema: Option<BTreeMap<ParamId, Tensor>> = cfg.ema_decay.map(|_| {
        tm.view()
            .trainable
            .iter()
            .map(|id| (*id, tm.model.params.tensor(*id).clone()))
            .collect()
    });
    let mut log = MetricsLog::default();
    let mut window = (0.0, 0usize);
    let mut final_loss = f64::NAN;
    let mut best: Option<(usize, f64)> = None;
    let mut final_eval = None;

    let mut run_eval = |tm: &mut TunableModel, step: usize, log: &mut MetricsLog, ema: &Option<BTreeMap<ParamId, Tensor>>| -> Result<Option<EvalResult>> {
        if eval_set.is_empty() {
            return Ok(None);
        }
        let saved = ema.as_ref().map(|e| swap_in(tm, e));
        let r = evaluate(tm, eval_set, cfg.label_smoothing, mode);
        if let Some(saved) = saved {
            for (id, t) in saved {
                *tm.model.params.tensor_mut(id) = t;
            }
        }
        let r = r?;
        let kind = eval_set[0].kind;
        log.push(step, "eval", kind.metric_name(), r.metric, ms(&start));
        log.push(step, "eval", "loss", r.loss, ms(&start));
        log::info!("{} step {step}: {} {:.4}, eval loss {:.4}", tm.strategy.name(), kind.metric_name(), r.metric, r.loss);
        if best.map_or(true, |(_, b)| r.metric > b) {
            best = Some((step, r.metric));
        }
        Ok(Some(r))
    };

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train_set[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_gradients(tm, &batch, cfg.label_smoothing, cfg.seed ^ (step as u64) << 20, mode)?;
        if !loss.is_finite() || grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite {
                step,
                loss,
                detail: format!(
                    "strategy {}, lr {}, batch of {}; lower the learning rate or check the data",
                    tm.strategy.name(),
                    cfg.schedule(base_lr, step),
                    batch.len()
                ),
            });
        }
        adam_step(&mut tm.model.params, &grads, &mut state, &cfg.adam, cfg.schedule(base_lr, step))?;
        if let (Some(shadow), Some(d)) = (ema.as_mut(), cfg.ema_decay) {
            for (id, s) in shadow.iter_mut() {
                ema_update(s, tm.model.params.tensor(*id), d);
            }
        }
        window.0 += loss;
        window.1 += 1;
        let done = step + 1;
        if cfg.eval_interval > 0 && done % cfg.eval_interval == 0 || done == cfg.steps {
            final_loss = window.0 / window.1 as f64;
            log.push(done, "train", "loss", final_loss, ms(&start));
            log::debug!("{} step {done}/{}: train loss {final_loss:.4}", tm.strategy.name(), cfg.steps);
            window = (0.0, 0);
            final_eval = run_eval(tm, done, &mut log, &ema)?;
        }
    }
    if cfg.steps == 0 {
        final_eval = run_eval(tm, 0, &mut log, &ema)?;
    }
    if let Some(e) = ema {
        swap_in(tm, &e);
    }
    Ok(TrainOutcome {
        log,
        steps: cfg.steps,
        final_loss,
        best,
        final_eval,
        wall_ms: ms(&start),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mix: PretrainMixConfig,
    pub samples: usize,
    pub eval_samples: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub label_smoothing: f64,
    pub eval_interval: usize,
    pub seed: u64,
}

/// Serializable mirror of [`PretrainMix`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainMixConfig {
    pub caption: f64,
    pub grounded_caption: f64,
    pub copy: f64,
    pub denoise: f64,
}

impl Default for PretrainMixConfig {
    fn default() -> Self {
        let m = PretrainMix::default();
        Self {
            caption: m.caption,
            grounded_caption: m.grounded_caption,
            copy: m.copy,
            denoise: m.denoise,
        }
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mix: PretrainMixConfig::default(),
            samples: 20_000,
            eval_samples: 100,
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            label_smoothing: 0.1,
            eval_interval: 0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            finetune_lr: self.lr,
            batch_size: self.batch_size,
            steps: self.steps,
            label_smoothing: self.label_smoothing,
            seed: self.seed,
            eval_interval: self.eval_interval,
            ..TrainConfig::default()
        }
    }
}

/// Multitask pretraining of a fresh backbone on its own seed stream.
/// The log's eval rows report caption BLEU.
pub fn pretrain(model: &ModelConfig, cfg: &PretrainConfig, mode: ExecMode) -> Result<(TransformerModel, MetricsLog)> {
    model.validate()?;
    let mix = PretrainMix {
        caption: cfg.mix.caption,
        grounded_caption: cfg.mix.grounded_caption,
        copy: cfg.mix.copy,
        denoise: cfg.mix.denoise,
    };
    let g = model.grid_side;
    let data = generate_pretrain_dataset(&mix, cfg.seed, cfg.samples, g)?;
    let eval = if cfg.eval_samples > 0 {
        generate_split(TaskKind::Caption, cfg.seed ^ 0x7072_6574, 1, cfg.eval_samples, g)?.1
    } else {
        Vec::new()
    };
    let model = TransformerModel::new(model.clone(), cfg.seed)?;
    let mut tm = apply_strategy(model, TuningStrategy::FullFinetune, cfg.seed)?;
    let out = train(&mut tm, &data, &eval, &cfg.train_config(), mode)?;
    Ok((tm.model, out.log))
}
