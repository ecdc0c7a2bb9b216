//! One-step FGSM on encoder input embeddings.
//!
//! The gradient of the training loss (gold targets, same label smoothing)
//! is taken with respect to the embedded `[image ; SEP ; text]` rows, and
//! the selected rows move by `ε·sign(∇)`. Prompt rows are parameters, not
//! inputs, and are never touched. `ε` is given relative to the RMS of the
//! backbone's token and image embedding tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{par_map, ExecMode};
use crate::model::{EncodedBatch, Provenance};
use crate::peft::TunableModel;
use crate::tasks::{TaskSample, TaskKind};
use crate::tensor::Tensor;
use crate::train::{task_metric, Checkpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackTarget {
    Text,
    Image,
    Both,
}

impl AttackTarget {
    pub fn selects(self, p: Provenance) -> bool {
        match (self, p) {
            (AttackTarget::Text | AttackTarget::Both, Provenance::Text) => true,
            (AttackTarget::Image | AttackTarget::Both, Provenance::Image) => true,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Perturbation sizes as multiples of the embedding RMS.
    pub epsilons: Vec<f64>,
    pub target: AttackTarget,
    pub label_smoothing: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.0, 0.01, 0.05, 0.1, 0.2],
            target: AttackTarget::Both,
            label_smoothing: 0.1,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() {
            return Err(Error::Config("attack.epsilons must not be empty".into()));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
            return Err(Error::Config(format!("attack.epsilons must be finite and >= 0, got {e}")));
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x + ε·sign(g)` on the rows where `mask` is set; other rows are copied
/// bit for bit.
pub fn fgsm_perturb(embeddings: &Tensor, grad: &Tensor, epsilon: f64, mask: &[bool]) -> Result<Tensor> {
    if embeddings.shape() != grad.shape() || embeddings.rank() != 2 || mask.len() != embeddings.rows() {
        return Err(Error::contract(format!(
            "fgsm_perturb: embeddings {:?}, gradient {:?}, mask of {}",
            embeddings.shape(),
            grad.shape(),
            mask.len()
        )));
    }
    let mut out = embeddings.clone();
    for (r, &hit) in mask.iter().enumerate() {
        if !hit {
            continue;
        }
        for (x, g) in out.row_mut(r).iter_mut().zip(grad.row(r)) {
            *x += epsilon * sign(*g);
        }
    }
    Ok(out)
}

/// Clean and adversarial loss and prediction for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleAttack {
    pub clean_loss: f64,
    pub adv_loss: f64,
    pub clean_pred: Vec<usize>,
    pub adv_pred: Vec<usize>,
}

/// Input embeddings of `sample` and the loss gradient with respect to them.
pub fn input_gradient(tm: &TunableModel, sample: &TaskSample, smoothing: f64) -> Result<(Tensor, Tensor, Vec<Provenance>, f64)> {
    let mut s = tm.session();
    let emb = tm.model.embed_inputs(&mut s, sample, None)?;
    let x = s.tape.value(emb.embeddings).clone();
    let mut s = tm.session();
    let leaf = s.tape.leaf(x.clone(), true);
    let batch = EncodedBatch {
        embeddings: leaf,
        provenance: emb.provenance.clone(),
    };
    let prefix = tm.prefix_inputs(&mut s)?;
    let mem = tm.model.encoder_forward(&mut s, &batch, prefix.as_ref())?;
    let l = tm.model.loss_from_memory(&mut s, &mem, sample, prefix.as_ref(), smoothing)?;
    let loss = s.tape.value(l).data()[0];
    s.tape.backward(l)?;
    let g = s.tape.take_grad(leaf).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((x, g, emb.provenance, loss))
}

fn run_on(tm: &TunableModel, x: Tensor, provenance: &[Provenance], sample: &TaskSample, smoothing: f64) -> Result<(f64, Vec<usize>)> {
    let mut s = tm.session();
    let batch = EncodedBatch {
        embeddings: s.tape.constant(x),
        provenance: provenance.to_vec(),
    };
    let prefix = tm.prefix_inputs(&mut s)?;
    let mem = tm.model.encoder_forward(&mut s, &batch, prefix.as_ref())?;
    let l = tm.model.loss_from_memory(&mut s, &mem, sample, prefix.as_ref(), smoothing)?;
    let loss = s.tape.value(l).data()[0];
    let pred = tm.model.predict_from_batch(&mut s, &batch, sample, prefix.as_ref())?;
    Ok((loss, pred))
}

/// Attack one sample at each absolute `epsilon`. Clean numbers come from
/// the same embedding path, so `ε = 0` reproduces them exactly.
pub fn attack_sample(
    tm: &TunableModel,
    sample: &TaskSample,
    epsilons_abs: &[f64],
    target: AttackTarget,
    smoothing: f64,
) -> Result<Vec<SampleAttack>> {
    let (x, g, prov, _) = input_gradient(tm, sample, smoothing)?;
    let mask: Vec<bool> = prov.iter().map(|p| target.selects(*p)).collect();
    let (clean_loss, clean_pred) = run_on(tm, x.clone(), &prov, sample, smoothing)?;
    epsilons_abs
        .iter()
        .map(|&eps| {
            let adv = fgsm_perturb(&x, &g, eps, &mask)?;
            let (adv_loss, adv_pred) = run_on(tm, adv, &prov, sample, smoothing)?;
            Ok(SampleAttack {
                clean_loss,
                adv_loss,
                clean_pred: clean_pred.clone(),
                adv_pred,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub strategy: String,
    /// As configured (relative to the embedding RMS).
    pub epsilon: f64,
    pub task: String,
    pub clean: f64,
    pub adversarial: f64,
    pub abs_drop: f64,
    /// `abs_drop / clean`, absent when `clean == 0`.
    pub rel_drop: Option<f64>,
    pub clean_loss: f64,
    pub adv_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub const HEADER: &'static str = "strategy,epsilon,task,clean,adversarial,abs_drop,rel_drop";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let rel = r.rel_drop.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.strategy, r.epsilon, r.task, r.clean, r.adversarial, r.abs_drop, rel
            );
        }
        s
    }

    pub fn extend(&mut self, other: RobustnessReport) {
        self.rows.extend(other.rows);
    }
}

/// Clean versus FGSM metric for every `(model, ε)` pair on single-task
/// `samples`. Rows are ordered by model, then by ε as configured.
pub fn evaluate_robustness(
    models: &[(&str, &TunableModel)],
    samples: &[TaskSample],
    cfg: &AttackConfig,
    mode: ExecMode,
) -> Result<RobustnessReport> {
    cfg.validate()?;
    let kind: TaskKind = samples
        .first()
        .ok_or_else(|| Error::contract("robustness needs at least one sample"))?
        .kind;
    if samples.iter().any(|s| s.kind != kind) {
        return Err(Error::contract("robustness expects samples of a single task kind"));
    }
    if let Some((_, first)) = models.first() {
        if let Some((name, _)) = models.iter().find(|(_, m)| m.model.config != first.model.config) {
            return Err(Error::Checkpoint(format!("model {name} has a different ModelConfig")));
        }
    }
    let mut report = RobustnessReport::default();
    for (name, tm) in models {
        let rms = tm.model.embedding_rms();
        let abs: Vec<f64> = cfg.epsilons.iter().map(|e| e * rms).collect();
        let per = par_map(mode, samples, |smp| attack_sample(tm, smp, &abs, cfg.target, cfg.label_smoothing));
        let per: Vec<Vec<SampleAttack>> = per.into_iter().collect::<Result<_>>()?;
        let clean_preds: Vec<Vec<usize>> = per.iter().map(|p| p[0].clean_pred.clone()).collect();
        let clean = task_metric(kind, &clean_preds, samples)?;
        let n = samples.len() as f64;
        let clean_loss = per.iter().map(|p| p[0].clean_loss).sum::<f64>() / n;
        for (j, &eps) in cfg.epsilons.iter().enumerate() {
            let adv_preds: Vec<Vec<usize>> = per.iter().map(|p| p[j].adv_pred.clone()).collect();
            let adversarial = task_metric(kind, &adv_preds, samples)?;
            let abs_drop = clean - adversarial;
            report.rows.push(RobustnessRow {
                strategy: name.to_string(),
                epsilon: eps,
                task: kind.name().to_string(),
                clean,
                adversarial,
                abs_drop,
                rel_drop: (clean > 0.0).then(|| abs_drop / clean),
                clean_loss,
                adv_loss: per.iter().map(|p| p[j].adv_loss).sum::<f64>() / n,
            });
        }
    }
    Ok(report)
}

/// [`evaluate_robustness`] over saved tuned checkpoints, named by strategy.
pub fn evaluate_checkpoints(
    ckpts: &[Checkpoint],
    samples: &[TaskSample],
    cfg: &AttackConfig,
    mode: ExecMode,
) -> Result<RobustnessReport> {
    let first = ckpts.first().map(|c| c.header.model.clone());
    let models = ckpts
        .iter()
        .map(|c| c.tunable(first.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let named: Vec<(&str, &TunableModel)> = models.iter().map(|m| (m.strategy.name(), m)).collect();
    evaluate_robustness(&named, samples, cfg, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TransformerModel};
    use crate::peft::{apply_strategy, PromptConfig, TuningStrategy};
    use crate::tasks::generate_dataset;
    use proptest::prelude::*;

    fn models() -> Vec<TunableModel> {
        let bb = TransformerModel::new(ModelConfig::toy(), 4).unwrap();
        vec![
            apply_strategy(bb.clone(), TuningStrategy::FullFinetune, 0).unwrap(),
            apply_strategy(bb, TuningStrategy::Prefix(PromptConfig { length: 4, ..Default::default() }), 0).unwrap(),
        ]
    }

    proptest! {
        #[test]
        fn linear_loss_rises_by_eps_abs_w(w in -3.0f64..3.0, x in -3.0f64..3.0, eps in 0.0f64..0.5) {
            prop_assume!(w != 0.0);
            let xt = Tensor::new(vec![1, 1], vec![x]).unwrap();
            let g = Tensor::new(vec![1, 1], vec![w]).unwrap();
            let adv = fgsm_perturb(&xt, &g, eps, &[true]).unwrap();
            let rise = w * adv.data()[0] - w * x;
            prop_assert!((rise - eps * w.abs()).abs() <= 1e-12);
        }

        #[test]
        fn attacked_rows_move_by_exactly_eps(seed in 0u64..1000, eps in 0.001f64..1.0) {
            let x = Tensor::from_fn(&[5, 3], |i| ((i as u64 * 7 + seed) % 11) as f64 * 0.25 - 1.0);
            let g = Tensor::from_fn(&[5, 3], |i| if (i as u64 + seed) % 2 == 0 { 0.5 } else { -2.0 });
            let mask = [true, false, true, false, true];
            let adv = fgsm_perturb(&x, &g, eps, &mask).unwrap();
            for r in 0..5 {
                for c in 0..3 {
                    let (a, b) = (adv.at2(r, c), x.at2(r, c));
                    if mask[r] {
                        prop_assert!(((a - b).abs() - eps).abs() <= 1e-12);
                    } else {
                        prop_assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn target_selection() {
        use Provenance::*;
        assert!(AttackTarget::Text.selects(Text) && !AttackTarget::Text.selects(Image));
        assert!(AttackTarget::Image.selects(Image) && !AttackTarget::Image.selects(Text));
        for p in [Separator, Padding] {
            assert!(!AttackTarget::Both.selects(p));
        }
    }

    #[test]
    fn zero_epsilon_is_exactly_harmless_and_rows_are_complete() {
        let ms = models();
        let named: Vec<(&str, &TunableModel)> = ms.iter().map(|m| (m.strategy.name(), m)).collect();
        let data = generate_dataset(TaskKind::Entail, 6, 6, 8).unwrap();
        let cfg = AttackConfig {
            epsilons: vec![0.0, 0.05, 0.5],
            ..AttackConfig::default()
        };
        let r = evaluate_robustness(&named, &data, &cfg, ExecMode::default()).unwrap();
        assert_eq!(r.rows.len(), 2 * 3);
        for row in r.rows.iter().filter(|r| r.epsilon == 0.0) {
            assert_eq!(row.abs_drop, 0.0);
            assert_eq!(row.adv_loss.to_bits(), row.clean_loss.to_bits());
        }
        for row in &r.rows {
            assert!(row.epsilon == 0.0 || row.adv_loss >= row.clean_loss, "{row:?}");
            match row.rel_drop {
                Some(v) => assert!((v - row.abs_drop / row.clean).abs() < 1e-15),
                None => assert_eq!(row.clean, 0.0),
            }
        }
        let again = evaluate_robustness(&named, &data, &cfg, ExecMode::Sequential).unwrap();
        assert_eq!(r, again);
        assert_eq!(r.to_csv().lines().next().unwrap(), RobustnessReport::HEADER);
    }

    #[test]
    fn prompts_are_untouched_and_configs_must_match() {
        let ms = models();
        let before = ms[1].model.params.hash_where(|_, _| true);
        let data = generate_dataset(TaskKind::Refer, 1, 2, 8).unwrap();
        attack_sample(&ms[1], &data[0], &[0.1], AttackTarget::Both, 0.1).unwrap();
        assert_eq!(ms[1].model.params.hash_where(|_, _| true), before);

        let other = TransformerModel::new(ModelConfig { ffn_dim: 32, ..ModelConfig::toy() }, 0).unwrap();
        let other = apply_strategy(other, TuningStrategy::Bitfit, 0).unwrap();
        let named = [("a", &ms[0]), ("b", &other)];
        assert!(evaluate_robustness(&named, &data, &AttackConfig::default(), ExecMode::default()).is_err());
    }

    #[test]
    fn text_only_attack_leaves_image_rows() {
        let ms = models();
        let smp = generate_dataset(TaskKind::Refer, 2, 1, 8).unwrap().remove(0);
        let (x, g, prov, _) = input_gradient(&ms[0], &smp, 0.1).unwrap();
        let mask: Vec<bool> = prov.iter().map(|p| AttackTarget::Text.selects(*p)).collect();
        let adv = fgsm_perturb(&x, &g, 0.3, &mask).unwrap();
        for (r, p) in prov.iter().enumerate() {
            let same = adv.row(r) == x.row(r);
            assert_eq!(same, *p != Provenance::Text);
        }
    }
}
