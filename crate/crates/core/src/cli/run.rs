use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::attack::{evaluate_robustness, RobustnessReport, RobustnessRow};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::model::TransformerModel;
use crate::peft::{apply_strategy, PromptConfig, Reparam, TunableModel, TuningStrategy};
use crate::tasks::{generate_dataset, generate_split, TaskKind, TaskSample};
use crate::train::{evaluate, pretrain, train, Checkpoint, MetricsLog, TrainConfig};

use super::config::ExperimentConfig;
use super::plot::{line_chart, Series};
use super::report::{trend_csv, RunReport, RunRow, TimingReport, TimingRow, TrendRow};

/// A loaded or pretrained backbone plus the experiment it serves.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub mode: ExecMode,
    pub backbone: TransformerModel,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pretrain a backbone and write it with its log under `out_dir`.
/// Returns the model, the log and the caption BLEU of an untrained model
/// of the same shape for comparison.
pub fn run_pretrain(cfg: &ExperimentConfig, mode: ExecMode) -> Result<(TransformerModel, MetricsLog, f64)> {
    let mut p = cfg.pretrain.clone();
    p.seed = cfg.seed;
    log::info!("pretraining for {} steps on {} samples", p.steps, p.samples);
    let (model, log) = pretrain(&cfg.model, &p, mode)?;
    Checkpoint::from_backbone(&model, p.steps as u64).save(ensure_dir(&cfg.out_dir)?.join("backbone.pftf"))?;
    write(&cfg.out_dir.join("pretrain_log.csv"), &log.to_csv())?;
    let untrained = if p.eval_samples > 0 {
        let eval = generate_split(TaskKind::Caption, p.seed ^ 0x7072_6574, 1, p.eval_samples, cfg.model.grid_side)?.1;
        let fresh = apply_strategy(TransformerModel::new(cfg.model.clone(), p.seed)?, TuningStrategy::FullFinetune, 0)?;
        evaluate(&fresh, &eval, p.label_smoothing, mode)?.metric
    } else {
        f64::NAN
    };
    let summary = serde_json::json!({
        "command": "pretrain",
        "seed": cfg.seed,
        "steps": p.steps,
        "caption_bleu4": log.last("eval", "bleu4"),
        "untrained_caption_bleu4": if untrained.is_nan() { None } else { Some(untrained) },
    });
    write(&cfg.out_dir.join("pretrain_summary.json"), &(serde_json::to_string_pretty(&summary).unwrap() + "\n"))?;
    Ok((model, log, untrained))
}

fn ensure_dir(p: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(p)?;
    Ok(p.to_path_buf())
}

impl Experiment {
    /// Load `cfg.backbone` when set, otherwise pretrain one.
    pub fn prepare(cfg: ExperimentConfig, mode: ExecMode) -> Result<Self> {
        let backbone = match &cfg.backbone {
            Some(path) => Checkpoint::load(path)?.backbone(Some(&cfg.model))?,
            None => run_pretrain(&cfg, mode)?.0,
        };
        Ok(Self { cfg, mode, backbone })
    }

    pub fn with_backbone(cfg: ExperimentConfig, mode: ExecMode, backbone: TransformerModel) -> Result<Self> {
        if backbone.config != cfg.model {
            return Err(Error::Checkpoint("backbone ModelConfig differs from the experiment's".into()));
        }
        Ok(Self { cfg, mode, backbone })
    }

    fn split(&self, task: TaskKind, seed: u64) -> Result<(Vec<TaskSample>, Vec<TaskSample>)> {
        let d = &self.cfg.data;
        generate_split(task, seed, d.train_samples, d.eval_samples, self.cfg.model.grid_side)
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.cfg.train.clone()
        }
    }

    /// Train one strategy on one task from the shared backbone.
    pub fn train_one(
        &self,
        strategy: &TuningStrategy,
        data: &(Vec<TaskSample>, Vec<TaskSample>),
        seed: u64,
    ) -> Result<(TunableModel, crate::train::TrainOutcome)> {
        let mut tm = apply_strategy(self.backbone.clone(), strategy.clone(), seed)?;
        let mut tc = self.train_config(seed);
        if tm.view().trainable_count == 0 {
            tc.steps = 0;
        }
        let out = train(&mut tm, &data.0, &data.1, &tc, self.mode)?;
        Ok((tm, out))
    }

    fn row(&self, sweep: &str, strategy: &TuningStrategy, task: TaskKind) -> RunRow {
        let p = strategy.prompt();
        RunRow {
            sweep: sweep.into(),
            strategy: strategy.name().into(),
            l: p.map(|p| p.length),
            placement: p.map(|p| p.placement.name().into()),
            reparam: p.map(|p| p.reparam.name().into()),
            task: task.name().into(),
            metric_name: task.metric_name().into(),
            metric: None,
            best_metric: None,
            steps_to_best: None,
            eval_loss: None,
            baked_metric: None,
            delta: None,
            avg_over_tasks: None,
            trainable_count: 0,
            trainable_fraction: 0.0,
            frozen_hash: String::new(),
            status: "ok".into(),
            wall_ms: 0.0,
        }
    }

    fn run_cell(&self, sweep: &str, idx: usize, strategy: &TuningStrategy, task: TaskKind, data: &(Vec<TaskSample>, Vec<TaskSample>)) -> Result<RunRow> {
        let start = Instant::now();
        log::info!("{sweep} cell {idx}: {} on {}", strategy.name(), task.name());
        let mut row = self.row(sweep, strategy, task);
        let (tm, out) = self.train_one(strategy, data, self.cfg.seed)?;
        let v = tm.view();
        row.trainable_count = v.trainable_count;
        row.trainable_fraction = v.fraction();
        row.frozen_hash = tm.shared_frozen_hash()[..16].to_string();
        if let Some(e) = out.final_eval {
            row.metric = Some(e.metric);
            row.eval_loss = Some(e.loss);
        }
        if let Some((step, m)) = out.best {
            row.best_metric = Some(m);
            row.steps_to_best = Some(step);
        }
        if matches!(strategy.prompt(), Some(PromptConfig { reparam: Reparam::Mlp { .. }, .. })) {
            let mut baked = tm.clone();
            baked.bake()?;
            row.baked_metric = Some(evaluate(&baked, &data.1, self.cfg.train.label_smoothing, self.mode)?.metric);
        }
        let stem = format!("{sweep}_{idx:02}_{}_{}", strategy.name(), task.name());
        write(&self.cfg.out_dir.join("logs").join(format!("{stem}.csv")), &out.log.to_csv())?;
        let ck = self.cfg.out_dir.join("checkpoints");
        std::fs::create_dir_all(&ck)?;
        Checkpoint::from_tunable(&tm, out.steps as u64).save(ck.join(format!("{stem}.pftf")))?;
        row.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(row)
    }

    /// Every cell on every task, ordered by cell then task. Stops at the
    /// first failure, which is recorded as a flagged row and returned.
    pub fn run_cells(&self, sweep: &str, cells: &[TuningStrategy]) -> (RunReport, Option<Error>) {
        let mut report = RunReport::default();
        let mut data = Vec::new();
        for &task in &self.cfg.tasks {
            match self.split(task, self.cfg.seed) {
                Ok(d) => data.push((task, d)),
                Err(e) => return (report, Some(e)),
            }
        }
        for (idx, st) in cells.iter().enumerate() {
            for (task, d) in &data {
                match self.run_cell(sweep, idx, st, *task, d) {
                    Ok(r) => report.rows.push(r),
                    Err(e) => {
                        let mut r = self.row(sweep, st, *task);
                        r.status = format!("failed: {e}");
                        report.rows.push(r);
                        fill_averages(&mut report, self.cfg.tasks.len());
                        return (report, Some(e));
                    }
                }
            }
        }
        fill_averages(&mut report, self.cfg.tasks.len());
        (report, None)
    }

    pub fn run(&self) -> (RunReport, Option<Error>) {
        self.run_cells("run", &[self.cfg.run_strategy()])
    }

    pub fn sweep_length(&self, lengths: &[usize]) -> (RunReport, Option<Error>) {
        if lengths.is_empty() {
            return (RunReport::default(), Some(Error::Config("sweep.lengths must not be empty".into())));
        }
        let base = self.cfg.base_prompt();
        let cells: Vec<_> = lengths
            .iter()
            .map(|&l| TuningStrategy::Prefix(PromptConfig { length: l, ..base.clone() }))
            .collect();
        self.run_cells("length", &cells)
    }

    pub fn sweep_depth(&self) -> (RunReport, Option<Error>) {
        let base = self.cfg.base_prompt();
        let cells: Vec<_> = self
            .cfg
            .sweep
            .placements
            .iter()
            .map(|&placement| TuningStrategy::Prefix(PromptConfig { placement, ..base.clone() }))
            .collect();
        self.run_cells("depth", &cells)
    }

    /// Paired `{none, mlp}` runs; the mlp row carries `mlp − none`.
    pub fn sweep_reparam(&self) -> (RunReport, Option<Error>) {
        let base = self.cfg.base_prompt();
        let cells = [
            TuningStrategy::Prefix(PromptConfig { reparam: Reparam::None, ..base.clone() }),
            TuningStrategy::Prefix(PromptConfig {
                reparam: Reparam::Mlp { mid_dim: self.cfg.sweep.mlp_mid_dim },
                ..base
            }),
        ];
        let (mut report, err) = self.run_cells("reparam", &cells);
        let n = self.cfg.tasks.len();
        if report.rows.len() == 2 * n {
            for t in 0..n {
                if let (Some(a), Some(b)) = (report.rows[t].metric, report.rows[n + t].metric) {
                    report.rows[n + t].delta = Some(b - a);
                }
            }
        }
        (report, err)
    }

    pub fn compare_strategies(&self) -> (RunReport, Option<Error>) {
        let cells = [
            TuningStrategy::FullFinetune,
            TuningStrategy::Prefix(self.cfg.base_prompt()),
            TuningStrategy::Adapter { bottleneck_dim: self.cfg.sweep.adapter_bottleneck },
            TuningStrategy::Bitfit,
        ];
        self.run_cells("compare", &cells)
    }

    /// Train finetuning and prefix tuning per seed and task, then attack
    /// both. Returns the per-seed reports in seed order.
    pub fn robustness(&self) -> Result<Vec<(u64, RobustnessReport)>> {
        let rc = &self.cfg.robustness;
        let attack = rc.attack(self.cfg.train.label_smoothing);
        let prefix = TuningStrategy::Prefix(self.cfg.base_prompt());
        let mut out = Vec::new();
        for &seed in &rc.seeds {
            log::info!("robustness seed {seed}");
            let mut report = RobustnessReport::default();
            for &task in &rc.tasks {
                let data = self.split(task, seed)?;
                let (ft, _) = self.train_one(&TuningStrategy::FullFinetune, &data, seed)?;
                let (pt, _) = self.train_one(&prefix, &data, seed)?;
                let named = [("full_finetune", &ft), ("prefix", &pt)];
                report.extend(evaluate_robustness(&named, &data.1, &attack, self.mode)?);
            }
            out.push((seed, report));
        }
        Ok(out)
    }

    pub fn time_per_100(&self) -> Result<TimingReport> {
        let sw = &self.cfg.sweep;
        let task = self.cfg.tasks[0];
        let n = sw.timing_samples;
        let batch = self.cfg.train.batch_size.min(n);
        let steps = n.div_ceil(batch);
        let data = generate_dataset(task, self.cfg.seed, n, self.cfg.model.grid_side)?;
        let mut report = TimingReport::default();
        for scale in &sw.scales {
            let mc = scale.apply(&self.cfg.model);
            let bb = TransformerModel::new(mc.clone(), self.cfg.seed)?;
            for st in [TuningStrategy::FullFinetune, TuningStrategy::Prefix(self.cfg.base_prompt())] {
                let mut times = Vec::with_capacity(sw.timing_reps);
                let mut trainable = 0;
                for _ in 0..sw.timing_reps {
                    let mut tm = apply_strategy(bb.clone(), st.clone(), self.cfg.seed)?;
                    trainable = tm.view().trainable_count;
                    let tc = TrainConfig {
                        batch_size: batch,
                        steps,
                        eval_interval: 0,
                        ..self.train_config(self.cfg.seed)
                    };
                    let t = Instant::now();
                    train(&mut tm, &data, &[], &tc, self.mode)?;
                    let ms = t.elapsed().as_secs_f64() * 1e3;
                    times.push(ms * 100.0 / (steps * batch) as f64);
                }
                let (min, max) = times.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &t| (a.min(t), b.max(t)));
                report.rows.push(TimingRow {
                    scale: scale.name.clone(),
                    hidden_dim: mc.hidden_dim,
                    layers: mc.num_layers(),
                    backbone_params: mc.param_count(),
                    strategy: st.name().into(),
                    trainable_count: trainable,
                    reps: times.len(),
                    median_ms: median(&mut times),
                    min_ms: min,
                    max_ms: max,
                });
            }
        }
        Ok(report)
    }
}

fn fill_averages(report: &mut RunReport, tasks: usize) {
    for chunk in report.rows.chunks_mut(tasks.max(1)) {
        let vals: Vec<f64> = chunk.iter().filter_map(|r| r.metric).collect();
        if vals.len() == chunk.len() && !vals.is_empty() {
            let avg = vals.iter().sum::<f64>() / vals.len() as f64;
            for r in chunk.iter_mut() {
                r.avg_over_tasks = Some(avg);
            }
        }
    }
}

/// Medians over seeds per (strategy, ε, task), in first-seen order.
pub fn aggregate_robustness(per_seed: &[(u64, RobustnessReport)]) -> RobustnessReport {
    let mut keys: Vec<(String, u64, String)> = Vec::new();
    for (_, r) in per_seed {
        for row in &r.rows {
            let k = (row.strategy.clone(), row.epsilon.to_bits(), row.task.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
    }
    let mut out = RobustnessReport::default();
    for (strategy, eps, task) in keys {
        let rows: Vec<&RobustnessRow> = per_seed
            .iter()
            .flat_map(|(_, r)| r.rows.iter())
            .filter(|r| r.strategy == strategy && r.epsilon.to_bits() == eps && r.task == task)
            .collect();
        let col = |f: &dyn Fn(&RobustnessRow) -> f64| median(&mut rows.iter().map(|r| f(r)).collect::<Vec<_>>());
        let clean = col(&|r| r.clean);
        let adversarial = col(&|r| r.adversarial);
        let abs_drop = col(&|r| r.abs_drop);
        let clean_loss = col(&|r| r.clean_loss);
        let adv_loss = col(&|r| r.adv_loss);
        let mut rel: Vec<f64> = rows.iter().filter_map(|r| r.rel_drop).collect();
        out.rows.push(RobustnessRow {
            strategy,
            epsilon: f64::from_bits(eps),
            task,
            clean,
            adversarial,
            abs_drop,
            rel_drop: (!rel.is_empty()).then(|| median(&mut rel)),
            clean_loss,
            adv_loss,
        });
    }
    out
}

/// Prefix versus finetuning per task and ε on the aggregated report.
pub fn robustness_trend(agg: &RobustnessReport, band: f64) -> Vec<TrendRow> {
    let mut out = Vec::new();
    for p in agg.rows.iter().filter(|r| r.strategy == "prefix") {
        let Some(f) = agg
            .rows
            .iter()
            .find(|r| r.strategy == "full_finetune" && r.task == p.task && r.epsilon == p.epsilon)
        else {
            continue;
        };
        out.push(TrendRow {
            task: p.task.clone(),
            epsilon: p.epsilon,
            prefix_clean: p.clean,
            finetune_clean: f.clean,
            prefix_rel_drop: p.rel_drop,
            finetune_rel_drop: f.rel_drop,
            matched: (p.clean - f.clean).abs() <= band,
            holds: match (p.rel_drop, f.rel_drop) {
                (Some(a), Some(b)) => Some(a <= b),
                _ => None,
            },
        });
    }
    out
}

pub fn write_run_report(dir: &Path, name: &str, command: &str, seed: u64, report: &RunReport) -> Result<()> {
    write(&dir.join(format!("{name}.csv")), &report.to_csv())?;
    write(&dir.join(format!("{name}.json")), &report.to_json(command, seed))?;
    Ok(())
}

/// Score-versus-length chart, one line per task plus the task average.
pub fn length_plot(report: &RunReport) -> String {
    let mut series: Vec<Series> = Vec::new();
    for r in report.rows.iter().filter(|r| r.metric.is_some()) {
        let x = r.l.unwrap_or(0) as f64;
        match series.iter_mut().find(|s| s.name == r.task) {
            Some(s) => s.points.push((x, r.metric.unwrap())),
            None => series.push(Series { name: r.task.clone(), points: vec![(x, r.metric.unwrap())] }),
        }
    }
    let mut avg = Series { name: "average".into(), points: Vec::new() };
    for r in report.rows.iter() {
        if let (Some(l), Some(a)) = (r.l, r.avg_over_tasks) {
            if !avg.points.iter().any(|p| p.0 == l as f64) {
                avg.points.push((l as f64, a));
            }
        }
    }
    if series.len() > 1 {
        series.push(avg);
    }
    line_chart("Score vs prompt length", "prompt length", "held-out metric", &series)
}

pub fn robustness_plot(agg: &RobustnessReport) -> String {
    let mut series: Vec<Series> = Vec::new();
    for r in &agg.rows {
        let name = format!("{} / {}", r.strategy, r.task);
        let y = r.rel_drop.unwrap_or(r.abs_drop);
        match series.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push((r.epsilon, y)),
            None => series.push(Series { name, points: vec![(r.epsilon, y)] }),
        }
    }
    line_chart("Degradation under FGSM", "epsilon (x embedding RMS)", "relative degradation", &series)
}

pub fn timing_plot(report: &TimingReport) -> String {
    let mut series: Vec<Series> = Vec::new();
    for r in &report.rows {
        let p = (r.backbone_params as f64, r.median_ms);
        match series.iter_mut().find(|s| s.name == r.strategy) {
            Some(s) => s.points.push(p),
            None => series.push(Series { name: r.strategy.clone(), points: vec![p] }),
        }
    }
    line_chart("Time per 100 training samples", "backbone parameters", "milliseconds", &series)
}

pub fn write_robustness(dir: &Path, per_seed: &[(u64, RobustnessReport)], band: f64) -> Result<(RobustnessReport, Vec<TrendRow>)> {
    for (seed, r) in per_seed {
        write(&dir.join(format!("robustness_seed{seed}.csv")), &r.to_csv())?;
    }
    let agg = aggregate_robustness(per_seed);
    let trend = robustness_trend(&agg, band);
    write(&dir.join("robustness.csv"), &agg.to_csv())?;
    write(&dir.join("robustness_trend.csv"), &trend_csv(&trend))?;
    write(&dir.join("robustness.svg"), &robustness_plot(&agg))?;
    Ok((agg, trend))
}

pub fn write_timing(dir: &Path, report: &TimingReport) -> Result<()> {
    write(&dir.join("timing.csv"), &report.to_csv())?;
    write(&dir.join("timing.svg"), &timing_plot(report))
}
