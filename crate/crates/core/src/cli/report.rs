use std::fmt::Write as _;

use serde::Serialize;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One training run: a strategy cell of a sweep on one task.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub sweep: String,
    pub strategy: String,
    pub l: Option<usize>,
    pub placement: Option<String>,
    pub reparam: Option<String>,
    pub task: String,
    pub metric_name: String,
    /// Held-out metric of the final parameters.
    pub metric: Option<f64>,
    pub best_metric: Option<f64>,
    pub steps_to_best: Option<usize>,
    pub eval_loss: Option<f64>,
    /// Metric after collapsing an MLP reparameterization.
    pub baked_metric: Option<f64>,
    /// Paired difference against the reference cell (reparam sweep).
    pub delta: Option<f64>,
    /// Mean metric over tasks for this cell.
    pub avg_over_tasks: Option<f64>,
    pub trainable_count: usize,
    pub trainable_fraction: f64,
    /// Hash of the backbone weights no parameter-efficient strategy updates.
    pub frozen_hash: String,
    /// `ok`, or `failed: <reason>` for a partial run.
    pub status: String,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub rows: Vec<RunRow>,
}

impl RunReport {
    pub const HEADER: &'static str = "sweep,strategy,l,placement,reparam,task,metric_name,metric,best_metric,steps_to_best,eval_loss,baked_metric,delta,avg_over_tasks,trainable_count,trainable_fraction,frozen_hash,status,wall_ms";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3}",
                r.sweep,
                r.strategy,
                r.l.map(|v| v.to_string()).unwrap_or_default(),
                r.placement.clone().unwrap_or_default(),
                r.reparam.clone().unwrap_or_default(),
                r.task,
                r.metric_name,
                opt(r.metric),
                opt(r.best_metric),
                r.steps_to_best.map(|v| v.to_string()).unwrap_or_default(),
                opt(r.eval_loss),
                opt(r.baked_metric),
                opt(r.delta),
                opt(r.avg_over_tasks),
                r.trainable_count,
                r.trainable_fraction,
                r.frozen_hash,
                r.status.replace(',', ";"),
                r.wall_ms
            );
        }
        s
    }

    pub fn to_json(&self, command: &str, seed: u64) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            command: &'a str,
            seed: u64,
            runs: usize,
            failed: usize,
            rows: &'a [RunRow],
        }
        let s = Summary {
            command,
            seed,
            runs: self.rows.len(),
            failed: self.rows.iter().filter(|r| r.status != "ok").count(),
            rows: &self.rows,
        };
        serde_json::to_string_pretty(&s).expect("plain data serializes") + "\n"
    }
}

/// Median wall-clock per 100 training samples for one (scale, strategy).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingRow {
    pub scale: String,
    pub hidden_dim: usize,
    pub layers: usize,
    pub backbone_params: usize,
    pub strategy: String,
    pub trainable_count: usize,
    pub reps: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    pub const HEADER: &'static str =
        "scale,hidden_dim,layers,backbone_params,strategy,trainable_count,reps,median_ms_per_100,min_ms,max_ms";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.3},{:.3},{:.3}",
                r.scale, r.hidden_dim, r.layers, r.backbone_params, r.strategy, r.trainable_count, r.reps, r.median_ms, r.min_ms, r.max_ms
            );
        }
        s
    }
}

/// Robustness comparison of prefix tuning against finetuning per task and ε,
/// from medians over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrendRow {
    pub task: String,
    pub epsilon: f64,
    pub prefix_clean: f64,
    pub finetune_clean: f64,
    pub prefix_rel_drop: Option<f64>,
    pub finetune_rel_drop: Option<f64>,
    /// Clean metrics within the configured band.
    pub matched: bool,
    /// Prefix degrades no more than finetuning (relative).
    pub holds: Option<bool>,
}

pub fn trend_csv(rows: &[TrendRow]) -> String {
    let mut s = String::from(
        "task,epsilon,prefix_clean,finetune_clean,prefix_rel_drop,finetune_rel_drop,matched,holds\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.task,
            r.epsilon,
            r.prefix_clean,
            r.finetune_clean,
            opt(r.prefix_rel_drop),
            opt(r.finetune_rel_drop),
            r.matched,
            r.holds.map(|b| b.to_string()).unwrap_or_default()
        );
    }
    s
}
