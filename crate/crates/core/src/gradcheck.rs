//! Central finite-difference check of trainable-parameter gradients.

use crate::error::Result;
use crate::exec::{par_map, ExecMode};
use crate::model::ParamId;
use crate::peft::TunableModel;
use crate::tasks::TaskSample;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so entries whose true
/// gradient is numerically zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Mean training loss over `samples`.
pub fn batch_loss(tm: &TunableModel, samples: &[TaskSample], smoothing: f64) -> Result<f64> {
    let mut total = 0.0;
    for smp in samples {
        let mut s = tm.session();
        let l = tm.loss(&mut s, smp, smoothing)?;
        total += s.tape.value(l).data()[0];
    }
    Ok(total / samples.len() as f64)
}

/// Analytic gradients of [`batch_loss`] for every trainable parameter.
pub fn analytic_grads(tm: &TunableModel, samples: &[TaskSample], smoothing: f64) -> Result<Vec<(ParamId, Tensor)>> {
    let mut acc: Vec<(ParamId, Tensor)> = Vec::new();
    for smp in samples {
        let mut s = tm.session();
        let l = tm.loss(&mut s, smp, smoothing)?;
        let grads = s.param_grads(l)?;
        if acc.is_empty() {
            acc = grads;
        } else {
            for ((_, a), (_, g)) in acc.iter_mut().zip(&grads) {
                a.add_assign(g);
            }
        }
    }
    for (_, g) in acc.iter_mut() {
        g.scale_in_place(1.0 / samples.len() as f64);
    }
    Ok(acc)
}

/// Compare analytic gradients against `(f(x+h) - f(x-h)) / 2h` for every
/// entry of every trainable parameter (or every `stride`-th entry).
pub fn check(tm: &TunableModel, samples: &[TaskSample], smoothing: f64, step: f64, stride: usize) -> Result<GradCheck> {
    let grads = analytic_grads(tm, samples, smoothing)?;
    let mut jobs = Vec::new();
    for (id, g) in &grads {
        for i in (0..g.len()).step_by(stride.max(1)) {
            jobs.push((*id, i, g.data()[i]));
        }
    }
    // One model copy per chunk of probes; entries are restored after use.
    let chunks: Vec<&[(ParamId, usize, f64)]> = jobs.chunks(64).collect();
    let results: Vec<Result<Vec<(f64, f64)>>> = par_map(ExecMode::default(), &chunks, |chunk| {
        let mut probe = tm.clone();
        let mut out = Vec::with_capacity(chunk.len());
        for &(id, i, analytic) in chunk.iter() {
            let x0 = probe.model.params.tensor(id).data()[i];
            probe.model.params.tensor_mut(id).data_mut()[i] = x0 + step;
            let up = batch_loss(&probe, samples, smoothing)?;
            probe.model.params.tensor_mut(id).data_mut()[i] = x0 - step;
            let down = batch_loss(&probe, samples, smoothing)?;
            probe.model.params.tensor_mut(id).data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * step);
            let abs = (analytic - numeric).abs();
            out.push((abs, abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR)));
        }
        Ok(out)
    });
    let mut flat = Vec::with_capacity(jobs.len());
    for r in results {
        flat.extend(r?);
    }
    let mut out = GradCheck {
        checked: jobs.len(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
    };
    for (&(id, i, _), (abs, rel)) in jobs.iter().zip(flat) {
        out.max_abs_err = out.max_abs_err.max(abs);
        if rel > out.max_rel_err || out.worst.is_none() {
            out.max_rel_err = out.max_rel_err.max(rel);
            out.worst = Some((tm.model.params.get(id).name.clone(), i));
        }
    }
    Ok(out)
}
