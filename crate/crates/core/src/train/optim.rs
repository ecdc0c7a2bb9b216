use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the shared step count.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(&id).map(|(m, v)| (m, v))
    }
}

/// One bias-corrected Adam update of the parameters named in `grads`.
/// Parameters without a gradient entry are not touched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut AdamState,
    hyper: &AdamConfig,
    lr: f64,
) -> Result<()> {
    for (id, g) in grads {
        let shape = params.tensor(*id).shape();
        if g.shape() != shape {
            return Err(Error::contract(format!(
                "gradient for {} has shape {:?}, parameter has {:?}",
                params.get(*id).name,
                g.shape(),
                shape
            )));
        }
        if let Some((m, _)) = state.moments.get(id) {
            if m.shape() != shape {
                return Err(Error::contract(format!(
                    "optimizer state for {} has shape {:?}, parameter has {:?}",
                    params.get(*id).name,
                    m.shape(),
                    shape
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (id, g) in grads {
        let (m, v) = state
            .moments
            .entry(*id)
            .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
        let p = params.tensor_mut(*id).data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// `shadow ← decay·shadow + (1 − decay)·params`, elementwise.
pub fn ema_update(shadow: &mut Tensor, params: &Tensor, decay: f64) {
    assert_eq!(shadow.shape(), params.shape(), "ema shapes differ");
    for (s, p) in shadow.data_mut().iter_mut().zip(params.data()) {
        *s = decay * *s + (1.0 - decay) * p;
    }
}
