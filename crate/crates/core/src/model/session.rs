use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Shape of one attention score matrix, recorded when tracing is on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionTrace {
    pub site: &'static str,
    pub layer: usize,
    pub queries: usize,
    pub keys: usize,
}

/// A tape plus lazily bound parameter leaves for one forward pass.
///
/// Parameters are borrowed from the store; a parameter requires a gradient
/// only when the trainable mask says so, which keeps backward from ever
/// producing gradients for frozen weights.
pub struct Session<'a> {
    pub tape: Tape<'a>,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: Option<&'a [bool]>,
    dropout: Option<(f64, ChaCha8Rng)>,
    trace: Option<Vec<AttentionTrace>>,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.capacity()],
            trainable: None,
            dropout: None,
            trace: None,
        }
    }

    /// `mask[id]` marks trainable parameters.
    pub fn with_trainable(mut self, mask: &'a [bool]) -> Self {
        self.trainable = Some(mask);
        self
    }

    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable.is_some_and(|m| m.get(id.0).copied().unwrap_or(false))
    }

    /// Tape node for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let rg = self.is_trainable(id);
        let v = self.tape.param(self.params.tensor(id), rg);
        self.bound[id.0] = Some(v);
        v
    }

    /// Inverted dropout; identity when disabled.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let shape = self.tape.value(x).shape().to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = self.tape.constant(mask);
        Ok(self.tape.mul(x, m)?)
    }

    pub(crate) fn record(&mut self, site: &'static str, layer: usize, queries: usize, keys: usize) {
        if let Some(t) = self.trace.as_mut() {
            t.push(AttentionTrace {
                site,
                layer,
                queries,
                keys,
            });
        }
    }

    pub fn trace(&self) -> &[AttentionTrace] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Run backward from `loss` and collect gradients of the bound trainable
    /// parameters in id order.
    pub fn param_grads(&mut self, loss: Var) -> Result<Vec<(ParamId, Tensor)>> {
        self.tape.backward(loss)?;
        let mut out = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            let Some(v) = *v else { continue };
            if !self.tape.requires_grad(v) {
                continue;
            }
            let g = self
                .tape
                .take_grad(v)
                .unwrap_or_else(|| Tensor::zeros(self.params.tensor(ParamId(i)).shape()));
            out.push((ParamId(i), g));
        }
        Ok(out)
    }
}
