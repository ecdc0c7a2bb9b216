use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Boolean attendability matrix, `true` where a query may see a key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(queries * keys);
        for q in 0..queries {
            for k in 0..keys {
                allowed.push(f(q, k));
            }
        }
        Self {
            queries,
            keys,
            allowed,
        }
    }

    pub fn full(queries: usize, keys: usize) -> Self {
        Self::new(queries, keys, |_, _| true)
    }

    /// Lower-triangular mask over `t` positions.
    pub fn causal(t: usize) -> Self {
        Self::new(t, t, |q, k| k <= q)
    }

    /// Mask over `[prompt ; tokens]` for both queries and keys. Every query
    /// sees every prompt key; among tokens the mask is causal when asked.
    /// Prompt queries never see token keys in the causal case, so carried
    /// prompt states cannot leak future targets.
    pub fn with_prefix(prefix: usize, tokens: usize, causal: bool) -> Self {
        let n = prefix + tokens;
        Self::new(n, n, |q, k| {
            if k < prefix {
                true
            } else if q < prefix {
                !causal
            } else {
                !causal || k <= q
            }
        })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }

    /// Keys with `key_ok[k] == false` become unattendable for every query.
    pub fn restrict_keys(mut self, key_ok: &[bool]) -> Self {
        assert_eq!(key_ok.len(), self.keys, "key mask length");
        for q in 0..self.queries {
            for (k, &ok) in key_ok.iter().enumerate() {
                if !ok {
                    self.allowed[q * self.keys + k] = false;
                }
            }
        }
        self
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    /// Additive score bias: 0 where allowed, -inf elsewhere.
    pub fn bias(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Tensor::new(vec![self.queries, self.keys], data).expect("mask shape")
    }
}

/// Prefix `block` (`[l × h]`) to the layer input (`[S × h]`), returning the
/// `[(l + S) × h]` sequence and its mask. With `l = 0` the input node is
/// returned as is.
pub fn inject_prefix(
    tape: &mut Tape<'_>,
    input: Var,
    block: Var,
    causal: bool,
) -> Result<(Var, AttentionMask)> {
    let (s, h) = (tape.value(input).rows(), tape.value(input).cols());
    let b = tape.value(block);
    if b.rank() != 2 || b.cols() != h {
        return Err(Error::Tensor(crate::tensor::TensorError::Shape {
            op: "inject_prefix",
            lhs: tape.value(input).shape().to_vec(),
            rhs: b.shape().to_vec(),
        }));
    }
    let l = b.rows();
    if l == 0 {
        let mask = if causal {
            AttentionMask::causal(s)
        } else {
            AttentionMask::full(s, s)
        };
        return Ok((input, mask));
    }
    let joined = tape.concat(&[block, input], 0)?;
    Ok((joined, AttentionMask::with_prefix(l, s, causal)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_columns_are_open_to_all_queries() {
        let m = AttentionMask::with_prefix(3, 4, true);
        assert_eq!((m.queries(), m.keys()), (7, 7));
        for q in 0..7 {
            for k in 0..3 {
                assert!(m.allowed(q, k));
            }
        }
        // causal among tokens only
        assert!(m.allowed(5, 4) && !m.allowed(4, 5));
        assert!(!m.allowed(0, 3));
    }

    #[test]
    fn bias_is_zero_or_neg_inf() {
        let b = AttentionMask::causal(2).bias();
        assert_eq!(b.data()[0], 0.0);
        assert_eq!(b.data()[1], f64::NEG_INFINITY);
        assert_eq!(b.data()[3], 0.0);
    }

    #[test]
    fn inject_zero_length_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 4], 1.0));
        let p = tape.constant(Tensor::zeros(&[0, 4]));
        let (y, m) = inject_prefix(&mut tape, x, p, false).unwrap();
        assert_eq!(y, x);
        assert!(m.is_full());
    }

    #[test]
    fn inject_rejects_width_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 4]));
        let p = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(inject_prefix(&mut tape, x, p, false).is_err());
    }

    #[test]
    fn restrict_keys_closes_columns() {
        let m = AttentionMask::full(2, 3).restrict_keys(&[true, false, true]);
        assert!(!m.allowed(0, 1) && !m.allowed(1, 1) && m.allowed(1, 2));
    }
}
