use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One forward pass: a tape, the parameters it reads, and the dropout stream.
///
/// Frozen parameters enter the tape as constants. Dropout is active only
/// when the session was opened with [`Session::training`].
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
    bound: BTreeMap<String, Var>,
    dropout: Option<ChaCha8Rng>,
}

impl<'p> Session<'p> {
    pub fn eval(params: &'p ParamSet) -> Self {
        Session { tape: Tape::new(), params, bound: BTreeMap::new(), dropout: None }
    }

    pub fn training(params: &'p ParamSet, dropout_seed: u64) -> Self {
        Session {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            dropout: Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(alloc::format!("missing parameter {name}")))?;
        let v = self.tape.leaf(t.clone(), !self.params.is_frozen(name));
        self.bound.insert(String::from(name), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.dropout.as_mut() else { return Ok(x) };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let n = self.tape.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        self.tape.mul_const(x, mask)
    }

    /// Back-propagate and collect gradients of every bound trainable parameter.
    ///
    /// Trainable parameters that were read but received no gradient get zeros.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if self.params.is_frozen(name) {
                continue;
            }
            let shape = self.tape.value(v).shape().to_vec();
            let t = match grads.get(v) {
                Some(g) => Tensor::new(shape, g.to_vec())?,
                None => Tensor::zeros(shape),
            };
            out.insert(name.clone(), t);
        }
        Ok(out)
    }
}
