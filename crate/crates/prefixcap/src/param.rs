//! Named trainable parameters and their binding onto a tape.

use std::collections::HashMap;

use rand::RngCore;

use crate::tensor::{Result, Scalar, Tape, TensorId};

/// A parameter array owned by a model, bound onto a fresh tape per forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F: Scalar> {
    pub data: Vec<F>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl<F: Scalar> Param<F> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            data: vec![F::ZERO; n],
            shape,
            trainable: true,
        }
    }

    /// Normal(0, std) init via Box-Muller, deterministic for a given rng state.
    pub fn normal(shape: Vec<usize>, std: f64, rng: &mut impl RngCore) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::from_f64(std * normal_sample(rng))).collect();
        Param {
            data,
            shape,
            trainable: true,
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            data: vec![F::ONE; n],
            shape,
            trainable: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Standard normal deviate. Box-Muller on two uniform draws.
pub fn normal_sample(rng: &mut impl RngCore) -> f64 {
    // Map u64 draws into (0, 1]; u1 must be nonzero for the log.
    let u1 = ((rng.next_u64() >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
    let u2 = ((rng.next_u64() >> 11) as f64) / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Visitor over a model's named parameters. Names double as checkpoint
/// section names, so they must be stable across runs.
pub trait Module<F: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    fn named_params(&self, prefix: &str) -> Vec<(String, Param<F>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, p| out.push((name.to_string(), p.clone())));
        out
    }

    fn count_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.numel();
            }
        });
        n
    }
}

/// Caches parameter leaves on a tape so a batch binds each parameter once
/// and gradients accumulate across records.
pub struct Bindings {
    by_name: HashMap<String, TensorId>,
}

impl Default for Bindings {
    fn default() -> Self {
        Self::new()
    }
}

impl Bindings {
    pub fn new() -> Self {
        Bindings {
            by_name: HashMap::new(),
        }
    }

    pub fn bind<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        name: &str,
        param: &Param<F>,
    ) -> Result<TensorId> {
        if let Some(&id) = self.by_name.get(name) {
            return Ok(id);
        }
        let id = tape.leaf(param.data.clone(), param.shape.clone(), param.trainable)?;
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id_of(&self, name: &str) -> Option<TensorId> {
        self.by_name.get(name).copied()
    }

    /// Pull the gradient for a bound parameter out of the tape after backward.
    pub fn grad_of<'t, F: Scalar>(&self, tape: &'t Tape<F>, name: &str) -> Option<&'t [F]> {
        self.id_of(name).and_then(|id| tape.grad(id))
    }
}
