//! Central finite-difference gradient verification at f64.
//!
//! The finite-difference side never touches the tape's backward rules: it
//! re-evaluates the loss with perturbed parameters, so it is an independent
//! oracle for the analytic gradients.

use std::collections::HashMap;

use crate::par::par_map_range;
use crate::param::{Bindings, Module};
use crate::tensor::{Tape, TensorId};

pub const DEFAULT_H: f64 = 1e-6;

/// Relative error with the floor used throughout: |a-b| / max(|a|, |b|, 1e-8).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-8))
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// "param_name[index]" of the worst entry.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Central differences for every trainable entry of `model`, evaluated in
/// parallel over entries. `loss` must be a pure function of the model.
pub fn central_diff_grads<M, L>(model: &M, loss: &L, h: f64) -> Vec<(String, Vec<f64>)>
where
    M: Module<f64> + Clone + Sync,
    L: Fn(&M) -> f64 + Sync,
{
    let names: Vec<(String, usize)> = {
        let mut v = Vec::new();
        model.visit("", &mut |name, p| {
            if p.trainable {
                v.push((name.to_string(), p.numel()));
            }
        });
        v
    };
    names
        .iter()
        .map(|(name, numel)| {
            let grads = par_map_range(*numel, |i| {
                let mut plus = model.clone();
                perturb(&mut plus, name, i, h);
                let lp = loss(&plus);
                let mut minus = model.clone();
                perturb(&mut minus, name, i, -h);
                let lm = loss(&minus);
                (lp - lm) / (2.0 * h)
            });
            (name.clone(), grads)
        })
        .collect()
}

fn perturb<M: Module<f64>>(model: &mut M, target: &str, index: usize, delta: f64) {
    model.visit_mut("", &mut |name, p| {
        if name == target {
            p.data[index] += delta;
        }
    });
}

/// Richardson-extrapolated central differences: combines stencils at h and
/// h/2 for O(h^4) truncation, so h can be large enough that f64 roundoff in
/// the loss stays far below the comparison tolerance.
pub fn richardson_grads<M, L>(model: &M, loss: &L, h: f64) -> Vec<(String, Vec<f64>)>
where
    M: Module<f64> + Clone + Sync,
    L: Fn(&M) -> f64 + Sync,
{
    let coarse = central_diff_grads(model, loss, h);
    let fine = central_diff_grads(model, loss, h / 2.0);
    coarse
        .into_iter()
        .zip(fine)
        .map(|((name, c), (_, f))| {
            let g = c
                .iter()
                .zip(&f)
                .map(|(&dc, &df)| (4.0 * df - dc) / 3.0)
                .collect();
            (name, g)
        })
        .collect()
}

/// Compare analytic gradients (by parameter name) against central differences.
pub fn compare<M, L>(
    model: &M,
    analytic: &HashMap<String, Vec<f64>>,
    loss: &L,
    h: f64,
) -> GradCheckReport
where
    M: Module<f64> + Clone + Sync,
    L: Fn(&M) -> f64 + Sync,
{
    let numeric = central_diff_grads(model, loss, h);
    compare_against(analytic, &numeric)
}

fn compare_against(
    analytic: &HashMap<String, Vec<f64>>,
    numeric: &[(String, Vec<f64>)],
) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (name, num) in numeric {
        let ana = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no analytic gradient for parameter {name}"));
        assert_eq!(ana.len(), num.len(), "gradient length mismatch for {name}");
        for (i, (&a, &n)) in ana.iter().zip(num).enumerate() {
            let e = rel_err(a, n);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    report
}

/// End-to-end check of a model against a loss described by a tape builder:
/// analytic gradients come from one backward pass, numeric gradients from
/// central differences re-running the builder with perturbed parameters.
pub fn check_model<M, B>(model: &M, build: &B, h: f64) -> GradCheckReport
where
    M: Module<f64> + Clone + Sync,
    B: Fn(&M, &mut Tape<f64>, &mut Bindings) -> crate::tensor::Result<TensorId> + Sync,
{
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let loss = build(model, &mut tape, &mut binds).expect("loss construction failed");
    tape.backward(loss).expect("backward failed");
    let mut analytic = HashMap::new();
    model.visit("", &mut |name, p| {
        if p.trainable {
            let g = binds
                .grad_of(&tape, name)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.numel()]);
            analytic.insert(name.to_string(), g);
        }
    });
    let eval = |m: &M| {
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let loss = build(m, &mut tape, &mut binds).expect("loss construction failed");
        tape.data(loss)[0]
    };
    let numeric = richardson_grads(model, &eval, h);
    compare_against(&analytic, &numeric)
}

/// The finite-difference suites behind the gradcheck command: MLP mapper,
/// 2-layer transformer mapper, 2-layer LM, and the composed pipeline through
/// the masked cross-entropy loss, all at f64.
pub mod suites {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::{check_model, GradCheckReport};

    /// Step size for whole-model checks: larger than the op-level default so
    /// finite-difference roundoff stays well below the 1e-4 tolerance even
    /// where true gradients are near zero.
    pub const MODEL_H: f64 = 2e-3;
    use crate::encoder::EncoderConfig;
    use crate::lm::{Lm, LmConfig};
    use crate::mapper::{Mapper, MapperConfig, MapperKind};
    use crate::param::Bindings;
    use crate::tensor::{Result, Tape, TensorId};
    use crate::text::{TokenSequence, BOS, EOS, PAD};
    use crate::train::{record_loss, ModelBundle, TrainRecord};

    #[derive(Debug, Clone)]
    pub struct Suite {
        pub name: &'static str,
        pub tol: f64,
        pub report: GradCheckReport,
    }

    impl Suite {
        pub fn passes(&self) -> bool {
            self.report.passes(self.tol)
        }
    }

    /// A fixed, input-dependent scalar of a k x d matrix so every output
    /// entry influences the loss with a distinct weight.
    fn weighted_sum(tape: &mut Tape<f64>, out: TensorId) -> Result<TensorId> {
        let shape = tape.shape(out).to_vec();
        let n: usize = shape.iter().product();
        let weights: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let w = tape.constant(weights, shape)?;
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    }

    fn clip_vec(d: usize) -> Vec<f64> {
        (0..d).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect()
    }

    pub fn mlp_mapper() -> Suite {
        let cfg = MapperConfig {
            kind: MapperKind::Mlp,
            k: 3,
            d_clip: 6,
            d_lm: 4,
            layers: 1,
            heads: 1,
            hidden_mult: 2,
        };
        let mapper: Mapper<f64> = Mapper::new(cfg, &mut ChaCha8Rng::seed_from_u64(11));
        let input = clip_vec(6);
        let report = check_model(
            &mapper,
            &|m: &Mapper<f64>, tape: &mut Tape<f64>, binds: &mut Bindings| {
                let clip = tape.constant(input.clone(), vec![1, input.len()])?;
                let out = m.forward(tape, binds, clip)?;
                weighted_sum(tape, out)
            },
            MODEL_H,
        );
        Suite {
            name: "mlp-mapper",
            tol: 1e-5,
            report,
        }
    }

    pub fn transformer_mapper() -> Suite {
        let cfg = MapperConfig {
            kind: MapperKind::Transformer,
            k: 2,
            d_clip: 8,
            d_lm: 16,
            layers: 2,
            heads: 2,
            hidden_mult: 4,
        };
        let mapper: Mapper<f64> = Mapper::new(cfg, &mut ChaCha8Rng::seed_from_u64(12));
        let input = clip_vec(8);
        let report = check_model(
            &mapper,
            &|m: &Mapper<f64>, tape: &mut Tape<f64>, binds: &mut Bindings| {
                let clip = tape.constant(input.clone(), vec![1, input.len()])?;
                let out = m.forward(tape, binds, clip)?;
                weighted_sum(tape, out)
            },
            MODEL_H,
        );
        Suite {
            name: "transformer-mapper",
            tol: 1e-4,
            report,
        }
    }

    pub fn lm() -> Suite {
        let cfg = LmConfig {
            vocab_size: 11,
            d_lm: 16,
            layers: 2,
            heads: 2,
            max_positions: 8,
        };
        let lm: Lm<f64> = Lm::new(cfg, &mut ChaCha8Rng::seed_from_u64(13));
        let inputs = [BOS, 4, 7, 5];
        let targets = [4, 7, 5, EOS];
        let mask = [true, true, true, true];
        let report = check_model(
            &lm,
            &|m: &Lm<f64>, tape: &mut Tape<f64>, binds: &mut Bindings| {
                let emb = m.embed_tokens(tape, binds, &inputs)?;
                let logits = m.forward(tape, binds, emb)?;
                tape.cross_entropy(logits, &targets, &mask)
            },
            MODEL_H,
        );
        Suite {
            name: "lm",
            tol: 1e-4,
            report,
        }
    }

    pub fn pipeline() -> Suite {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mcfg = MapperConfig {
            kind: MapperKind::Mlp,
            k: 2,
            d_clip: 6,
            d_lm: 16,
            layers: 1,
            heads: 1,
            hidden_mult: 2,
        };
        let mapper = Mapper::new(mcfg, &mut rng);
        let lm = Lm::new(
            LmConfig {
                vocab_size: 11,
                d_lm: 16,
                layers: 2,
                heads: 2,
                max_positions: 8,
            },
            &mut rng,
        );
        let bundle: ModelBundle<f64> =
            ModelBundle::new(EncoderConfig { d_clip: 6, seed: 0 }, mapper, lm, false);
        // A live caption plus trailing PADs, so the mask path is exercised.
        let record = TrainRecord {
            embedding: clip_vec(6),
            tokens: TokenSequence {
                ids: vec![4, 5, EOS, PAD, PAD],
                live_len: 3,
            },
        };
        let report = check_model(
            &bundle,
            &|m: &ModelBundle<f64>, tape: &mut Tape<f64>, binds: &mut Bindings| {
                record_loss(tape, binds, m, &record)
            },
            MODEL_H,
        );
        Suite {
            name: "pipeline",
            tol: 1e-4,
            report,
        }
    }

    pub fn run_all() -> Vec<Suite> {
        vec![mlp_mapper(), transformer_mapper(), lm(), pipeline()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor_prevents_blowup_near_zero() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1e-12, 0.0) < 1e-3);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mlp_mapper_gradients_match_finite_differences() {
        let s = suites::mlp_mapper();
        assert!(s.passes(), "{}: max rel err {} at {}", s.name, s.report.max_rel_err, s.report.worst);
    }

    #[test]
    fn transformer_mapper_gradients_match_finite_differences() {
        let s = suites::transformer_mapper();
        assert!(s.passes(), "{}: max rel err {} at {}", s.name, s.report.max_rel_err, s.report.worst);
    }

    #[test]
    fn lm_gradients_match_finite_differences() {
        let s = suites::lm();
        assert!(s.passes(), "{}: max rel err {} at {}", s.name, s.report.max_rel_err, s.report.worst);
    }

    #[test]
    fn composed_pipeline_gradients_match_finite_differences() {
        let s = suites::pipeline();
        assert!(s.passes(), "{}: max rel err {} at {}", s.name, s.report.max_rel_err, s.report.worst);
    }
}
