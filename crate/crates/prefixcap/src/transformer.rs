//! Pre-LN transformer block shared by the mapping network and the language
//! model. Attention is full (bidirectional) or causal depending on the
//! caller.

use rand::RngCore;

use crate::param::{Bindings, Module, Param};
use crate::tensor::{Result, Scalar, Tape, TensorId};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F: Scalar> {
    pub d: usize,
    pub heads: usize,
    pub ln1_g: Param<F>,
    pub ln1_b: Param<F>,
    pub wq: Param<F>,
    pub bq: Param<F>,
    pub wk: Param<F>,
    pub bk: Param<F>,
    pub wv: Param<F>,
    pub bv: Param<F>,
    pub wo: Param<F>,
    pub bo: Param<F>,
    pub ln2_g: Param<F>,
    pub ln2_b: Param<F>,
    pub wf1: Param<F>,
    pub bf1: Param<F>,
    pub wf2: Param<F>,
    pub bf2: Param<F>,
}

#[derive(Debug, Clone, Copy)]
pub enum AttentionKind {
    Full,
    Causal,
}

impl<F: Scalar> Block<F> {
    pub fn new(d: usize, heads: usize, rng: &mut impl RngCore) -> Self {
        assert!(d % heads == 0, "d must be divisible by heads");
        let ff = 4 * d;
        Block {
            d,
            heads,
            ln1_g: Param::ones(vec![d]),
            ln1_b: Param::zeros(vec![d]),
            wq: Param::normal(vec![d, d], INIT_STD, rng),
            bq: Param::zeros(vec![d]),
            wk: Param::normal(vec![d, d], INIT_STD, rng),
            bk: Param::zeros(vec![d]),
            wv: Param::normal(vec![d, d], INIT_STD, rng),
            bv: Param::zeros(vec![d]),
            wo: Param::normal(vec![d, d], INIT_STD, rng),
            bo: Param::zeros(vec![d]),
            ln2_g: Param::ones(vec![d]),
            ln2_b: Param::zeros(vec![d]),
            wf1: Param::normal(vec![d, ff], INIT_STD, rng),
            bf1: Param::zeros(vec![ff]),
            wf2: Param::normal(vec![ff, d], INIT_STD, rng),
            bf2: Param::zeros(vec![d]),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        binds: &mut Bindings,
        prefix: &str,
        x: TensorId,
        kind: AttentionKind,
    ) -> Result<TensorId> {
        let b = |binds: &mut Bindings, tape: &mut Tape<F>, name: &str, p: &Param<F>| {
            binds.bind(tape, &format!("{prefix}.{name}"), p)
        };

        let ln1_g = b(binds, tape, "ln1_g", &self.ln1_g)?;
        let ln1_b = b(binds, tape, "ln1_b", &self.ln1_b)?;
        let h1 = tape.layer_norm(x, ln1_g, ln1_b)?;

        let wq = b(binds, tape, "wq", &self.wq)?;
        let bq = b(binds, tape, "bq", &self.bq)?;
        let wk = b(binds, tape, "wk", &self.wk)?;
        let bk = b(binds, tape, "bk", &self.bk)?;
        let wv = b(binds, tape, "wv", &self.wv)?;
        let bv = b(binds, tape, "bv", &self.bv)?;
        let wo = b(binds, tape, "wo", &self.wo)?;
        let bo = b(binds, tape, "bo", &self.bo)?;

        let q = tape.matmul(h1, wq)?;
        let q = tape.add_bias(q, bq)?;
        let k = tape.matmul(h1, wk)?;
        let k = tape.add_bias(k, bk)?;
        let v = tape.matmul(h1, wv)?;
        let v = tape.add_bias(v, bv)?;

        let head_dim = self.d / self.heads;
        let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let probs = match kind {
                AttentionKind::Full => tape.softmax(scores)?,
                AttentionKind::Causal => tape.causal_softmax(scores, 0)?,
            };
            head_outs.push(tape.matmul(probs, vh)?);
        }
        let attn = tape.concat_cols(&head_outs)?;
        let attn = tape.matmul(attn, wo)?;
        let attn = tape.add_bias(attn, bo)?;
        let x = tape.add(x, attn)?;

        let ln2_g = b(binds, tape, "ln2_g", &self.ln2_g)?;
        let ln2_b = b(binds, tape, "ln2_b", &self.ln2_b)?;
        let h2 = tape.layer_norm(x, ln2_g, ln2_b)?;
        let wf1 = b(binds, tape, "wf1", &self.wf1)?;
        let bf1 = b(binds, tape, "bf1", &self.bf1)?;
        let wf2 = b(binds, tape, "wf2", &self.wf2)?;
        let bf2 = b(binds, tape, "bf2", &self.bf2)?;
        let ff = tape.matmul(h2, wf1)?;
        let ff = tape.add_bias(ff, bf1)?;
        let ff = tape.gelu(ff)?;
        let ff = tape.matmul(ff, wf2)?;
        let ff = tape.add_bias(ff, bf2)?;
        tape.add(x, ff)
    }
}

macro_rules! visit_fields {
    ($self:ident, $prefix:ident, $f:ident, $($field:ident),+) => {
        $( $f(&format!("{}.{}", $prefix, stringify!($field)), &$self.$field); )+
    };
}

macro_rules! visit_fields_mut {
    ($self:ident, $prefix:ident, $f:ident, $($field:ident),+) => {
        $( $f(&format!("{}.{}", $prefix, stringify!($field)), &mut $self.$field); )+
    };
}

impl<F: Scalar> Module<F> for Block<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        visit_fields!(
            self, prefix, f, ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, wf1,
            bf1, wf2, bf2
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        visit_fields_mut!(
            self, prefix, f, ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, wf1,
            bf1, wf2, bf2
        );
    }
}
