//! Mapping network: translates a frozen visual embedding into k prefix
//! embeddings in the language model's word-embedding space. Two variants:
//! a single-hidden-layer MLP, and a transformer that attends between k
//! projected visual tokens and k learned constants, emitting the transformed
//! constant slots.

use rand::RngCore;

use crate::param::{Bindings, Module, Param};
use crate::tensor::{Result, Scalar, Tape, TensorId};
use crate::transformer::{AttentionKind, Block, INIT_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapperKind {
    Mlp,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MapperConfig {
    pub kind: MapperKind,
    /// Prefix length k.
    pub k: usize,
    pub d_clip: usize,
    pub d_lm: usize,
    /// Transformer depth.
    pub layers: usize,
    pub heads: usize,
    /// MLP hidden width = hidden_mult * d_clip.
    pub hidden_mult: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            kind: MapperKind::Transformer,
            k: 10,
            d_clip: 64,
            d_lm: 64,
            layers: 8,
            heads: 8,
            hidden_mult: 4,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) {
        assert!(self.k >= 1, "k must be >= 1");
        assert!(self.layers >= 1, "layers must be >= 1");
        assert!(
            self.d_lm % self.heads == 0,
            "d_lm must be divisible by heads"
        );
    }
}

/// Two affine layers with a GELU between: d_clip -> hidden -> k * d_lm.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpMapper<F: Scalar> {
    pub cfg: MapperConfig,
    pub w1: Param<F>,
    pub b1: Param<F>,
    pub w2: Param<F>,
    pub b2: Param<F>,
}

impl<F: Scalar> MlpMapper<F> {
    pub fn new(cfg: MapperConfig, rng: &mut impl RngCore) -> Self {
        cfg.validate();
        let hidden = cfg.hidden_mult * cfg.d_clip;
        MlpMapper {
            w1: Param::normal(vec![cfg.d_clip, hidden], INIT_STD, rng),
            b1: Param::zeros(vec![hidden]),
            w2: Param::normal(vec![hidden, cfg.k * cfg.d_lm], INIT_STD, rng),
            b2: Param::zeros(vec![cfg.k * cfg.d_lm]),
            cfg,
        }
    }

    /// clip_vec (1 x d_clip, on tape) -> prefix (k x d_lm, on tape).
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        binds: &mut Bindings,
        clip: TensorId,
    ) -> Result<TensorId> {
        let w1 = binds.bind(tape, "mapper.w1", &self.w1)?;
        let b1 = binds.bind(tape, "mapper.b1", &self.b1)?;
        let w2 = binds.bind(tape, "mapper.w2", &self.w2)?;
        let b2 = binds.bind(tape, "mapper.b2", &self.b2)?;
        let h = tape.matmul(clip, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.gelu(h)?;
        let out = tape.matmul(h, w2)?;
        let out = tape.add_bias(out, b2)?;
        tape.reshape(out, vec![self.cfg.k, self.cfg.d_lm])
    }
}

impl<F: Scalar> Module<F> for MlpMapper<F> {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f("mapper.w1", &self.w1);
        f("mapper.b1", &self.b1);
        f("mapper.w2", &self.w2);
        f("mapper.b2", &self.b2);
    }
    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f("mapper.w1", &mut self.w1);
        f("mapper.b1", &mut self.b1);
        f("mapper.w2", &mut self.w2);
        f("mapper.b2", &mut self.b2);
    }
}

/// Projects the clip vector to k visual tokens, attends between them and k
/// learned constants over `layers` full-attention blocks, and returns the
/// transformed constant slots.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerMapper<F: Scalar> {
    pub cfg: MapperConfig,
    pub wp: Param<F>,
    pub bp: Param<F>,
    pub constants: Param<F>,
    /// Per-slot position embeddings over the 2k tokens.
    pub pos: Param<F>,
    pub blocks: Vec<Block<F>>,
    pub lnf_g: Param<F>,
    pub lnf_b: Param<F>,
}

impl<F: Scalar> TransformerMapper<F> {
    pub fn new(cfg: MapperConfig, rng: &mut impl RngCore) -> Self {
        cfg.validate();
        let (k, d) = (cfg.k, cfg.d_lm);
        TransformerMapper {
            wp: Param::normal(vec![cfg.d_clip, k * d], INIT_STD, rng),
            bp: Param::zeros(vec![k * d]),
            constants: Param::normal(vec![k, d], INIT_STD, rng),
            pos: Param::normal(vec![2 * k, d], INIT_STD, rng),
            blocks: (0..cfg.layers).map(|_| Block::new(d, cfg.heads, rng)).collect(),
            lnf_g: Param::ones(vec![d]),
            lnf_b: Param::zeros(vec![d]),
            cfg,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        binds: &mut Bindings,
        clip: TensorId,
    ) -> Result<TensorId> {
        let k = self.cfg.k;
        let wp = binds.bind(tape, "mapper.wp", &self.wp)?;
        let bp = binds.bind(tape, "mapper.bp", &self.bp)?;
        let consts = binds.bind(tape, "mapper.constants", &self.constants)?;
        let pos = binds.bind(tape, "mapper.pos", &self.pos)?;

        let vis = tape.matmul(clip, wp)?;
        let vis = tape.add_bias(vis, bp)?;
        let vis = tape.reshape(vis, vec![k, self.cfg.d_lm])?;
        let x = tape.concat_rows(&[vis, consts])?;
        let mut x = tape.add(x, pos)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let name = format!("mapper.block{i:02}");
            x = block.forward(tape, binds, &name, x, AttentionKind::Full)?;
        }
        let lnf_g = binds.bind(tape, "mapper.lnf_g", &self.lnf_g)?;
        let lnf_b = binds.bind(tape, "mapper.lnf_b", &self.lnf_b)?;
        let x = tape.layer_norm(x, lnf_g, lnf_b)?;
        // The constant slots occupy rows k..2k.
        tape.slice_rows(x, k, k)
    }
}

impl<F: Scalar> Module<F> for TransformerMapper<F> {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f("mapper.wp", &self.wp);
        f("mapper.bp", &self.bp);
        f("mapper.constants", &self.constants);
        f("mapper.pos", &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("mapper.block{i:02}"), f);
        }
        f("mapper.lnf_g", &self.lnf_g);
        f("mapper.lnf_b", &self.lnf_b);
    }
    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f("mapper.wp", &mut self.wp);
        f("mapper.bp", &mut self.bp);
        f("mapper.constants", &mut self.constants);
        f("mapper.pos", &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("mapper.block{i:02}"), f);
        }
        f("mapper.lnf_g", &mut self.lnf_g);
        f("mapper.lnf_b", &mut self.lnf_b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mapper<F: Scalar> {
    Mlp(MlpMapper<F>),
    Transformer(TransformerMapper<F>),
}

impl<F: Scalar> Mapper<F> {
    pub fn new(cfg: MapperConfig, rng: &mut impl RngCore) -> Self {
        match cfg.kind {
            MapperKind::Mlp => Mapper::Mlp(MlpMapper::new(cfg, rng)),
            MapperKind::Transformer => Mapper::Transformer(TransformerMapper::new(cfg, rng)),
        }
    }

    pub fn cfg(&self) -> &MapperConfig {
        match self {
            Mapper::Mlp(m) => &m.cfg,
            Mapper::Transformer(m) => &m.cfg,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        binds: &mut Bindings,
        clip: TensorId,
    ) -> Result<TensorId> {
        match self {
            Mapper::Mlp(m) => m.forward(tape, binds, clip),
            Mapper::Transformer(m) => m.forward(tape, binds, clip),
        }
    }

    pub fn count_parameters(&self) -> usize {
        self.count_trainable()
    }
}

impl<F: Scalar> Module<F> for Mapper<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        match self {
            Mapper::Mlp(m) => m.visit(prefix, f),
            Mapper::Transformer(m) => m.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        match self {
            Mapper::Mlp(m) => m.visit_mut(prefix, f),
            Mapper::Transformer(m) => m.visit_mut(prefix, f),
        }
    }
}

/// Run a mapper forward on a fresh tape and return the prefix matrix.
pub fn map_to_prefix<F: Scalar>(mapper: &Mapper<F>, clip_vec: &[f64]) -> Result<Vec<F>> {
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let clip = tape.constant(
        clip_vec.iter().map(|&v| F::from_f64(v)).collect(),
        vec![1, clip_vec.len()],
    )?;
    let out = mapper.forward(&mut tape, &mut binds, clip)?;
    Ok(tape.data(out).to_vec())
}
