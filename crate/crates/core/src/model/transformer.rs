use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noble::{branch_param_count, NobleConfig, NobleSpec, Projection};
use crate::optim::RoleTag;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::rng_for;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

use rand_distr::{Distribution, Normal};

/// Decoder-only transformer shape. `noble`, when set, augments every
/// attention and feedforward projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub depth: usize,
    pub width: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Defaults to `ceil(8/3 · width)` rounded up to a multiple of 64.
    pub ffn_hidden: Option<usize>,
    pub tie_embeddings: bool,
    pub bias: bool,
    #[serde(skip)]
    pub noble: Option<NobleSpec>,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 64,
            n_heads: 4,
            vocab_size: 32,
            seq_len: 64,
            ffn_hidden: None,
            tie_embeddings: false,
            bias: true,
            noble: None,
        }
    }
}

/// Parameter totals split into the plain model and the added branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub base: usize,
    pub branch: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.base + self.branch
    }

    /// Branch parameters as a percentage of the plain model.
    pub fn overhead_pct(&self) -> f64 {
        100.0 * self.branch as f64 / self.base as f64
    }

    /// Branch parameters as a percentage of the augmented model.
    pub fn branch_fraction_pct(&self) -> f64 {
        100.0 * self.branch as f64 / self.total() as f64
    }
}

pub fn default_ffn_hidden(width: usize) -> usize {
    let raw = (8 * width).div_ceil(3);
    raw.div_ceil(64) * 64
}

impl TransformerConfig {
    /// 12 layers, width 1024, 8 heads, GPT-2 vocabulary, untied.
    pub fn base_250m(noble: Option<NobleSpec>) -> Self {
        Self {
            depth: 12,
            width: 1024,
            n_heads: 8,
            vocab_size: 50257,
            seq_len: 1024,
            ffn_hidden: None,
            tie_embeddings: false,
            bias: true,
            noble,
        }
    }

    pub fn ffn(&self) -> usize {
        self.ffn_hidden.unwrap_or_else(|| default_ffn_hidden(self.width))
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.width == 0 || self.vocab_size == 0 || self.seq_len == 0 || self.n_heads == 0 {
            return bad("width, heads, vocab_size and seq_len must be positive".into());
        }
        if self.width % self.n_heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head_dim {} must be even", self.head_dim()));
        }
        if self.ffn() == 0 || self.ffn() % 64 != 0 {
            return bad(format!("ffn_hidden {} must be a positive multiple of 64", self.ffn()));
        }
        if let Some(spec) = &self.noble {
            for (i, o) in self.projection_shapes() {
                NobleConfig::new(i, o, *spec).validate()?;
            }
        }
        Ok(())
    }

    /// `(d_in, d_out)` of the seven projections in one block.
    fn projection_shapes(&self) -> [(usize, usize); 7] {
        let (d, f) = (self.width, self.ffn());
        [(d, d), (d, d), (d, d), (d, d), (d, f), (d, f), (f, d)]
    }

    /// Closed-form counts; `include_embeddings` covers the token table and
    /// the output head.
    pub fn count_params(&self, include_embeddings: bool) -> ParamCounts {
        let d = self.width;
        let bias = |o: usize| if self.bias { o } else { 0 };
        let per_block: usize = self
            .projection_shapes()
            .iter()
            .map(|&(i, o)| i * o + bias(o))
            .sum::<usize>()
            + 2 * d;
        let per_block_branch: usize = match &self.noble {
            Some(spec) => self
                .projection_shapes()
                .iter()
                .map(|&(i, o)| branch_param_count(&NobleConfig::new(i, o, *spec)))
                .sum(),
            None => 0,
        };
        let mut base = self.depth * per_block + d;
        if include_embeddings {
            base += self.vocab_size * d;
            if !self.tie_embeddings {
                base += self.vocab_size * d;
            }
        }
        ParamCounts { base, branch: self.depth * per_block_branch }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub attn_norm: ParamId,
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub o: Projection,
    pub ffn_norm: ParamId,
    pub gate: Projection,
    pub val: Projection,
    pub out: Projection,
}

impl Block {
    pub fn projections(&self) -> [&Projection; 7] {
        [&self.q, &self.k, &self.v, &self.o, &self.gate, &self.val, &self.out]
    }
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    pub embed: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: ParamId,
    pub head: Option<ParamId>,
}

fn gain<F: Real>(store: &mut ParamStore<F>, name: String, d: usize) -> Result<ParamId> {
    store.add(name, RoleTag::BiasOrGain, Tensor::full([d], F::one()), 1.0)
}

fn normal<F: Real>(shape: [usize; 2], std: f64, seed: u64, label: &str) -> Tensor<F> {
    let mut rng = rng_for(seed, label);
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..shape[0] * shape[1]).map(|_| F::of(dist.sample(&mut rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl Transformer {
    /// Every parameter draws from its own stream derived from `seed` and its
    /// name, so a plain and an augmented model with the same seed share the
    /// raw draws of all common parameters.
    pub fn init<F: Real>(cfg: TransformerConfig, seed: u64) -> Result<(ParamStore<F>, Self)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let (d, f, v) = (cfg.width, cfg.ffn(), cfg.vocab_size);
        let spec = cfg.noble.as_ref();

        // Tied tables double as the readout, so they start at readout scale.
        let embed_std = if cfg.tie_embeddings { 1.0 / d as f64 } else { 1.0 };
        let embed = store.add("embed", RoleTag::Embedding, normal([v, d], embed_std, seed, "embed"), 1.0)?;

        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let proj = |store: &mut ParamStore<F>, name: &str, i: usize, o: usize| {
                let name = format!("blocks.{l}.{name}");
                let mut rng = rng_for(seed, &name);
                Projection::init(store, &name, i, o, cfg.bias, spec, &mut rng)
            };
            let attn_norm = gain(&mut store, format!("blocks.{l}.attn_norm"), d)?;
            let q = proj(&mut store, "q", d, d)?;
            let k = proj(&mut store, "k", d, d)?;
            let vv = proj(&mut store, "v", d, d)?;
            let o = proj(&mut store, "o", d, d)?;
            let ffn_norm = gain(&mut store, format!("blocks.{l}.ffn_norm"), d)?;
            let gate = proj(&mut store, "gate", d, f)?;
            let val = proj(&mut store, "val", d, f)?;
            let out = proj(&mut store, "out", f, d)?;
            blocks.push(Block { attn_norm, q, k, v: vv, o, ffn_norm, gate, val, out });
        }
        let final_norm = gain(&mut store, "final_norm".into(), d)?;
        let head = if cfg.tie_embeddings {
            None
        } else {
            // Readout std 1/d keeps initial logits near uniform.
            Some(store.add("head", RoleTag::Embedding, normal([d, v], 1.0 / d as f64, seed, "head"), 1.0)?)
        };
        Ok((store, Self { cfg, embed, blocks, final_norm, head }))
    }

    fn check_ids(&self, ids: &[usize], batch: usize, t: usize) -> Result<()> {
        if batch == 0 || t == 0 || ids.len() != batch * t {
            return Err(Error::InvalidShape {
                op: "forward_lm",
                msg: format!("{} ids do not form a [{batch}, {t}] batch", ids.len()),
            });
        }
        if t > self.cfg.seq_len {
            return Err(Error::InvalidShape {
                op: "forward_lm",
                msg: format!("sequence length {t} exceeds {}", self.cfg.seq_len),
            });
        }
        Ok(())
    }

    /// Logits `[batch, t, vocab]` for row-major `ids[batch, t]`.
    pub fn forward_lm<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, ids: &[usize], batch: usize, t: usize) -> Result<Var> {
        self.check_ids(ids, batch, t)?;
        let heads = self.cfg.n_heads;
        let positions: Vec<usize> = (0..t).collect();
        let mut x = tape.embedding(p.var(self.embed), ids, &[batch, t])?;
        for b in &self.blocks {
            let h = tape.rmsnorm(x, p.var(b.attn_norm))?;
            let q = b.q.forward(tape, p, h)?;
            let k = b.k.forward(tape, p, h)?;
            let v = b.v.forward(tape, p, h)?;
            let q = tape.split_heads(q, heads)?;
            let k = tape.split_heads(k, heads)?;
            let v = tape.split_heads(v, heads)?;
            let q = tape.rope(q, &positions)?;
            let k = tape.rope(k, &positions)?;
            let a = tape.causal_attention(q, k, v)?;
            let a = tape.merge_heads(a)?;
            let a = b.o.forward(tape, p, a)?;
            x = tape.add(x, a)?;

            let h = tape.rmsnorm(x, p.var(b.ffn_norm))?;
            let g = b.gate.forward(tape, p, h)?;
            let g = tape.gelu(g);
            let u = b.val.forward(tape, p, h)?;
            let m = tape.mul(g, u)?;
            let m = b.out.forward(tape, p, m)?;
            x = tape.add(x, m)?;
        }
        let x = tape.rmsnorm(x, p.var(self.final_norm))?;
        match self.head {
            Some(h) => tape.matmul(x, p.var(h)),
            None => tape.matmul_nt(x, p.var(self.embed)),
        }
    }

    /// Mean next-token cross-entropy; `targets` is laid out like `ids`.
    pub fn loss<F: Real>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        ids: &[usize],
        targets: &[usize],
        batch: usize,
        t: usize,
    ) -> Result<Var> {
        let logits = self.forward_lm(tape, p, ids, batch, t)?;
        let flat = tape.reshape(logits, &[batch * t, self.cfg.vocab_size])?;
        tape.softmax_cross_entropy(flat, targets)
    }

    /// Counts from the materialized store (must equal
    /// [`TransformerConfig::count_params`]).
    pub fn count_params<F: Real>(&self, store: &ParamStore<F>, include_embeddings: bool) -> ParamCounts {
        let branch = store.count_where(RoleTag::is_branch);
        let base = store.count_where(|r| !r.is_branch() && (include_embeddings || r != RoleTag::Embedding));
        ParamCounts { base, branch }
    }
}
