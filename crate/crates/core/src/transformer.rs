//! Pre-norm transformer stacks and the attention-mask regimes.
//!
//! The same [`TransformerStack`] serves as the autoregressive decoder and as
//! the bidirectional item-encoder backbone; only the mask differs.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    /// Desk-scale decoder: 2 layers, 4 heads, width 64.
    pub fn desk_decoder() -> Self {
        TransformerConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_positions: 256,
            dropout: 0.0,
        }
    }

    /// Desk-scale item-encoder backbone.
    pub fn desk_encoder() -> Self {
        TransformerConfig {
            n_layers: 1,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            max_positions: 64,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.n_layers, self.n_heads, self.d_model, self.d_ff, self.max_positions];
        if positive.contains(&0) {
            return Err(Error::Config(format!("transformer sizes must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRegime {
    Causal,
    Ranking,
}

/// Square visibility matrix: `allowed(i, j)` means position `i` may attend
/// to position `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            allowed[i * n..=i * n + i].fill(true);
        }
        AttentionMask { n, allowed }
    }

    /// Every position sees every position.
    pub fn full(n: usize) -> Self {
        AttentionMask {
            n,
            allowed: vec![true; n * n],
        }
    }

    /// Independent fully-connected blocks along the diagonal.
    pub fn block_diagonal(lens: &[usize]) -> Self {
        let n = lens.iter().sum();
        let mut allowed = vec![false; n * n];
        let mut start = 0;
        for &len in lens {
            for i in start..start + len {
                allowed[i * n + start..i * n + start + len].fill(true);
            }
            start += len;
        }
        AttentionMask { n, allowed }
    }

    /// Causal context of `context_len` followed by one bidirectional
    /// candidate block that sees the whole context.
    pub fn ranking(context_len: usize, candidates: usize) -> Self {
        Self::with_candidate_blocks(context_len, context_len, &[candidates])
    }

    /// Causal prefix of `prefix_len` positions followed by candidate blocks.
    ///
    /// Rows of each block see prefix positions `0..visible_prefix` and every
    /// slot of their own block; prefix rows never see candidates. With
    /// `visible_prefix < prefix_len` the tail of the prefix (for instance a
    /// teacher-forced response) is hidden from the candidates.
    pub fn with_candidate_blocks(prefix_len: usize, visible_prefix: usize, blocks: &[usize]) -> Self {
        assert!(visible_prefix <= prefix_len);
        let n = prefix_len + blocks.iter().sum::<usize>();
        let mut m = AttentionMask::causal(prefix_len).resized(n);
        let mut start = prefix_len;
        for &len in blocks {
            for i in start..start + len {
                m.allowed[i * n..i * n + visible_prefix].fill(true);
                m.allowed[i * n + start..i * n + start + len].fill(true);
            }
            start += len;
        }
        m
    }

    fn resized(&self, n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..self.n {
            allowed[i * n..i * n + self.n].copy_from_slice(&self.allowed[i * self.n..(i + 1) * self.n]);
        }
        AttentionMask { n, allowed }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// Visible key positions per query, as consumed by [`Graph::attention`].
    pub fn visible_lists(&self) -> Rc<Vec<Vec<usize>>> {
        Rc::new(
            (0..self.n)
                .map(|i| (0..self.n).filter(|&j| self.allowed(i, j)).collect())
                .collect(),
        )
    }
}

/// Builds the mask for a context followed by `candidate_count` candidates.
///
/// In the causal regime the candidates are just more causal positions.
pub fn build_mask(regime: MaskRegime, context_len: usize, candidate_count: usize) -> AttentionMask {
    match regime {
        MaskRegime::Causal => AttentionMask::causal(context_len + candidate_count),
        MaskRegime::Ranking if candidate_count == 0 => AttentionMask::causal(context_len),
        MaskRegime::Ranking => AttentionMask::ranking(context_len, candidate_count),
    }
}

/// Position ids for a context followed by candidates that all share the
/// first position after the context.
pub fn shared_candidate_positions(context_len: usize, candidates: usize) -> Vec<usize> {
    (0..context_len)
        .chain(std::iter::repeat_n(context_len, candidates))
        .collect()
}

/// Inverted dropout driven by an explicit RNG; absent means inference.
pub struct Dropout<'r, R: Rng> {
    pub rate: f64,
    pub rng: &'r mut R,
}

#[derive(Debug, Clone)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc: ParamId,
    b_fc: ParamId,
    w_proj: ParamId,
    b_proj: ParamId,
}

/// Learned position table, pre-norm blocks and a final layer norm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    cfg: TransformerConfig,
    wpe: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

impl TransformerStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: TransformerConfig,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let resid_std = init_std / (2.0 * cfg.n_layers as f64).sqrt();
        let wpe = store.add_normal(format!("{prefix}.wpe"), &[cfg.max_positions, d], init_std / 2.0, rng)?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("{prefix}.h{l}.{s}");
            blocks.push(Block {
                ln1_g: store.add_constant(p("ln1.g"), &[1, d], 1.0)?,
                ln1_b: store.add_constant(p("ln1.b"), &[1, d], 0.0)?,
                w_qkv: store.add_normal(p("attn.w_qkv"), &[d, 3 * d], init_std, rng)?,
                b_qkv: store.add_constant(p("attn.b_qkv"), &[1, 3 * d], 0.0)?,
                w_o: store.add_normal(p("attn.w_o"), &[d, d], resid_std, rng)?,
                b_o: store.add_constant(p("attn.b_o"), &[1, d], 0.0)?,
                ln2_g: store.add_constant(p("ln2.g"), &[1, d], 1.0)?,
                ln2_b: store.add_constant(p("ln2.b"), &[1, d], 0.0)?,
                w_fc: store.add_normal(p("mlp.w_fc"), &[d, cfg.d_ff], init_std, rng)?,
                b_fc: store.add_constant(p("mlp.b_fc"), &[1, cfg.d_ff], 0.0)?,
                w_proj: store.add_normal(p("mlp.w_proj"), &[cfg.d_ff, d], resid_std, rng)?,
                b_proj: store.add_constant(p("mlp.b_proj"), &[1, d], 0.0)?,
            });
        }
        Ok(TransformerStack {
            cfg,
            wpe,
            blocks,
            lnf_g: store.add_constant(format!("{prefix}.ln_f.g"), &[1, d], 1.0)?,
            lnf_b: store.add_constant(format!("{prefix}.ln_f.b"), &[1, d], 0.0)?,
        })
    }

    /// Re-binds to parameters already present in `store` (checkpoint load).
    pub fn bind(store: &ParamStore, prefix: &str, cfg: TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let get = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
        };
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("{prefix}.h{l}.{s}");
            blocks.push(Block {
                ln1_g: get(p("ln1.g"))?,
                ln1_b: get(p("ln1.b"))?,
                w_qkv: get(p("attn.w_qkv"))?,
                b_qkv: get(p("attn.b_qkv"))?,
                w_o: get(p("attn.w_o"))?,
                b_o: get(p("attn.b_o"))?,
                ln2_g: get(p("ln2.g"))?,
                ln2_b: get(p("ln2.b"))?,
                w_fc: get(p("mlp.w_fc"))?,
                b_fc: get(p("mlp.b_fc"))?,
                w_proj: get(p("mlp.w_proj"))?,
                b_proj: get(p("mlp.b_proj"))?,
            });
        }
        Ok(TransformerStack {
            cfg,
            wpe: get(format!("{prefix}.wpe"))?,
            blocks,
            lnf_g: get(format!("{prefix}.ln_f.g"))?,
            lnf_b: get(format!("{prefix}.ln_f.b"))?,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// Every parameter owned by this stack.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.wpe, self.lnf_g, self.lnf_b];
        for b in &self.blocks {
            ids.extend([
                b.ln1_g, b.ln1_b, b.w_qkv, b.b_qkv, b.w_o, b.b_o, b.ln2_g, b.ln2_b, b.w_fc, b.b_fc, b.w_proj, b.b_proj,
            ]);
        }
        ids
    }

    /// Runs the stack over `T×d` token embeddings.
    ///
    /// `positions[t]` selects the position row added to token `t`, so packed
    /// batches may restart positions; only position ids are bounded by
    /// `max_positions`. The output is the final-layer-normed `T×d` state.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        tokens: Var,
        positions: &[usize],
        mask: &AttentionMask,
        mut dropout: Option<Dropout<'_, R>>,
    ) -> Result<Var> {
        let t = g.shape(tokens)[0];
        if t == 0 {
            return Err(Error::Invalid("empty sequence".into()));
        }
        if positions.len() != t || mask.len() != t {
            return Err(Error::shape("transformer", &[t], &[positions.len(), mask.len()]));
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= self.cfg.max_positions) {
            return Err(Error::SequenceTooLong {
                len: bad + 1,
                limit: self.cfg.max_positions,
            });
        }
        let wpe = g.param(self.wpe);
        let pos = g.gather_rows(wpe, positions)?;
        let mut x = g.add(tokens, pos)?;
        let visible = mask.visible_lists();
        for b in &self.blocks {
            let (g1, b1) = (g.param(b.ln1_g), g.param(b.ln1_b));
            let h = g.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
            let (w, bias) = (g.param(b.w_qkv), g.param(b.b_qkv));
            let qkv = g.matmul(h, w)?;
            let qkv = g.add_row(qkv, bias)?;
            let a = g.attention(qkv, self.cfg.n_heads, visible.clone())?;
            let (w, bias) = (g.param(b.w_o), g.param(b.b_o));
            let a = g.matmul(a, w)?;
            let mut a = g.add_row(a, bias)?;
            if let Some(d) = dropout.as_mut() {
                a = apply_dropout(g, a, d)?;
            }
            x = g.add(x, a)?;

            let (g2, b2) = (g.param(b.ln2_g), g.param(b.ln2_b));
            let h = g.layer_norm(x, g2, b2, LAYER_NORM_EPS)?;
            let (w, bias) = (g.param(b.w_fc), g.param(b.b_fc));
            let f = g.matmul(h, w)?;
            let f = g.add_row(f, bias)?;
            let f = g.gelu(f);
            let (w, bias) = (g.param(b.w_proj), g.param(b.b_proj));
            let f = g.matmul(f, w)?;
            let mut f = g.add_row(f, bias)?;
            if let Some(d) = dropout.as_mut() {
                f = apply_dropout(g, f, d)?;
            }
            x = g.add(x, f)?;
        }
        let (gf, bf) = (g.param(self.lnf_g), g.param(self.lnf_b));
        g.layer_norm(x, gf, bf, LAYER_NORM_EPS)
    }
}

fn apply_dropout<R: Rng>(g: &mut Graph, x: Var, d: &mut Dropout<'_, R>) -> Result<Var> {
    if d.rate <= 0.0 {
        return Ok(x);
    }
    let keep = Bernoulli::new(1.0 - d.rate).map_err(|e| Error::Config(e.to_string()))?;
    let scale = 1.0 / (1.0 - d.rate);
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let m: Vec<f64> = (0..n).map(|_| if keep.sample(d.rng) { scale } else { 0.0 }).collect();
    let mask = g.constant(Tensor::new(shape, m)?);
    g.mul(x, mask)
}
