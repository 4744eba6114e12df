//! Transformer building blocks shared by the tokenizer and the generator:
//! attention masks, multi-head attention, pre-norm blocks, adaptive-norm
//! blocks, and positional/time embeddings.

use std::sync::Arc;

use rand::Rng;

use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Result, TensorError};

// ── Attention masks ─────────────────────────────────────────────────

/// Boolean attention mask; `allowed[q][k] = true` means query q may attend
/// to key k. Construction fails if any query row has no allowed key.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    q_len: usize,
    k_len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(allowed: Vec<bool>, q_len: usize, k_len: usize) -> Result<Self> {
        assert_eq!(allowed.len(), q_len * k_len);
        for q in 0..q_len {
            if !allowed[q * k_len..(q + 1) * k_len].iter().any(|&a| a) {
                return Err(TensorError::FullyMaskedRow { row: q });
            }
        }
        Ok(AttentionMask { q_len, k_len, allowed })
    }

    /// Every position attends to every position.
    pub fn dense(n: usize) -> Self {
        AttentionMask { q_len: n, k_len: n, allowed: vec![true; n * n] }
    }

    /// Lower-triangular mask: position i attends to j <= i.
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allowed[i * n + j] = true;
            }
        }
        AttentionMask { q_len: n, k_len: n, allowed }
    }

    /// Mask for a sequence laid out as [fixed positions ; latent 1..K].
    /// All queries may attend to the fixed positions and the first `k`
    /// latents. Dropped latents (k+1..K) are unattendable by every other
    /// position and see only themselves, so they emit no influence.
    pub fn prefix(k_total: usize, k: usize, fixed_positions: usize) -> Result<Self> {
        if k > k_total {
            return Err(TensorError::OutOfRange {
                op: "prefix_mask",
                detail: format!("k {k} out of range 0..={k_total}"),
            });
        }
        let n = fixed_positions + k_total;
        let live = fixed_positions + k;
        let mut allowed = vec![false; n * n];
        for q in 0..n {
            if q < live {
                for j in 0..live {
                    allowed[q * n + j] = true;
                }
            } else {
                allowed[q * n + q] = true;
            }
        }
        AttentionMask::new(allowed, n, n)
    }

    pub fn q_len(&self) -> usize {
        self.q_len
    }

    pub fn k_len(&self) -> usize {
        self.k_len
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.k_len + k]
    }
}

// ── Configuration ───────────────────────────────────────────────────

/// Transformer stack shape: depth, width, head count, MLP expansion.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.mlp_ratio <= 0.0 {
            return Err(TensorError::InvalidValue {
                op: "BlockConfig",
                detail: format!("all fields must be positive: {self:?}"),
            });
        }
        if self.width % self.heads != 0 {
            return Err(TensorError::InvalidValue {
                op: "BlockConfig",
                detail: format!("width {} not divisible by heads {}", self.width, self.heads),
            });
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.width as f64) * self.mlp_ratio).round() as usize
    }
}

// ── Parameter initialization ────────────────────────────────────────

pub fn init_normal(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub const INIT_STD: f64 = 0.02;

// ── Linear layer ────────────────────────────────────────────────────

/// y = x @ w + b with w stored [in, out].
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), init_normal(rng, d_in * d_out, INIT_STD), &[d_in, d_out]);
        let b = store.add(&format!("{name}.b"), vec![0.0; d_out], &[d_out]);
        Linear { w, b }
    }

    /// Zero-initialized variant (identity-start projections, output heads).
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(&format!("{name}.w"), vec![0.0; d_in * d_out], &[d_in, d_out]);
        let b = store.add(&format!("{name}.b"), vec![0.0; d_out], &[d_out]);
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, frozen: bool) -> Result<NodeId> {
        let w = if frozen { g.frozen_param(store, self.w) } else { g.param(store, self.w) };
        let b = if frozen { g.frozen_param(store, self.b) } else { g.param(store, self.b) };
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

// ── Layer norm parameters ───────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(&format!("{name}.gain"), vec![1.0; dim], &[dim]);
        let bias = store.add(&format!("{name}.bias"), vec![0.0; dim], &[dim]);
        LayerNormParams { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, frozen: bool) -> Result<NodeId> {
        let gain = if frozen { g.frozen_param(store, self.gain) } else { g.param(store, self.gain) };
        let bias = if frozen { g.frozen_param(store, self.bias) } else { g.param(store, self.bias) };
        g.layer_norm(x, Some(gain), Some(bias), LN_EPS)
    }
}

pub const LN_EPS: f64 = 1e-6;

// ── Multi-head attention ────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(width % heads, 0, "width must divide by heads");
        MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), width, width),
            wk: Linear::new(store, rng, &format!("{name}.wk"), width, width),
            wv: Linear::new(store, rng, &format!("{name}.wv"), width, width),
            wo: Linear::new(store, rng, &format!("{name}.wo"), width, width),
            heads,
            width,
        }
    }

    /// Scaled dot-product attention with the mask applied inside softmax.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mask: &Arc<AttentionMask>,
        frozen: bool,
    ) -> Result<NodeId> {
        let s = g.shape(x)[0];
        if mask.q_len() != s || mask.k_len() != s {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: vec![s, s],
                rhs: vec![mask.q_len(), mask.k_len()],
            });
        }
        let q = self.wq.forward(g, store, x, frozen)?;
        let k = self.wk.forward(g, store, x, frozen)?;
        let v = self.wv.forward(g, store, x, frozen)?;
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let logits = g.matmul_flags(qh, kh, false, true)?;
            let scaled = g.scale(logits, scale);
            let att = g.softmax_masked(scaled, Arc::clone(mask))?;
            head_outs.push(g.matmul(att, vh)?);
        }
        let merged = g.concat(&head_outs, 1)?;
        self.wo.forward(g, store, merged, frozen)
    }
}

// ── Pre-norm transformer block ──────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &BlockConfig,
    ) -> Self {
        let hidden = cfg.mlp_hidden();
        Block {
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), cfg.width),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), cfg.width, cfg.heads),
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), cfg.width),
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), cfg.width, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, cfg.width),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mask: &Arc<AttentionMask>,
        frozen: bool,
    ) -> Result<NodeId> {
        let n1 = self.ln1.forward(g, store, x, frozen)?;
        let a = self.attn.forward(g, store, n1, mask, frozen)?;
        let x = g.add(x, a)?;
        let n2 = self.ln2.forward(g, store, x, frozen)?;
        let h = self.fc1.forward(g, store, n2, frozen)?;
        let h = g.gelu(h);
        let m = self.fc2.forward(g, store, h, frozen)?;
        g.add(x, m)
    }
}

// ── Adaptive-norm transformer block ─────────────────────────────────

/// Pre-norm block whose layer norms are affine-free and modulated by a
/// condition vector: x + g1*Attn(mod(LN x)) + g2*MLP(mod(LN x)), with
/// (scale, shift, gate) pairs produced by a zero-initialized projection,
/// so the block is the identity at initialization.
#[derive(Debug, Clone)]
pub struct AdaLnBlock {
    pub attn: MultiHeadAttention,
    pub fc1: Linear,
    pub fc2: Linear,
    /// cond -> [s1 b1 g1 s2 b2 g2], zero-initialized.
    pub mod_proj: Linear,
    pub width: usize,
}

impl AdaLnBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &BlockConfig,
    ) -> Self {
        let hidden = cfg.mlp_hidden();
        AdaLnBlock {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), cfg.width, cfg.heads),
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), cfg.width, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, cfg.width),
            mod_proj: Linear::zeros(store, &format!("{name}.mod"), cfg.width, 6 * cfg.width),
            width: cfg.width,
        }
    }

    /// `cond` is a single [width] vector shared by the whole sequence.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        cond: NodeId,
        mask: &Arc<AttentionMask>,
        frozen: bool,
    ) -> Result<NodeId> {
        let w = self.width;
        let cond_row = g.reshape(cond, &[1, w])?;
        let act = g.gelu(cond_row);
        let sbg = self.mod_proj.forward(g, store, act, frozen)?;
        let mut parts = Vec::with_capacity(6);
        for i in 0..6 {
            let p = g.slice(sbg, 1, i * w, w)?;
            parts.push(g.reshape(p, &[w])?);
        }
        let (s1, b1, g1, s2, b2, g2) =
            (parts[0], parts[1], parts[2], parts[3], parts[4], parts[5]);

        let n1 = g.layer_norm(x, None, None, LN_EPS)?;
        let m1 = modulate_rows(g, n1, s1, b1)?;
        let a = self.attn.forward(g, store, m1, mask, frozen)?;
        let a = g.mul_row(a, g1)?;
        let x = g.add(x, a)?;

        let n2 = g.layer_norm(x, None, None, LN_EPS)?;
        let m2 = modulate_rows(g, n2, s2, b2)?;
        let h = self.fc1.forward(g, store, m2, frozen)?;
        let h = g.gelu(h);
        let mlp = self.fc2.forward(g, store, h, frozen)?;
        let mlp = g.mul_row(mlp, g2)?;
        g.add(x, mlp)
    }
}

/// h * (1 + scale) + shift with [width] vectors broadcast over rows.
pub fn modulate_rows(g: &mut Graph, h: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
    let s1 = g.add_scalar(scale, 1.0);
    let hs = g.mul_row(h, s1)?;
    g.add_row(hs, shift)
}

/// Same modulation with per-row (scale, shift) matrices of the same shape.
pub fn modulate_elems(g: &mut Graph, h: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
    let s1 = g.add_scalar(scale, 1.0);
    let hs = g.mul(h, s1)?;
    g.add(hs, shift)
}

// ── Time embedding ──────────────────────────────────────────────────

/// Interleaved sin/cos features of geometrically spaced frequencies.
/// t is expected in [0, 1]; dim must be even.
pub fn sinusoidal_time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(TensorError::InvalidValue {
            op: "sinusoidal_time_embed",
            detail: format!("dim must be even, got {dim}"),
        });
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    // Frequencies run from TIME_FREQ_MAX down geometrically; the fastest
    // component resolves t differences of ~1e-3 over the unit interval.
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = TIME_FREQ_MAX * (TIME_FREQ_MIN / TIME_FREQ_MAX).powf(exponent);
        let phase = t * freq;
        out[2 * i] = phase.sin();
        out[2 * i + 1] = phase.cos();
    }
    Ok(out)
}

pub const TIME_FREQ_MAX: f64 = 1000.0;
pub const TIME_FREQ_MIN: f64 = 1.0;
