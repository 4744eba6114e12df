//! The CARD generator: a causal autoregressive backbone over tokenizer
//! latents, conditioned through adaptive normalization, plus an MLP velocity
//! head for flow matching, classifier-free guidance, and an Euler sampler.

use std::sync::Arc;

use rand::Rng;

use crate::nn::{
    sinusoidal_time_embed, AdaLnBlock, AttentionMask, BlockConfig, LayerNormParams, Linear,
    init_normal, INIT_STD, LN_EPS,
};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Result, Tensor, TensorError};
use crate::tokenizer::{draw_normal, Tokenizer};

/// Sinusoidal feature width fed to the time projection.
pub const TIME_FEAT_DIM: usize = 256;

// ── Configuration ───────────────────────────────────────────────────

/// Where the generator's class condition comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CondMode {
    /// Reuse the tokenizer's class-embedding table, frozen.
    Shared,
    /// Start from the tokenizer's table but train a generator-side copy.
    SharedUnfrozen,
    /// Train an independent generator-side table from scratch.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CardConfig {
    /// AR backbone depth / width / heads.
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Backbone MLP expansion. The published configurations are reproduced
    /// with ratio 1 given per-block adaptive-norm projections.
    pub mlp_ratio: f64,
    /// Velocity head block count (D_mlp) and width (W_mlp).
    pub head_depth: usize,
    pub head_width: usize,
    pub head_mlp_ratio: f64,
    /// Latent tokens per image; must match the tokenizer.
    pub token_count: usize,
    /// Latent channels per token.
    pub d_latent: usize,
    pub sampling_steps: usize,
    pub cfg_scale: f64,
    pub class_dropout_p: f64,
    pub num_classes: usize,
    pub cond_mode: CondMode,
}

impl CardConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.depth,
            self.width,
            self.heads,
            self.head_depth,
            self.head_width,
            self.token_count,
            self.d_latent,
            self.sampling_steps,
            self.num_classes,
        ];
        if positive.iter().any(|&v| v == 0) || self.mlp_ratio <= 0.0 || self.head_mlp_ratio <= 0.0 {
            return Err(TensorError::InvalidValue {
                op: "CardConfig",
                detail: format!("all size fields must be positive: {self:?}"),
            });
        }
        if self.width % self.heads != 0 {
            return Err(TensorError::InvalidValue {
                op: "CardConfig",
                detail: format!("width {} not divisible by heads {}", self.width, self.heads),
            });
        }
        if !(0.0..=1.0).contains(&self.class_dropout_p) {
            return Err(TensorError::InvalidValue {
                op: "CardConfig",
                detail: format!("class_dropout_p {} outside [0,1]", self.class_dropout_p),
            });
        }
        Ok(())
    }

    fn backbone_block_cfg(&self) -> BlockConfig {
        BlockConfig {
            depth: self.depth,
            width: self.width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    fn head_hidden(&self) -> usize {
        ((self.head_width as f64) * self.head_mlp_ratio).round() as usize
    }
}

// ── Velocity head block ─────────────────────────────────────────────

/// Residual MLP block with per-row adaptive-norm modulation:
/// x + gate * MLP(modulate(LN(x), scale, shift)), where (scale, shift, gate)
/// come from a zero-initialized projection of the fused condition.
#[derive(Debug, Clone)]
struct HeadBlock {
    mod_proj: Linear,
    fc1: Linear,
    fc2: Linear,
    width: usize,
}

impl HeadBlock {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize, hidden: usize) -> Self {
        HeadBlock {
            mod_proj: Linear::zeros(store, &format!("{name}.mod"), width, 3 * width),
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), width, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, width),
            width,
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        cond: NodeId,
        frozen: bool,
    ) -> Result<NodeId> {
        let c = self.width;
        let act = g.gelu(cond);
        let sbg = self.mod_proj.forward(g, store, act, frozen)?;
        let s = g.slice(sbg, 1, 0, c)?;
        let b = g.slice(sbg, 1, c, c)?;
        let gate = g.slice(sbg, 1, 2 * c, c)?;
        let n = g.layer_norm(x, None, None, LN_EPS)?;
        let m = crate::nn::modulate_elems(g, n, s, b)?;
        let h = self.fc1.forward(g, store, m, frozen)?;
        let h = g.gelu(h);
        let out = self.fc2.forward(g, store, h, frozen)?;
        let gated = g.mul(out, gate)?;
        g.add(x, gated)
    }
}

// ── Generator ───────────────────────────────────────────────────────

pub struct Generator {
    pub cfg: CardConfig,
    pub store: ParamStore,
    input_proj: Linear,
    begin: ParamId,
    pos: ParamId,
    blocks: Vec<AdaLnBlock>,
    final_ln: LayerNormParams,
    x_lift: Linear,
    h_proj: Linear,
    cond_proj: Linear,
    t_lin: Linear,
    head_blocks: Vec<HeadBlock>,
    out_proj: Linear,
    /// Generator-side class table for the independent / unfrozen modes.
    pub own_table: Option<ParamId>,
}

impl Generator {
    /// `tokenizer` provides the table copied in shared-unfrozen mode; it may
    /// be None for shared/independent construction.
    pub fn new(cfg: CardConfig, rng: &mut impl Rng, tokenizer: Option<&Tokenizer>) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let w = cfg.width;
        let c = cfg.head_width;
        let d = cfg.d_latent;
        let k = cfg.token_count;

        let input_proj = Linear::new(&mut store, rng, "ar.input_proj", d, w);
        let begin = store.add("ar.begin", init_normal(rng, w, INIT_STD), &[w]);
        let pos = store.add("ar.pos", init_normal(rng, k * w, INIT_STD), &[k, w]);
        let block_cfg = cfg.backbone_block_cfg();
        let blocks = (0..cfg.depth)
            .map(|i| AdaLnBlock::new(&mut store, rng, &format!("ar.block{i}"), &block_cfg))
            .collect();
        let final_ln = LayerNormParams::new(&mut store, "ar.ln", w);
        let x_lift = Linear::new(&mut store, rng, "head.x_lift", d, c);
        let h_proj = Linear::new(&mut store, rng, "head.h_proj", w, c);
        let cond_proj = Linear::new(&mut store, rng, "head.cond_proj", w, c);
        let t_lin = Linear::new(&mut store, rng, "head.t_lin", TIME_FEAT_DIM, c);
        let hidden = cfg.head_hidden();
        let head_blocks = (0..cfg.head_depth)
            .map(|i| HeadBlock::new(&mut store, rng, &format!("head.block{i}"), c, hidden))
            .collect();
        let out_proj = Linear::zeros(&mut store, "head.out_proj", c, d);

        let own_table = match cfg.cond_mode {
            CondMode::Shared => None,
            CondMode::SharedUnfrozen => {
                let tok = tokenizer.ok_or_else(|| TensorError::InvalidValue {
                    op: "Generator",
                    detail: "shared-unfrozen mode needs the tokenizer at construction".into(),
                })?;
                let src = tok.store.entry(tok.class_table);
                if src.shape[1] != w || src.shape[0] != cfg.num_classes + 1 {
                    return Err(TensorError::ShapeMismatch {
                        op: "Generator",
                        lhs: src.shape.clone(),
                        rhs: vec![cfg.num_classes + 1, w],
                    });
                }
                Some(store.add("cond.table", src.value.to_vec(), &src.shape.clone()))
            }
            CondMode::Independent => Some(store.add(
                "cond.table",
                init_normal(rng, (cfg.num_classes + 1) * w, INIT_STD),
                &[cfg.num_classes + 1, w],
            )),
        };

        Ok(Generator {
            cfg,
            store,
            input_proj,
            begin,
            pos,
            blocks,
            final_ln,
            x_lift,
            h_proj,
            cond_proj,
            t_lin,
            head_blocks,
            out_proj,
            own_table,
        })
    }

    fn class_row(&self, class_id: Option<usize>) -> Result<usize> {
        match class_id {
            Some(cl) if cl < self.cfg.num_classes => Ok(cl),
            Some(cl) => Err(TensorError::OutOfRange {
                op: "class_id",
                detail: format!("class {cl} >= num_classes {}", self.cfg.num_classes),
            }),
            None => Ok(self.cfg.num_classes),
        }
    }

    /// Condition vector as plain data (inference paths).
    pub fn cond_data(&self, tokenizer: Option<&Tokenizer>, class_id: Option<usize>) -> Result<Vec<f64>> {
        match self.cfg.cond_mode {
            CondMode::Shared => {
                let tok = tokenizer.ok_or_else(|| TensorError::InvalidValue {
                    op: "cond_data",
                    detail: "shared condition mode needs the tokenizer".into(),
                })?;
                let v = tok.class_embedding(class_id)?;
                if v.len() != self.cfg.width {
                    return Err(TensorError::ShapeMismatch {
                        op: "cond_data",
                        lhs: vec![self.cfg.width],
                        rhs: vec![v.len()],
                    });
                }
                Ok(v)
            }
            _ => {
                let table = self.store.value(self.own_table.expect("own table"));
                let w = self.cfg.width;
                let row = self.class_row(class_id)?;
                Ok(table[row * w..(row + 1) * w].to_vec())
            }
        }
    }

    /// Condition vector as a graph node; trainable in the independent and
    /// shared-unfrozen modes.
    pub fn cond_node(
        &self,
        g: &mut Graph,
        tokenizer: Option<&Tokenizer>,
        class_id: Option<usize>,
        frozen: bool,
    ) -> Result<NodeId> {
        match self.cfg.cond_mode {
            CondMode::Shared => {
                let data = self.cond_data(tokenizer, class_id)?;
                Ok(g.input(&data, &[self.cfg.width]))
            }
            _ => {
                let id = self.own_table.expect("own table");
                let table = if frozen {
                    g.frozen_param(&self.store, id)
                } else {
                    g.param(&self.store, id)
                };
                let row = self.class_row(class_id)?;
                let flat = g.embed(table, &[row])?;
                g.reshape(flat, &[self.cfg.width])
            }
        }
    }

    /// Causal context vectors. `prev_tokens` holds the already-known tokens
    /// ([m x d], m < K, teacher-forced or generated); the output row i is the
    /// context used to produce token i, for i in 0..=m.
    pub fn contexts(
        &self,
        g: &mut Graph,
        prev_tokens: Option<NodeId>,
        cond: NodeId,
        frozen: bool,
    ) -> Result<NodeId> {
        let w = self.cfg.width;
        let begin = if frozen {
            g.frozen_param(&self.store, self.begin)
        } else {
            g.param(&self.store, self.begin)
        };
        let begin_row = g.reshape(begin, &[1, w])?;
        let seq = match prev_tokens {
            Some(t) => {
                let m = g.shape(t)[0];
                if m >= self.cfg.token_count {
                    return Err(TensorError::OutOfRange {
                        op: "ar_contexts",
                        detail: format!(
                            "{m} previous tokens does not fit K {}",
                            self.cfg.token_count
                        ),
                    });
                }
                let lifted = self.input_proj.forward(g, &self.store, t, frozen)?;
                g.concat(&[begin_row, lifted], 0)?
            }
            None => begin_row,
        };
        let len = g.shape(seq)[0];
        let pos_full = if frozen {
            g.frozen_param(&self.store, self.pos)
        } else {
            g.param(&self.store, self.pos)
        };
        let pos = g.slice(pos_full, 0, 0, len)?;
        let mut x = g.add(seq, pos)?;
        let mask = Arc::new(AttentionMask::causal(len));
        for blk in &self.blocks {
            x = blk.forward(g, &self.store, x, cond, &mask, frozen)?;
        }
        self.final_ln.forward(g, &self.store, x, frozen)
    }

    /// Teacher-forced contexts for a full [K x d] token block.
    pub fn ar_contexts(
        &self,
        g: &mut Graph,
        tokens: NodeId,
        cond: NodeId,
        frozen: bool,
    ) -> Result<NodeId> {
        let k = self.cfg.token_count;
        let shape = g.shape(tokens).to_vec();
        if shape != [k, self.cfg.d_latent] {
            return Err(TensorError::ShapeMismatch {
                op: "ar_contexts",
                lhs: vec![k, self.cfg.d_latent],
                rhs: shape,
            });
        }
        let prev = if k == 1 {
            None
        } else {
            Some(g.slice(tokens, 0, 0, k - 1)?)
        };
        self.contexts(g, prev, cond, frozen)
    }

    /// Velocity prediction for a batch of noisy tokens. `t_feats` holds one
    /// sinusoidal feature row per token; `h` the matching context rows.
    pub fn velocity_nodes(
        &self,
        g: &mut Graph,
        x_t: NodeId,
        t_feats: NodeId,
        h: NodeId,
        cond: NodeId,
        frozen: bool,
    ) -> Result<NodeId> {
        let n = g.shape(x_t)[0];
        let cond_row = g.reshape(cond, &[1, self.cfg.width])?;
        let cond_c = self.cond_proj.forward(g, &self.store, cond_row, frozen)?;
        let cond_vec = g.reshape(cond_c, &[self.cfg.head_width])?;
        let t_c = self.t_lin.forward(g, &self.store, t_feats, frozen)?;
        let h_c = self.h_proj.forward(g, &self.store, h, frozen)?;
        let th = g.add(t_c, h_c)?;
        let m = g.add_row(th, cond_vec)?; // [n x c] fused modulation input

        let mut x = self.x_lift.forward(g, &self.store, x_t, frozen)?;
        for blk in &self.head_blocks {
            x = blk.forward(g, &self.store, x, m, frozen)?;
        }
        let n_out = g.layer_norm(x, None, None, LN_EPS)?;
        let v = self.out_proj.forward(g, &self.store, n_out, frozen)?;
        debug_assert_eq!(g.shape(v), &[n, self.cfg.d_latent]);
        Ok(v)
    }

    /// Flow-matching loss over a teacher-forced token block with explicit
    /// per-token draws: x_t = (1-t) eps + t x0, target v* = x0 - eps.
    pub fn flow_loss_at(
        &self,
        g: &mut Graph,
        x0_data: &[f64],
        ts: &[f64],
        eps: &[f64],
        cond: NodeId,
        frozen: bool,
    ) -> Result<NodeId> {
        let k = self.cfg.token_count;
        let d = self.cfg.d_latent;
        if x0_data.len() != k * d || eps.len() != k * d || ts.len() != k {
            return Err(TensorError::ShapeMismatch {
                op: "flow_matching_loss",
                lhs: vec![k, d],
                rhs: vec![x0_data.len() / d.max(1), d],
            });
        }
        let x0 = g.input(x0_data, &[k, d]);
        let h = self.ar_contexts(g, x0, cond, frozen)?;

        let eps_n = g.input(eps, &[k, d]);
        let t_col = g.input(ts, &[k]);
        let one_minus: Vec<f64> = ts.iter().map(|t| 1.0 - t).collect();
        let omt_col = g.input(&one_minus, &[k]);
        let noise_part = g.mul_col(eps_n, omt_col)?;
        let data_part = g.mul_col(x0, t_col)?;
        let x_t = g.add(noise_part, data_part)?;
        let target = g.sub(x0, eps_n)?;

        let mut feats = Vec::with_capacity(k * TIME_FEAT_DIM);
        for &t in ts {
            feats.extend(sinusoidal_time_embed(t, TIME_FEAT_DIM)?);
        }
        let t_feats = g.input(&feats, &[k, TIME_FEAT_DIM]);

        let v = self.velocity_nodes(g, x_t, t_feats, h, cond, frozen)?;
        let target_const = g.detach(target);
        g.mse(v, target_const)
    }

    /// Spec-shaped wrapper drawing t ~ U(0,1) and eps ~ N(0,I) per token.
    pub fn flow_matching_loss(
        &self,
        g: &mut Graph,
        x0_data: &[f64],
        cond: NodeId,
        rng: &mut impl Rng,
        frozen: bool,
    ) -> Result<NodeId> {
        let k = self.cfg.token_count;
        let d = self.cfg.d_latent;
        let ts: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let eps = draw_normal(rng, k * d);
        self.flow_loss_at(g, x0_data, &ts, &eps, cond, frozen)
    }

    /// Single-token velocity on plain data (sampling path).
    pub fn velocity_data(&self, x: &[f64], t: f64, h: &[f64], cond: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xn = g.input(x, &[1, self.cfg.d_latent]);
        let feats = sinusoidal_time_embed(t, TIME_FEAT_DIM)?;
        let tn = g.input(&feats, &[1, TIME_FEAT_DIM]);
        let hn = g.input(h, &[1, self.cfg.width]);
        let cn = g.input(cond, &[self.cfg.width]);
        let v = self.velocity_nodes(&mut g, xn, tn, hn, cn, true)?;
        Ok(g.value(v).to_vec())
    }

    /// Euler-integrate one token from noise under classifier-free guidance.
    /// Guidance scales 1 and 0 short-circuit to the pure conditional /
    /// unconditional branches so those identities hold bitwise.
    pub fn sample_token(
        &self,
        h: &[f64],
        cond_c: &[f64],
        cond_null: &[f64],
        steps: usize,
        cfg_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        let x0 = draw_normal(rng, self.cfg.d_latent);
        euler_integrate(&x0, steps, |x, t| {
            if cfg_scale == 1.0 {
                self.velocity_data(x, t, h, cond_c)
            } else if cfg_scale == 0.0 {
                self.velocity_data(x, t, h, cond_null)
            } else {
                let vc = self.velocity_data(x, t, h, cond_c)?;
                let vn = self.velocity_data(x, t, h, cond_null)?;
                Ok(vn
                    .iter()
                    .zip(vc.iter())
                    .map(|(n, c)| n + cfg_scale * (c - n))
                    .collect())
            }
        })
    }

    /// Autoregressive generation of a full token block for one class.
    pub fn generate(
        &self,
        tokenizer: Option<&Tokenizer>,
        class_id: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let k = self.cfg.token_count;
        let d = self.cfg.d_latent;
        let cond_c = self.cond_data(tokenizer, class_id)?;
        let cond_null = self.cond_data(tokenizer, None)?;
        let mut tokens: Vec<f64> = Vec::with_capacity(k * d);
        for i in 0..k {
            let mut g = Graph::new();
            let cn = g.input(&cond_c, &[self.cfg.width]);
            let prev = if i == 0 {
                None
            } else {
                Some(g.input(&tokens, &[i, d]))
            };
            let h_all = self.contexts(&mut g, prev, cn, true)?;
            let h_i = g.value(h_all)[i * self.cfg.width..(i + 1) * self.cfg.width].to_vec();
            let x = self.sample_token(
                &h_i,
                &cond_c,
                &cond_null,
                self.cfg.sampling_steps,
                self.cfg.cfg_scale,
                rng,
            )?;
            tokens.extend(x);
        }
        Tensor::new(tokens, &[k, d])
    }
}

/// Fixed-step Euler integration of dx/dt = field(x, t) from t=0 to t=1.
pub fn euler_integrate<F>(x0: &[f64], steps: usize, mut field: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if steps == 0 {
        return Err(TensorError::InvalidValue {
            op: "euler_integrate",
            detail: "steps must be >= 1".into(),
        });
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0.to_vec();
    for i in 0..steps {
        let t = i as f64 / steps as f64;
        let v = field(&x, t)?;
        for (xj, vj) in x.iter_mut().zip(v.iter()) {
            *xj += vj * dt;
        }
    }
    Ok(x)
}

// ── Analytic parameter counting ─────────────────────────────────────

/// Exact scalar-parameter total of a `Generator` built from `cfg`, computed
/// without allocation. Matches `ParamStore::total_scalars` of the real model.
pub fn param_count(cfg: &CardConfig) -> usize {
    let w = cfg.width;
    let c = cfg.head_width;
    let d = cfg.d_latent;
    let k = cfg.token_count;
    let hidden = ((w as f64) * cfg.mlp_ratio).round() as usize;
    let head_hidden = cfg.head_hidden();

    let linear = |i: usize, o: usize| i * o + o;

    let mut total = 0usize;
    total += linear(d, w); // input projection
    total += w; // begin token
    total += k * w; // positions
    // backbone blocks: attention + MLP + adaptive-norm projection
    let block = linear(w, w) * 4           // qkv + output projection
        + linear(w, hidden) + linear(hidden, w)
        + linear(w, 6 * w); // modulation
    total += cfg.depth * block;
    total += 2 * w; // final layer norm
    // velocity head
    total += linear(d, c); // x lift
    total += linear(w, c); // context projection
    total += linear(w, c); // condition projection
    total += linear(TIME_FEAT_DIM, c); // time projection
    let head_block = linear(c, 3 * c) + linear(c, head_hidden) + linear(head_hidden, c);
    total += cfg.head_depth * head_block;
    total += linear(c, d); // output projection
    // generator-side class table only exists off the shared path
    if cfg.cond_mode != CondMode::Shared {
        total += (cfg.num_classes + 1) * w;
    }
    total
}
