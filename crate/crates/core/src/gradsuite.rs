//! The full finite-difference verification suite: every differentiable
//! primitive plus the composite blocks and losses, each checked against
//! central differences over many random seeds.
//!
//! Hard vector quantization is deliberately absent: its straight-through
//! backward is an estimator, not the true Jacobian, and is verified by its
//! own identity checks instead.

use std::cell::RefCell;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::card::{CardConfig, CondMode, Generator};
use crate::gradcheck::{finite_diff_check, FdReport};
use crate::nn::{AdaLnBlock, AttentionMask, Block, BlockConfig, MultiHeadAttention};
use crate::regu::{ReguConfig, ReguKind};
use crate::tensor::{Graph, NodeId, ParamStore};
use crate::tokenizer::{Tokenizer, TokenizerConfig};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub dead_coords: usize,
    pub passed: bool,
}

pub struct SuiteResult {
    pub entries: Vec<SuiteEntry>,
    pub elapsed_secs: f64,
}

impl SuiteResult {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

fn rand_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Run one named check over `seeds` random inputs. `build` receives the
/// graph and the flat input and must return the scalar loss node together
/// with the input leaf to differentiate.
fn check<F>(name: &str, seeds: usize, input_len: usize, range: (f64, f64), build: F) -> SuiteEntry
where
    F: Fn(&mut Graph, &[f64]) -> (NodeId, NodeId) + Sync,
{
    let mut worst = 0.0f64;
    let mut dead = 0usize;
    let mut passed = true;
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0000 + seed);
        let x = rand_vec(&mut rng, input_len, range.0, range.1);
        let value = |v: &[f64]| -> f64 {
            let mut g = Graph::new();
            let (loss, _) = build(&mut g, v);
            g.scalar_value(loss)
        };
        let grad = |v: &[f64]| -> Vec<f64> {
            let mut g = Graph::new();
            let (loss, leaf) = build(&mut g, v);
            g.backward(loss).expect("backward");
            g.grad(leaf).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; v.len()])
        };
        let rep: FdReport = finite_diff_check(value, grad, &x, FD_STEP, FD_TOL, None);
        worst = worst.max(rep.max_rel_err);
        dead += rep.dead_coords.len();
        passed &= rep.passed;
    }
    SuiteEntry { name: name.to_string(), seeds, max_rel_err: worst, dead_coords: dead, passed }
}

fn micro_tok_cfg(kind: ReguKind) -> TokenizerConfig {
    TokenizerConfig {
        image_size: 8,
        patch: 4,
        channels: 1,
        width: 16,
        latent_count: 2,
        condition_count: 1,
        num_classes: 2,
        enc: BlockConfig { depth: 1, width: 16, heads: 2, mlp_ratio: 2.0 },
        dec: BlockConfig { depth: 1, width: 16, heads: 2, mlp_ratio: 2.0 },
        regu: ReguConfig {
            kind,
            d_latent: 4,
            codebook_size: 6,
            vq_beta: 0.25,
            softvq_tau: 0.5,
            softvq_entropy_weight: 0.0,
        },
        kl_weight: 1e-2,
        aux_weight: 1.0,
    }
}

fn micro_card_cfg() -> CardConfig {
    CardConfig {
        depth: 1,
        width: 16,
        heads: 2,
        mlp_ratio: 1.0,
        head_depth: 2,
        head_width: 24,
        head_mlp_ratio: 2.0,
        token_count: 2,
        d_latent: 4,
        sampling_steps: 4,
        cfg_scale: 1.5,
        class_dropout_p: 0.0,
        num_classes: 2,
        cond_mode: CondMode::Independent,
    }
}

/// Sampled-coordinate FD check of a loss over a model's parameter vector.
fn model_param_check<T>(
    name: &str,
    seeds: usize,
    coords_per_seed: usize,
    make: impl Fn(u64) -> T,
    params_of: impl Fn(&T) -> &ParamStore,
    params_of_mut: impl Fn(&mut T) -> &mut ParamStore,
    loss_and_grad: impl Fn(&T, u64, bool) -> (f64, Option<Vec<f64>>),
    coord_window: Option<(usize, usize)>,
) -> SuiteEntry {
    let mut worst = 0.0f64;
    let mut dead = 0usize;
    let mut passed = true;
    for seed in 0..seeds as u64 {
        let model = RefCell::new(make(seed));
        let n = params_of(&model.borrow()).total_scalars();
        let x0 = params_of(&model.borrow()).flatten();
        let (_, grad) = loss_and_grad(&model.borrow(), seed, true);
        let grad = grad.expect("analytic grad");
        assert_eq!(grad.len(), n);
        let (lo, hi) = coord_window.unwrap_or((0, n));
        let mut rng = ChaCha8Rng::seed_from_u64(0xAB1E + seed);
        let coords: Vec<usize> =
            (0..coords_per_seed).map(|_| rng.gen_range(lo..hi)).collect();
        let value = |v: &[f64]| -> f64 {
            params_of_mut(&mut model.borrow_mut()).write_flat(v);
            let out = loss_and_grad(&model.borrow(), seed, false).0;
            out
        };
        let rep = finite_diff_check(value, |_| grad.clone(), &x0, FD_STEP, FD_TOL, Some(&coords));
        // restore original parameters for cleanliness
        params_of_mut(&mut model.borrow_mut()).write_flat(&x0);
        worst = worst.max(rep.max_rel_err);
        dead += rep.dead_coords.len();
        passed &= rep.passed;
    }
    SuiteEntry { name: name.to_string(), seeds, max_rel_err: worst, dead_coords: dead, passed }
}

/// Run the whole verification suite. `seeds` is the seed count per entry
/// (the acceptance gate uses at least 100).
pub fn run_full_suite(seeds: usize) -> SuiteResult {
    let t0 = Instant::now();
    let mut entries = Vec::new();

    // ── primitives ──────────────────────────────────────────────────
    // helper: deterministic auxiliary constants per entry
    fn aux(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7 % 13) as f64 - 6.0) * scale).collect()
    }

    entries.push(check("matmul_nn", seeds, 12, (-1.0, 1.0), |g, v| {
        let a = g.variable(v, &[3, 4]);
        let b = g.input(&aux(12, 0.15), &[4, 3]);
        let c = g.matmul(a, b).unwrap();
        let sq = g.mul(c, c).unwrap();
        (g.sum_all(sq), a)
    }));
    entries.push(check("matmul_nt", seeds, 12, (-1.0, 1.0), |g, v| {
        let a = g.input(&aux(12, 0.2), &[3, 4]);
        let b = g.variable(v, &[3, 4]);
        let c = g.matmul_flags(a, b, false, true).unwrap();
        let sq = g.mul(c, c).unwrap();
        (g.sum_all(sq), b)
    }));
    entries.push(check("matmul_tn", seeds, 12, (-1.0, 1.0), |g, v| {
        let a = g.variable(v, &[4, 3]);
        let b = g.input(&aux(12, 0.1), &[4, 3]);
        let c = g.matmul_flags(a, b, true, false).unwrap();
        let sq = g.mul(c, c).unwrap();
        (g.sum_all(sq), a)
    }));
    entries.push(check("add", seeds, 8, (-1.0, 1.0), |g, v| {
        let a = g.variable(v, &[2, 4]);
        let b = g.input(&aux(8, 0.3), &[2, 4]);
        let c = g.add(a, b).unwrap();
        let sq = g.mul(c, c).unwrap();
        (g.sum_all(sq), a)
    }));
    entries.push(check("sub", seeds, 8, (-1.0, 1.0), |g, v| {
        let a = g.input(&aux(8, 0.25), &[2, 4]);
        let b = g.variable(v, &[2, 4]);
        let c = g.sub(a, b).unwrap();
        let sq = g.mul(c, c).unwrap();
        (g.sum_all(sq), b)
    }));
    entries.push(check("mul_elementwise", seeds, 8, (-1.0, 1.0), |g, v| {
        let a = g.variable(v, &[2, 4]);
        let b = g.input(&aux(8, 0.4), &[2, 4]);
        let c = g.mul(a, b).unwrap();
        let sq = g.mul(c, c).unwrap();
        (g.sum_all(sq), a)
    }));
    entries.push(check("scale_add_scalar", seeds, 8, (-1.0, 1.0), |g, v| {
        let a = g.variable(v, &[2, 4]);
        let b = g.scale(a, -1.7);
        let c = g.add_scalar(b, 0.3);
        let sq = g.mul(c, c).unwrap();
        (g.sum_all(sq), a)
    }));
    entries.push(check("add_row_vec", seeds, 4, (-1.0, 1.0), |g, v| {
        let a = g.input(&aux(8, 0.2), &[2, 4]);
        let b = g.variable(v, &[4]);
        let c = g.add_row(a, b).unwrap();
        let sq = g.mul(c, c).unwrap();
        (g.sum_all(sq), b)
    }));
    entries.push(check("mul_row_vec", seeds, 8, (-1.0, 1.0), |g, v| {
        let a = g.variable(v, &[2, 4]);
        let b = g.input(&aux(4, 0.5), &[4]);
        let c = g.mul_row(a, b).unwrap();
        let sq = g.mul(c, c).unwrap();
        (g.sum_all(sq), a)
    }));
    entries.push(check("add_col_vec", seeds, 2, (-1.0, 1.0), |g, v| {
        let a = g.input(&aux(8, 0.2), &[2, 4]);
        let b = g.variable(v, &[2]);
        let c = g.add_col(a, b).unwrap();
        let sq = g.mul(c, c).unwrap();
        (g.sum_all(sq), b)
    }));
    entries.push(check("mul_col_vec", seeds, 8, (-1.0, 1.0), |g, v| {
        let a = g.variable(v, &[2, 4]);
        let b = g.input(&aux(2, 0.6), &[2]);
        let c = g.mul_col(a, b).unwrap();
        let sq = g.mul(c, c).unwrap();
        (g.sum_all(sq), a)
    }));
    entries.push(check("gelu", seeds, 8, (-2.0, 2.0), |g, v| {
        let a = g.variable(v, &[8]);
        let y = g.gelu(a);
        let sq = g.mul(y, y).unwrap();
        (g.sum_all(sq), a)
    }));
    entries.push(check("exp", seeds, 8, (-1.5, 1.5), |g, v| {
        let a = g.variable(v, &[8]);
        let y = g.exp(a);
        (g.sum_all(y), a)
    }));
    entries.push(check("ln", seeds, 8, (0.2, 2.0), |g, v| {
        let a = g.variable(v, &[8]);
        let y = g.ln(a);
        let sq = g.mul(y, y).unwrap();
        (g.sum_all(sq), a)
    }));
    entries.push(check("clamp_interior", seeds, 8, (-0.9, 0.9), |g, v| {
        let a = g.variable(v, &[8]);
        let y = g.clamp(a, -5.0, 5.0);
        let sq = g.mul(y, y).unwrap();
        (g.sum_all(sq), a)
    }));
    entries.push(check("softmax_rows", seeds, 12, (-2.0, 2.0), |g, v| {
        let a = g.variable(v, &[3, 4]);
        let y = g.softmax(a, 1).unwrap();
        let w = g.input(&aux(12, 0.2), &[3, 4]);
        let p = g.mul(y, w).unwrap();
        (g.sum_all(p), a)
    }));
    entries.push(check("softmax_cols", seeds, 12, (-2.0, 2.0), |g, v| {
        let a = g.variable(v, &[3, 4]);
        let y = g.softmax(a, 0).unwrap();
        let w = g.input(&aux(12, 0.2), &[3, 4]);
        let p = g.mul(y, w).unwrap();
        (g.sum_all(p), a)
    }));
    entries.push(check("softmax_masked_causal", seeds, 16, (-2.0, 2.0), |g, v| {
        let a = g.variable(v, &[4, 4]);
        let mask = Arc::new(AttentionMask::causal(4));
        let y = g.softmax_masked(a, mask).unwrap();
        let w = g.input(&aux(16, 0.2), &[4, 4]);
        let p = g.mul(y, w).unwrap();
        (g.sum_all(p), a)
    }));
    entries.push(check("layer_norm_x", seeds, 8, (-2.0, 2.0), |g, v| {
        let a = g.variable(v, &[2, 4]);
        let gain = g.input(&[1.2, 0.8, -0.5, 1.0], &[4]);
        let bias = g.input(&[0.1, -0.2, 0.3, 0.0], &[4]);
        let y = g.layer_norm(a, Some(gain), Some(bias), 1e-6).unwrap();
        let sq = g.mul(y, y).unwrap();
        (g.sum_all(sq), a)
    }));
    entries.push(check("layer_norm_gain", seeds, 4, (-1.0, 1.0), |g, v| {
        let x = g.input(&[0.3, -0.8, 1.2, 0.5, -0.1, 0.9, -1.4, 0.2], &[2, 4]);
        let gain = g.variable(v, &[4]);
        let bias = g.input(&[0.1, -0.2, 0.0, 0.4], &[4]);
        let y = g.layer_norm(x, Some(gain), Some(bias), 1e-6).unwrap();
        let sq = g.mul(y, y).unwrap();
        (g.sum_all(sq), gain)
    }));
    entries.push(check("layer_norm_bias", seeds, 4, (-1.0, 1.0), |g, v| {
        let x = g.input(&[0.3, -0.8, 1.2, 0.5, -0.1, 0.9, -1.4, 0.2], &[2, 4]);
        let gain = g.input(&[1.1, 0.9, -0.7, 1.3], &[4]);
        let bias = g.variable(v, &[4]);
        let y = g.layer_norm(x, Some(gain), Some(bias), 1e-6).unwrap();
        let sq = g.mul(y, y).unwrap();
        (g.sum_all(sq), bias)
    }));
    entries.push(check("embedding_table", seeds, 12, (-1.0, 1.0), |g, v| {
        let table = g.variable(v, &[3, 4]);
        let rows = g.embed(table, &[2, 0, 2, 1]).unwrap();
        let sq = g.mul(rows, rows).unwrap();
        (g.sum_all(sq), table)
    }));
    entries.push(check("concat_slice", seeds, 8, (-1.0, 1.0), |g, v| {
        let a = g.variable(v, &[2, 4]);
        let b = g.input(&aux(4, 0.3), &[1, 4]);
        let c = g.concat(&[a, b], 0).unwrap();
        let s = g.slice(c, 0, 1, 2).unwrap();
        let sq = g.mul(s, s).unwrap();
        (g.sum_all(sq), a)
    }));
    entries.push(check("reductions", seeds, 8, (-1.0, 1.0), |g, v| {
        let a = g.variable(v, &[2, 4]);
        let rows = g.sum_axis(a, 1).unwrap();
        let sq = g.mul(rows, rows).unwrap();
        let m = g.mean_all(sq);
        let cols = g.sum_axis(a, 0).unwrap();
        let sq2 = g.mul(cols, cols).unwrap();
        let s2 = g.sum_all(sq2);
        let s2s = g.scale(s2, 0.25);
        (g.add(m, s2s).unwrap(), a)
    }));
    entries.push(check("mse", seeds, 8, (-1.0, 1.0), |g, v| {
        let a = g.variable(v, &[2, 4]);
        let b = g.input(&aux(8, 0.35), &[2, 4]);
        (g.mse(a, b).unwrap(), a)
    }));

    // ── composite blocks ────────────────────────────────────────────
    let mk_rng = |seed: u64| ChaCha8Rng::seed_from_u64(0xB10C + seed);
    entries.push(check("attention_block_x", seeds, 3 * 16, (-1.0, 1.0), |g, v| {
        let mut rng = mk_rng(1);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 16, 2);
        let x = g.variable(v, &[3, 16]);
        let mask = Arc::new(AttentionMask::dense(3));
        let y = mha.forward(g, &store, x, &mask, true).unwrap();
        let sq = g.mul(y, y).unwrap();
        (g.sum_all(sq), x)
    }));
    entries.push(check("prenorm_block_x", seeds, 3 * 16, (-1.0, 1.0), |g, v| {
        let mut rng = mk_rng(2);
        let mut store = ParamStore::new();
        let cfg = BlockConfig { depth: 1, width: 16, heads: 2, mlp_ratio: 2.0 };
        let blk = Block::new(&mut store, &mut rng, "b", &cfg);
        let x = g.variable(v, &[3, 16]);
        let mask = Arc::new(AttentionMask::causal(3));
        let y = blk.forward(g, &store, x, &mask, true).unwrap();
        let sq = g.mul(y, y).unwrap();
        (g.sum_all(sq), x)
    }));
    entries.push(check("adaln_block_cond", seeds, 16, (-1.0, 1.0), |g, v| {
        let mut rng = mk_rng(3);
        let mut store = ParamStore::new();
        let cfg = BlockConfig { depth: 1, width: 16, heads: 2, mlp_ratio: 2.0 };
        let blk = AdaLnBlock::new(&mut store, &mut rng, "b", &cfg);
        // zero-init modulation has zero gradient; give it weight
        let wid = store.id_by_name("b.mod.w").unwrap();
        let n = store.value(wid).len();
        let vals: Vec<f64> = (0..n).map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.02).collect();
        store.value_mut(wid).copy_from_slice(&vals);
        let xdata: Vec<f64> = (0..3 * 16).map(|i| ((i * 3 % 17) as f64 - 8.0) * 0.1).collect();
        let x = g.input(&xdata, &[3, 16]);
        let cond = g.variable(v, &[16]);
        let mask = Arc::new(AttentionMask::dense(3));
        let y = blk.forward(g, &store, x, cond, &mask, true).unwrap();
        let sq = g.mul(y, y).unwrap();
        (g.sum_all(sq), cond)
    }));
    entries.push(check("adaln_block_x", seeds, 3 * 16, (-1.0, 1.0), |g, v| {
        let mut rng = mk_rng(4);
        let mut store = ParamStore::new();
        let cfg = BlockConfig { depth: 1, width: 16, heads: 2, mlp_ratio: 2.0 };
        let blk = AdaLnBlock::new(&mut store, &mut rng, "b", &cfg);
        let wid = store.id_by_name("b.mod.w").unwrap();
        let n = store.value(wid).len();
        let vals: Vec<f64> = (0..n).map(|i| ((i * 11 % 7) as f64 - 3.0) * 0.03).collect();
        store.value_mut(wid).copy_from_slice(&vals);
        let x = g.variable(v, &[3, 16]);
        let cdata: Vec<f64> = (0..16).map(|i| (i as f64 * 0.21).sin()).collect();
        let cond = g.input(&cdata, &[16]);
        let mask = Arc::new(AttentionMask::dense(3));
        let y = blk.forward(g, &store, x, cond, &mask, true).unwrap();
        let sq = g.mul(y, y).unwrap();
        (g.sum_all(sq), x)
    }));

    // velocity head wrt x_t (dense input coverage)
    entries.push(check("velocity_head_xt", seeds, 4, (-1.0, 1.0), |g, v| {
        let mut rng = mk_rng(5);
        let mut gen = Generator::new(micro_card_cfg(), &mut rng, None).unwrap();
        for name in ["head.out_proj.w", "head.block0.mod.w", "head.block1.mod.w"] {
            let id = gen.store.id_by_name(name).unwrap();
            let n = gen.store.value(id).len();
            let vals: Vec<f64> = (0..n).map(|i| ((i * 5 % 9) as f64 - 4.0) * 0.04).collect();
            gen.store.value_mut(id).copy_from_slice(&vals);
        }
        let x = g.variable(v, &[1, 4]);
        let feats = crate::nn::sinusoidal_time_embed(0.4, crate::card::TIME_FEAT_DIM).unwrap();
        let tn = g.input(&feats, &[1, crate::card::TIME_FEAT_DIM]);
        let hdata: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).cos()).collect();
        let hn = g.input(&hdata, &[1, 16]);
        let cdata: Vec<f64> = (0..16).map(|i| (i as f64 * 0.11).sin()).collect();
        let cn = g.input(&cdata, &[16]);
        let vel = gen.velocity_nodes(g, x, tn, hn, cn, true).unwrap();
        let sq = g.mul(vel, vel).unwrap();
        (g.sum_all(sq), x)
    }));

    // ── full losses over parameter vectors (sampled coordinates) ────
    for kind in [ReguKind::Kl, ReguKind::SoftVq] {
        let name = format!("tokenizer_loss_{}", match kind {
            ReguKind::Kl => "kl",
            ReguKind::SoftVq => "softvq",
            ReguKind::Vq => "vq",
        });
        entries.push(model_param_check(
            &name,
            seeds,
            24,
            |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(0x70C0 + seed);
                Tokenizer::new(micro_tok_cfg(kind), &mut rng).unwrap()
            },
            |t: &Tokenizer| &t.store,
            |t: &mut Tokenizer| &mut t.store,
            |tok, seed, want_grad| {
                let mut rng = ChaCha8Rng::seed_from_u64(0xDA7A + seed);
                let patches: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
                let noise: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.5..0.5)).collect();
                let mut g = Graph::new();
                let out = tok
                    .forward_train_at(&mut g, &patches, Some(seed as usize % 2), 1, Some(&noise), false)
                    .unwrap();
                let val = g.scalar_value(out.loss);
                if want_grad {
                    g.backward(out.loss).unwrap();
                    let mut acc = crate::tensor::GradAccum::new(tok.store.len());
                    g.param_grads_into(&mut acc);
                    let mut flat = Vec::with_capacity(tok.store.total_scalars());
                    for i in 0..tok.store.len() {
                        let id = crate::tensor::ParamId(i);
                        match acc.get(id) {
                            Some(gr) => flat.extend_from_slice(gr),
                            None => flat.extend(std::iter::repeat(0.0).take(tok.store.value(id).len())),
                        }
                    }
                    (val, Some(flat))
                } else {
                    (val, None)
                }
            },
            None,
        ));
    }

    // generator flow loss over all parameters, and once more restricted to
    // the velocity-head parameter window
    let gen_loss = |gen: &Generator, seed: u64, want_grad: bool| {
        let mut rng = ChaCha8Rng::seed_from_u64(0xF10A + seed);
        let k = gen.cfg.token_count;
        let d = gen.cfg.d_latent;
        let x0: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ts: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..0.95)).collect();
        let eps: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let cond = gen.cond_node(&mut g, None, Some(0), false).unwrap();
        let loss = gen.flow_loss_at(&mut g, &x0, &ts, &eps, cond, false).unwrap();
        let val = g.scalar_value(loss);
        if want_grad {
            g.backward(loss).unwrap();
            let mut acc = crate::tensor::GradAccum::new(gen.store.len());
            g.param_grads_into(&mut acc);
            let mut flat = Vec::with_capacity(gen.store.total_scalars());
            for i in 0..gen.store.len() {
                let id = crate::tensor::ParamId(i);
                match acc.get(id) {
                    Some(gr) => flat.extend_from_slice(gr),
                    None => flat.extend(std::iter::repeat(0.0).take(gen.store.value(id).len())),
                }
            }
            (val, Some(flat))
        } else {
            (val, None)
        }
    };
    let make_gen = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9E40 + seed);
        let mut gen = Generator::new(micro_card_cfg(), &mut rng, None).unwrap();
        // break the zero-init symmetry so every pathway carries gradient
        for name in ["head.out_proj.w", "head.block0.mod.w", "head.block1.mod.w", "ar.block0.mod.w"] {
            let id = gen.store.id_by_name(name).unwrap();
            let n = gen.store.value(id).len();
            let vals: Vec<f64> = (0..n).map(|i| ((i * 5 % 9) as f64 - 4.0) * 0.04).collect();
            gen.store.value_mut(id).copy_from_slice(&vals);
        }
        gen
    };
    entries.push(model_param_check(
        "flow_loss_all_params",
        seeds,
        24,
        make_gen,
        |m: &Generator| &m.store,
        |m: &mut Generator| &mut m.store,
        gen_loss,
        None,
    ));
    {
        // head-parameter window: everything from head.x_lift.w onward
        let probe = make_gen(0);
        let mut offset = 0usize;
        for e in probe.store.entries() {
            if e.name.starts_with("head.") {
                break;
            }
            offset += e.value.len();
        }
        let total = probe.store.total_scalars();
        entries.push(model_param_check(
            "flow_loss_head_params",
            seeds,
            24,
            make_gen,
            |m: &Generator| &m.store,
            |m: &mut Generator| &mut m.store,
            gen_loss,
            Some((offset, total)),
        ));
    }

    SuiteResult { entries, elapsed_secs: t0.elapsed().as_secs_f64() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let res = run_full_suite(3);
        for e in &res.entries {
            assert!(
                e.passed,
                "{}: max_rel_err {} (tol {FD_TOL})",
                e.name, e.max_rel_err
            );
        }
        assert!(res.entries.len() > 25);
    }
}
