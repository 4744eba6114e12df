//! Training loops for the tokenizer and the generator. Batches are processed
//! in fixed-size sample groups whose gradients are merged in group order, so
//! results are bitwise identical for any thread count.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::card::Generator;
use crate::data::ShapesDataset;
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::regu::ReguKind;
use crate::tensor::{GradAccum, Graph, Result, Tensor, TensorError};
use crate::tokenizer::{draw_normal, sample_prefix_length, Tokenizer};

/// Samples accumulated per gradient group; fixed so the merge order (and the
/// result) does not depend on the executing thread count.
const GROUP_SIZE: usize = 8;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Worker pool capped by the SMAP_THREADS environment variable (0 or unset
/// picks the rayon default).
pub fn thread_pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let cap = std::env::var("SMAP_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0);
        let mut builder = rayon::ThreadPoolBuilder::new();
        if cap > 0 {
            builder = builder.num_threads(cap);
        }
        builder.build().expect("failed to build worker pool")
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// Mean total loss per step.
    pub losses: Vec<f64>,
    /// Mean reconstruction / flow term per step.
    pub primary_losses: Vec<f64>,
    /// Samples whose class condition was dropped to the null row.
    pub dropout_count: usize,
    pub samples_seen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub schedule: Schedule,
    /// Probability of replacing the class with the null row per sample.
    pub class_dropout_p: f64,
}

struct TokSample {
    idx: usize,
    class: Option<usize>,
    k: usize,
    noise: Option<Vec<f64>>,
}

/// Train the tokenizer in place; deterministic given (seed, config, data).
pub fn train_tokenizer(
    tok: &mut Tokenizer,
    data: &ShapesDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.schedule.validate()?;
    let train_idx = data.train_indices();
    if train_idx.is_empty() {
        return Err(TensorError::InvalidValue {
            op: "train_tokenizer",
            detail: "empty training split".into(),
        });
    }
    let patches: Vec<Vec<f64>> = data
        .images
        .iter()
        .map(|img| tok.image_to_patches(img))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(cfg.optim, &tok.store);
    let mut log = TrainLog::default();
    let k_total = tok.cfg.latent_count;
    let noise_len = k_total * tok.cfg.regu.d_latent;

    for step in 0..cfg.steps {
        let lr = cfg.schedule.lr_at(step);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = train_idx[rng.gen_range(0..train_idx.len())];
            let dropped = cfg.class_dropout_p > 0.0 && rng.gen::<f64>() < cfg.class_dropout_p;
            if dropped {
                log.dropout_count += 1;
            }
            let class = if dropped { None } else { Some(data.labels[idx]) };
            let k = sample_prefix_length(&mut rng, k_total);
            let noise = match tok.cfg.regu.kind {
                ReguKind::Kl => Some(draw_normal(&mut rng, noise_len)),
                _ => None,
            };
            batch.push(TokSample { idx, class, k, noise });
        }
        log.samples_seen += batch.len();

        let tok_ref: &Tokenizer = tok;
        let groups: Vec<&[TokSample]> = batch.chunks(GROUP_SIZE).collect();
        let results: Vec<Result<(GradAccum, f64, f64)>> = thread_pool().install(|| {
            groups
                .par_iter()
                .map(|group| {
                    let mut acc = GradAccum::new(tok_ref.store.len());
                    let mut loss_sum = 0.0;
                    let mut mse_sum = 0.0;
                    for s in group.iter() {
                        let mut g = Graph::new();
                        let out = tok_ref.forward_train_at(
                            &mut g,
                            &patches[s.idx],
                            s.class,
                            s.k,
                            s.noise.as_deref(),
                            false,
                        )?;
                        loss_sum += g.scalar_value(out.loss);
                        mse_sum += g.scalar_value(out.recon_mse);
                        g.backward(out.loss)?;
                        g.param_grads_into(&mut acc);
                    }
                    Ok((acc, loss_sum, mse_sum))
                })
                .collect()
        });

        let mut total = GradAccum::new(tok.store.len());
        let mut loss_sum = 0.0;
        let mut mse_sum = 0.0;
        for r in results {
            let (acc, l, m) = r?;
            total.merge(&acc);
            loss_sum += l;
            mse_sum += m;
        }
        total.scale(1.0 / cfg.batch_size as f64);
        opt.step(&mut tok.store, &total, lr)?;
        log.losses.push(loss_sum / cfg.batch_size as f64);
        log.primary_losses.push(mse_sum / cfg.batch_size as f64);
    }
    Ok(log)
}

struct GenSample {
    idx: usize,
    class: Option<usize>,
    ts: Vec<f64>,
    eps: Vec<f64>,
}

/// Deterministic latents (KL posterior mean) for every dataset image.
pub fn precompute_latents(tok: &Tokenizer, data: &ShapesDataset) -> Result<Vec<Tensor>> {
    let indexed: Vec<Result<Tensor>> = thread_pool().install(|| {
        (0..data.len())
            .into_par_iter()
            .map(|i| tok.encode_latents(&data.images[i], Some(data.labels[i])))
            .collect()
    });
    indexed.into_iter().collect()
}

/// Train the generator on frozen-tokenizer latents.
pub fn train_generator(
    gen: &mut Generator,
    tok: &Tokenizer,
    data: &ShapesDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.schedule.validate()?;
    let train_idx = data.train_indices();
    if train_idx.is_empty() {
        return Err(TensorError::InvalidValue {
            op: "train_generator",
            detail: "empty training split".into(),
        });
    }
    let latents = precompute_latents(tok, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(cfg.optim, &gen.store);
    let mut log = TrainLog::default();
    let k = gen.cfg.token_count;
    let d = gen.cfg.d_latent;

    for step in 0..cfg.steps {
        let lr = cfg.schedule.lr_at(step);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = train_idx[rng.gen_range(0..train_idx.len())];
            let dropped = cfg.class_dropout_p > 0.0 && rng.gen::<f64>() < cfg.class_dropout_p;
            if dropped {
                log.dropout_count += 1;
            }
            let class = if dropped { None } else { Some(data.labels[idx]) };
            let ts: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
            let eps = draw_normal(&mut rng, k * d);
            batch.push(GenSample { idx, class, ts, eps });
        }
        log.samples_seen += batch.len();

        let gen_ref: &Generator = gen;
        let groups: Vec<&[GenSample]> = batch.chunks(GROUP_SIZE).collect();
        let results: Vec<Result<(GradAccum, f64)>> = thread_pool().install(|| {
            groups
                .par_iter()
                .map(|group| {
                    let mut acc = GradAccum::new(gen_ref.store.len());
                    let mut loss_sum = 0.0;
                    for s in group.iter() {
                        let mut g = Graph::new();
                        let cond = gen_ref.cond_node(&mut g, Some(tok), s.class, false)?;
                        let loss = gen_ref.flow_loss_at(
                            &mut g,
                            &latents[s.idx].data,
                            &s.ts,
                            &s.eps,
                            cond,
                            false,
                        )?;
                        loss_sum += g.scalar_value(loss);
                        g.backward(loss)?;
                        g.param_grads_into(&mut acc);
                    }
                    Ok((acc, loss_sum))
                })
                .collect()
        });

        let mut total = GradAccum::new(gen.store.len());
        let mut loss_sum = 0.0;
        for r in results {
            let (acc, l) = r?;
            total.merge(&acc);
            loss_sum += l;
        }
        total.scale(1.0 / cfg.batch_size as f64);
        opt.step(&mut gen.store, &total, lr)?;
        log.losses.push(loss_sum / cfg.batch_size as f64);
        log.primary_losses.push(loss_sum / cfg.batch_size as f64);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::card::{CardConfig, CondMode};
    use crate::data::make_shapes_dataset;
    use crate::regu::{ReguConfig, ReguKind};
    use crate::nn::BlockConfig;
    use crate::tokenizer::TokenizerConfig;

    fn tiny_tok_cfg() -> TokenizerConfig {
        TokenizerConfig {
            image_size: 16,
            patch: 8,
            channels: 1,
            width: 16,
            latent_count: 2,
            condition_count: 1,
            num_classes: 4,
            enc: BlockConfig { depth: 1, width: 16, heads: 2, mlp_ratio: 2.0 },
            dec: BlockConfig { depth: 1, width: 16, heads: 2, mlp_ratio: 2.0 },
            regu: ReguConfig {
                kind: ReguKind::Kl,
                d_latent: 4,
                codebook_size: 8,
                vq_beta: 0.25,
                softvq_tau: 0.5,
                softvq_entropy_weight: 0.0,
            },
            kl_weight: 1e-4,
            aux_weight: 1.0,
        }
    }

    fn tiny_train_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 8,
            optim: AdamWConfig { lr: 1e-3, ..Default::default() },
            schedule: Schedule { base_lr: 1e-3, min_lr: 1e-4, warmup_steps: 2, total_steps: steps.max(2) },
            class_dropout_p: 0.0,
        }
    }

    #[test]
    fn zero_steps_returns_init_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tok = Tokenizer::new(tiny_tok_cfg(), &mut rng).unwrap();
        let before: Vec<Vec<f64>> =
            tok.store.entries().iter().map(|e| e.value.to_vec()).collect();
        let data = make_shapes_dataset(1, 6, 16);
        let mut cfg = tiny_train_cfg(0);
        cfg.schedule.warmup_steps = 1;
        cfg.schedule.total_steps = 2;
        let log = train_tokenizer(&mut tok, &data, &cfg, 9).unwrap();
        assert!(log.losses.is_empty());
        for (e, b) in tok.store.entries().iter().zip(before.iter()) {
            assert_eq!(e.value.as_slice(), b.as_slice());
        }
    }

    #[test]
    fn tokenizer_training_is_deterministic_and_learns() {
        let data = make_shapes_dataset(2, 10, 16);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut tok = Tokenizer::new(tiny_tok_cfg(), &mut rng).unwrap();
            let log = train_tokenizer(&mut tok, &data, &tiny_train_cfg(12), 4).unwrap();
            (log, tok)
        };
        let (log1, tok1) = run();
        let (log2, tok2) = run();
        for (a, b) in log1.losses.iter().zip(log2.losses.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (ea, eb) in tok1.store.entries().iter().zip(tok2.store.entries().iter()) {
            assert!(ea
                .value
                .iter()
                .zip(eb.value.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(log1.losses.iter().all(|l| l.is_finite()));
        // smoothed loss drops on this easy problem
        let head: f64 = log1.losses[..3].iter().sum::<f64>() / 3.0;
        let tail: f64 = log1.losses[log1.losses.len() - 3..].iter().sum::<f64>() / 3.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }

    #[test]
    fn generator_dropout_rates() {
        let data = make_shapes_dataset(5, 8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tok = Tokenizer::new(tiny_tok_cfg(), &mut rng).unwrap();
        let card = CardConfig {
            depth: 1,
            width: 16,
            heads: 2,
            mlp_ratio: 1.0,
            head_depth: 1,
            head_width: 16,
            head_mlp_ratio: 2.0,
            token_count: 2,
            d_latent: 4,
            sampling_steps: 4,
            cfg_scale: 1.0,
            class_dropout_p: 0.0,
            num_classes: 4,
            cond_mode: CondMode::Shared,
        };
        // p = 0: no dropout ever
        let mut gen = Generator::new(card, &mut rng, Some(&tok)).unwrap();
        let mut cfg = tiny_train_cfg(4);
        cfg.class_dropout_p = 0.0;
        let log = train_generator(&mut gen, &tok, &data, &cfg, 11).unwrap();
        assert_eq!(log.dropout_count, 0);
        // p = 1: every sample unconditional
        let mut gen = Generator::new(card, &mut rng, Some(&tok)).unwrap();
        cfg.class_dropout_p = 1.0;
        let log = train_generator(&mut gen, &tok, &data, &cfg, 11).unwrap();
        assert_eq!(log.dropout_count, log.samples_seen);
    }

    #[test]
    fn dropout_rate_statistical() {
        // empirical rate over 10^4 draws within 3 sigma of 0.1
        let p = 0.1;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut count = 0;
        for _ in 0..n {
            if rng.gen::<f64>() < p {
                count += 1;
            }
        }
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!(
            ((count as f64) - n as f64 * p).abs() < 3.0 * sigma,
            "dropout count {count}"
        );
    }
}
