//! The unified latent regularization operator in its three forms:
//! hard vector quantization (straight-through), Gaussian reparameterization
//! with a KL penalty, and temperature-controlled soft quantization.

use rand::Rng;

use crate::nn::init_normal;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Result, TensorError};

/// Bounds applied to predicted log-variances before exponentiation.
pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 20.0;

/// Commitment coefficient for the VQ straight-through training rule.
pub const VQ_BETA_DEFAULT: f64 = 0.25;

// ── Configuration ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReguKind {
    Vq,
    Kl,
    SoftVq,
}

impl ReguKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vq" => Ok(ReguKind::Vq),
            "kl" => Ok(ReguKind::Kl),
            "softvq" => Ok(ReguKind::SoftVq),
            other => Err(TensorError::InvalidValue {
                op: "regu",
                detail: format!("unknown regularizer kind `{other}` (vq|kl|softvq)"),
            }),
        }
    }

    /// Channels the encoder-side projection must produce per token.
    pub fn encoder_channels(&self, d: usize) -> usize {
        match self {
            ReguKind::Kl => 2 * d,
            _ => d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReguConfig {
    pub kind: ReguKind,
    /// Latent channels per token after regularization.
    pub d_latent: usize,
    /// Codebook entries (vq / softvq).
    pub codebook_size: usize,
    pub vq_beta: f64,
    pub softvq_tau: f64,
    /// Optional codebook-usage entropy bonus weight for softvq (0 = off).
    pub softvq_entropy_weight: f64,
}

impl ReguConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_latent == 0 {
            return Err(TensorError::InvalidValue {
                op: "regu",
                detail: "d_latent must be >= 1".into(),
            });
        }
        match self.kind {
            ReguKind::Vq | ReguKind::SoftVq => {
                if self.codebook_size < 2 {
                    return Err(TensorError::InvalidValue {
                        op: "regu",
                        detail: format!("codebook size must be >= 2, got {}", self.codebook_size),
                    });
                }
            }
            ReguKind::Kl => {}
        }
        if self.kind == ReguKind::SoftVq && self.softvq_tau <= 0.0 {
            return Err(TensorError::InvalidValue {
                op: "regu",
                detail: format!("softvq temperature must be > 0, got {}", self.softvq_tau),
            });
        }
        Ok(())
    }
}

// ── Codebook ────────────────────────────────────────────────────────

/// Learnable codebook shared by the VQ and SoftVQ regularizers.
#[derive(Debug, Clone, Copy)]
pub struct Codebook {
    pub entries: ParamId,
    pub size: usize,
    pub dim: usize,
}

impl Codebook {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        size: usize,
        dim: usize,
    ) -> Self {
        assert!(size >= 2, "codebook needs at least 2 entries");
        let scale = 1.0 / (dim as f64).sqrt();
        let data = init_normal(rng, size * dim, scale);
        let entries = store.add(name, data, &[size, dim]);
        Codebook { entries, size, dim }
    }
}

/// Gaussian posterior parameters per token.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPosterior {
    pub mu: NodeId,
    pub log_var: NodeId,
}

/// Result of applying a regularizer to a [K x d] latent block.
pub struct ReguOutput {
    /// Regularized latents, [K x d], fed to the decoder.
    pub latents: NodeId,
    /// Per-token auxiliary penalty, shape [K] (zeros when the kind has none).
    pub aux_per_token: NodeId,
    /// Hard assignment indices (VQ only).
    pub discrete_indices: Option<Vec<usize>>,
}

// ── Hard VQ ─────────────────────────────────────────────────────────

/// Brute-force nearest codebook entry per row; ties break to the lowest index.
pub fn nearest_entries(z: &[f64], k: usize, cb: &[f64], size: usize, d: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let zi = &z[i * d..(i + 1) * d];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for j in 0..size {
            let ej = &cb[j * d..(j + 1) * d];
            let mut dist = 0.0;
            for c in 0..d {
                let dd = zi[c] - ej[c];
                dist += dd * dd;
            }
            if dist < best_d {
                best_d = dist;
                best = j;
            }
        }
        out.push(best);
    }
    out
}

/// Straight-through vector quantization.
///
/// Forward replaces each row with its nearest codebook entry; backward
/// treats the quantizer as the identity on z. The auxiliary loss is
/// ||sg(z) - e||^2 + beta * ||z - sg(e)||^2 per token (summed over channels).
pub fn vq_quantize(
    g: &mut Graph,
    z: NodeId,
    store: &ParamStore,
    cb: &Codebook,
    beta: f64,
    frozen: bool,
) -> Result<ReguOutput> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || shape[1] != cb.dim {
        return Err(TensorError::ShapeMismatch {
            op: "vq_quantize",
            lhs: shape,
            rhs: vec![cb.size, cb.dim],
        });
    }
    let k = shape[0];
    let indices = nearest_entries(g.value(z), k, store.value(cb.entries), cb.size, cb.dim);
    let table = if frozen { g.frozen_param(store, cb.entries) } else { g.param(store, cb.entries) };
    let quant = g.embed(table, &indices)?;

    // straight-through: out = z + sg(quant - z)
    let delta = g.sub(quant, z)?;
    let delta_sg = g.detach(delta);
    let latents = g.add(z, delta_sg)?;

    // codebook term: ||sg(z) - e||^2, commitment term: beta ||z - sg(e)||^2
    let z_sg = g.detach(z);
    let e_sg = g.detach(quant);
    let cb_diff = g.sub(z_sg, quant)?;
    let cb_sq = g.mul(cb_diff, cb_diff)?;
    let cb_tok = g.sum_axis(cb_sq, 1)?;
    let cm_diff = g.sub(z, e_sg)?;
    let cm_sq = g.mul(cm_diff, cm_diff)?;
    let cm_tok = g.sum_axis(cm_sq, 1)?;
    let cm_scaled = g.scale(cm_tok, beta);
    let aux_per_token = g.add(cb_tok, cm_scaled)?;

    Ok(ReguOutput { latents, aux_per_token, discrete_indices: Some(indices) })
}

// ── KL / reparameterization ─────────────────────────────────────────

/// latents = mu + exp(0.5 log_var) * eps; per-token aux is the KL divergence
/// to the standard normal: 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2).
pub fn kl_reparameterize(
    g: &mut Graph,
    post: GaussianPosterior,
    noise: NodeId,
) -> Result<ReguOutput> {
    let shape = g.shape(post.mu).to_vec();
    if g.shape(noise) != shape.as_slice() || g.shape(post.log_var) != shape.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "kl_reparameterize",
            lhs: shape,
            rhs: g.shape(noise).to_vec(),
        });
    }
    let lv = g.clamp(post.log_var, LOG_VAR_MIN, LOG_VAR_MAX);
    let half_lv = g.scale(lv, 0.5);
    let sigma = g.exp(half_lv);
    let scaled_noise = g.mul(sigma, noise)?;
    let latents = g.add(post.mu, scaled_noise)?;

    let mu_sq = g.mul(post.mu, post.mu)?;
    let var = g.exp(lv);
    let sum1 = g.add(mu_sq, var)?;
    let sum2 = g.sub(sum1, lv)?;
    let sum3 = g.add_scalar(sum2, -1.0);
    let per_chan = g.scale(sum3, 0.5);
    let aux_per_token = g.sum_axis(per_chan, 1)?;

    Ok(ReguOutput { latents, aux_per_token, discrete_indices: None })
}

// ── SoftVQ ──────────────────────────────────────────────────────────

/// Differentiable soft assignment: weights softmax(-||z - e||^2 / tau) per
/// row, output the weighted combination of codebook entries.
pub fn softvq_quantize(
    g: &mut Graph,
    z: NodeId,
    store: &ParamStore,
    cb: &Codebook,
    tau: f64,
    entropy_weight: f64,
    frozen: bool,
) -> Result<ReguOutput> {
    if tau <= 0.0 {
        return Err(TensorError::InvalidValue {
            op: "softvq_quantize",
            detail: format!("temperature must be > 0, got {tau}"),
        });
    }
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || shape[1] != cb.dim {
        return Err(TensorError::ShapeMismatch {
            op: "softvq_quantize",
            lhs: shape,
            rhs: vec![cb.size, cb.dim],
        });
    }
    let k = shape[0];
    let table = if frozen { g.frozen_param(store, cb.entries) } else { g.param(store, cb.entries) };

    // squared euclidean distances: ||z||^2 - 2 z e^T + ||e||^2
    let cross = g.matmul_flags(z, table, false, true)?; // [K x |E|]
    let m2 = g.scale(cross, -2.0);
    let z_sq = g.mul(z, z)?;
    let z_norm = g.sum_axis(z_sq, 1)?; // [K]
    let e_sq = g.mul(table, table)?;
    let e_norm = g.sum_axis(e_sq, 1)?; // [|E|]
    let plus_rows = g.add_row(m2, e_norm)?;
    let dist = g.add_col(plus_rows, z_norm)?;

    let neg = g.scale(dist, -1.0 / tau);
    let weights = g.softmax(neg, 1)?; // rows sum to 1
    let latents = g.matmul(weights, table)?;

    let aux_per_token = if entropy_weight != 0.0 {
        // codebook-usage entropy bonus: penalize low entropy of the mean
        // assignment so every token row carries an equal share of -H(mean w)
        let mean_w = g.sum_axis(weights, 0)?; // [|E|]
        let mean_w = g.scale(mean_w, 1.0 / k as f64);
        let safe = g.add_scalar(mean_w, 1e-12);
        let lnp = g.ln(safe);
        let plnp = g.mul(safe, lnp)?;
        let neg_ent = g.sum_all(plnp); // = -H
        let bonus = g.scale(neg_ent, entropy_weight / k as f64);
        let ones = g.input(&vec![1.0; k], &[k, 1]);
        let bonus_col = g.reshape(bonus, &[1])?;
        let spread = g.mul_row(ones, bonus_col)?;
        g.reshape(spread, &[k])?
    } else {
        g.input(&vec![0.0; k], &[k])
    };

    Ok(ReguOutput { latents, aux_per_token, discrete_indices: None })
}

// ── Dispatch ────────────────────────────────────────────────────────

/// Inputs to the dispatch wrapper; KL consumes a posterior, the codebook
/// kinds consume raw latents.
pub enum ReguInput {
    Latents(NodeId),
    Posterior { post: GaussianPosterior, noise: NodeId },
}

pub fn regu(
    g: &mut Graph,
    cfg: &ReguConfig,
    input: ReguInput,
    store: &ParamStore,
    codebook: Option<&Codebook>,
    frozen: bool,
) -> Result<ReguOutput> {
    match (cfg.kind, input) {
        (ReguKind::Vq, ReguInput::Latents(z)) => {
            let cb = codebook.expect("vq requires a codebook");
            vq_quantize(g, z, store, cb, cfg.vq_beta, frozen)
        }
        (ReguKind::SoftVq, ReguInput::Latents(z)) => {
            let cb = codebook.expect("softvq requires a codebook");
            softvq_quantize(g, z, store, cb, cfg.softvq_tau, cfg.softvq_entropy_weight, frozen)
        }
        (ReguKind::Kl, ReguInput::Posterior { post, noise }) => kl_reparameterize(g, post, noise),
        _ => Err(TensorError::InvalidValue {
            op: "regu",
            detail: "input variant does not match regularizer kind".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_codebook(store: &mut ParamStore, entries: &[f64], size: usize, dim: usize) -> Codebook {
        let id = store.add("cb", entries.to_vec(), &[size, dim]);
        Codebook { entries: id, size, dim }
    }

    #[test]
    fn vq_picks_nearest_entry() {
        let mut store = ParamStore::new();
        let cb = toy_codebook(&mut store, &[0.0, 0.0, 1.0, 1.0], 2, 2);
        let mut g = Graph::new();
        let z = g.input(&[0.9, 1.2], &[1, 2]);
        let out = vq_quantize(&mut g, z, &store, &cb, 0.25, true).unwrap();
        assert_eq!(out.discrete_indices.as_deref(), Some(&[1usize][..]));
        assert_eq!(g.value(out.latents), &[1.0, 1.0]);
    }

    #[test]
    fn vq_fixed_point_has_zero_aux() {
        let mut store = ParamStore::new();
        let cb = toy_codebook(&mut store, &[0.25, -0.5, 1.0, 1.0], 2, 2);
        let mut g = Graph::new();
        let z = g.input(&[0.25, -0.5], &[1, 2]);
        let out = vq_quantize(&mut g, z, &store, &cb, 0.25, true).unwrap();
        assert_eq!(out.discrete_indices.as_deref(), Some(&[0usize][..]));
        assert_eq!(g.value(out.latents), &[0.25, -0.5]);
        assert_eq!(g.value(out.aux_per_token), &[0.0]);
    }

    #[test]
    fn vq_tie_breaks_to_lowest_index() {
        let mut store = ParamStore::new();
        let cb = toy_codebook(&mut store, &[0.0, 0.0, 1.0, 1.0], 2, 2);
        let mut g = Graph::new();
        let z = g.input(&[0.5, 0.5], &[1, 2]); // exactly equidistant
        let out = vq_quantize(&mut g, z, &store, &cb, 0.25, true).unwrap();
        assert_eq!(out.discrete_indices.as_deref(), Some(&[0usize][..]));
    }

    #[test]
    fn vq_outputs_are_codebook_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let entries: Vec<f64> = (0..8 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cb = toy_codebook(&mut store, &entries, 8, 3);
        let z: Vec<f64> = (0..5 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let zn = g.input(&z, &[5, 3]);
        let out = vq_quantize(&mut g, zn, &store, &cb, 0.25, true).unwrap();
        let latents = g.value(out.latents);
        for i in 0..5 {
            let row = &latents[i * 3..(i + 1) * 3];
            let member = (0..8).any(|j| row == &entries[j * 3..(j + 1) * 3]);
            assert!(member, "vq output row {i} is not a codebook row");
        }
    }

    #[test]
    fn vq_straight_through_identity_jacobian() {
        // d(loss)/dz through the quantizer equals d(loss)/d(quantized)
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let entries: Vec<f64> = (0..4 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cb = toy_codebook(&mut store, &entries, 4, 2);
        let z: Vec<f64> = vec![0.3, -0.2, 0.8, 0.1];
        let w: Vec<f64> = vec![1.3, -0.7, 0.2, 2.0];

        let mut g = Graph::new();
        let zn = g.variable(&z, &[2, 2]);
        let out = vq_quantize(&mut g, zn, &store, &cb, 0.25, true).unwrap();
        let wn = g.input(&w, &[2, 2]);
        let prod = g.mul(out.latents, wn).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        // the loss touches only the latents path, so the straight-through
        // rule makes d(loss)/dz equal d(loss)/d(quantized) = w exactly
        let grad = g.grad(zn).unwrap();
        for i in 0..2 {
            for c in 0..2 {
                assert!(
                    (grad[i * 2 + c] - w[i * 2 + c]).abs() < 1e-15,
                    "straight-through grad mismatch at ({i},{c})"
                );
            }
        }
    }

    #[test]
    fn kl_noiseless_returns_mu() {
        let mut g = Graph::new();
        let mu = g.input(&[0.3, -0.7, 1.1, 0.0], &[2, 2]);
        let lv = g.input(&[0.5, -0.25, 0.0, 1.0], &[2, 2]);
        let eps = g.input(&[0.0; 4], &[2, 2]);
        let out = kl_reparameterize(&mut g, GaussianPosterior { mu, log_var: lv }, eps).unwrap();
        assert_eq!(g.value(out.latents), g.value(mu));
    }

    #[test]
    fn kl_zero_at_standard_posterior() {
        let mut g = Graph::new();
        let mu = g.input(&[0.0; 6], &[2, 3]);
        let lv = g.input(&[0.0; 6], &[2, 3]);
        let eps = g.input(&[0.1; 6], &[2, 3]);
        let out = kl_reparameterize(&mut g, GaussianPosterior { mu, log_var: lv }, eps).unwrap();
        for &v in g.value(out.aux_per_token) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn kl_unit_mean_closed_form() {
        // mu=1, sigma=1 (log_var=0), one channel: KL = 0.5
        let mut g = Graph::new();
        let mu = g.input(&[1.0], &[1, 1]);
        let lv = g.input(&[0.0], &[1, 1]);
        let eps = g.input(&[0.0], &[1, 1]);
        let out = kl_reparameterize(&mut g, GaussianPosterior { mu, log_var: lv }, eps).unwrap();
        assert!((g.value(out.aux_per_token)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_closed_form_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let k = 3;
            let c = 4;
            let mu: Vec<f64> = (0..k * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lv: Vec<f64> = (0..k * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut g = Graph::new();
            let mun = g.input(&mu, &[k, c]);
            let lvn = g.input(&lv, &[k, c]);
            let eps = g.input(&vec![0.0; k * c], &[k, c]);
            let out =
                kl_reparameterize(&mut g, GaussianPosterior { mu: mun, log_var: lvn }, eps).unwrap();
            let got = g.value(out.aux_per_token);
            for i in 0..k {
                let mut want = 0.0;
                for j in 0..c {
                    let m = mu[i * c + j];
                    let l = lv[i * c + j];
                    want += 0.5 * (m * m + l.exp() - 1.0 - l);
                }
                assert!((got[i] - want).abs() < 1e-10, "KL row {i}: {} vs {want}", got[i]);
            }
        }
    }

    #[test]
    fn kl_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let mu: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lv: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut g = Graph::new();
            let mun = g.input(&mu, &[1, 4]);
            let lvn = g.input(&lv, &[1, 4]);
            let eps = g.input(&vec![0.0; 4], &[1, 4]);
            let out =
                kl_reparameterize(&mut g, GaussianPosterior { mu: mun, log_var: lvn }, eps).unwrap();
            assert!(g.value(out.aux_per_token)[0] >= 0.0);
        }
    }

    #[test]
    fn softvq_large_tau_gives_centroid() {
        let mut store = ParamStore::new();
        let cb = toy_codebook(&mut store, &[0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0], 4, 2);
        let mut g = Graph::new();
        let z = g.input(&[0.3, 0.4, -1.0, 1.5], &[2, 2]);
        let out = softvq_quantize(&mut g, z, &store, &cb, 1e6, 0.0, true).unwrap();
        let latents = g.value(out.latents);
        for i in 0..2 {
            assert!((latents[i * 2] - 1.0).abs() < 1e-4);
            assert!((latents[i * 2 + 1] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn softvq_small_tau_matches_hard_vq() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = ParamStore::new();
        let entries: Vec<f64> = (0..16 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cb = toy_codebook(&mut store, &entries, 16, 3);
        let z: Vec<f64> = (0..6 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let zn = g.input(&z, &[6, 3]);
        let soft = softvq_quantize(&mut g, zn, &store, &cb, 1e-4, 0.0, true).unwrap();
        let hard_idx = nearest_entries(&z, 6, &entries, 16, 3);
        let latents = g.value(soft.latents);
        for i in 0..6 {
            for c in 0..3 {
                let want = entries[hard_idx[i] * 3 + c];
                assert!(
                    (latents[i * 3 + c] - want).abs() < 1e-6,
                    "softvq row {i} ch {c}: {} vs hard {want}",
                    latents[i * 3 + c]
                );
            }
        }
    }

    #[test]
    fn softvq_equidistant_two_entries_gives_midpoint() {
        let mut store = ParamStore::new();
        let cb = toy_codebook(&mut store, &[0.0, 0.0, 1.0, 0.0], 2, 2);
        let mut g = Graph::new();
        let z = g.input(&[0.5, 0.3], &[1, 2]); // equidistant in x
        let out = softvq_quantize(&mut g, z, &store, &cb, 0.7, 0.0, true).unwrap();
        let latents = g.value(out.latents);
        assert!((latents[0] - 0.5).abs() < 1e-12);
        assert!(latents[1].abs() < 1e-12);
    }

    #[test]
    fn softvq_output_in_convex_hull() {
        // reconstruct the output from the assignment weights directly
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let size = 8;
        let d = 2;
        let entries: Vec<f64> = (0..size * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut store = ParamStore::new();
        let cb = toy_codebook(&mut store, &entries, size, d);
        let z: Vec<f64> = (0..3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let zn = g.input(&z, &[3, d]);
        let out = softvq_quantize(&mut g, zn, &store, &cb, 0.5, 0.0, true).unwrap();
        // recompute weights by hand and verify they are a proper convex combo
        for i in 0..3 {
            let zi = &z[i * d..(i + 1) * d];
            let dists: Vec<f64> = (0..size)
                .map(|j| {
                    let e = &entries[j * d..(j + 1) * d];
                    zi.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                })
                .collect();
            let mx = dists.iter().map(|v| -v / 0.5).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = dists.iter().map(|v| (-v / 0.5 - mx).exp()).collect();
            let zsum: f64 = exps.iter().sum();
            let w: Vec<f64> = exps.iter().map(|e| e / zsum).collect();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(w.iter().all(|&p| p >= 0.0));
            for c in 0..d {
                let want: f64 = (0..size).map(|j| w[j] * entries[j * d + c]).sum();
                let got = g.value(out.latents)[i * d + c];
                assert!((got - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn softvq_rejects_bad_tau() {
        let mut store = ParamStore::new();
        let cb = toy_codebook(&mut store, &[0.0, 0.0, 1.0, 1.0], 2, 2);
        let mut g = Graph::new();
        let z = g.input(&[0.1, 0.2], &[1, 2]);
        assert!(softvq_quantize(&mut g, z, &store, &cb, 0.0, 0.0, true).is_err());
        assert!(softvq_quantize(&mut g, z, &store, &cb, -1.0, 0.0, true).is_err());
    }

    #[test]
    fn dispatch_preserves_shape_for_all_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let k = 4;
        let d = 3;
        let mut store = ParamStore::new();
        let entries: Vec<f64> = (0..8 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cb = toy_codebook(&mut store, &entries, 8, d);
        let z: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        for kind in [ReguKind::Vq, ReguKind::SoftVq, ReguKind::Kl] {
            let cfg = ReguConfig {
                kind,
                d_latent: d,
                codebook_size: 8,
                vq_beta: 0.25,
                softvq_tau: 0.5,
                softvq_entropy_weight: 0.0,
            };
            let mut g = Graph::new();
            let input = match kind {
                ReguKind::Kl => {
                    let mu = g.input(&z, &[k, d]);
                    let lv = g.input(&vec![0.0; k * d], &[k, d]);
                    let eps = g.input(&vec![0.0; k * d], &[k, d]);
                    ReguInput::Posterior { post: GaussianPosterior { mu, log_var: lv }, noise: eps }
                }
                _ => {
                    let zn = g.input(&z, &[k, d]);
                    ReguInput::Latents(zn)
                }
            };
            let out = regu(&mut g, &cfg, input, &store, Some(&cb), true).unwrap();
            assert_eq!(g.shape(out.latents), &[k, d]);
            assert_eq!(g.shape(out.aux_per_token), &[k]);
        }
    }

    #[test]
    fn softvq_hard_agreement_over_1000_tie_free_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let size = 12;
        let d = 4;
        let entries: Vec<f64> = (0..size * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut store = ParamStore::new();
        let cb = toy_codebook(&mut store, &entries, size, d);
        let mut agree = 0;
        let mut total = 0;
        while total < 1000 {
            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // tie-free check: best two distances separated by a clear margin
            let mut dists: Vec<(f64, usize)> = (0..size)
                .map(|j| {
                    let e = &entries[j * d..(j + 1) * d];
                    (z.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j)
                })
                .collect();
            dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            if dists[1].0 - dists[0].0 < 1e-6 {
                continue;
            }
            total += 1;
            let mut g = Graph::new();
            let zn = g.input(&z, &[1, d]);
            let out = softvq_quantize(&mut g, zn, &store, &cb, 1e-4, 0.0, true).unwrap();
            // recover argmax weight by matching output to entries
            let latents = g.value(out.latents);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..size {
                let e = &entries[j * d..(j + 1) * d];
                let dd: f64 = latents.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if dd < best_d {
                    best_d = dd;
                    best = j;
                }
            }
            if best == dists[0].1 {
                agree += 1;
            }
        }
        assert_eq!(agree, total, "softvq argmax must match brute force on tie-free inputs");
    }
}
