//! Evaluation: prefix-budget sweeps, cross-recombination of condition and
//! latents, a pixel-statistics Fréchet proxy, and the CSV report format.

use rayon::prelude::*;

use crate::data::{image_mse, nearest_class_mean, ShapesDataset};
use crate::tensor::{Result, Tensor, TensorError};
use crate::tokenizer::Tokenizer;
use crate::train::thread_pool;

/// PSNR in dB against a unit dynamic range, capped at 99 dB.
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

// ── Prefix sweep report ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub k: usize,
    pub mse: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// CSV with header `k,mse,psnr`, LF line endings, 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,mse,psnr\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.8e},{:.8e}\n", r.k, r.mse, r.psnr));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<EvalReport> {
        let mut lines = text.lines();
        match lines.next() {
            Some("k,mse,psnr") => {}
            other => {
                return Err(TensorError::InvalidValue {
                    op: "EvalReport::from_csv",
                    detail: format!("bad header {other:?}"),
                })
            }
        }
        let mut rows = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let parse = |s: Option<&str>, what: &str| -> Result<f64> {
                s.and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| TensorError::InvalidValue {
                    op: "EvalReport::from_csv",
                    detail: format!("line {}: bad {what}", ln + 2),
                })
            };
            let k = parse(parts.next(), "k")? as usize;
            let mse = parse(parts.next(), "mse")?;
            let psnr = parse(parts.next(), "psnr")?;
            rows.push(EvalRow { k, mse, psnr });
        }
        Ok(EvalReport { rows })
    }
}

/// Mean reconstruction error per retained prefix length over a held-out set.
pub fn eval_prefix_sweep(
    tok: &Tokenizer,
    data: &ShapesDataset,
    ks: &[usize],
    indices: &[usize],
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(TensorError::InvalidValue {
            op: "eval_prefix_sweep",
            detail: "empty evaluation split".into(),
        });
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let errs: Vec<Result<f64>> = thread_pool().install(|| {
            indices
                .par_iter()
                .map(|&i| {
                    let rec = tok.reconstruct(&data.images[i], Some(data.labels[i]), k)?;
                    Ok(image_mse(&rec, &data.images[i]))
                })
                .collect()
        });
        let mut sum = 0.0;
        for e in errs {
            sum += e?;
        }
        let mse = sum / indices.len() as f64;
        rows.push(EvalRow { k, mse, psnr: psnr(mse) });
    }
    Ok(EvalReport { rows })
}

// ── Cross recombination ─────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CrossSwapReport {
    /// Fraction of cross-class pairs whose decode(C_a, Z_b) lands nearest
    /// class a's mean image.
    pub accuracy: f64,
    pub pairs: usize,
    /// Per-pair (class_a, class_b, predicted) records.
    pub records: Vec<(usize, usize, usize)>,
}

/// Decode condition a with latents from image b over the given pairs;
/// classify by nearest class mean.
pub fn eval_cross_swap(
    tok: &Tokenizer,
    data: &ShapesDataset,
    pairs: &[(usize, usize)],
    means: &[Tensor],
) -> Result<CrossSwapReport> {
    if pairs.is_empty() {
        return Err(TensorError::InvalidValue {
            op: "eval_cross_swap",
            detail: "no pairs supplied".into(),
        });
    }
    let decoded: Vec<Result<(usize, usize, usize)>> = thread_pool().install(|| {
        pairs
            .par_iter()
            .map(|&(ia, ib)| {
                let class_a = data.labels[ia];
                let z_b = tok.encode_latents(&data.images[ib], Some(data.labels[ib]))?;
                let img = tok.decode_image(&z_b, Some(class_a))?;
                Ok((class_a, data.labels[ib], nearest_class_mean(&img, means)))
            })
            .collect()
    });
    let mut records = Vec::with_capacity(pairs.len());
    let mut hits = 0usize;
    for d in decoded {
        let rec = d?;
        if rec.2 == rec.0 {
            hits += 1;
        }
        records.push(rec);
    }
    Ok(CrossSwapReport {
        accuracy: hits as f64 / pairs.len() as f64,
        pairs: pairs.len(),
        records,
    })
}

/// Deterministic cross-class pair list: for each ordered class pair, match
/// the first `per_pair` test images of each class.
pub fn cross_class_pairs(data: &ShapesDataset, indices: &[usize], per_pair: usize) -> Vec<(usize, usize)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 4];
    for &i in indices {
        by_class[data.labels[i]].push(i);
    }
    let mut pairs = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            if a == b {
                continue;
            }
            for j in 0..per_pair {
                if j < by_class[a].len() && j < by_class[b].len() {
                    pairs.push((by_class[a][j], by_class[b][j]));
                }
            }
        }
    }
    pairs
}

// ── Pixel Fréchet proxy ─────────────────────────────────────────────

/// Fréchet distance between diagonal-Gaussian fits of per-pixel statistics:
/// ||mu_a - mu_b||^2 + sum(var_a + var_b - 2 sqrt(var_a var_b)).
pub fn pixel_frechet(set_a: &[Tensor], set_b: &[Tensor]) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(TensorError::InvalidValue {
            op: "pixel_frechet",
            detail: "both image sets must be nonempty".into(),
        });
    }
    let n_px = set_a[0].data.len();
    for t in set_a.iter().chain(set_b.iter()) {
        if t.data.len() != n_px {
            return Err(TensorError::ShapeMismatch {
                op: "pixel_frechet",
                lhs: vec![n_px],
                rhs: vec![t.data.len()],
            });
        }
    }
    let stats = |set: &[Tensor]| -> (Vec<f64>, Vec<f64>) {
        let n = set.len() as f64;
        let mut mean = vec![0.0; n_px];
        for t in set {
            for (m, &v) in mean.iter_mut().zip(t.data.iter()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; n_px];
        for t in set {
            for ((va, &v), &m) in var.iter_mut().zip(t.data.iter()).zip(mean.iter()) {
                let d = v - m;
                *va += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= n;
        }
        (mean, var)
    };
    let (mu_a, var_a) = stats(set_a);
    let (mu_b, var_b) = stats(set_b);
    let mut dist = 0.0;
    for i in 0..n_px {
        let dm = mu_a[i] - mu_b[i];
        dist += dm * dm;
        dist += var_a[i] + var_b[i] - 2.0 * (var_a[i] * var_b[i]).sqrt();
    }
    Ok(dist)
}

/// Horizontal montage of equally sized grayscale images with 1px separators.
pub fn montage(rows: &[Vec<&Tensor>]) -> Result<Tensor> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(TensorError::InvalidValue {
            op: "montage",
            detail: "empty montage".into(),
        });
    }
    let h = rows[0][0].shape[0];
    let w = rows[0][0].shape[1];
    let cols = rows[0].len();
    let out_h = rows.len() * h + rows.len() - 1;
    let out_w = cols * w + cols - 1;
    let mut data = vec![1.0; out_h * out_w];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            if img.shape[0] != h || img.shape[1] != w {
                return Err(TensorError::ShapeMismatch {
                    op: "montage",
                    lhs: vec![h, w],
                    rhs: img.shape.clone(),
                });
            }
            let oy = ri * (h + 1);
            let ox = ci * (w + 1);
            for y in 0..h {
                for x in 0..w {
                    data[(oy + y) * out_w + ox + x] = img.data[y * w + x];
                }
            }
        }
    }
    Tensor::new(data, &[out_h, out_w, 1])
}
