//! Synthetic shapes dataset: four classes (disc, square, cross, triangle)
//! with per-sample center, scale, intensity, and background drawn
//! independently of the class, rasterized with supersampled antialiasing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub const SHAPE_CLASSES: [&str; 4] = ["disc", "square", "cross", "triangle"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Cross,
    Triangle,
}

impl ShapeKind {
    pub fn from_class(c: usize) -> ShapeKind {
        match c % 4 {
            0 => ShapeKind::Disc,
            1 => ShapeKind::Square,
            2 => ShapeKind::Cross,
            _ => ShapeKind::Triangle,
        }
    }

    fn contains(&self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disc => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs().max(dy.abs()) <= r * 0.9,
            ShapeKind::Cross => {
                let arm = r * 0.38;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            ShapeKind::Triangle => {
                // upward isoceles triangle inscribed in the radius
                let top = -r;
                let bottom = r * 0.85;
                if dy < top || dy > bottom {
                    return false;
                }
                let frac = (dy - top) / (bottom - top);
                dx.abs() <= frac * r * 0.95
            }
        }
    }
}

/// Per-sample rendering parameters; independent of the class by construction.
#[derive(Debug, Clone, Copy)]
pub struct Instance {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub intensity: f64,
    pub background: f64,
}

pub struct ShapesDataset {
    pub size: usize,
    pub n_per_class: usize,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub instances: Vec<Instance>,
}

/// Deterministic rasterization of one instance with 3x3 supersampling.
pub fn render(kind: ShapeKind, inst: &Instance, size: usize) -> Tensor {
    let ss = 3;
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0usize;
            for sy in 0..ss {
                for sx in 0..ss {
                    let px = x as f64 + (sx as f64 + 0.5) / ss as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / ss as f64;
                    if kind.contains(px - inst.cx, py - inst.cy, inst.radius) {
                        hits += 1;
                    }
                }
            }
            let coverage = hits as f64 / (ss * ss) as f64;
            let v = inst.background + (inst.intensity - inst.background) * coverage;
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::new(data, &[size, size, 1]).unwrap()
}

/// Balanced dataset: `n_per_class` samples for each of the four classes,
/// bitwise deterministic for a given seed.
pub fn make_shapes_dataset(seed: u64, n_per_class: usize, size: usize) -> ShapesDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(4 * n_per_class);
    let mut instances = Vec::with_capacity(4 * n_per_class);
    let s = size as f64;
    for class in 0..4usize {
        for _ in 0..n_per_class {
            let inst = Instance {
                cx: s / 2.0 + rng.gen_range(-0.09 * s..0.09 * s),
                cy: s / 2.0 + rng.gen_range(-0.09 * s..0.09 * s),
                radius: rng.gen_range(0.20 * s..0.34 * s),
                intensity: rng.gen_range(0.65..1.0),
                background: rng.gen_range(0.02..0.18),
            };
            images.push(render(ShapeKind::from_class(class), &inst, size));
            labels.push(class);
            instances.push(inst);
        }
    }
    ShapesDataset { size, n_per_class, images, labels, instances }
}

impl ShapesDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Held-out membership by a deterministic hash of the sample index
    /// (roughly 20 percent of samples).
    pub fn is_test(&self, index: usize) -> bool {
        splitmix64(index as u64) % 5 == 0
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_test(i)).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_test(i)).collect()
    }

    /// Per-class mean image over the given indices.
    pub fn class_means(&self, indices: &[usize]) -> Vec<Tensor> {
        let n_px = self.size * self.size;
        let mut sums = vec![vec![0.0; n_px]; 4];
        let mut counts = [0usize; 4];
        for &i in indices {
            let c = self.labels[i];
            counts[c] += 1;
            for (o, &v) in sums[c].iter_mut().zip(self.images[i].data.iter()) {
                *o += v;
            }
        }
        sums.into_iter()
            .enumerate()
            .map(|(c, mut s)| {
                let n = counts[c].max(1) as f64;
                for v in s.iter_mut() {
                    *v /= n;
                }
                Tensor::new(s, &[self.size, self.size, 1]).unwrap()
            })
            .collect()
    }
}

/// SplitMix64 hash; drives the train/test split.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Mean squared distance between two images.
pub fn image_mse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.data.len();
    let mut s = 0.0;
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        let d = x - y;
        s += d * d;
    }
    s / n as f64
}

/// Index of the class-mean image nearest to `img` in MSE.
pub fn nearest_class_mean(img: &Tensor, means: &[Tensor]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, m) in means.iter().enumerate() {
        let d = image_mse(img, m);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = make_shapes_dataset(7, 5, 16);
        let b = make_shapes_dataset(7, 5, 16);
        for (x, y) in a.images.iter().zip(b.images.iter()) {
            assert!(x.data.iter().zip(y.data.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn balanced_class_counts() {
        let d = make_shapes_dataset(3, 12, 16);
        for c in 0..4 {
            assert_eq!(d.labels.iter().filter(|&&l| l == c).count(), 12);
        }
    }

    #[test]
    fn pixels_in_unit_range() {
        let d = make_shapes_dataset(11, 8, 32);
        for img in &d.images {
            assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn label_fully_determined_by_kind() {
        let d = make_shapes_dataset(5, 6, 16);
        for (i, &l) in d.labels.iter().enumerate() {
            assert_eq!(l, i / 6);
        }
    }

    #[test]
    fn split_is_deterministic_and_nontrivial() {
        let d = make_shapes_dataset(1, 50, 16);
        let test = d.test_indices();
        let train = d.train_indices();
        assert_eq!(test.len() + train.len(), d.len());
        let frac = test.len() as f64 / d.len() as f64;
        assert!((0.10..0.30).contains(&frac), "test fraction {frac}");
        assert_eq!(test, d.test_indices());
    }

    #[test]
    fn class_means_are_distinct() {
        let d = make_shapes_dataset(2, 40, 32);
        let means = d.class_means(&(0..d.len()).collect::<Vec<_>>());
        for a in 0..4 {
            for b in (a + 1)..4 {
                assert!(image_mse(&means[a], &means[b]) > 1e-4, "means {a} and {b} too close");
            }
        }
    }

    #[test]
    fn shapes_have_nonempty_interior_and_exterior() {
        for class in 0..4 {
            let inst = Instance { cx: 16.0, cy: 16.0, radius: 8.0, intensity: 1.0, background: 0.0 };
            let img = render(ShapeKind::from_class(class), &inst, 32);
            let lit = img.data.iter().filter(|&&v| v > 0.5).count();
            assert!(lit > 20, "class {class} renders almost nothing");
            assert!(lit < 32 * 32 - 20, "class {class} fills the frame");
        }
    }
}
