//! Central finite-difference gradient verification.

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest relative error over checked live coordinates.
    pub max_rel_err: f64,
    /// Coordinate index attaining `max_rel_err`.
    pub worst_coord: usize,
    /// Coordinates where both gradients are below the dead threshold;
    /// reported, not failed.
    pub dead_coords: Vec<usize>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Both-sides-tiny threshold below which a coordinate counts as dead.
pub const DEAD_THRESHOLD: f64 = 1e-9;

/// Relative-error denominator floor. Gradients far below this magnitude are
/// compared absolutely (scaled by the floor), keeping finite-difference
/// noise from inflating the ratio.
pub const REL_FLOOR: f64 = 1e-3;

/// Compare the analytic gradient of `f` at `x` against central differences
/// with step `h`, coordinate by coordinate. `f` evaluates the scalar
/// function; `grad_f` returns its full analytic gradient. When `coords` is
/// given, only those coordinates are probed (used for large composites).
pub fn finite_diff_check<F, G>(
    f: F,
    grad_f: G,
    x: &[f64],
    h: f64,
    tol: f64,
    coords: Option<&[usize]>,
) -> FdReport
where
    F: Fn(&[f64]) -> f64,
    G: FnOnce(&[f64]) -> Vec<f64>,
{
    let analytic = grad_f(x);
    assert_eq!(analytic.len(), x.len(), "gradient length must match input");
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };

    let mut max_rel = 0.0;
    let mut worst = 0;
    let mut dead = Vec::new();
    let mut buf = x.to_vec();
    for &i in coords {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = f(&buf);
        buf[i] = orig - h;
        let fm = f(&buf);
        buf[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        if a.abs() < DEAD_THRESHOLD && numeric.abs() < DEAD_THRESHOLD {
            dead.push(i);
            continue;
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    FdReport {
        max_rel_err: max_rel,
        worst_coord: worst,
        dead_coords: dead,
        checked: coords.len(),
        tol,
        passed: max_rel < tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn half_norm_squared_is_near_exact() {
        let x: Vec<f64> = vec![0.7, -1.3, 2.1, 0.4];
        let f = |v: &[f64]| 0.5 * v.iter().map(|a| a * a).sum::<f64>();
        let g = |v: &[f64]| v.to_vec();
        let rep = finite_diff_check(f, g, &x, 1e-5, 1e-9, None);
        assert!(rep.passed, "max_rel_err = {}", rep.max_rel_err);
        assert!(rep.max_rel_err < 1e-9);
    }

    #[test]
    fn softmax_cross_entropy_passes_at_1e4() {
        let x: Vec<f64> = vec![0.3, -0.9, 1.4, 0.2, -0.5];
        let target = 2usize;
        let f = |v: &[f64]| {
            let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = v.iter().map(|a| (a - mx).exp()).sum();
            -(v[target] - mx - z.ln())
        };
        let g = |v: &[f64]| {
            let mut gr = Vec::with_capacity(v.len());
            let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = v.iter().map(|a| (a - mx).exp()).sum();
            for (i, &a) in v.iter().enumerate() {
                let p = (a - mx).exp() / z;
                gr.push(p - if i == target { 1.0 } else { 0.0 });
            }
            gr
        };
        let rep = finite_diff_check(f, g, &x, 1e-5, 1e-4, None);
        assert!(rep.passed, "max_rel_err = {}", rep.max_rel_err);
    }

    #[test]
    fn dead_coordinate_reported_not_failed() {
        // f ignores coordinate 1 entirely
        let x = vec![0.8, -0.6];
        let f = |v: &[f64]| v[0] * v[0];
        let g = |v: &[f64]| vec![2.0 * v[0], 0.0];
        let rep = finite_diff_check(f, g, &x, 1e-5, 1e-6, None);
        assert!(rep.passed);
        assert_eq!(rep.dead_coords, vec![1]);
    }

    #[test]
    fn graph_built_function_checks() {
        // composite of several primitives through the tape
        let x: Vec<f64> = vec![0.2, -0.7, 1.1, 0.5, -0.3, 0.9];
        let build = |v: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let xn = g.variable(v, &[2, 3]);
            let sm = g.softmax(xn, 1).unwrap();
            let gl = g.gelu(sm);
            let ln = g.layer_norm(gl, None, None, 1e-6).unwrap();
            let sq = g.mul(ln, ln).unwrap();
            let loss = g.mean_all(sq);
            let val = g.scalar_value(loss);
            if want_grad {
                g.backward(loss).unwrap();
                (val, g.grad(xn).unwrap().to_vec())
            } else {
                (val, Vec::new())
            }
        };
        let rep = finite_diff_check(
            |v| build(v, false).0,
            |v| build(v, true).1,
            &x,
            1e-5,
            1e-4,
            None,
        );
        assert!(rep.passed, "max_rel_err = {}", rep.max_rel_err);
    }
}
