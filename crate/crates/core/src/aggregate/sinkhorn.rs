use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Iterates kept for differentiating through a fixed number of rounds.
#[derive(Debug, Clone)]
pub struct SinkhornTape {
    /// `S / λ`.
    log_k: Array2<f64>,
    /// `u_0 … u_T`.
    us: Vec<Array1<f64>>,
    /// `v_1 … v_T`.
    vs: Vec<Array1<f64>>,
    lambda: f64,
    pub plan: Array2<f64>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Entropic transport plan between `n` patches and `m` clusters with uniform
/// marginals `1/n` and `1/m`.
///
/// Log-domain updates, `v` then `u` per round; `log R = S/λ + u ⊕ v`.
pub fn sinkhorn(scores: &Array2<f64>, iters: usize, lambda: f64) -> Result<Array2<f64>> {
    sinkhorn_taped(scores, iters, lambda).map(|t| t.plan)
}

/// `u_0 … u_T` and `v_1 … v_T`.
type Potentials = (Vec<Array1<f64>>, Vec<Array1<f64>>);

fn log_iterations(log_k: &Array2<f64>, iters: usize) -> Potentials {
    let (n, m) = log_k.dim();
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut us = vec![Array1::zeros(n)];
    let mut vs = Vec::with_capacity(iters);
    for _ in 0..iters {
        let u = us.last().unwrap();
        let v = Array1::from_shape_fn(m, |j| {
            log_b - log_sum_exp((0..n).map(|i| log_k[[i, j]] + u[i]))
        });
        let u_next = Array1::from_shape_fn(n, |i| {
            log_a - log_sum_exp((0..m).map(|j| log_k[[i, j]] + v[j]))
        });
        vs.push(v);
        us.push(u_next);
    }
    (us, vs)
}

/// Same rounds on a max-shifted kernel `exp(S/λ - c_i - d_j)` with scaling
/// vectors `a = exp(u + c)`, `b = exp(v + d)`. Gives up (`None`) when the
/// scalings leave a safe range, so the log-domain rounds take over.
fn scaled_iterations(log_k: &Array2<f64>, iters: usize) -> Option<Potentials> {
    const SAFE: std::ops::RangeInclusive<f64> = 1e-200..=1e200;
    let (n, m) = log_k.dim();
    let c: Vec<f64> = log_k
        .rows()
        .into_iter()
        .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut d = vec![f64::NEG_INFINITY; m];
    for (i, row) in log_k.rows().into_iter().enumerate() {
        for (dj, &x) in d.iter_mut().zip(row) {
            *dj = dj.max(x - c[i]);
        }
    }
    let kernel: Vec<f64> = log_k
        .indexed_iter()
        .map(|((i, j), &x)| (x - c[i] - d[j]).exp())
        .collect();
    let (ra, rb) = (1.0 / n as f64, 1.0 / m as f64);
    let mut a: Vec<f64> = c.iter().map(|x| x.exp()).collect();
    if !a.iter().all(|x| SAFE.contains(x)) {
        return None;
    }
    let mut b = vec![0.0; m];
    let mut us = vec![Array1::zeros(n)];
    let mut vs = Vec::with_capacity(iters);
    for _ in 0..iters {
        b.fill(0.0);
        for (row, &ai) in kernel.chunks_exact(m).zip(&a) {
            for (bj, &k) in b.iter_mut().zip(row) {
                *bj += k * ai;
            }
        }
        for bj in b.iter_mut() {
            *bj = rb / *bj;
        }
        for (row, ai) in kernel.chunks_exact(m).zip(a.iter_mut()) {
            *ai = ra / row.iter().zip(&b).map(|(k, bj)| k * bj).sum::<f64>();
        }
        if !a.iter().chain(&b).all(|x| SAFE.contains(x)) {
            return None;
        }
        vs.push(Array1::from_shape_fn(m, |j| b[j].ln() - d[j]));
        us.push(Array1::from_shape_fn(n, |i| a[i].ln() - c[i]));
    }
    Some((us, vs))
}

pub fn sinkhorn_taped(scores: &Array2<f64>, iters: usize, lambda: f64) -> Result<SinkhornTape> {
    let (n, m) = scores.dim();
    if n == 0 || m == 0 {
        return Err(Error::arg("sinkhorn needs a non-empty score matrix"));
    }
    if iters == 0 || !(lambda > 0.0) {
        return Err(Error::arg("sinkhorn needs iters >= 1 and lambda > 0"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("sinkhorn scores must be finite"));
    }
    let log_k = scores / lambda;
    let (us, vs) = match scaled_iterations(&log_k, iters) {
        Some(uv) => uv,
        None => log_iterations(&log_k, iters),
    };
    let (u, v) = (us.last().unwrap(), vs.last().unwrap());
    let plan = Array2::from_shape_fn((n, m), |(i, j)| (log_k[[i, j]] + u[i] + v[j]).exp());
    Ok(SinkhornTape {
        log_k,
        us,
        vs,
        lambda,
        plan,
    })
}

/// Gradient with respect to the scores given the gradient of the plan.
pub fn sinkhorn_backward(tape: &SinkhornTape, g_plan: &Array2<f64>) -> Array2<f64> {
    let (n, m) = tape.log_k.dim();
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let k = &tape.log_k;

    let g_log = g_plan * &tape.plan;
    let mut g_k = g_log.clone();
    let mut gu = g_log.sum_axis(Axis(1));
    let mut gv = g_log.sum_axis(Axis(0));

    for t in (1..=tape.vs.len()).rev() {
        let (u_t, v_t, u_prev) = (&tape.us[t], &tape.vs[t - 1], &tape.us[t - 1]);
        for i in 0..n {
            if gu[i] == 0.0 {
                continue;
            }
            for j in 0..m {
                let p = (k[[i, j]] + v_t[j] + u_t[i] - log_a).exp();
                g_k[[i, j]] -= gu[i] * p;
                gv[j] -= gu[i] * p;
            }
        }
        let mut gu_prev = Array1::zeros(n);
        for i in 0..n {
            for j in 0..m {
                let q = (k[[i, j]] + u_prev[i] + v_t[j] - log_b).exp();
                g_k[[i, j]] -= gv[j] * q;
                gu_prev[i] -= gv[j] * q;
            }
        }
        gu = gu_prev;
        gv.fill(0.0);
    }
    g_k / tape.lambda
}

/// Largest deviation of row sums from `1/n` and column sums from `1/m`.
pub fn marginal_residual(plan: &Array2<f64>) -> f64 {
    let (n, m) = plan.dim();
    let rows = plan.sum_axis(Axis(1));
    let cols = plan.sum_axis(Axis(0));
    let r = rows.iter().map(|s| (s - 1.0 / n as f64).abs()).fold(0.0, f64::max);
    let c = cols.iter().map(|s| (s - 1.0 / m as f64).abs()).fold(0.0, f64::max);
    r.max(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Plain exp-domain reference with alternating column/row scaling.
    fn scaling_reference(s: &Array2<f64>, iters: usize, lambda: f64) -> Array2<f64> {
        let (n, m) = s.dim();
        let k = s.mapv(|x| (x / lambda).exp());
        let mut a = vec![1.0; n];
        let mut b = vec![0.0; m];
        for _ in 0..iters {
            for j in 0..m {
                let col: f64 = (0..n).map(|i| k[[i, j]] * a[i]).sum();
                b[j] = (1.0 / m as f64) / col;
            }
            for i in 0..n {
                let row: f64 = (0..m).map(|j| k[[i, j]] * b[j]).sum();
                a[i] = (1.0 / n as f64) / row;
            }
        }
        Array2::from_shape_fn((n, m), |(i, j)| a[i] * k[[i, j]] * b[j])
    }

    #[test]
    fn zero_scores_give_product_of_marginals() {
        let r = sinkhorn(&Array2::zeros((4, 2)), 100, 1.0).unwrap();
        assert!(r.iter().all(|v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn diagonal_scores_match_long_run_reference() {
        let s = ndarray::arr2(&[[10.0, 0.0], [0.0, 10.0]]);
        let r = sinkhorn(&s, 100, 1.0).unwrap();
        let reference = scaling_reference(&s, 200, 1.0);
        assert!(r[[0, 0]] > r[[0, 1]] && r[[1, 1]] > r[[1, 0]]);
        for (a, b) in r.iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for i in 0..2 {
            assert!((r.row(i).sum() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn row_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-5.0..5.0));
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let sp = Array2::from_shape_fn((7, 3), |(i, j)| s[[perm[i], j]]);
        let r = sinkhorn(&s, 100, 1.0).unwrap();
        let rp = sinkhorn(&sp, 100, 1.0).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                assert!((rp[[i, j]] - r[[perm[i], j]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(sinkhorn(&ndarray::arr2(&[[f64::NAN]]), 10, 1.0).is_err());
        assert!(sinkhorn(&Array2::zeros((0, 3)), 10, 1.0).is_err());
        assert!(sinkhorn(&Array2::zeros((2, 3)), 10, 0.0).is_err());
    }

    #[test]
    fn marginals_converge_on_random_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(1..200);
            let m = rng.gen_range(1..40);
            let s = Array2::from_shape_fn((n, m), |_| rng.gen_range(-5.0..5.0));
            let r = sinkhorn(&s, 100, 1.0).unwrap();
            assert!(marginal_residual(&r) < 1e-6);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, m) = (5, 3);
        let s = Array2::from_shape_fn((n, m), |_| rng.gen_range(-2.0..2.0));
        let probe = Array2::from_shape_fn((n, m), |_| rng.gen_range(-1.0..1.0));
        let iters = 7;
        let f = |s: &Array2<f64>| (&sinkhorn(s, iters, 0.7).unwrap() * &probe).sum();
        let tape = sinkhorn_taped(&s, iters, 0.7).unwrap();
        let g = sinkhorn_backward(&tape, &probe);
        let h = 1e-6;
        for i in 0..n {
            for j in 0..m {
                let mut sp = s.clone();
                sp[[i, j]] += h;
                let mut sm = s.clone();
                sm[[i, j]] -= h;
                let fd = (f(&sp) - f(&sm)) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-8, "({i},{j}) fd {fd} analytic {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn scaled_and_log_rounds_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = Array2::from_shape_fn((40, 9), |_| rng.gen_range(-5.0..5.0));
        let (us, vs) = scaled_iterations(&s, 25).unwrap();
        let (ul, vl) = log_iterations(&s, 25);
        for (a, b) in us.iter().chain(&vs).zip(ul.iter().chain(&vl)) {
            assert!((a - b).iter().all(|d| d.abs() < 1e-10));
        }
    }

    #[test]
    fn extreme_scores_fall_back_to_log_rounds() {
        let s = ndarray::arr2(&[[900.0, -900.0], [-900.0, 900.0], [0.0, 1.0]]);
        assert!(scaled_iterations(&s, 10).is_none());
        let r = sinkhorn(&s, 100, 1.0).unwrap();
        assert!(r.iter().all(|v| v.is_finite()));
        assert!(marginal_residual(&r) < 1e-6);
    }
}
