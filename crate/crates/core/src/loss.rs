//! Patch-InfoNCE and truncated smooth-AP objectives with analytic gradients.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::PatchPairSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau_l: f64,
    pub tau_g: f64,
    pub truncation: usize,
    pub lambda_mix: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_l: 0.2,
            tau_g: 0.01,
            truncation: 4,
            lambda_mix: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_l > 0.0 && self.tau_g > 0.0) {
            return Err(Error::Config("loss: temperatures must be positive".into()));
        }
        if self.truncation == 0 || !(self.lambda_mix >= 0.0) {
            return Err(Error::Config("loss: need truncation >= 1 and lambda_mix >= 0".into()));
        }
        Ok(())
    }
}

/// Types that can be combined linearly as gradients.
pub trait Accumulate: Clone {
    fn add_scaled(&mut self, a: f64, other: &Self);
}

impl Accumulate for f64 {
    fn add_scaled(&mut self, a: f64, other: &Self) {
        *self += a * other;
    }
}

impl Accumulate for Vec<f64> {
    fn add_scaled(&mut self, a: f64, other: &Self) {
        assert_eq!(self.len(), other.len(), "gradient length");
        for (x, y) in self.iter_mut().zip(other) {
            *x += a * y;
        }
    }
}

impl Accumulate for Array1<f64> {
    fn add_scaled(&mut self, a: f64, other: &Self) {
        self.scaled_add(a, other);
    }
}

impl Accumulate for Array2<f64> {
    fn add_scaled(&mut self, a: f64, other: &Self) {
        self.scaled_add(a, other);
    }
}

impl<A: Accumulate, B: Accumulate> Accumulate for (A, B) {
    fn add_scaled(&mut self, a: f64, other: &Self) {
        self.0.add_scaled(a, &other.0);
        self.1.add_scaled(a, &other.1);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<G> {
    pub value: f64,
    pub grad: G,
}

/// `lp + λ · ltsap`, gradients combined with weights `(1, λ)`.
pub fn combined_loss<G: Accumulate>(lp: &LossValue<G>, ltsap: &LossValue<G>, lambda_mix: f64) -> LossValue<G> {
    let mut grad = lp.grad.clone();
    grad.add_scaled(lambda_mix, &ltsap.grad);
    LossValue {
        value: lp.value + lambda_mix * ltsap.value,
        grad,
    }
}

fn unit_rows(f: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut unit = f.clone();
    let mut norms = Vec::with_capacity(f.nrows());
    for mut row in unit.rows_mut() {
        let n = row.dot(&row).sqrt();
        norms.push(n);
        if n > 0.0 {
            row /= n;
        } else {
            row.fill(f64::NAN);
        }
    }
    (unit, norms)
}

fn checked_row<'a>(unit: &'a Array2<f64>, norms: &[f64], i: usize, which: &str) -> Result<ArrayView1<'a, f64>> {
    if i >= unit.nrows() {
        return Err(Error::arg(format!("patch index {i} outside {which} ({} patches)", unit.nrows())));
    }
    if !(norms[i] > 0.0) || !norms[i].is_finite() {
        return Err(Error::arg(format!("zero-norm feature at {which}[{i}]")));
    }
    Ok(unit.row(i))
}

fn project_out(g_unit: &Array2<f64>, unit: &Array2<f64>, norms: &[f64]) -> Array2<f64> {
    let mut g = Array2::zeros(unit.dim());
    for i in 0..unit.nrows() {
        let gu = g_unit.row(i);
        if gu.iter().all(|&v| v == 0.0) {
            continue;
        }
        let u = unit.row(i);
        let along = gu.dot(&u);
        let mut out = g.row_mut(i);
        out.assign(&(&gu - &(&u * along)));
        out /= norms[i];
    }
    g
}

/// Mean over positives of the InfoNCE term with cosine similarities.
///
/// For positive `(p1, p2)` the negatives are `cos(F1[p1], F2[n])` for
/// `n ∈ negatives_b` and `cos(F2[p2], F1[n])` for `n ∈ negatives_a`.
pub fn patch_infonce(
    f1: &Array2<f64>,
    f2: &Array2<f64>,
    pairs: &PatchPairSet,
    tau_l: f64,
) -> Result<LossValue<(Array2<f64>, Array2<f64>)>> {
    if pairs.positives.is_empty() {
        return Err(Error::arg("patch_infonce needs at least one positive pair"));
    }
    if !(tau_l > 0.0) {
        return Err(Error::arg("tau_l must be positive"));
    }
    let (u1, n1) = unit_rows(f1);
    let (u2, n2) = unit_rows(f2);
    let mut g1 = Array2::<f64>::zeros(f1.dim());
    let mut g2 = Array2::<f64>::zeros(f2.dim());
    let scale = 1.0 / pairs.positives.len() as f64;
    let mut total = 0.0;

    for (k, &(p1, p2)) in pairs.positives.iter().enumerate() {
        let a = checked_row(&u1, &n1, p1, "F1")?;
        let b = checked_row(&u2, &n2, p2, "F2")?;
        let neg_b = pairs.negatives_b.get(k).map_or(&[][..], |v| v.as_slice());
        let neg_a = pairs.negatives_a.get(k).map_or(&[][..], |v| v.as_slice());
        if neg_a.is_empty() && neg_b.is_empty() {
            return Err(Error::arg(format!("positive {k} has no negatives")));
        }
        let mut logits = vec![a.dot(&b) / tau_l];
        for &n in neg_b {
            logits.push(a.dot(&checked_row(&u2, &n2, n, "F2")?) / tau_l);
        }
        for &n in neg_a {
            logits.push(b.dot(&checked_row(&u1, &n1, n, "F1")?) / tau_l);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - logits[0];

        let w: Vec<f64> = logits.iter().map(|l| (l - lse).exp() * scale / tau_l).collect();
        let (a, b) = (a.to_owned(), b.to_owned());
        let wp = w[0] - scale / tau_l;
        g1.row_mut(p1).scaled_add(wp, &b);
        g2.row_mut(p2).scaled_add(wp, &a);
        for (j, &n) in neg_b.iter().enumerate() {
            let wn = w[1 + j];
            g1.row_mut(p1).scaled_add(wn, &u2.row(n));
            g2.row_mut(n).scaled_add(wn, &a);
        }
        for (j, &n) in neg_a.iter().enumerate() {
            let wn = w[1 + neg_b.len() + j];
            g2.row_mut(p2).scaled_add(wn, &u1.row(n));
            g1.row_mut(n).scaled_add(wn, &b);
        }
    }
    Ok(LossValue {
        value: total * scale,
        grad: (project_out(&g1, &u1, &n1), project_out(&g2, &u2, &n2)),
    })
}

/// Per-query relevance for the ranking loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TsapLabels {
    pub positives: Vec<Vec<usize>>,
    /// Items left out of the candidate set of each query.
    pub ignored: Vec<Vec<usize>>,
}

impl TsapLabels {
    pub fn from_positives(positives: Vec<Vec<usize>>) -> Self {
        let ignored = vec![Vec::new(); positives.len()];
        TsapLabels { positives, ignored }
    }
}

/// `H` with the rank-counting orientation: close to 1 when `j` is nearer to
/// the query than `i`.
fn rank_step(d_qi: f64, d_qj: f64, tau_g: f64) -> (f64, f64) {
    let x = (d_qi - d_qj) / tau_g;
    let s = 1.0 / (1.0 + (-x).exp());
    (s, s * (1.0 - s) / tau_g)
}

/// The `truncation` nearest candidates of `q` (ties by index), `q` and
/// ignored items excluded.
pub fn truncation_set(dist: &Array2<f64>, q: usize, ignored: &[usize], truncation: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..dist.nrows()).filter(|&j| j != q && !ignored.contains(&j)).collect();
    cand.sort_by(|&a, &b| dist[[q, a]].total_cmp(&dist[[q, b]]).then(a.cmp(&b)));
    cand.truncate(truncation);
    cand
}

/// Truncated smooth-AP over a batch of descriptors (rows of `desc`).
///
/// For each query with positives, `T_q` is its truncation set and for each
/// positive `i`:
/// `AP_q = mean_i (1 + Σ_{j∈P⁺∩T_q, j≠i} H_ij) / (1 + Σ_{j∈T_q, j≠i} H_ij)`.
/// Queries without positives are skipped; the loss is `mean_q (1 − AP_q)`.
pub fn tsap(desc: &Array2<f64>, labels: &TsapLabels, tau_g: f64, truncation: usize) -> Result<LossValue<Array2<f64>>> {
    let b = desc.nrows();
    if b < 2 {
        return Err(Error::arg("tsap needs a batch of at least two descriptors"));
    }
    if labels.positives.len() != b || labels.ignored.len() != b {
        return Err(Error::ShapeMismatch("tsap labels must cover every batch row".into()));
    }
    if !(tau_g > 0.0) || truncation == 0 {
        return Err(Error::arg("tsap needs tau_g > 0 and truncation >= 1"));
    }
    let dist = Array2::from_shape_fn((b, b), |(i, j)| {
        let d = &desc.row(i) - &desc.row(j);
        d.dot(&d).sqrt()
    });

    let queries: Vec<usize> = (0..b)
        .filter(|&q| labels.positives[q].iter().any(|&i| i != q && !labels.ignored[q].contains(&i)))
        .collect();
    if queries.len() < b {
        log::warn!("tsap: {} of {b} queries have no positives and are skipped", b - queries.len());
    }
    let mut g_dist = Array2::<f64>::zeros((b, b));
    let mut total = 0.0;
    if queries.is_empty() {
        return Ok(LossValue { value: 0.0, grad: Array2::zeros(desc.dim()) });
    }
    let qscale = 1.0 / queries.len() as f64;

    for &q in &queries {
        let ign = &labels.ignored[q];
        let pos: Vec<usize> = labels.positives[q]
            .iter()
            .copied()
            .filter(|&i| i != q && !ign.contains(&i))
            .collect();
        let top = truncation_set(&dist, q, ign, truncation);
        let pscale = qscale / pos.len() as f64;
        let mut ap = 0.0;
        for &i in &pos {
            let mut num = 1.0;
            let mut den = 1.0;
            let mut terms = Vec::with_capacity(top.len());
            for &j in &top {
                if j == i {
                    continue;
                }
                let (h, dh) = rank_step(dist[[q, i]], dist[[q, j]], tau_g);
                let is_pos = pos.contains(&j);
                if is_pos {
                    num += h;
                }
                den += h;
                terms.push((j, is_pos, dh));
            }
            ap += num / den;
            for (j, is_pos, dh) in terms {
                let c = ((is_pos as u8 as f64) / den - num / (den * den)) * dh * -pscale;
                g_dist[[q, i]] += c;
                g_dist[[q, j]] -= c;
            }
        }
        total += 1.0 - ap / pos.len() as f64;
    }

    let mut grad = Array2::<f64>::zeros(desc.dim());
    for q in 0..b {
        for j in 0..b {
            let g = g_dist[[q, j]];
            if g == 0.0 || dist[[q, j]] == 0.0 {
                continue;
            }
            let dir = (&desc.row(q) - &desc.row(j)) / dist[[q, j]];
            grad.row_mut(q).scaled_add(g, &dir);
            grad.row_mut(j).scaled_add(-g, &dir);
        }
    }
    Ok(LossValue {
        value: total * qscale,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::MiningConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairs(pos: Vec<(usize, usize)>, na: Vec<Vec<usize>>, nb: Vec<Vec<usize>>) -> PatchPairSet {
        PatchPairSet {
            source_a: "a".into(),
            source_b: "b".into(),
            rows: 1,
            cols: 8,
            seed: 0,
            config: MiningConfig::default(),
            positives: pos,
            negatives_a: na,
            negatives_b: nb,
        }
    }

    #[test]
    fn symmetric_logits_give_ln2() {
        let f1 = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let f2 = ndarray::arr2(&[[0.6, 0.8], [0.6, 0.8]]);
        let set = pairs(vec![(0, 0)], vec![vec![]], vec![vec![1]]);
        let l = patch_infonce(&f1, &f2, &set, 0.2).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn separated_logits_closed_form() {
        let f1 = ndarray::arr2(&[[1.0, 0.0]]);
        let f2 = ndarray::arr2(&[[1.0, 0.0], [-1.0, 0.0]]);
        let set = pairs(vec![(0, 0)], vec![vec![]], vec![vec![1]]);
        let l = patch_infonce(&f1, &f2, &set, 0.2).unwrap();
        assert!((l.value - (1.0 + (-10.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_feature_rejected() {
        let f1 = ndarray::arr2(&[[0.0, 0.0], [1.0, 0.0]]);
        let f2 = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let set = pairs(vec![(0, 0)], vec![vec![]], vec![vec![1]]);
        assert!(patch_infonce(&f1, &f2, &set, 0.2).is_err());
        let unused_zero = pairs(vec![(1, 0)], vec![vec![]], vec![vec![1]]);
        assert!(patch_infonce(&f1, &f2, &unused_zero, 0.2).is_ok());
    }

    #[test]
    fn two_pairs_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f1 = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
        let f2 = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
        let one = pairs(vec![(0, 1)], vec![vec![3]], vec![vec![4, 5]]);
        let two = pairs(vec![(2, 2)], vec![vec![0, 5]], vec![vec![1]]);
        let both = pairs(vec![(0, 1), (2, 2)], vec![vec![3], vec![0, 5]], vec![vec![4, 5], vec![1]]);
        let a = patch_infonce(&f1, &f2, &one, 0.2).unwrap().value;
        let b = patch_infonce(&f1, &f2, &two, 0.2).unwrap().value;
        let c = patch_infonce(&f1, &f2, &both, 0.2).unwrap().value;
        assert!((c - 0.5 * (a + b)).abs() < 1e-12);
    }

    #[test]
    fn tsap_single_positive_is_zero() {
        let d = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let labels = TsapLabels::from_positives(vec![vec![1], vec![0]]);
        let l = tsap(&d, &labels, 0.01, 4).unwrap();
        assert!(l.value.abs() < 1e-12);
    }

    /// Literal transcription of the AP formula for one query.
    fn ap_reference(dq: &[f64], pos: &[usize], top: &[usize], tau: f64) -> f64 {
        let h = |x: f64| 1.0 / (1.0 + (x / tau).exp());
        let mut s = 0.0;
        for &i in pos {
            let mut num = 1.0;
            let mut den = 1.0;
            for &j in top {
                if j == i {
                    continue;
                }
                let step = h(dq[j] - dq[i]);
                if pos.contains(&j) {
                    num += step;
                }
                den += step;
            }
            s += num / den;
        }
        s / pos.len() as f64
    }

    #[test]
    fn tsap_matches_scalar_transcription() {
        // Query at the origin, positive at 0.1, negative at 0.9.
        let d = ndarray::arr2(&[[0.0, 0.0], [0.1, 0.0], [0.9, 0.0]]);
        let labels = TsapLabels {
            positives: vec![vec![1], vec![0], vec![]],
            ignored: vec![vec![], vec![], vec![]],
        };
        let l = tsap(&d, &labels, 0.01, 4).unwrap();
        let ap0 = ap_reference(&[0.0, 0.1, 0.9], &[1], &[1, 2], 0.01);
        let ap1 = ap_reference(&[0.1, 0.0, 0.8], &[0], &[0, 2], 0.01);
        assert!((l.value - (2.0 - ap0 - ap1) / 2.0).abs() < 1e-12);
        assert!(l.value < 1e-6);

        // Negative closer than the positive.
        let d = ndarray::arr2(&[[0.0, 0.0], [0.5, 0.0], [0.49, 0.0]]);
        let l = tsap(&d, &TsapLabels::from_positives(vec![vec![1], vec![], vec![]]), 0.01, 4).unwrap();
        let ap = ap_reference(&[0.0, 0.5, 0.49], &[1], &[2, 1], 0.01);
        assert!((l.value - (1.0 - ap)).abs() < 1e-12);
    }

    #[test]
    fn truncation_ignores_far_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = Array2::from_shape_fn((8, 3), |_| rng.gen_range(-0.1..0.1));
        for i in 5..8 {
            d[[i, 0]] += 10.0 + i as f64;
        }
        let labels = TsapLabels::from_positives(vec![vec![1, 2], vec![0], vec![0], vec![], vec![], vec![], vec![], vec![]]);
        let base = tsap(&d, &labels, 0.01, 4).unwrap().value;
        let mut swapped = d.clone();
        let (r6, r7) = (d.row(6).to_owned(), d.row(7).to_owned());
        swapped.row_mut(6).assign(&r7);
        swapped.row_mut(7).assign(&r6);
        assert_eq!(tsap(&swapped, &labels, 0.01, 4).unwrap().value, base);
    }

    #[test]
    fn combined_linearity() {
        let lp = LossValue { value: 0.5, grad: vec![1.0, 2.0] };
        let lt = LossValue { value: 0.25, grad: vec![0.5, -1.0] };
        let c = combined_loss(&lp, &lt, 2.0);
        assert_eq!(c.value, 1.0);
        assert_eq!(c.grad, vec![2.0, 0.0]);
        assert_eq!(combined_loss(&lp, &lt, 0.0), lp);
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    fn fd_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-5;
        let mut g = Array2::zeros(x.dim());
        for idx in ndarray::indices(x.dim()) {
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            g[idx] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn infonce_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let f1 = Array2::from_shape_fn((8, 5), |_| rng.gen_range(-1.0..1.0));
            let f2 = Array2::from_shape_fn((8, 5), |_| rng.gen_range(-1.0..1.0));
            let set = pairs(vec![(0, 1), (3, 3)], vec![vec![4, 5], vec![7]], vec![vec![6], vec![0, 1]]);
            let l = patch_infonce(&f1, &f2, &set, 0.2).unwrap();
            let g1 = fd_grad(&f1, |x| patch_infonce(x, &f2, &set, 0.2).unwrap().value);
            let g2 = fd_grad(&f2, |x| patch_infonce(&f1, x, &set, 0.2).unwrap().value);
            assert!(rel_err(&l.grad.0, &g1) < 1e-4);
            assert!(rel_err(&l.grad.1, &g2) < 1e-4);
        }
    }

    #[test]
    fn tsap_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let d = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-0.05..0.05));
            let labels = TsapLabels::from_positives(vec![vec![1, 2], vec![0], vec![0, 3], vec![2], vec![5], vec![4]]);
            let l = tsap(&d, &labels, 0.01, 4).unwrap();
            let g = fd_grad(&d, |x| tsap(x, &labels, 0.01, 4).unwrap().value);
            assert!(rel_err(&l.grad, &g) < 1e-4, "rel err {}", rel_err(&l.grad, &g));
        }
    }

    proptest! {
        #[test]
        fn infonce_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0, row in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f1 = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
            let f2 = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
            let set = pairs(vec![(0, 1), (2, 3)], vec![vec![4], vec![5]], vec![vec![5], vec![0]]);
            let base = patch_infonce(&f1, &f2, &set, 0.2).unwrap().value;
            let mut g1 = f1.clone();
            g1.row_mut(row).mapv_inplace(|v| v * c);
            prop_assert!((patch_infonce(&g1, &f2, &set, 0.2).unwrap().value - base).abs() < 1e-9);
        }

        #[test]
        fn infonce_decreases_with_positive_similarity(t in 0.0f64..1.4, dt in 0.01f64..0.15) {
            let f1 = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
            let at = |a: f64| ndarray::arr2(&[[a.cos(), a.sin()], [-1.0, 0.3]]);
            let set = pairs(vec![(0, 0)], vec![vec![1]], vec![vec![1]]);
            // F1[1] rotates with F2[0] so both negatives stay fixed.
            let l = |a: f64| {
                let mut g1 = f1.clone();
                g1.row_mut(1).assign(&ndarray::arr1(&[(a + 2.0).cos(), (a + 2.0).sin()]));
                patch_infonce(&g1, &at(a), &set, 0.2).unwrap().value
            };
            prop_assert!(l(t + dt) > l(t));
        }

        #[test]
        fn tsap_in_unit_interval(seed in any::<u64>(), b in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = Array2::from_shape_fn((b, 3), |_| rng.gen_range(-1.0..1.0));
            let positives = (0..b).map(|q| vec![(q + 1) % b]).collect();
            let l = tsap(&d, &TsapLabels::from_positives(positives), 0.01, 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&l.value));
        }
    }
}
