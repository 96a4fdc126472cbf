//! Retrieval metrics: top-1 search, Recall@1, max F1, precision-recall
//! sweeps and the intra-/inter-session protocols.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{Descriptor, DescriptorMeta};
use crate::error::{Error, Result};
use crate::scan_geometry::Pose;

const UNIT_TOLERANCE: f64 = 1e-5;

/// Immutable descriptor rows with per-row metadata. Invalid (all-zero)
/// descriptors are kept for row alignment but never retrieved.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorDb {
    dim: usize,
    descriptors: Vec<Descriptor>,
    metas: Vec<DescriptorMeta>,
}

impl DescriptorDb {
    pub fn new(descriptors: Vec<Descriptor>, metas: Vec<DescriptorMeta>) -> Result<Self> {
        if descriptors.len() != metas.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} descriptors but {} metadata rows",
                descriptors.len(),
                metas.len()
            )));
        }
        let dim = descriptors.first().map_or(0, |d| d.len());
        for (i, d) in descriptors.iter().enumerate() {
            if d.len() != dim {
                return Err(Error::ShapeMismatch(format!("row {i} has length {}, expected {dim}", d.len())));
            }
            if d.is_valid() && (d.norm() - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::arg(format!("row {i} is not unit-norm ({})", d.norm())));
            }
        }
        Ok(DescriptorDb { dim, descriptors, metas })
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn descriptor(&self, i: usize) -> &Descriptor {
        &self.descriptors[i]
    }

    pub fn meta(&self, i: usize) -> &DescriptorMeta {
        &self.metas[i]
    }

    pub fn descriptors(&self) -> &[Descriptor] {
        &self.descriptors
    }

    pub fn metas(&self) -> &[DescriptorMeta] {
        &self.metas
    }
}

/// Rows newer than `query_time − seconds` are not admissible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeExclusion {
    pub query_time: f64,
    pub seconds: f64,
}

impl TimeExclusion {
    pub fn admits(&self, t: f64) -> bool {
        t <= self.query_time - self.seconds
    }
}

/// Nearest admissible row and its distance; `None` when no row is admissible.
pub fn retrieve_top1(db: &DescriptorDb, q: &Descriptor, exclusion: Option<TimeExclusion>) -> Result<Option<(usize, f64)>> {
    if !q.is_valid() {
        return Err(Error::arg("query descriptor is invalid"));
    }
    if !db.is_empty() && q.len() != db.dim {
        return Err(Error::ShapeMismatch(format!("query length {} vs database {}", q.len(), db.dim)));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, d) in db.descriptors.iter().enumerate() {
        if !d.is_valid() || exclusion.is_some_and(|e| !e.admits(db.metas[i].timestamp())) {
            continue;
        }
        let dist = squared_distance(q.values(), d.values());
        if best.map_or(true, |(_, b)| dist < b) {
            best = Some((i, dist));
        }
    }
    Ok(best.map(|(i, d2)| (i, d2.sqrt())))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fraction of `(retrieved, query)` pose pairs closer than `radius`.
pub fn recall_at_1(results: &[(Pose, Pose)], radius: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::arg("recall_at_1 needs at least one query"));
    }
    let hits = results.iter().filter(|(r, q)| r.distance(q) <= radius).count();
    Ok(hits as f64 / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrSample {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// One sample per distinct observed distance, ascending. A query is
/// predicted positive when its top-1 distance is at most the threshold.
pub fn pr_curve(results: &[(f64, bool)]) -> Vec<PrSample> {
    let mut sorted: Vec<(f64, bool)> = results.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total_true = sorted.iter().filter(|r| r.1).count();
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = if total_true == 0 { 0.0 } else { tp as f64 / total_true as f64 };
        let f1 = if tp == 0 { 0.0 } else { (2 * tp) as f64 / (tp + fp + total_true) as f64 };
        out.push(PrSample { threshold: t, precision, recall, f1 });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxF1 {
    pub f1: f64,
    pub threshold: f64,
    /// False when no query has a true match; `f1` is then 0.
    pub has_true_matches: bool,
}

/// Highest F1 over the exact threshold sweep; the smallest threshold wins ties.
pub fn max_f1(results: &[(f64, bool)]) -> Result<MaxF1> {
    if results.is_empty() {
        return Err(Error::arg("max_f1 needs at least one query"));
    }
    let has_true_matches = results.iter().any(|r| r.1);
    let mut best = MaxF1 { f1: 0.0, threshold: f64::NAN, has_true_matches };
    for s in pr_curve(results) {
        if s.f1 > best.f1 || best.threshold.is_nan() {
            best.f1 = s.f1;
            best.threshold = s.threshold;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Intra,
    Inter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub mode: EvalMode,
    pub positive_radius: f64,
    pub temporal_exclusion: f64,
    pub warmup: f64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            mode: EvalMode::Inter,
            positive_radius: 10.0,
            temporal_exclusion: 60.0,
            warmup: 90.0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.positive_radius > 0.0) {
            return Err(Error::Config("eval: positive_radius must be positive".into()));
        }
        if !(self.temporal_exclusion >= 0.0 && self.warmup >= 0.0) {
            return Err(Error::Config("eval: temporal_exclusion and warmup must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Ok,
    NoQueries,
    NoTrueMatches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: usize,
    pub retrieved: usize,
    pub distance: f64,
    pub correct: bool,
    /// Whether any admissible row lies within the positive radius.
    pub has_revisit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub status: ReportStatus,
    pub queries_total: usize,
    pub queries_evaluated: usize,
    pub queries_with_revisit: usize,
    pub recall_at_1: f64,
    pub max_f1: f64,
    pub f1_threshold: Option<f64>,
    #[serde(skip)]
    pub per_query: Vec<QueryResult>,
    #[serde(skip)]
    pub pr: Vec<PrSample>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn pr_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f1\n");
        for p in &self.pr {
            let _ = writeln!(s, "{},{},{},{}", p.threshold, p.precision, p.recall, p.f1);
        }
        s
    }

    /// Precision-recall curve as a standalone SVG document.
    /// `query,retrieved,descriptor_distance,pose_distance,correct,nearby`, one row per
    /// evaluated query. `nearby` marks retrievals within `nearby_radius` meters of
    /// the query, a looser criterion for qualitative plots only.
    pub fn matches_csv(&self, db: &DescriptorDb, queries: &DescriptorDb, nearby_radius: f64) -> String {
        let mut s = String::from("query,retrieved,descriptor_distance,pose_distance,correct,nearby\n");
        for r in &self.per_query {
            let (q, m) = (queries.meta(r.query), db.meta(r.retrieved));
            let d = q.pose.distance(&m.pose);
            let _ = writeln!(s, "{},{},{},{},{},{}", q.id, m.id, r.distance, d, r.correct, d <= nearby_radius);
        }
        s
    }

    pub fn pr_svg(&self) -> String {
        let (w, h, m) = (360.0, 360.0, 40.0);
        let x = |r: f64| m + r * (w - 2.0 * m);
        let y = |p: f64| h - m - p * (h - 2.0 * m);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
        );
        let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
        let _ = writeln!(
            s,
            "<path d=\"M{} {} L{} {} L{} {}\" fill=\"none\" stroke=\"black\"/>",
            x(0.0), y(1.0), x(0.0), y(0.0), x(1.0), y(0.0)
        );
        for t in [0.0, 0.5, 1.0] {
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{t}</text>", x(t), y(0.0) + 14.0);
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{t}</text>", x(0.0) - 4.0, y(t) + 4.0);
        }
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">recall</text>", w / 2.0, h - 8.0);
        let _ = writeln!(
            s,
            "<text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">precision</text>",
            h / 2.0,
            h / 2.0
        );
        if !self.pr.is_empty() {
            let pts: Vec<String> = self.pr.iter().map(|p| format!("{:.2},{:.2}", x(p.recall), y(p.precision))).collect();
            let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"1.5\"/>", pts.join(" "));
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\">R@1 {:.3}  max F1 {:.3}</text>",
            x(0.0) + 6.0,
            m - 10.0,
            self.recall_at_1,
            self.max_f1
        );
        s.push_str("</svg>\n");
        s
    }
}

/// Evaluates every query of `queries` against `db`.
///
/// Intra mode only admits database rows at least `temporal_exclusion`
/// seconds older than the query and skips queries during the first `warmup`
/// seconds of the query sequence. Recall@1 counts queries that have a
/// revisit among their admissible rows.
pub fn run_protocol(db: &DescriptorDb, queries: &DescriptorDb, proto: &EvalProtocol) -> Result<EvalReport> {
    proto.validate()?;
    if !db.is_empty() && !queries.is_empty() && db.dim != queries.dim {
        return Err(Error::ShapeMismatch(format!(
            "database descriptors have length {}, queries {}",
            db.dim, queries.dim
        )));
    }
    let intra = proto.mode == EvalMode::Intra;
    let start = queries.metas.iter().map(|m| m.timestamp()).fold(f64::INFINITY, f64::min);

    let per_query: Vec<QueryResult> = (0..queries.len())
        .into_par_iter()
        .filter_map(|qi| {
            let q = &queries.descriptors[qi];
            let qm = &queries.metas[qi];
            if !q.is_valid() || (intra && qm.timestamp() < start + proto.warmup) {
                return None;
            }
            let excl = intra.then_some(TimeExclusion { query_time: qm.timestamp(), seconds: proto.temporal_exclusion });
            let hit = retrieve_top1(db, q, excl);
            Some(hit.map(|h| {
                h.map(|(retrieved, distance)| {
                    let has_revisit = db.metas.iter().enumerate().any(|(i, m)| {
                        db.descriptors[i].is_valid()
                            && excl.map_or(true, |e| e.admits(m.timestamp()))
                            && m.pose.distance(&qm.pose) <= proto.positive_radius
                    });
                    QueryResult {
                        query: qi,
                        retrieved,
                        distance,
                        correct: db.metas[retrieved].pose.distance(&qm.pose) <= proto.positive_radius,
                        has_revisit,
                    }
                })
            }))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let revisit: Vec<(Pose, Pose)> = per_query
        .iter()
        .filter(|r| r.has_revisit)
        .map(|r| (db.metas[r.retrieved].pose, queries.metas[r.query].pose))
        .collect();
    let recall = if revisit.is_empty() { 0.0 } else { recall_at_1(&revisit, proto.positive_radius)? };
    let scored: Vec<(f64, bool)> = per_query.iter().map(|r| (r.distance, r.correct)).collect();
    let (f1, status) = if scored.is_empty() {
        (None, ReportStatus::NoQueries)
    } else {
        let f = max_f1(&scored)?;
        let status = if f.has_true_matches { ReportStatus::Ok } else { ReportStatus::NoTrueMatches };
        (Some(f), status)
    };
    if status != ReportStatus::Ok {
        log::warn!("evaluation status: {status:?}");
    }
    Ok(EvalReport {
        mode: proto.mode,
        status,
        queries_total: queries.len(),
        queries_evaluated: per_query.len(),
        queries_with_revisit: revisit.len(),
        recall_at_1: recall,
        max_f1: f1.map_or(0.0, |f| f.f1),
        f1_threshold: f1.filter(|f| f.has_true_matches).map(|f| f.threshold),
        pr: pr_curve(&scored),
        per_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Descriptor {
        Descriptor::from_raw(v)
    }

    fn meta(i: usize, t: f64, x: f64) -> DescriptorMeta {
        DescriptorMeta { id: format!("s{i}"), pose: Pose::planar(t, x, 0.0, 0.0, 0.0) }
    }

    fn random_db(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> DescriptorDb {
        let d = (0..n).map(|_| unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
        let m = (0..n).map(|i| meta(i, i as f64, i as f64 * 3.0)).collect();
        DescriptorDb::new(d, m).unwrap()
    }

    #[test]
    fn self_retrieval_and_exclusion() {
        let d = unit(vec![1.0, 2.0, 2.0]);
        let db = DescriptorDb::new(vec![d.clone()], vec![meta(0, 100.0, 0.0)]).unwrap();
        assert_eq!(retrieve_top1(&db, &d, None).unwrap(), Some((0, 0.0)));
        let excl = TimeExclusion { query_time: 100.0, seconds: 60.0 };
        assert_eq!(retrieve_top1(&db, &d, Some(excl)).unwrap(), None);
    }

    #[test]
    fn rejects_non_unit_rows() {
        let bad = Descriptor::from_stored(vec![0.5, 0.5]);
        assert!(DescriptorDb::new(vec![bad], vec![meta(0, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn top1_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let db = random_db(&mut rng, 100, 8);
        for _ in 0..20 {
            let q = unit((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let (idx, dist) = retrieve_top1(&db, &q, None).unwrap().unwrap();
            let mut best = (usize::MAX, f64::INFINITY);
            for (i, d) in db.descriptors().iter().enumerate() {
                let e = crate::aggregate::descriptor_distance(&q, d).unwrap();
                if e < best.1 {
                    best = (i, e);
                }
            }
            assert_eq!(idx, best.0);
            assert!((dist - best.1).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_pick_lowest_index() {
        let d = unit(vec![0.0, 1.0]);
        let db = DescriptorDb::new(vec![unit(vec![1.0, 0.0]), unit(vec![-1.0, 0.0])], vec![meta(0, 0.0, 0.0), meta(1, 0.0, 0.0)]).unwrap();
        assert_eq!(retrieve_top1(&db, &d, None).unwrap().unwrap().0, 0);
    }

    #[test]
    fn recall_arithmetic() {
        let p = |x| Pose::planar(0.0, x, 0.0, 0.0, 0.0);
        let r = recall_at_1(&[(p(0.0), p(1.0)), (p(0.0), p(50.0)), (p(5.0), p(0.0))], 10.0).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert!(recall_at_1(&[], 10.0).is_err());
    }

    #[test]
    fn f1_worked_example() {
        let r = [(0.1, true), (0.2, false), (0.3, true)];
        let curve = pr_curve(&r);
        let f1s: Vec<f64> = curve.iter().map(|s| s.f1).collect();
        assert!((f1s[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1s[1] - 0.5).abs() < 1e-12);
        assert!((f1s[2] - 0.8).abs() < 1e-12);
        let best = max_f1(&r).unwrap();
        assert!((best.f1 - 0.8).abs() < 1e-12);
        assert_eq!(best.threshold, 0.3);
    }

    #[test]
    fn f1_degenerate_cases() {
        assert_eq!(max_f1(&[(0.4, true)]).unwrap().f1, 1.0);
        let none = max_f1(&[(0.1, false), (0.2, false)]).unwrap();
        assert_eq!(none.f1, 0.0);
        assert!(!none.has_true_matches);
    }

    #[test]
    fn inter_self_retrieval_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let db = random_db(&mut rng, 30, 6);
        let rep = run_protocol(&db, &db, &EvalProtocol::default()).unwrap();
        assert_eq!(rep.recall_at_1, 1.0);
        assert_eq!(rep.max_f1, 1.0);
        assert_eq!(rep.status, ReportStatus::Ok);
        assert!(rep.to_json().contains("\"recall_at_1\": 1.0"));
        assert!(rep.pr_svg().starts_with("<svg"));
        let csv = rep.matches_csv(&db, &db, 50.0);
        assert_eq!(csv.lines().count(), 31);
        assert!(csv.lines().skip(1).all(|l| l.ends_with(",0,true,true")));
    }

    #[test]
    fn intra_short_sequence_has_no_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let db = random_db(&mut rng, 50, 4);
        let proto = EvalProtocol { mode: EvalMode::Intra, ..Default::default() };
        let rep = run_protocol(&db, &db, &proto).unwrap();
        assert_eq!(rep.status, ReportStatus::NoQueries);
        assert_eq!(rep.queries_evaluated, 0);
    }

    #[test]
    fn intra_only_uses_old_rows() {
        // Revisit of the start after 200 s.
        let d = |a: f64| unit(vec![a.cos(), a.sin()]);
        let descs = vec![d(0.0), d(1.0), d(2.0), d(0.05)];
        let metas = vec![meta(0, 0.0, 0.0), meta(1, 100.0, 40.0), meta(2, 150.0, 80.0), meta(3, 200.0, 2.0)];
        let db = DescriptorDb::new(descs, metas).unwrap();
        let proto = EvalProtocol { mode: EvalMode::Intra, ..Default::default() };
        let rep = run_protocol(&db, &db, &proto).unwrap();
        assert_eq!(rep.queries_evaluated, 3);
        assert_eq!(rep.queries_with_revisit, 1);
        assert_eq!(rep.recall_at_1, 1.0);
        let last = rep.per_query.iter().find(|r| r.query == 3).unwrap();
        assert_eq!(last.retrieved, 0);
    }

    proptest! {
        #[test]
        fn f1_invariant_to_monotone_maps(seed in any::<u64>(), n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r: Vec<(f64, bool)> = (0..n).map(|_| (rng.gen_range(0.0..2.0), rng.gen_bool(0.5))).collect();
            let mapped: Vec<(f64, bool)> = r.iter().map(|&(d, t)| ((3.0 * d).exp() + 1.0, t)).collect();
            prop_assert_eq!(max_f1(&r).unwrap().f1, max_f1(&mapped).unwrap().f1);
        }

        #[test]
        fn metrics_permutation_invariant(seed in any::<u64>(), n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r: Vec<(f64, bool)> = (0..n).map(|_| (rng.gen_range(0.0..2.0), rng.gen_bool(0.5))).collect();
            let mut rev = r.clone();
            rev.reverse();
            prop_assert_eq!(max_f1(&r).unwrap().f1, max_f1(&rev).unwrap().f1);
            let p: Vec<(Pose, Pose)> = (0..n).map(|_| {
                (Pose::planar(0.0, rng.gen_range(0.0..30.0), 0.0, 0.0, 0.0), Pose::planar(0.0, rng.gen_range(0.0..30.0), 0.0, 0.0, 0.0))
            }).collect();
            let mut prev = p.clone();
            prev.reverse();
            prop_assert_eq!(recall_at_1(&p, 10.0).unwrap(), recall_at_1(&prev, 10.0).unwrap());
        }
    }
}
