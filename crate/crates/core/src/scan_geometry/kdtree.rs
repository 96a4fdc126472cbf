//! Exact k-d tree over 3-D points.
//!
//! Neighbors are ordered by `(squared distance, index)`, so equidistant points
//! resolve to the lower index exactly as an exhaustive sort would.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    axis: Vec<u8>,
}

impl KdTree {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        let n = points.len();
        let mut tree = KdTree {
            points,
            order: (0..n).collect(),
            axis: vec![0; n],
        };
        tree.build(0, n);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> [f64; 3] {
        self.points[index]
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= LEAF_SIZE {
            return;
        }
        let mut axis = 0;
        let mut best_spread = f64::NEG_INFINITY;
        for a in 0..3 {
            let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[lo..hi] {
                let c = self.points[i][a];
                min = min.min(c);
                max = max.max(c);
            }
            if max - min > best_spread {
                best_spread = max - min;
                axis = a;
            }
        }
        let mid = lo + (hi - lo) / 2;
        let points = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        self.axis[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    fn dist2(&self, index: usize, q: &[f64; 3]) -> f64 {
        let p = &self.points[index];
        let (dx, dy, dz) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
        dx * dx + dy * dy + dz * dz
    }

    /// Indices of the `k` nearest points in rank order (all points when `k >= len`).
    pub fn knn(&self, query: &[f64; 3], k: usize) -> Vec<usize> {
        self.knn_with_dist2(query, k)
            .into_iter()
            .map(|(i, _)| i)
            .collect()
    }

    pub fn knn_with_dist2(&self, query: &[f64; 3], k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, self.points.len(), query, k, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.dist2)).collect()
    }

    /// Nearest point and its squared distance; `None` on an empty tree.
    pub fn nearest(&self, query: &[f64; 3]) -> Option<(usize, f64)> {
        self.knn_with_dist2(query, 1).into_iter().next()
    }

    fn offer(&self, index: usize, query: &[f64; 3], k: usize, heap: &mut BinaryHeap<Candidate>) {
        let cand = Candidate {
            dist2: self.dist2(index, query),
            index,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if let Some(worst) = heap.peek() {
            if cand < *worst {
                heap.pop();
                heap.push(cand);
            }
        }
    }

    fn search(
        &self,
        lo: usize,
        hi: usize,
        query: &[f64; 3],
        k: usize,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                self.offer(i, query, k, heap);
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let split = self.order[mid];
        let axis = self.axis[mid] as usize;
        self.offer(split, query, k, heap);

        let diff = query[axis] - self.points[split][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, query, k, heap);
        let must_visit = heap.len() < k || heap.peek().is_some_and(|w| diff * diff <= w.dist2);
        if must_visit {
            self.search(far.0, far.1, query, k, heap);
        }
    }
}
