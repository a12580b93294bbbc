//! Static 3-D KD-tree with exact k-nearest-neighbor queries.
//!
//! Ties in distance are resolved by the point's index in the build slice, so
//! results are identical to a stable brute-force sort on `(d^2, index)`.

use nalgebra::Vector3;

#[derive(Debug, Clone, Default)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    // implicit balanced layout: order[mid] is the node of range [lo, hi)
    order: Vec<usize>,
    axis: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Neighbor {
    fn key_lt(&self, other: &Neighbor) -> bool {
        self.dist2 < other.dist2 || (self.dist2 == other.dist2 && self.index < other.index)
    }
}

impl KdTree {
    pub fn build(points: Vec<Vector3<f64>>) -> Self {
        let n = points.len();
        let mut tree = Self {
            order: (0..n).collect(),
            axis: vec![0; n],
            points,
        };
        tree.build_range(0, n);
        tree
    }

    fn build_range(&mut self, lo: usize, hi: usize) {
        if hi <= lo + 1 {
            return;
        }
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[lo..hi] {
            min = min.inf(&self.points[i]);
            max = max.sup(&self.points[i]);
        }
        let axis = (max - min).imax();
        let mid = (lo + hi) / 2;
        let pts = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        self.axis[mid] = axis as u8;
        self.build_range(lo, mid);
        self.build_range(mid + 1, hi);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Vector3<f64> {
        &self.points[index]
    }

    /// The `k` nearest points, ascending by distance.
    pub fn knn(&self, q: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        let mut best = Vec::with_capacity(k + 1);
        if k > 0 {
            self.search(0, self.points.len(), q, k, &mut best);
        }
        best
    }

    pub fn nearest(&self, q: &Vector3<f64>) -> Option<Neighbor> {
        self.knn(q, 1).into_iter().next()
    }

    fn offer(best: &mut Vec<Neighbor>, k: usize, cand: Neighbor) {
        if best.len() == k && !cand.key_lt(&best[k - 1]) {
            return;
        }
        let pos = best.partition_point(|b| b.key_lt(&cand));
        best.insert(pos, cand);
        best.truncate(k);
    }

    fn search(&self, lo: usize, hi: usize, q: &Vector3<f64>, k: usize, best: &mut Vec<Neighbor>) {
        if hi <= lo {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        Self::offer(
            best,
            k,
            Neighbor {
                index: idx,
                dist2: (p - q).norm_squared(),
            },
        );
        if hi == lo + 1 {
            return;
        }
        let axis = self.axis[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, k, best);
        // equal-distance candidates on the far side may still win on index
        if best.len() < k || diff * diff <= best[k - 1].dist2 {
            self.search(far.0, far.1, q, k, best);
        }
    }
}
