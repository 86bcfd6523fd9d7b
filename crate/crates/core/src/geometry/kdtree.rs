//! Static 3-d tree over a borrowed point set.
//!
//! Every query orders candidates by `(squared distance, index)` so results are
//! identical to an exhaustive sort, including ties.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Candidate {
    pub d2: f64,
    pub index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

#[inline]
pub(crate) fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone)]
struct Node {
    lo: usize,
    hi: usize,
    axis: usize,
    split: f64,
    left: Option<usize>,
    right: Option<usize>,
}

/// Balanced k-d tree. Points are copied into tree order; results report the
/// caller's original indices.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build(points, &mut order, 0, points.len(), &mut nodes);
        }
        let tree_points = order.iter().map(|&i| points[i]).collect();
        KdTree {
            points: tree_points,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest points to `query`, ascending by distance then index.
    /// Returns fewer than `k` entries only when the tree holds fewer points.
    pub fn nearest(&self, query: &Vec3, k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, query, k, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.d2)).collect()
    }

    /// Nearest single point as `(index, squared distance)`.
    pub fn nearest_one(&self, query: &Vec3) -> Option<(usize, f64)> {
        self.nearest(query, 1).into_iter().next()
    }

    /// All points strictly closer than `radius`, ascending by distance then index.
    pub fn within(&self, query: &Vec3, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() && radius > 0.0 {
            self.radius_rec(0, query, radius * radius, &mut out);
        }
        out.sort();
        out.into_iter().map(|c| (c.index, c.d2)).collect()
    }

    fn knn_rec(&self, node: usize, q: &Vec3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        let n = &self.nodes[node];
        if n.left.is_none() {
            for slot in n.lo..n.hi {
                let cand = Candidate {
                    d2: dist2(&self.points[slot], q),
                    index: self.order[slot],
                };
                if heap.len() < k {
                    heap.push(cand);
                } else if cand < *heap.peek().expect("heap is full") {
                    heap.pop();
                    heap.push(cand);
                }
            }
            return;
        }
        let diff = q[n.axis] - n.split;
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.knn_rec(c, q, k, heap);
        }
        if let Some(c) = far {
            // Equal distances must still be explored: a farther subtree may
            // hold a tie with a lower index.
            if heap.len() < k || diff * diff <= heap.peek().map_or(f64::INFINITY, |c| c.d2) {
                self.knn_rec(c, q, k, heap);
            }
        }
    }

    fn radius_rec(&self, node: usize, q: &Vec3, r2: f64, out: &mut Vec<Candidate>) {
        let n = &self.nodes[node];
        if n.left.is_none() {
            for slot in n.lo..n.hi {
                let d2 = dist2(&self.points[slot], q);
                if d2 < r2 {
                    out.push(Candidate {
                        d2,
                        index: self.order[slot],
                    });
                }
            }
            return;
        }
        let diff = q[n.axis] - n.split;
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.radius_rec(c, q, r2, out);
        }
        if let Some(c) = far {
            if diff * diff < r2 {
                self.radius_rec(c, q, r2, out);
            }
        }
    }
}

fn build(points: &[Vec3], order: &mut [usize], lo: usize, hi: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    nodes.push(Node {
        lo,
        hi,
        axis: 0,
        split: 0.0,
        left: None,
        right: None,
    });
    if hi - lo <= LEAF_SIZE {
        return id;
    }
    // Split on the axis of widest spread.
    let mut min = Vec3::repeat(f64::INFINITY);
    let mut max = Vec3::repeat(f64::NEG_INFINITY);
    for &i in &order[lo..hi] {
        min = min.inf(&points[i]);
        max = max.sup(&points[i]);
    }
    let axis = (max - min).imax();
    let mid = (lo + hi) / 2;
    order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis])
    });
    let split = points[order[mid]][axis];
    // Left holds values <= split, right holds values >= split; the query
    // descends by `diff < 0` and the far side test covers equality.
    let left = build(points, order, lo, mid, nodes);
    let right = build(points, order, mid, hi, nodes);
    let node = &mut nodes[id];
    node.axis = axis;
    node.split = split;
    node.left = Some(left);
    node.right = Some(right);
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Vec3], q: &Vec3, k: usize) -> Vec<usize> {
        let mut c: Vec<Candidate> = points
            .iter()
            .enumerate()
            .map(|(index, p)| Candidate {
                d2: dist2(p, q),
                index,
            })
            .collect();
        c.sort();
        c.into_iter().take(k).map(|c| c.index).collect()
    }

    #[test]
    fn matches_brute_force_on_lattice_with_ties() {
        // Integer lattice: lots of exact distance ties.
        let mut pts = Vec::new();
        for x in 0..6 {
            for y in 0..6 {
                for z in 0..4 {
                    pts.push(Vec3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        let tree = KdTree::new(&pts);
        for q in [Vec3::new(2.5, 2.5, 1.5), Vec3::new(0.0, 0.0, 0.0), Vec3::new(3.0, 2.0, 1.0)] {
            for k in [1, 5, 7, 27, pts.len()] {
                let got: Vec<usize> = tree.nearest(&q, k).into_iter().map(|x| x.0).collect();
                assert_eq!(got, brute(&pts, &q, k), "k={k} q={q:?}");
            }
        }
    }

    #[test]
    fn radius_query_is_strict() {
        let pts = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.5, 0.0, 0.0)];
        let tree = KdTree::new(&pts);
        let got: Vec<usize> = tree.within(&Vec3::zeros(), 1.0).into_iter().map(|x| x.0).collect();
        assert_eq!(got, vec![0, 2]);
    }

    #[test]
    fn random_radius_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..500)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let tree = KdTree::new(&pts);
        for _ in 0..20 {
            let q = Vec3::new(rng.random(), rng.random(), rng.random());
            let mut want: Vec<usize> = (0..pts.len()).filter(|&i| dist2(&pts[i], &q) < 0.04).collect();
            want.sort_by(|&a, &b| dist2(&pts[a], &q).total_cmp(&dist2(&pts[b], &q)).then(a.cmp(&b)));
            let got: Vec<usize> = tree.within(&q, 0.2).into_iter().map(|x| x.0).collect();
            assert_eq!(got, want);
        }
    }
}
