//! Exact nearest-neighbour search in 3D with a kd-tree.
//!
//! Results are ordered by squared Euclidean distance, ties by lower point
//! index, so they agree exactly with an all-pairs scan.
//!
//! ```
//! use pointunet::knn::KdTree;
//!
//! let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
//! let tree = KdTree::new(&pts);
//! let nn: Vec<usize> = tree.k_nearest(pts[1], 2).into_iter().map(|(_, i)| i).collect();
//! assert_eq!(nn, vec![1, 0]);
//! ```

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

pub type Point = [f64; 3];

pub fn dist2(a: Point, b: Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// `(squared distance, index)` ordered lexicographically.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Cand(f64, usize);

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const LEAF: usize = 8;

#[derive(Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug)]
pub struct KdTree {
    points: Vec<Point>,
    /// Point indices, grouped so every leaf owns a contiguous range.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Point]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &self.order[start..end];
        let spread = |a: usize| {
            let (lo, hi) = slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                (lo.min(self.points[i][a]), hi.max(self.points[i][a]))
            });
            hi - lo
        };
        let axis = (0..3).max_by(|&a, &b| spread(a).total_cmp(&spread(b))).unwrap();
        let mid = (start + end) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// The `k` nearest points to `q` as `(squared distance, index)`, closest
    /// first. Returns fewer when the tree holds fewer points.
    pub fn k_nearest(&self, q: Point, k: usize) -> Vec<(f64, usize)> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 && !self.points.is_empty() {
            self.search(0, q, k, &mut heap);
        }
        let mut out: Vec<(f64, usize)> = heap.into_iter().map(|Cand(d, i)| (d, i)).collect();
        out.sort_by(|a, b| Cand(a.0, a.1).cmp(&Cand(b.0, b.1)));
        out
    }

    pub fn nearest(&self, q: Point) -> Option<(f64, usize)> {
        self.k_nearest(q, 1).into_iter().next()
    }

    fn search(&self, node: usize, q: Point, k: usize, heap: &mut BinaryHeap<Cand>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Cand(dist2(q, self.points[i]), i);
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                // Points on the far side are at least |diff| away along `axis`.
                // Equal distances must still be visited for the index tie-break.
                if heap.len() < k || diff * diff <= heap.peek().unwrap().0 {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

/// `k` nearest neighbours of every point of a cloud, the point itself included.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    idx: Vec<usize>,
    dist2: Vec<f64>,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.idx.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    /// Row-major `N x K` neighbour indices.
    pub fn indices(&self) -> &[usize] {
        &self.idx
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }

    pub fn distances2(&self, i: usize) -> &[f64] {
        &self.dist2[i * self.k..(i + 1) * self.k]
    }
}

pub fn build_knn(points: &[Point], k: usize) -> Result<NeighborIndex> {
    if k == 0 || points.len() < k {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= K <= N for neighbour search, got K = {k}, N = {}",
            points.len()
        )));
    }
    let tree = KdTree::new(points);
    let mut idx = Vec::with_capacity(points.len() * k);
    let mut d2 = Vec::with_capacity(points.len() * k);
    for &p in points {
        for (d, i) in tree.k_nearest(p, k) {
            idx.push(i);
            d2.push(d);
        }
    }
    Ok(NeighborIndex { k, idx, dist2: d2 })
}
