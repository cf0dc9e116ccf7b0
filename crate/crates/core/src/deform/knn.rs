//! Exact k-nearest-neighbour queries over canonical positions.
//!
//! Ties in distance are broken by the lower index so results are
//! deterministic and match a brute-force sort exactly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::math::Vec3;

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

#[derive(Debug)]
enum Node {
    Leaf(Vec<usize>),
    Split {
        axis: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// Static kd-tree over a point set.
#[derive(Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    root: Node,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let root = build(points, &mut idx);
        KdTree {
            points: points.to_vec(),
            root,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest points to `query`, ascending by (distance, index),
    /// skipping `exclude`.
    pub fn nearest(&self, query: &Vec3, k: usize, exclude: Option<usize>) -> Vec<usize> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(&self.root, query, k, exclude, &mut heap);
        let mut out = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| c.index).collect()
    }

    fn search(
        &self,
        node: &Node,
        q: &Vec3,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match node {
            Node::Leaf(items) => {
                for &i in items {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Candidate {
                        dist2: (self.points[i] - q).norm_squared(),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, k, exclude, heap);
                let plane = diff * diff;
                if heap.len() < k || plane <= heap.peek().map_or(f64::INFINITY, |c| c.dist2) {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }
}

fn build(points: &[Vec3], idx: &mut [usize]) -> Node {
    if idx.len() <= LEAF_SIZE {
        return Node::Leaf(idx.to_vec());
    }
    let mut lo = points[idx[0]];
    let mut hi = lo;
    for &i in idx.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    idx.sort_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let mid = idx.len() / 2;
    let value = points[idx[mid - 1]][axis];
    let (l, r) = idx.split_at_mut(mid);
    Node::Split {
        axis,
        value,
        left: Box::new(build(points, l)),
        right: Box::new(build(points, r)),
    }
}

/// For every point of the dynamic set, its `k` nearest other members
/// (indices into `positions`). `k >= n` returns all other members.
pub fn knn_dynamic(positions: &[Vec3], query: usize, k: usize) -> Vec<usize> {
    KdTree::new(positions).nearest(&positions[query], k, Some(query))
}

/// Neighbour lists for every point at once, sharing one tree.
pub fn knn_all(positions: &[Vec3], k: usize) -> Vec<Vec<usize>> {
    let tree = KdTree::new(positions);
    (0..positions.len())
        .map(|i| tree.nearest(&positions[i], k, Some(i)))
        .collect()
}
