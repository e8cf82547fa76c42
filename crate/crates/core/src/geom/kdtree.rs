//! Static 3-d tree with exact, index-tie-broken k-nearest-neighbor queries.

use crate::error::{bail, Result};
use crate::scalar::Real;

use super::{sq_dist, PointCloud};

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum Node<T> {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: T, left: usize, right: usize },
}

/// Immutable spatial index over a point set. Results are identical to an
/// exhaustive scan: neighbors ordered by `(squared distance, index)`.
#[derive(Clone, Debug)]
pub struct KdTree<T> {
    points: Vec<[T; 3]>,
    ids: Vec<usize>,
    nodes: Vec<Node<T>>,
}

/// Flat `queries × k` neighbor table.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors<T> {
    pub k: usize,
    pub indices: Vec<usize>,
    pub sq_distances: Vec<T>,
}

impl<T: Real> Neighbors<T> {
    pub fn row(&self, q: usize) -> (&[usize], &[T]) {
        let r = q * self.k..(q + 1) * self.k;
        (&self.indices[r.clone()], &self.sq_distances[r])
    }
}

impl<T: Real> KdTree<T> {
    pub fn new(points: &[[T; 3]]) -> Self {
        let mut items: Vec<([T; 3], usize)> = points.iter().copied().zip(0..).collect();
        let mut nodes = Vec::new();
        if !items.is_empty() {
            build(&mut items, 0, &mut nodes);
        }
        let (points, ids) = items.into_iter().unzip();
        KdTree { points, ids, nodes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest points to `query`, nearest first.
    pub fn nearest_k(&self, query: &[T; 3], k: usize, out: &mut Vec<(T, usize)>) {
        out.clear();
        if k == 0 || self.nodes.is_empty() {
            return;
        }
        self.search_knn(0, query, k, out);
    }

    pub fn nearest(&self, query: &[T; 3]) -> Option<(usize, T)> {
        let mut out = Vec::with_capacity(1);
        self.nearest_k(query, 1, &mut out);
        out.first().map(|&(d, i)| (i, d))
    }

    pub fn knn(&self, queries: &[[T; 3]], k: usize) -> Result<Neighbors<T>> {
        if k == 0 {
            bail!(Validation, "k must be at least 1");
        }
        if self.len() < k {
            bail!(Size, "k = {k} exceeds reference size {}", self.len());
        }
        let mut indices = Vec::with_capacity(queries.len() * k);
        let mut sq_distances = Vec::with_capacity(queries.len() * k);
        let mut buf = Vec::with_capacity(k + 1);
        for q in queries {
            self.nearest_k(q, k, &mut buf);
            for &(d, i) in &buf {
                indices.push(i);
                sq_distances.push(d);
            }
        }
        Ok(Neighbors {
            k,
            indices,
            sq_distances,
        })
    }

    /// All indices with squared distance `<= radius²`, ascending by index.
    pub fn within_radius(&self, query: &[T; 3], radius: T, out: &mut Vec<usize>) {
        out.clear();
        if self.nodes.is_empty() {
            return;
        }
        let r2 = radius * radius;
        self.search_radius(0, query, r2, out);
        out.sort_unstable();
    }

    fn search_knn(&self, node: usize, q: &[T; 3], k: usize, best: &mut Vec<(T, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let cand = (sq_dist(q, &self.points[slot]), self.ids[slot]);
                    if best.len() < k || less(&cand, &best[best.len() - 1]) {
                        let pos = best.partition_point(|b| less(b, &cand));
                        best.insert(pos, cand);
                        if best.len() > k {
                            best.pop();
                        }
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff <= T::zero() { (left, right) } else { (right, left) };
                self.search_knn(near, q, k, best);
                if best.len() < k || diff * diff <= best[best.len() - 1].0 {
                    self.search_knn(far, q, k, best);
                }
            }
        }
    }

    fn search_radius(&self, node: usize, q: &[T; 3], r2: T, out: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    if sq_dist(q, &self.points[slot]) <= r2 {
                        out.push(self.ids[slot]);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff <= T::zero() { (left, right) } else { (right, left) };
                self.search_radius(near, q, r2, out);
                if diff * diff <= r2 {
                    self.search_radius(far, q, r2, out);
                }
            }
        }
    }
}

#[inline]
fn less<T: Real>(a: &(T, usize), b: &(T, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Builds the subtree over `items` (a window of the global array starting at
/// `offset`) and returns its node id.
fn build<T: Real>(items: &mut [([T; 3], usize)], offset: usize, nodes: &mut Vec<Node<T>>) -> usize {
    let id = nodes.len();
    if items.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + items.len(),
        });
        return id;
    }
    let mut lo = items[0].0;
    let mut hi = items[0].0;
    for (p, _) in items.iter() {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let dim = (0..3)
        .max_by(|&a, &b| {
            (hi[a] - lo[a])
                .partial_cmp(&(hi[b] - lo[b]))
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .unwrap_or(0);
    if hi[dim] == lo[dim] {
        // all coincident
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + items.len(),
        });
        return id;
    }
    let mid = items.len() / 2;
    items.select_nth_unstable_by(mid, |a, b| {
        a.0[dim]
            .partial_cmp(&b.0[dim])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let value = items[mid].0[dim];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (l, r) = items.split_at_mut(mid);
    let left = build(l, offset, nodes);
    let right = build(r, offset + mid, nodes);
    nodes[id] = Node::Split {
        dim,
        value,
        left,
        right,
    };
    id
}

/// k nearest reference points for each query, via a temporary index.
pub fn knn<T: Real>(queries: &[[T; 3]], reference: &PointCloud<T>, k: usize) -> Result<Neighbors<T>> {
    if reference.len() < k {
        bail!(Size, "k = {k} exceeds reference size {}", reference.len());
    }
    KdTree::new(reference.positions()).knn(queries, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(queries: &[[f64; 3]], refs: &[[f64; 3]], k: usize) -> Neighbors<f64> {
        let mut indices = Vec::new();
        let mut sq_distances = Vec::new();
        for q in queries {
            let mut all: Vec<(f64, usize)> = refs.iter().enumerate().map(|(i, p)| (sq_dist(q, p), i)).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            for &(d, i) in &all[..k] {
                indices.push(i);
                sq_distances.push(d);
            }
        }
        Neighbors {
            k,
            indices,
            sq_distances,
        }
    }

    #[test]
    fn small_example_orders_by_distance() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]]).unwrap();
        let nn = knn(&[[0.9, 0.0, 0.0]], &cloud, 2).unwrap();
        assert_eq!(nn.indices, vec![1, 0]);
        let nn = knn(&[[5.0, 0.0, 0.0]], &cloud, 1).unwrap();
        assert_eq!((nn.indices[0], nn.sq_distances[0]), (2, 0.0));
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let pts = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]];
        let nn = knn(&[[0.0, 0.0, 0.0]], &PointCloud::new(pts).unwrap(), 3).unwrap();
        assert_eq!(nn.indices, vec![3, 0, 1]);
    }

    #[test]
    fn too_few_reference_points_is_a_size_error() {
        let cloud = PointCloud::new(vec![[0.0f64; 3]]).unwrap();
        assert!(matches!(knn(&[[0.0; 3]], &cloud, 2), Err(crate::Error::Size(_))));
    }

    #[test]
    fn matches_exhaustive_search_with_many_duplicates() {
        // grid coordinates produce lots of exact distance ties
        let refs: Vec<[f64; 3]> = (0..300)
            .map(|i| [(i % 5) as f64, ((i / 5) % 4) as f64, (i % 3) as f64])
            .collect();
        let queries: Vec<[f64; 3]> = (0..40).map(|i| [(i % 7) as f64 * 0.5, 1.0, (i % 2) as f64]).collect();
        let tree = KdTree::new(&refs);
        assert_eq!(tree.knn(&queries, 16).unwrap(), brute(&queries, &refs, 16));
    }

    proptest! {
        #[test]
        fn knn_equals_exhaustive(
            refs in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 16..512),
            queries in prop::collection::vec(prop::array::uniform3(-2.5f64..2.5), 1..20),
            k in 1usize..16,
        ) {
            let tree = KdTree::new(&refs);
            prop_assert_eq!(tree.knn(&queries, k).unwrap(), brute(&queries, &refs, k));
        }

        #[test]
        fn radius_query_equals_exhaustive(
            refs in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..300),
            q in prop::array::uniform3(-1.0f64..1.0),
            r in 0.05f64..1.0,
        ) {
            let tree = KdTree::new(&refs);
            let mut got = Vec::new();
            tree.within_radius(&q, r, &mut got);
            let want: Vec<usize> = (0..refs.len()).filter(|&i| sq_dist(&q, &refs[i]) <= r * r).collect();
            prop_assert_eq!(got, want);
        }
    }
}
