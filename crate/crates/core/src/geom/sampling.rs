//! Centroid sampling and neighborhood grouping for set abstraction.

use crate::error::{bail, Result};
use crate::scalar::Real;

use super::{sq_dist, KdTree};

/// Greedy farthest point sampling from `start`; ties go to the lowest index.
pub fn farthest_point_sampling<T: Real>(positions: &[[T; 3]], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if m > n {
        bail!(Size, "cannot sample {m} centroids from {n} points");
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if start >= n {
        bail!(Validation, "start index {start} out of range for {n} points");
    }
    let mut min_d = vec![T::infinity(); n];
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut current = start;
    for _ in 0..m {
        chosen.push(current);
        taken[current] = true;
        let c = positions[current];
        let mut best = usize::MAX;
        let mut best_d = -T::one();
        for (i, p) in positions.iter().enumerate() {
            let d = sq_dist(&c, p);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(chosen)
}

/// Groups up to `max_samples` points within `radius` of each centroid,
/// lowest index first, padding with the first hit. A centroid with no point in
/// range gets its nearest point repeated. Output is flat `centroids × max_samples`.
pub fn ball_query<T: Real>(
    centroids: &[[T; 3]],
    tree: &KdTree<T>,
    radius: T,
    max_samples: usize,
) -> Result<Vec<usize>> {
    if tree.is_empty() {
        bail!(Size, "ball query over an empty cloud");
    }
    if !(radius > T::zero()) {
        bail!(Validation, "ball query radius must be positive");
    }
    if max_samples == 0 {
        bail!(Validation, "max_samples must be at least 1");
    }
    let mut out = Vec::with_capacity(centroids.len() * max_samples);
    let mut hits = Vec::new();
    for c in centroids {
        tree.within_radius(c, radius, &mut hits);
        let pad = match hits.first() {
            Some(&first) => first,
            None => tree.nearest(c).map(|(i, _)| i).unwrap_or(0),
        };
        let take = hits.len().min(max_samples);
        out.extend_from_slice(&hits[..take]);
        out.extend(std::iter::repeat(pad).take(max_samples - take));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Per-step exhaustive oracle: recompute every min distance from scratch.
    fn fps_oracle(pts: &[[f64; 3]], m: usize, start: usize) -> Vec<usize> {
        let mut sel = vec![start];
        while sel.len() < m {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for i in 0..pts.len() {
                if sel.contains(&i) {
                    continue;
                }
                let d = sel.iter().map(|&s| sq_dist(&pts[i], &pts[s])).fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            sel.push(best.1);
        }
        sel
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
    }

    #[test]
    fn collinear_picks_endpoints() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(farthest_point_sampling(&pts, 2, 0).unwrap(), vec![0, 2]);
        assert_eq!(farthest_point_sampling(&pts, 3, 0).unwrap(), vec![0, 2, 1]);
        assert!(matches!(farthest_point_sampling(&pts, 4, 0), Err(crate::Error::Size(_))));
    }

    #[test]
    fn fps_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let pts = random_points(&mut rng, 50);
            let start = trial % 50;
            assert_eq!(farthest_point_sampling(&pts, 8, start).unwrap(), fps_oracle(&pts, 8, start));
        }
    }

    #[test]
    fn fps_spreads_better_than_random_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let min_pair = |pts: &[[f64; 3]], idx: &[usize]| {
            let mut m = f64::INFINITY;
            for a in 0..idx.len() {
                for b in a + 1..idx.len() {
                    m = m.min(sq_dist(&pts[idx[a]], &pts[idx[b]]));
                }
            }
            m
        };
        let pts = random_points(&mut rng, 200);
        let sel = farthest_point_sampling(&pts, 12, 0).unwrap();
        let mut distinct = sel.clone();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 12);
        let fps_spread = min_pair(&pts, &sel);
        for _ in 0..100 {
            let idx = rand::seq::index::sample(&mut rng, 200, 12).into_vec();
            assert!(fps_spread >= min_pair(&pts, &idx));
        }
    }

    #[test]
    fn ball_query_pads_with_first_hit() {
        let pts = [[5.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.2, 0.0]];
        let tree = KdTree::new(&pts);
        let g = ball_query(&[[0.0, 0.0, 0.0]], &tree, 0.5, 4).unwrap();
        assert_eq!(g, vec![1, 2, 1, 1]);
    }

    #[test]
    fn ball_query_falls_back_to_nearest() {
        let pts = [[5.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let tree = KdTree::new(&pts);
        assert_eq!(ball_query(&[[0.0; 3]], &tree, 0.5, 3).unwrap(), vec![1, 1, 1]);
        let empty = KdTree::<f64>::new(&[]);
        assert!(matches!(ball_query(&[[0.0; 3]], &empty, 0.5, 3), Err(crate::Error::Size(_))));
    }

    #[test]
    fn ball_query_members_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = random_points(&mut rng, 400);
        let cents = random_points(&mut rng, 30);
        let tree = KdTree::new(&pts);
        let r = 0.2;
        let s = 64;
        let g = ball_query(&cents, &tree, r, s).unwrap();
        for (ci, c) in cents.iter().enumerate() {
            let want: Vec<usize> = (0..pts.len()).filter(|&i| sq_dist(c, &pts[i]) <= r * r).take(s).collect();
            let row = &g[ci * s..(ci + 1) * s];
            if want.is_empty() {
                continue;
            }
            assert_eq!(&row[..want.len()], &want[..]);
            assert!(row[want.len()..].iter().all(|&i| i == want[0]));
        }
    }
}
