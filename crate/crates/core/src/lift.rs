//! Lifting image features onto scene points: the dense cloud of unprojected
//! feature pixels, and k-NN aggregation into the sparse cloud.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geom::{unproject_pixels, FeatureMatrix, KdTree, Neighbors, PointCloud, RgbdFrame};
use crate::nn::{GroupReduce, Mode, ParamStore, SharedMlp, Tape, Var};
use crate::Real;

pub const PREFIX: &str = "lift";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Sum,
    Max,
    Mean,
}

impl From<Pooling> for GroupReduce {
    fn from(p: Pooling) -> Self {
        match p {
            Pooling::Sum => GroupReduce::Sum,
            Pooling::Max => GroupReduce::Max,
            Pooling::Mean => GroupReduce::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub k: usize,
    pub mlp_channels: Vec<usize>,
    pub pooling: Pooling,
    pub use_mlp: bool,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            k: 3,
            mlp_channels: vec![128, 64],
            pooling: Pooling::Sum,
            use_mlp: true,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            bail!(Validation, "aggregation k must be at least 1");
        }
        if self.use_mlp && (self.mlp_channels.is_empty() || self.mlp_channels.contains(&0)) {
            bail!(Validation, "aggregation MLP channels must be non-empty and positive");
        }
        Ok(())
    }
}

/// `(xi − xj, ‖xi − xj‖²)`.
pub fn distance_feature<T: Real>(xi: [T; 3], xj: [T; 3]) -> [T; 4] {
    let d = [xi[0] - xj[0], xi[1] - xj[1], xi[2] - xj[2]];
    [d[0], d[1], d[2], d[0] * d[0] + d[1] * d[1] + d[2] * d[2]]
}

/// Sparse points paired with their lifted features.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPointCloud<T> {
    pub base: PointCloud<T>,
    pub lifted: FeatureMatrix<T>,
}

impl<T: Real> AugmentedPointCloud<T> {
    pub fn new(base: PointCloud<T>, lifted: FeatureMatrix<T>) -> Result<Self> {
        if lifted.rows() != base.len() {
            bail!(Shape, "{} lifted rows for {} points", lifted.rows(), base.len());
        }
        Ok(AugmentedPointCloud { base, lifted })
    }
}

/// Learned k-NN feature aggregation.
#[derive(Clone, Debug)]
pub struct Aggregator {
    config: AggregatorConfig,
    feature_dim: usize,
    mlp: Option<SharedMlp>,
}

impl Aggregator {
    pub fn new<T: Real, R: Rng>(
        config: AggregatorConfig,
        feature_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mlp = config.use_mlp.then(|| {
            SharedMlp::new(store, &format!("{PREFIX}.mlp"), feature_dim + 4, &config.mlp_channels, false, false, rng)
        });
        Ok(Aggregator {
            config,
            feature_dim,
            mlp,
        })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    pub fn mlp(&self) -> Option<&SharedMlp> {
        self.mlp.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.mlp.as_ref().map_or(self.feature_dim + 4, |m| m.out_channels())
    }

    /// k nearest dense points of every sparse point.
    pub fn neighbors<T: Real>(&self, sparse: &[[T; 3]], dense: &[[T; 3]]) -> Result<Neighbors<T>> {
        if dense.len() < self.config.k {
            bail!(Size, "dense cloud has {} points, aggregation needs k = {}", dense.len(), self.config.k);
        }
        KdTree::new(dense).knn(sparse, self.config.k)
    }

    /// Differentiable aggregation. `dense_features` is `[dense.len(), feature_dim]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        sparse: &[[T; 3]],
        dense: &[[T; 3]],
        dense_features: Var,
        neighbors: &Neighbors<T>,
    ) -> Result<Var> {
        let fs = tape.shape(dense_features);
        if fs != [dense.len(), self.feature_dim] {
            bail!(Shape, "dense features {fs:?}, expected [{}, {}]", dense.len(), self.feature_dim);
        }
        let k = self.config.k;
        if neighbors.k != k || neighbors.indices.len() != sparse.len() * k {
            bail!(Shape, "neighbor table does not match {} sparse points with k = {k}", sparse.len());
        }
        let gathered = tape.gather_rows(dense_features, neighbors.indices.clone())?;
        let mut dist = Vec::with_capacity(sparse.len() * k * 4);
        for (q, xi) in sparse.iter().enumerate() {
            for &j in neighbors.row(q).0 {
                dist.extend(distance_feature(*xi, dense[j]));
            }
        }
        let dist = tape.constant(vec![sparse.len() * k, 4], dist)?;
        let mut h = tape.concat(&[gathered, dist], 1)?;
        if let Some(mlp) = &self.mlp {
            h = mlp.forward(tape, store, h, Mode::Eval)?;
        }
        tape.reduce_groups(h, k, self.config.pooling.into())
    }
}

/// Non-differentiable convenience wrapper around [`Aggregator::forward`].
pub fn aggregate<T: Real>(
    aggregator: &Aggregator,
    store: &ParamStore<T>,
    sparse: &PointCloud<T>,
    dense: &PointCloud<T>,
) -> Result<AugmentedPointCloud<T>> {
    let Some(features) = dense.features() else {
        bail!(Validation, "dense cloud carries no features");
    };
    let nb = aggregator.neighbors(sparse.positions(), dense.positions())?;
    let mut tape = Tape::new();
    let f = tape.constant(vec![dense.len(), features.channels()], features.data().to_vec())?;
    let h = aggregator.forward(&mut tape, store, sparse.positions(), dense.positions(), f, &nb)?;
    let (_, data) = tape.into_value(h);
    AugmentedPointCloud::new(sparse.clone(), FeatureMatrix::new(aggregator.out_channels(), data)?)
}

/// Dense positions plus, for each point, `(frame slot, pixel)` it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSamples<T> {
    pub positions: Vec<[T; 3]>,
    pub sources: Vec<(usize, usize)>,
}

impl<T: Real> DenseSamples<T> {
    /// Rows into a stacked `[frames · pixels, c]` feature table.
    pub fn rows(&self, pixels_per_frame: usize) -> Vec<usize> {
        self.sources.iter().map(|&(f, p)| f * pixels_per_frame + p).collect()
    }
}

/// Unprojects up to `n_rgb` pixels of each frame and concatenates the results.
pub fn sample_dense<T: Real, R: Rng + ?Sized>(frames: &[&RgbdFrame<T>], n_rgb: usize, rng: &mut R) -> Result<DenseSamples<T>> {
    let mut positions = Vec::new();
    let mut sources = Vec::new();
    for (slot, frame) in frames.iter().enumerate() {
        let u = unproject_pixels(frame, n_rgb, rng)?;
        positions.extend(u.positions);
        sources.extend(u.pixels.into_iter().map(|p| (slot, p)));
    }
    if positions.is_empty() {
        bail!(Validation, "selected frames contain no valid depth");
    }
    Ok(DenseSamples { positions, sources })
}

/// The dense feature cloud of the selected frames.
pub fn build_dense<T: Real, R: Rng + ?Sized>(
    frames: &[&RgbdFrame<T>],
    feature_maps: &[&FeatureMatrix<T>],
    n_rgb: usize,
    rng: &mut R,
) -> Result<PointCloud<T>> {
    if frames.len() != feature_maps.len() {
        bail!(Shape, "{} feature maps for {} frames", feature_maps.len(), frames.len());
    }
    for (f, m) in frames.iter().zip(feature_maps) {
        if m.rows() != f.intrinsics.pixel_count() {
            bail!(Shape, "feature map of frame {} has {} rows", f.frame_id, m.rows());
        }
    }
    let samples = sample_dense(frames, n_rgb, rng)?;
    let c = feature_maps.first().map_or(0, |m| m.channels());
    if feature_maps.iter().any(|m| m.channels() != c) {
        bail!(Shape, "feature maps disagree on channel count");
    }
    let mut data = Vec::with_capacity(samples.sources.len() * c);
    for &(slot, p) in &samples.sources {
        data.extend_from_slice(feature_maps[slot].row(p));
    }
    PointCloud::new(samples.positions)?.with_features(FeatureMatrix::new(c, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{unproject, CameraIntrinsics, Pose};
    use crate::nn::gradcheck::{check_gradients, projection, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize, c: usize) -> PointCloud<f64> {
        let pos = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let f = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        PointCloud::new(pos).unwrap().with_features(FeatureMatrix::new(c, f).unwrap()).unwrap()
    }

    fn plain(k: usize, pooling: Pooling) -> AggregatorConfig {
        AggregatorConfig {
            k,
            mlp_channels: vec![],
            pooling,
            use_mlp: false,
        }
    }

    #[test]
    fn distance_feature_examples() {
        assert_eq!(distance_feature([1.0, 1.0, 1.0], [1.0, 1.0, 1.0]), [0.0; 4]);
        assert_eq!(distance_feature([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]), [-1.0, 0.0, 0.0, 1.0]);
        assert_eq!(distance_feature([1.0, 2.0, 2.0], [0.0, 0.0, 0.0]), [1.0, 2.0, 2.0, 9.0]);
    }

    #[test]
    fn self_neighbor_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dense = cloud(&mut rng, 40, 5);
        let mut store = ParamStore::new();
        let agg = Aggregator::new(plain(1, Pooling::Sum), 5, &mut store, &mut rng).unwrap();
        let sparse = PointCloud::new(dense.positions().to_vec()).unwrap();
        let out = aggregate(&agg, &store, &sparse, &dense).unwrap();
        for i in 0..40 {
            let row = out.lifted.row(i);
            assert_eq!(&row[..5], dense.features().unwrap().row(i));
            assert_eq!(&row[5..], &[0.0; 4]);
        }
    }

    #[test]
    fn identity_mlp_sum_matches_hand_evaluation() {
        let dense_pos = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0], [4.0, 4.0, 4.0]];
        let feats = vec![1.0, -1.0, 2.0, 0.5, 3.0, 3.0, -2.0, 1.0, 7.0, 7.0];
        let dense = PointCloud::new(dense_pos.clone())
            .unwrap()
            .with_features(FeatureMatrix::new(2, feats.clone()).unwrap())
            .unwrap();
        let sparse = PointCloud::new(vec![[0.1, 0.2, 0.0], [0.0, 1.5, 2.0]]).unwrap();
        let mut store = ParamStore::new();
        let cfg = AggregatorConfig {
            k: 3,
            mlp_channels: vec![6],
            pooling: Pooling::Sum,
            use_mlp: true,
        };
        let agg = Aggregator::new(cfg, 2, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let lin = &agg.mlp().unwrap().layers()[0].0;
        let mut eye = vec![0.0; 36];
        for i in 0..6 {
            eye[i * 6 + i] = 1.0;
        }
        store.get_mut(lin.weight).value.data_mut().copy_from_slice(&eye);
        let out = aggregate(&agg, &store, &sparse, &dense).unwrap();
        for (i, xi) in sparse.positions().iter().enumerate() {
            let mut order: Vec<usize> = (0..5).collect();
            let d2 = |j: usize| crate::geom::sq_dist(xi, &dense_pos[j]);
            order.sort_by(|&a, &b| d2(a).partial_cmp(&d2(b)).unwrap().then(a.cmp(&b)));
            let mut want = [0.0f64; 6];
            for &j in &order[..3] {
                let d = [xi[0] - dense_pos[j][0], xi[1] - dense_pos[j][1], xi[2] - dense_pos[j][2]];
                let terms = [feats[2 * j], feats[2 * j + 1], d[0], d[1], d[2], d[0] * d[0] + d[1] * d[1] + d[2] * d[2]];
                for c in 0..6 {
                    want[c] += terms[c];
                }
            }
            for c in 0..6 {
                assert!((out.lifted.row(i)[c] - want[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_through_lift() {
        for pooling in [Pooling::Sum, Pooling::Max, Pooling::Mean] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let dense = cloud(&mut rng, 10, 3);
            let sparse: Vec<[f64; 3]> = (0..6).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let mut store = ParamStore::new();
            let cfg = AggregatorConfig {
                k: 3,
                mlp_channels: vec![5, 4],
                pooling,
                use_mlp: true,
            };
            let agg = Aggregator::new(cfg, 3, &mut store, &mut rng).unwrap();
            let nb = agg.neighbors(&sparse, dense.positions()).unwrap();
            let f = random_tensor(vec![10, 3], &mut rng);
            let report = check_gradients("lift", &store, &[f], 12, 3, |t, s, v| {
                let h = agg.forward(t, s, &sparse, dense.positions(), v[0], &nb)?;
                let n = t.value(h).len();
                t.dot_const(h, projection(n, 2))
            })
            .unwrap();
            assert!(report.passes(1e-4), "{pooling:?} {report:?}");
        }
    }

    #[test]
    fn dense_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dense = cloud(&mut rng, 50, 4);
        let sparse = PointCloud::new((0..20).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap();
        let mut store = ParamStore::new();
        for pooling in [Pooling::Sum, Pooling::Max] {
            let cfg = AggregatorConfig {
                pooling,
                mlp_channels: vec![8, 6],
                ..AggregatorConfig::default()
            };
            let agg = Aggregator::new(cfg, 4, &mut store, &mut rng).unwrap();
            let base = aggregate(&agg, &store, &sparse, &dense).unwrap();
            let mut perm: Vec<usize> = (0..50).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let shuffled = dense.select(&perm);
            let again = aggregate(&agg, &store, &sparse, &shuffled).unwrap();
            assert_eq!(base.lifted, again.lifted);
            store = ParamStore::new();
        }
    }

    #[test]
    fn sum_pooling_is_affine_for_linear_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = cloud(&mut rng, 30, 3);
        let b_feats: Vec<f64> = (0..90).map(|_| rng.random_range(-1.0..1.0)).collect();
        let with = |f: Vec<f64>| {
            PointCloud::new(a.positions().to_vec())
                .unwrap()
                .with_features(FeatureMatrix::new(3, f).unwrap())
                .unwrap()
        };
        let fa = a.features().unwrap().data().to_vec();
        let sum: Vec<f64> = fa.iter().zip(&b_feats).map(|(x, y)| x + y).collect();
        let sparse = PointCloud::new((0..10).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap();
        let mut store = ParamStore::new();
        let cfg = AggregatorConfig {
            k: 4,
            mlp_channels: vec![5],
            pooling: Pooling::Sum,
            use_mlp: true,
        };
        let agg = Aggregator::new(cfg, 3, &mut store, &mut rng).unwrap();
        let h = |f: Vec<f64>| aggregate(&agg, &store, &sparse, &with(f)).unwrap().lifted.into_data();
        let (ha, hb, hs, h0) = (h(fa), h(b_feats), h(sum), h(vec![0.0; 90]));
        for i in 0..ha.len() {
            assert!((ha[i] + hb[i] - hs[i] - h0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let agg = Aggregator::new(plain(3, Pooling::Sum), 2, &mut store, &mut rng).unwrap();
        let small = cloud(&mut rng, 2, 2);
        let sparse = PointCloud::new(vec![[0.0; 3]]).unwrap();
        assert!(matches!(aggregate(&agg, &store, &sparse, &small), Err(crate::Error::Size(_))));
        let bare = PointCloud::new(vec![[0.0; 3]; 4]).unwrap();
        assert!(matches!(aggregate(&agg, &store, &sparse, &bare), Err(crate::Error::Validation(_))));
        assert!(Aggregator::new(plain(0, Pooling::Sum), 2, &mut store, &mut rng).is_err());
    }

    fn frame(id: usize, depth: f64) -> RgbdFrame<f64> {
        let k = CameraIntrinsics::new(4.0, 4.0, 4.0, 3.0, 8, 6).unwrap();
        let pose = Pose::new(crate::geom::rotation_z(0.3 * id as f64), [id as f64, 0.0, 0.0]).unwrap();
        RgbdFrame::new(vec![0.5; 144], vec![depth; 48], k, pose, id).unwrap()
    }

    fn fmap(id: usize) -> FeatureMatrix<f64> {
        FeatureMatrix::new(2, (0..96).map(|i| (i + 1000 * id) as f64).collect()).unwrap()
    }

    #[test]
    fn dense_cloud_contracts() {
        let frames = [frame(0, 1.0), frame(1, 2.0), frame(2, 1.5)];
        let maps = [fmap(0), fmap(1), fmap(2)];
        let single = build_dense(&[&frames[0]], &[&maps[0]], 20, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let direct = unproject(&frames[0], 20, &mut ChaCha8Rng::seed_from_u64(5), Some(&maps[0])).unwrap();
        assert_eq!(single, direct);
        let fr: Vec<&RgbdFrame<f64>> = frames.iter().collect();
        let mr: Vec<&FeatureMatrix<f64>> = maps.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dense = build_dense(&fr, &mr, 40, &mut rng).unwrap();
        assert_eq!(dense.len(), 120);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples = sample_dense(&fr, 40, &mut rng).unwrap();
        for (i, &(slot, p)) in samples.sources.iter().enumerate() {
            assert_eq!(dense.features().unwrap().row(i), maps[slot].row(p));
            let w = frames[slot].width();
            assert_eq!(dense.positions()[i], frames[slot].pixel_to_world(p % w, p / w, frames[slot].depth[p]));
        }
        let empty = frame(3, 0.0);
        assert!(matches!(
            build_dense(&[&empty], &[&maps[0]], 10, &mut rng),
            Err(crate::Error::Validation(_))
        ));
        assert!(matches!(build_dense(&fr, &mr[..2], 10, &mut rng), Err(crate::Error::Shape(_))));
    }
}
