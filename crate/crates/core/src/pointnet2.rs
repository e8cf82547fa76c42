//! Single-scale-grouping PointNet++ segmentation network with configurable
//! placement of the lifted image features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geom::{ball_query, farthest_point_sampling, KdTree};
use crate::nn::{GroupReduce, Mode, ParamStore, SharedMlp, Tape, Var};
use crate::Real;

pub const PREFIX: &str = "pn2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub centroid_counts: Vec<usize>,
    pub radii: Vec<f64>,
    pub group_sizes: Vec<usize>,
    pub sa_mlps: Vec<Vec<usize>>,
    /// Deepest feature propagation layer first.
    pub fp_mlps: Vec<Vec<usize>>,
    pub head_hidden: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            centroid_counts: vec![256, 64, 16, 8],
            radii: vec![0.1, 0.2, 0.4, 0.8],
            group_sizes: vec![32, 32, 32, 32],
            sa_mlps: vec![vec![16, 16, 32], vec![32, 32, 64], vec![64, 64, 128], vec![128, 128, 256]],
            fp_mlps: vec![vec![128, 128], vec![128, 128], vec![128, 64], vec![64, 64, 64]],
            head_hidden: 64,
            num_classes: crate::synth::NUM_CLASSES,
        }
    }
}

impl BackboneConfig {
    /// Centroid counts of the full-size reference setup, meant for 8192-point chunks.
    pub fn paper_scale() -> Self {
        BackboneConfig {
            centroid_counts: vec![1024, 256, 64, 16],
            ..BackboneConfig::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.centroid_counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l == 0 {
            bail!(Validation, "backbone needs at least one set abstraction level");
        }
        if [self.radii.len(), self.group_sizes.len(), self.sa_mlps.len(), self.fp_mlps.len()]
            .iter()
            .any(|&n| n != l)
        {
            bail!(Validation, "backbone per-level lists must all have {l} entries");
        }
        if self.centroid_counts.windows(2).any(|w| w[0] <= w[1]) {
            bail!(Validation, "centroid counts must be strictly decreasing");
        }
        if self.centroid_counts[l - 1] < 3 {
            bail!(Validation, "the coarsest level needs at least 3 centroids");
        }
        if self.radii.iter().any(|r| !(*r > 0.0)) || self.group_sizes.contains(&0) {
            bail!(Validation, "radii and group sizes must be positive");
        }
        let empty = |m: &Vec<Vec<usize>>| m.iter().any(|c| c.is_empty() || c.contains(&0));
        if empty(&self.sa_mlps) || empty(&self.fp_mlps) || self.head_hidden == 0 || self.num_classes == 0 {
            bail!(Validation, "backbone layer widths must be positive");
        }
        Ok(())
    }
}

/// Where image features enter the point network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Lifted features join the input point features.
    Early,
    /// A second encoder consumes lifted features; the decoder sees both.
    Intermediate,
    /// Lifted features join after the last propagation layer.
    Late,
    XyzOnly,
    XyzRgb,
}

impl Fusion {
    pub const ALL: [Fusion; 5] = [Fusion::Early, Fusion::Intermediate, Fusion::Late, Fusion::XyzOnly, Fusion::XyzRgb];

    pub fn uses_lifted(self) -> bool {
        matches!(self, Fusion::Early | Fusion::Intermediate | Fusion::Late)
    }

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Early => "early",
            Fusion::Intermediate => "intermediate",
            Fusion::Late => "late",
            Fusion::XyzOnly => "xyz",
            Fusion::XyzRgb => "xyzrgb",
        }
    }
}

/// Sampling and grouping of one chunk, shared by every branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkPlan<T> {
    /// Positions per level; level 0 holds the input points.
    pub positions: Vec<Vec<[T; 3]>>,
    /// Per SA level: `centroids × group_size` indices into the previous level.
    pub groups: Vec<Vec<usize>>,
    /// Per SA level: group offsets from the centroid divided by the radius.
    pub offsets: Vec<Vec<T>>,
    /// `interp[l]`: three coarse (level `l + 1`) neighbors of each level-`l` point.
    pub interp_idx: Vec<Vec<usize>>,
    pub interp_w: Vec<Vec<T>>,
}

/// Inverse-squared-distance weights for three neighbors; an exact match takes all weight.
pub fn interpolation_weights<T: Real>(sq_dists: &[T]) -> Vec<T> {
    if let Some(hit) = sq_dists.iter().position(|d| *d == T::zero()) {
        let mut w = vec![T::zero(); sq_dists.len()];
        w[hit] = T::one();
        return w;
    }
    let inv: Vec<T> = sq_dists.iter().map(|d| T::one() / *d).collect();
    let total: T = inv.iter().copied().sum();
    inv.into_iter().map(|v| v / total).collect()
}

pub fn plan_chunk<T: Real>(config: &BackboneConfig, positions: &[[T; 3]]) -> Result<ChunkPlan<T>> {
    if positions.len() < config.centroid_counts[0] {
        bail!(
            Size,
            "chunk has {} points, the first level samples {}",
            positions.len(),
            config.centroid_counts[0]
        );
    }
    let mut levels = vec![positions.to_vec()];
    let mut groups = Vec::new();
    let mut offsets = Vec::new();
    for l in 0..config.levels() {
        let prev = &levels[l];
        let ids = farthest_point_sampling(prev, config.centroid_counts[l], 0)?;
        let cents: Vec<[T; 3]> = ids.iter().map(|&i| prev[i]).collect();
        let tree = KdTree::new(prev);
        let r = T::lit(config.radii[l]);
        let s = config.group_sizes[l];
        let g = ball_query(&cents, &tree, r, s)?;
        let mut off = Vec::with_capacity(g.len() * 3);
        for (m, c) in cents.iter().enumerate() {
            for &j in &g[m * s..(m + 1) * s] {
                off.extend((0..3).map(|d| (prev[j][d] - c[d]) / r));
            }
        }
        groups.push(g);
        offsets.push(off);
        levels.push(cents);
    }
    let mut interp_idx = Vec::new();
    let mut interp_w = Vec::new();
    for l in 0..config.levels() {
        let coarse = &levels[l + 1];
        if coarse.len() < 3 {
            bail!(Size, "feature propagation needs 3 coarse points, level {} has {}", l + 1, coarse.len());
        }
        let nb = KdTree::new(coarse).knn(&levels[l], 3)?;
        let mut w = Vec::with_capacity(nb.indices.len());
        for q in 0..levels[l].len() {
            w.extend(interpolation_weights(nb.row(q).1));
        }
        interp_idx.push(nb.indices);
        interp_w.push(w);
    }
    Ok(ChunkPlan {
        positions: levels,
        groups,
        offsets,
        interp_idx,
        interp_w,
    })
}

#[derive(Clone, Debug)]
struct Encoder {
    layers: Vec<SharedMlp>,
}

impl Encoder {
    fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, c0: usize, config: &BackboneConfig, rng: &mut R) -> Self {
        let mut c = c0;
        let layers = config
            .sa_mlps
            .iter()
            .enumerate()
            .map(|(l, ch)| {
                let mlp = SharedMlp::new(store, &format!("{name}{l}"), 3 + c, ch, true, true, rng);
                c = mlp.out_channels();
                mlp
            })
            .collect();
        Encoder { layers }
    }

    fn widths(&self, c0: usize) -> Vec<usize> {
        std::iter::once(c0).chain(self.layers.iter().map(|m| m.out_channels())).collect()
    }

    /// Per-level features, level 0 being the input.
    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        plans: &[ChunkPlan<T>],
        input: Option<Var>,
        mode: Mode,
    ) -> Result<Vec<Option<Var>>> {
        let mut feats = vec![input];
        for (l, mlp) in self.layers.iter().enumerate() {
            let y = sa_forward(tape, store, mlp, plans, l, feats[l], mode)?;
            feats.push(Some(y));
        }
        Ok(feats)
    }
}

/// One set abstraction layer over a batch of chunks: group, shared MLP, max-pool.
pub fn sa_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    mlp: &SharedMlp,
    plans: &[ChunkPlan<T>],
    level: usize,
    features: Option<Var>,
    mode: Mode,
) -> Result<Var> {
    let n_prev = plans[0].positions[level].len();
    let group = plans[0].groups[level].len() / plans[0].positions[level + 1].len();
    let mut idx = Vec::new();
    let mut off = Vec::new();
    for (b, p) in plans.iter().enumerate() {
        if p.positions[level].len() != n_prev || p.groups[level].len() != plans[0].groups[level].len() {
            bail!(Shape, "chunks in one batch must share point and centroid counts");
        }
        idx.extend(p.groups[level].iter().map(|&j| j + b * n_prev));
        off.extend_from_slice(&p.offsets[level]);
    }
    let rows = idx.len();
    let rel = tape.constant(vec![rows, 3], off)?;
    let x = match features {
        Some(f) => {
            if tape.shape(f)[0] != n_prev * plans.len() {
                bail!(Shape, "level {level} features have {} rows, expected {}", tape.shape(f)[0], n_prev * plans.len());
            }
            let g = tape.gather_rows(f, idx)?;
            tape.concat(&[rel, g], 1)?
        }
        None => rel,
    };
    let y = mlp.forward(tape, store, x, mode)?;
    tape.reduce_groups(y, group, GroupReduce::Max)
}

/// Interpolates level `level + 1` features onto level `level` and applies the MLP.
pub fn fp_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    mlp: &SharedMlp,
    plans: &[ChunkPlan<T>],
    level: usize,
    coarse: Var,
    skip: Option<Var>,
    mode: Mode,
) -> Result<Var> {
    let n_coarse = plans[0].positions[level + 1].len();
    if n_coarse < 3 {
        bail!(Size, "feature propagation needs at least 3 coarse points");
    }
    let mut idx = Vec::new();
    let mut w = Vec::new();
    for (b, p) in plans.iter().enumerate() {
        idx.extend(p.interp_idx[level].iter().map(|&j| j + b * n_coarse));
        w.extend_from_slice(&p.interp_w[level]);
    }
    let g = tape.gather_rows(coarse, idx)?;
    let g = tape.scale_rows(g, w)?;
    let interp = tape.reduce_groups(g, 3, GroupReduce::Sum)?;
    let x = match skip {
        Some(s) => tape.concat(&[interp, s], 1)?,
        None => interp,
    };
    mlp.forward(tape, store, x, mode)
}

/// Per-point inputs of a batch of chunks; rows are chunk-major.
#[derive(Clone, Copy, Debug)]
pub struct PointInputs<'a, T> {
    /// Per-point color rows `[n, 3]`, required by `XyzRgb`.
    pub rgb: Option<&'a [T]>,
    /// Lifted image features `[n, lifted_dim]`, required by the fused variants.
    pub lifted: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Pointnet2 {
    config: BackboneConfig,
    fusion: Fusion,
    use_xyz: bool,
    lifted_dim: usize,
    geometry: Encoder,
    image: Option<Encoder>,
    decoder: Vec<SharedMlp>,
    head: SharedMlp,
}

impl Pointnet2 {
    pub fn new<T: Real, R: Rng>(
        config: BackboneConfig,
        fusion: Fusion,
        use_xyz: bool,
        lifted_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if fusion.uses_lifted() && lifted_dim == 0 {
            bail!(Validation, "{} fusion needs lifted features", fusion.name());
        }
        let xyz = if use_xyz { 3 } else { 0 };
        let c0_geo = match fusion {
            Fusion::Early => xyz + lifted_dim,
            Fusion::XyzRgb => xyz + 3,
            _ => xyz,
        };
        let geometry = Encoder::new(store, &format!("{PREFIX}.sa"), c0_geo, &config, rng);
        let image = (fusion == Fusion::Intermediate)
            .then(|| Encoder::new(store, &format!("{PREFIX}.img_sa"), lifted_dim, &config, rng));
        let mut widths = geometry.widths(c0_geo);
        if let Some(img) = &image {
            for (w, v) in widths.iter_mut().zip(img.widths(lifted_dim)) {
                *w += v;
            }
        }
        let l = config.levels();
        let mut cur = widths[l];
        let mut decoder = Vec::with_capacity(l);
        for (i, ch) in config.fp_mlps.iter().enumerate() {
            let level = l - 1 - i;
            let mlp = SharedMlp::new(store, &format!("{PREFIX}.fp{level}"), cur + widths[level], ch, true, true, rng);
            cur = mlp.out_channels();
            decoder.push(mlp);
        }
        if fusion == Fusion::Late {
            cur += lifted_dim;
        }
        let head = SharedMlp::new(
            store,
            &format!("{PREFIX}.head"),
            cur,
            &[config.head_hidden, config.num_classes],
            true,
            false,
            rng,
        );
        Ok(Pointnet2 {
            config,
            fusion,
            use_xyz,
            lifted_dim,
            geometry,
            image,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn fusion(&self) -> Fusion {
        self.fusion
    }

    pub fn plan<T: Real>(&self, positions: &[[T; 3]]) -> Result<ChunkPlan<T>> {
        plan_chunk(&self.config, positions)
    }

    /// Logits `[chunks · points, classes]` for a batch of planned chunks.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        plans: &[ChunkPlan<T>],
        inputs: PointInputs<'_, T>,
        mode: Mode,
    ) -> Result<Var> {
        if plans.is_empty() {
            bail!(Size, "empty chunk batch");
        }
        let n = plans[0].positions[0].len();
        let rows = n * plans.len();
        if self.fusion.uses_lifted() != inputs.lifted.is_some() {
            bail!(Validation, "{} fusion: lifted features {}", self.fusion.name(), if inputs.lifted.is_some() { "not expected" } else { "missing" });
        }
        if (self.fusion == Fusion::XyzRgb) != inputs.rgb.is_some() {
            bail!(Validation, "{} fusion: color input {}", self.fusion.name(), if inputs.rgb.is_some() { "not expected" } else { "missing" });
        }
        if let Some(l) = inputs.lifted {
            if tape.shape(l) != [rows, self.lifted_dim] {
                bail!(Shape, "lifted features {:?}, expected [{rows}, {}]", tape.shape(l), self.lifted_dim);
            }
        }
        let xyz = if self.use_xyz {
            let mut v = Vec::with_capacity(rows * 3);
            for p in plans {
                if p.positions[0].len() != n {
                    bail!(Shape, "chunks in one batch must have equal point counts");
                }
                v.extend(p.positions[0].iter().flatten().copied());
            }
            Some(tape.constant(vec![rows, 3], v)?)
        } else {
            None
        };
        let cat = |tape: &mut Tape<T>, parts: &[Option<Var>]| -> Result<Option<Var>> {
            let parts: Vec<Var> = parts.iter().flatten().copied().collect();
            match parts.len() {
                0 => Ok(None),
                1 => Ok(Some(parts[0])),
                _ => tape.concat(&parts, 1).map(Some),
            }
        };
        let rgb = match inputs.rgb {
            Some(c) => {
                if c.len() != rows * 3 {
                    bail!(Shape, "color input has {} values for {rows} points", c.len());
                }
                Some(tape.constant(vec![rows, 3], c.to_vec())?)
            }
            None => None,
        };
        let geo_in = match self.fusion {
            Fusion::Early => cat(tape, &[xyz, inputs.lifted])?,
            Fusion::XyzRgb => cat(tape, &[xyz, rgb])?,
            _ => xyz,
        };
        let mut levels = self.geometry.forward(tape, store, plans, geo_in, mode)?;
        if let Some(img) = &self.image {
            let img_levels = img.forward(tape, store, plans, inputs.lifted, mode)?;
            for (g, i) in levels.iter_mut().zip(img_levels) {
                *g = cat(tape, &[*g, i])?;
            }
        }
        let l = self.config.levels();
        let mut cur = levels[l].expect("encoder output exists");
        for (i, mlp) in self.decoder.iter().enumerate() {
            let level = l - 1 - i;
            cur = fp_forward(tape, store, mlp, plans, level, cur, levels[level], mode)?;
        }
        if self.fusion == Fusion::Late {
            cur = tape.concat(&[cur, inputs.lifted.expect("checked above")], 1)?;
        }
        self.head.forward(tape, store, cur, mode)
    }
}
