//! Small U-Net style encoder-decoder producing per-pixel feature maps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geom::{FeatureMatrix, RgbdFrame, IGNORE_LABEL};
use crate::nn::{apply_stat_updates, sgd_step, BatchNorm, Conv2d, ConvTranspose2d, Mode, ParamStore, SgdConfig, Tape, Var};
use crate::Real;

/// Parameter-name prefix of every 2D network weight.
pub const PREFIX: &str = "net2d";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Unet2dConfig {
    /// `(width, height)` in pixels.
    pub input_size: (usize, usize),
    pub stage_channels: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Default for Unet2dConfig {
    fn default() -> Self {
        Unet2dConfig {
            input_size: (40, 32),
            stage_channels: vec![16, 32, 64],
            feature_dim: 64,
            num_classes: crate::synth::NUM_CLASSES,
        }
    }
}

impl Unet2dConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.stage_channels.len();
        if stages == 0 || self.stage_channels.contains(&0) {
            bail!(Validation, "net2d needs at least one stage with positive width");
        }
        if self.feature_dim == 0 || self.num_classes == 0 {
            bail!(Validation, "net2d feature_dim and num_classes must be positive");
        }
        let f = 1usize << (stages - 1);
        let (w, h) = self.input_size;
        if w == 0 || h == 0 || w % f != 0 || h % f != 0 {
            bail!(Validation, "net2d input {w}x{h} is not divisible by {f}");
        }
        Ok(())
    }
}

struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBnRelu {
    fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(store, name, cin, cout, 3, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.bn.forward(tape, store, y, mode)?;
        Ok(tape.relu(y))
    }
}

pub struct Unet2d {
    config: Unet2dConfig,
    encoder: Vec<ConvBnRelu>,
    /// Deepest level first.
    up: Vec<ConvTranspose2d>,
    fuse: Vec<ConvBnRelu>,
    pub head: Conv2d,
}

impl Unet2d {
    pub fn new<T: Real, R: Rng>(config: Unet2dConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ch = &config.stage_channels;
        let s = ch.len();
        let mut encoder = Vec::with_capacity(s);
        let mut cin = 3;
        for (i, &c) in ch.iter().enumerate() {
            encoder.push(ConvBnRelu::new(store, &format!("{PREFIX}.enc{i}"), cin, c, rng));
            cin = c;
        }
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        for level in (0..s - 1).rev() {
            up.push(ConvTranspose2d::new(store, &format!("{PREFIX}.up{level}"), cin, ch[level], rng));
            let out = if level == 0 { config.feature_dim } else { ch[level] };
            fuse.push(ConvBnRelu::new(store, &format!("{PREFIX}.dec{level}"), 2 * ch[level], out, rng));
            cin = out;
        }
        if s == 1 && config.feature_dim != cin {
            // single-stage nets still end in a feature_dim-wide layer
            fuse.push(ConvBnRelu::new(store, &format!("{PREFIX}.dec0"), cin, config.feature_dim, rng));
        }
        let head = Conv2d::new(store, &format!("{PREFIX}.head"), config.feature_dim, config.num_classes, 1, rng);
        Ok(Unet2d {
            config,
            encoder,
            up,
            fuse,
            head,
        })
    }

    pub fn config(&self) -> &Unet2dConfig {
        &self.config
    }

    /// `x: [b, 3, h, w]` → (features `[b, feature_dim, h, w]`, logits `[b, classes, h, w]`).
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let (w, h) = self.config.input_size;
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != w {
            bail!(Shape, "net2d expects [b, 3, {h}, {w}], got {shape:?}");
        }
        let mut skips = Vec::new();
        let mut y = x;
        for (i, stage) in self.encoder.iter().enumerate() {
            if i > 0 {
                y = tape.maxpool2d(y)?;
            }
            y = stage.forward(tape, store, y, mode)?;
            skips.push(y);
        }
        skips.pop();
        for (up, fuse) in self.up.iter().zip(&self.fuse) {
            let skip = skips.pop().expect("one skip per decoder level");
            let u = up.forward(tape, store, y)?;
            let cat = tape.concat(&[u, skip], 1)?;
            y = fuse.forward(tape, store, cat, mode)?;
        }
        if self.up.is_empty() {
            if let Some(f) = self.fuse.first() {
                y = f.forward(tape, store, y, mode)?;
            }
        }
        let logits = self.head.forward(tape, store, y)?;
        Ok((y, logits))
    }

    /// Eval-mode per-pixel features of one frame, `height·width` rows.
    pub fn frame_features<T: Real>(&self, store: &ParamStore<T>, frame: &RgbdFrame<T>) -> Result<FeatureMatrix<T>> {
        let (w, h) = self.config.input_size;
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 3, h, w], hwc_to_chw(&frame.rgb, w, h, false)?)?;
        let (f, _) = self.forward(&mut tape, store, x, Mode::Eval)?;
        let rows = tape.nchw_to_rows(f)?;
        let (_, data) = tape.into_value(rows);
        FeatureMatrix::new(self.config.feature_dim, data)
    }

    /// Features of many frames, computed in parallel.
    pub fn features_for<T: Real>(&self, store: &ParamStore<T>, frames: &[RgbdFrame<T>]) -> Result<Vec<FeatureMatrix<T>>> {
        frames.par_iter().map(|f| self.frame_features(store, f)).collect()
    }

    /// Eval-mode argmax class per pixel.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, rgb: &[T]) -> Result<Vec<u16>> {
        let (w, h) = self.config.input_size;
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 3, h, w], hwc_to_chw(rgb, w, h, false)?)?;
        let (_, logits) = self.forward(&mut tape, store, x, Mode::Eval)?;
        let rows = tape.nchw_to_rows(logits)?;
        let k = self.config.num_classes;
        Ok(tape
            .value(rows)
            .chunks_exact(k)
            .map(|r| {
                let mut best = 0;
                for c in 1..k {
                    if r[c] > r[best] {
                        best = c;
                    }
                }
                best as u16
            })
            .collect())
    }
}

/// `h × w × 3` interleaved image to planar `3 × h × w`, optionally mirrored left-right.
pub fn hwc_to_chw<T: Real>(rgb: &[T], w: usize, h: usize, flip: bool) -> Result<Vec<T>> {
    if rgb.len() != w * h * 3 {
        bail!(Shape, "image has {} values, expected {w}x{h}x3", rgb.len());
    }
    let mut out = vec![T::zero(); rgb.len()];
    for v in 0..h {
        for u in 0..w {
            let src = if flip { w - 1 - u } else { u };
            for c in 0..3 {
                out[c * w * h + v * w + u] = rgb[(v * w + src) * 3 + c];
            }
        }
    }
    Ok(out)
}

/// Row-major label map mirrored left-right when `flip` is set.
pub fn flip_labels(labels: &[u16], w: usize, flip: bool) -> Vec<u16> {
    if !flip {
        return labels.to_vec();
    }
    labels
        .chunks_exact(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

/// An RGB image with its per-pixel class ids.
#[derive(Clone, Debug)]
pub struct LabelledImage<'a, T> {
    pub rgb: &'a [T],
    pub labels: &'a [u16],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pretrain2dConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Optional cap on optimizer steps per epoch.
    pub steps_per_epoch: Option<usize>,
    pub flip: bool,
    pub sgd: SgdConfig,
}

impl Default for Pretrain2dConfig {
    fn default() -> Self {
        Pretrain2dConfig {
            epochs: 8,
            batch_size: 8,
            steps_per_epoch: None,
            flip: true,
            sgd: SgdConfig {
                lr: 0.05,
                schedule: vec![(6, 0.1)],
                ..SgdConfig::default()
            },
        }
    }
}

/// Trains the segmentation head and backbone on labelled images.
/// Returns the loss of every optimizer step.
pub fn pretrain2d<T: Real>(
    net: &Unet2d,
    store: &mut ParamStore<T>,
    data: &[LabelledImage<'_, T>],
    config: &Pretrain2dConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        bail!(Validation, "2D pretraining needs at least one labelled image");
    }
    if config.batch_size == 0 {
        bail!(Validation, "batch size must be positive");
    }
    config.sgd.validate()?;
    let (w, h) = net.config.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let steps = config.steps_per_epoch.map_or(batches.len(), |s| s.min(batches.len()).max(1));
        for step in 0..steps {
            let batch = batches[step % batches.len()];
            let mut x = Vec::with_capacity(batch.len() * 3 * w * h);
            let mut labels = Vec::with_capacity(batch.len() * w * h);
            for &i in batch {
                let flip = config.flip && rng.random_bool(0.5);
                x.extend(hwc_to_chw(data[i].rgb, w, h, flip)?);
                if data[i].labels.len() != w * h {
                    bail!(Shape, "label map has {} entries, expected {}", data[i].labels.len(), w * h);
                }
                labels.extend(flip_labels(data[i].labels, w, flip));
            }
            let mut tape = Tape::new();
            let xv = tape.constant(vec![batch.len(), 3, h, w], x)?;
            let (_, logits) = net.forward(&mut tape, store, xv, Mode::Train)?;
            let rows = tape.nchw_to_rows(logits)?;
            let loss = tape.softmax_cross_entropy(rows, &labels, None)?;
            let lv = tape.value(loss)[0].as_f64();
            if !lv.is_finite() {
                bail!(Numeric, "2D pretraining loss became {lv} at epoch {epoch}");
            }
            tape.backward(loss)?;
            tape.accumulate_param_grads(store);
            apply_stat_updates(&tape, store);
            sgd_step(store, &config.sgd, epoch)?;
            losses.push(lv);
        }
    }
    Ok(losses)
}

/// Fraction of non-ignored pixels whose argmax class is correct.
pub fn pixel_accuracy<T: Real>(net: &Unet2d, store: &ParamStore<T>, data: &[LabelledImage<'_, T>]) -> Result<f64> {
    let per: Vec<(usize, usize)> = data
        .par_iter()
        .map(|img| {
            let pred = net.predict(store, img.rgb)?;
            let mut hit = 0;
            let mut total = 0;
            for (p, &l) in pred.iter().zip(img.labels) {
                if l != IGNORE_LABEL {
                    total += 1;
                    hit += usize::from(*p == l);
                }
            }
            Ok((hit, total))
        })
        .collect::<Result<_>>()?;
    let (hit, total) = per.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradients, projection, random_tensor};

    fn micro() -> Unet2dConfig {
        Unet2dConfig {
            input_size: (8, 8),
            stage_channels: vec![3, 4],
            feature_dim: 3,
            num_classes: 3,
        }
    }

    #[test]
    fn output_matches_input_size() {
        for (size, stages) in [((40, 32), vec![16, 32, 64]), ((12, 6), vec![4, 4]), ((5, 3), vec![2]), ((16, 8), vec![2, 3, 4, 5])] {
            let cfg = Unet2dConfig {
                input_size: size,
                stage_channels: stages,
                feature_dim: 5,
                num_classes: 4,
            };
            let mut store = ParamStore::<f32>::new();
            let net = Unet2d::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(vec![2, 3, size.1, size.0], vec![0.5; 6 * size.0 * size.1]).unwrap();
            let (f, l) = net.forward(&mut tape, &store, x, Mode::Train).unwrap();
            assert_eq!(tape.shape(f), &[2, 5, size.1, size.0]);
            assert_eq!(tape.shape(l), &[2, 4, size.1, size.0]);
            assert!(tape.value(f).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let cfg = Unet2dConfig {
            input_size: (40, 30),
            ..Unet2dConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        assert!(matches!(
            Unet2d::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(crate::Error::Validation(_))
        ));
        let net = Unet2d::new(micro(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 3, 8, 4], vec![0.0; 96]).unwrap();
        assert!(matches!(net.forward(&mut tape, &store, x, Mode::Eval), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut store = ParamStore::<f64>::new();
        let net = Unet2d::new(micro(), &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        store.get_mut(net.head.weight).value.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 3, 8, 8], (0..192).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let (_, l) = net.forward(&mut tape, &store, x, Mode::Eval).unwrap();
        let rows = tape.nchw_to_rows(l).unwrap();
        let loss = tape.softmax_cross_entropy(rows, &vec![1; 64], None).unwrap();
        // cross entropy of a uniform distribution is ln(classes)
        assert!((tape.value(loss)[0] - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let net = Unet2d::new(micro(), &mut store, &mut rng).unwrap();
        let x = random_tensor(vec![1, 3, 8, 8], &mut rng);
        let labels: Vec<u16> = (0..64).map(|i| (i % 3) as u16).collect();
        let report = check_gradients("net2d", &store, &[x], 6, 5, |t, s, v| {
            let (f, l) = net.forward(t, s, v[0], Mode::Train)?;
            let rows = t.nchw_to_rows(l)?;
            let ce = t.softmax_cross_entropy(rows, &labels, None)?;
            let n = t.value(f).len();
            let p = t.dot_const(f, projection(n, 1))?;
            t.add(ce, p)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    fn toy() -> (Vec<f32>, Vec<u16>) {
        let mut rgb = Vec::new();
        let mut labels = Vec::new();
        for v in 0..8 {
            for u in 0..8 {
                let inside = (2..6).contains(&u) && (1..5).contains(&v);
                rgb.extend(if inside { [0.8, 0.2, 0.2] } else { [0.3, 0.3, 0.7] });
                labels.push(u16::from(inside));
            }
        }
        (rgb, labels)
    }

    #[test]
    fn overfits_one_image() {
        let cfg = Unet2dConfig {
            input_size: (8, 8),
            stage_channels: vec![8, 8],
            feature_dim: 8,
            num_classes: 2,
        };
        let mut store = ParamStore::<f32>::new();
        let net = Unet2d::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (rgb, labels) = toy();
        let data = [LabelledImage { rgb: &rgb, labels: &labels }];
        let pc = Pretrain2dConfig {
            epochs: 200,
            batch_size: 1,
            steps_per_epoch: None,
            flip: false,
            sgd: SgdConfig {
                lr: 0.05,
                schedule: vec![],
                ..SgdConfig::default()
            },
        };
        let losses = pretrain2d(&net, &mut store, &data, &pc, 0).unwrap();
        assert_eq!(losses.len(), 200);
        assert!(losses[199] < losses[0]);
        assert_eq!(pixel_accuracy(&net, &store, &data).unwrap(), 1.0);
    }

    #[test]
    fn fixed_seed_without_flip_is_reproducible() {
        let run = || {
            let mut store = ParamStore::<f32>::new();
            let net = Unet2d::new(micro(), &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let (rgb, labels) = toy();
            let labels: Vec<u16> = labels.iter().map(|l| l + 1).collect();
            let data = [LabelledImage { rgb: &rgb, labels: &labels }, LabelledImage { rgb: &rgb, labels: &labels }];
            let pc = Pretrain2dConfig {
                epochs: 3,
                batch_size: 1,
                flip: false,
                ..Pretrain2dConfig::default()
            };
            pretrain2d(&net, &mut store, &data, &pc, 9).unwrap()
        };
        let a = run();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), run().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn flip_moves_pixels_and_labels_together() {
        let (w, h) = (5, 2);
        let rgb: Vec<f64> = (0..w * h * 3).map(|i| i as f64).collect();
        let labels: Vec<u16> = (0..(w * h) as u16).collect();
        let x = hwc_to_chw(&rgb, w, h, true).unwrap();
        let l = flip_labels(&labels, w, true);
        for v in 0..h {
            for u in 0..w {
                let src = v * w + (w - 1 - u);
                assert_eq!(l[v * w + u], labels[src]);
                for c in 0..3 {
                    assert_eq!(x[c * w * h + v * w + u], rgb[src * 3 + c]);
                }
            }
        }
        assert_eq!(flip_labels(&l, w, true), labels);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        let net = Unet2d::new(micro(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let r = pretrain2d(&net, &mut store, &[], &Pretrain2dConfig::default(), 0);
        assert!(matches!(r, Err(crate::Error::Validation(_))));
    }
}
