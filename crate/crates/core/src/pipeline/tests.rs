use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::infer::{plan_windows, predict_group};
use super::*;
use crate::geom::{rotation_z, PointCloud, Pose, RgbdFrame};
use crate::lift::AggregatorConfig;
use crate::net2d::Unet2dConfig;
use crate::nn::{Mode, SgdConfig, Tape};
use crate::pointnet2::{BackboneConfig, Fusion};
use crate::scene::Scene;
use crate::synth::{generate_scene, SceneSpec, SynthConfig};

fn tiny_model_config(fusion: Fusion) -> ModelConfig {
    ModelConfig {
        net2d: Unet2dConfig {
            stage_channels: vec![4, 8, 8],
            feature_dim: 8,
            ..Unet2dConfig::default()
        },
        lift: AggregatorConfig {
            mlp_channels: vec![8, 8],
            ..AggregatorConfig::default()
        },
        backbone: BackboneConfig {
            centroid_counts: vec![32, 16, 8, 4],
            radii: vec![0.2, 0.4, 0.8, 1.6],
            group_sizes: vec![8, 8, 8, 8],
            sa_mlps: vec![vec![8], vec![8], vec![8], vec![8]],
            fp_mlps: vec![vec![8], vec![8], vec![8], vec![8]],
            head_hidden: 8,
            num_classes: 6,
        },
        fusion,
        use_xyz: true,
    }
}

fn tiny_scene(seed: u64) -> Scene<f64> {
    let cfg = SynthConfig {
        frames_per_scene: 4,
        point_density: 25.0,
        ..SynthConfig::default()
    };
    generate_scene(&SceneSpec::sample(&cfg, format!("t{seed}"), seed).unwrap()).unwrap()
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        chunks_per_epoch: 16,
        batch_size: 2,
        sgd: SgdConfig {
            lr: 0.05,
            schedule: vec![],
            ..SgdConfig::default()
        },
        views_m: 2,
        n_rgb: 64,
        chunk_points: 64,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

fn infer_cfg() -> InferConfig {
    tiny_train(1).infer_config(0.5)
}

proptest! {
    #[test]
    fn chunk_members_match_bound_test(
        pts in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, 0.0f64..1.0), 1..200),
        ox in -2.0f64..1.0, oy in -2.0f64..1.0, size in 0.1f64..2.0,
    ) {
        let pos: Vec<[f64; 3]> = pts.iter().map(|p| [p.0, p.1, p.2]).collect();
        let got = chunk_members(&pos, [ox, oy], size);
        let want: Vec<usize> = (0..pos.len())
            .filter(|&i| {
                let inside = |v: f64, o: f64| !(v < o) && v - o < size && o + size > v;
                inside(pos[i][0], ox) && inside(pos[i][1], oy)
            })
            .collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn resample_has_exact_count_from_members(m in 1usize..50, n in 1usize..80, seed in 0u64..100) {
        let members: Vec<usize> = (0..m).map(|i| 3 * i + 1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = resample(&members, n, &mut rng).unwrap();
        prop_assert_eq!(s.len(), n);
        prop_assert!(s.iter().all(|i| members.contains(i)));
        if m >= n {
            let mut d = s.clone();
            d.dedup();
            prop_assert_eq!(d.len(), n);
        } else {
            // every member appears at least once
            prop_assert!(members.iter().all(|i| s.contains(i)));
        }
    }

    #[test]
    fn vote_equals_brute_force_tally(votes in prop::collection::vec((0usize..6, 0u16..4), 0..60)) {
        let (labels, counts) = tally_votes(6, 4, &votes);
        for p in 0..6 {
            let mine: Vec<u16> = votes.iter().filter(|v| v.0 == p).map(|v| v.1).collect();
            prop_assert_eq!(counts[p] as usize, mine.len());
            let want = (0..4u16)
                .map(|c| (mine.iter().filter(|&&x| x == c).count(), c))
                .filter(|&(k, _)| k > 0)
                .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
                .map(|(_, c)| c);
            prop_assert_eq!(labels[p], want);
        }
    }
}

#[test]
fn vote_mode_and_ties() {
    let (l, c) = tally_votes(2, 3, &[(0, 2), (0, 2), (0, 1), (1, 2), (1, 0)]);
    assert_eq!(l, vec![Some(2), Some(0)]);
    assert_eq!(c, vec![3, 2]);
}

#[test]
fn doubled_stride_grid_is_a_subset() {
    for (lo, hi, size, s) in [(0.0, 3.7, 1.5, 0.5), (-1.3, 2.9, 1.5, 0.25), (0.0, 1.0, 1.5, 0.5), (0.2, 4.1, 1.0, 0.3)] {
        let fine = grid_origins(lo, hi, size, s);
        let coarse = grid_origins(lo, hi, size, 2.0 * s);
        assert!(coarse.iter().all(|o| fine.contains(o)), "{coarse:?} vs {fine:?}");
        assert_eq!(fine[0], lo);
        if hi - lo > size {
            assert!((fine.last().unwrap() + size - hi).abs() < 1e-12);
        }
    }
}

#[test]
fn fully_annotated_scene_accepts_first_chunk() {
    let scene = tiny_scene(1);
    let mut a = ChaCha8Rng::seed_from_u64(5);
    let mut b = a.clone();
    let spec = sample_train_chunk(&scene, 1.5, 64, 0.3, &mut a).unwrap();
    let pos = scene.cloud.positions();
    let first = pos[rand::Rng::random_range(&mut b, 0..pos.len())];
    assert_eq!(spec.origin_xy, [first[0] - 0.75, first[1] - 0.75]);
    assert_eq!(spec.sampled.len(), 64);
    assert_eq!(spec.members, chunk_members(pos, spec.origin_xy, 1.5));
}

#[test]
fn unannotated_scene_is_rejected() {
    let mut scene = tiny_scene(1);
    let n = scene.cloud.len();
    scene.cloud = PointCloud::new(scene.cloud.positions().to_vec())
        .unwrap()
        .with_labels(vec![crate::geom::IGNORE_LABEL; n])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(sample_train_chunk(&scene, 1.5, 64, 0.3, &mut rng), Err(crate::Error::Validation(_))));
}

#[test]
fn zero_rotation_only_centers_and_views_stay_aligned() {
    let scene = tiny_scene(2);
    let model = FusionModel::<f64>::new(tiny_model_config(Fusion::Early), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = sample_train_chunk(&scene, 1.5, 64, 0.3, &mut rng).unwrap();
    let c = spec.center();
    let floor = scene.cloud.positions().iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
    for angle in [0.0, 1.1] {
        let chunk = prepare_chunk(&model, &scene, spec.clone(), angle, 2, 32, None, &mut rng).unwrap();
        let rz = rotation_z(angle);
        for (q, &i) in chunk.positions.iter().zip(&spec.sampled) {
            let p = scene.cloud.positions()[i];
            let d = [p[0] - c[0], p[1] - c[1], p[2] - floor];
            let want = [0, 1, 2].map(|r| (0..3).map(|k| rz[r][k] * d[k]).sum::<f64>());
            if angle == 0.0 {
                assert_eq!(*q, d);
            }
            for a in 0..3 {
                assert!((q[a] - want[a]).abs() < 1e-12);
            }
        }
        // dense points are the world unprojections moved by the same transform
        let lift = chunk.lift.as_ref().unwrap();
        for (pt, &(v, pix)) in lift.dense.positions.iter().zip(&lift.dense.sources) {
            let f = scene.frame(lift.frame_ids[v]).unwrap();
            let (w, _) = (f.width(), f.height());
            let world = f.pixel_to_world(pix % w, pix / w, f.depth[pix]);
            let d = [world[0] - c[0], world[1] - c[1], world[2] - floor];
            let want = [0, 1, 2].map(|r| (0..3).map(|k| rz[r][k] * d[k]).sum::<f64>());
            for a in 0..3 {
                assert!((pt[a] - want[a]).abs() < 1e-9);
            }
        }
    }
}

fn translated(scene: &Scene<f64>, t: [f64; 3]) -> Scene<f64> {
    let pos: Vec<[f64; 3]> = scene.cloud.positions().iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
    let cloud = PointCloud::new(pos).unwrap().with_labels(scene.labels().to_vec()).unwrap();
    let frames: Vec<RgbdFrame<f64>> = scene
        .frames
        .iter()
        .map(|f| {
            let tr = f.pose.translation;
            RgbdFrame {
                pose: Pose::new(f.pose.rotation, [tr[0] + t[0], tr[1] + t[1], tr[2] + t[2]]).unwrap(),
                ..f.clone()
            }
        })
        .collect();
    Scene::new(scene.name.clone(), cloud, scene.colors.clone(), frames, scene.labels2d.clone()).unwrap()
}

#[test]
fn chunk_logits_are_translation_invariant() {
    let scene = tiny_scene(3);
    let shift = [0.37, -1.21, 0.53];
    let moved = translated(&scene, shift);
    for fusion in [Fusion::XyzOnly, Fusion::XyzRgb] {
        let model = FusionModel::<f64>::new(tiny_model_config(fusion), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = sample_train_chunk(&scene, 1.5, 64, 0.3, &mut rng).unwrap();
        let spec2 = ChunkSpec {
            origin_xy: [spec.origin_xy[0] + shift[0], spec.origin_xy[1] + shift[1]],
            ..spec.clone()
        };
        let run = |s: &Scene<f64>, sp: ChunkSpec| {
            let mut r = ChaCha8Rng::seed_from_u64(1);
            let ch = prepare_chunk(&model, s, sp, 0.4, 2, 32, None, &mut r).unwrap();
            let mut tape = Tape::new();
            let l = forward_chunks(&model, &mut tape, &[ch], Mode::Eval).unwrap();
            tape.value(l).to_vec()
        };
        let a = run(&scene, spec);
        let b = run(&moved, spec2);
        let err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{} differs by {err}", fusion.name());
    }
}

#[test]
fn single_window_vote_is_identity() {
    // a scene narrower than one chunk gets a single window and one group
    let scene = tiny_scene(4);
    let p0 = scene.cloud.positions()[0];
    let keep: Vec<usize> = scene
        .cloud
        .positions()
        .iter()
        .enumerate()
        .filter(|(_, p)| (p[0] - p0[0]).abs() < 0.6 && (p[1] - p0[1]).abs() < 0.6)
        .map(|(i, _)| i)
        .take(60)
        .collect();
    assert!(keep.len() > 10);
    let small = Scene::new(
        "small".into(),
        scene.cloud.select(&keep),
        keep.iter().map(|&i| scene.colors[i]).collect(),
        scene.frames.clone(),
        scene.labels2d.clone(),
    )
    .unwrap();
    let model = FusionModel::<f64>::new(tiny_model_config(Fusion::Early), 1).unwrap();
    let cfg = infer_cfg();
    let pos: Vec<[f64; 3]> = small.cloud.positions().to_vec();
    let groups = plan_windows(&pos, &cfg);
    assert_eq!(groups.len(), 1);
    let (key, spec, own) = groups.into_iter().next().unwrap();
    let direct = predict_group(&model, &small, None, &cfg, key, spec, &own).unwrap();
    let res = infer_scene(&model, &small, None, &cfg).unwrap();
    assert!(res.counts.iter().all(|&c| c == 1));
    for (i, l) in direct {
        assert_eq!(res.labels[i], l);
    }
}

#[test]
fn inference_labels_every_point_deterministically_and_stride_is_monotone() {
    let scene = tiny_scene(5);
    let model = FusionModel::<f64>::new(tiny_model_config(Fusion::Early), 2).unwrap();
    let cfg = infer_cfg();
    let a = infer_scene(&model, &scene, None, &cfg).unwrap();
    let b = infer_scene(&model, &scene, None, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.labels.len(), scene.cloud.len());
    assert!(a.labels.iter().all(|&l| l < 6));
    let wide = infer_scene(&model, &scene, None, &InferConfig { stride: 1.0, ..cfg.clone() }).unwrap();
    assert!(wide.counts.iter().zip(&a.counts).all(|(w, f)| w <= f));
    assert!(a.counts.iter().all(|&c| c >= 1));
}

#[test]
fn unvoted_points_take_nearest_label() {
    let pos = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.9, 0.0, 0.0], [0.1, 0.0, 0.0]];
    let got = infer::fill_unvoted(&pos, &[Some(3), Some(1), None, None]).unwrap();
    assert_eq!(got, vec![3, 1, 1, 3]);
}

#[test]
fn frozen_training_needs_pretrained_weights() {
    let scene = tiny_scene(6);
    let mut model = FusionModel::<f32>::new(tiny_model_config(Fusion::Early), 0).unwrap();
    let s32 = scene.cast::<f32>();
    let err = train(&mut model, &[s32], &[], &tiny_train(1), &infer_cfg(), |_| {}).unwrap_err();
    assert!(matches!(err, crate::Error::Dependency(_)));
}

#[test]
fn training_is_deterministic_reduces_loss_and_respects_freeze() {
    let scenes: Vec<Scene<f32>> = (10..12).map(|s| tiny_scene(s).cast()).collect();
    let run = || {
        let mut model = FusionModel::<f32>::new(tiny_model_config(Fusion::Early), 7).unwrap();
        let pre = FusionModel::<f32>::new(tiny_model_config(Fusion::Early), 99).unwrap();
        model.load_net2d(&pre.store).unwrap();
        let before: Vec<(String, Vec<f32>)> = model
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with("net2d"))
            .map(|(_, p)| (p.name.clone(), p.value.data().to_vec()))
            .collect();
        let log = train(&mut model, &scenes[..1], &scenes[1..], &tiny_train(2), &infer_cfg(), |_| {}).unwrap();
        let after: Vec<(String, Vec<f32>)> = model
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with("net2d"))
            .map(|(_, p)| (p.name.clone(), p.value.data().to_vec()))
            .collect();
        assert_eq!(before, after);
        log
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    let first_epoch = a.rows.iter().find(|r| r.split == "train").unwrap().loss.unwrap();
    assert!(first_epoch < a.initial_loss, "{first_epoch} !< {}", a.initial_loss);
    let val = a.rows.iter().filter(|r| r.split == "val").count();
    assert_eq!(val, 1);
    let csv = a.to_csv(&crate::synth::CLASS_NAMES);
    assert!(csv.starts_with("epoch,split,loss,miou,iou_"));
}

#[test]
fn unfrozen_training_updates_the_2d_network() {
    let scenes: Vec<Scene<f32>> = vec![tiny_scene(13).cast()];
    let mut model = FusionModel::<f32>::new(tiny_model_config(Fusion::Early), 7).unwrap();
    let id = model
        .store
        .iter()
        .find(|(_, p)| p.name.starts_with("net2d.") && !p.name.starts_with("net2d.head") && p.trainable)
        .map(|(id, _)| id)
        .unwrap();
    let before = model.store.value(id).data().to_vec();
    let cfg = TrainConfig {
        freeze_2d: false,
        ..tiny_train(1)
    };
    train(&mut model, &scenes, &[], &cfg, &infer_cfg(), |_| {}).unwrap();
    assert_ne!(before, model.store.value(id).data());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let scene = tiny_scene(14).cast::<f32>();
    let mut model = FusionModel::<f32>::new(tiny_model_config(Fusion::Intermediate), 3).unwrap();
    let pre = FusionModel::<f32>::new(tiny_model_config(Fusion::Intermediate), 4).unwrap();
    model.load_net2d(&pre.store).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path, 3, 11).unwrap();
    let (back, header) = FusionModel::<f32>::load(&path).unwrap();
    assert_eq!(header.epoch, 3);
    assert_eq!(back.config, model.config);
    assert!(back.net2d_loaded());
    let cfg = infer_cfg();
    assert_eq!(infer_scene(&model, &scene, None, &cfg).unwrap(), infer_scene(&back, &scene, None, &cfg).unwrap());
}

#[test]
fn derived_seeds_differ_by_part() {
    let a = derive_seed(1, &[0, 0, 1]);
    let b = derive_seed(1, &[0, 1, 0]);
    let c = derive_seed(2, &[0, 0, 1]);
    assert!(a != b && a != c && b != c);
    assert_eq!(a, derive_seed(1, &[0, 0, 1]));
}
