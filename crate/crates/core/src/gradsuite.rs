//! The complete finite-difference suite: tape primitives, lifting, one SA and one FP
//! layer, every backbone wiring, the 2D network and full fusion models on a micro chunk.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::lift::{Aggregator, AggregatorConfig, Pooling};
use crate::net2d::{Unet2d, Unet2dConfig};
use crate::nn::gradcheck::{check_gradients, primitive_suite, projection, random_tensor, GradCheckReport};
use crate::nn::{Mode, ParamStore, SharedMlp, Tape};
use crate::pipeline::{forward_with_store, prepare_chunk, resample, ChunkSpec, FusionModel, ModelConfig};
use crate::pointnet2::{fp_forward, plan_chunk, sa_forward, BackboneConfig, Fusion, PointInputs, Pointnet2};
use crate::synth::{generate_scene, SceneSpec, SynthConfig};

/// Acceptance threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

fn micro_backbone(classes: usize) -> BackboneConfig {
    BackboneConfig {
        centroid_counts: vec![16, 8, 4, 3],
        radii: vec![0.3, 0.5, 0.8, 1.2],
        group_sizes: vec![4, 4, 3, 3],
        sa_mlps: vec![vec![4, 5], vec![5], vec![6], vec![6]],
        fp_mlps: vec![vec![5], vec![5], vec![4], vec![4, 4]],
        head_hidden: 4,
        num_classes: classes,
    }
}

fn micro_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7), rng.random_range(0.0..1.5)])
        .collect()
}

fn lift_checks(seed: u64, out: &mut Vec<GradCheckReport>) -> Result<()> {
    for (name, pooling, use_mlp) in [
        ("lift_sum", Pooling::Sum, true),
        ("lift_max", Pooling::Max, true),
        ("lift_mean", Pooling::Mean, true),
        ("lift_no_mlp", Pooling::Sum, false),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
        let dense: Vec<[f64; 3]> = (0..10).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let sparse: Vec<[f64; 3]> = (0..6).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let mut store = ParamStore::new();
        let cfg = AggregatorConfig {
            k: 3,
            mlp_channels: vec![5, 4],
            pooling,
            use_mlp,
        };
        let agg = Aggregator::new(cfg, 3, &mut store, &mut rng)?;
        let nb = agg.neighbors(&sparse, &dense)?;
        let f = random_tensor(vec![10, 3], &mut rng);
        out.push(check_gradients(name, &store, &[f], 12, seed, |t, s, v| {
            let h = agg.forward(t, s, &sparse, &dense, v[0], &nb)?;
            let n = t.value(h).len();
            t.dot_const(h, projection(n, 2))
        })?);
    }
    Ok(())
}

fn layer_checks(seed: u64, out: &mut Vec<GradCheckReport>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x22);
    let cfg = micro_backbone(3);
    let plans = vec![
        plan_chunk(&cfg, &micro_points(&mut rng, 32))?,
        plan_chunk(&cfg, &micro_points(&mut rng, 32))?,
    ];
    let mut store = ParamStore::new();
    let sa = SharedMlp::new(&mut store, "sa", 5, &[4, 5], true, true, &mut rng);
    let f = random_tensor(vec![64, 2], &mut rng);
    out.push(check_gradients("set_abstraction", &store, &[f], 10, seed, |t, s, v| {
        let y = sa_forward(t, s, &sa, &plans, 0, Some(v[0]), Mode::Train)?;
        let n = t.value(y).len();
        t.dot_const(y, projection(n, 3))
    })?);
    let mut store = ParamStore::new();
    let fp = SharedMlp::new(&mut store, "fp", 5, &[4], true, true, &mut rng);
    let coarse = random_tensor(vec![32, 3], &mut rng);
    let skip = random_tensor(vec![64, 2], &mut rng);
    out.push(check_gradients("feature_propagation", &store, &[coarse, skip], 10, seed, |t, s, v| {
        let y = fp_forward(t, s, &fp, &plans, 0, v[0], Some(v[1]), Mode::Train)?;
        let n = t.value(y).len();
        t.dot_const(y, projection(n, 4))
    })?);
    Ok(())
}

fn backbone_checks(seed: u64, out: &mut Vec<GradCheckReport>) -> Result<()> {
    for fusion in Fusion::ALL {
        for use_xyz in [true, false] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x33);
            let mut store = ParamStore::new();
            let model = Pointnet2::new(micro_backbone(3), fusion, use_xyz, 4, &mut store, &mut rng)?;
            let plans = [
                plan_chunk(model.config(), &micro_points(&mut rng, 32))?,
                plan_chunk(model.config(), &micro_points(&mut rng, 32))?,
            ];
            let rgb: Vec<f64> = (0..64 * 3).map(|_| rng.random()).collect();
            let labels: Vec<u16> = (0..64).map(|i| (i % 3) as u16).collect();
            let inputs = if fusion.uses_lifted() { vec![random_tensor(vec![64, 4], &mut rng)] } else { vec![] };
            let name = format!("backbone_{}{}", fusion.name(), if use_xyz { "" } else { "_noxyz" });
            out.push(check_gradients(&name, &store, &inputs, 4, seed, |t, s, v| {
                let pi = PointInputs {
                    rgb: (fusion == Fusion::XyzRgb).then_some(rgb.as_slice()),
                    lifted: v.first().copied(),
                };
                let logits = model.forward(t, s, &plans, pi, Mode::Train)?;
                t.softmax_cross_entropy(logits, &labels, None)
            })?);
        }
    }
    Ok(())
}

fn net2d_check(seed: u64, out: &mut Vec<GradCheckReport>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x44);
    let mut store = ParamStore::<f64>::new();
    let cfg = Unet2dConfig {
        input_size: (8, 8),
        stage_channels: vec![3, 4],
        feature_dim: 3,
        num_classes: 3,
    };
    let net = Unet2d::new(cfg, &mut store, &mut rng)?;
    let x = random_tensor(vec![1, 3, 8, 8], &mut rng);
    let labels: Vec<u16> = (0..64).map(|i| (i % 3) as u16).collect();
    out.push(check_gradients("net2d", &store, &[x], 6, seed, |t, s, v| {
        let (f, l) = net.forward(t, s, v[0], Mode::Train)?;
        let rows = t.nchw_to_rows(l)?;
        let ce = t.softmax_cross_entropy(rows, &labels, None)?;
        let n = t.value(f).len();
        let p = t.dot_const(f, projection(n, 1))?;
        t.add(ce, p)
    })?);
    Ok(())
}

/// Whole models (live 2D network, lifting, backbone, loss) on a 32-point chunk of a
/// small rendered scene.
fn model_checks(seed: u64, out: &mut Vec<GradCheckReport>) -> Result<()> {
    let synth = SynthConfig {
        frames_per_scene: 3,
        width: 8,
        height: 8,
        focal: 6.0,
        point_density: 20.0,
        ..SynthConfig::default()
    };
    let scene = generate_scene(&SceneSpec::sample(&synth, "micro".into(), seed)?)?;
    let classes = crate::synth::NUM_CLASSES;
    for fusion in Fusion::ALL {
        let config = ModelConfig {
            net2d: Unet2dConfig {
                input_size: (8, 8),
                stage_channels: vec![2, 3],
                feature_dim: 3,
                num_classes: classes,
            },
            lift: AggregatorConfig {
                k: 3,
                mlp_channels: vec![4, 4],
                pooling: Pooling::Sum,
                use_mlp: true,
            },
            backbone: micro_backbone(classes),
            fusion,
            use_xyz: true,
        };
        let mut model = FusionModel::<f64>::new(config, seed)?;
        let head = format!("{}.head", crate::net2d::PREFIX);
        model.store.set_trainable(&head, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let pos = scene.cloud.positions();
        let p = pos[rng.random_range(0..pos.len())];
        let origin = [p[0] - 0.75, p[1] - 0.75];
        let members = crate::pipeline::chunk_members(pos, origin, 1.5);
        let spec = ChunkSpec {
            sampled: resample(&members, 32, &mut rng)?,
            origin_xy: origin,
            size: 1.5,
            members,
        };
        let chunk = prepare_chunk(&model, &scene, spec, 0.7, 2, 12, None, &mut rng)?;
        let labels = chunk.labels.clone();
        let chunks = [chunk];
        let name = format!("model_{}", fusion.name());
        out.push(check_gradients(&name, &model.store, &[], 3, seed, |t: &mut Tape<f64>, s, _| {
            let logits = forward_with_store(&model, s, t, &chunks, Mode::Train)?;
            t.softmax_cross_entropy(logits, &labels, None)
        })?);
    }
    Ok(())
}

/// Runs every check; callers compare each report against [`TOLERANCE`].
pub fn full_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = primitive_suite(seed)?;
    lift_checks(seed, &mut out)?;
    layer_checks(seed, &mut out)?;
    backbone_checks(seed, &mut out)?;
    net2d_check(seed, &mut out)?;
    model_checks(seed, &mut out)?;
    Ok(out)
}

/// Fixed-width summary table, one row per check.
pub fn summary_table(reports: &[GradCheckReport]) -> String {
    let mut s = format!("{:<28} {:>8} {:>6} {:>12}  status\n", "check", "coords", "kinks", "max_rel_err");
    for r in reports {
        s.push_str(&format!(
            "{:<28} {:>8} {:>6} {:>12.3e}  {}\n",
            r.name,
            r.checked,
            r.skipped_kinks,
            r.max_rel_error,
            if r.passes(TOLERANCE) { "ok" } else { "FAIL" }
        ));
    }
    s
}
