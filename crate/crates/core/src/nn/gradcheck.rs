//! Central finite-difference gradient checking in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{ParamStore, Tape, Tensor, Var};

/// Outcome of one finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates where the one-sided slopes disagree, i.e. a ReLU or max
    /// switch sits within the step; these are excluded from the error.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol && self.skipped_kinks * 50 <= self.checked
    }
}

pub const FD_STEP: f64 = 1e-4;
/// Fallback step for coordinates whose coarse estimate straddles a switch.
pub const FINE_STEP: f64 = 1e-6;
/// Errors below this at the coarse step need no retry.
const ACCEPT: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences, for every trainable parameter and every input tensor. At most
/// `coords_per_tensor` randomly chosen coordinates are probed per tensor.
pub fn check_gradients<F>(
    name: &str,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    coords_per_tensor: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
        let out = f(&mut tape, store, &vars)?;
        Ok(tape.value(out)[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let out = f(&mut tape, store, &vars)?;
    tape.backward(out)?;
    let mut with_grads = store.clone();
    with_grads.zero_grads();
    tape.accumulate_param_grads(&mut with_grads);
    let input_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], |g| g.to_vec()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        skipped_kinks: 0,
        max_rel_error: 0.0,
    };
    let base = eval(store, inputs)?;
    // Central difference at `FD_STEP`, retried at `FINE_STEP` when the coarse step
    // disagrees: a ReLU or max switch with a small slope change can sit inside the
    // coarse interval without tripping the one-sided test.
    let probe = |report: &mut GradCheckReport, analytic: f64, at: &dyn Fn(f64) -> Result<f64>| -> Result<()> {
        let mut last = None;
        for h in [FD_STEP, FINE_STEP] {
            let (plus, minus) = (at(h)?, at(-h)?);
            let fwd = (plus - base) / h;
            let bwd = (base - minus) / h;
            let kink = (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(REL_FLOOR);
            let err = relative_error(analytic, (plus - minus) / (2.0 * h));
            last = Some((kink, err));
            if !kink && err < ACCEPT {
                break;
            }
        }
        match last.expect("two steps tried") {
            (true, _) => report.skipped_kinks += 1,
            (false, err) => {
                report.checked += 1;
                report.max_rel_error = report.max_rel_error.max(err);
            }
        }
        Ok(())
    };

    let param_ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in param_ids {
        let len = store.value(id).len();
        let analytic = with_grads.get(id).value.grad.clone().unwrap_or_else(|| vec![0.0; len]);
        for c in pick_coords(len, coords_per_tensor, &mut rng) {
            let at = |h: f64| {
                let mut s = store.clone();
                s.get_mut(id).value.data_mut()[c] += h;
                eval(&s, inputs)
            };
            probe(&mut report, analytic[c], &at)?;
        }
    }
    for (ti, t) in inputs.iter().enumerate() {
        for c in pick_coords(t.len(), coords_per_tensor, &mut rng) {
            let at = |h: f64| {
                let mut shifted = inputs.to_vec();
                shifted[ti].data_mut()[c] += h;
                eval(store, &shifted)
            };
            probe(&mut report, input_grads[ti][c], &at)?;
        }
    }
    Ok(report)
}

fn pick_coords(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = rand::seq::index::sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Random tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Fixed random projection turning any output into a scalar loss.
pub fn projection(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Finite-difference checks of every tape primitive on small random shapes.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    use super::{GroupReduce, Mode};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let empty = ParamStore::<f64>::new();
    let coords = 24;

    let x = random_tensor(vec![5, 4], &mut rng);
    let w = random_tensor(vec![4, 3], &mut rng);
    let b = random_tensor(vec![3], &mut rng);
    out.push(check_gradients("linear", &empty, &[x, w, b], coords, seed, |t, _, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        let n = t.value(y).len();
        t.dot_const(y, projection(n, 1))
    })?);

    let x = random_tensor(vec![6, 5], &mut rng);
    out.push(check_gradients("relu", &empty, &[x], coords, seed, |t, _, v| {
        let y = t.relu(v[0]);
        t.dot_const(y, projection(30, 2))
    })?);

    let x = random_tensor(vec![2, 3, 6, 5], &mut rng);
    let w = random_tensor(vec![4, 3, 3, 3], &mut rng);
    let b = random_tensor(vec![4], &mut rng);
    out.push(check_gradients("conv2d", &empty, &[x, w, b], coords, seed, |t, _, v| {
        let y = t.conv2d(v[0], v[1], v[2])?;
        let n = t.value(y).len();
        t.dot_const(y, projection(n, 3))
    })?);

    let x = random_tensor(vec![2, 3, 4, 6], &mut rng);
    out.push(check_gradients("maxpool2d", &empty, &[x], coords, seed, |t, _, v| {
        let y = t.maxpool2d(v[0])?;
        let n = t.value(y).len();
        t.dot_const(y, projection(n, 4))
    })?);

    let x = random_tensor(vec![2, 3, 3, 2], &mut rng);
    let w = random_tensor(vec![3, 2, 2, 2], &mut rng);
    let b = random_tensor(vec![2], &mut rng);
    out.push(check_gradients("conv_transpose2d", &empty, &[x, w, b], coords, seed, |t, _, v| {
        let y = t.conv_transpose2d(v[0], v[1], v[2])?;
        let n = t.value(y).len();
        t.dot_const(y, projection(n, 5))
    })?);

    for (label, mode, shape) in [
        ("batchnorm_train_2d", Mode::Train, vec![2, 3, 2, 3]),
        ("batchnorm_train_rows", Mode::Train, vec![7, 4]),
        ("batchnorm_eval", Mode::Eval, vec![5, 4]),
    ] {
        let c = shape[1];
        let mut store = ParamStore::<f64>::new();
        let bn = super::BatchNorm::new(&mut store, "bn", c);
        store.get_mut(bn.gamma).value = random_tensor(vec![c], &mut rng);
        store.get_mut(bn.beta).value = random_tensor(vec![c], &mut rng);
        store.get_mut(bn.running_mean).value = random_tensor(vec![c], &mut rng);
        let rv: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
        store.get_mut(bn.running_var).value = Tensor::new(vec![c], rv)?;
        let x = random_tensor(shape, &mut rng);
        out.push(check_gradients(label, &store, &[x], coords, seed, |t, s, v| {
            let y = bn.forward(t, s, v[0], mode)?;
            let n = t.value(y).len();
            // squared terms keep the train-mode loss from being invariant
            let sq = t.relu(y);
            let p = t.dot_const(sq, projection(n, 6))?;
            let q = t.dot_const(y, projection(n, 7))?;
            t.add(p, q)
        })?);
    }

    let a = random_tensor(vec![3, 2], &mut rng);
    let b2 = random_tensor(vec![3, 4], &mut rng);
    out.push(check_gradients("concat", &empty, &[a, b2], coords, seed, |t, _, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        t.dot_const(y, projection(18, 8))
    })?);

    let x = random_tensor(vec![4, 3], &mut rng);
    out.push(check_gradients("gather_rows", &empty, &[x], coords, seed, |t, _, v| {
        let y = t.gather_rows(v[0], vec![2, 0, 2, 3, 1, 2])?;
        t.dot_const(y, projection(18, 9))
    })?);

    let x = random_tensor(vec![6, 3], &mut rng);
    out.push(check_gradients("scatter_add_rows", &empty, &[x], coords, seed, |t, _, v| {
        let y = t.scatter_add_rows(v[0], vec![1, 0, 1, 3, 3, 1], 4)?;
        t.dot_const(y, projection(12, 10))
    })?);

    let x = random_tensor(vec![4, 3], &mut rng);
    out.push(check_gradients("scale_rows", &empty, &[x], coords, seed, |t, _, v| {
        let y = t.scale_rows(v[0], vec![0.5, -2.0, 1.5, 0.25])?;
        t.dot_const(y, projection(12, 11))
    })?);

    for (label, kind) in [
        ("reduce_sum", GroupReduce::Sum),
        ("reduce_max", GroupReduce::Max),
        ("reduce_mean", GroupReduce::Mean),
    ] {
        let x = random_tensor(vec![12, 3], &mut rng);
        out.push(check_gradients(label, &empty, &[x], coords, seed, |t, _, v| {
            let y = t.reduce_groups(v[0], 4, kind)?;
            t.dot_const(y, projection(9, 12))
        })?);
    }

    let x = random_tensor(vec![2, 3, 2, 2], &mut rng);
    out.push(check_gradients("nchw_to_rows", &empty, &[x], coords, seed, |t, _, v| {
        let y = t.nchw_to_rows(v[0])?;
        t.dot_const(y, projection(24, 13))
    })?);

    let logits = random_tensor(vec![6, 4], &mut rng);
    let labels = [0u16, 3, crate::geom::IGNORE_LABEL, 1, 1, 2];
    let weights = [0.5, 2.0, 1.0, 1.5];
    out.push(check_gradients("softmax_cross_entropy", &empty, &[logits], coords, seed, |t, _, v| {
        t.softmax_cross_entropy(v[0], &labels, Some(&weights))
    })?);

    let a = random_tensor(vec![3, 3], &mut rng);
    let b3 = random_tensor(vec![3, 3], &mut rng);
    out.push(check_gradients("add", &empty, &[a, b3], coords, seed, |t, _, v| {
        let y = t.add(v[0], v[1])?;
        let y = t.relu(y);
        t.dot_const(y, projection(9, 14))
    })?);

    Ok(out)
}
