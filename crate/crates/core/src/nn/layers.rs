//! Parameterized building blocks over the tape primitives.

use rand::Rng;

use crate::error::Result;
use crate::scalar::Real;

use super::{Mode, ParamId, ParamStore, Tape, Tensor, Var};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add_kaiming(format!("{name}.weight"), vec![cin, cout], cin, rng),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]), true),
            cin,
            cout,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![channels], T::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(vec![channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(vec![channels], T::one()), false),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.batchnorm(
            x,
            g,
            b,
            store,
            self.running_mean,
            self.running_var,
            mode,
            T::lit(BN_MOMENTUM),
            T::lit(BN_EPS),
        )
    }
}

/// Square same-size convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Conv2d {
            weight: store.add_kaiming(
                format!("{name}.weight"),
                vec![cout, cin, kernel, kernel],
                cin * kernel * kernel,
                rng,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]), true),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        ConvTranspose2d {
            weight: store.add_kaiming(format!("{name}.weight"), vec![cin, cout, 2, 2], cin, rng),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]), true),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv_transpose2d(x, w, b)
    }
}

/// Point-wise MLP: each layer is linear, optional batch norm, then ReLU.
/// With `final_activation == false` the last layer is a bare linear map.
#[derive(Clone, Debug)]
pub struct SharedMlp {
    layers: Vec<(Linear, Option<BatchNorm>)>,
    final_activation: bool,
}

impl SharedMlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        channels: &[usize],
        batch_norm: bool,
        final_activation: bool,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(channels.len());
        let mut c = cin;
        for (i, &out) in channels.iter().enumerate() {
            let last = i + 1 == channels.len();
            let lin = Linear::new(store, &format!("{name}.{i}"), c, out, rng);
            let bn = (batch_norm && (!last || final_activation))
                .then(|| BatchNorm::new(store, &format!("{name}.{i}.bn"), out));
            layers.push((lin, bn));
            c = out;
        }
        SharedMlp {
            layers,
            final_activation,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |(l, _)| l.cout)
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |(l, _)| l.cin)
    }

    pub fn layers(&self) -> &[(Linear, Option<BatchNorm>)] {
        &self.layers
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, mut x: Var, mode: Mode) -> Result<Var> {
        let n = self.layers.len();
        for (i, (lin, bn)) in self.layers.iter().enumerate() {
            x = lin.forward(tape, store, x)?;
            if let Some(bn) = bn {
                x = bn.forward(tape, store, x, mode)?;
            }
            if i + 1 < n || self.final_activation {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

/// Writes queued running-statistic updates from a training-mode forward.
pub fn apply_stat_updates<T: Real>(tape: &Tape<T>, store: &mut ParamStore<T>) {
    for up in tape.stat_updates() {
        store.get_mut(up.id).value.data_mut().copy_from_slice(&up.value);
    }
}
