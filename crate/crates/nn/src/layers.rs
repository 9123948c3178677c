use rand::Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Square-kernel convolution with He-normal initialisation.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(vec![cout, cin, kernel, kernel], (2.0 / fan_in).sqrt(), rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![cout])));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    /// Overwrites the weights (and bias) with zeros.
    pub fn zero_init(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut R) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(vec![fout, fin], (1.0 / fin as f64).sqrt(), rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![fout]));
        Self { weight, bias }
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let groups = largest_divisor_at_most(channels, groups);
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            groups,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.group_norm(x, g, b, self.groups)
    }
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n).max(1))
        .rev()
        .find(|d| n.is_multiple_of(*d))
        .unwrap_or(1)
}
