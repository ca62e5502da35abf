//! Parameterized building blocks shared by the detector and SkinNet.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Conv2dSpec, ParamId, ParamStore, Session, Tensor, Var};

/// Glorot-uniform tensor: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-a..a))
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        spec: Conv2dSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = store.add(
            format!("{name}.kernel"),
            glorot(&[k, k, cin, cout], k * k * cin, k * k * cout, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv {
            kernel,
            bias,
            spec,
            cin,
            cout,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let k = s.param(self.kernel);
        let b = s.param(self.bias);
        s.graph.conv2d(x, k, b, self.spec)
    }

    pub fn forward_relu(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.forward(s, x)?;
        s.graph.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            glorot(&[n_in, n_out], n_in, n_out, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[n_out]));
        Dense { weight, bias }
    }

    /// `x` is `[rows, n_in]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.linear(x, w, b)
    }
}
