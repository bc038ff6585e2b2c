use rand::Rng;
use rand_distr::StandardNormal;

use super::params::ParamStore;
use crate::autograd::{Graph, ParamId, Scalar, Tensor, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.2;

fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_f64(shape, &data)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.add_param(
            format!("{name}.weight"),
            he_normal(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng),
        );
        let b = bias.then(|| ps.add_param(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = ps.var(g, self.w);
        let b = self.b.map(|b| ps.var(g, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// 2x2 stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct Upsample {
    w: ParamId,
    b: ParamId,
}

impl Upsample {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.add_param(format!("{name}.weight"), he_normal(&[cin, cout, 2, 2], cin, rng));
        let b = ps.add_param(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = ps.var(g, self.w);
        let b = ps.var(g, self.b);
        g.conv_transpose2d(x, w, Some(b), 2, 0)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: ps.add_param(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: ps.add_param(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: ps.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: ps.add_buffer(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
            ),
        }
    }

    /// Batch statistics in a training graph (recording running-stat
    /// updates), running statistics otherwise.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let gamma = ps.var(g, self.gamma);
        let beta = ps.var(g, self.beta);
        let eps = T::of(BN_EPS);
        if g.is_training() {
            let (n, _, h, w) = g.value(x).dims4();
            let m = (n * h * w) as f64;
            let (y, stats) = g.batch_norm(x, gamma, beta, None, eps);
            let (mean, var) = stats.expect("batch statistics");
            let mom = T::of(BN_MOMENTUM);
            let keep = T::one() - mom;
            let unbias = T::of(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
            let rm = ps
                .get(self.running_mean)
                .zip_map(&Tensor::from_vec(&[mean.len()], mean), |r, b| keep * r + mom * b);
            let rv = ps
                .get(self.running_var)
                .zip_map(&Tensor::from_vec(&[var.len()], var), |r, b| keep * r + mom * b * unbias);
            g.push_buffer_update(self.running_mean, rm);
            g.push_buffer_update(self.running_var, rv);
            y
        } else {
            let rm = ps.get(self.running_mean).data().to_vec();
            let rv = ps.get(self.running_var).data().to_vec();
            g.batch_norm(x, gamma, beta, Some((&rm, &rv)), eps).0
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        fin: usize,
        fout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: ps.add_param(format!("{name}.weight"), he_normal(&[fout, fin], fin, rng)),
            b: ps.add_param(format!("{name}.bias"), Tensor::zeros(&[fout])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = ps.var(g, self.w);
        let b = ps.var(g, self.b);
        g.linear(x, w, Some(b))
    }
}

/// Two 3x3 conv → BN → ReLU stages. With `final_relu = false` the second
/// stage stops after batch norm.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    c1: Conv2d,
    bn1: BatchNorm2d,
    c2: Conv2d,
    bn2: BatchNorm2d,
    final_relu: bool,
}

impl DoubleConv {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            c1: Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, 1, false, rng),
            bn1: BatchNorm2d::new(ps, &format!("{name}.bn1"), cout),
            c2: Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(ps, &format!("{name}.bn2"), cout),
            final_relu: true,
        }
    }

    pub fn linear_output(mut self) -> Self {
        self.final_relu = false;
        self
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let h = self.c1.forward(g, ps, x);
        let h = self.bn1.forward(g, ps, h);
        let h = g.relu(h);
        let h = self.c2.forward(g, ps, h);
        let h = self.bn2.forward(g, ps, h);
        if self.final_relu {
            g.relu(h)
        } else {
            h
        }
    }
}

/// 4x4 stride-2 conv → BN → LeakyReLU, halving the spatial size.
#[derive(Clone, Debug)]
pub struct DownBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl DownBlock {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), cin, cout, 4, 2, 1, false, rng),
            bn: BatchNorm2d::new(ps, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let h = self.conv.forward(g, ps, x);
        let h = self.bn.forward(g, ps, h);
        g.leaky_relu(h, T::of(LEAKY_SLOPE))
    }
}
