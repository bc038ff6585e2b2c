//! von-Mises-Fisher kernel decomposition of feature maps.
//!
//! Feature maps are NCHW tensors `[N, D, H', W']`; the kernel bank is a `[J, D]`
//! matrix of unit rows. Activations use the concentration `σ` shared by all
//! kernels and the normalising constant `C(σ) = e^σ`, so that
//!
//! ```text
//! a[n, j, p] = exp(σ·μ_jᵀ z[n, :, p] − σ)  ∈ [e^{-2σ}, 1]
//! ```
//!
//! Each operation exists twice: as a graph op (`*_op`, differentiable with
//! hand-written backward rules) and as a value-level function on the
//! [`FeatureMap`] / [`VmfActivationMap`] wrappers.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{CustomOp, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Guard for zero-norm feature vectors and kernels.
pub const EPS_NORM: f64 = 1e-8;

/// Bank of `J` unit-norm mean directions in `R^D` with a shared concentration.
#[derive(Clone, Debug, PartialEq)]
pub struct VmfKernelBank<T: Scalar> {
    mus: Tensor<T>,
    sigma: f64,
}

impl<T: Scalar> VmfKernelBank<T> {
    /// Wraps an existing `[J, D]` matrix, which must already have unit rows.
    pub fn new(mus: Tensor<T>, sigma: f64) -> Result<Self> {
        if mus.shape().len() != 2 || mus.shape()[0] == 0 || mus.shape()[1] < 2 {
            return Err(Error::DimensionMismatch(format!(
                "kernel bank must be [J >= 1, D >= 2], got {:?}",
                mus.shape()
            )));
        }
        if !(sigma > 0.0) {
            return Err(Error::config("sigma", "must be positive"));
        }
        let d = mus.shape()[1];
        for (j, row) in mus.data().chunks(d).enumerate() {
            let norm = row_norm(row);
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::DimensionMismatch(format!(
                    "kernel {j} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self { mus, sigma })
    }

    /// I.i.d. standard normal directions projected onto the unit sphere.
    pub fn random(num_kernels: usize, dim: usize, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        let mus = random_unit_rows(num_kernels, dim, rng);
        Self::new(mus, sigma)
    }

    pub fn mus(&self) -> &Tensor<T> {
        &self.mus
    }

    pub fn into_mus(self) -> Tensor<T> {
        self.mus
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `C(σ) = e^σ`.
    pub fn norm_const(&self) -> f64 {
        self.sigma.exp()
    }

    pub fn num_kernels(&self) -> usize {
        self.mus.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.mus.shape()[1]
    }

    pub fn kernel(&self, j: usize) -> &[T] {
        let d = self.dim();
        &self.mus.data()[j * d..(j + 1) * d]
    }
}

/// `[J, D]` matrix of standard normal rows scaled to unit norm.
pub fn random_unit_rows<T: Scalar>(rows: usize, dim: usize, rng: &mut impl Rng) -> Tensor<T> {
    loop {
        let data: Vec<f64> = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut t = Tensor::from_f64(&[rows, dim], &data);
        if project_rows(&mut t).is_ok() {
            return t;
        }
    }
}

fn row_norm<T: Scalar>(row: &[T]) -> f64 {
    row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
}

/// Rescales every row of a `[J, D]` matrix to unit L2 norm in place.
pub fn project_rows<T: Scalar>(mus: &mut Tensor<T>) -> Result<()> {
    let d = *mus.shape().last().expect("rank >= 1");
    for (j, row) in mus.data().chunks(d).enumerate() {
        let norm = row_norm(row);
        if !(norm > EPS_NORM) {
            return Err(Error::ZeroKernel { index: j, norm });
        }
    }
    for row in mus.data_mut().chunks_mut(d) {
        let inv = T::of(1.0 / row_norm(row));
        for v in row {
            *v *= inv;
        }
    }
    Ok(())
}

/// Removes from each row of `grad` its component along the matching unit
/// row of `mus`, leaving the part tangent to the sphere. Adam rescales
/// coordinates independently, so a radial part would still bend the step.
pub fn tangent_rows<T: Scalar>(grad: &mut Tensor<T>, mus: &Tensor<T>) {
    assert_eq!(grad.shape(), mus.shape(), "tangent_rows: shape mismatch");
    let d = *mus.shape().last().expect("rank >= 1");
    for (g, m) in grad.data_mut().chunks_mut(d).zip(mus.data().chunks(d)) {
        let radial = T::of(g.iter().zip(m).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>());
        for (a, &b) in g.iter_mut().zip(m) {
            *a -= radial * b;
        }
    }
}

/// Re-projects a (possibly drifted) bank onto the unit sphere. Idempotent.
pub fn project_kernels<T: Scalar>(mus: Tensor<T>, sigma: f64) -> Result<VmfKernelBank<T>> {
    let mut mus = mus;
    project_rows(&mut mus)?;
    VmfKernelBank::new(mus, sigma)
}

/// Encoder output `[N, D, H', W']`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Scalar> {
    values: Tensor<T>,
    normalized: bool,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 4 {
            return Err(Error::shape("feature map", &[0, 0, 0, 0], values.shape()));
        }
        Ok(Self {
            values,
            normalized: false,
        })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Feature vector at sample `n`, spatial index `p`.
    pub fn vector(&self, n: usize, p: usize) -> Vec<T> {
        let (_, d, h, w) = self.values.dims4();
        let hw = h * w;
        (0..d)
            .map(|k| self.values.data()[(n * d + k) * hw + p])
            .collect()
    }
}

/// Kernel activations `[N, J, H', W']` with entries in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VmfActivationMap<T: Scalar> {
    values: Tensor<T>,
}

impl<T: Scalar> VmfActivationMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 4 {
            return Err(Error::shape("activation map", &[0, 0, 0, 0], values.shape()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }
}

/// Unit-normalizes the feature vector at every spatial position.
pub fn normalize_features<T: Scalar>(z: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let mut g = Graph::new();
    let v = g.constant(z.values.clone());
    let out = normalize_features_op(&mut g, v)?;
    Ok(FeatureMap {
        values: g.value(out).clone(),
        normalized: true,
    })
}

/// `a[n, j, p] = exp(σ μ_jᵀ z_p) / C(σ)` for every position and kernel.
pub fn vmf_activations<T: Scalar>(
    zn: &FeatureMap<T>,
    bank: &VmfKernelBank<T>,
) -> Result<VmfActivationMap<T>> {
    if !zn.normalized {
        return Err(Error::DimensionMismatch(
            "features must be normalized before computing activations".into(),
        ));
    }
    let mut g = Graph::new();
    let z = g.constant(zn.values.clone());
    let mu = g.constant(bank.mus.clone());
    let out = vmf_activations_op(&mut g, z, mu, bank.sigma)?;
    VmfActivationMap::new(g.value(out).clone())
}

/// `−(N H' W')⁻¹ Σ_p max_j μ_jᵀ z_p`, in `[−1, 1]`.
pub fn clustering_loss<T: Scalar>(bank: &VmfKernelBank<T>, zn: &FeatureMap<T>) -> Result<T> {
    let mut g = Graph::new();
    let mu = g.constant(bank.mus.clone());
    let z = g.constant(zn.values.clone());
    let out = clustering_loss_op(&mut g, mu, z)?;
    Ok(g.value(out).item())
}

/// Rebuilds features as `Σ_j u_j μ_j` with `u` the L2-normalized activation
/// vector at each position.
pub fn recompose<T: Scalar>(
    a: &VmfActivationMap<T>,
    bank: &VmfKernelBank<T>,
) -> Result<FeatureMap<T>> {
    let mut g = Graph::new();
    let av = g.constant(a.values.clone());
    let mu = g.constant(bank.mus.clone());
    let out = recompose_op(&mut g, av, mu)?;
    FeatureMap::new(g.value(out).clone())
}

// ---------------------------------------------------------------------------
// Graph ops

struct NormalizeOp<T> {
    norms: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for NormalizeOp<T> {
    fn name(&self) -> &'static str {
        "normalize_features"
    }

    fn backward(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (n, d, h, w) = y.dims4();
        let hw = h * w;
        let (yd, gd) = (y.data(), g.data());
        let mut gx = vec![T::zero(); yd.len()];
        for s in 0..n {
            for p in 0..hw {
                let idx = |k: usize| (s * d + k) * hw + p;
                let dot: T = (0..d).map(|k| yd[idx(k)] * gd[idx(k)]).sum();
                let inv = T::one() / self.norms[s * hw + p];
                for k in 0..d {
                    gx[idx(k)] = (gd[idx(k)] - yd[idx(k)] * dot) * inv;
                }
            }
        }
        vec![Some(Tensor::from_vec(y.shape(), gx))]
    }
}

/// Differentiable per-position L2 normalization of `[N, D, H, W]`.
pub fn normalize_features_op<T: Scalar>(g: &mut Graph<T>, z: Var) -> Result<Var> {
    let x = g.value(z);
    if x.shape().len() != 4 {
        return Err(Error::shape("feature map", &[0, 0, 0, 0], x.shape()));
    }
    let (n, d, h, w) = x.dims4();
    let hw = h * w;
    let xd = x.data();
    let mut norms = Vec::with_capacity(n * hw);
    let mut out = vec![T::zero(); xd.len()];
    for s in 0..n {
        for p in 0..hw {
            let idx = |k: usize| (s * d + k) * hw + p;
            let norm = (0..d)
                .map(|k| xd[idx(k)].as_f64().powi(2))
                .sum::<f64>()
                .sqrt();
            // NaN passes through so that the loss reports it
            if norm <= EPS_NORM {
                return Err(Error::ZeroFeatureVector {
                    position: s * hw + p,
                    norm,
                });
            }
            let nt = T::of(norm);
            for k in 0..d {
                out[idx(k)] = xd[idx(k)] / nt;
            }
            norms.push(nt);
        }
    }
    let value = Tensor::from_vec(x.shape(), out);
    Ok(g.custom(&[z], value, Box::new(NormalizeOp { norms })))
}

/// Cosine matrix `[J, HW]` for one sample: `μ [J, D] · z_n [D, HW]`.
fn cosines<T: Scalar>(mu: &[T], j: usize, d: usize, z: &[T], hw: usize) -> Vec<T> {
    let mut cos = vec![T::zero(); j * hw];
    for jj in 0..j {
        let row = &mut cos[jj * hw..(jj + 1) * hw];
        for k in 0..d {
            let m = mu[jj * d + k];
            let zrow = &z[k * hw..(k + 1) * hw];
            for (c, &zv) in row.iter_mut().zip(zrow) {
                *c += m * zv;
            }
        }
    }
    cos
}

fn check_bank_dims<T: Scalar>(g: &Graph<T>, mu: Var, z: Var) -> Result<(usize, usize)> {
    let ms = g.shape(mu);
    let zs = g.shape(z);
    if ms.len() != 2 || zs.len() != 4 {
        return Err(Error::DimensionMismatch(format!(
            "expected bank [J, D] and features [N, D, H, W], got {ms:?} and {zs:?}"
        )));
    }
    if ms[1] != zs[1] {
        return Err(Error::DimensionMismatch(format!(
            "kernel dimension {} differs from feature channels {}",
            ms[1], zs[1]
        )));
    }
    Ok((ms[0], ms[1]))
}

struct ActivationOp<T> {
    sigma: T,
}

impl<T: Scalar> CustomOp<T> for ActivationOp<T> {
    fn name(&self) -> &'static str {
        "vmf_activations"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        a: &Tensor<T>,
        g: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let (z, mu) = (inputs[0], inputs[1]);
        let (n, d, h, w) = z.dims4();
        let j = mu.shape()[0];
        let hw = h * w;
        // d a / d cos = σ a
        let gc: Vec<T> = g
            .data()
            .iter()
            .zip(a.data())
            .map(|(&gv, &av)| gv * av * self.sigma)
            .collect();
        let mut gz = vec![T::zero(); z.numel()];
        let mut gmu = vec![T::zero(); j * d];
        for s in 0..n {
            let gcs = &gc[s * j * hw..(s + 1) * j * hw];
            let zs = &z.data()[s * d * hw..(s + 1) * d * hw];
            let gzs = &mut gz[s * d * hw..(s + 1) * d * hw];
            for jj in 0..j {
                let grow = &gcs[jj * hw..(jj + 1) * hw];
                for k in 0..d {
                    let m = mu.data()[jj * d + k];
                    let zrow = &zs[k * hw..(k + 1) * hw];
                    let gzrow = &mut gzs[k * hw..(k + 1) * hw];
                    let mut acc = T::zero();
                    for p in 0..hw {
                        gzrow[p] += m * grow[p];
                        acc += grow[p] * zrow[p];
                    }
                    gmu[jj * d + k] += acc;
                }
            }
        }
        vec![
            Some(Tensor::from_vec(z.shape(), gz)),
            Some(Tensor::from_vec(mu.shape(), gmu)),
        ]
    }
}

/// Differentiable vMF activations, computed in log space as `σ(μᵀz − 1)`.
pub fn vmf_activations_op<T: Scalar>(g: &mut Graph<T>, zn: Var, mu: Var, sigma: f64) -> Result<Var> {
    let (j, d) = check_bank_dims(g, mu, zn)?;
    let (n, _, h, w) = g.value(zn).dims4();
    let hw = h * w;
    let s = T::of(sigma);
    let mut out = Vec::with_capacity(n * j * hw);
    for smp in 0..n {
        let zs = &g.value(zn).data()[smp * d * hw..(smp + 1) * d * hw];
        let cos = cosines(g.value(mu).data(), j, d, zs, hw);
        out.extend(cos.into_iter().map(|c| (s * (c - T::one())).exp()));
    }
    let value = Tensor::from_vec(&[n, j, h, w], out);
    Ok(g.custom(&[zn, mu], value, Box::new(ActivationOp { sigma: s })))
}

struct ClusteringOp {
    /// Winning kernel per position, `N * HW` entries.
    winners: Vec<usize>,
}

impl<T: Scalar> CustomOp<T> for ClusteringOp {
    fn name(&self) -> &'static str {
        "clustering_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (mu, z) = (inputs[0], inputs[1]);
        let (n, d, h, w) = z.dims4();
        let hw = h * w;
        let scale = -g.item() / T::of((n * hw) as f64);
        let mut gmu = vec![T::zero(); mu.numel()];
        let mut gz = vec![T::zero(); z.numel()];
        for s in 0..n {
            for p in 0..hw {
                let jj = self.winners[s * hw + p];
                for k in 0..d {
                    let zi = (s * d + k) * hw + p;
                    gmu[jj * d + k] += scale * z.data()[zi];
                    gz[zi] = scale * mu.data()[jj * d + k];
                }
            }
        }
        vec![
            Some(Tensor::from_vec(mu.shape(), gmu)),
            Some(Tensor::from_vec(z.shape(), gz)),
        ]
    }
}

/// Differentiable clustering loss; ties pick the lowest kernel index.
pub fn clustering_loss_op<T: Scalar>(g: &mut Graph<T>, mu: Var, zn: Var) -> Result<Var> {
    let (j, d) = check_bank_dims(g, mu, zn)?;
    let (n, _, h, w) = g.value(zn).dims4();
    let hw = h * w;
    let mut winners = Vec::with_capacity(n * hw);
    let mut total = 0.0f64;
    for s in 0..n {
        let zs = &g.value(zn).data()[s * d * hw..(s + 1) * d * hw];
        let cos = cosines(g.value(mu).data(), j, d, zs, hw);
        for p in 0..hw {
            let mut best = 0;
            for jj in 1..j {
                if cos[jj * hw + p] > cos[best * hw + p] {
                    best = jj;
                }
            }
            total += cos[best * hw + p].as_f64();
            winners.push(best);
        }
    }
    let value = Tensor::scalar(T::of(-total / (n * hw) as f64));
    Ok(g.custom(&[mu, zn], value, Box::new(ClusteringOp { winners })))
}

struct RecomposeOp<T> {
    /// L2-normalized activations `[N, J, H, W]`.
    unit: Vec<T>,
    norms: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for RecomposeOp<T> {
    fn name(&self) -> &'static str {
        "recompose"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (a, mu) = (inputs[0], inputs[1]);
        let (n, j, h, w) = a.dims4();
        let d = mu.shape()[1];
        let hw = h * w;
        let mut ga = vec![T::zero(); a.numel()];
        let mut gmu = vec![T::zero(); mu.numel()];
        let mut du = vec![T::zero(); j * hw];
        for s in 0..n {
            let gs = &g.data()[s * d * hw..(s + 1) * d * hw];
            let us = &self.unit[s * j * hw..(s + 1) * j * hw];
            du.fill(T::zero());
            for jj in 0..j {
                let urow = &us[jj * hw..(jj + 1) * hw];
                let durow = &mut du[jj * hw..(jj + 1) * hw];
                for k in 0..d {
                    let m = mu.data()[jj * d + k];
                    let grow = &gs[k * hw..(k + 1) * hw];
                    let mut acc = T::zero();
                    for p in 0..hw {
                        durow[p] += m * grow[p];
                        acc += urow[p] * grow[p];
                    }
                    gmu[jj * d + k] += acc;
                }
            }
            for p in 0..hw {
                let dot: T = (0..j).map(|jj| us[jj * hw + p] * du[jj * hw + p]).sum();
                let inv = T::one() / self.norms[s * hw + p];
                for jj in 0..j {
                    let i = jj * hw + p;
                    ga[s * j * hw + i] = (du[i] - us[i] * dot) * inv;
                }
            }
        }
        vec![
            Some(Tensor::from_vec(a.shape(), ga)),
            Some(Tensor::from_vec(mu.shape(), gmu)),
        ]
    }
}

/// Differentiable recomposition `z̃_p = Σ_j (a_p / ‖a_p‖₂)_j μ_j`.
pub fn recompose_op<T: Scalar>(g: &mut Graph<T>, a: Var, mu: Var) -> Result<Var> {
    let ms = g.shape(mu).to_vec();
    let as_ = g.shape(a).to_vec();
    if ms.len() != 2 || as_.len() != 4 || ms[0] != as_[1] {
        return Err(Error::DimensionMismatch(format!(
            "activations {as_:?} do not match kernel bank {ms:?}"
        )));
    }
    let (j, d) = (ms[0], ms[1]);
    let (n, _, h, w) = g.value(a).dims4();
    let hw = h * w;
    let ad = g.value(a).data();
    let mut unit = vec![T::zero(); ad.len()];
    let mut norms = Vec::with_capacity(n * hw);
    for s in 0..n {
        for p in 0..hw {
            let idx = |jj: usize| (s * j + jj) * hw + p;
            // Scale by the largest entry so tiny activations (down to e^{-2σ})
            // do not underflow when squared. NaN propagates to the loss.
            let peak = (0..j)
                .map(|jj| ad[idx(jj)].abs())
                .fold(T::zero(), |m, v| if v > m || v.is_nan() || m.is_nan() { v + m * T::zero() } else { m });
            if peak == T::zero() || peak.is_infinite() {
                return Err(Error::DegenerateActivation {
                    position: s * hw + p,
                });
            }
            let scaled: T = (0..j).map(|jj| (ad[idx(jj)] / peak).powi(2)).sum();
            let norm = peak * scaled.sqrt();
            for jj in 0..j {
                unit[idx(jj)] = ad[idx(jj)] / norm;
            }
            norms.push(norm);
        }
    }
    let mut out = vec![T::zero(); n * d * hw];
    let mud = g.value(mu).data();
    for s in 0..n {
        let us = &unit[s * j * hw..(s + 1) * j * hw];
        let os = &mut out[s * d * hw..(s + 1) * d * hw];
        for jj in 0..j {
            let urow = &us[jj * hw..(jj + 1) * hw];
            for k in 0..d {
                let m = mud[jj * d + k];
                for (o, &u) in os[k * hw..(k + 1) * hw].iter_mut().zip(urow) {
                    *o += m * u;
                }
            }
        }
    }
    let value = Tensor::from_vec(&[n, d, h, w], out);
    Ok(g.custom(&[a, mu], value, Box::new(RecomposeOp { unit, norms })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{numeric_grad, rel_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Single-sample map from per-position vectors laid out `[H*W][D]`.
    fn fmap(vecs: &[&[f64]], h: usize, w: usize) -> FeatureMap<f64> {
        let d = vecs[0].len();
        let hw = h * w;
        let mut data = vec![0.0; d * hw];
        for (p, v) in vecs.iter().enumerate() {
            for k in 0..d {
                data[k * hw + p] = v[k];
            }
        }
        FeatureMap::new(Tensor::from_vec(&[1, d, h, w], data)).unwrap()
    }

    fn bank(rows: &[&[f64]]) -> VmfKernelBank<f64> {
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        VmfKernelBank::new(Tensor::from_vec(&[rows.len(), d], data), 30.0).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let z = fmap(&[&[3.0, 4.0], &[1.0, 0.0]], 1, 2);
        let n = normalize_features(&z).unwrap();
        assert!(n.is_normalized());
        let v0 = n.vector(0, 0);
        assert!((v0[0] - 0.6).abs() < 1e-15 && (v0[1] - 0.8).abs() < 1e-15);
        assert_eq!(n.vector(0, 1), vec![1.0, 0.0]);
        let zero = fmap(&[&[0.0, 0.0]], 1, 1);
        assert!(matches!(
            normalize_features(&zero),
            Err(Error::ZeroFeatureVector { .. })
        ));
    }

    #[test]
    fn activation_examples() {
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let z = normalize_features(&fmap(&[&[1.0, 0.0], &[0.6, 0.8]], 1, 2)).unwrap();
        let a = vmf_activations(&z, &b).unwrap();
        let v = a.values().data();
        // layout [1, J=2, 1, 2]: kernel 0 at positions 0,1 then kernel 1
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert!((v[2] - (-30.0f64).exp()).abs() < 1e-25);
        assert!((v[1] - (-12.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn activation_rejects_dimension_mismatch() {
        let b = bank(&[&[1.0, 0.0, 0.0]]);
        let z = normalize_features(&fmap(&[&[1.0, 0.0]], 1, 1)).unwrap();
        assert!(matches!(
            vmf_activations(&z, &b),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            clustering_loss(&b, &z),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn clustering_examples() {
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let z = normalize_features(&fmap(&[&[0.6, 0.8]], 1, 1)).unwrap();
        assert!((clustering_loss(&b, &z).unwrap() + 0.8).abs() < 1e-15);
        let z = normalize_features(&fmap(&[&[1.0, 0.0], &[0.0, 1.0]], 2, 1)).unwrap();
        assert!((clustering_loss(&b, &z).unwrap() + 1.0).abs() < 1e-15);
        let b3 = bank(&[&[1.0, 0.0, 0.0]]);
        let z = normalize_features(&fmap(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]], 1, 2)).unwrap();
        assert_eq!(clustering_loss(&b3, &z).unwrap(), 0.0);
    }

    #[test]
    fn recompose_examples() {
        let s = 0.5f64.sqrt();
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0], &[s, s]]);
        // one-hot at channel 2
        let a = VmfActivationMap::new(Tensor::from_vec(&[1, 3, 1, 1], vec![0.0, 0.0, 0.7])).unwrap();
        let z = recompose(&a, &b).unwrap();
        assert!((z.vector(0, 0)[0] - s).abs() < 1e-15);
        assert!((z.vector(0, 0)[1] - s).abs() < 1e-15);
        // uniform activations -> (1/sqrt(J)) Σ μ_j
        let a = VmfActivationMap::new(Tensor::from_vec(&[1, 3, 1, 1], vec![0.2; 3])).unwrap();
        let z = recompose(&a, &b).unwrap();
        let c = 1.0 / 3f64.sqrt();
        assert!((z.vector(0, 0)[0] - c * (1.0 + s)).abs() < 1e-14);
        assert!((z.vector(0, 0)[1] - c * (1.0 + s)).abs() < 1e-14);
        let zero = VmfActivationMap::new(Tensor::zeros(&[1, 3, 1, 1])).unwrap();
        assert!(matches!(
            recompose(&zero, &b),
            Err(Error::DegenerateActivation { .. })
        ));
        let wrong = VmfActivationMap::new(Tensor::full(&[1, 2, 1, 1], 1.0)).unwrap();
        assert!(matches!(
            recompose(&wrong, &b),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn recompose_of_tiny_activations_does_not_underflow() {
        let b: VmfKernelBank<f32> =
            VmfKernelBank::new(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]), 30.0).unwrap();
        let tiny = (-60.0f32).exp();
        let a = VmfActivationMap::new(Tensor::from_vec(&[1, 2, 1, 1], vec![tiny, tiny])).unwrap();
        let z = recompose(&a, &b).unwrap();
        let c = 0.5f32.sqrt();
        assert!((z.vector(0, 0)[0] - c).abs() < 1e-6);
    }

    #[test]
    fn project_examples() {
        let b = project_kernels(Tensor::from_vec(&[1, 2], vec![2.0, 0.0]), 30.0).unwrap();
        assert_eq!(b.mus().data(), &[1.0, 0.0]);
        let again = project_kernels(b.mus().clone(), 30.0).unwrap();
        assert_eq!(again, b);
        assert!(matches!(
            project_kernels(Tensor::<f64>::from_vec(&[1, 2], vec![0.0, 0.0]), 30.0),
            Err(Error::ZeroKernel { index: 0, .. })
        ));
    }

    #[test]
    fn bank_invariants_enforced() {
        let t = Tensor::<f64>::from_vec(&[1, 2], vec![2.0, 0.0]);
        assert!(VmfKernelBank::new(t.clone(), 30.0).is_err());
        let u = Tensor::<f64>::from_vec(&[1, 2], vec![1.0, 0.0]);
        assert!(VmfKernelBank::new(u.clone(), 0.0).is_err());
        assert!(VmfKernelBank::new(Tensor::<f64>::from_vec(&[1, 1], vec![1.0]), 1.0).is_err());
        let b = VmfKernelBank::new(u, 30.0).unwrap();
        assert!((b.norm_const() - 30f64.exp()).abs() < 1.0);
    }

    fn random_features(n: usize, d: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data: Vec<f64> = (0..n * d * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[n, d, h, w], data)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let (d, j, h, w) = (
                rng.random_range(2..=8),
                rng.random_range(1..=4),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
            );
            let z = random_features(2, d, h, w, &mut rng);
            let mu: Tensor<f64> = random_unit_rows(j, d, &mut rng);
            let sigma = 2.0;
            let f = |z: &Tensor<f64>, mu: &Tensor<f64>, want_grads: bool| {
                let mut g = Graph::new();
                let zv = g.input(z.clone());
                let mv = g.input(mu.clone());
                let zn = normalize_features_op(&mut g, zv).unwrap();
                let a = vmf_activations_op(&mut g, zn, mv, sigma).unwrap();
                let r = recompose_op(&mut g, a, mv).unwrap();
                let sq = g.square(r);
                let rec = g.sum_all(sq);
                let clu = clustering_loss_op(&mut g, mv, zn).unwrap();
                let l = g.add(rec, clu);
                let val = g.value(l).item();
                let grads = want_grads.then(|| {
                    let gr = g.backward(l);
                    (gr.wrt(zv).unwrap().clone(), gr.wrt(mv).unwrap().clone())
                });
                (val, grads)
            };
            let (_, grads) = f(&z, &mu, true);
            let (gz, gmu) = grads.unwrap();
            let nz = numeric_grad(|x| f(x, &mu, false).0, &z, 1e-6);
            let nmu = numeric_grad(|x| f(&z, x, false).0, &mu, 1e-6);
            assert!(rel_error(&gz, &nz) < 1e-4, "dz {}", rel_error(&gz, &nz));
            assert!(rel_error(&gmu, &nmu) < 1e-4, "dmu {}", rel_error(&gmu, &nmu));
        }
    }

    #[test]
    fn tangent_rows_are_orthogonal_to_their_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mus: Tensor<f64> = random_unit_rows(3, 5, &mut rng);
        let mut g: Tensor<f64> = random_unit_rows(3, 5, &mut rng).map(|v| 2.0 * v);
        tangent_rows(&mut g, &mus);
        for (a, b) in g.data().chunks(5).zip(mus.data().chunks(5)) {
            assert!(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().abs() < 1e-12);
        }
        let once = g.clone();
        tangent_rows(&mut g, &mus);
        assert!(g.data().iter().zip(once.data()).all(|(x, y)| (x - y).abs() < 1e-12));
        let mut radial = mus.clone();
        tangent_rows(&mut radial, &mus);
        assert!(radial.data().iter().all(|v| v.abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn activations_bounded(seed in 0u64..1000, d in 2usize..6, j in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = FeatureMap::new(random_features(1, d, 2, 3, &mut rng)).unwrap();
            let zn = normalize_features(&z).unwrap();
            let b = VmfKernelBank::random(j, d, 30.0, &mut rng).unwrap();
            let a = vmf_activations(&zn, &b).unwrap();
            let lo = (-60.0f64).exp() * (1.0 - 1e-9);
            for &v in a.values().data() {
                prop_assert!(v >= lo && v <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn argmax_invariant_to_positive_scaling(seed in 0u64..1000, scale in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = random_features(1, 4, 2, 2, &mut rng);
            let b = VmfKernelBank::random(3, 4, 30.0, &mut rng).unwrap();
            let argmaxes = |t: Tensor<f64>| {
                let a = vmf_activations(&normalize_features(&FeatureMap::new(t).unwrap()).unwrap(), &b).unwrap();
                (0..4).map(|p| {
                    (0..3).max_by(|&x, &y| a.values().data()[x * 4 + p]
                        .partial_cmp(&a.values().data()[y * 4 + p]).unwrap()).unwrap()
                }).collect::<Vec<_>>()
            };
            prop_assert_eq!(argmaxes(raw.clone()), argmaxes(raw.map(|v| v * scale)));
        }

        #[test]
        fn projection_idempotent(seed in 0u64..1000, j in 1usize..6, d in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<f64> = (0..j * d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let once = project_kernels(Tensor::from_vec(&[j, d], raw), 30.0).unwrap();
            let twice = project_kernels(once.mus().clone(), 30.0).unwrap();
            for (a, b) in once.mus().data().iter().zip(twice.mus().data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
