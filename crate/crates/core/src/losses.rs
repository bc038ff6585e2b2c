//! Segmentation, reconstruction, weak-label and cross pseudo supervision
//! losses as graph operations. L1 terms use mean reductions.

use crate::autograd::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-6;

/// Probability above which a class channel counts as foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.5;

fn same_shape<T: Scalar>(g: &Graph<T>, what: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(what, g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// Soft Dice loss per sample, averaged over classes: `[N, K, H, W] -> [N]`.
pub fn dice_loss_per_sample<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(g, "dice target", pred, gt)?;
    let shape = g.shape(pred).to_vec();
    if shape.len() < 2 {
        return Err(Error::shape("dice prediction", &[0, 0, 0, 0], &shape));
    }
    let k = shape[1];
    let eps = T::of(DICE_EPS);
    let pg = g.mul(pred, gt);
    let inter = g.sum_trailing(pg, 2);
    let pp = g.square(pred);
    let p2 = g.sum_trailing(pp, 2);
    let gg = g.square(gt);
    let g2 = g.sum_trailing(gg, 2);
    let num = g.scale(inter, T::of(2.0));
    let num = g.add_scalar(num, eps);
    let den = g.add(p2, g2);
    let den = g.add_scalar(den, eps);
    let ratio = g.div(num, den);
    let per_class = g.scale(ratio, -T::one());
    let per_class = g.add_scalar(per_class, T::one());
    let summed = g.sum_trailing(per_class, 1);
    Ok(g.scale(summed, T::of(1.0 / k as f64)))
}

/// Soft Dice loss averaged over samples and classes.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    let per = dice_loss_per_sample(g, pred, gt)?;
    Ok(g.mean_all(per))
}

/// Dice loss gated per sample: `labeled[n]` selects which samples contribute,
/// and the result is the mean over those. With no labeled sample the term is
/// an exact zero.
pub fn gated_dice_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    gt: Var,
    labeled: &[bool],
) -> Result<Var> {
    let n = g.shape(pred).first().copied().unwrap_or(0);
    if labeled.len() != n {
        return Err(Error::shape("dice gate", &[n], &[labeled.len()]));
    }
    let count = labeled.iter().filter(|&&l| l).count();
    if count == 0 {
        same_shape(g, "dice target", pred, gt)?;
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let per = dice_loss_per_sample(g, pred, gt)?;
    let weights: Vec<T> = labeled
        .iter()
        .map(|&l| if l { T::one() } else { T::zero() })
        .collect();
    let w = g.constant(Tensor::from_vec(&[n], weights));
    let weighted = g.mul(per, w);
    let total = g.sum_all(weighted);
    Ok(g.scale(total, T::of(1.0 / count as f64)))
}

/// Mean absolute error between an image and its reconstruction.
pub fn reconstruction_loss<T: Scalar>(g: &mut Graph<T>, x: Var, x_hat: Var) -> Result<Var> {
    same_shape(g, "reconstruction", x, x_hat)?;
    let d = g.sub(x_hat, x);
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

/// Mean absolute error between predicted and true presence vectors.
pub fn weak_loss<T: Scalar>(g: &mut Graph<T>, c_hat: Var, c: Var) -> Result<Var> {
    same_shape(g, "weak label", c_hat, c)?;
    let d = g.sub(c_hat, c);
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

/// Hard labels from per-class sigmoid probabilities `[N, K, H, W]`:
/// 0 where every channel is below the foreground threshold, otherwise
/// `1 + argmax` (ties to the lowest class). Returns `[N, H, W]`.
pub fn hard_labels<T: Scalar>(probs: &Tensor<T>) -> Vec<u8> {
    let (n, k, h, w) = probs.dims4();
    let hw = h * w;
    let d = probs.data();
    let thr = T::of(FOREGROUND_THRESHOLD);
    let mut out = vec![0u8; n * hw];
    for s in 0..n {
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = d[s * k * hw + p];
            for c in 1..k {
                let v = d[(s * k + c) * hw + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            if best_v >= thr {
                out[s * hw + p] = (best + 1) as u8;
            }
        }
    }
    out
}

/// One-hot encoding of [`hard_labels`] with `K` foreground channels.
pub fn harden<T: Scalar>(probs: &Tensor<T>) -> Tensor<T> {
    let (n, k, h, w) = probs.dims4();
    one_hot(&hard_labels(probs), n, k, h, w)
}

/// `[N, H, W]` labels in `0..=K` to `[N, K, H, W]` foreground indicators.
pub fn one_hot<T: Scalar>(labels: &[u8], n: usize, k: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    assert_eq!(labels.len(), n * hw, "label count");
    let mut out = Tensor::zeros(&[n, k, h, w]);
    let d = out.data_mut();
    for s in 0..n {
        for p in 0..hw {
            let l = labels[s * hw + p] as usize;
            if l > 0 {
                d[(s * k + l - 1) * hw + p] = T::one();
            }
        }
    }
    out
}

/// Cross pseudo supervision: Dice of `pred` against the hardened `pseudo`.
/// `pseudo` must already be cut from the graph with [`Graph::detach`].
pub fn cps_loss<T: Scalar>(g: &mut Graph<T>, pseudo: Var, pred: Var) -> Result<Var> {
    if g.requires_grad(pseudo) {
        return Err(Error::MissingStopGradient);
    }
    same_shape(g, "pseudo label", pseudo, pred)?;
    let hard = harden(g.value(pseudo));
    let target = g.constant(hard);
    dice_loss(g, pred, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{numeric_grad, rel_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation of the soft Dice formula.
    fn dice_oracle(p: &[f64], gt: &[f64], n: usize, k: usize) -> f64 {
        let hw = p.len() / (n * k);
        let mut total = 0.0;
        for s in 0..n {
            for c in 0..k {
                let r = (s * k + c) * hw..(s * k + c + 1) * hw;
                let inter: f64 = p[r.clone()].iter().zip(&gt[r.clone()]).map(|(a, b)| a * b).sum();
                let pp: f64 = p[r.clone()].iter().map(|a| a * a).sum();
                let gg: f64 = gt[r].iter().map(|a| a * a).sum();
                total += 1.0 - (2.0 * inter + DICE_EPS) / (pp + gg + DICE_EPS);
            }
        }
        total / (n * k) as f64
    }

    fn eval2(
        f: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
        a: Tensor<f64>,
        b: Tensor<f64>,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let a = g.constant(a);
        let b = g.constant(b);
        let l = f(&mut g, a, b)?;
        Ok(g.value(l).item())
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec())
    }

    #[test]
    fn dice_examples() {
        let m = t(&[1, 1, 2, 2], &[1.0, 1.0, 0.0, 0.0]);
        assert!(eval2(dice_loss, m.clone(), m.clone()).unwrap().abs() < 1e-5);
        let other = t(&[1, 1, 2, 2], &[0.0, 0.0, 1.0, 1.0]);
        assert!((eval2(dice_loss, m.clone(), other).unwrap() - 1.0).abs() < 1e-5);
        let half = t(&[1, 1, 2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let v = eval2(dice_loss, half.clone(), m.clone()).unwrap();
        assert!((v - 0.5).abs() < 1e-6);
        assert!((v - dice_oracle(half.data(), m.data(), 1, 1)).abs() < 1e-15);
        assert!(matches!(
            eval2(dice_loss, m, t(&[1, 2, 2, 1], &[0.0; 4])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn reconstruction_and_weak_examples() {
        let x = t(&[1, 1, 1, 2], &[0.0, 0.5]);
        let xh = t(&[1, 1, 1, 2], &[0.25, 0.25]);
        assert!((eval2(reconstruction_loss, x.clone(), xh).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(eval2(reconstruction_loss, x.clone(), x.clone()).unwrap(), 0.0);
        let ones = t(&[1, 1, 1, 2], &[1.0, 1.0]);
        let zeros = t(&[1, 1, 1, 2], &[0.0, 0.0]);
        assert_eq!(eval2(reconstruction_loss, zeros, ones).unwrap(), 1.0);

        let c_hat = t(&[1, 3], &[1.0, 1.0, 0.0]);
        let c = t(&[1, 3], &[1.0, 0.0, 0.0]);
        assert!((eval2(weak_loss, c_hat, c.clone()).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(eval2(weak_loss, c.clone(), c).unwrap(), 0.0);
        assert_eq!(
            eval2(weak_loss, t(&[1, 1], &[0.5]), t(&[1, 1], &[1.0])).unwrap(),
            0.5
        );
    }

    #[test]
    fn cps_examples() {
        let mut g = Graph::<f64>::training();
        let pseudo = g.input(t(&[1, 1, 2, 2], &[0.9, 0.8, 0.1, 0.2]));
        assert!(matches!(
            cps_loss(&mut g, pseudo, pseudo),
            Err(Error::MissingStopGradient)
        ));
        let detached = g.detach(pseudo);
        let pred = g.input(t(&[1, 1, 2, 2], &[1.0, 1.0, 0.0, 0.0]));
        let same = cps_loss(&mut g, detached, pred).unwrap();
        assert!(g.value(same).item().abs() < 1e-5);
        let shifted = g.input(t(&[1, 1, 2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let half = cps_loss(&mut g, detached, shifted).unwrap();
        assert!((g.value(half).item() - 0.5).abs() < 1e-6);
        let grads = g.backward(half);
        assert!(grads.wrt(pseudo).is_none_or(|gr| gr.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn hardening_rules() {
        // Two classes, three pixels: background, class 2, tie to class 1.
        let p = t(&[1, 2, 1, 3], &[0.4, 0.2, 0.7, 0.3, 0.9, 0.7]);
        assert_eq!(hard_labels(&p), vec![0, 2, 1]);
        assert_eq!(harden(&p).data(), &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn gating_uses_labeled_samples_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..2 * 2 * 4).map(|_| rng.random()).collect();
        let gt: Vec<f64> = (0..2 * 2 * 4).map(|_| rng.random_range(0..2) as f64).collect();
        let mut g = Graph::new();
        let pv = g.constant(t(&[2, 2, 2, 2], &p));
        let gv = g.constant(t(&[2, 2, 2, 2], &gt));
        let l = gated_dice_loss(&mut g, pv, gv, &[true, false]).unwrap();
        let expected = dice_oracle(&p[..8], &gt[..8], 1, 2);
        assert!((g.value(l).item() - expected).abs() < 1e-12);
        let none = gated_dice_loss(&mut g, pv, gv, &[false, false]).unwrap();
        assert_eq!(g.value(none).item(), 0.0);
    }

    fn grad_check(
        f: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var> + Copy,
        x: &Tensor<f64>,
        target: &Tensor<f64>,
    ) -> f64 {
        let mut g = Graph::training();
        let xv = g.input(x.clone());
        let tv = g.constant(target.clone());
        let l = f(&mut g, xv, tv).unwrap();
        let analytic = g.backward(l).wrt(xv).unwrap().clone();
        let numeric = numeric_grad(|x| eval2(f, x.clone(), target.clone()).unwrap(), x, 1e-6);
        rel_error(&analytic, &numeric)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let shape = [2, 3, 3, 2];
            let n = 36;
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
            let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
            let (p, gt) = (t(&shape, &p), t(&shape, &gt));
            assert!(grad_check(dice_loss, &p, &gt) < 1e-4);
            // Offsets keep every |difference| away from the kink at zero.
            let shifted = p.map(|v| v + 0.02);
            assert!(grad_check(reconstruction_loss, &shifted, &p) < 1e-4);
            let c_hat: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..0.45)).collect();
            let c: Vec<f64> = (0..6).map(|_| rng.random_range(0..2) as f64).collect();
            let c_hat = t(&[2, 3], &c_hat).zip_map(&t(&[2, 3], &c), |h, c| if c > 0.5 { 1.0 - h } else { h });
            assert!(grad_check(weak_loss, &c_hat, &t(&[2, 3], &c)) < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn losses_are_bounded(
            p in prop::collection::vec(0.0f64..=1.0, 8),
            q in prop::collection::vec(0.0f64..=1.0, 8),
            bits in prop::collection::vec(0u8..2, 8),
        ) {
            let gt: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
            let d = eval2(dice_loss, t(&[1, 2, 2, 2], &p), t(&[1, 2, 2, 2], &gt)).unwrap();
            prop_assert!((0.0..=1.0 + 1e-5).contains(&d));
            let w = eval2(weak_loss, t(&[1, 8], &p), t(&[1, 8], &gt)).unwrap();
            prop_assert!((0.0..=1.0).contains(&w));
            let r1 = eval2(reconstruction_loss, t(&[1, 1, 2, 4], &p), t(&[1, 1, 2, 4], &q)).unwrap();
            let r2 = eval2(reconstruction_loss, t(&[1, 1, 2, 4], &q), t(&[1, 1, 2, 4], &p)).unwrap();
            prop_assert!(r1 >= 0.0);
            prop_assert_eq!(r1, r2);
        }
    }
}
