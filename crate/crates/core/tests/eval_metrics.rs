mod common;

use vmfcomp_core::autograd::Tensor;
use vmfcomp_core::data::{generate_sample, DomainSpec, Factor, Sample, SynthConfig};
use vmfcomp_core::eval::*;

use common::*;

#[test]
fn dice_matches_set_counting_on_all_3x3_masks() {
    for pa in 0u32..512 {
        let a = to_set(pa, 3);
        for pb in 0u32..512 {
            let b = to_set(pb, 3);
            let got = dice_score(&to_mask(&a, 3), &to_mask(&b, 3), 1).unwrap()[0];
            let expected = if a.is_empty() && b.is_empty() {
                None
            } else {
                Some(100.0 * 2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64)
            };
            assert_eq!(got, expected, "{pa} vs {pb}");
        }
    }
}

#[test]
fn hausdorff_matches_brute_force_on_all_3x3_masks() {
    for pa in 0u32..512 {
        let a = to_set(pa, 3);
        let ba = oracle_boundary(&a, 3);
        for pb in 0u32..512 {
            let b = to_set(pb, 3);
            let got = hausdorff(&to_mask(&a, 3), &to_mask(&b, 3), 3, 3).unwrap();
            let expected = (!a.is_empty() && !b.is_empty()).then(|| oracle_hausdorff(&ba, &oracle_boundary(&b, 3)));
            assert_eq!(got, expected, "{pa} vs {pb}");
        }
    }
}

#[test]
fn hausdorff_of_two_points() {
    let a: Set = [(0, 0)].into();
    let b: Set = [(3, 4)].into();
    assert_eq!(hausdorff(&to_mask(&a, 5), &to_mask(&b, 5), 5, 5).unwrap(), Some(5.0));
}

#[test]
fn multiclass_dice_scores_each_label() {
    let pred = [1, 1, 2, 0, 3, 3];
    let gt = [1, 0, 2, 2, 0, 0];
    let d = dice_score(&pred, &gt, 3).unwrap();
    assert_eq!(d, vec![Some(100.0 * 2.0 / 3.0), Some(100.0 * 2.0 / 3.0), Some(0.0)]);
}

fn samples(n: usize) -> Vec<Sample> {
    let spec = &DomainSpec::defaults()[0];
    (0..n).map(|i| generate_sample(spec, &SynthConfig::default(), 100 + i as u64)).collect()
}

#[test]
fn perfect_and_empty_predictions_bound_the_scores() {
    let s = samples(4);
    let refs: Vec<&Sample> = s.iter().collect();
    let gt: Vec<u8> = s.iter().flat_map(|x| x.mask.clone().unwrap()).collect();
    let perfect = score_labels(0, &gt, &refs, 3).unwrap();
    for c in &perfect.classes {
        assert!(c.dice.count > 0);
        assert_eq!(c.dice.mean, Some(100.0));
        assert_eq!(c.hd.mean, Some(0.0));
    }
    assert_eq!(perfect.mean_dice, Some(100.0));
    let empty = score_labels(0, &vec![0; gt.len()], &refs, 3).unwrap();
    for c in &empty.classes {
        assert_eq!(c.dice.mean, Some(0.0));
        assert_eq!(c.hd.count, 0);
        assert!(c.hd_absent > 0);
    }
}

/// Binarizes each channel with its own Otsu threshold and counts pixel
/// overlaps against the factor masks at full resolution.
fn counting_oracle(acts: &Tensor<f64>, samples: &[&Sample]) -> Vec<Vec<f64>> {
    let (n, j, h, w) = acts.dims4();
    let kinds = FactorKind::ALL;
    let mut sums = vec![vec![0.0; kinds.len()]; j];
    let mut counts = vec![0usize; kinds.len()];
    for (i, s) in samples.iter().enumerate().take(n) {
        let stride = s.height / h;
        for (f, k) in kinds.iter().enumerate() {
            let mask = k.mask(s).unwrap();
            if !mask.contains(&1) {
                continue;
            }
            counts[f] += 1;
            for (c, row) in sums.iter_mut().enumerate() {
                let ch = &acts.data()[(i * j + c) * h * w..(i * j + c + 1) * h * w];
                let t = otsu_threshold(ch);
                let (mut both, mut a, mut b) = (0usize, 0usize, 0usize);
                for y in 0..s.height {
                    for x in 0..s.width {
                        let v = ch[(y / stride) * w + x / stride];
                        let on = t.is_some_and(|t| v > t);
                        let m = mask[y * s.width + x] == 1;
                        a += usize::from(on);
                        b += usize::from(m);
                        both += usize::from(on && m);
                    }
                }
                row[f] += 2.0 * both as f64 / (a + b) as f64;
            }
        }
    }
    sums.iter()
        .map(|r| r.iter().zip(&counts).map(|(v, &c)| if c > 0 { v / c as f64 } else { 0.0 }).collect())
        .collect()
}

fn pseudo_activations(s: &[Sample], j: usize, seed: u64) -> Tensor<f64> {
    let (h, w) = (32, 32);
    let mut data = Vec::new();
    for (i, smp) in s.iter().enumerate() {
        let heart = smp.heart_mask().unwrap();
        for c in 0..j {
            for y in 0..h {
                for x in 0..w {
                    let base = ((i * 31 + c * 17 + y * 7 + x * 3) as u64 ^ seed) % 97;
                    let bump = if c == 0 { 200.0 * f64::from(heart[(2 * y) * 64 + 2 * x]) } else { 0.0 };
                    data.push(base as f64 / 97.0 + bump);
                }
            }
        }
    }
    Tensor::from_vec(&[s.len(), j, h, w], data)
}

#[test]
fn channel_match_agrees_with_counting_oracle() {
    let s = samples(6);
    let refs: Vec<&Sample> = s.iter().collect();
    let acts = pseudo_activations(&s, 4, 9);
    let cm = channel_match(&acts, &refs).unwrap();
    let oracle = counting_oracle(&acts, &refs);
    for (row, orow) in cm.matrix.iter().zip(&oracle) {
        for (v, o) in row.iter().zip(orow) {
            assert!((v - o).abs() <= 1e-10, "{v} vs {o}");
            assert!((0.0..=1.0).contains(v));
        }
    }
    let (ch, score) = cm.best(FactorKind::Heart).unwrap();
    assert_eq!(ch, 0);
    assert!(score > 0.9, "{score}");
}

#[test]
fn channel_equal_to_factor_mask_scores_one_and_zero_channel_scores_zero() {
    let (h, w) = (32, 32);
    let mut s = samples(3);
    let mut data = Vec::new();
    for smp in &mut s {
        let l = Factor::Lungs as usize;
        let masks = smp.factor_masks.as_mut().unwrap();
        let coarse: Vec<u8> = (0..h * w).map(|p| masks[l][(2 * (p / w)) * 64 + 2 * (p % w)]).collect();
        masks[l] = upsample_nearest(&coarse, h, w, 64, 64);
        data.extend(coarse.iter().map(|&v| f64::from(v)));
        data.extend(std::iter::repeat_n(0.0, h * w));
    }
    let refs: Vec<&Sample> = s.iter().collect();
    let cm = channel_match(&Tensor::from_vec(&[3, 2, h, w], data), &refs).unwrap();
    let col = cm.column(FactorKind::Factor(Factor::Lungs)).unwrap();
    assert_eq!(cm.matrix[0][col], 1.0);
    assert!(cm.matrix[1].iter().all(|&v| v == 0.0));
    assert!(channel_match(&Tensor::<f64>::zeros(&[0, 2, h, w]), &[]).is_err());
}

#[test]
fn channel_match_is_invariant_to_positive_rescaling() {
    let s = samples(4);
    let refs: Vec<&Sample> = s.iter().collect();
    let acts = pseudo_activations(&s, 3, 5);
    let (_, j, h, w) = acts.dims4();
    let mut scaled = acts.clone();
    for (i, v) in scaled.data_mut().iter_mut().enumerate() {
        let c = i / (h * w) % j;
        *v *= [0.25, 8.0, 0.5][c];
    }
    assert_eq!(channel_match(&acts, &refs).unwrap(), channel_match(&scaled, &refs).unwrap());
}

fn blob(h: usize, w: usize, cy: usize, cx: usize) -> Vec<f64> {
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            (-((y - cy as f64).powi(2) + (x - cx as f64).powi(2)) / 4.0).exp()
        })
        .collect()
}

#[test]
fn translation_probe_is_exact_on_shifted_maps() {
    let (h, w) = (32, 32);
    for (cy, cx) in [(10, 10), (5, 20), (16, 3)] {
        let orig: Vec<f64> = [blob(h, w, cy, cx), blob(h, w, 20, 20)].concat();
        for shift in [(0i64, 0i64), (4, 0), (0, -6), (2, 2)] {
            let (ny, nx) = ((cy as i64 + shift.0 / 2) as usize, (cx as i64 + shift.1 / 2) as usize);
            let moved: Vec<f64> = [blob(h, w, ny, nx), blob(h, w, 20, 20)].concat();
            let a = Tensor::from_vec(&[2, h, w], orig.clone());
            let b = Tensor::from_vec(&[2, h, w], moved);
            assert_eq!(translation_error(&a, &b, &[0], shift, 2).unwrap(), 0.0);
        }
    }
    let a = Tensor::from_vec(&[1, h, w], blob(h, w, 10, 10));
    let b = Tensor::from_vec(&[1, h, w], blob(h, w, 13, 14));
    assert_eq!(translation_error(&a, &b, &[0], (0, 0), 2).unwrap(), 5.0);
}

#[test]
fn shared_factor_distance_vanishes_on_identical_pairs_and_matches_recomputation() {
    let s = samples(2);
    let acts = pseudo_activations(&s, 3, 1);
    let (a, b) = (acts.select(0), acts.select(1));
    assert_eq!(
        shared_factor_distance((&a, &s[0]), (&a, &s[0]), FactorKind::Heart, &[0, 1]).unwrap(),
        0.0
    );
    let got = shared_factor_distance((&a, &s[0]), (&b, &s[1]), FactorKind::Heart, &[2]).unwrap();
    let pooled = |t: &Tensor<f64>, smp: &Sample| {
        let m = smp.heart_mask().unwrap();
        let pts: Vec<(usize, usize)> = (0..64 * 64).filter(|&p| m[p] == 1).map(|p| (p / 64, p % 64)).collect();
        let ys = pts.iter().map(|p| p.0 / 2);
        let xs = pts.iter().map(|p| p.1 / 2);
        let (y0, y1) = (ys.clone().min().unwrap(), ys.max().unwrap());
        let (x0, x1) = (xs.clone().min().unwrap(), xs.max().unwrap());
        let ch = &t.data()[2 * 32 * 32..3 * 32 * 32];
        let mut v = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                v.push(ch[y * 32 + x]);
            }
        }
        v.iter().sum::<f64>() / v.len() as f64
    };
    let expected = (pooled(&a, &s[0]) - pooled(&b, &s[1])).abs();
    assert!((got - expected).abs() <= 1e-12, "{got} vs {expected}");
    assert!(shared_factor_distance((&a, &s[0]), (&b, &s[1]), FactorKind::Heart, &[]).is_err());
}
