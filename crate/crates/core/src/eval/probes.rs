use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tensor};
use crate::data::{Factor, Sample};
use crate::error::{Error, Result};

/// A column of the channel-factor matrix: one generative factor or the
/// union of the three heart structures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorKind {
    Factor(Factor),
    Heart,
}

impl FactorKind {
    pub const ALL: [FactorKind; 6] = [
        FactorKind::Factor(Factor::Lv),
        FactorKind::Factor(Factor::Myo),
        FactorKind::Factor(Factor::Rv),
        FactorKind::Factor(Factor::Lungs),
        FactorKind::Factor(Factor::Body),
        FactorKind::Heart,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FactorKind::Factor(f) => f.name(),
            FactorKind::Heart => "heart",
        }
    }

    pub fn mask(self, s: &Sample) -> Option<Vec<u8>> {
        match self {
            FactorKind::Factor(f) => s.factor_mask(f).map(<[u8]>::to_vec),
            FactorKind::Heart => s.heart_mask(),
        }
    }
}

/// Otsu threshold over all values: the largest value of the lower class
/// under the split maximizing between-class variance, so foreground is
/// `v > t`. `None` for constant input.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let total: f64 = v.iter().sum();
    let mut best: Option<(f64, f64)> = None;
    let mut sum0 = 0.0;
    for k in 1..n {
        sum0 += v[k - 1];
        if v[k - 1] == v[k] {
            continue;
        }
        let (n0, n1) = (k as f64, (n - k) as f64);
        let d = sum0 / n0 - (total - sum0) / n1;
        let score = n0 * n1 * d * d;
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, v[k - 1]));
        }
    }
    best.map(|(_, t)| t)
}

/// Otsu-binarized channel map.
pub fn binarize(channel: &[f64]) -> Vec<u8> {
    match otsu_threshold(channel) {
        Some(t) => channel.iter().map(|&v| u8::from(v > t)).collect(),
        None => vec![0; channel.len()],
    }
}

/// Nearest-neighbour upsampling of an `h x w` map to `H x W`.
pub fn upsample_nearest(map: &[u8], h: usize, w: usize, big_h: usize, big_w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(big_h * big_w);
    for y in 0..big_h {
        let sy = y * h / big_h;
        for x in 0..big_w {
            out.push(map[sy * w + x * w / big_w]);
        }
    }
    out
}

fn binary_dice(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Channel-factor overlap. `matrix[j][f]` is the Dice between binarized,
/// upsampled channel `j` and factor `f`, averaged over samples where the
/// factor is present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMatch {
    pub factors: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    /// Best channel per factor; `None` if the factor never occurs.
    pub assignment: Vec<Option<usize>>,
    /// Number of samples each column averages over.
    pub support: Vec<usize>,
}

impl ChannelMatch {
    pub fn column(&self, kind: FactorKind) -> Option<usize> {
        self.factors.iter().position(|f| f == kind.name())
    }

    /// Matched channel and its score for `kind`.
    pub fn best(&self, kind: FactorKind) -> Option<(usize, f64)> {
        let f = self.column(kind)?;
        let j = self.assignment[f]?;
        Some((j, self.matrix[j][f]))
    }
}

/// Matches activation channels (`[N, J, h, w]`) of `samples` to their
/// factor masks.
pub fn channel_match<T: Scalar>(activations: &Tensor<T>, samples: &[&Sample]) -> Result<ChannelMatch> {
    let (n, j, h, w) = activations.dims4();
    if n != samples.len() {
        return Err(Error::shape("channel_match samples", &[n], &[samples.len()]));
    }
    if samples.is_empty() || samples.iter().any(|s| s.factor_masks.is_none()) {
        return Err(Error::EmptyFactorSet);
    }
    let kinds = FactorKind::ALL;
    let mut sums = vec![vec![0.0; kinds.len()]; j];
    let mut support = vec![0usize; kinds.len()];
    let data = activations.data();
    for (i, s) in samples.iter().enumerate() {
        let masks: Vec<Vec<u8>> = kinds.iter().map(|k| k.mask(s).expect("factor masks")).collect();
        let present: Vec<bool> = masks.iter().map(|m| m.iter().any(|&v| v != 0)).collect();
        for (f, &p) in present.iter().enumerate() {
            support[f] += usize::from(p);
        }
        for (c, row) in sums.iter_mut().enumerate() {
            let off = (i * j + c) * h * w;
            let channel: Vec<f64> = data[off..off + h * w].iter().map(|v| v.as_f64()).collect();
            let up = upsample_nearest(&binarize(&channel), h, w, s.height, s.width);
            for (f, m) in masks.iter().enumerate() {
                if present[f] {
                    row[f] += binary_dice(&up, m);
                }
            }
        }
    }
    let matrix: Vec<Vec<f64>> = sums
        .iter()
        .map(|row| {
            row.iter()
                .zip(&support)
                .map(|(&v, &n)| if n > 0 { v / n as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    let assignment = (0..kinds.len())
        .map(|f| {
            (support[f] > 0 && j > 0).then(|| {
                let mut best = 0;
                for c in 1..j {
                    if matrix[c][f] > matrix[best][f] {
                        best = c;
                    }
                }
                best
            })
        })
        .collect();
    Ok(ChannelMatch {
        factors: kinds.iter().map(|k| k.name().to_string()).collect(),
        matrix,
        assignment,
        support,
    })
}

/// Mean of an `h x w` channel inside the feature-grid bounding box of a
/// binary `H x W` mask; `None` if the mask is empty.
pub fn pooled_descriptor(channel: &[f64], h: usize, w: usize, mask: &[u8], big_h: usize, big_w: usize) -> Option<f64> {
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..big_h {
        for x in 0..big_w {
            if mask[y * big_w + x] != 0 {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 == usize::MAX {
        return None;
    }
    let (fy0, fy1) = (y0 * h / big_h, y1 * h / big_h);
    let (fx0, fx1) = (x0 * w / big_w, x1 * w / big_w);
    let mut sum = 0.0;
    for y in fy0..=fy1 {
        for x in fx0..=fx1 {
            sum += channel[y * w + x];
        }
    }
    Some(sum / ((fy1 - fy0 + 1) * (fx1 - fx0 + 1)) as f64)
}

/// L1 distance between the pooled descriptors of two samples' activation
/// maps (`[J, h, w]` each) on `channels`, pooled inside each sample's
/// `kind` region.
pub fn shared_factor_distance<T: Scalar>(
    a: (&Tensor<T>, &Sample),
    b: (&Tensor<T>, &Sample),
    kind: FactorKind,
    channels: &[usize],
) -> Result<f64> {
    if channels.is_empty() {
        return Err(Error::NoMatchedChannel(kind.name().into()));
    }
    let descriptors = |(act, s): (&Tensor<T>, &Sample)| -> Result<Vec<f64>> {
        let shape = act.shape();
        let (h, w) = (shape[1], shape[2]);
        let mask = kind.mask(s).ok_or(Error::EmptyFactorSet)?;
        channels
            .iter()
            .map(|&c| {
                let ch: Vec<f64> = act.data()[c * h * w..(c + 1) * h * w].iter().map(|v| v.as_f64()).collect();
                pooled_descriptor(&ch, h, w, &mask, s.height, s.width)
                    .ok_or_else(|| Error::NoMatchedChannel(format!("{} absent from a sample", kind.name())))
            })
            .collect()
    };
    let (da, db) = (descriptors(a)?, descriptors(b)?);
    Ok(da.iter().zip(&db).map(|(x, y)| (x - y).abs()).sum())
}

/// Raster position of the first maximum of an `h x w` map.
pub fn argmax_location(map: &[f64], w: usize) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in map.iter().enumerate() {
        if v > map[best] {
            best = i;
        }
    }
    (best / w, best % w)
}

/// Mean over `channels` of `|argmax shift - shift / stride|` between the
/// activation maps (`[J, h, w]`) of a sample and of its translated copy.
pub fn translation_error<T: Scalar>(
    original: &Tensor<T>,
    shifted: &Tensor<T>,
    channels: &[usize],
    shift: (i64, i64),
    stride: usize,
) -> Result<f64> {
    let s = stride as i64;
    if shift.0 % s != 0 || shift.1 % s != 0 {
        return Err(Error::config(
            "shift",
            format!("({}, {}) is not a multiple of the feature stride {stride}", shift.0, shift.1),
        ));
    }
    if original.shape() != shifted.shape() {
        return Err(Error::shape("shifted activations", original.shape(), shifted.shape()));
    }
    if channels.is_empty() {
        return Err(Error::NoMatchedChannel("heart".into()));
    }
    let shape = original.shape();
    let (h, w) = (shape[1], shape[2]);
    let expect = ((shift.0 / s) as f64, (shift.1 / s) as f64);
    let mut total = 0.0;
    for &c in channels {
        let grab = |t: &Tensor<T>| -> Vec<f64> { t.data()[c * h * w..(c + 1) * h * w].iter().map(|v| v.as_f64()).collect() };
        let (y0, x0) = argmax_location(&grab(original), w);
        let (y1, x1) = argmax_location(&grab(shifted), w);
        let dy = y1 as f64 - y0 as f64 - expect.0;
        let dx = x1 as f64 - x0 as f64 - expect.1;
        total += dy.hypot(dx);
    }
    Ok(total / channels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn otsu_splits_two_levels() {
        let v = [0.1, 0.1, 0.2, 0.9, 1.0, 0.95];
        assert_eq!(otsu_threshold(&v), Some(0.2));
        assert_eq!(binarize(&v), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(otsu_threshold(&[3.0; 4]), None);
        assert_eq!(binarize(&[3.0; 4]), vec![0; 4]);
    }

    #[test]
    fn upsampling_repeats_cells() {
        assert_eq!(upsample_nearest(&[1, 0], 1, 2, 2, 4), vec![1, 1, 0, 0, 1, 1, 0, 0]);
    }

    #[test]
    fn argmax_ties_take_first() {
        assert_eq!(argmax_location(&[0.0, 1.0, 1.0, 0.5], 2), (0, 1));
    }

    #[test]
    fn translation_error_rejects_off_grid_shift() {
        let t = Tensor::<f64>::zeros(&[1, 4, 4]);
        assert!(translation_error(&t, &t, &[0], (3, 0), 2).is_err());
        assert!(matches!(translation_error(&t, &t, &[], (2, 0), 2), Err(Error::NoMatchedChannel(_))));
    }

    proptest! {
        #[test]
        fn otsu_binarization_is_scale_invariant(
            values in proptest::collection::vec(0.0f64..1.0, 2..64),
            exp in -6i32..6,
        ) {
            let c = 2f64.powi(exp);
            let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
            prop_assert_eq!(binarize(&values), binarize(&scaled));
        }
    }
}
