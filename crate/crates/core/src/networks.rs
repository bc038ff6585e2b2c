//! The four learnable blocks: encoder, reconstructor, segmentation head and
//! weak-label classifier, plus the decoder tail used only for autoencoder
//! pre-training.
//!
//! All tensors are NCHW. The encoder is a U-Net whose decoder stops at
//! `feature_stride`; the remaining decoder stages live in [`PretrainTail`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Scalar, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, DoubleConv, DownBlock, Linear, ParamStore, Upsample, LEAKY_SLOPE};

/// Number of stride-2 conv layers in the classifier.
pub const CLASSIFIER_DEPTH: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// `(H, W)` of input images in pixels.
    pub input_size: (usize, usize),
    /// Downsampling factor `s` of the encoder features (power of two).
    pub feature_stride: usize,
    /// Feature channels `D`.
    pub feature_channels: usize,
    /// Number of vMF kernels `J`.
    pub num_kernels: usize,
    /// Segmentation classes `K` (LV, MYO, RV).
    pub num_classes: usize,
    pub classifier_hidden: usize,
    /// Channel widths of the U-Net levels, finest first.
    pub unet_widths: Vec<usize>,
    /// Width of the reconstructor and segmentation head.
    pub head_width: usize,
    /// Width of the first classifier layer; doubles per layer up to 8x.
    pub classifier_width: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            feature_stride: 2,
            feature_channels: 64,
            num_kernels: 12,
            num_classes: 3,
            classifier_hidden: 16,
            unet_widths: vec![32, 64, 128],
            head_width: 64,
            classifier_width: 16,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        let positive = [
            ("input_size", h.min(w)),
            ("feature_stride", self.feature_stride),
            ("feature_channels", self.feature_channels),
            ("num_kernels", self.num_kernels),
            ("num_classes", self.num_classes),
            ("classifier_hidden", self.classifier_hidden),
            ("head_width", self.head_width),
            ("classifier_width", self.classifier_width),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.unet_widths.is_empty() || self.unet_widths.contains(&0) {
            return Err(Error::config("unet_widths", "must be a nonempty list of positive widths"));
        }
        if self.feature_channels < 2 {
            return Err(Error::config("feature_channels", "must be at least 2"));
        }
        if !self.feature_stride.is_power_of_two() {
            return Err(Error::config("feature_stride", "must be a power of two"));
        }
        let deepest = 1usize << (self.unet_widths.len() - 1);
        if self.feature_stride > deepest {
            return Err(Error::config(
                "feature_stride",
                format!("at most {deepest} with {} U-Net levels", self.unet_widths.len()),
            ));
        }
        if h % deepest != 0 || w % deepest != 0 {
            return Err(Error::config(
                "input_size",
                format!("H and W must be divisible by {deepest}"),
            ));
        }
        if self.feature_channels < self.num_kernels {
            log::warn!(
                "feature_channels ({}) < num_kernels ({}): kernels cannot be orthogonal",
                self.feature_channels,
                self.num_kernels
            );
        }
        Ok(())
    }

    /// Spatial size of the feature map.
    pub fn feature_size(&self) -> (usize, usize) {
        (
            self.input_size.0 / self.feature_stride,
            self.input_size.1 / self.feature_stride,
        )
    }

    /// Decoder level (log2 of the stride) at which features are taken.
    pub fn feature_level(&self) -> usize {
        self.feature_stride.trailing_zeros() as usize
    }
}

fn expect_shape<T: Scalar>(g: &Graph<T>, x: Var, what: &'static str, expected: &[usize]) -> Result<()> {
    let got = g.shape(x);
    // Leading batch axis is free.
    if got.len() != expected.len() + 1 || got[1..] != *expected {
        let mut e = vec![got.first().copied().unwrap_or(0)];
        e.extend_from_slice(expected);
        return Err(Error::shape(what, &e, got));
    }
    Ok(())
}

/// U-Net encoder `F_ψ`: contracting path plus decoder stages down to the
/// feature stride. The feature-producing block has no trailing ReLU so no
/// position can collapse to the zero vector.
#[derive(Clone, Debug)]
pub struct Encoder {
    inc: DoubleConv,
    downs: Vec<DoubleConv>,
    ups: Vec<(Upsample, DoubleConv)>,
    input_size: (usize, usize),
    out_channels: usize,
    feature_level: usize,
}

impl Encoder {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ArchitectureConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let widths = &cfg.unet_widths;
        let levels = widths.len();
        let t = cfg.feature_level();
        let d = cfg.feature_channels;
        // Output width of the block that finishes each level on the way down/up.
        let width_at = |level: usize| if level == t { d } else { widths[level] };
        let inc_out = if levels == 1 { width_at(0) } else { widths[0] };
        let mut inc = DoubleConv::new(ps, &format!("{prefix}.inc"), 1, inc_out, rng);
        let mut downs = Vec::new();
        for l in 1..levels {
            let out = if l == levels - 1 { width_at(l) } else { widths[l] };
            downs.push(DoubleConv::new(
                ps,
                &format!("{prefix}.down{l}"),
                widths[l - 1],
                out,
                rng,
            ));
        }
        let mut ups = Vec::new();
        let mut cin = width_at(levels - 1);
        for l in (t..levels - 1).rev() {
            let up = Upsample::new(ps, &format!("{prefix}.up{l}.upsample"), cin, widths[l], rng);
            let out = width_at(l);
            let conv = DoubleConv::new(ps, &format!("{prefix}.up{l}.conv"), 2 * widths[l], out, rng);
            ups.push((up, conv));
            cin = out;
        }
        // Make the block that emits features linear.
        if let Some((_, conv)) = ups.last_mut() {
            *conv = conv.clone().linear_output();
        } else if let Some(last) = downs.last_mut() {
            *last = last.clone().linear_output();
        } else {
            inc = inc.linear_output();
        }
        Self {
            inc,
            downs,
            ups,
            input_size: cfg.input_size,
            out_channels: d,
            feature_level: t,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `[N, 1, H, W] -> [N, D, H/s, W/s]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_skips(g, ps, x)?.0)
    }

    /// Features plus the encoder activations at levels finer than the
    /// feature stride (finest first), which the pre-training tail consumes.
    pub fn forward_with_skips<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let (h, w) = self.input_size;
        expect_shape(g, x, "encoder input", &[1, h, w])?;
        let mut skips = vec![self.inc.forward(g, ps, x)];
        for down in &self.downs {
            let p = g.max_pool2(*skips.last().expect("nonempty"));
            skips.push(down.forward(g, ps, p));
        }
        let mut h = skips.pop().expect("nonempty");
        for (up, conv) in &self.ups {
            let u = up.forward(g, ps, h);
            let skip = skips.pop().expect("skip per decoder stage");
            let cat = g.concat_channels(skip, u);
            h = conv.forward(g, ps, cat);
        }
        debug_assert_eq!(skips.len(), self.feature_level);
        Ok((h, skips))
    }
}

/// Remaining U-Net decoder stages plus the 1x1 output conv, used to
/// pre-train the encoder as an autoencoder.
#[derive(Clone, Debug)]
pub struct PretrainTail {
    ups: Vec<(Upsample, DoubleConv)>,
    out: Conv2d,
}

impl PretrainTail {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ArchitectureConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let widths = &cfg.unet_widths;
        let mut cin = cfg.feature_channels;
        let mut ups = Vec::new();
        for l in (0..cfg.feature_level()).rev() {
            let up = Upsample::new(ps, &format!("{prefix}.up{l}.upsample"), cin, widths[l], rng);
            let conv = DoubleConv::new(ps, &format!("{prefix}.up{l}.conv"), 2 * widths[l], widths[l], rng);
            ups.push((up, conv));
            cin = widths[l];
        }
        let out = Conv2d::new(ps, &format!("{prefix}.out"), cin, 1, 1, 1, 0, true, rng);
        Self { ups, out }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        features: Var,
        mut skips: Vec<Var>,
    ) -> Var {
        let mut h = features;
        for (up, conv) in &self.ups {
            let u = up.forward(g, ps, h);
            let skip = skips.pop().expect("skip per tail stage");
            let cat = g.concat_channels(skip, u);
            h = conv.forward(g, ps, cat);
        }
        self.out.forward(g, ps, h)
    }
}

/// Shared shape of `R_ω` and `T_θ`: double conv, then per stride doubling a
/// transposed conv and a double conv, then a 1x1 output conv.
#[derive(Clone, Debug)]
struct UpHead {
    first: DoubleConv,
    ups: Vec<(Upsample, DoubleConv)>,
    out: Conv2d,
    in_channels: usize,
    in_size: (usize, usize),
}

impl UpHead {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ArchitectureConfig,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = cfg.head_width;
        let first = DoubleConv::new(ps, &format!("{prefix}.conv_in"), in_channels, w, rng);
        let ups = (0..cfg.feature_level())
            .map(|i| {
                (
                    Upsample::new(ps, &format!("{prefix}.up{i}.upsample"), w, w, rng),
                    DoubleConv::new(ps, &format!("{prefix}.up{i}.conv"), w, w, rng),
                )
            })
            .collect();
        let out = Conv2d::new(ps, &format!("{prefix}.out"), w, out_channels, 1, 1, 0, true, rng);
        Self {
            first,
            ups,
            out,
            in_channels,
            in_size: cfg.feature_size(),
        }
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        what: &'static str,
    ) -> Result<Var> {
        expect_shape(g, x, what, &[self.in_channels, self.in_size.0, self.in_size.1])?;
        let mut h = self.first.forward(g, ps, x);
        for (up, conv) in &self.ups {
            let u = up.forward(g, ps, h);
            h = conv.forward(g, ps, u);
        }
        Ok(self.out.forward(g, ps, h))
    }
}

/// `R_ω`: recomposed features `[N, D, H/s, W/s]` to an image `[N, 1, H, W]`
/// with a linear (unclamped) output.
#[derive(Clone, Debug)]
pub struct Reconstructor(UpHead);

impl Reconstructor {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ArchitectureConfig,
        rng: &mut impl Rng,
    ) -> Self {
        Self(UpHead::new(ps, prefix, cfg, cfg.feature_channels, 1, rng))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, z: Var) -> Result<Var> {
        self.0.forward(g, ps, z, "reconstructor input")
    }
}

/// `T_θ`: activations `[N, C_in, H/s, W/s]` to per-class sigmoid
/// probabilities `[N, K, H, W]`. `C_in` is `J` for the vMF models.
#[derive(Clone, Debug)]
pub struct SegHead(UpHead);

impl SegHead {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ArchitectureConfig,
        in_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self(UpHead::new(ps, prefix, cfg, in_channels, cfg.num_classes, rng))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, a: Var) -> Result<Var> {
        let logits = self.0.forward(g, ps, a, "segmentation head input")?;
        Ok(g.sigmoid(logits))
    }
}

/// `T_θC`: five 4x4/stride-2 conv-BN-LeakyReLU layers, then two fully
/// connected layers (`hidden`, then `out_dim`) and a sigmoid.
#[derive(Clone, Debug)]
pub struct Classifier {
    blocks: Vec<DownBlock>,
    fc1: Linear,
    fc2: Linear,
    in_channels: usize,
    in_size: (usize, usize),
}

impl Classifier {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ArchitectureConfig,
        in_channels: usize,
        in_size: (usize, usize),
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let min = 1 << CLASSIFIER_DEPTH;
        if in_size.0 < min || in_size.1 < min {
            return Err(Error::config(
                "input_size",
                format!("classifier input {in_size:?} must be at least {min}x{min}"),
            ));
        }
        let mut blocks = Vec::new();
        let mut cin = in_channels;
        let (mut h, mut w) = in_size;
        for i in 0..CLASSIFIER_DEPTH {
            let cout = cfg.classifier_width << i.min(3);
            blocks.push(DownBlock::new(ps, &format!("{prefix}.block{i}"), cin, cout, rng));
            cin = cout;
            h /= 2;
            w /= 2;
        }
        let flat = cin * h * w;
        let fc1 = Linear::new(ps, &format!("{prefix}.fc1"), flat, cfg.classifier_hidden, rng);
        let fc2 = Linear::new(ps, &format!("{prefix}.fc2"), cfg.classifier_hidden, out_dim, rng);
        Ok(Self {
            blocks,
            fc1,
            fc2,
            in_channels,
            in_size,
        })
    }

    /// `[N, C, H, W] -> [N, out_dim]` with entries in `[0, 1]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        expect_shape(g, x, "classifier input", &[self.in_channels, self.in_size.0, self.in_size.1])?;
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, ps, h);
        }
        let shape = g.shape(h).to_vec();
        let flat = g.reshape(h, &[shape[0], shape[1..].iter().product()]);
        let h = self.fc1.forward(g, ps, flat);
        let h = g.leaky_relu(h, T::of(LEAKY_SLOPE));
        let h = self.fc2.forward(g, ps, h);
        Ok(g.sigmoid(h))
    }
}
