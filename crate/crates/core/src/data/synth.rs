use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Factor, Sample, WeakLabel};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};

/// Tissue values before the domain intensity map.
const TISSUE_BODY: f64 = 0.35;
const TISSUE_LUNG: f64 = 0.08;
const TISSUE_MYO: f64 = 0.55;
const TISSUE_LV: f64 = 0.92;
const TISSUE_RV: f64 = 0.78;
const TEXTURE_AMPLITUDE: f64 = 0.04;
const TEXTURE_WAVES: usize = 3;

/// Monotone piecewise-linear map on `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityMap {
    pub points: Vec<(f64, f64)>,
}

impl IntensityMap {
    pub fn validate(&self) -> Result<()> {
        let p = &self.points;
        if p.len() < 2 || p[0].0 != 0.0 || p[p.len() - 1].0 != 1.0 {
            return Err(Error::config(
                "intensity_map",
                "needs at least two points spanning x = 0 to x = 1",
            ));
        }
        for w in p.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 < w[0].1 {
                return Err(Error::config("intensity_map", "must be monotone"));
            }
        }
        if p.iter().any(|&(_, y)| !(0.0..=1.0).contains(&y)) {
            return Err(Error::config("intensity_map", "outputs must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn apply(&self, v: f64) -> f64 {
        let v = v.clamp(0.0, 1.0);
        let i = self
            .points
            .windows(2)
            .position(|w| v <= w[1].0)
            .unwrap_or(self.points.len() - 2);
        let (x0, y0) = self.points[i];
        let (x1, y1) = self.points[i + 1];
        y0 + (y1 - y0) * (v - x0) / (x1 - x0)
    }
}

/// Imaging characteristics of one synthetic domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub intensity_map: IntensityMap,
    pub noise_std: f64,
    /// Gaussian blur standard deviation in pixels; 0 disables blurring.
    pub blur_radius: f64,
    /// Fixes the domain's background texture pattern.
    pub texture_seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        self.intensity_map.validate()?;
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std", "must be non-negative"));
        }
        if !(self.blur_radius >= 0.0) {
            return Err(Error::config("blur_radius", "must be non-negative"));
        }
        Ok(())
    }

    /// The four shipped domains.
    pub fn defaults() -> Vec<DomainSpec> {
        let map = |pts: &[(f64, f64)]| IntensityMap {
            points: pts.to_vec(),
        };
        vec![
            DomainSpec {
                domain_id: 0,
                intensity_map: map(&[(0.0, 0.0), (1.0, 1.0)]),
                noise_std: 0.02,
                blur_radius: 0.0,
                texture_seed: 11,
            },
            DomainSpec {
                domain_id: 1,
                intensity_map: map(&[(0.0, 0.12), (0.3, 0.5), (1.0, 1.0)]),
                noise_std: 0.04,
                blur_radius: 0.6,
                texture_seed: 23,
            },
            DomainSpec {
                domain_id: 2,
                intensity_map: map(&[(0.0, 0.0), (0.5, 0.25), (1.0, 0.75)]),
                noise_std: 0.03,
                blur_radius: 1.0,
                texture_seed: 37,
            },
            DomainSpec {
                domain_id: 3,
                intensity_map: map(&[(0.0, 0.05), (0.4, 0.15), (0.7, 0.8), (1.0, 0.95)]),
                noise_std: 0.06,
                blur_radius: 0.7,
                texture_seed: 41,
            },
        ]
    }
}

/// Sampling settings shared by all domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// `(H, W)` of generated images.
    pub size: (usize, usize),
    /// Probability that a slice contains the heart.
    pub p_heart: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: (64, 64),
            p_heart: 0.85,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size.0 < 16 || self.size.1 < 16 {
            return Err(Error::config("size", "images must be at least 16x16"));
        }
        if !(0.0..=1.0).contains(&self.p_heart) {
            return Err(Error::config("p_heart", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// LV disk, surrounding MYO ring and an RV crescent on one side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeartParams {
    pub cy: f64,
    pub cx: f64,
    pub lv_radius: f64,
    pub myo_thickness: f64,
    /// Direction of the RV relative to the LV centre, radians.
    pub rv_angle: f64,
}

impl HeartParams {
    fn outer(&self) -> f64 {
        self.lv_radius + self.myo_thickness
    }

    fn rv_centre(&self) -> (f64, f64) {
        let d = 0.5 * self.outer();
        (
            self.cy + d * self.rv_angle.sin(),
            self.cx + d * self.rv_angle.cos(),
        )
    }

    fn rv_radius(&self) -> f64 {
        1.05 * self.outer()
    }

    /// Radius of a disk around the LV centre that contains every heart pixel.
    pub fn extent(&self) -> f64 {
        0.5 * self.outer() + self.rv_radius()
    }

    fn label(&self, y: f64, x: f64) -> Option<Factor> {
        let d = ((y - self.cy).powi(2) + (x - self.cx).powi(2)).sqrt();
        if d <= self.lv_radius {
            return Some(Factor::Lv);
        }
        if d <= self.outer() {
            return Some(Factor::Myo);
        }
        let (ry, rx) = self.rv_centre();
        let drv = ((y - ry).powi(2) + (x - rx).powi(2)).sqrt();
        (drv <= self.rv_radius()).then_some(Factor::Rv)
    }
}

/// Pose and scale of every factor plus the per-sample texture phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorParams {
    pub body: Ellipse,
    pub lungs: [Ellipse; 2],
    pub heart: Option<HeartParams>,
    pub texture_phase: Vec<f64>,
}

impl FactorParams {
    fn sample(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let (h, w) = cfg.size;
        let s = h.min(w) as f64 / 64.0;
        let (cy, cx) = (
            h as f64 / 2.0 + rng.random_range(-2.0..2.0) * s,
            w as f64 / 2.0 + rng.random_range(-2.0..2.0) * s,
        );
        let body = Ellipse {
            cy,
            cx,
            ry: rng.random_range(20.0..24.0) * s,
            rx: rng.random_range(26.0..29.0) * s,
            angle: rng.random_range(-0.15..0.15),
        };
        let lung = |side: f64, rng: &mut ChaCha8Rng| Ellipse {
            cy: cy + rng.random_range(-2.0..2.0) * s,
            cx: cx + side * rng.random_range(13.0..15.0) * s,
            ry: rng.random_range(10.0..13.0) * s,
            rx: rng.random_range(6.0..8.0) * s,
            angle: side * rng.random_range(0.0..0.3),
        };
        let lungs = [lung(-1.0, rng), lung(1.0, rng)];
        let heart = rng.random_bool(cfg.p_heart).then(|| HeartParams {
            cy: cy + rng.random_range(-4.0..4.0) * s,
            cx: cx + rng.random_range(-4.0..4.0) * s,
            lv_radius: rng.random_range(3.5..5.0) * s,
            myo_thickness: rng.random_range(1.5..2.5) * s,
            rv_angle: PI + rng.random_range(-0.6..0.6),
        });
        let texture_phase = (0..TEXTURE_WAVES)
            .map(|_| rng.random_range(0.0..2.0 * PI))
            .collect();
        Self {
            body,
            lungs,
            heart,
            texture_phase,
        }
    }

    fn label(&self, y: f64, x: f64) -> Option<Factor> {
        if let Some(f) = self.heart.and_then(|h| h.label(y, x)) {
            return Some(f);
        }
        if self.lungs.iter().any(|l| l.contains(y, x)) {
            return Some(Factor::Lungs);
        }
        self.body.contains(y, x).then_some(Factor::Body)
    }
}

fn tissue(f: Option<Factor>) -> f64 {
    match f {
        None => 0.0,
        Some(Factor::Body) => TISSUE_BODY,
        Some(Factor::Lungs) => TISSUE_LUNG,
        Some(Factor::Myo) => TISSUE_MYO,
        Some(Factor::Lv) => TISSUE_LV,
        Some(Factor::Rv) => TISSUE_RV,
    }
}

fn gaussian_blur(img: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * img[y * w + clampi(x as isize + k as isize - r, w)])
                .sum::<f64>()
                / norm;
        }
    }
    for y in 0..h {
        for x in 0..w {
            img[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * tmp[clampi(y as isize + k as isize - r, h) * w + x])
                .sum::<f64>()
                / norm;
        }
    }
}

/// Renders a sample from explicit factor parameters. `seed` drives only the
/// acquisition noise, so re-rendering with edited parameters keeps the noise.
pub fn render_sample(spec: &DomainSpec, cfg: &SynthConfig, params: &FactorParams, seed: u64) -> Sample {
    let (h, w) = cfg.size;
    let mut top = vec![None; h * w];
    for y in 0..h {
        for x in 0..w {
            top[y * w + x] = params.label(y as f64, x as f64);
        }
    }
    let mut tex_rng = rng_for(spec.texture_seed, &[]);
    let waves: Vec<(f64, f64)> = (0..TEXTURE_WAVES)
        .map(|_| (tex_rng.random_range(1.0..6.0), tex_rng.random_range(1.0..6.0)))
        .collect();
    let mut img: Vec<f64> = (0..h * w)
        .map(|i| {
            let mut v = tissue(top[i]);
            if top[i].is_some() {
                let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
                let t: f64 = waves
                    .iter()
                    .zip(&params.texture_phase)
                    .map(|(&(fy, fx), &ph)| (2.0 * PI * (fy * y + fx * x) + ph).sin())
                    .sum();
                v += TEXTURE_AMPLITUDE * t / TEXTURE_WAVES as f64;
            }
            spec.intensity_map.apply(v)
        })
        .collect();
    gaussian_blur(&mut img, h, w, spec.blur_radius);
    let mut noise_rng = rng_for(seed, &[0x6e6f697365]);
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("valid noise std");
        for v in &mut img {
            *v += normal.sample(&mut noise_rng);
        }
    }
    let image: Vec<f32> = img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();

    let factor_masks: Vec<Vec<u8>> = Factor::ALL
        .iter()
        .map(|&f| top.iter().map(|&t| u8::from(t == Some(f))).collect())
        .collect();
    let mask: Vec<u8> = top
        .iter()
        .map(|t| match t {
            Some(Factor::Lv) => 1,
            Some(Factor::Myo) => 2,
            Some(Factor::Rv) => 3,
            _ => 0,
        })
        .collect();
    let presence = [Factor::Lv, Factor::Myo, Factor::Rv]
        .iter()
        .map(|&f| u8::from(factor_masks[f as usize].contains(&1)))
        .collect();
    Sample {
        height: h,
        width: w,
        image,
        mask: Some(mask),
        weak: Some(WeakLabel { presence }),
        domain_id: spec.domain_id,
        factor_masks: Some(factor_masks),
        factor_params: Some(params.clone()),
    }
}

fn param_rng(seed: u64) -> ChaCha8Rng {
    rng_for(seed, &[0x706172616d73])
}

/// Draws factor poses from `seed` and renders one sample.
pub fn generate_sample(spec: &DomainSpec, cfg: &SynthConfig, seed: u64) -> Sample {
    let params = FactorParams::sample(cfg, &mut param_rng(seed));
    render_sample(spec, cfg, &params, seed)
}

/// Re-renders the sample of `seed` with the heart moved by `shift = (dy, dx)`
/// pixels. Fails if the heart is absent or leaves the image before or after
/// the move.
pub fn generate_translated(spec: &DomainSpec, cfg: &SynthConfig, seed: u64, shift: (i64, i64)) -> Result<Sample> {
    let mut params = FactorParams::sample(cfg, &mut param_rng(seed));
    let Some(heart) = params.heart.as_mut() else {
        return Err(Error::FactorOutOfBounds { shift });
    };
    let (h, w) = cfg.size;
    let inside = |cy: f64, cx: f64, r: f64| {
        cy - r >= 0.0 && cx - r >= 0.0 && cy + r <= (h - 1) as f64 && cx + r <= (w - 1) as f64
    };
    let r = heart.extent();
    let (ny, nx) = (heart.cy + shift.0 as f64, heart.cx + shift.1 as f64);
    if !inside(heart.cy, heart.cx, r) || !inside(ny, nx, r) {
        return Err(Error::FactorOutOfBounds { shift });
    }
    heart.cy = ny;
    heart.cx = nx;
    Ok(render_sample(spec, cfg, &params, seed))
}

/// Seed of sample `index` of domain `domain_id` in a dataset seeded with `seed`.
pub fn sample_seed(seed: u64, domain_id: u32, index: usize) -> u64 {
    derive_seed(seed, &[u64::from(domain_id), index as u64])
}

/// Number of generation threads: `VMFCOMP_NUM_WORKERS` if set, else the
/// available parallelism.
pub fn num_workers() -> usize {
    std::env::var("VMFCOMP_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Generates `n` samples of one domain. The result does not depend on the
/// number of worker threads.
pub fn generate_domain(spec: &DomainSpec, cfg: &SynthConfig, n: usize, seed: u64) -> Vec<Sample> {
    let workers = num_workers().clamp(1, n.max(1));
    let mut out: Vec<Option<Sample>> = vec![None; n];
    let chunk = n.div_ceil(workers).max(1);
    std::thread::scope(|scope| {
        for (c, slots) in out.chunks_mut(chunk).enumerate() {
            scope.spawn(move || {
                for (i, slot) in slots.iter_mut().enumerate() {
                    let idx = c * chunk + i;
                    *slot = Some(generate_sample(spec, cfg, sample_seed(seed, spec.domain_id, idx)));
                }
            });
        }
    });
    out.into_iter().map(|s| s.expect("generated")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(p_heart: f64) -> SynthConfig {
        SynthConfig {
            p_heart,
            ..Default::default()
        }
    }

    #[test]
    fn heart_absent_slices() {
        let spec = &DomainSpec::defaults()[0];
        for seed in 0..5 {
            let s = generate_sample(spec, &cfg(0.0), seed);
            assert_eq!(s.weak.as_ref().unwrap().presence, vec![0, 0, 0]);
            assert!(s.mask.as_ref().unwrap().iter().all(|&m| m == 0));
        }
    }

    #[test]
    fn heart_present_slices() {
        for spec in DomainSpec::defaults() {
            for seed in 0..5 {
                let s = generate_sample(&spec, &cfg(1.0), seed);
                let fm = s.factor_masks.as_ref().unwrap();
                for f in [Factor::Lv, Factor::Myo, Factor::Rv] {
                    assert!(fm[f as usize].contains(&1), "{f:?} empty");
                }
                for p in 0..s.height * s.width {
                    assert!(fm.iter().map(|m| m[p]).sum::<u8>() <= 1);
                }
                assert_eq!(s.weak.as_ref().unwrap().presence, vec![1, 1, 1]);
                assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_thread_independent() {
        let spec = &DomainSpec::defaults()[1];
        let a = generate_sample(spec, &cfg(0.85), 9);
        let b = generate_sample(spec, &cfg(0.85), 9);
        assert_eq!(a, b);
        let many = generate_domain(spec, &cfg(0.85), 7, 3);
        for (i, s) in many.iter().enumerate() {
            assert_eq!(s, &generate_sample(spec, &cfg(0.85), sample_seed(3, 1, i)));
        }
    }

    #[test]
    fn translation_moves_heart_masks() {
        let spec = &DomainSpec::defaults()[0];
        let base = generate_sample(spec, &cfg(1.0), 4);
        let moved = generate_translated(spec, &cfg(1.0), 4, (4, -2)).unwrap();
        let (h, w) = (base.height, base.width);
        let a = &base.factor_masks.as_ref().unwrap()[Factor::Lv as usize];
        let b = &moved.factor_masks.as_ref().unwrap()[Factor::Lv as usize];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as i64 + 4, x as i64 - 2);
                if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
                    assert_eq!(a[y * w + x], b[sy as usize * w + sx as usize]);
                }
            }
        }
        assert!(matches!(
            generate_translated(spec, &cfg(1.0), 4, (60, 0)),
            Err(Error::FactorOutOfBounds { .. })
        ));
        assert!(generate_translated(spec, &cfg(0.0), 4, (0, 0)).is_err());
    }

    #[test]
    fn intensity_maps_are_monotone() {
        for spec in DomainSpec::defaults() {
            spec.validate().unwrap();
            let mut prev = -1.0;
            for i in 0..=100 {
                let v = spec.intensity_map.apply(i as f64 / 100.0);
                assert!(v >= prev);
                prev = v;
            }
        }
        let bad = IntensityMap {
            points: vec![(0.0, 0.5), (1.0, 0.2)],
        };
        assert!(bad.validate().is_err());
    }

    fn histogram(s: &Sample) -> Vec<f64> {
        let mut h = vec![0.0; 16];
        for &v in &s.image {
            h[((v * 16.0) as usize).min(15)] += 1.0 / s.image.len() as f64;
        }
        h
    }

    #[test]
    fn domains_are_distinguishable_by_histogram() {
        let specs = DomainSpec::defaults();
        let c = cfg(0.85);
        let data: Vec<Vec<Vec<f64>>> = specs
            .iter()
            .map(|s| generate_domain(s, &c, 40, 17).iter().map(histogram).collect())
            .collect();
        // Nearest-centroid classifier: fit on the first half, test on the rest.
        let centroids: Vec<Vec<f64>> = data
            .iter()
            .map(|hs| {
                (0..16)
                    .map(|b| hs[..20].iter().map(|h| h[b]).sum::<f64>() / 20.0)
                    .collect()
            })
            .collect();
        let mut correct = 0;
        for (d, hs) in data.iter().enumerate() {
            for h in &hs[20..] {
                let dist = |c: &Vec<f64>| c.iter().zip(h).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..centroids.len())
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap();
                correct += usize::from(best == d);
            }
        }
        assert!(correct as f64 / 80.0 > 0.9, "accuracy {correct}/80");
    }
}
