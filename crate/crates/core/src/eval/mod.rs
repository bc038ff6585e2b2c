//! Segmentation metrics, leave-one-domain-out evaluation and the
//! channel/equivariance probes.

mod metrics;
mod probes;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::{render_sample, sample_seed, generate_translated, Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::hard_labels;
use crate::trainers::Model;

pub use metrics::{boundary, dice_score, hausdorff, hausdorff_per_class, squared_distance_transform};
pub use probes::{
    argmax_location, binarize, channel_match, otsu_threshold, pooled_descriptor, shared_factor_distance,
    translation_error, upsample_nearest, ChannelMatch, FactorKind,
};

pub const CLASS_NAMES: [&str; 3] = ["LV", "MYO", "RV"];

/// Mean and population standard deviation of the defined values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: None,
                std: None,
                count: 0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean: Some(mean),
            std: Some(var.sqrt()),
            count: values.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    /// Dice in percent over samples where the class occurs in the
    /// prediction or the ground truth.
    pub dice: Stat,
    /// Hausdorff distance in pixels over samples where both regions exist.
    pub hd: Stat,
    /// Samples whose HD was skipped because a region was empty.
    pub hd_absent: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: u32,
    pub samples: usize,
    pub classes: Vec<ClassMetrics>,
    /// Mean of the per-class means.
    pub mean_dice: Option<f64>,
    pub mean_hd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub samples: usize,
    pub channel_match: ChannelMatch,
    /// Channel matched to the heart and its matching Dice.
    pub heart_channel: Option<usize>,
    pub heart_score: Option<f64>,
    /// Mean L1 distance of heart descriptors between each sample and its
    /// re-rendering in `pair_domain`.
    pub shared_factor: Option<f64>,
    pub pair_domain: Option<u32>,
    pub translation_shift: (i64, i64),
    /// Mean argmax displacement error in feature cells.
    pub translation_error: Option<f64>,
    pub translation_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: String,
    pub target_domain: u32,
    pub hd_unit: String,
    pub domains: Vec<DomainMetrics>,
    pub probes: Option<ProbeReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-domain, per-class table.
    pub fn metrics_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut s = String::from("domain,class,dice_mean,dice_std,dice_count,hd_mean,hd_std,hd_count,hd_absent\n");
        for d in &self.domains {
            for c in &d.classes {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{}",
                    d.domain,
                    c.class,
                    opt(c.dice.mean),
                    opt(c.dice.std),
                    c.dice.count,
                    opt(c.hd.mean),
                    opt(c.hd.std),
                    c.hd.count,
                    c.hd_absent
                );
            }
        }
        s
    }

    /// Channel-factor matrix, one row per channel.
    pub fn channel_csv(&self) -> Option<String> {
        let m = &self.probes.as_ref()?.channel_match;
        let mut s = format!("channel,{}\n", m.factors.join(","));
        for (j, row) in m.matrix.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{j},{}", cells.join(","));
        }
        Some(s)
    }

    /// Writes `report.json`, `metrics.csv` and, with probes, `channels.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        if let Some(c) = self.channel_csv() {
            std::fs::write(dir.join("channels.csv"), c)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Domains to score besides the target.
    pub extra_domains: Vec<u32>,
    /// Target samples used by the probes (the first ones).
    pub probe_samples: usize,
    pub translation_shift: (i64, i64),
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            extra_domains: Vec::new(),
            probe_samples: 32,
            translation_shift: (4, 0),
        }
    }
}

/// Dice and HD of hard labels against ground-truth masks.
pub fn score_labels(
    domain: u32,
    pred: &[u8],
    samples: &[&Sample],
    num_classes: usize,
) -> Result<DomainMetrics> {
    let mut dice = vec![Vec::new(); num_classes];
    let mut hd = vec![Vec::new(); num_classes];
    let mut absent = vec![0usize; num_classes];
    let mut offset = 0;
    for s in samples {
        let hw = s.height * s.width;
        let gt = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::MissingField(format!("mask of a domain {domain} sample")))?;
        let p = pred
            .get(offset..offset + hw)
            .ok_or_else(|| Error::shape("predicted labels", &[offset + hw], &[pred.len()]))?;
        offset += hw;
        for (c, d) in dice_score(p, gt, num_classes)?.into_iter().enumerate() {
            if let Some(d) = d {
                dice[c].push(d);
            }
        }
        for (c, v) in hausdorff_per_class(p, gt, s.height, s.width, num_classes)?
            .into_iter()
            .enumerate()
        {
            match v {
                Some(v) => hd[c].push(v),
                None => absent[c] += 1,
            }
        }
    }
    let classes: Vec<ClassMetrics> = (0..num_classes)
        .map(|c| ClassMetrics {
            class: CLASS_NAMES.get(c).map_or_else(|| format!("class{}", c + 1), |n| n.to_string()),
            dice: Stat::of(&dice[c]),
            hd: Stat::of(&hd[c]),
            hd_absent: absent[c],
        })
        .collect();
    let mean_of = |f: fn(&ClassMetrics) -> Option<f64>| {
        let v: Vec<f64> = classes.iter().filter_map(f).collect();
        Stat::of(&v).mean
    };
    Ok(DomainMetrics {
        domain,
        samples: samples.len(),
        mean_dice: mean_of(|c| c.dice.mean),
        mean_hd: mean_of(|c| c.hd.mean),
        classes,
    })
}

fn stack_images(samples: &[&Sample]) -> Tensor<f32> {
    let items: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| Tensor::from_vec(&[1, s.height, s.width], s.image.clone()))
        .collect();
    Tensor::stack(&items)
}

fn check_compatible(model: &Model<f32>, samples: &[&Sample]) -> Result<()> {
    let want = model.arch.input_size;
    if let Some(s) = samples.iter().find(|s| (s.height, s.width) != want) {
        return Err(Error::IncompatibleCheckpoint(format!(
            "model expects {}x{} images, data has {}x{}",
            want.0, want.1, s.height, s.width
        )));
    }
    Ok(())
}

/// Scores the model's segmentation on one domain of `data`.
pub fn evaluate_domain(model: &Model<f32>, data: &Dataset, domain: u32) -> Result<DomainMetrics> {
    let samples: Vec<&Sample> = data
        .samples
        .get(&domain)
        .ok_or_else(|| Error::config("target", format!("domain {domain} is not in the dataset")))?
        .iter()
        .collect();
    check_compatible(model, &samples)?;
    let pred = model.predict(&stack_images(&samples))?;
    let seg = pred
        .seg
        .ok_or_else(|| Error::SettingMismatch(format!("{} has no segmentation head", model.setting)))?;
    score_labels(domain, &hard_labels(&seg), &samples, model.arch.num_classes)
}

/// Channel matching, shared-factor and translation probes on the first
/// `opts.probe_samples` target samples.
pub fn run_probes(model: &Model<f32>, data: &Dataset, target: u32, opts: &EvalOptions) -> Result<ProbeReport> {
    let all = data
        .samples
        .get(&target)
        .ok_or_else(|| Error::config("target", format!("domain {target} is not in the dataset")))?;
    let samples: Vec<&Sample> = all.iter().take(opts.probe_samples).collect();
    check_compatible(model, &samples)?;
    let acts = model
        .predict(&stack_images(&samples))?
        .activations
        .ok_or_else(|| Error::SettingMismatch(format!("{} has no activation maps", model.setting)))?;
    let cm = channel_match(&acts, &samples)?;
    let heart = cm.best(FactorKind::Heart);
    let heart_channel = heart.map(|(j, _)| j);
    let channels: Vec<usize> = heart_channel.into_iter().collect();
    let spec = data.spec(target).ok_or_else(|| Error::MissingSample(format!("spec of domain {target}")))?;
    let synth = &data.manifest.synth;

    let pair_domain = data.samples.keys().copied().find(|&d| d != target);
    let mut shared = Vec::new();
    if let (Some(pd), false) = (pair_domain, channels.is_empty()) {
        let other = data.spec(pd).expect("listed domain");
        let with_heart: Vec<(usize, &Sample)> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.factor_params.as_ref().is_some_and(|p| p.heart.is_some()))
            .map(|(i, s)| (i, *s))
            .collect();
        let twins: Vec<Sample> = with_heart
            .iter()
            .map(|(i, s)| {
                render_sample(
                    other,
                    synth,
                    s.factor_params.as_ref().expect("checked"),
                    sample_seed(data.manifest.seed, target, *i),
                )
            })
            .collect();
        if !twins.is_empty() {
            let twin_refs: Vec<&Sample> = twins.iter().collect();
            let twin_acts = model.predict(&stack_images(&twin_refs))?.activations.expect("has kernels");
            for (k, (i, s)) in with_heart.iter().enumerate() {
                shared.push(shared_factor_distance(
                    (&acts.select(*i), s),
                    (&twin_acts.select(k), &twins[k]),
                    FactorKind::Heart,
                    &channels,
                )?);
            }
        }
    }

    let mut errors = Vec::new();
    if !channels.is_empty() {
        let stride = model.arch.feature_stride;
        for (i, _) in samples.iter().enumerate() {
            let moved = match generate_translated(
                spec,
                synth,
                sample_seed(data.manifest.seed, target, i),
                opts.translation_shift,
            ) {
                Ok(s) => s,
                Err(Error::FactorOutOfBounds { .. }) => continue,
                Err(e) => return Err(e),
            };
            let moved_acts = model.predict(&stack_images(&[&moved]))?.activations.expect("has kernels");
            errors.push(translation_error(
                &acts.select(i),
                &moved_acts.select(0),
                &channels,
                opts.translation_shift,
                stride,
            )?);
        }
    }
    Ok(ProbeReport {
        samples: samples.len(),
        heart_channel,
        heart_score: heart.map(|(_, s)| s),
        channel_match: cm,
        shared_factor: Stat::of(&shared).mean,
        pair_domain,
        translation_shift: opts.translation_shift,
        translation_error: Stat::of(&errors).mean,
        translation_samples: errors.len(),
    })
}

/// Scores the target domain (and `opts.extra_domains`) and runs the probes
/// when the model has kernels.
pub fn evaluate(model: &Model<f32>, data: &Dataset, target: u32, opts: &EvalOptions) -> Result<EvalReport> {
    let mut domains = Vec::new();
    if model.setting.has_segmentation() {
        for d in std::iter::once(target).chain(opts.extra_domains.iter().copied().filter(|&d| d != target)) {
            domains.push(evaluate_domain(model, data, d)?);
        }
    }
    let probes = if model.setting.has_kernels() && opts.probe_samples > 0 {
        Some(run_probes(model, data, target, opts)?)
    } else {
        None
    };
    Ok(EvalReport {
        setting: model.setting.to_string(),
        target_domain: target,
        hd_unit: "pixels".into(),
        domains,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_of_values() {
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std, s.count), (Some(2.0), Some(1.0), 2));
        assert_eq!(Stat::of(&[]).mean, None);
    }
}
