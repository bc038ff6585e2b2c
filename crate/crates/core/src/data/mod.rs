//! Synthetic multi-domain cardiac-like dataset, leave-one-domain-out splits
//! and the on-disk sample format.

mod io;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use rand::seq::SliceRandom;

pub use io::{
    load_dataset, load_sample, read_sample, save_dataset, save_sample, verify_dataset, write_sample,
    Dataset, DatasetManifest, DomainEntry, SAMPLE_MAGIC,
};
pub use synth::{
    generate_domain, generate_sample, generate_translated, num_workers, render_sample, sample_seed,
    DomainSpec, Ellipse, FactorParams, HeartParams, IntensityMap, SynthConfig,
};

/// Generative factors with their own mask. The discriminant indexes
/// [`Sample::factor_masks`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Factor {
    Lv = 0,
    Myo = 1,
    Rv = 2,
    Lungs = 3,
    Body = 4,
}

impl Factor {
    pub const ALL: [Factor; 5] = [Factor::Lv, Factor::Myo, Factor::Rv, Factor::Lungs, Factor::Body];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Lv => "LV",
            Factor::Myo => "MYO",
            Factor::Rv => "RV",
            Factor::Lungs => "lungs",
            Factor::Body => "body",
        }
    }
}

/// Image-level presence of LV, MYO and RV (or of the heart alone).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakLabel {
    pub presence: Vec<u8>,
}

impl WeakLabel {
    /// Whether any heart structure is present.
    pub fn heart(&self) -> u8 {
        u8::from(self.presence.iter().any(|&p| p != 0))
    }
}

/// A single 2D slice with optional annotations. Images are row-major
/// `H x W` in `[0, 1]`; masks hold labels 0 (background), 1 (LV), 2 (MYO)
/// and 3 (RV).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub mask: Option<Vec<u8>>,
    pub weak: Option<WeakLabel>,
    pub domain_id: u32,
    /// One binary mask per [`Factor`], synthetic data only.
    pub factor_masks: Option<Vec<Vec<u8>>>,
    pub factor_params: Option<FactorParams>,
}

impl Sample {
    pub fn factor_mask(&self, f: Factor) -> Option<&[u8]> {
        self.factor_masks.as_ref().map(|m| m[f as usize].as_slice())
    }

    /// Union of the LV, MYO and RV masks.
    pub fn heart_mask(&self) -> Option<Vec<u8>> {
        let m = self.factor_masks.as_ref()?;
        Some(
            (0..self.height * self.width)
                .map(|p| m[0][p] | m[1][p] | m[2][p])
                .collect(),
        )
    }
}

/// Reference to sample `index` of domain `domain`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub domain: u32,
    pub index: usize,
}

/// Partition of a dataset into labeled and unlabeled source samples and a
/// held-out target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub source_domains: Vec<u32>,
    pub target_domain: u32,
    pub label_fraction: f64,
    pub labeled: Vec<SampleRef>,
    pub unlabeled: Vec<SampleRef>,
    pub target: Vec<SampleRef>,
}

/// Number of labeled samples out of `n` at `fraction`, rounding half away
/// from zero.
pub fn labeled_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

/// Builds a split from per-domain sample counts. Within each source domain
/// `labeled_count(n, fraction)` samples, chosen by a seeded shuffle, are
/// labeled.
pub fn make_split(domains: &[(u32, usize)], target: u32, label_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(Error::InvalidFraction(label_fraction));
    }
    if !domains.iter().any(|&(d, _)| d == target) {
        return Err(Error::config("target", format!("domain {target} is not in the dataset")));
    }
    let mut plan = SplitPlan {
        source_domains: Vec::new(),
        target_domain: target,
        label_fraction,
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        target: Vec::new(),
    };
    for &(domain, n) in domains {
        let refs = (0..n).map(|index| SampleRef { domain, index });
        if domain == target {
            plan.target.extend(refs);
            continue;
        }
        plan.source_domains.push(domain);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(seed, &[u64::from(domain), 0x73706c6974]));
        let k = labeled_count(n, label_fraction);
        let mut lab: Vec<usize> = order[..k].to_vec();
        lab.sort_unstable();
        let mut unl: Vec<usize> = order[k..].to_vec();
        unl.sort_unstable();
        plan.labeled.extend(lab.into_iter().map(|index| SampleRef { domain, index }));
        plan.unlabeled.extend(unl.into_iter().map(|index| SampleRef { domain, index }));
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn full_fraction_labels_everything() {
        let p = make_split(&[(0, 10), (1, 10), (2, 10), (3, 10)], 2, 1.0, 0).unwrap();
        assert_eq!(p.labeled.len(), 30);
        assert!(p.unlabeled.is_empty());
        assert_eq!(p.target.len(), 10);
        assert_eq!(p.source_domains, vec![0, 1, 3]);
    }

    #[test]
    fn five_percent_of_hundred() {
        assert_eq!(labeled_count(100, 0.05), 5);
        let p = make_split(&[(0, 100), (1, 100), (2, 100), (3, 100)], 0, 0.05, 7).unwrap();
        for d in 1..4 {
            assert_eq!(p.labeled.iter().filter(|r| r.domain == d).count(), 5);
        }
    }

    #[test]
    fn split_is_a_partition() {
        let domains = [(0, 13), (1, 7), (2, 21), (3, 9)];
        let p = make_split(&domains, 3, 0.3, 1).unwrap();
        let all: Vec<SampleRef> = p
            .labeled
            .iter()
            .chain(&p.unlabeled)
            .chain(&p.target)
            .copied()
            .collect();
        let set: HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), all.len());
        assert_eq!(all.len(), 50);
        assert!(p.target.iter().all(|r| r.domain == 3));
        assert!(p.labeled.iter().chain(&p.unlabeled).all(|r| r.domain != 3));
        assert_eq!(p, make_split(&domains, 3, 0.3, 1).unwrap());
    }

    #[test]
    fn rejects_bad_fraction() {
        for f in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                make_split(&[(0, 4), (1, 4)], 0, f, 0),
                Err(Error::InvalidFraction(_))
            ));
        }
    }
}
