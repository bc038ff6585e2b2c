use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vmfcomp_core::data::{DomainSpec, SynthConfig};
use vmfcomp_core::eval::EvalOptions;
use vmfcomp_core::trainers::TrainConfig;
use vmfcomp_core::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing dataset directory written by `gen`. When unset the dataset is
    /// generated in memory from the fields below.
    pub dir: Option<PathBuf>,
    pub per_domain: usize,
    pub seed: u64,
    pub synth: SynthConfig,
    pub domains: Vec<DomainSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            per_domain: 200,
            seed: 0,
            synth: SynthConfig::default(),
            domains: DomainSpec::defaults(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub target: u32,
    pub label_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            target: 3,
            label_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probe_samples: usize,
    pub translation_shift: (i64, i64),
    pub extra_domains: Vec<u32>,
    /// Target-domain sample indices drawn by `visualize` when none are given.
    pub visualize: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let o = EvalOptions::default();
        Self {
            probe_samples: o.probe_samples,
            translation_shift: o.translation_shift,
            extra_domains: o.extra_domains,
            visualize: vec![0, 1, 2, 3],
        }
    }
}

impl EvalConfig {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            extra_domains: self.extra_domains.clone(),
            probe_samples: self.probe_samples,
            translation_shift: self.translation_shift,
        }
    }
}

/// Everything a run needs; every section and key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn prefixed(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } => Error::config(format!("{section}.{field}"), message),
        Error::InvalidFraction(f) => Error::config(format!("{section}.label_fraction"), format!("{f} is not in (0, 1]")),
        other => other,
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            // serde reports unknown and mistyped keys without a path; the
            // span still locates them for the user
            let field = msg
                .split('`')
                .nth(1)
                .map_or_else(|| "config".to_string(), str::to_string);
            Error::config(field, e.to_string().trim_end().to_string())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), Error> {
        let d = &self.data;
        if d.per_domain == 0 {
            return Err(Error::config("data.per_domain", "must be at least 1"));
        }
        d.synth.validate().map_err(|e| prefixed("data.synth", e))?;
        if d.domains.len() < 2 {
            return Err(Error::config("data.domains", "need at least two domains"));
        }
        for spec in &d.domains {
            spec.validate().map_err(|e| prefixed("data.domains", e))?;
        }
        let s = &self.split;
        if !(s.label_fraction > 0.0 && s.label_fraction <= 1.0) {
            return Err(Error::config(
                "split.label_fraction",
                format!("{} is not in (0, 1]", s.label_fraction),
            ));
        }
        if d.dir.is_none() && !d.domains.iter().any(|x| x.domain_id == s.target) {
            return Err(Error::config("split.target", format!("domain {} is not configured", s.target)));
        }
        self.train.validate().map_err(|e| prefixed("train", e))?;
        if d.dir.is_none() && self.train.arch.input_size != d.synth.size {
            return Err(Error::config(
                "train.arch.input_size",
                format!(
                    "{:?} differs from the image size {:?}",
                    self.train.arch.input_size, d.synth.size
                ),
            ));
        }
        Ok(())
    }
}

/// Parses a domain given as an id (`3`) or a letter (`D` is domain 3).
pub fn parse_domain(s: &str) -> Result<u32, Error> {
    if let Ok(v) = s.parse::<u32>() {
        return Ok(v);
    }
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => Ok(c.to_ascii_uppercase() as u32 - 'A' as u32),
        _ => Err(Error::config("target", format!("`{s}` is neither a domain id nor a letter"))),
    }
}
