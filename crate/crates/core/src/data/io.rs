use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_domain, DomainSpec, FactorParams, Sample, SampleRef, SynthConfig, WeakLabel};
use crate::error::{Error, Result};

pub const SAMPLE_MAGIC: &[u8; 8] = b"VMFCSMP1";
const FORMAT_VERSION: u32 = 1;
const MAX_HEADER: usize = 1 << 20;
const NUM_FACTORS: usize = 5;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    height: usize,
    width: usize,
    domain_id: u32,
    dtype: String,
    has_mask: bool,
    has_factor_masks: bool,
    weak: Option<Vec<u8>>,
    factor_params: Option<FactorParams>,
}

const REQUIRED: [&str; 6] = ["version", "height", "width", "domain_id", "dtype", "has_mask"];

/// Serializes a sample: magic, little-endian `u32` header length, JSON
/// header, then the `f32` image, the optional `u8` mask and the optional
/// `u8` factor masks.
pub fn write_sample(s: &Sample, mut w: impl Write) -> Result<()> {
    let header = Header {
        version: FORMAT_VERSION,
        height: s.height,
        width: s.width,
        domain_id: s.domain_id,
        dtype: "f32".into(),
        has_mask: s.mask.is_some(),
        has_factor_masks: s.factor_masks.is_some(),
        weak: s.weak.as_ref().map(|wl| wl.presence.clone()),
        factor_params: s.factor_params.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(12 + json.len() + s.image.len() * 4);
    buf.extend_from_slice(SAMPLE_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in &s.image {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(m) = &s.mask {
        buf.extend_from_slice(m);
    }
    if let Some(fm) = &s.factor_masks {
        for m in fm {
            buf.extend_from_slice(m);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptFile(msg.into())
}

pub fn read_sample(mut r: impl Read) -> Result<Sample> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != SAMPLE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if hlen > MAX_HEADER || bytes.len() < 12 + hlen {
        return Err(corrupt("truncated header"));
    }
    let value: serde_json::Value =
        serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| corrupt(format!("header: {e}")))?;
    for key in REQUIRED {
        if value.get(key).is_none() {
            return Err(Error::MissingField(key.into()));
        }
    }
    let h: Header = serde_json::from_value(value).map_err(|e| corrupt(format!("header: {e}")))?;
    if h.version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported version {}", h.version)));
    }
    if h.dtype != "f32" {
        return Err(corrupt(format!("unsupported dtype {}", h.dtype)));
    }
    let n = h
        .height
        .checked_mul(h.width)
        .filter(|&n| n > 0)
        .ok_or_else(|| corrupt("bad image shape"))?;
    let expected = 12
        + hlen
        + 4 * n
        + if h.has_mask { n } else { 0 }
        + if h.has_factor_masks { NUM_FACTORS * n } else { 0 };
    if bytes.len() != expected {
        return Err(corrupt(format!("payload is {} bytes, expected {expected}", bytes.len())));
    }
    let mut off = 12 + hlen;
    let image = bytes[off..off + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    off += 4 * n;
    let mask = h.has_mask.then(|| {
        off += n;
        bytes[off - n..off].to_vec()
    });
    let factor_masks = h.has_factor_masks.then(|| {
        (0..NUM_FACTORS)
            .map(|_| {
                off += n;
                bytes[off - n..off].to_vec()
            })
            .collect()
    });
    Ok(Sample {
        height: h.height,
        width: h.width,
        image,
        mask,
        weak: h.weak.map(|presence| WeakLabel { presence }),
        domain_id: h.domain_id,
        factor_masks,
        factor_params: h.factor_params,
    })
}

pub fn save_sample(s: &Sample, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_sample(s, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_sample(path: &Path) -> Result<Sample> {
    read_sample(fs::File::open(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub spec: DomainSpec,
    pub count: usize,
}

/// Contents of `manifest.json` at the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub synth: SynthConfig,
    pub domains: Vec<DomainEntry>,
    /// Relative path to SHA-256 hex digest of each sample file.
    pub files: BTreeMap<String, String>,
}

/// All samples of a dataset, grouped by domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: BTreeMap<u32, Vec<Sample>>,
}

impl Dataset {
    /// Generates `n` samples for each domain.
    pub fn generate(specs: &[DomainSpec], synth: &SynthConfig, n: usize, seed: u64) -> Result<Self> {
        synth.validate()?;
        let mut samples = BTreeMap::new();
        let mut domains = Vec::new();
        for spec in specs {
            spec.validate()?;
            if samples.contains_key(&spec.domain_id) {
                return Err(Error::config("domains", format!("duplicate domain id {}", spec.domain_id)));
            }
            samples.insert(spec.domain_id, generate_domain(spec, synth, n, seed));
            domains.push(DomainEntry {
                spec: spec.clone(),
                count: n,
            });
        }
        Ok(Self {
            manifest: DatasetManifest {
                version: FORMAT_VERSION,
                seed,
                synth: synth.clone(),
                domains,
                files: BTreeMap::new(),
            },
            samples,
        })
    }

    /// `(domain id, sample count)` for every domain.
    pub fn counts(&self) -> Vec<(u32, usize)> {
        self.samples.iter().map(|(&d, s)| (d, s.len())).collect()
    }

    pub fn get(&self, r: SampleRef) -> Result<&Sample> {
        self.samples
            .get(&r.domain)
            .and_then(|s| s.get(r.index))
            .ok_or_else(|| Error::MissingSample(format!("domain {} index {}", r.domain, r.index)))
    }

    /// SHA-256 over the per-file digests in path order; equal for a dataset
    /// in memory and the same dataset saved to disk.
    pub fn content_hash(&self) -> Result<String> {
        let mut lines = Vec::new();
        for (&domain, samples) in &self.samples {
            for (i, s) in samples.iter().enumerate() {
                let mut buf = Vec::new();
                write_sample(s, &mut buf)?;
                lines.push(format!("{} {}\n", relative_path(domain, i), hex::encode(Sha256::digest(&buf))));
            }
        }
        lines.sort();
        Ok(hex::encode(Sha256::digest(lines.concat().as_bytes())))
    }

    pub fn spec(&self, domain: u32) -> Option<&DomainSpec> {
        self.manifest
            .domains
            .iter()
            .map(|d| &d.spec)
            .find(|s| s.domain_id == domain)
    }
}

fn relative_path(domain: u32, index: usize) -> String {
    format!("{domain}/{index}.vmfc")
}

/// Writes `<root>/<domain>/<index>.vmfc` files and `manifest.json`.
/// Returns the manifest with file digests filled in.
pub fn save_dataset(root: &Path, data: &Dataset) -> Result<DatasetManifest> {
    let mut manifest = data.manifest.clone();
    manifest.files.clear();
    for (&domain, samples) in &data.samples {
        fs::create_dir_all(root.join(domain.to_string()))?;
        for (i, s) in samples.iter().enumerate() {
            let rel = relative_path(domain, i);
            let mut buf = Vec::new();
            write_sample(s, &mut buf)?;
            manifest.files.insert(rel.clone(), hex::encode(Sha256::digest(&buf)));
            fs::write(root.join(&rel), buf)?;
        }
    }
    fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let bytes = fs::read(root.join("manifest.json"))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Checks every file digest listed in the manifest.
pub fn verify_dataset(root: &Path) -> Result<DatasetManifest> {
    let manifest = read_manifest(root)?;
    for (rel, digest) in &manifest.files {
        let bytes = fs::read(root.join(rel))?;
        if hex::encode(Sha256::digest(&bytes)) != *digest {
            return Err(corrupt(format!("{rel}: digest mismatch")));
        }
    }
    Ok(manifest)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let mut samples = BTreeMap::new();
    for entry in &manifest.domains {
        let d = entry.spec.domain_id;
        let list = (0..entry.count)
            .map(|i| load_sample(&root.join(relative_path(d, i))))
            .collect::<Result<Vec<_>>>()?;
        samples.insert(d, list);
    }
    Ok(Dataset { manifest, samples })
}
