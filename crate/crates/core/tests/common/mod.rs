#![allow(dead_code)]

use std::collections::BTreeSet;

use vmfcomp_core::autograd::{Gradients, Graph, Tensor, Var};
use vmfcomp_core::data::{make_split, Dataset, DomainSpec, Sample, SampleRef, SplitPlan, SynthConfig};
use vmfcomp_core::losses::{dice_loss, dice_loss_per_sample, harden, reconstruction_loss, weak_loss};
use vmfcomp_core::networks::ArchitectureConfig;
use vmfcomp_core::trainers::{objective, Batch, Breakdown, Model, Setting, TrainConfig, TrainData};

pub fn tiny_arch() -> ArchitectureConfig {
    ArchitectureConfig {
        input_size: (32, 32),
        feature_stride: 1,
        feature_channels: 8,
        num_kernels: 4,
        unet_widths: vec![4, 8],
        head_width: 4,
        classifier_width: 4,
        classifier_hidden: 8,
        ..Default::default()
    }
}

pub fn tiny_config(setting: Setting, seed: u64) -> TrainConfig {
    TrainConfig {
        setting,
        lr: 1e-3,
        iterations: 5,
        batch_size: 4,
        pretrain_epochs: 0,
        seed,
        arch: tiny_arch(),
        ..Default::default()
    }
}

pub fn tiny_dataset(per_domain: usize, seed: u64) -> Dataset {
    let synth = SynthConfig {
        size: (32, 32),
        ..Default::default()
    };
    Dataset::generate(&DomainSpec::defaults(), &synth, per_domain, seed).unwrap()
}

pub fn tiny_split(data: &Dataset, fraction: f64) -> SplitPlan {
    make_split(&data.counts(), 3, fraction, 0).unwrap()
}

pub fn batch_of(data: &TrainData, n: usize, labeled: &[bool], setting: Setting) -> Batch {
    let items: Vec<(SampleRef, &Sample, bool)> = data
        .all()
        .take(n)
        .zip(labeled)
        .map(|(&(r, s), &l)| (r, s, l))
        .collect();
    Batch::new(&items, 3, setting.weak_dim()).unwrap()
}

/// Brute-force `-mean_p max_j μ_jᵀ z_p` over `[N, D, h, w]` normalized
/// features.
pub fn clustering_oracle(mu: &Tensor<f64>, zn: &Tensor<f64>) -> f64 {
    let (n, d, h, w) = zn.dims4();
    let j = mu.shape()[0];
    let (m, z) = (mu.data(), zn.data());
    let mut total = 0.0;
    for s in 0..n {
        for p in 0..h * w {
            let best = (0..j)
                .map(|k| (0..d).map(|c| m[k * d + c] * z[(s * d + c) * h * w + p]).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            total += best;
        }
    }
    -total / (n * h * w) as f64
}

pub fn mean_over(values: &[f64], keep: &[bool]) -> f64 {
    let kept: Vec<f64> = values.iter().zip(keep).filter(|(_, &k)| k).map(|(v, _)| *v).collect();
    if kept.is_empty() {
        0.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}

/// Recomputes every named term of `setting` from the model outputs with the
/// losses module's functions, outside `objective`.
pub fn direct_terms(model: &Model<f64>, batch: &Batch) -> Breakdown {
    let mut g = Graph::training();
    let x = g.constant(batch.images.cast());
    let gt = g.constant(batch.masks.cast::<f64>());
    let mut out = Breakdown::new();
    let twins = model.twins.len();
    let outs: Vec<_> = (0..twins).map(|i| model.forward(&mut g, i, x).unwrap()).collect();
    for (i, o) in outs.iter().enumerate() {
        let suffix = if twins > 1 { ["_a", "_b"][i] } else { "" };
        if let (Some(mu), Some(zn)) = (o.kernels, o.normalized) {
            let v = clustering_oracle(g.value(mu), g.value(zn));
            out.insert(format!("clu{suffix}"), v);
        }
        if let Some(seg) = o.seg {
            let per = dice_loss_per_sample(&mut g, seg, gt).unwrap();
            let per: Vec<f64> = g.value(per).data().to_vec();
            out.insert(format!("dice{suffix}"), mean_over(&per, &batch.labeled));
        }
        if let Some(rec) = o.rec {
            let v = reconstruction_loss(&mut g, x, rec).unwrap();
            out.insert("rec".into(), g.value(v).item());
        }
        if let Some(p) = o.presence {
            let c = g.constant(batch.weak.as_ref().unwrap().cast());
            let v = weak_loss(&mut g, p, c).unwrap();
            out.insert("weak".into(), g.value(v).item());
        }
        if twins > 1 {
            let other = outs[1 - i].seg.unwrap();
            let pseudo = g.constant(harden(g.value(other)));
            let v = dice_loss(&mut g, o.seg.unwrap(), pseudo).unwrap();
            out.insert(format!("cps{suffix}"), g.value(v).item());
        }
    }
    out
}

pub fn weighted_total(b: &Breakdown, cfg: &TrainConfig) -> f64 {
    b.iter()
        .filter(|(k, _)| k.as_str() != "total")
        .map(|(k, v)| {
            let w = if k.starts_with("dice") {
                cfg.lambda_dice
            } else if k.starts_with("cps") {
                cfg.lambda_cps
            } else if k == "weak" && cfg.setting == Setting::Vmfweak {
                cfg.lambda_weak
            } else {
                1.0
            };
            w * v
        })
        .sum()
}

pub fn objective_breakdown(model: &Model<f64>, batch: &Batch, cfg: &TrainConfig) -> Breakdown {
    let mut g = Graph::training();
    let obj = objective(&mut g, model, batch, cfg).unwrap();
    obj.breakdown(&g)
}

pub fn grads_of(model: &Model<f64>, batch: &Batch, cfg: &TrainConfig, pick: impl Fn(&str) -> bool) -> Gradients<f64> {
    let mut g = Graph::training();
    let obj = objective(&mut g, model, batch, cfg).unwrap();
    let mut total: Option<Var> = None;
    for (name, w, v) in &obj.terms {
        if pick(name) {
            let s = g.scale(*v, *w);
            total = Some(match total {
                Some(t) => g.add(t, s),
                None => s,
            });
        }
    }
    g.backward(total.unwrap())
}

pub fn max_abs(t: Option<&Tensor<f64>>) -> f64 {
    t.map_or(0.0, |t| t.data().iter().fold(0.0, |m, v| m.max(v.abs())))
}


/// Pixel set over an `n x n` grid.
pub type Set = BTreeSet<(i64, i64)>;

pub fn to_set(bits: u32, n: i64) -> Set {
    (0..n * n).filter(|i| bits >> i & 1 == 1).map(|i| (i / n, i % n)).collect()
}

pub fn to_mask(s: &Set, n: i64) -> Vec<u8> {
    (0..n * n).map(|i| u8::from(s.contains(&(i / n, i % n)))).collect()
}

pub fn oracle_boundary(s: &Set, n: i64) -> Set {
    s.iter()
        .copied()
        .filter(|&(y, x)| {
            [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| {
                let (ny, nx) = (y + dy, x + dx);
                ny < 0 || nx < 0 || ny >= n || nx >= n || !s.contains(&(ny, nx))
            })
        })
        .collect()
}

pub fn oracle_hausdorff(a: &Set, b: &Set) -> f64 {
    let d = |p: (i64, i64), q: (i64, i64)| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt();
    let directed = |a: &Set, b: &Set| {
        a.iter()
            .map(|&p| b.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}
