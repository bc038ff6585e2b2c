use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{objective, Batch, Breakdown, Model, Setting, TrainConfig};
use crate::autograd::{Graph, Tensor};
use crate::data::{Dataset, Sample, SampleRef, SplitPlan};
use crate::error::{Error, Result};
use crate::losses::reconstruction_loss;
use crate::networks::{Encoder, PretrainTail};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::seed::{derive_seed, rng_for};
use crate::vmf::{project_rows, tangent_rows};

const BATCH_STREAM: u64 = 0x6261746368;
const PRETRAIN_STREAM: u64 = 0x7072657472;

/// Training pools of a split. The target domain never appears here.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub labeled: Vec<(SampleRef, &'a Sample)>,
    pub unlabeled: Vec<(SampleRef, &'a Sample)>,
}

impl<'a> TrainData<'a> {
    pub fn from_split(data: &'a Dataset, plan: &SplitPlan) -> Result<Self> {
        let pick = |refs: &[SampleRef]| -> Result<Vec<(SampleRef, &'a Sample)>> {
            refs.iter().map(|&r| Ok((r, data.get(r)?))).collect()
        };
        Ok(Self {
            labeled: pick(&plan.labeled)?,
            unlabeled: pick(&plan.unlabeled)?,
        })
    }

    /// Every training sample, labeled pool first.
    pub fn all(&self) -> impl Iterator<Item = &(SampleRef, &'a Sample)> {
        self.labeled.iter().chain(&self.unlabeled)
    }

    /// Deterministic batch for `iteration`. Semi-supervised settings take
    /// `ceil(B / 2)` samples from the labeled pool and the rest from the
    /// unlabeled pool (all from one pool if the other is empty); the
    /// supervised baseline draws labeled samples only. Draws are with
    /// replacement, so the batch depends only on the seed and iteration.
    pub fn sample_batch(&self, cfg: &TrainConfig, iteration: usize) -> Result<Batch> {
        let b = cfg.batch_size;
        let mut rng = rng_for(cfg.seed, &[BATCH_STREAM, iteration as u64]);
        let (n_lab, n_unl) = match cfg.setting {
            Setting::Supervised => (b, 0),
            _ if self.labeled.is_empty() => (0, b),
            _ if self.unlabeled.is_empty() => (b, 0),
            _ => (b.div_ceil(2), b - b.div_ceil(2)),
        };
        if (n_lab > 0 && self.labeled.is_empty()) || (n_unl > 0 && self.unlabeled.is_empty()) {
            return Err(Error::EmptyDataset);
        }
        let mut items = Vec::with_capacity(b);
        for _ in 0..n_lab {
            let (r, s) = self.labeled[rng.random_range(0..self.labeled.len())];
            items.push((r, s, true));
        }
        for _ in 0..n_unl {
            let (r, s) = self.unlabeled[rng.random_range(0..self.unlabeled.len())];
            items.push((r, s, false));
        }
        Batch::new(&items, cfg.arch.num_classes, cfg.setting.weak_dim())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub term: String,
    pub value: f64,
}

/// Every loss term of every iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<LogRecord>,
}

impl LossLog {
    pub fn push(&mut self, iteration: usize, breakdown: &Breakdown) {
        for (term, &value) in breakdown {
            self.records.push(LogRecord {
                iteration,
                term: term.clone(),
                value,
            });
        }
    }

    /// Values of `term` in iteration order.
    pub fn term(&self, term: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.term == term)
            .map(|r| r.value)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,term,value\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{:e}", r.iteration, r.term, r.value);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// `encoder.*` and `tail.*` parameters of the full U-Net.
    pub params: ParamStore<f32>,
    /// Mean reconstruction loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains the full U-Net to reconstruct its input for
/// `cfg.pretrain_epochs` epochs.
pub fn pretrain_autoencoder(images: &[&Sample], cfg: &TrainConfig) -> Result<PretrainOutcome> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.arch.validate()?;
    let mut ps = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[PRETRAIN_STREAM]));
    let encoder = Encoder::new(&mut ps, "encoder", &cfg.arch, &mut rng);
    let tail = PretrainTail::new(&mut ps, "tail", &cfg.arch, &mut rng);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let (h, w) = (images[0].height, images[0].width);
    let mut epoch_losses = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[PRETRAIN_STREAM, epoch as u64]));
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let data: Vec<f32> = chunk.iter().flat_map(|&i| images[i].image.iter().copied()).collect();
            let mut g = Graph::training();
            let x = g.constant(Tensor::from_vec(&[chunk.len(), 1, h, w], data));
            let (z, skips) = encoder.forward_with_skips(&mut g, &ps, x)?;
            let out = tail.forward(&mut g, &ps, z, skips);
            let loss = reconstruction_loss(&mut g, x, out)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: epoch,
                    batch: format!("pretraining images {chunk:?}"),
                    terms: format!("rec={value}"),
                });
            }
            let grads = g.backward(loss);
            let updates = g.take_buffer_updates();
            opt.step(&mut ps, &grads);
            ps.apply_buffer_updates(updates);
            sum += value * chunk.len() as f64;
            count += chunk.len();
        }
        epoch_losses.push(sum / count as f64);
        log::debug!("pretrain epoch {epoch}: rec {:.5}", sum / count as f64);
    }
    Ok(PretrainOutcome {
        params: ps,
        epoch_losses,
    })
}

/// Everything needed to continue a run: configuration, parameters of every
/// twin, optimizer state and the iteration counter.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub opt: Adam<f32>,
    pub iteration: usize,
}

impl TrainState {
    /// Fresh state, pre-training the encoder on all training images first
    /// when the setting uses it.
    pub fn new(cfg: &TrainConfig, data: &TrainData) -> Result<Self> {
        let pre = if cfg.setting.uses_pretraining() && cfg.pretrain_epochs > 0 {
            let images: Vec<&Sample> = data.all().map(|(_, s)| *s).collect();
            Some(pretrain_autoencoder(&images, cfg)?.params)
        } else {
            None
        };
        Self::with_pretrained(cfg, pre.as_ref())
    }

    /// Fresh state whose encoders (both twins) start from `pretrained`
    /// `encoder.*` weights when given.
    pub fn with_pretrained(cfg: &TrainConfig, pretrained: Option<&ParamStore<f32>>) -> Result<Self> {
        let mut model = Model::<f32>::new(cfg)?;
        if let Some(pre) = pretrained {
            for t in &model.twins {
                let copied = model.params.copy_renamed_from(pre, "encoder.", &t.encoder_prefix());
                if copied == 0 {
                    return Err(Error::IncompatibleCheckpoint(
                        "pre-trained weights contain no encoder".into(),
                    ));
                }
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            model,
            opt: Adam::new(AdamConfig {
                lr: cfg.lr,
                ..Default::default()
            }),
            iteration: 0,
        })
    }

    /// One optimizer step on the batch of the current iteration. Kernel
    /// gradients are restricted to the sphere's tangent space before the
    /// update and the banks are re-projected onto the sphere after it.
    pub fn step(&mut self, data: &TrainData) -> Result<Breakdown> {
        let batch = data.sample_batch(&self.cfg, self.iteration)?;
        let mut g = Graph::training();
        let obj = objective(&mut g, &self.model, &batch, &self.cfg)?;
        let breakdown = obj.breakdown(&g);
        if breakdown.values().any(|v| !v.is_finite()) {
            let mut terms = String::new();
            for (k, v) in &breakdown {
                let _ = write!(terms, "{k}={v} ");
            }
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                batch: batch.describe(),
                terms: terms.trim_end().to_string(),
            });
        }
        let mut grads = g.backward(obj.total);
        let updates = g.take_buffer_updates();
        for t in &self.model.twins {
            if let Some(id) = t.kernels() {
                if let Some(gk) = grads.param_mut(id) {
                    tangent_rows(gk, self.model.params.get(id));
                }
            }
        }
        self.opt.step(&mut self.model.params, &grads);
        self.model.params.apply_buffer_updates(updates);
        for t in &self.model.twins {
            if let Some(id) = t.kernels() {
                project_rows(self.model.params.get_mut(id))?;
            }
        }
        self.iteration += 1;
        Ok(breakdown)
    }

    /// Steps until `cfg.iterations`, logging every term.
    pub fn run(&mut self, data: &TrainData, log: &mut LossLog) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            let it = self.iteration;
            let b = self.step(data)?;
            if it % 100 == 0 {
                log::info!("{} iteration {it}: total {:.5}", self.cfg.setting, b["total"]);
            }
            log.push(it, &b);
        }
        Ok(())
    }
}

/// Pre-trains (when applicable) and trains for `cfg.iterations` steps.
pub fn train(cfg: &TrainConfig, data: &TrainData) -> Result<(TrainState, LossLog)> {
    let mut state = TrainState::new(cfg, data)?;
    let mut log = LossLog::default();
    state.run(data, &mut log)?;
    Ok((state, log))
}
