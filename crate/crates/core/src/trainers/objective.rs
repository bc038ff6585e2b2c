use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{Model, Setting, TrainConfig};
use crate::autograd::{Graph, Scalar, Tensor, Var};
use crate::data::{Sample, SampleRef};
use crate::error::{Error, Result};
use crate::losses::{cps_loss, gated_dice_loss, one_hot, reconstruction_loss, weak_loss};
use crate::vmf::clustering_loss_op;

/// Named loss values of one evaluation, plus `total`.
pub type Breakdown = BTreeMap<String, f64>;

/// A training batch. Masks of unlabeled samples are all zero and ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<SampleRef>,
    /// `[N, 1, H, W]`.
    pub images: Tensor<f32>,
    /// `[N, K, H, W]` one-hot foreground classes.
    pub masks: Tensor<f32>,
    pub labeled: Vec<bool>,
    /// `[N, K_c]` presence labels, when the setting needs them.
    pub weak: Option<Tensor<f32>>,
}

impl Batch {
    /// Assembles a batch; `labeled` selects whether each sample's mask is
    /// used. Weak labels are required from every sample when `weak_dim` is
    /// set: 1 takes heart presence, 3 takes LV/MYO/RV presence.
    pub fn new(
        items: &[(SampleRef, &Sample, bool)],
        num_classes: usize,
        weak_dim: Option<usize>,
    ) -> Result<Self> {
        let (_, first, _) = items.first().ok_or(Error::EmptyDataset)?;
        let (h, w) = (first.height, first.width);
        let n = items.len();
        let mut images = Vec::with_capacity(n * h * w);
        let mut labels = Vec::with_capacity(n * h * w);
        let mut weak = Vec::new();
        for (r, s, lab) in items {
            if (s.height, s.width) != (h, w) {
                return Err(Error::shape("batch sample", &[h, w], &[s.height, s.width]));
            }
            images.extend_from_slice(&s.image);
            match (&s.mask, lab) {
                (Some(m), true) => labels.extend_from_slice(m),
                (None, true) => {
                    return Err(Error::MissingField(format!(
                        "mask of labeled sample {}/{}",
                        r.domain, r.index
                    )))
                }
                (_, false) => labels.extend(std::iter::repeat_n(0u8, h * w)),
            }
            if let Some(dim) = weak_dim {
                let wl = s.weak.as_ref().ok_or_else(|| {
                    Error::SettingMismatch(format!(
                        "sample {}/{} has no weak label",
                        r.domain, r.index
                    ))
                })?;
                match dim {
                    1 => weak.push(f32::from(wl.heart())),
                    _ if wl.presence.len() == dim => weak.extend(wl.presence.iter().map(|&p| f32::from(p))),
                    _ => {
                        return Err(Error::SettingMismatch(format!(
                            "weak label of length {} where {dim} is needed",
                            wl.presence.len()
                        )))
                    }
                }
            }
        }
        Ok(Self {
            ids: items.iter().map(|(r, _, _)| *r).collect(),
            images: Tensor::from_vec(&[n, 1, h, w], images),
            masks: one_hot(&labels, n, num_classes, h, w),
            labeled: items.iter().map(|(_, _, l)| *l).collect(),
            weak: weak_dim.map(|d| Tensor::from_vec(&[n, d], weak)),
        })
    }

    pub fn len(&self) -> usize {
        self.labeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty()
    }

    /// The same batch with every mask dropped.
    pub fn without_labels(&self) -> Self {
        Self {
            masks: Tensor::zeros(self.masks.shape()),
            labeled: vec![false; self.len()],
            ..self.clone()
        }
    }

    pub fn describe(&self) -> String {
        let mut s = String::new();
        for (i, r) in self.ids.iter().enumerate() {
            let sep = if i == 0 { "" } else { ", " };
            let _ = write!(s, "{sep}{}/{}", r.domain, r.index);
        }
        s
    }
}

/// A composite loss: `total = sum(weight * term)`.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    pub terms: Vec<(String, f64, Var)>,
}

impl Objective {
    fn from_terms<T: Scalar>(g: &mut Graph<T>, terms: Vec<(String, f64, Var)>) -> Self {
        let mut total: Option<Var> = None;
        for (_, w, v) in &terms {
            let scaled = g.scale(*v, T::of(*w));
            total = Some(match total {
                Some(t) => g.add(t, scaled),
                None => scaled,
            });
        }
        Self {
            total: total.expect("at least one term"),
            terms,
        }
    }

    /// Unweighted term values and the weighted total.
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> Breakdown {
        let mut b: Breakdown = self
            .terms
            .iter()
            .map(|(name, _, v)| (name.clone(), g.value(*v).item().as_f64()))
            .collect();
        b.insert("total".into(), g.value(self.total).item().as_f64());
        b
    }
}

/// Builds the setting's objective for one batch.
pub fn objective<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, batch: &Batch, cfg: &TrainConfig) -> Result<Objective> {
    if cfg.setting != model.setting {
        return Err(Error::SettingMismatch(format!(
            "config setting {} but model setting {}",
            cfg.setting, model.setting
        )));
    }
    let weak_dim = cfg.setting.weak_dim();
    let weak_ok = match (&batch.weak, weak_dim) {
        (Some(w), Some(d)) => w.shape()[1] == d,
        (_, None) => true,
        (None, Some(_)) => false,
    };
    if !weak_ok {
        return Err(Error::SettingMismatch(format!(
            "{} needs weak labels of length {}",
            cfg.setting,
            weak_dim.unwrap_or(0)
        )));
    }
    let x = g.constant(batch.images.cast());
    let gt = g.constant(batch.masks.cast());
    let c = batch.weak.as_ref().map(|w| g.constant(w.cast()));
    let mut terms = Vec::new();
    let term = |name: &str, w: f64, v: Var| (name.to_string(), w, v);
    match cfg.setting {
        Setting::Unsup => {
            let o = model.forward(g, 0, x)?;
            let clu = clustering_loss_op(g, o.kernels.expect("kernels"), o.normalized.expect("features"))?;
            terms.push(term("clu", 1.0, clu));
        }
        Setting::Weak => {
            let o = model.forward(g, 0, x)?;
            let weak = weak_loss(g, o.presence.expect("classifier"), c.expect("weak labels"))?;
            let clu = clustering_loss_op(g, o.kernels.expect("kernels"), o.normalized.expect("features"))?;
            terms.push(term("weak", 1.0, weak));
            terms.push(term("clu", 1.0, clu));
        }
        Setting::Vmfnet => {
            let o = model.forward(g, 0, x)?;
            let dice = gated_dice_loss(g, o.seg.expect("seg"), gt, &batch.labeled)?;
            let rec = reconstruction_loss(g, x, o.rec.expect("rec"))?;
            let clu = clustering_loss_op(g, o.kernels.expect("kernels"), o.normalized.expect("features"))?;
            terms.push(term("dice", cfg.lambda_dice, dice));
            terms.push(term("rec", 1.0, rec));
            terms.push(term("clu", 1.0, clu));
        }
        Setting::Vmfweak => {
            let o = model.forward(g, 0, x)?;
            let dice = gated_dice_loss(g, o.seg.expect("seg"), gt, &batch.labeled)?;
            let weak = weak_loss(g, o.presence.expect("classifier"), c.expect("weak labels"))?;
            let clu = clustering_loss_op(g, o.kernels.expect("kernels"), o.normalized.expect("features"))?;
            terms.push(term("dice", cfg.lambda_dice, dice));
            terms.push(term("weak", cfg.lambda_weak, weak));
            terms.push(term("clu", 1.0, clu));
        }
        Setting::Supervised => {
            let o = model.forward(g, 0, x)?;
            let dice = gated_dice_loss(g, o.seg.expect("seg"), gt, &batch.labeled)?;
            terms.push(term("dice", cfg.lambda_dice, dice));
        }
        Setting::Vmfpseudo => {
            let outs = [model.forward(g, 0, x)?, model.forward(g, 1, x)?];
            let segs = [outs[0].seg.expect("seg"), outs[1].seg.expect("seg")];
            for (i, name) in ["a", "b"].into_iter().enumerate() {
                let o = &outs[i];
                let dice = gated_dice_loss(g, segs[i], gt, &batch.labeled)?;
                let clu = clustering_loss_op(g, o.kernels.expect("kernels"), o.normalized.expect("features"))?;
                let pseudo = g.detach(segs[1 - i]);
                let cps = cps_loss(g, pseudo, segs[i])?;
                terms.push(term(&format!("dice_{name}"), cfg.lambda_dice, dice));
                terms.push(term(&format!("clu_{name}"), 1.0, clu));
                terms.push(term(&format!("cps_{name}"), cfg.lambda_cps, cps));
            }
        }
    }
    Ok(Objective::from_terms(g, terms))
}
