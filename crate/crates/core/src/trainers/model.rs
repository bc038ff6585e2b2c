use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Setting, TrainConfig};
use crate::autograd::{Graph, ParamId, Scalar, Tensor, Var};
use crate::error::Result;
use crate::networks::{ArchitectureConfig, Classifier, Encoder, Reconstructor, SegHead};
use crate::nn::ParamStore;
use crate::seed::derive_seed;
use crate::vmf::{normalize_features_op, random_unit_rows, recompose_op, vmf_activations_op};

const INIT_STREAM: u64 = 0x696e6974;
const PREDICT_CHUNK: usize = 16;

/// One complete model: encoder, kernel bank and whichever heads the setting
/// uses. Parameter names start with the twin's prefix.
#[derive(Clone, Debug)]
pub struct Twin {
    pub prefix: String,
    encoder: Encoder,
    kernels: Option<ParamId>,
    seg: Option<SegHead>,
    rec: Option<Reconstructor>,
    clf: Option<Classifier>,
}

impl Twin {
    pub fn kernels(&self) -> Option<ParamId> {
        self.kernels
    }

    pub fn encoder_prefix(&self) -> String {
        format!("{}.encoder.", self.prefix)
    }
}

/// Graph nodes produced by one forward pass of a twin.
#[derive(Clone, Copy, Debug)]
pub struct TwinOutputs {
    pub features: Var,
    pub normalized: Option<Var>,
    pub kernels: Option<Var>,
    pub activations: Option<Var>,
    pub seg: Option<Var>,
    pub rec: Option<Var>,
    pub presence: Option<Var>,
}

/// Inference outputs of the first twin for a stack of images.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions<T> {
    /// `[N, J, H/s, W/s]`.
    pub activations: Option<Tensor<T>>,
    /// `[N, K, H, W]` class probabilities.
    pub seg: Option<Tensor<T>>,
    /// `[N, 1, H, W]`.
    pub reconstruction: Option<Tensor<T>>,
    /// `[N, K_c]`.
    pub presence: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub setting: Setting,
    pub arch: ArchitectureConfig,
    pub sigma: f64,
    pub params: ParamStore<T>,
    pub twins: Vec<Twin>,
}

impl<T: Scalar> Model<T> {
    /// Builds the model of `cfg` with initialization streams derived from
    /// `cfg.seed`; twins get distinct streams.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let seeds: Vec<u64> = (0..cfg.setting.num_twins())
            .map(|i| derive_seed(cfg.seed, &[INIT_STREAM, i as u64]))
            .collect();
        Self::with_seeds(cfg, &seeds)
    }

    /// Builds one twin per seed.
    pub fn with_seeds(cfg: &TrainConfig, seeds: &[u64]) -> Result<Self> {
        cfg.validate()?;
        let setting = cfg.setting;
        let arch = &cfg.arch;
        let mut ps = ParamStore::new();
        let mut twins = Vec::new();
        for (i, &seed) in seeds.iter().enumerate() {
            let prefix = ((b'a' + i as u8) as char).to_string();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let encoder = Encoder::new(&mut ps, &format!("{prefix}.encoder"), arch, &mut rng);
            let kernels = setting.has_kernels().then(|| {
                ps.add_param(
                    format!("{prefix}.kernels"),
                    random_unit_rows(arch.num_kernels, arch.feature_channels, &mut rng),
                )
            });
            let seg_in = if setting.has_kernels() {
                arch.num_kernels
            } else {
                arch.feature_channels
            };
            let seg = setting
                .has_segmentation()
                .then(|| SegHead::new(&mut ps, &format!("{prefix}.seg"), arch, seg_in, &mut rng));
            let rec = setting
                .has_reconstruction()
                .then(|| Reconstructor::new(&mut ps, &format!("{prefix}.rec"), arch, &mut rng));
            let clf = match setting {
                Setting::Weak => Some(Classifier::new(
                    &mut ps,
                    &format!("{prefix}.clf"),
                    arch,
                    arch.num_kernels,
                    arch.feature_size(),
                    1,
                    &mut rng,
                )?),
                Setting::Vmfweak => Some(Classifier::new(
                    &mut ps,
                    &format!("{prefix}.clf"),
                    arch,
                    arch.num_classes,
                    arch.input_size,
                    3,
                    &mut rng,
                )?),
                _ => None,
            };
            twins.push(Twin {
                prefix,
                encoder,
                kernels,
                seg,
                rec,
                clf,
            });
        }
        Ok(Self {
            setting,
            arch: arch.clone(),
            sigma: cfg.sigma,
            params: ps,
            twins,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            setting: self.setting,
            arch: self.arch.clone(),
            sigma: self.sigma,
            params: self.params.cast(),
            twins: self.twins.clone(),
        }
    }

    /// Kernel bank of twin `i`, `[J, D]`.
    pub fn kernels(&self, i: usize) -> Option<&Tensor<T>> {
        self.twins[i].kernels.map(|id| self.params.get(id))
    }

    /// Forward pass of twin `i` on images `x` `[N, 1, H, W]`. In the unsup
    /// setting the encoder runs in inference mode outside `g`, so its
    /// features enter as constants.
    pub fn forward(&self, g: &mut Graph<T>, i: usize, x: Var) -> Result<TwinOutputs> {
        let t = &self.twins[i];
        let ps = &self.params;
        let features = if self.setting == Setting::Unsup {
            let mut eg = Graph::new();
            let xv = eg.constant(g.value(x).clone());
            let z = t.encoder.forward(&mut eg, ps, xv)?;
            g.constant(eg.value(z).clone())
        } else {
            t.encoder.forward(g, ps, x)?
        };
        let mut out = TwinOutputs {
            features,
            normalized: None,
            kernels: None,
            activations: None,
            seg: None,
            rec: None,
            presence: None,
        };
        let seg_input = match t.kernels {
            Some(kid) => {
                let zn = normalize_features_op(g, features)?;
                let mu = ps.var(g, kid);
                let act = vmf_activations_op(g, zn, mu, self.sigma)?;
                if let Some(rec) = &t.rec {
                    let z_tilde = recompose_op(g, act, mu)?;
                    out.rec = Some(rec.forward(g, ps, z_tilde)?);
                }
                out.normalized = Some(zn);
                out.kernels = Some(mu);
                out.activations = Some(act);
                act
            }
            None => features,
        };
        if let Some(seg) = &t.seg {
            out.seg = Some(seg.forward(g, ps, seg_input)?);
        }
        if let Some(clf) = &t.clf {
            let input = match self.setting {
                Setting::Vmfweak => out.seg.expect("vmfweak has a segmentation head"),
                _ => seg_input,
            };
            out.presence = Some(clf.forward(g, ps, input)?);
        }
        Ok(out)
    }

    /// Inference with the first twin, in chunks of 16 images.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Predictions<T>> {
        let n = images.shape()[0];
        let mut parts: [Vec<Tensor<T>>; 4] = Default::default();
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let items: Vec<Tensor<T>> = (start..(start + PREDICT_CHUNK).min(n))
                .map(|i| images.select(i))
                .collect();
            let mut g = Graph::new();
            let x = g.constant(Tensor::stack(&items));
            let out = self.forward(&mut g, 0, x)?;
            for (slot, v) in parts
                .iter_mut()
                .zip([out.activations, out.seg, out.rec, out.presence])
            {
                if let Some(v) = v {
                    slot.push(g.value(v).clone());
                }
            }
        }
        let join = |v: &[Tensor<T>]| -> Option<Tensor<T>> {
            let first = v.first()?;
            let mut shape = first.shape().to_vec();
            shape[0] = v.iter().map(|t| t.shape()[0]).sum();
            Some(Tensor::from_vec(
                &shape,
                v.iter().flat_map(|t| t.data().iter().copied()).collect(),
            ))
        };
        Ok(Predictions {
            activations: join(&parts[0]),
            seg: join(&parts[1]),
            reconstruction: join(&parts[2]),
            presence: join(&parts[3]),
        })
    }
}
