use crate::error::{Error, Result};
use crate::fusion::{adapt, adapt_backward, AdapterParams, FusionStrategy};
use crate::numerics::{cosine_lr, sgd_update, Rng, Scalar, Tensor2D};
use crate::params::{prefixed, prefixed_mut, NamedTensors};
use crate::text::TokenizedSample;
use crate::vision::{encode_global, encode_local, GlobalEncoder, Image, LocalEncoder, VisionConfig};

use super::{loss_and_grads, LmConfig, LmParams};

/// Frozen encoder outputs for one image.
#[derive(Debug, Clone)]
pub struct VisualFeatures<T = f32> {
    pub global: Tensor2D<T>,
    pub local: Tensor2D<T>,
}

/// Both encoders, the adapter and the language model, plus the fusion
/// strategy they are wired with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub global: GlobalEncoder<T>,
    pub local: LocalEncoder<T>,
    pub adapter: AdapterParams<T>,
    pub lm: LmParams<T>,
    pub strategy: FusionStrategy,
}

/// Gradients of the trainable groups; `None` for frozen or bypassed ones.
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    pub adapter: Option<AdapterParams<T>>,
    pub lm: Option<LmParams<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty() -> Self {
        Self {
            adapter: None,
            lm: None,
        }
    }

    /// `self += other`; groups missing on either side are taken as zero.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        fn add<T: Scalar, P: NamedTensors<T> + Clone>(dst: &mut Option<P>, src: &Option<P>) -> Result<()> {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => crate::params::accumulate(d, s),
                (None, Some(s)) => {
                    *dst = Some(s.clone());
                    Ok(())
                }
                (_, None) => Ok(()),
            }
        }
        add(&mut self.adapter, &other.adapter)?;
        add(&mut self.lm, &other.lm)
    }

    pub fn scale(&mut self, alpha: T) {
        if let Some(a) = self.adapter.as_mut() {
            crate::params::scale_all(a, alpha);
        }
        if let Some(l) = self.lm.as_mut() {
            crate::params::scale_all(l, alpha);
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Initializes every component from independent streams of `seed`, so
    /// models that differ only in strategy share all weights.
    pub fn init(
        vision: &VisionConfig,
        lm_cfg: &LmConfig,
        vocab_size: usize,
        strategy: FusionStrategy,
        seed: u64,
    ) -> Result<Self> {
        vision.validate()?;
        lm_cfg.validate()?;
        if vision.d_glo != lm_cfg.d_model {
            return Err(Error::Config(format!(
                "global feature width {} must equal the language model width {}",
                vision.d_glo, lm_cfg.d_model
            )));
        }
        if vocab_size > lm_cfg.max_vocab {
            return Err(Error::Config(format!(
                "vocabulary of {vocab_size} exceeds the limit {}",
                lm_cfg.max_vocab
            )));
        }
        let root = Rng::new(seed);
        Ok(Self {
            global: GlobalEncoder::init(vision, &mut root.split(1)),
            local: LocalEncoder::init(vision, &mut root.split(2)),
            adapter: AdapterParams::init(vision.d_loc, lm_cfg.d_model, &mut root.split(3)),
            lm: LmParams::init(lm_cfg, vocab_size, &mut root.split(4)),
            strategy,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            global: self.global.cast(),
            local: self.local.cast(),
            adapter: self.adapter.cast(),
            lm: self.lm.cast(),
            strategy: self.strategy,
        }
    }

    pub fn encode(&self, img: &Image) -> Result<VisualFeatures<T>> {
        Ok(VisualFeatures {
            global: encode_global(img, &self.global)?,
            local: encode_local(img, &self.local)?,
        })
    }

    /// Fused visual tokens and, when the adapter is on the data path, the
    /// adapted local stream.
    pub fn visual_tokens(
        &self,
        feats: &VisualFeatures<T>,
    ) -> Result<(Tensor2D<T>, Option<Tensor2D<T>>)> {
        let aloc = if self.strategy.uses_adapter() {
            Some(adapt(&feats.local, &self.adapter)?)
        } else {
            None
        };
        let fused = self.strategy.fuse(&feats.global, aloc.as_ref())?;
        Ok((fused, aloc))
    }

    /// Loss of one sample and the gradients of every unfrozen group on its
    /// data path.
    pub fn sample_grads(
        &self,
        feats: &VisualFeatures<T>,
        sample: &TokenizedSample,
    ) -> Result<(T, Gradients<T>)> {
        let (fused, _) = self.visual_tokens(feats)?;
        let back = loss_and_grads(&fused, sample, &self.lm)?;
        let adapter = match self.strategy.local_grad(&back.d_fused)? {
            Some(d_aloc) if !self.adapter.frozen => {
                let mut g = self.adapter.zeros_like();
                adapt_backward(&feats.local, &d_aloc, &mut g)?;
                Some(g)
            }
            _ => None,
        };
        Ok((
            back.loss,
            Gradients {
                adapter,
                lm: back.lm,
            },
        ))
    }

    /// One SGD step at the cosine-annealed rate for `step` of
    /// `total_steps`. Frozen groups are left untouched whatever the
    /// gradient says.
    pub fn sgd_step(
        &mut self,
        grads: &Gradients<T>,
        step: usize,
        total_steps: usize,
        lr0: f64,
    ) -> Result<()> {
        let lr = cosine_lr(lr0, step, total_steps);
        if let (Some(g), false) = (&grads.adapter, self.adapter.frozen) {
            apply(&mut self.adapter, g, lr)?;
        }
        if let (Some(g), false) = (&grads.lm, self.lm.frozen) {
            apply(&mut self.lm, g, lr)?;
        }
        Ok(())
    }
}

fn apply<T: Scalar, P: NamedTensors<T>>(params: &mut P, grads: &P, lr: f64) -> Result<()> {
    let grads = grads.named();
    let mut params = params.named_mut();
    if grads.len() != params.len() {
        return Err(Error::Dimension("gradient layout differs from parameters".into()));
    }
    for ((pn, p), (gn, g)) in params.iter_mut().zip(grads) {
        if *pn != gn {
            return Err(Error::Dimension(format!("gradient {gn} does not match {pn}")));
        }
        sgd_update(p, g, lr)?;
    }
    Ok(())
}

impl<T: Scalar> NamedTensors<T> for ModelParams<T> {
    fn named(&self) -> Vec<(String, &Tensor2D<T>)> {
        prefixed("global", self.global.named())
            .chain(prefixed("local", self.local.named()))
            .chain(prefixed("adapter", self.adapter.named()))
            .chain(prefixed("lm", self.lm.named()))
            .collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor2D<T>)> {
        prefixed_mut("global", self.global.named_mut())
            .chain(prefixed_mut("local", self.local.named_mut()))
            .chain(prefixed_mut("adapter", self.adapter.named_mut()))
            .chain(prefixed_mut("lm", self.lm.named_mut()))
            .collect()
    }
}
