//! The denoiser seam and the toy pixel-space backbone behind it.

pub mod attention;
pub mod checkpoint;
pub mod hooks;
pub mod nn;
pub mod prompt;
pub mod train;
pub mod unet;

use crate::diffmath::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use hooks::{HookContext, HookKind, HookSiteId, Stage};
pub use prompt::{PromptEmbedding, ToyPromptEncoder};
pub use unet::Architecture;

use nn::ParamStore;
use unet::Unet;

/// A text-conditioned noise predictor with named hook sites.
///
/// Latents are `[C, H, W]` in f64; implementations may compute in lower
/// precision internally.
pub trait DenoiserBackbone: Send + Sync {
    fn denoise(
        &self,
        x_t: &Tensor<f64>,
        t: usize,
        prompt: &PromptEmbedding,
        hooks: &mut HookContext,
    ) -> Result<Tensor<f64>>;

    fn encode_prompt(&self, text: &str) -> Result<PromptEmbedding>;

    fn empty_prompt(&self) -> PromptEmbedding;

    fn schedule(&self) -> &NoiseSchedule;

    fn checkpoint_id(&self) -> &str;

    /// Per-sample shape of a hook site, `None` if the site does not exist.
    fn site_shape(&self, site: &HookSiteId) -> Option<Vec<usize>>;

    /// Every hook site the backbone exposes, in sorted order.
    fn hook_sites(&self) -> Vec<HookSiteId>;

    fn latent_shape(&self) -> Vec<usize>;

    /// Image in `[-1, 1]`, `[3, H, W]`, to a latent. Identity for pixel space.
    fn encode_image(&self, image: &Tensor<f64>) -> Result<Tensor<f64>>;

    fn decode_latent(&self, latent: &Tensor<f64>) -> Result<Tensor<f64>>;
}

/// The trainable toy U-Net with its prompt encoder and schedule.
pub struct ToyBackbone {
    pub(crate) unet: Unet,
    pub(crate) params: ParamStore,
    schedule: NoiseSchedule,
    encoder: ToyPromptEncoder,
    id: String,
}

impl std::fmt::Debug for ToyBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyBackbone")
            .field("architecture", self.architecture())
            .field("schedule", &self.schedule.kind())
            .field("num_params", &self.params.num_params())
            .field("checkpoint_id", &self.id)
            .finish()
    }
}

impl ToyBackbone {
    /// Freshly initialised (untrained) backbone.
    pub fn new(
        arch: &Architecture,
        kind: ScheduleKind,
        num_train_steps: usize,
        init_seed: u64,
    ) -> Result<Self> {
        let (unet, params) = Unet::new(arch, init_seed)?;
        let schedule = make_schedule(num_train_steps, kind)?;
        Ok(Self::assemble(unet, params, schedule))
    }

    pub(crate) fn assemble(unet: Unet, params: ParamStore, schedule: NoiseSchedule) -> Self {
        let arch = unet.architecture();
        let encoder = ToyPromptEncoder::new(arch.text_dim, arch.prompt_seed);
        let mut b = Self { unet, params, schedule, encoder, id: String::new() };
        b.refresh_id();
        b
    }

    pub(crate) fn refresh_id(&mut self) {
        self.id = checkpoint::content_id(&checkpoint::to_bytes(self));
    }

    pub fn architecture(&self) -> &Architecture {
        self.unet.architecture()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn prompt_encoder(&self) -> &ToyPromptEncoder {
        &self.encoder
    }

    pub fn unet(&self) -> &Unet {
        &self.unet
    }

    /// Noise prediction for a batch of f32 images `[B, 3, R, R]`.
    pub fn denoise_batch(
        &self,
        x: &Tensor,
        ts: &[usize],
        prompts: &[&PromptEmbedding],
    ) -> Result<Tensor> {
        let max = self.schedule.num_train_steps();
        if let Some(&t) = ts.iter().find(|&&t| t > max) {
            return Err(Error::TimestepOutOfRange { t, max });
        }
        let (eps, _) = self.unet.forward(&self.params, x, ts, prompts, &mut HookContext::new(), false)?;
        Ok(eps)
    }
}

impl DenoiserBackbone for ToyBackbone {
    fn denoise(
        &self,
        x_t: &Tensor<f64>,
        t: usize,
        prompt: &PromptEmbedding,
        hooks: &mut HookContext,
    ) -> Result<Tensor<f64>> {
        let max = self.schedule.num_train_steps();
        if t > max {
            return Err(Error::TimestepOutOfRange { t, max });
        }
        x_t.ensure_shape(&self.latent_shape())?;
        let mut shape = vec![1];
        shape.extend_from_slice(x_t.shape());
        let x = x_t.to_f32().reshape(shape)?;
        let (eps, _) = self.unet.forward(&self.params, &x, &[t], &[prompt], hooks, false)?;
        Ok(eps.reshape(x_t.shape().to_vec())?.to_f64())
    }

    fn encode_prompt(&self, text: &str) -> Result<PromptEmbedding> {
        self.encoder.encode(text)
    }

    fn empty_prompt(&self) -> PromptEmbedding {
        self.encoder.empty()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn checkpoint_id(&self) -> &str {
        &self.id
    }

    fn site_shape(&self, site: &HookSiteId) -> Option<Vec<usize>> {
        self.unet.site_shape(site)
    }

    fn hook_sites(&self) -> Vec<HookSiteId> {
        self.unet.hook_sites()
    }

    fn latent_shape(&self) -> Vec<usize> {
        self.architecture().image_shape().to_vec()
    }

    fn encode_image(&self, image: &Tensor<f64>) -> Result<Tensor<f64>> {
        image.ensure_shape(&self.latent_shape())?;
        Ok(image.clone())
    }

    fn decode_latent(&self, latent: &Tensor<f64>) -> Result<Tensor<f64>> {
        latent.ensure_shape(&self.latent_shape())?;
        Ok(latent.clone())
    }
}
