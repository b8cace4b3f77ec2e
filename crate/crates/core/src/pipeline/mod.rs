//! Inversion, guidance recording, injected translation and the SDEdit baseline.

mod presets;
mod request;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{DenoiserBackbone, HookContext, HookKind, HookSiteId, PromptEmbedding};
use crate::diffmath::{ddim_invert_step, ddim_step, forward_noise, make_plan, TimestepPlan};
use crate::error::{Error, Result};
use crate::features::{overrides_for_step, FeatureBank, InjectionConfig};
use crate::guidance::{alpha_at, cfg, negative_mix, NegPromptSchedule};
use crate::tensor::Tensor;

pub use presets::{Preset, PresetName};
pub use request::{apply_request_kv, request_from_kv, request_to_kv, REQUEST_KEYS};

/// Where the structure of a translation comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum GuidanceSource {
    /// A real image, `[3, H, W]` in `[-1, 1]`; inverted with the empty prompt.
    Image(Tensor<f64>),
    /// An image generated from `prompt` starting at seeded noise.
    Generated { prompt: String, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationRequest {
    pub guidance: GuidanceSource,
    pub target_prompt: String,
    /// Defaults to the guidance caption (`source_prompt`, or the generation prompt).
    pub negative_prompt: Option<String>,
    /// Caption of a real guidance image, if known.
    pub source_prompt: Option<String>,
    pub injection: InjectionConfig,
    pub guidance_scale: f64,
    pub neg_schedule: NegPromptSchedule,
    pub n_inv_steps: usize,
    pub seed: u64,
    /// Draw the translation's initial noise independently of the guidance
    /// instead of sharing it. Only for studying what shared noise buys.
    pub independent_noise: bool,
}

impl TranslationRequest {
    /// A request with the real-image defaults.
    pub fn new(guidance: GuidanceSource, target_prompt: impl Into<String>) -> Self {
        let mut req = Self {
            guidance,
            target_prompt: target_prompt.into(),
            negative_prompt: None,
            source_prompt: None,
            injection: InjectionConfig::default(),
            guidance_scale: 1.0,
            neg_schedule: NegPromptSchedule::NEUTRAL,
            n_inv_steps: 1000,
            seed: 0,
            independent_noise: false,
        };
        let preset = match req.guidance {
            GuidanceSource::Image(_) => PresetName::DefaultReal,
            GuidanceSource::Generated { .. } => PresetName::DefaultGenerated,
        };
        Preset::get(preset).apply(&mut req);
        req
    }

    pub fn validate(&self, backbone: &dyn DenoiserBackbone) -> Result<()> {
        if !(self.guidance_scale >= 1.0) {
            return Err(Error::invalid(format!("guidance scale must be >= 1, got {}", self.guidance_scale)));
        }
        if !(0.0..=1.0).contains(&self.neg_schedule.alpha0) {
            return Err(Error::invalid(format!("alpha0 must lie in [0, 1], got {}", self.neg_schedule.alpha0)));
        }
        self.injection.validate(backbone)?;
        if let GuidanceSource::Image(img) = &self.guidance {
            backbone.encode_image(img)?;
        }
        backbone.encode_prompt(&self.target_prompt)?;
        backbone.encode_prompt(&self.negative())?;
        backbone.encode_prompt(&self.guidance_prompt())?;
        Ok(())
    }

    /// Prompt of the guidance denoising run: empty for real images.
    pub fn guidance_prompt(&self) -> String {
        match &self.guidance {
            GuidanceSource::Image(_) => String::new(),
            GuidanceSource::Generated { prompt, .. } => prompt.clone(),
        }
    }

    pub fn negative(&self) -> String {
        if let Some(n) = &self.negative_prompt {
            return n.clone();
        }
        match &self.guidance {
            GuidanceSource::Image(_) => self.source_prompt.clone().unwrap_or_default(),
            GuidanceSource::Generated { prompt, .. } => prompt.clone(),
        }
    }
}

/// What happened at one sampling step of a translation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub t: usize,
    pub t_prev: usize,
    pub feature_sites: Vec<HookSiteId>,
    pub attention_sites: Vec<HookSiteId>,
    pub alpha: f64,
    pub guidance_scale: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |s: &[HookSiteId]| {
            if s.is_empty() {
                "-".to_string()
            } else {
                s.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            }
        };
        write!(
            f,
            "step={} t={} t_prev={} features={} attention={} alpha={} w={}",
            self.step,
            self.t,
            self.t_prev,
            join(&self.feature_sites),
            join(&self.attention_sites),
            self.alpha,
            self.guidance_scale
        )
    }
}

#[derive(Debug, Clone)]
pub struct TranslationResult {
    /// Translated image, `[3, H, W]` in `[-1, 1]` (unclamped).
    pub output: Tensor<f64>,
    pub initial_latent: Tensor<f64>,
    /// The guidance run's own sample, i.e. the reconstruction of the guidance.
    pub guidance_reconstruction: Tensor<f64>,
    pub bank: Arc<FeatureBank>,
    pub log: Vec<StepLog>,
    /// Largest `|row sum - 1|` over every attention matrix computed by either run.
    pub max_attention_row_error: f64,
    pub attention_rows_checked: usize,
}

/// Result of running the deterministic sampler backwards.
#[derive(Debug, Clone)]
pub struct Inversion {
    pub x_t: Tensor<f64>,
    /// `x` at every plan timestep from clean to noisiest, endpoints included.
    pub trajectory: Vec<Tensor<f64>>,
}

fn invert_impl(
    image: &Tensor<f64>,
    backbone: &dyn DenoiserBackbone,
    n_inv_steps: usize,
    keep: bool,
) -> Result<Inversion> {
    let plan = make_plan(backbone.schedule(), n_inv_steps)?;
    let empty = backbone.empty_prompt();
    let mut x = backbone.encode_image(image)?;
    let mut trajectory = Vec::new();
    if keep {
        trajectory.push(x.clone());
    }
    for (t, t_next) in plan.inversion_transitions() {
        let eps = backbone.denoise(&x, t, &empty, &mut HookContext::new())?;
        x = ddim_invert_step(&x, &eps, t, t_next, backbone.schedule())?;
        if keep {
            trajectory.push(x.clone());
        }
    }
    Ok(Inversion { x_t: x, trajectory })
}

/// DDIM inversion with the empty prompt over `n_inv_steps` evenly spaced steps.
pub fn invert(image: &Tensor<f64>, backbone: &dyn DenoiserBackbone, n_inv_steps: usize) -> Result<Inversion> {
    invert_impl(image, backbone, n_inv_steps, true)
}

/// Like [`invert`] but keeps only the final latent.
pub fn invert_latent(
    image: &Tensor<f64>,
    backbone: &dyn DenoiserBackbone,
    n_inv_steps: usize,
) -> Result<Tensor<f64>> {
    Ok(invert_impl(image, backbone, n_inv_steps, false)?.x_t)
}

/// Standard normal latent drawn from `seed`.
pub fn seeded_noise(backbone: &dyn DenoiserBackbone, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(backbone.latent_shape(), &mut rng)
}

/// Initial latent of the guidance run: the inversion of a real image or the
/// seeded noise of a generated one.
pub fn guidance_start(req: &TranslationRequest, backbone: &dyn DenoiserBackbone) -> Result<Tensor<f64>> {
    match &req.guidance {
        GuidanceSource::Image(img) => invert_latent(img, backbone, req.n_inv_steps),
        GuidanceSource::Generated { seed, .. } => Ok(seeded_noise(backbone, *seed)),
    }
}

/// Sites any of `configs` would read at `step_index`.
pub fn union_sites(configs: &[&InjectionConfig], step_index: usize, t: usize) -> BTreeSet<HookSiteId> {
    configs.iter().flat_map(|c| overrides_for_step(c, step_index, t).into_keys()).collect()
}

/// Output of the guidance denoising run.
#[derive(Debug, Clone)]
pub struct GuidanceRun {
    pub bank: FeatureBank,
    pub reconstruction: Tensor<f64>,
    pub max_attention_row_error: f64,
    pub attention_rows_checked: usize,
}

/// Sample from `x_t` with `prompt` (no classifier-free guidance), recording at
/// each step the sites returned by `sites(step_index, t)`.
pub fn record_guidance(
    backbone: &dyn DenoiserBackbone,
    x_t: &Tensor<f64>,
    prompt: &str,
    n_steps: usize,
    seed: u64,
    sites: impl Fn(usize, usize) -> BTreeSet<HookSiteId>,
) -> Result<GuidanceRun> {
    let plan = make_plan(backbone.schedule(), n_steps)?;
    let emb = backbone.encode_prompt(prompt)?;
    let mut bank = FeatureBank::new(backbone, prompt, plan.sampling_timesteps(), seed);
    let mut x = x_t.clone();
    let (mut err, mut rows) = (0.0f64, 0);
    for (i, (t, t_prev)) in plan.transitions().enumerate() {
        let mut hooks = HookContext::recording(sites(i, t));
        let eps = backbone.denoise(&x, t, &emb, &mut hooks)?;
        err = err.max(hooks.max_attention_row_error());
        rows += hooks.attention_rows_checked();
        for (site, value) in hooks.take_recorded() {
            bank.record(site, t, value)?;
        }
        x = ddim_step(&x, &eps, t, t_prev, backbone.schedule())?;
    }
    Ok(GuidanceRun {
        bank,
        reconstruction: backbone.decode_latent(&x)?,
        max_attention_row_error: err,
        attention_rows_checked: rows,
    })
}

struct Branch {
    emb: PromptEmbedding,
}

impl Branch {
    fn eval(
        &self,
        backbone: &dyn DenoiserBackbone,
        x: &Tensor<f64>,
        t: usize,
        overrides: &[(HookSiteId, Tensor)],
        stats: &mut (f64, usize),
    ) -> Result<Tensor<f64>> {
        let mut hooks = HookContext::new();
        for (site, v) in overrides {
            hooks.set_override(*site, v.clone());
        }
        let eps = backbone.denoise(x, t, &self.emb, &mut hooks)?;
        stats.0 = stats.0.max(hooks.max_attention_row_error());
        stats.1 += hooks.attention_rows_checked();
        Ok(eps)
    }
}

/// Sampling progress in `[0, 1]` of step `i` out of `n`.
pub fn step_fraction(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// Run the translation process from `x_t` using a recorded guidance run.
pub fn translate_with_guidance(
    req: &TranslationRequest,
    backbone: &dyn DenoiserBackbone,
    x_t: &Tensor<f64>,
    guidance: &GuidanceRun,
    bank: Arc<FeatureBank>,
) -> Result<TranslationResult> {
    req.validate(backbone)?;
    let cfg_inj = &req.injection;
    let plan = make_plan(backbone.schedule(), cfg_inj.n_steps)?;
    check_bank(&bank, backbone, &plan)?;
    let x_start = if req.independent_noise {
        seeded_noise(backbone, req.seed ^ 0x1d3e_fa11)
    } else {
        x_t.clone()
    };
    let cond = Branch { emb: backbone.encode_prompt(&req.target_prompt)? };
    let empty = Branch { emb: backbone.empty_prompt() };
    let neg = Branch { emb: backbone.encode_prompt(&req.negative())? };
    let w = req.guidance_scale;
    let n = plan.count();
    let mut stats = (guidance.max_attention_row_error, guidance.attention_rows_checked);
    let mut x = x_start.clone();
    let mut log = Vec::with_capacity(n);
    for (i, (t, t_prev)) in plan.transitions().enumerate() {
        let plan_i = overrides_for_step(cfg_inj, i, t);
        let mut overrides = Vec::with_capacity(plan_i.len());
        for (site, (key_site, key_t)) in &plan_i {
            let v = bank
                .get(key_site, *key_t)
                .ok_or_else(|| Error::MissingEntry(format!("{key_site}@{key_t}")))?;
            overrides.push((*site, v.clone()));
        }
        let alpha = alpha_at(&req.neg_schedule, step_fraction(i, n));
        let eps_c = cond.eval(backbone, &x, t, &overrides, &mut stats)?;
        let eps = if w == 1.0 {
            eps_c
        } else {
            let eps_ref = if alpha == 1.0 {
                empty.eval(backbone, &x, t, &overrides, &mut stats)?
            } else if alpha == 0.0 {
                neg.eval(backbone, &x, t, &overrides, &mut stats)?
            } else {
                let e = empty.eval(backbone, &x, t, &overrides, &mut stats)?;
                let ng = neg.eval(backbone, &x, t, &overrides, &mut stats)?;
                negative_mix(&e, &ng, alpha)?
            };
            cfg(&eps_c, &eps_ref, w)?
        };
        x = ddim_step(&x, &eps, t, t_prev, backbone.schedule())?;
        let (feature_sites, attention_sites) = plan_i
            .keys()
            .copied()
            .partition::<Vec<_>, _>(|s| s.kind == HookKind::ResblockFeatures);
        log.push(StepLog { step: i, t, t_prev, feature_sites, attention_sites, alpha, guidance_scale: w });
    }
    Ok(TranslationResult {
        output: backbone.decode_latent(&x)?,
        initial_latent: x_start,
        guidance_reconstruction: guidance.reconstruction.clone(),
        bank,
        log,
        max_attention_row_error: stats.0,
        attention_rows_checked: stats.1,
    })
}

fn check_bank(bank: &FeatureBank, backbone: &dyn DenoiserBackbone, plan: &TimestepPlan) -> Result<()> {
    let m = bank.manifest();
    if m.checkpoint_id != backbone.checkpoint_id() {
        return Err(Error::ManifestMismatch(format!(
            "bank was recorded with checkpoint {}, backbone is {}",
            m.checkpoint_id,
            backbone.checkpoint_id()
        )));
    }
    if m.timesteps != plan.sampling_timesteps() {
        return Err(Error::ManifestMismatch("bank plan differs from the translation plan".into()));
    }
    Ok(())
}

/// Full translation: obtain the guidance latent, record the guidance run in
/// lock-step with the injection plan, then run the injected translation.
pub fn translate(req: &TranslationRequest, backbone: &dyn DenoiserBackbone) -> Result<TranslationResult> {
    req.validate(backbone)?;
    let x_t = guidance_start(req, backbone)?;
    translate_from_latent(req, backbone, &x_t)
}

/// [`translate`] with a precomputed guidance latent (e.g. a cached inversion).
pub fn translate_from_latent(
    req: &TranslationRequest,
    backbone: &dyn DenoiserBackbone,
    x_t: &Tensor<f64>,
) -> Result<TranslationResult> {
    req.validate(backbone)?;
    let inj = &req.injection;
    let run = record_guidance(backbone, x_t, &req.guidance_prompt(), inj.n_steps, req.seed, |i, t| {
        union_sites(&[inj], i, t)
    })?;
    let bank = Arc::new(run.bank.clone());
    translate_with_guidance(req, backbone, x_t, &run, bank)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeditConfig {
    /// Step count of a full-length run; a partial run uses a proportional share.
    pub n_steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SdeditConfig {
    fn default() -> Self {
        Self { n_steps: 50, guidance_scale: 7.5, seed: 0 }
    }
}

/// Noise `image` to `round(noise_fraction * T)` and denoise it towards `prompt`.
pub fn sdedit(
    image: &Tensor<f64>,
    prompt: &str,
    noise_fraction: f64,
    backbone: &dyn DenoiserBackbone,
    config: &SdeditConfig,
) -> Result<Tensor<f64>> {
    if !(noise_fraction > 0.0 && noise_fraction < 1.0) {
        return Err(Error::invalid(format!("noise fraction must lie in (0, 1), got {noise_fraction}")));
    }
    if config.guidance_scale < 1.0 || config.n_steps == 0 {
        return Err(Error::invalid("sdedit needs guidance_scale >= 1 and n_steps > 0"));
    }
    let s = backbone.schedule();
    let total = s.num_train_steps();
    let t_start = ((noise_fraction * total as f64).round() as usize).clamp(1, total);
    let steps = ((noise_fraction * config.n_steps as f64).ceil() as usize).clamp(1, t_start);
    let plan = TimestepPlan::starting_at(t_start, steps)?;
    let x0 = backbone.encode_image(image)?;
    let mut x = forward_noise(&x0, t_start, &seeded_noise(backbone, config.seed), s)?;
    let cond = backbone.encode_prompt(prompt)?;
    let empty = backbone.empty_prompt();
    for (t, t_prev) in plan.transitions() {
        let c = backbone.denoise(&x, t, &cond, &mut HookContext::new())?;
        let eps = if config.guidance_scale == 1.0 {
            c
        } else {
            let e = backbone.denoise(&x, t, &empty, &mut HookContext::new())?;
            cfg(&c, &e, config.guidance_scale)?
        };
        x = ddim_step(&x, &eps, t, t_prev, s)?;
    }
    backbone.decode_latent(&x)
}

/// Plain classifier-free-guided sampling from `x_t` with no injection.
pub fn sample(
    backbone: &dyn DenoiserBackbone,
    x_t: &Tensor<f64>,
    prompt: &str,
    n_steps: usize,
    guidance_scale: f64,
) -> Result<Tensor<f64>> {
    let plan = make_plan(backbone.schedule(), n_steps)?;
    let cond = backbone.encode_prompt(prompt)?;
    let empty = backbone.empty_prompt();
    let mut x = x_t.clone();
    for (t, t_prev) in plan.transitions() {
        let c = backbone.denoise(&x, t, &cond, &mut HookContext::new())?;
        let eps = if guidance_scale == 1.0 {
            c
        } else {
            let e = backbone.denoise(&x, t, &empty, &mut HookContext::new())?;
            cfg(&c, &e, guidance_scale)?
        };
        x = ddim_step(&x, &eps, t, t_prev, backbone.schedule())?;
    }
    backbone.decode_latent(&x)
}

/// Render the per-step log as text, one line per step.
pub fn format_log(log: &[StepLog]) -> String {
    log.iter().map(|l| format!("{l}\n")).collect()
}
