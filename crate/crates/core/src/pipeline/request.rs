//! Translation requests as flat key-value configuration.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::load_png;
use crate::kvconfig::KvConfig;
use crate::pipeline::{GuidanceSource, Preset, PresetName, TranslationRequest};

pub const REQUEST_KEYS: &[&str] = &[
    "preset",
    "guidance.image",
    "guidance.prompt",
    "guidance.seed",
    "prompt.target",
    "prompt.negative",
    "prompt.source",
    "cfg.scale",
    "negprompt.schedule",
    "negprompt.alpha0",
    "injection.n_steps",
    "injection.tau_f",
    "injection.tau_a",
    "injection.feature_layers",
    "injection.attention_layers",
    "injection.encoder_feature_layers",
    "inversion.steps",
    "run.seed",
    "run.independent_noise",
];

fn join(set: &BTreeSet<usize>) -> String {
    set.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
}

/// Serialise `req`; a real guidance image is referenced by `image_path`.
pub fn request_to_kv(req: &TranslationRequest, image_path: Option<&str>) -> Result<KvConfig> {
    let mut c = KvConfig::new();
    match &req.guidance {
        GuidanceSource::Image(_) => {
            let p = image_path.ok_or_else(|| Error::invalid("a real guidance image needs a path"))?;
            c.set("guidance.image", p);
        }
        GuidanceSource::Generated { prompt, seed } => {
            c.set("guidance.prompt", prompt);
            c.set("guidance.seed", seed);
        }
    }
    c.set("prompt.target", &req.target_prompt);
    if let Some(n) = &req.negative_prompt {
        c.set("prompt.negative", n);
    }
    if let Some(s) = &req.source_prompt {
        c.set("prompt.source", s);
    }
    c.set("cfg.scale", req.guidance_scale);
    c.set("negprompt.schedule", req.neg_schedule.kind);
    c.set("negprompt.alpha0", req.neg_schedule.alpha0);
    let inj = &req.injection;
    c.set("injection.n_steps", inj.n_steps);
    c.set("injection.tau_f", inj.tau_f);
    c.set("injection.tau_a", inj.tau_a);
    c.set("injection.feature_layers", join(&inj.feature_layers));
    c.set("injection.attention_layers", join(&inj.attention_layers));
    c.set("injection.encoder_feature_layers", join(&inj.encoder_feature_layers));
    c.set("inversion.steps", req.n_inv_steps);
    c.set("run.seed", req.seed);
    c.set("run.independent_noise", req.independent_noise);
    Ok(c)
}

/// Build a request: the guidance kind's default preset, then `preset`, then
/// explicit keys. Relative image paths resolve against `base_dir`.
pub fn request_from_kv(c: &KvConfig, base_dir: &Path) -> Result<TranslationRequest> {
    c.ensure_known(REQUEST_KEYS)?;
    let guidance = match (c.get("guidance.image"), c.get("guidance.prompt")) {
        (Some(p), None) => GuidanceSource::Image(load_png(&base_dir.join(p))?),
        (None, Some(prompt)) => GuidanceSource::Generated {
            prompt: prompt.to_string(),
            seed: c.parsed("guidance.seed")?.unwrap_or(0),
        },
        _ => return Err(Error::invalid("set exactly one of guidance.image and guidance.prompt")),
    };
    let target = c.get("prompt.target").ok_or_else(|| Error::invalid("prompt.target is required"))?;
    let mut req = TranslationRequest::new(guidance, target);
    apply_request_kv(c, &mut req)?;
    Ok(req)
}

/// Apply the step count, preset and explicit settings of `c` on top of `req`.
/// Guidance keys are ignored; prompts are replaced only when present.
pub fn apply_request_kv(c: &KvConfig, req: &mut TranslationRequest) -> Result<()> {
    c.ensure_known(REQUEST_KEYS)?;
    // Step count first so that presets disabling a threshold see it.
    if let Some(n) = c.parsed("injection.n_steps")? {
        req.injection.n_steps = n;
        req.injection.tau_f = req.injection.tau_f.min(n);
        req.injection.tau_a = req.injection.tau_a.min(n);
    }
    if let Some(p) = c.parsed::<PresetName>("preset")? {
        Preset::get(p).apply(req);
    }
    if let Some(t) = c.get("prompt.target") {
        req.target_prompt = t.to_string();
    }
    if let Some(n) = c.get("prompt.negative") {
        req.negative_prompt = Some(n.to_string());
    }
    if let Some(s) = c.get("prompt.source") {
        req.source_prompt = Some(s.to_string());
    }
    if let Some(w) = c.parsed("cfg.scale")? {
        req.guidance_scale = w;
    }
    if let Some(kind) = c.parsed("negprompt.schedule")? {
        req.neg_schedule.kind = kind;
    }
    if let Some(a) = c.parsed("negprompt.alpha0")? {
        req.neg_schedule.alpha0 = a;
    }
    let inj = &mut req.injection;
    if let Some(t) = c.parsed("injection.tau_f")? {
        inj.tau_f = t;
    }
    if let Some(t) = c.parsed("injection.tau_a")? {
        inj.tau_a = t;
    }
    if let Some(l) = c.list("injection.feature_layers")? {
        inj.feature_layers = l.into_iter().collect();
    }
    if let Some(l) = c.list("injection.attention_layers")? {
        inj.attention_layers = l.into_iter().collect();
    }
    if let Some(l) = c.list("injection.encoder_feature_layers")? {
        inj.encoder_feature_layers = l.into_iter().collect();
    }
    if let Some(n) = c.parsed("inversion.steps")? {
        req.n_inv_steps = n;
    }
    if let Some(s) = c.parsed("run.seed")? {
        req.seed = s;
    }
    if let Some(b) = c.parsed("run.independent_noise")? {
        req.independent_noise = b;
    }
    Ok(())
}
