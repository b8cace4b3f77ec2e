//! Pairwise evaluation, the ablation matrix and report tables.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::backbone::DenoiserBackbone;
use crate::bench::manifest::{BenchmarkPair, GuidanceRef};
use crate::bench::metrics::{Direction, MetricProvider, MetricRole};
use crate::error::{Error, Result};
use crate::features::InjectionConfig;
use crate::imageio::load_png;
use crate::pipeline::{
    guidance_start, record_guidance, sdedit, translate_with_guidance, union_sites, GuidanceSource, Preset,
    PresetName, SdeditConfig, TranslationRequest,
};
use crate::tensor::Tensor;

/// What a method produced for one pair. For generated guidance, `guidance`
/// is the generated image the output is compared against.
#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub guidance: Tensor<f64>,
    pub output: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderInfo {
    pub id: String,
    pub role: MetricRole,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairScores {
    pub pair: usize,
    /// One score per provider; empty when `error` is set.
    pub scores: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub providers: Vec<ProviderInfo>,
    pub pairs: Vec<PairScores>,
    /// Per-provider mean over the pairs that succeeded.
    pub means: Vec<f64>,
}

impl MetricReport {
    pub fn failures(&self) -> usize {
        self.pairs.iter().filter(|p| p.error.is_some()).count()
    }

    /// Mean of the first provider with `role`.
    pub fn mean_for(&self, role: MetricRole) -> Option<f64> {
        self.providers.iter().position(|p| p.role == role).map(|i| self.means[i])
    }

    /// Per-pair table: index, split, target prompt, one column per provider,
    /// error.
    pub fn to_tsv(&self, pairs: &[BenchmarkPair]) -> String {
        let mut s = String::from("pair\tsplit\ttarget_prompt");
        for p in &self.providers {
            let _ = write!(s, "\t{}", p.id);
        }
        s.push_str("\terror\n");
        for r in &self.pairs {
            let pair = &pairs[r.pair];
            let _ = write!(s, "{}\t{}\t{}", r.pair, pair.split, pair.target_prompt);
            if r.error.is_some() {
                s.push_str(&"\t-".repeat(self.providers.len()));
            }
            for v in &r.scores {
                let _ = write!(s, "\t{v:.6}");
            }
            let _ = writeln!(s, "\t{}", r.error.as_deref().unwrap_or("-"));
        }
        let _ = write!(s, "mean\t-\t-");
        for m in &self.means {
            let _ = write!(s, "\t{m:.6}");
        }
        s.push_str("\t-\n");
        s
    }
}

/// Mean that does not depend on the order of `values`.
fn order_free_mean(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn score_all(
    out: &MethodOutput,
    prompt: &str,
    metrics: &[Box<dyn MetricProvider>],
) -> Result<Vec<f64>> {
    metrics.iter().map(|m| m.score(&out.guidance, &out.output, prompt)).collect()
}

fn assemble(metrics: &[Box<dyn MetricProvider>], pairs: Vec<PairScores>) -> MetricReport {
    let means = (0..metrics.len())
        .map(|k| order_free_mean(pairs.iter().filter(|p| p.error.is_none()).map(|p| p.scores[k]).collect()))
        .collect();
    let providers = metrics
        .iter()
        .map(|m| ProviderInfo { id: m.id().to_string(), role: m.role(), direction: m.direction() })
        .collect();
    MetricReport { providers, pairs, means }
}

fn ensure_available(metrics: &[Box<dyn MetricProvider>]) -> Result<()> {
    match metrics.iter().find(|m| !m.available()) {
        Some(m) => Err(Error::Unavailable(m.id().to_string())),
        None => Ok(()),
    }
}

/// Run `method` on every pair and score the results. A failing pair is
/// recorded in the report rather than aborting the run. `workers == 0` uses
/// one worker per core.
pub fn evaluate(
    pairs: &[BenchmarkPair],
    method: &(dyn Fn(&BenchmarkPair) -> Result<MethodOutput> + Sync),
    metrics: &[Box<dyn MetricProvider>],
    workers: usize,
) -> Result<MetricReport> {
    ensure_available(metrics)?;
    let rows = with_pool(workers, || {
        pairs
            .par_iter()
            .enumerate()
            .map(|(i, p)| match method(p).and_then(|out| score_all(&out, &p.target_prompt, metrics)) {
                Ok(scores) => PairScores { pair: i, scores, error: None },
                Err(e) => PairScores { pair: i, scores: Vec::new(), error: Some(e.to_string()) },
            })
            .collect()
    })?;
    Ok(assemble(metrics, rows))
}

/// Guidance description of a pair; images are loaded from disk.
pub fn guidance_source(pair: &BenchmarkPair) -> Result<GuidanceSource> {
    match &pair.guidance {
        GuidanceRef::Image(path) => Ok(GuidanceSource::Image(load_png(path)?)),
        GuidanceRef::Seed(seed) => Ok(GuidanceSource::Generated {
            prompt: pair
                .source_prompt
                .clone()
                .ok_or_else(|| Error::invalid("generated guidance needs a source prompt"))?,
            seed: *seed,
        }),
    }
}

/// Request for a pair with the defaults of its guidance kind, then `configure`.
pub fn request_for_pair(
    pair: &BenchmarkPair,
    guidance: GuidanceSource,
    configure: &(dyn Fn(&mut TranslationRequest) + Sync),
) -> TranslationRequest {
    let mut req = TranslationRequest::new(guidance, pair.target_prompt.clone());
    req.source_prompt = pair.source_prompt.clone();
    configure(&mut req);
    req
}

/// Guidance latents keyed by image path and inversion length, so that a real
/// image is inverted once however many prompts and variants use it.
#[derive(Debug, Default)]
pub struct LatentCache {
    map: Mutex<HashMap<(PathBuf, usize), Arc<Tensor<f64>>>>,
}

impl LatentCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn start(
        &self,
        pair: &BenchmarkPair,
        req: &TranslationRequest,
        backbone: &dyn DenoiserBackbone,
    ) -> Result<Arc<Tensor<f64>>> {
        let GuidanceRef::Image(path) = &pair.guidance else {
            return Ok(Arc::new(guidance_start(req, backbone)?));
        };
        let key = (path.clone(), req.n_inv_steps);
        if let Some(x) = self.map.lock().expect("latent cache poisoned").get(&key) {
            return Ok(x.clone());
        }
        let x = Arc::new(guidance_start(req, backbone)?);
        self.map.lock().expect("latent cache poisoned").insert(key, x.clone());
        Ok(x)
    }
}

/// Translate one pair under several request variants that share the
/// guidance: one inversion, one guidance run recording the union of the
/// variants' sites, then one translation per variant.
pub fn translate_variants(
    pair: &BenchmarkPair,
    variants: &[TranslationRequest],
    backbone: &dyn DenoiserBackbone,
    cache: &LatentCache,
) -> Result<Vec<Result<MethodOutput>>> {
    let base = variants.first().ok_or_else(|| Error::invalid("no variants"))?;
    if variants.iter().any(|v| {
        v.guidance != base.guidance
            || v.injection.n_steps != base.injection.n_steps
            || v.n_inv_steps != base.n_inv_steps
            || v.seed != base.seed
    }) {
        return Err(Error::invalid("variants must share guidance, step counts and seed"));
    }
    let x_t = cache.start(pair, base, backbone)?;
    let configs: Vec<&InjectionConfig> = variants.iter().map(|v| &v.injection).collect();
    let run = record_guidance(backbone, &x_t, &base.guidance_prompt(), base.injection.n_steps, base.seed, |i, t| {
        union_sites(&configs, i, t)
    })?;
    let bank = Arc::new(run.bank.clone());
    let guidance_image = match &base.guidance {
        GuidanceSource::Image(img) => img.clone(),
        GuidanceSource::Generated { .. } => run.reconstruction.clone(),
    };
    Ok(variants
        .iter()
        .map(|v| {
            let r = translate_with_guidance(v, backbone, &x_t, &run, bank.clone())?;
            Ok(MethodOutput { guidance: guidance_image.clone(), output: r.output })
        })
        .collect())
}

/// Rows of the ablation table, in display order; `None` is the full method.
pub const ABLATION_ROWS: [(&str, Option<PresetName>); 5] = [
    ("w/ encoder-feat-7", Some(PresetName::EncoderFeat7)),
    ("w/o features", Some(PresetName::WoFeatures)),
    ("w/o self-attn.", Some(PresetName::WoSelfattn)),
    ("w/o negative prompt", Some(PresetName::WoNegprompt)),
    ("full", None),
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<(String, MetricReport)>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&MetricReport> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    /// One line per variant, one column per metric role.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant");
        let providers = self.rows.first().map(|r| r.1.providers.clone()).unwrap_or_default();
        for p in &providers {
            let _ = write!(s, "\t{} ({})", p.role.header(), p.id);
        }
        s.push('\n');
        for (name, r) in &self.rows {
            s.push_str(name);
            for m in &r.means {
                let _ = write!(s, "\t{m:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Run every ablation variant over `pairs`. `configure` adjusts the base
/// request of each pair (e.g. step counts) before the variant's preset.
pub fn run_ablation(
    pairs: &[BenchmarkPair],
    backbone: &dyn DenoiserBackbone,
    configure: &(dyn Fn(&mut TranslationRequest) + Sync),
    metrics: &[Box<dyn MetricProvider>],
    workers: usize,
) -> Result<AblationReport> {
    ensure_available(metrics)?;
    let cache = LatentCache::new();
    let per_pair: Vec<Vec<std::result::Result<Vec<f64>, String>>> = with_pool(workers, || {
        pairs
            .par_iter()
            .map(|pair| {
                let outputs = guidance_source(pair).and_then(|g| {
                    let base = request_for_pair(pair, g, configure);
                    let variants: Vec<TranslationRequest> = ABLATION_ROWS
                        .iter()
                        .map(|(_, preset)| {
                            let mut v = base.clone();
                            if let Some(p) = preset {
                                Preset::get(*p).apply(&mut v);
                            }
                            v
                        })
                        .collect();
                    translate_variants(pair, &variants, backbone, &cache)
                });
                match outputs {
                    Ok(outs) => outs
                        .into_iter()
                        .map(|o| {
                            o.and_then(|o| score_all(&o, &pair.target_prompt, metrics)).map_err(|e| e.to_string())
                        })
                        .collect(),
                    Err(e) => vec![Err(e.to_string()); ABLATION_ROWS.len()],
                }
            })
            .collect()
    })?;
    let rows = ABLATION_ROWS
        .iter()
        .enumerate()
        .map(|(k, (name, _))| {
            let scores = per_pair
                .iter()
                .enumerate()
                .map(|(i, r)| match &r[k] {
                    Ok(s) => PairScores { pair: i, scores: s.clone(), error: None },
                    Err(e) => PairScores { pair: i, scores: Vec::new(), error: Some(e.clone()) },
                })
                .collect();
            (name.to_string(), assemble(metrics, scores))
        })
        .collect();
    Ok(AblationReport { rows })
}

/// SDEdit as a benchmark method. Generated guidance is first sampled from its
/// seed with the source prompt.
pub fn sdedit_method<'a>(
    backbone: &'a dyn DenoiserBackbone,
    noise_fraction: f64,
    config: &'a SdeditConfig,
) -> impl Fn(&BenchmarkPair) -> Result<MethodOutput> + Sync + 'a {
    move |pair| {
        let guidance = match guidance_source(pair)? {
            GuidanceSource::Image(img) => img,
            GuidanceSource::Generated { prompt, seed } => {
                let x = crate::pipeline::seeded_noise(backbone, seed);
                crate::pipeline::sample(backbone, &x, &prompt, config.n_steps, 1.0)?
            }
        };
        let output = sdedit(&guidance, &pair.target_prompt, noise_fraction, backbone, config)?;
        Ok(MethodOutput { guidance, output })
    }
}
