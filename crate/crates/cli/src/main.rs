use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use injectdiff::analysis::{self, CollectConfig};
use injectdiff::backbone::checkpoint;
use injectdiff::backbone::prompt::{caption, COLORS, SHAPES};
use injectdiff::backbone::train::{train_toy, TrainConfig};
use injectdiff::backbone::{Architecture, DenoiserBackbone, HookSiteId, ToyBackbone};
use injectdiff::bench::{self, BenchmarkPair, ClassManifest, MetricProvider};
use injectdiff::diffmath::ScheduleKind;
use injectdiff::features::save_bank;
use injectdiff::guidance::NegPromptSchedule;
use injectdiff::imageio::{load_png, save_latent, save_png};
use injectdiff::kvconfig::KvConfig;
use injectdiff::pipeline::{
    self, apply_request_kv, format_log, request_from_kv, request_to_kv, GuidanceSource, Preset, PresetName, SdeditConfig,
    TranslationRequest,
};
use injectdiff::shapes::ToyDataset;

#[derive(Parser, Debug)]
#[command(name = "injectdiff", version, about = "Structure-preserving text-guided image translation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable); applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every random draw of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    preset: Option<PresetName>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Sampling (or training) step count.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a dataset of captioned toy shapes.
    MakeShapes {
        #[arg(long, default_value_t = 1024)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train the toy denoiser on a shapes dataset.
    TrainToy {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Translate a guidance image (or a generated one) to a target prompt.
    Translate {
        /// Use the empty prompt alone as the guidance reference.
        #[arg(long)]
        no_negative_prompt: bool,
        /// Also write the recorded feature bank.
        #[arg(long)]
        save_bank: bool,
    },
    /// Invert an image to its initial noise and report the reconstruction error.
    Invert {
        #[arg(long)]
        image: PathBuf,
    },
    /// Noise an image part-way and denoise it towards a prompt.
    Sdedit {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0.6)]
        fraction: f64,
        #[arg(long, default_value_t = 7.5)]
        guidance_scale: f64,
    },
    /// PCA of one hook site across images, rendered as colour maps.
    Pca {
        /// Images to analyse.
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        #[arg(long, default_value = "decoder.4.features")]
        site: HookSiteId,
        /// Timestep; defaults to the plan step nearest half-way.
        #[arg(long)]
        t: Option<usize>,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// PCA of the self-attention rows of one image, per decoder layer.
    AttentionPca {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7")]
        layers: Vec<usize>,
        #[arg(long)]
        t: Option<usize>,
    },
    /// Encoder-feature variance across seeds versus across prompts.
    Variance {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        /// Prompts; defaults to ten toy captions.
        #[arg(long, value_delimiter = ',')]
        prompts: Vec<String>,
    },
    /// Build a rendition benchmark from a class manifest.
    BenchBuild {
        #[arg(long)]
        classes: PathBuf,
        #[arg(long, default_value = "imagenet-r")]
        mode: String,
    },
    /// Evaluate a method over a benchmark manifest.
    BenchEval {
        #[arg(long)]
        manifest: PathBuf,
        /// `translate` or `sdedit:<fraction>`.
        #[arg(long, default_value = "translate")]
        method: String,
        #[arg(long, value_delimiter = ',', default_value = "toy-structure,toy-text,toy-lpips")]
        metrics: Vec<String>,
    },
    /// Run the ablation matrix over a benchmark manifest.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "toy-structure,toy-text,toy-lpips")]
        metrics: Vec<String>,
    },
}

const TRAIN_KEYS: &[&str] = &[
    "train.steps",
    "train.batch_size",
    "train.learning_rate",
    "train.warmup_steps",
    "train.grad_clip",
    "train.caption_dropout",
    "train.validation_size",
    "train.log_every",
    "train.snr_gamma",
    "model.schedule",
    "model.num_train_steps",
    "model.init_seed",
];

const RUN_KEYS: &[&str] = &["run.seed", "run.n_steps", "inversion.steps"];

impl Common {
    fn kv(&self) -> Result<KvConfig> {
        let mut c = match &self.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::new(),
        };
        for o in &self.overrides {
            c.apply_override(o)?;
        }
        Ok(c)
    }

    fn out(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    fn backbone(&self) -> Result<ToyBackbone> {
        let p = self.checkpoint.as_ref().ok_or_else(|| anyhow!("--checkpoint is required"))?;
        let b = checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
        info!("checkpoint {} ({})", p.display(), b.checkpoint_id());
        Ok(b)
    }

    fn seed(&self, kv: &KvConfig) -> Result<u64> {
        Ok(self.seed.or(kv.parsed("run.seed")?).unwrap_or(0))
    }

    fn n_steps(&self, kv: &KvConfig) -> Result<usize> {
        Ok(self.steps.or(kv.parsed("run.n_steps")?).unwrap_or(50))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(common: &Common, dataset: Option<&Path>) -> Result<()> {
    let kv = common.kv()?;
    kv.ensure_known(TRAIN_KEYS)?;
    let dataset = dataset.ok_or_else(|| anyhow!("--dataset <DIR> is required"))?;
    let ds = ToyDataset::load(dataset).with_context(|| format!("--dataset {}", dataset.display()))?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        steps: common.steps.or(kv.parsed("train.steps")?).unwrap_or(d.steps),
        batch_size: kv.parsed("train.batch_size")?.unwrap_or(d.batch_size),
        learning_rate: kv.parsed("train.learning_rate")?.unwrap_or(d.learning_rate),
        warmup_steps: kv.parsed("train.warmup_steps")?.unwrap_or(d.warmup_steps),
        grad_clip: kv.parsed("train.grad_clip")?.unwrap_or(d.grad_clip),
        caption_dropout: kv.parsed("train.caption_dropout")?.unwrap_or(d.caption_dropout),
        validation_size: kv.parsed("train.validation_size")?.unwrap_or(d.validation_size),
        seed: common.seed.unwrap_or(d.seed),
        log_every: kv.parsed("train.log_every")?.unwrap_or(d.log_every),
        snr_gamma: kv.parsed("train.snr_gamma")?.unwrap_or(d.snr_gamma),
    };
    let arch = Architecture { resolution: ds.images[0].shape()[1], ..Architecture::default() };
    let mut model = ToyBackbone::new(
        &arch,
        kv.parsed("model.schedule")?.unwrap_or(ScheduleKind::Linear),
        kv.parsed("model.num_train_steps")?.unwrap_or(1000),
        kv.parsed("model.init_seed")?.unwrap_or(cfg.seed),
    )?;
    let report = train_toy(&mut model, &ds, &cfg)?;
    let out = common.out("toy.ckpt");
    checkpoint::save(&model, &out)?;
    let mut log = String::from("step\tloss\n");
    for e in &report.log {
        log.push_str(&format!("{}\t{:.6}\n", e.step, e.loss));
    }
    log.push_str(&format!(
        "# validation loss {:.6} -> {:.6}\n",
        report.initial_validation_loss, report.final_validation_loss
    ));
    write(&out.with_extension("log.tsv"), &log)?;
    println!(
        "wrote {} (id {}), validation loss {:.4} -> {:.4}",
        out.display(),
        model.checkpoint_id(),
        report.initial_validation_loss,
        report.final_validation_loss
    );
    Ok(())
}

fn translate(common: &Common, no_negative_prompt: bool, save: bool) -> Result<()> {
    let backbone = common.backbone()?;
    let kv = common.kv()?;
    let base = common.config.as_deref().and_then(Path::parent).unwrap_or(Path::new("."));
    let mut req = request_from_kv(&kv, base)?;
    override_request(&mut req, common.preset, common.steps, common.seed);
    if no_negative_prompt {
        req.neg_schedule = NegPromptSchedule::NEUTRAL;
    }
    let result = pipeline::translate(&req, &backbone)?;
    let out = common.out("translation");
    save_png(&out.join("output.png"), &result.output)?;
    save_png(&out.join("guidance_reconstruction.png"), &result.guidance_reconstruction)?;
    write(&out.join("steps.log"), &format_log(&result.log))?;
    let image_ref = kv.get("guidance.image").map(|p| base.join(p).display().to_string());
    write(&out.join("request.txt"), &request_to_kv(&req, image_ref.as_deref())?.to_string())?;
    if save {
        save_bank(&result.bank, &out.join("bank"))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn invert(common: &Common, image: &Path) -> Result<()> {
    let backbone = common.backbone()?;
    let kv = common.kv()?;
    kv.ensure_known(RUN_KEYS)?;
    let n_inv = kv.parsed("inversion.steps")?.unwrap_or(1000);
    let n = common.n_steps(&kv)?;
    let img = load_png(image)?;
    let inv = pipeline::invert(&img, &backbone, n_inv)?;
    let rec = pipeline::sample(&backbone, &inv.x_t, "", n, 1.0)?;
    let out = common.out("inversion");
    save_latent(&out.join("latent.bin"), &inv.x_t)?;
    save_png(&out.join("reconstruction.png"), &rec)?;
    let err = rec.max_abs_diff(&img) / 2.0;
    write(
        &out.join("inversion.txt"),
        &format!("inversion_steps={n_inv}\nsampling_steps={n}\ntrajectory_len={}\nmax_abs_error_01={err:.6}\n", inv.trajectory.len()),
    )?;
    println!("wrote {}, reconstruction max-abs error {err:.4} (in [0, 1] units)", out.display());
    Ok(())
}

fn sdedit(common: &Common, image: &Path, prompt: &str, fraction: f64, w: f64) -> Result<()> {
    let backbone = common.backbone()?;
    let kv = common.kv()?;
    kv.ensure_known(RUN_KEYS)?;
    let cfg = SdeditConfig { n_steps: common.n_steps(&kv)?, guidance_scale: w, seed: common.seed(&kv)? };
    let output = pipeline::sdedit(&load_png(image)?, prompt, fraction, &backbone, &cfg)?;
    let out = common.out("sdedit.png");
    save_png(&out, &output)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn collect_config(common: &Common, kv: &KvConfig) -> Result<CollectConfig> {
    kv.ensure_known(RUN_KEYS)?;
    Ok(CollectConfig {
        n_steps: common.n_steps(kv)?,
        n_inv_steps: kv.parsed("inversion.steps")?.unwrap_or(CollectConfig::default().n_inv_steps),
    })
}

fn pca(common: &Common, images: &[PathBuf], site: HookSiteId, t: Option<usize>, k: usize) -> Result<()> {
    let backbone = common.backbone()?;
    let kv = common.kv()?;
    let cfg = collect_config(common, &kv)?;
    let t = match t {
        Some(t) => t,
        None => analysis::mid_timestep(&backbone, cfg.n_steps)?,
    };
    let sources = images.iter().map(|p| Ok(GuidanceSource::Image(load_png(p)?))).collect::<Result<Vec<_>>>()?;
    let m = analysis::collect(&sources, site, t, &backbone, &cfg)?;
    let p = analysis::pca(&m, k)?;
    let out = common.out("pca");
    for (i, path) in images.iter().enumerate() {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        save_png(&out.join(format!("{i:03}_{stem}.png")), &analysis::render_rgb(&p, i, m.spatial)?)?;
    }
    let mut table = String::from("component\tvariance\texplained\n");
    for (j, (v, e)) in p.variances.iter().zip(&p.explained).enumerate() {
        table.push_str(&format!("{}\t{v:.6e}\t{e:.6}\n", j + 1));
    }
    write(&out.join("explained.tsv"), &table)?;
    println!("wrote {} ({site} at t={t}, {} rows)", out.display(), m.rows);
    Ok(())
}

fn attention_pca(common: &Common, image: &Path, layers: &[usize], t: Option<usize>) -> Result<()> {
    let backbone = common.backbone()?;
    let kv = common.kv()?;
    let cfg = collect_config(common, &kv)?;
    let t = match t {
        Some(t) => t,
        None => analysis::mid_timestep(&backbone, cfg.n_steps)?,
    };
    let src = GuidanceSource::Image(load_png(image)?);
    let out = common.out("attention_pca");
    for (layer, img) in analysis::attention_pca(&src, layers, t, &backbone, &cfg)? {
        save_png(&out.join(format!("decoder_{layer}.png")), &img)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn variance(common: &Common, n_seeds: usize, prompts: &[String]) -> Result<()> {
    let backbone = common.backbone()?;
    let kv = common.kv()?;
    kv.ensure_known(RUN_KEYS)?;
    let base = common.seed(&kv)?;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| base + i).collect();
    let prompts: Vec<String> = if prompts.is_empty() {
        (0..10).map(|i| caption(COLORS[i % COLORS.len()].0, SHAPES[i % SHAPES.len()])).collect()
    } else {
        prompts.to_vec()
    };
    let report = analysis::variance_study(&seeds, &prompts, &backbone)?;
    let out = common.out("variance.tsv");
    write(&out, &report.to_tsv())?;
    println!("wrote {} ({} runs, {} sets)", out.display(), report.runs, report.sets);
    Ok(())
}

fn bench_build(common: &Common, classes: &Path, mode: &str) -> Result<()> {
    let manifest = ClassManifest::load(classes)?;
    let seed = common.seed.unwrap_or(0);
    let pairs = bench::build_imagenet_r_ti2i(&manifest, seed)?;
    let pairs = match mode {
        "imagenet-r" => pairs,
        "generated-imagenet-r" => bench::build_generated_variant(&pairs, seed)?,
        other => bail!("unknown --mode {other:?} (expected imagenet-r or generated-imagenet-r)"),
    };
    let out = common.out("benchmark.tsv");
    bench::save_manifest(&pairs, &out)?;
    println!("wrote {} ({} pairs)", out.display(), pairs.len());
    Ok(())
}

fn providers(ids: &[String]) -> Result<Vec<Box<dyn MetricProvider>>> {
    Ok(ids.iter().map(|id| bench::provider(id)).collect::<injectdiff::Result<_>>()?)
}

/// Request settings shared by every pair, from the configuration and flags.
fn pair_configurer(common: &Common, kv: &KvConfig) -> Result<impl Fn(&mut TranslationRequest) + Sync> {
    if let Some(k) = kv.keys().find(|k| k.starts_with("guidance.") || k.starts_with("prompt.")) {
        bail!("{k} is set per pair by the manifest");
    }
    // Validate once so that later failures are about the pairs.
    let mut probe = TranslationRequest::new(GuidanceSource::Generated { prompt: String::new(), seed: 0 }, "");
    apply_request_kv(kv, &mut probe)?;
    let kv = kv.clone();
    let (preset, steps, seed) = (common.preset, common.steps, common.seed);
    Ok(move |req: &mut TranslationRequest| {
        apply_request_kv(&kv, req).expect("validated above");
        override_request(req, preset, steps, seed);
    })
}

/// Command-line flags take precedence over configuration keys.
fn override_request(req: &mut TranslationRequest, preset: Option<PresetName>, steps: Option<usize>, seed: Option<u64>) {
    if let Some(n) = steps {
        req.injection.n_steps = n;
        req.injection.tau_f = req.injection.tau_f.min(n);
        req.injection.tau_a = req.injection.tau_a.min(n);
    }
    if let Some(p) = preset {
        Preset::get(p).apply(req);
    }
    if let Some(s) = seed {
        req.seed = s;
    }
}

fn bench_eval(common: &Common, manifest: &Path, method: &str, metrics: &[String]) -> Result<()> {
    let backbone = common.backbone()?;
    let pairs = bench::load_manifest(manifest)?;
    let metrics = providers(metrics)?;
    let kv = common.kv()?;
    let report = if let Some(f) = method.strip_prefix("sdedit:") {
        kv.ensure_known(RUN_KEYS)?;
        let fraction: f64 = f.parse().map_err(|_| anyhow!("bad SDEdit fraction {f:?}"))?;
        let cfg = SdeditConfig { n_steps: common.n_steps(&kv)?, seed: common.seed(&kv)?, ..SdeditConfig::default() };
        let m = bench::sdedit_method(&backbone, fraction, &cfg);
        bench::evaluate(&pairs, &m, &metrics, common.workers)?
    } else if method == "translate" {
        let configure = pair_configurer(common, &kv)?;
        let cache = bench::LatentCache::new();
        let m = |pair: &BenchmarkPair| {
            let req = bench::request_for_pair(pair, bench::guidance_source(pair)?, &configure);
            bench::translate_variants(pair, std::slice::from_ref(&req), &backbone, &cache)?.remove(0)
        };
        bench::evaluate(&pairs, &m, &metrics, common.workers)?
    } else {
        bail!("unknown --method {method:?} (expected translate or sdedit:<fraction>)");
    };
    let out = common.out("bench");
    write(&out.join("pairs.tsv"), &report.to_tsv(&pairs))?;
    let mut summary = String::from("metric\tmean\n");
    for (p, m) in report.providers.iter().zip(&report.means) {
        summary.push_str(&format!("{} ({})\t{m:.6}\n", p.role.header(), p.id));
    }
    write(&out.join("summary.tsv"), &summary)?;
    print!("{summary}");
    if report.failures() > 0 {
        eprintln!("{} of {} pairs failed; see pairs.tsv", report.failures(), pairs.len());
    }
    Ok(())
}

fn ablate(common: &Common, manifest: &Path, metrics: &[String]) -> Result<()> {
    let backbone = common.backbone()?;
    let pairs = bench::load_manifest(manifest)?;
    let metrics = providers(metrics)?;
    let kv = common.kv()?;
    let configure = pair_configurer(common, &kv)?;
    let report = bench::run_ablation(&pairs, &backbone, &configure, &metrics, common.workers)?;
    let out = common.out("ablation.tsv");
    write(&out, &report.to_tsv())?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::MakeShapes { count, size } => {
            let ds = ToyDataset::generate(*count, *size, c.seed.unwrap_or(0))?;
            let out = c.out("shapes");
            ds.save(&out)?;
            println!("wrote {} ({} images)", out.display(), ds.len());
            Ok(())
        }
        Command::TrainToy { dataset } => train(c, dataset.as_deref()),
        Command::Translate { no_negative_prompt, save_bank } => translate(c, *no_negative_prompt, *save_bank),
        Command::Invert { image } => invert(c, image),
        Command::Sdedit { image, prompt, fraction, guidance_scale } => {
            sdedit(c, image, prompt, *fraction, *guidance_scale)
        }
        Command::Pca { images, site, t, k } => pca(c, images, *site, *t, *k),
        Command::AttentionPca { image, layers, t } => attention_pca(c, image, layers, *t),
        Command::Variance { seeds, prompts } => variance(c, *seeds, prompts),
        Command::BenchBuild { classes, mode } => bench_build(c, classes, mode),
        Command::BenchEval { manifest, method, metrics } => bench_eval(c, manifest, method, metrics),
        Command::Ablate { manifest, metrics } => ablate(c, manifest, metrics),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
