//! Benchmark construction, manifests, metric providers and evaluation.

pub mod build;
pub mod eval;
pub mod manifest;
pub mod metrics;

pub use build::{build_generated_variant, build_imagenet_r_ti2i, ClassEntry, ClassManifest, RENDITIONS};
pub use eval::{
    evaluate, guidance_source, request_for_pair, run_ablation, sdedit_method, translate_variants, AblationReport,
    LatentCache, MethodOutput, MetricReport, PairScores, ABLATION_ROWS,
};
pub use manifest::{
    format_manifest, load_manifest, load_wild_manifest, parse_manifest, save_manifest, BenchmarkPair, GuidanceRef,
    Split,
};
pub use metrics::{provider, toy_providers, Direction, MetricProvider, MetricRole, ToyLpips, ToyStructure, ToyText};
