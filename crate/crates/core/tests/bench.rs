mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use common::{shape_image, workspace_root};
use injectdiff::bench::metrics::ExternalMetric;
use injectdiff::bench::{
    build_generated_variant, build_imagenet_r_ti2i, evaluate, format_manifest, load_manifest, load_wild_manifest,
    parse_manifest, provider, toy_providers, BenchmarkPair, ClassManifest, Direction, GuidanceRef, MethodOutput,
    MetricProvider, Split, RENDITIONS,
};
use injectdiff::{Error, Tensor};
use proptest::prelude::*;

fn classes() -> ClassManifest {
    ClassManifest::load(&workspace_root().join("data/imagenet_r_classes.tsv")).unwrap()
}

fn rendition_of(prompt: &str) -> &'static str {
    RENDITIONS.iter().copied().find(|r| prompt.starts_with(&format!("{r} of a "))).expect("templated prompt")
}

#[test]
fn rendition_benchmark_cardinalities() {
    let c = classes();
    let pairs = build_imagenet_r_ti2i(&c, 0).unwrap();
    assert_eq!(pairs.len(), 150);
    let mut per_image: BTreeMap<PathBuf, Vec<&BenchmarkPair>> = BTreeMap::new();
    for p in &pairs {
        p.validate().unwrap();
        assert_eq!(p.split, Split::ImagenetR);
        let GuidanceRef::Image(img) = &p.guidance else { panic!("image guidance expected") };
        per_image.entry(img.clone()).or_default().push(p);
    }
    assert_eq!(per_image.len(), 30);
    for (img, ps) in &per_image {
        assert_eq!(ps.len(), 5, "{}", img.display());
        let entry = c.entries.iter().find(|e| e.class == ps[0].class).unwrap();
        let renditions: BTreeSet<&str> = ps.iter().map(|p| rendition_of(&p.target_prompt)).collect();
        assert_eq!(renditions.len(), 5, "renditions repeat for {}", img.display());
        let swaps = ps.iter().filter(|p| !p.target_prompt.ends_with(&format!(" of a {}", entry.class))).count();
        assert_eq!(swaps, 2, "{}", img.display());
        for p in ps.iter().filter(|p| !p.target_prompt.ends_with(&format!(" of a {}", entry.class))) {
            let swapped = p.target_prompt.split(" of a ").nth(1).unwrap();
            assert!(entry.related.iter().any(|r| r == swapped), "{swapped} is not related to {}", entry.class);
        }
    }
    let combos: BTreeSet<(String, String)> = pairs
        .iter()
        .map(|p| (p.guidance.to_string(), p.target_prompt.clone()))
        .collect();
    assert_eq!(combos.len(), 150);
}

#[test]
fn builder_is_deterministic_per_seed() {
    let c = classes();
    let a = format_manifest(&build_imagenet_r_ti2i(&c, 42).unwrap());
    let b = format_manifest(&build_imagenet_r_ti2i(&c, 42).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, format_manifest(&build_imagenet_r_ti2i(&c, 43).unwrap()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn any_seed_gives_distinct_valid_pairs(seed in any::<u64>()) {
        let pairs = build_imagenet_r_ti2i(&classes(), seed).unwrap();
        let combos: BTreeSet<_> = pairs.iter().map(|p| (p.guidance.to_string(), p.target_prompt.clone())).collect();
        prop_assert_eq!(combos.len(), 150);
        let text = format_manifest(&pairs);
        prop_assert_eq!(parse_manifest(&text, "mem").unwrap(), pairs);
    }
}

#[test]
fn class_manifest_validation() {
    let mut c = classes();
    c.validate().unwrap();
    c.entries[0].related[0] = c.entries[0].class.clone();
    assert!(build_imagenet_r_ti2i(&c, 0).is_err());
    let mut c = classes();
    c.entries.pop();
    assert!(c.validate().is_err());
    assert!(ClassManifest::parse("cat\ta.png\n", "mem").is_err());
}

#[test]
fn generated_variant_keeps_true_classes() {
    let pairs = build_imagenet_r_ti2i(&classes(), 1).unwrap();
    let gen = build_generated_variant(&pairs, 1).unwrap();
    assert_eq!(gen.len(), pairs.len());
    let mut seed_of = BTreeMap::new();
    for (g, p) in gen.iter().zip(&pairs) {
        assert_eq!(g.split, Split::GeneratedImagenetR);
        let GuidanceRef::Seed(s) = g.guidance else { panic!("seed guidance expected") };
        let src = g.source_prompt.as_deref().unwrap();
        assert!(src.ends_with(&format!(" of a {}", p.class)), "{src}");
        rendition_of(src);
        assert_eq!(g.target_prompt, p.target_prompt);
        // One seed per original image.
        assert_eq!(*seed_of.entry(p.guidance.to_string()).or_insert(s), s);
    }
    assert_eq!(seed_of.values().collect::<BTreeSet<_>>().len(), 30);
    assert_eq!(format_manifest(&gen), format_manifest(&build_generated_variant(&pairs, 1).unwrap()));
}

#[test]
fn shipped_toy_benchmark_parses() {
    let pairs = load_manifest(&workspace_root().join("data/toy_bench/manifest.tsv")).unwrap();
    assert_eq!(pairs.len(), 20);
    for p in &pairs {
        let GuidanceRef::Image(path) = &p.guidance else { panic!("real guidance expected") };
        assert!(path.exists(), "{}", path.display());
        assert_ne!(p.source_prompt.as_deref(), Some(p.target_prompt.as_str()));
    }
}

#[test]
fn shipped_wild_manifest_mirrors_the_real_share() {
    let pairs = load_wild_manifest(&workspace_root().join("data/toy_wild_manifest.tsv")).unwrap();
    assert!(!pairs.is_empty());
    assert!(pairs.iter().all(|p| matches!(p.split, Split::WildReal | Split::WildGenerated)));
    let real = pairs.iter().filter(|p| p.split == Split::WildReal).count();
    let pct = (100.0 * real as f64 / pairs.len() as f64).round();
    assert_eq!(pct, 53.0, "{real} of {}", pairs.len());
}

#[test]
fn malformed_manifest_line_is_reported() {
    let text = "# header\nwild-real\tx.png\t-\ta red circle\tcircle\t-\nwild-real\tonly-two\n";
    match parse_manifest(text, "m.tsv") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    let seed_in_real = "wild-real\tseed:4\ta red circle\ta blue circle\tcircle\t-\n";
    assert!(parse_manifest(seed_in_real, "m.tsv").is_err());
}

fn toy_pairs(n: usize) -> (Vec<BenchmarkPair>, Vec<Tensor<f64>>) {
    let mut pairs = Vec::new();
    let mut images = Vec::new();
    for i in 0..n {
        let (img, caption) = shape_image(i as u64, 32);
        pairs.push(BenchmarkPair {
            split: Split::WildReal,
            guidance: GuidanceRef::Image(PathBuf::from(format!("{i}.png"))),
            source_prompt: Some(caption.clone()),
            target_prompt: caption,
            class: "shape".into(),
            rendition: "-".into(),
        });
        images.push(img);
    }
    (pairs, images)
}

fn index_of(p: &BenchmarkPair) -> usize {
    let GuidanceRef::Image(path) = &p.guidance else { unreachable!() };
    path.file_stem().unwrap().to_str().unwrap().parse().unwrap()
}

#[test]
fn identity_method_has_zero_structure_distance() {
    let (pairs, images) = toy_pairs(6);
    let method = |p: &BenchmarkPair| {
        let img = images[index_of(p)].clone();
        Ok(MethodOutput { guidance: img.clone(), output: img })
    };
    let r = evaluate(&pairs, &method, &toy_providers(), 2).unwrap();
    assert_eq!(r.failures(), 0);
    for p in &r.pairs {
        assert_eq!(p.scores[0], 0.0);
        assert_eq!(p.scores[2], 0.0);
    }
    for (k, m) in r.means.iter().enumerate() {
        let mean = r.pairs.iter().map(|p| p.scores[k]).sum::<f64>() / r.pairs.len() as f64;
        assert!((m - mean).abs() < 1e-12);
    }
}

#[test]
fn evaluation_is_order_invariant_and_records_failures() {
    let (pairs, images) = toy_pairs(8);
    let method = |p: &BenchmarkPair| {
        let i = index_of(p);
        if i == 5 {
            return Err(Error::InvalidArgument("boom".into()));
        }
        let img = images[i].clone();
        let out = images[(i + 1) % images.len()].clone();
        Ok(MethodOutput { guidance: img, output: out })
    };
    let metrics = toy_providers();
    let a = evaluate(&pairs, &method, &metrics, 1).unwrap();
    let mut rev = pairs.clone();
    rev.reverse();
    let b = evaluate(&rev, &method, &metrics, 3).unwrap();
    assert_eq!(a.means, b.means);
    assert_eq!(a.failures(), 1);
    assert_eq!(a.pairs[5].error.as_deref().map(|e| e.contains("boom")), Some(true));
    assert!(a.to_tsv(&pairs).lines().count() == pairs.len() + 2);
}

#[test]
fn distances_vanish_on_identical_images() {
    for (id, dir) in [("toy-structure", Direction::LowerIsBetter), ("toy-lpips", Direction::HigherIsBetter)] {
        let m = provider(id).unwrap();
        assert_eq!(m.direction(), dir);
        for seed in 0..5 {
            let (img, caption) = shape_image(seed, 64);
            assert_eq!(m.score(&img, &img, &caption).unwrap(), 0.0, "{id}");
        }
    }
    let text = provider("toy-text").unwrap();
    assert_eq!(text.direction(), Direction::HigherIsBetter);
    let (img, caption) = shape_image(1, 64);
    let s = text.score(&img, &img, &caption).unwrap();
    assert!((0.0..=1.0).contains(&s));
}

#[test]
fn external_metrics_are_declared_but_unavailable() {
    for m in [ExternalMetric::clip(), ExternalMetric::dino_self_similarity(), ExternalMetric::lpips()] {
        assert!(!m.available());
        let (img, c) = shape_image(0, 64);
        assert!(matches!(m.score(&img, &img, &c), Err(Error::Unavailable(_))));
        let (pairs, _) = toy_pairs(1);
        let boxed: Vec<Box<dyn MetricProvider>> = vec![Box::new(m)];
        let method = |_: &BenchmarkPair| -> injectdiff::Result<MethodOutput> { unreachable!() };
        assert!(evaluate(&pairs, &method, &boxed, 1).is_err());
    }
    assert!(provider("nope").is_err());
}
