//! Regenerates the toy benchmark shipped under `data/`.
//!
//! `cargo run --example make_toy_bench -- data`

use std::path::PathBuf;

use injectdiff::backbone::prompt::{caption, COLORS};
use injectdiff::bench::{save_manifest, BenchmarkPair, GuidanceRef, Split};
use injectdiff::imageio::save_png;
use injectdiff::shapes::ShapeSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PAIRS: usize = 20;
const WILD_REAL: usize = 8;
const WILD_GENERATED: usize = 7;

fn main() -> injectdiff::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    let dir = root.join("toy_bench");
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut pairs = Vec::new();
    for i in 0..PAIRS {
        let spec = ShapeSpec::random(&mut rng, 64);
        let rel = PathBuf::from(format!("images/{i:02}.png"));
        save_png(&dir.join(&rel), &spec.render(64)?)?;
        // Shift the colour by a varying stride so targets differ from the source.
        let c = COLORS.iter().position(|c| c.0 == spec.color).expect("palette colour");
        let target = COLORS[(c + 1 + i % (COLORS.len() - 1)) % COLORS.len()].0;
        pairs.push(BenchmarkPair {
            split: Split::WildReal,
            guidance: GuidanceRef::Image(rel),
            source_prompt: Some(spec.caption()),
            target_prompt: caption(target, &spec.shape),
            class: spec.shape.clone(),
            rendition: "-".into(),
        });
    }
    save_manifest(&pairs, &dir.join("manifest.tsv"))?;

    // Wild-style mix: some pairs keep the real image, the rest regenerate
    // their guidance from the source caption.
    let mut wild: Vec<BenchmarkPair> = pairs[..WILD_REAL]
        .iter()
        .map(|p| {
            let GuidanceRef::Image(rel) = &p.guidance else { unreachable!() };
            BenchmarkPair { guidance: GuidanceRef::Image(PathBuf::from("toy_bench").join(rel)), ..p.clone() }
        })
        .collect();
    for (k, p) in pairs[WILD_REAL..WILD_REAL + WILD_GENERATED].iter().enumerate() {
        wild.push(BenchmarkPair { split: Split::WildGenerated, guidance: GuidanceRef::Seed(100 + k as u64), ..p.clone() });
    }
    save_manifest(&wild, &root.join("toy_wild_manifest.tsv"))?;
    println!("wrote {} benchmark pairs and {} wild pairs under {}", pairs.len(), wild.len(), root.display());
    Ok(())
}
