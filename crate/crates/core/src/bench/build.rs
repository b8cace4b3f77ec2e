//! Rendition-benchmark construction.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::manifest::{BenchmarkPair, GuidanceRef, Split};
use crate::error::{Error, Result};

/// Rendition phrases of the prompt template `"<rendition> of a <class>"`.
pub const RENDITIONS: [&str; 16] = [
    "an art",
    "a cartoon",
    "a graphic",
    "a deviantart",
    "a painting",
    "a sketch",
    "a graffiti",
    "an embroidery",
    "an origami",
    "a pattern",
    "a sculpture",
    "a tattoo",
    "a toy",
    "a video-game",
    "a photo",
    "an image",
];

pub const NUM_CLASSES: usize = 10;
pub const IMAGES_PER_CLASS: usize = 3;
pub const RELATED_PER_CLASS: usize = 5;
pub const PROMPTS_PER_IMAGE: usize = 5;
pub const SWAPS_PER_IMAGE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassEntry {
    pub class: String,
    pub images: Vec<PathBuf>,
    /// Plausible substitutes used for class-changing prompts.
    pub related: Vec<String>,
}

/// Source classes with their guidance images and related classes.
///
/// File format, one class per line: `class<TAB>img,img,img<TAB>rel,rel,...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassManifest {
    pub entries: Vec<ClassEntry>,
}

impl ClassManifest {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    msg: format!("expected 3 tab-separated fields, found {}", cols.len()),
                });
            }
            let list = |s: &str| -> Vec<String> { s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect() };
            entries.push(ClassEntry {
                class: cols[0].trim().to_string(),
                images: list(cols[1]).into_iter().map(PathBuf::from).collect(),
                related: list(cols[2]),
            });
        }
        Ok(Self { entries })
    }

    /// Load a class manifest; relative image paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            for img in &mut e.images {
                if img.is_relative() {
                    *img = base.join(&*img);
                }
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.len() != NUM_CLASSES {
            return Err(Error::invalid(format!(
                "expected {NUM_CLASSES} classes, found {}",
                self.entries.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.class.as_str()) {
                return Err(Error::invalid(format!("class {:?} listed twice", e.class)));
            }
            if e.images.len() != IMAGES_PER_CLASS {
                return Err(Error::invalid(format!(
                    "class {:?} has {} images, expected {IMAGES_PER_CLASS}",
                    e.class,
                    e.images.len()
                )));
            }
            if e.related.len() != RELATED_PER_CLASS || e.related.contains(&e.class) {
                return Err(Error::invalid(format!(
                    "class {:?} needs {RELATED_PER_CLASS} related classes other than itself",
                    e.class
                )));
            }
        }
        Ok(())
    }
}

fn prompt(rendition: &str, class: &str) -> String {
    format!("{rendition} of a {}", class.to_lowercase())
}

/// Five prompts per guidance image with distinct renditions, two of which
/// swap the class for a related one. Deterministic in `seed`.
pub fn build_imagenet_r_ti2i(classes: &ClassManifest, seed: u64) -> Result<Vec<BenchmarkPair>> {
    classes.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(NUM_CLASSES * IMAGES_PER_CLASS * PROMPTS_PER_IMAGE);
    for entry in &classes.entries {
        for image in &entry.images {
            let renditions = sample(&mut rng, RENDITIONS.len(), PROMPTS_PER_IMAGE).into_vec();
            let swapped = sample(&mut rng, PROMPTS_PER_IMAGE, SWAPS_PER_IMAGE).into_vec();
            for (slot, &r) in renditions.iter().enumerate() {
                let class = if swapped.contains(&slot) {
                    &entry.related[rng.random_range(0..RELATED_PER_CLASS)]
                } else {
                    &entry.class
                };
                pairs.push(BenchmarkPair {
                    split: Split::ImagenetR,
                    guidance: GuidanceRef::Image(image.clone()),
                    source_prompt: None,
                    target_prompt: prompt(RENDITIONS[r], class),
                    class: entry.class.clone(),
                    rendition: RENDITIONS[r].to_string(),
                });
            }
        }
    }
    Ok(pairs)
}

/// Replace image guidance with generated guidance: every distinct image gets
/// its own seed and a source prompt naming its true class (in a seeded
/// rendition for rendition pairs, the existing caption for wild pairs).
pub fn build_generated_variant(pairs: &[BenchmarkPair], seed: u64) -> Result<Vec<BenchmarkPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_image: BTreeMap<PathBuf, (u64, String)> = BTreeMap::new();
    let mut next_seed = seed;
    pairs
        .iter()
        .map(|p| {
            let GuidanceRef::Image(img) = &p.guidance else {
                return Ok(p.clone());
            };
            let (split, fallback) = match p.split {
                Split::ImagenetR => (Split::GeneratedImagenetR, None),
                Split::WildReal => (Split::WildGenerated, p.source_prompt.clone()),
                other => return Err(Error::invalid(format!("{other} pair with an image guidance"))),
            };
            let (s, source) = per_image
                .entry(img.clone())
                .or_insert_with(|| {
                    next_seed = next_seed.wrapping_add(1);
                    let source = fallback.unwrap_or_else(|| {
                        prompt(RENDITIONS[rng.random_range(0..RENDITIONS.len())], &p.class)
                    });
                    (next_seed, source)
                })
                .clone();
            Ok(BenchmarkPair { split, guidance: GuidanceRef::Seed(s), source_prompt: Some(source), ..p.clone() })
        })
        .collect::<Result<Vec<_>>>()
        .and_then(|out| {
            out.iter().try_for_each(BenchmarkPair::validate)?;
            Ok(out)
        })
}
