//! Benchmark pairs and their tab-separated manifest format.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    WildReal,
    WildGenerated,
    ImagenetR,
    GeneratedImagenetR,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::WildReal => "wild-real",
            Split::WildGenerated => "wild-generated",
            Split::ImagenetR => "imagenet-r",
            Split::GeneratedImagenetR => "generated-imagenet-r",
        }
    }

    pub fn is_generated(&self) -> bool {
        matches!(self, Split::WildGenerated | Split::GeneratedImagenetR)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Split::WildReal, Split::WildGenerated, Split::ImagenetR, Split::GeneratedImagenetR]
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split {s:?}")))
    }
}

/// Image path or seed for a generated guidance (its prompt is the pair's
/// source prompt).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GuidanceRef {
    Image(PathBuf),
    Seed(u64),
}

impl fmt::Display for GuidanceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GuidanceRef::Image(p) => write!(f, "{}", p.display()),
            GuidanceRef::Seed(s) => write!(f, "seed:{s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BenchmarkPair {
    pub split: Split,
    pub guidance: GuidanceRef,
    pub source_prompt: Option<String>,
    pub target_prompt: String,
    pub class: String,
    pub rendition: String,
}

impl BenchmarkPair {
    pub fn validate(&self) -> Result<()> {
        match (&self.guidance, self.split.is_generated()) {
            (GuidanceRef::Seed(_), true) if self.source_prompt.is_some() => {}
            (GuidanceRef::Seed(_), _) => {
                return Err(Error::invalid(format!(
                    "a {} pair with a seed needs a generated split and a source prompt",
                    self.split
                )))
            }
            (GuidanceRef::Image(_), false) => {}
            (GuidanceRef::Image(_), true) => {
                return Err(Error::invalid(format!("a {} pair needs a seed, not an image", self.split)))
            }
        }
        let templated = self
            .target_prompt
            .strip_prefix(&format!("{} of a ", self.rendition))
            .is_some_and(|class| !class.is_empty());
        if matches!(self.split, Split::ImagenetR | Split::GeneratedImagenetR) && !templated {
            return Err(Error::invalid(format!(
                "target prompt {:?} does not follow the \"<rendition> of a <class>\" template",
                self.target_prompt
            )));
        }
        Ok(())
    }
}

pub const MANIFEST_HEADER: &str = "# split\tguidance\tsource_prompt\ttarget_prompt\tclass\trendition";

fn field(s: &Option<String>) -> &str {
    s.as_deref().unwrap_or("-")
}

fn opt(s: &str) -> Option<String> {
    (s != "-" && !s.is_empty()).then(|| s.to_string())
}

/// One pair per line; `-` marks an absent source prompt; `#` lines are
/// comments.
pub fn format_manifest(pairs: &[BenchmarkPair]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for p in pairs {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            p.split,
            p.guidance,
            field(&p.source_prompt),
            p.target_prompt,
            p.class,
            p.rendition
        ));
    }
    out
}

pub fn parse_manifest(text: &str, origin: &str) -> Result<Vec<BenchmarkPair>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { path: origin.to_string(), line: i + 1, msg };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(err(format!("expected 6 tab-separated fields, found {}", cols.len())));
        }
        let split: Split = cols[0].parse().map_err(|e: Error| err(e.to_string()))?;
        let guidance = match cols[1].strip_prefix("seed:") {
            Some(s) => GuidanceRef::Seed(s.parse().map_err(|_| err(format!("bad seed {s:?}")))?),
            None if cols[1].is_empty() => return Err(err("empty guidance field".into())),
            None => GuidanceRef::Image(PathBuf::from(cols[1])),
        };
        let pair = BenchmarkPair {
            split,
            guidance,
            source_prompt: opt(cols[2]),
            target_prompt: cols[3].to_string(),
            class: cols[4].to_string(),
            rendition: cols[5].to_string(),
        };
        pair.validate().map_err(|e| err(e.to_string()))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Load a manifest; relative image paths are resolved against its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<BenchmarkPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = parse_manifest(&text, &path.display().to_string())?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in &mut pairs {
        if let GuidanceRef::Image(img) = &mut p.guidance {
            if img.is_relative() {
                *img = base.join(&*img);
            }
        }
    }
    Ok(pairs)
}

/// A wild-style manifest: every pair must be tagged wild-real or
/// wild-generated.
pub fn load_wild_manifest(path: &Path) -> Result<Vec<BenchmarkPair>> {
    let pairs = load_manifest(path)?;
    if let Some(p) = pairs.iter().find(|p| !matches!(p.split, Split::WildReal | Split::WildGenerated)) {
        return Err(Error::invalid(format!("wild manifest contains a {} pair", p.split)));
    }
    Ok(pairs)
}

pub fn save_manifest(pairs: &[BenchmarkPair], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, format_manifest(pairs)).map_err(|e| Error::io(path, e))
}
