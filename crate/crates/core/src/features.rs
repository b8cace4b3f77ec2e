//! Recorded guidance activations and the per-step injection plan.
//!
//! Thresholds count sampling steps: with `n` steps, feature sites are injected
//! at step indices `0..n - tau_f` and attention sites at `0..n - tau_a`, i.e.
//! during the earliest, noisiest part of sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::backbone::{DenoiserBackbone, HookKind, HookSiteId, Stage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BANK_FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankManifest {
    pub checkpoint_id: String,
    pub prompt: String,
    /// Sampling timesteps of the run that produced the bank.
    pub timesteps: Vec<usize>,
    pub seed: u64,
}

fn entry_key(site: &HookSiteId, t: usize) -> String {
    format!("{site}@{t}")
}

fn parse_entry_key(s: &str) -> Result<(HookSiteId, usize)> {
    let (site, t) = s.rsplit_once('@').ok_or_else(|| Error::invalid(format!("bad bank key {s:?}")))?;
    let t = t.parse().map_err(|_| Error::invalid(format!("bad timestep in bank key {s:?}")))?;
    Ok((site.parse()?, t))
}

/// Write-once store of activations keyed by `(site, timestep)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    manifest: BankManifest,
    site_shapes: BTreeMap<HookSiteId, Vec<usize>>,
    entries: BTreeMap<(HookSiteId, usize), Tensor>,
}

impl FeatureBank {
    /// Empty bank bound to `backbone`'s sites and checkpoint.
    pub fn new(backbone: &dyn DenoiserBackbone, prompt: &str, timesteps: &[usize], seed: u64) -> Self {
        let site_shapes = backbone
            .hook_sites()
            .into_iter()
            .filter_map(|s| backbone.site_shape(&s).map(|shape| (s, shape)))
            .collect();
        Self {
            manifest: BankManifest {
                checkpoint_id: backbone.checkpoint_id().to_string(),
                prompt: prompt.to_string(),
                timesteps: timesteps.to_vec(),
                seed,
            },
            site_shapes,
            entries: BTreeMap::new(),
        }
    }

    pub fn manifest(&self) -> &BankManifest {
        &self.manifest
    }

    pub fn record(&mut self, site: HookSiteId, t: usize, value: Tensor) -> Result<()> {
        let shape = self.site_shapes.get(&site).ok_or_else(|| Error::UnknownHookSite(site.to_string()))?;
        value.ensure_shape(shape)?;
        if !self.manifest.timesteps.contains(&t) {
            return Err(Error::invalid(format!("timestep {t} is not in the bank's plan")));
        }
        if self.entries.contains_key(&(site, t)) {
            return Err(Error::DuplicateEntry(entry_key(&site, t)));
        }
        self.entries.insert((site, t), value);
        Ok(())
    }

    pub fn get(&self, site: &HookSiteId, t: usize) -> Option<&Tensor> {
        self.entries.get(&(*site, t))
    }

    pub fn contains(&self, site: &HookSiteId, t: usize) -> bool {
        self.entries.contains_key(&(*site, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &(HookSiteId, usize)> {
        self.entries.keys()
    }
}

/// Which sites are injected, and for how many of the earliest sampling steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectionConfig {
    pub n_steps: usize,
    pub tau_f: usize,
    pub tau_a: usize,
    pub feature_layers: BTreeSet<usize>,
    pub attention_layers: BTreeSet<usize>,
    pub encoder_feature_layers: BTreeSet<usize>,
}

impl Default for InjectionConfig {
    /// 50 steps, `tau_f = 40`, `tau_a = 25`, decoder features at layer 4 and
    /// self-attention at every attention-carrying decoder layer of the toy U-Net.
    fn default() -> Self {
        Self {
            n_steps: 50,
            tau_f: 40,
            tau_a: 25,
            feature_layers: BTreeSet::from([4]),
            attention_layers: (1..=7).collect(),
            encoder_feature_layers: BTreeSet::new(),
        }
    }
}

impl InjectionConfig {
    /// The default layers with all decoder attention layers of `backbone`.
    pub fn for_backbone(backbone: &dyn DenoiserBackbone) -> Self {
        let attention_layers = backbone
            .hook_sites()
            .iter()
            .filter(|s| s.stage == Stage::Decoder && s.kind == HookKind::AttentionMatrix)
            .map(|s| s.layer_index)
            .collect();
        Self { attention_layers, ..Self::default() }
    }

    pub fn feature_sites(&self) -> Vec<HookSiteId> {
        self.feature_layers
            .iter()
            .map(|&l| HookSiteId::decoder_features(l))
            .chain(self.encoder_feature_layers.iter().map(|&l| HookSiteId::encoder_features(l)))
            .collect()
    }

    pub fn attention_sites(&self) -> Vec<HookSiteId> {
        self.attention_layers.iter().map(|&l| HookSiteId::decoder_attention(l)).collect()
    }

    pub fn validate(&self, backbone: &dyn DenoiserBackbone) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps must be positive"));
        }
        if self.tau_f > self.n_steps || self.tau_a > self.n_steps {
            return Err(Error::invalid(format!(
                "thresholds must lie in 0..={}, got tau_f={} tau_a={}",
                self.n_steps, self.tau_f, self.tau_a
            )));
        }
        for site in self.feature_sites().into_iter().chain(self.attention_sites()) {
            if backbone.site_shape(&site).is_none() {
                return Err(Error::UnknownHookSite(site.to_string()));
            }
        }
        Ok(())
    }

    pub fn injects_features(&self, step_index: usize) -> bool {
        step_index < self.n_steps - self.tau_f.min(self.n_steps)
    }

    pub fn injects_attention(&self, step_index: usize) -> bool {
        step_index < self.n_steps - self.tau_a.min(self.n_steps)
    }
}

/// Sites to override at sampling step `step_index` (timestep `t`), each mapped
/// to the bank key it reads.
pub fn overrides_for_step(
    cfg: &InjectionConfig,
    step_index: usize,
    t: usize,
) -> BTreeMap<HookSiteId, (HookSiteId, usize)> {
    let mut out = BTreeMap::new();
    if cfg.injects_features(step_index) {
        for s in cfg.feature_sites() {
            out.insert(s, (s, t));
        }
    }
    if cfg.injects_attention(step_index) {
        for s in cfg.attention_sites() {
            out.insert(s, (s, t));
        }
    }
    out
}

fn write_entry(path: &Path, value: &Tensor) -> Result<()> {
    let dims: Vec<String> = value.shape().iter().map(|d| d.to_string()).collect();
    let mut bytes = format!("shape {}\n", dims.join(" ")).into_bytes();
    for v in value.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_entry(path: &Path, key: &str) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingEntry(key.to_string()),
        _ => Error::io(path, e),
    })?;
    let nl = bytes.iter().position(|&b| b == b'\n');
    let header = nl.and_then(|n| std::str::from_utf8(&bytes[..n]).ok());
    let shape: Vec<usize> = header
        .and_then(|h| h.strip_prefix("shape "))
        .and_then(|h| h.split(' ').map(|d| d.parse().ok()).collect())
        .ok_or_else(|| Error::ManifestMismatch(format!("entry {key} has a malformed header")))?;
    let blob = &bytes[nl.unwrap_or(0) + 1..];
    let n: usize = shape.iter().product();
    if blob.len() != 4 * n {
        return Err(Error::ManifestMismatch(format!(
            "entry {key} holds {} bytes, expected {}",
            blob.len(),
            4 * n
        )));
    }
    let data = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Tensor::new(shape, data)
}

fn entry_file(key: &str) -> String {
    format!("{key}.bin")
}

pub fn save_bank(bank: &FeatureBank, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = &bank.manifest;
    let plan: Vec<String> = m.timesteps.iter().map(|t| t.to_string()).collect();
    let mut text = format!(
        "format_version={BANK_FORMAT_VERSION}\ncheckpoint_id={}\nprompt={}\nplan={}\nseed={}\n",
        m.checkpoint_id,
        m.prompt,
        plan.join(","),
        m.seed
    );
    for ((site, t), value) in &bank.entries {
        let key = entry_key(site, *t);
        write_entry(&dir.join(entry_file(&key)), value)?;
        text.push_str(&format!("entry={key}\n"));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Load a bank and check it was produced by `backbone`.
pub fn load_bank(dir: &Path, backbone: &dyn DenoiserBackbone) -> Result<FeatureBank> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut fields = BTreeMap::new();
    let mut keys = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: "expected key=value".into(),
        })?;
        if k == "entry" {
            keys.push(v.to_string());
        } else {
            fields.insert(k.to_string(), v.to_string());
        }
    }
    let field = |k: &str| {
        fields.get(k).cloned().ok_or_else(|| Error::ManifestMismatch(format!("manifest lacks {k}")))
    };
    let version: u32 = field("format_version")?
        .parse()
        .map_err(|_| Error::ManifestMismatch("bad format_version".into()))?;
    if version != BANK_FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: BANK_FORMAT_VERSION });
    }
    let ckpt = field("checkpoint_id")?;
    if ckpt != backbone.checkpoint_id() {
        return Err(Error::ManifestMismatch(format!(
            "bank was recorded with checkpoint {ckpt}, backbone is {}",
            backbone.checkpoint_id()
        )));
    }
    let plan = field("plan")?;
    let timesteps: Vec<usize> = if plan.is_empty() {
        Vec::new()
    } else {
        plan.split(',')
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::ManifestMismatch("bad plan".into()))?
    };
    let seed = field("seed")?.parse().map_err(|_| Error::ManifestMismatch("bad seed".into()))?;
    let mut bank = FeatureBank::new(backbone, &field("prompt")?, &timesteps, seed);
    for key in keys {
        let (site, t) = parse_entry_key(&key)?;
        let value = read_entry(&dir.join(entry_file(&key)), &key)?;
        bank.record(site, t, value)?;
    }
    Ok(bank)
}
