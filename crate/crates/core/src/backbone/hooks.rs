//! Named hook sites and the per-call hook context.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HookKind {
    /// Output of the layer's residual block, `[C, H, W]`.
    ResblockFeatures,
    /// Projected self-attention queries, `[heads, N, head_dim]`.
    AttentionQueries,
    /// Projected self-attention keys, `[heads, N, head_dim]`.
    AttentionKeys,
    /// Post-softmax self-attention matrix, `[heads, N, N]`.
    AttentionMatrix,
}

/// A location inside the denoiser where a value can be recorded or replaced.
///
/// Renders as `decoder.4.features`, `decoder.7.attn`, `encoder.5.queries`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HookSiteId {
    pub stage: Stage,
    pub layer_index: usize,
    pub kind: HookKind,
}

impl HookSiteId {
    pub fn new(stage: Stage, layer_index: usize, kind: HookKind) -> Self {
        Self { stage, layer_index, kind }
    }

    pub fn decoder_features(layer: usize) -> Self {
        Self::new(Stage::Decoder, layer, HookKind::ResblockFeatures)
    }

    pub fn decoder_attention(layer: usize) -> Self {
        Self::new(Stage::Decoder, layer, HookKind::AttentionMatrix)
    }

    pub fn encoder_features(layer: usize) -> Self {
        Self::new(Stage::Encoder, layer, HookKind::ResblockFeatures)
    }
}

impl fmt::Display for HookSiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stage = match self.stage {
            Stage::Encoder => "encoder",
            Stage::Decoder => "decoder",
        };
        let kind = match self.kind {
            HookKind::ResblockFeatures => "features",
            HookKind::AttentionQueries => "queries",
            HookKind::AttentionKeys => "keys",
            HookKind::AttentionMatrix => "attn",
        };
        write!(f, "{stage}.{}.{kind}", self.layer_index)
    }
}

impl FromStr for HookSiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownHookSite(s.to_string());
        let mut parts = s.split('.');
        let stage = match parts.next() {
            Some("encoder") => Stage::Encoder,
            Some("decoder") => Stage::Decoder,
            _ => return Err(bad()),
        };
        let layer_index: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let kind = match parts.next() {
            Some("features") => HookKind::ResblockFeatures,
            Some("queries") => HookKind::AttentionQueries,
            Some("keys") => HookKind::AttentionKeys,
            Some("attn") => HookKind::AttentionMatrix,
            _ => return Err(bad()),
        };
        if parts.next().is_some() || layer_index == 0 {
            return Err(bad());
        }
        Ok(Self { stage, layer_index, kind })
    }
}

/// Hook registrations and captures for one denoiser call.
///
/// A site may be recorded, overridden, or both; when overridden, the recorded
/// value is the override, i.e. the value downstream layers actually consume.
#[derive(Debug, Default, Clone)]
pub struct HookContext {
    record: BTreeSet<HookSiteId>,
    overrides: BTreeMap<HookSiteId, Tensor>,
    recorded: BTreeMap<HookSiteId, Tensor>,
    max_row_sum_error: f64,
    attention_rows_checked: usize,
}

impl HookContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn recording(sites: impl IntoIterator<Item = HookSiteId>) -> Self {
        let mut ctx = Self::new();
        for s in sites {
            ctx.record(s);
        }
        ctx
    }

    pub fn record(&mut self, site: HookSiteId) -> &mut Self {
        self.record.insert(site);
        self
    }

    pub fn set_override(&mut self, site: HookSiteId, value: Tensor) -> &mut Self {
        self.overrides.insert(site, value);
        self
    }

    pub fn registered_sites(&self) -> impl Iterator<Item = &HookSiteId> {
        self.record.iter().chain(self.overrides.keys())
    }

    pub fn is_empty(&self) -> bool {
        self.record.is_empty() && self.overrides.is_empty()
    }

    pub fn wants(&self, site: &HookSiteId) -> bool {
        self.record.contains(site) || self.overrides.contains_key(site)
    }

    pub fn override_for(&self, site: &HookSiteId) -> Option<&Tensor> {
        self.overrides.get(site)
    }

    pub fn recorded(&self) -> &BTreeMap<HookSiteId, Tensor> {
        &self.recorded
    }

    pub fn take_recorded(&mut self) -> BTreeMap<HookSiteId, Tensor> {
        std::mem::take(&mut self.recorded)
    }

    pub fn get(&self, site: &HookSiteId) -> Option<&Tensor> {
        self.recorded.get(site)
    }

    /// Apply the hook at `site` to `value`: replace it if overridden, capture it
    /// if recorded.
    pub(crate) fn apply(&mut self, site: HookSiteId, value: Tensor) -> Result<Tensor> {
        let value = match self.overrides.get(&site) {
            Some(o) => {
                o.ensure_shape(value.shape())?;
                o.clone()
            }
            None => value,
        };
        if self.record.contains(&site) {
            self.recorded.insert(site, value.clone());
        }
        Ok(value)
    }

    /// Note one softmax-computed attention matrix with rows of length `cols`.
    pub(crate) fn observe_attention(&mut self, a: &[f32], cols: usize) {
        for row in a.chunks(cols) {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            self.max_row_sum_error = self.max_row_sum_error.max((sum - 1.0).abs());
            self.attention_rows_checked += 1;
        }
    }

    /// Largest `|row sum - 1|` over every softmax attention matrix computed
    /// under this context.
    pub fn max_attention_row_error(&self) -> f64 {
        self.max_row_sum_error
    }

    pub fn attention_rows_checked(&self) -> usize {
        self.attention_rows_checked
    }
}
