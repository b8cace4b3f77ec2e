use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::guidance::NegPromptSchedule;
use crate::pipeline::TranslationRequest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PresetName {
    DefaultReal,
    DefaultGenerated,
    Primitive,
    WoFeatures,
    WoSelfattn,
    EncoderFeat7,
    WoNegprompt,
}

impl PresetName {
    pub const ALL: [PresetName; 7] = [
        PresetName::DefaultReal,
        PresetName::DefaultGenerated,
        PresetName::Primitive,
        PresetName::WoFeatures,
        PresetName::WoSelfattn,
        PresetName::EncoderFeat7,
        PresetName::WoNegprompt,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PresetName::DefaultReal => "default_real",
            PresetName::DefaultGenerated => "default_generated",
            PresetName::Primitive => "primitive",
            PresetName::WoFeatures => "wo_features",
            PresetName::WoSelfattn => "wo_selfattn",
            PresetName::EncoderFeat7 => "encoder_feat_7",
            PresetName::WoNegprompt => "wo_negprompt",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown preset {s:?}")))
    }
}

/// A partial request: only the `Some` fields are applied.
///
/// `tau_*_all` disables that injection kind by setting its threshold to the
/// request's step count, whatever that is.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Preset {
    pub guidance_scale: Option<f64>,
    pub neg_schedule: Option<NegPromptSchedule>,
    pub tau_f: Option<usize>,
    pub tau_a: Option<usize>,
    pub tau_f_all: bool,
    pub tau_a_all: bool,
    pub n_inv_steps: Option<usize>,
    pub feature_layers: Option<BTreeSet<usize>>,
    pub encoder_feature_layers: Option<BTreeSet<usize>>,
}

impl Preset {
    pub fn get(name: PresetName) -> Self {
        match name {
            PresetName::DefaultReal => Self {
                guidance_scale: Some(15.0),
                neg_schedule: Some(NegPromptSchedule::linear(1.0)),
                tau_f: Some(40),
                tau_a: Some(25),
                n_inv_steps: Some(1000),
                ..Self::default()
            },
            PresetName::DefaultGenerated => Self {
                guidance_scale: Some(7.5),
                neg_schedule: Some(NegPromptSchedule::linear(0.75)),
                tau_f: Some(40),
                tau_a: Some(25),
                ..Self::default()
            },
            PresetName::Primitive => Self {
                neg_schedule: Some(NegPromptSchedule::exponential()),
                tau_f: Some(25),
                tau_a: Some(25),
                ..Self::default()
            },
            PresetName::WoFeatures => Self { tau_f_all: true, ..Self::default() },
            PresetName::WoSelfattn => Self { tau_a_all: true, ..Self::default() },
            PresetName::EncoderFeat7 => Self {
                feature_layers: Some(BTreeSet::new()),
                encoder_feature_layers: Some(BTreeSet::from([7])),
                ..Self::default()
            },
            PresetName::WoNegprompt => {
                Self { neg_schedule: Some(NegPromptSchedule::NEUTRAL), ..Self::default() }
            }
        }
    }

    pub fn apply(&self, req: &mut TranslationRequest) {
        if let Some(w) = self.guidance_scale {
            req.guidance_scale = w;
        }
        if let Some(s) = self.neg_schedule {
            req.neg_schedule = s;
        }
        let inj = &mut req.injection;
        if let Some(t) = self.tau_f {
            inj.tau_f = t;
        }
        if let Some(t) = self.tau_a {
            inj.tau_a = t;
        }
        if self.tau_f_all {
            inj.tau_f = inj.n_steps;
        }
        if self.tau_a_all {
            inj.tau_a = inj.n_steps;
        }
        if let Some(n) = self.n_inv_steps {
            req.n_inv_steps = n;
        }
        if let Some(l) = &self.feature_layers {
            inj.feature_layers = l.clone();
        }
        if let Some(l) = &self.encoder_feature_layers {
            inj.encoder_feature_layers = l.clone();
        }
        // A threshold past the schedule length already means "never inject".
        inj.tau_f = inj.tau_f.min(inj.n_steps);
        inj.tau_a = inj.tau_a.min(inj.n_steps);
    }
}
