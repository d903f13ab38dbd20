//! Concept audit of SAE latents: which neurons fire selectively on which
//! probing concepts, how strongly, and which concepts share neurons.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod assign;
mod graph;
mod metrics;
mod probes;
mod profile;

pub use assign::{
    assign_concepts, concept_summary, layer_summaries, layer_summary, polarity, top_detectors, Category,
    ConceptSummary, LayerSummary, NeuronAssignment, TopDetector,
};
pub use graph::{build_concept_graph, parse_dot, ConceptEdge, ConceptGraph};
pub use metrics::{average_precision, concept_stats, fire_counts, selectivity_filter, NeuronConceptStat};
pub use probes::{load_probe_dataset, parse_probe_dataset, positive_rates, ProbePrompt};
pub use profile::{audit_layer, profile_neurons, LayerAudit, LayerProfile, NeuronActivationProfile, ProfileRun};

/// The closed set of probing concepts, in label-slot order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Concept {
    Female,
    Male,
    Family,
    Marriage,
    Wealth,
    Emotion,
    Love,
    Scandal,
    Duty,
    Class,
    Society,
}

pub const CONCEPT_COUNT: usize = 11;

impl Concept {
    pub const ALL: [Concept; CONCEPT_COUNT] = [
        Concept::Female,
        Concept::Male,
        Concept::Family,
        Concept::Marriage,
        Concept::Wealth,
        Concept::Emotion,
        Concept::Love,
        Concept::Scandal,
        Concept::Duty,
        Concept::Class,
        Concept::Society,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Concept::Female => "female",
            Concept::Male => "male",
            Concept::Family => "family",
            Concept::Marriage => "marriage",
            Concept::Wealth => "wealth",
            Concept::Emotion => "emotion",
            Concept::Love => "love",
            Concept::Scandal => "scandal",
            Concept::Duty => "duty",
            Concept::Class => "class",
            Concept::Society => "society",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Concept {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Concept::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown concept {s:?}")))
    }
}

impl Serialize for Concept {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Concept {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Thresholds for firing, selectivity, secondary assignment and the
/// dominance bands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// A neuron fires on a prompt when its score is strictly above this.
    pub theta_fire: f64,
    pub min_prompts: usize,
    pub max_prompts: usize,
    /// A runner-up concept becomes secondary only if its AP exceeds this
    /// multiple of the concept's positive rate.
    pub secondary_floor: f64,
    pub dominant_above: f64,
    pub leaning_at_most: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            theta_fire: 5.0,
            min_prompts: 5,
            max_prompts: 150,
            secondary_floor: 1.5,
            dominant_above: 0.5,
            leaning_at_most: 0.2,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !self.theta_fire.is_finite() {
            return bad("audit.theta_fire must be finite");
        }
        if self.min_prompts > self.max_prompts {
            return bad("audit.min_prompts exceeds audit.max_prompts");
        }
        if !(self.secondary_floor >= 0.0) {
            return bad("audit.secondary_floor must be >= 0");
        }
        if !(0.0 <= self.leaning_at_most && self.leaning_at_most < self.dominant_above && self.dominant_above <= 1.0) {
            return bad("audit bands need 0 <= leaning_at_most < dominant_above <= 1");
        }
        Ok(())
    }
}
