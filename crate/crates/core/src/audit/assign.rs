use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::NeuronConceptStat;
use super::{AuditConfig, Concept, CONCEPT_COUNT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Dominant,
    TwoStrong,
    Leaning,
}

impl Category {
    pub fn from_polarity(polarity: f64, cfg: &AuditConfig) -> Self {
        if polarity > cfg.dominant_above {
            Category::Dominant
        } else if polarity > cfg.leaning_at_most {
            Category::TwoStrong
        } else {
            Category::Leaning
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronAssignment {
    pub layer: u32,
    pub neuron: usize,
    pub primary: Concept,
    pub primary_ap: f64,
    pub secondary: Option<Concept>,
    pub secondary_ap: Option<f64>,
    pub polarity: f64,
    pub category: Category,
}

/// `(ap_primary - ap_secondary) / (ap_primary + 1e-9)`, with an absent
/// secondary counting as 0.
pub fn polarity(ap_primary: f64, ap_secondary: Option<f64>) -> f64 {
    (ap_primary - ap_secondary.unwrap_or(0.0)) / (ap_primary + 1e-9)
}

/// Ranks each neuron's surviving concepts by AP (then delta P, then name)
/// and assigns the top one as primary. The runner-up becomes secondary if
/// its AP beats `secondary_floor` times its concept's positive rate.
pub fn assign_concepts(
    stats: &[NeuronConceptStat],
    positive_rates: &[f64; CONCEPT_COUNT],
    cfg: &AuditConfig,
) -> Vec<NeuronAssignment> {
    let mut by_neuron: BTreeMap<(u32, usize), Vec<&NeuronConceptStat>> = BTreeMap::new();
    for s in stats {
        by_neuron.entry((s.layer, s.neuron)).or_default().push(s);
    }
    by_neuron
        .into_iter()
        .map(|((layer, neuron), mut ranked)| {
            ranked.sort_by(|a, b| {
                b.ap.total_cmp(&a.ap)
                    .then(b.delta_p.total_cmp(&a.delta_p))
                    .then(a.concept.name().cmp(b.concept.name()))
            });
            let primary = ranked[0];
            let secondary = ranked
                .get(1)
                .filter(|s| s.ap > cfg.secondary_floor * positive_rates[s.concept.index()]);
            let pol = polarity(primary.ap, secondary.map(|s| s.ap));
            NeuronAssignment {
                layer,
                neuron,
                primary: primary.concept,
                primary_ap: primary.ap,
                secondary: secondary.map(|s| s.concept),
                secondary_ap: secondary.map(|s| s.ap),
                polarity: pol,
                category: Category::from_polarity(pol, cfg),
            }
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: u32,
    pub selective: usize,
    /// Change in `selective` from the previous layer; 0 for the first.
    pub growth: i64,
    pub mean_primary_ap: Option<f64>,
    pub mean_polarity: Option<f64>,
}

pub fn layer_summary(assignments: &[NeuronAssignment], layer: u32, previous: Option<usize>) -> LayerSummary {
    let here: Vec<&NeuronAssignment> = assignments.iter().filter(|a| a.layer == layer).collect();
    LayerSummary {
        layer,
        selective: here.len(),
        growth: previous.map_or(0, |p| here.len() as i64 - p as i64),
        mean_primary_ap: mean(here.iter().map(|a| a.primary_ap)),
        mean_polarity: mean(here.iter().map(|a| a.polarity)),
    }
}

/// Summaries for `layers` in the given order, chaining growth.
pub fn layer_summaries(assignments: &[NeuronAssignment], layers: &[u32]) -> Vec<LayerSummary> {
    let mut previous = None;
    layers
        .iter()
        .map(|&l| {
            let s = layer_summary(assignments, l, previous);
            previous = Some(s.selective);
            s
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSummary {
    pub concept: Concept,
    pub primary_neurons: usize,
    pub mean_primary_ap: Option<f64>,
    pub mean_polarity: Option<f64>,
    pub no_secondary: usize,
}

/// One row per concept, in label order, over all layers.
pub fn concept_summary(assignments: &[NeuronAssignment]) -> Vec<ConceptSummary> {
    Concept::ALL
        .into_iter()
        .map(|c| {
            let mine: Vec<&NeuronAssignment> = assignments.iter().filter(|a| a.primary == c).collect();
            ConceptSummary {
                concept: c,
                primary_neurons: mine.len(),
                mean_primary_ap: mean(mine.iter().map(|a| a.primary_ap)),
                mean_polarity: mean(mine.iter().map(|a| a.polarity)),
                no_secondary: mine.iter().filter(|a| a.secondary.is_none()).count(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopDetector {
    pub layer: u32,
    pub neuron: usize,
    pub primary: Concept,
    pub primary_ap: f64,
    pub secondary: Option<Concept>,
    pub secondary_ap: Option<f64>,
    pub polarity: f64,
}

/// The `n` assignments with the highest primary AP (ties: higher polarity,
/// then layer and neuron ascending).
pub fn top_detectors(assignments: &[NeuronAssignment], n: usize) -> Vec<TopDetector> {
    let mut sorted: Vec<&NeuronAssignment> = assignments.iter().collect();
    sorted.sort_by(|a, b| {
        b.primary_ap
            .total_cmp(&a.primary_ap)
            .then(b.polarity.total_cmp(&a.polarity))
            .then(a.layer.cmp(&b.layer))
            .then(a.neuron.cmp(&b.neuron))
    });
    sorted
        .into_iter()
        .take(n)
        .map(|a| TopDetector {
            layer: a.layer,
            neuron: a.neuron,
            primary: a.primary,
            primary_ap: a.primary_ap,
            secondary: a.secondary,
            secondary_ap: a.secondary_ap,
            polarity: a.polarity,
        })
        .collect()
}
