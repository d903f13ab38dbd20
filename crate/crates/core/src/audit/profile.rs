use serde::{Deserialize, Serialize};

use super::assign::{assign_concepts, NeuronAssignment};
use super::metrics::{concept_stats, selectivity_filter, NeuronConceptStat};
use super::probes::positive_rates;
use super::{AuditConfig, Concept, ProbePrompt};
use crate::activations::SkipRecord;
use crate::error::{Error, Result};
use crate::gpt::GptModel;
use crate::sae::SaeModel;
use crate::tensor::Tensor;
use crate::tokenizer::BpeVocab;

/// Prompt-level scores of every latent of one layer's SAE: the maximum
/// code value over the prompt's tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerProfile {
    pub layer: u32,
    pub prompt_ids: Vec<String>,
    /// `[prompts x neurons]`.
    pub scores: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronActivationProfile {
    pub layer: u32,
    pub neuron: usize,
    pub scores: Vec<f64>,
    pub fired: Vec<bool>,
}

impl LayerProfile {
    pub fn prompts(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn neurons(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn neuron_scores(&self, n: usize) -> Vec<f64> {
        (0..self.prompts()).map(|p| self.scores.row(p)[n] as f64).collect()
    }

    pub fn neuron(&self, n: usize, theta: f64) -> NeuronActivationProfile {
        let scores = self.neuron_scores(n);
        NeuronActivationProfile {
            layer: self.layer,
            neuron: n,
            fired: scores.iter().map(|&s| s > theta).collect(),
            scores,
        }
    }
}

pub struct ProfileRun {
    pub layers: Vec<LayerProfile>,
    /// Prompts that were scored, in input order.
    pub prompts: Vec<ProbePrompt>,
    pub skipped: Vec<SkipRecord>,
}

/// Runs every prompt through the model and each layer's SAE. Prompts that do
/// not fit the context window are skipped.
pub fn profile_neurons(
    model: &GptModel,
    vocab: &BpeVocab,
    saes: &[SaeModel],
    prompts: &[ProbePrompt],
) -> Result<ProfileRun> {
    let ctx = model.config().context_length;
    for sae in saes {
        let l = sae.config().layer as usize;
        if l == 0 || l > model.config().layers {
            return Err(Error::Config(format!("sae for layer {l} but model has {} layers", model.config().layers)));
        }
        if sae.config().input_dim != model.config().embed_dim {
            return Err(Error::dim("profile_neurons", &[sae.config().input_dim], &[model.config().embed_dim]));
        }
    }
    let mut scores: Vec<Vec<f32>> = vec![Vec::new(); saes.len()];
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for p in prompts {
        let ids = vocab.encode(&p.text);
        if ids.is_empty() || ids.len() > ctx {
            skipped.push(SkipRecord {
                item: p.id.clone(),
                sentence: 0,
                tokens: ids.len(),
                reason: format!("prompt does not fit context length {ctx}"),
            });
            continue;
        }
        let states = model.hidden_states(&ids)?;
        for (out, sae) in scores.iter_mut().zip(saes) {
            let codes = sae.encode_batch(&states[sae.config().layer as usize - 1])?;
            let h = codes.last_dim();
            let mut best = vec![f32::NEG_INFINITY; h];
            for r in 0..codes.rows() {
                for (b, &v) in best.iter_mut().zip(codes.row(r)) {
                    *b = b.max(v);
                }
            }
            out.extend(best);
        }
        kept.push(p.clone());
    }
    let layers = saes
        .iter()
        .zip(scores)
        .map(|(sae, s)| LayerProfile {
            layer: sae.config().layer,
            prompt_ids: kept.iter().map(|p| p.id.clone()).collect(),
            scores: Tensor::new(&[kept.len(), sae.config().hidden_dim], s).expect("prompts x hidden"),
        })
        .collect();
    Ok(ProfileRun {
        layers,
        prompts: kept,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAudit {
    pub layer: u32,
    pub retained: Vec<usize>,
    pub stats: Vec<NeuronConceptStat>,
    pub assignments: Vec<NeuronAssignment>,
    /// Concepts without both positive and negative prompts.
    pub skipped_concepts: Vec<Concept>,
}

/// Selectivity filter, per-concept statistics and assignment for one layer.
pub fn audit_layer(profile: &LayerProfile, prompts: &[ProbePrompt], cfg: &AuditConfig) -> Result<LayerAudit> {
    cfg.validate()?;
    let retained = selectivity_filter(profile, cfg);
    let mut stats = Vec::new();
    let mut skipped_concepts = Vec::new();
    for c in Concept::ALL {
        match concept_stats(profile, prompts, c, &retained, cfg.theta_fire) {
            Ok(s) => stats.extend(s),
            Err(Error::Config(_)) => skipped_concepts.push(c),
            Err(e) => return Err(e),
        }
    }
    let assignments = assign_concepts(&stats, &positive_rates(prompts), cfg);
    Ok(LayerAudit {
        layer: profile.layer,
        retained,
        stats,
        assignments,
        skipped_concepts,
    })
}
