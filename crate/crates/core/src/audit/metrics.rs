use serde::{Deserialize, Serialize};

use super::profile::LayerProfile;
use super::{AuditConfig, Concept, ProbePrompt};
use crate::error::{Error, Result};

/// Number of prompts each neuron fires on (`score > theta`).
pub fn fire_counts(profile: &LayerProfile, theta: f64) -> Vec<usize> {
    let mut counts = vec![0; profile.neurons()];
    for p in 0..profile.prompts() {
        for (c, &s) in counts.iter_mut().zip(profile.scores.row(p)) {
            if s as f64 > theta {
                *c += 1;
            }
        }
    }
    counts
}

/// Neurons firing on at least `min_prompts` and at most `max_prompts`.
pub fn selectivity_filter(profile: &LayerProfile, cfg: &AuditConfig) -> Vec<usize> {
    fire_counts(profile, cfg.theta_fire)
        .iter()
        .enumerate()
        .filter(|(_, &c)| (cfg.min_prompts..=cfg.max_prompts).contains(&c))
        .map(|(n, _)| n)
        .collect()
}

/// Mean precision at the rank of each positive, ranking by score
/// descending with ties going to the lower index.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("average_precision", &[scores.len()], &[labels.len()]));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Undefined("average precision with no positive labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable, so equal scores keep ascending index
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronConceptStat {
    pub layer: u32,
    pub neuron: usize,
    pub concept: Concept,
    pub ap: f64,
    pub p_fire_given_1: f64,
    pub p_fire_given_0: f64,
    pub delta_p: f64,
}

/// AP and firing-rate gap of each neuron in `neurons` for `concept`.
/// Pairs with `delta_p <= 0` are dropped.
pub fn concept_stats(
    profile: &LayerProfile,
    prompts: &[ProbePrompt],
    concept: Concept,
    neurons: &[usize],
    theta: f64,
) -> Result<Vec<NeuronConceptStat>> {
    if prompts.len() != profile.prompts() {
        return Err(Error::dim("concept_stats", &[prompts.len()], &[profile.prompts()]));
    }
    let labels: Vec<bool> = prompts.iter().map(|p| p.has(concept)).collect();
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Config(format!(
            "concept {concept} has {pos} positive and {neg} negative prompts; both must be non-zero"
        )));
    }
    let mut out = Vec::new();
    for &n in neurons {
        let scores = profile.neuron_scores(n);
        let (mut f1, mut f0) = (0usize, 0usize);
        for (&s, &l) in scores.iter().zip(&labels) {
            if s > theta {
                if l {
                    f1 += 1;
                } else {
                    f0 += 1;
                }
            }
        }
        let p1 = f1 as f64 / pos as f64;
        let p0 = f0 as f64 / neg as f64;
        let delta_p = p1 - p0;
        if delta_p <= 0.0 {
            continue;
        }
        out.push(NeuronConceptStat {
            layer: profile.layer,
            neuron: n,
            concept,
            ap: average_precision(&scores, &labels)?,
            p_fire_given_1: p1,
            p_fire_given_0: p0,
            delta_p,
        });
    }
    Ok(out)
}
