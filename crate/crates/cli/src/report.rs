//! Human-readable report tables.

use std::fmt::Write;

use saeaudit::audit::{ConceptSummary, LayerSummary, TopDetector};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

pub fn markdown(layers: &[LayerSummary], concepts: &[ConceptSummary], top: &[TopDetector]) -> String {
    let mut s = String::from("# Concept audit\n\n## Selective neurons by layer\n\n");
    s.push_str("| layer | selective | growth | mean AP | mean polarity |\n|---|---|---|---|---|\n");
    for l in layers {
        let _ = writeln!(
            s,
            "| {} | {} | {:+} | {} | {} |",
            l.layer,
            l.selective,
            l.growth,
            opt(l.mean_primary_ap),
            opt(l.mean_polarity)
        );
    }
    s.push_str("\n## Primary concepts\n\n");
    s.push_str("| concept | neurons | mean AP | mean polarity | no secondary |\n|---|---|---|---|---|\n");
    for c in concepts {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            c.concept,
            c.primary_neurons,
            opt(c.mean_primary_ap),
            opt(c.mean_polarity),
            c.no_secondary
        );
    }
    s.push_str("\n## Top detectors\n\n");
    s.push_str("| layer | neuron | primary | AP | secondary | AP | polarity |\n|---|---|---|---|---|---|---|\n");
    for t in top {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.2} | {} | {} | {:.2} |",
            t.layer,
            t.neuron,
            t.primary,
            t.primary_ap,
            t.secondary.map_or_else(|| "-".to_string(), |c| c.to_string()),
            opt(t.secondary_ap),
            t.polarity
        );
    }
    s
}
