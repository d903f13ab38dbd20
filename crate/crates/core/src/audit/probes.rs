use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Concept, CONCEPT_COUNT};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbePrompt {
    pub id: String,
    pub text: String,
    /// Multi-hot, indexed by [`Concept::index`].
    pub labels: [bool; CONCEPT_COUNT],
}

impl ProbePrompt {
    pub fn has(&self, c: Concept) -> bool {
        self.labels[c.index()]
    }

    pub fn concepts(&self) -> impl Iterator<Item = Concept> + '_ {
        Concept::ALL.into_iter().filter(|c| self.has(*c))
    }
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default)]
    id: Option<String>,
    text: String,
    labels: Vec<String>,
}

/// Parses line-delimited `{id, text, labels}` records. Blank lines are
/// skipped; a missing id defaults to `line-<n>`.
pub fn parse_probe_dataset(src: &str) -> Result<Vec<ProbePrompt>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in src.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| Error::Validation { line: line_no, msg };
        let rec: Record = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        if rec.text.trim().is_empty() {
            return Err(fail("empty text".into()));
        }
        if rec.labels.is_empty() {
            return Err(fail("no labels".into()));
        }
        let mut labels = [false; CONCEPT_COUNT];
        for name in &rec.labels {
            let c: Concept = name.parse().map_err(|_| fail(format!("unknown concept {name:?}")))?;
            labels[c.index()] = true;
        }
        let id = rec.id.unwrap_or_else(|| format!("line-{line_no}"));
        if !seen.insert(id.clone()) {
            return Err(fail(format!("duplicate id {id:?}")));
        }
        out.push(ProbePrompt {
            id,
            text: rec.text,
            labels,
        });
    }
    Ok(out)
}

pub fn load_probe_dataset(path: &Path) -> Result<Vec<ProbePrompt>> {
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_probe_dataset(&src)
}

/// Fraction of prompts carrying each concept; the AP of a random ranking.
pub fn positive_rates(prompts: &[ProbePrompt]) -> [f64; CONCEPT_COUNT] {
    let mut rates = [0.0; CONCEPT_COUNT];
    if prompts.is_empty() {
        return rates;
    }
    for p in prompts {
        for (r, &l) in rates.iter_mut().zip(&p.labels) {
            if l {
                *r += 1.0;
            }
        }
    }
    rates.map(|r| r / prompts.len() as f64)
}
