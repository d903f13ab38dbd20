//! Per-layer residual-stream datasets: one row per token of each admitted
//! sentence (or probe prompt), with provenance, and their binary format.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SentenceRecord;
use crate::error::{Error, Result};
use crate::gpt::GptModel;
use crate::io::{put_f32s, put_u16, put_u32, put_u64, read_file, sha256_hex, write_file, Reader};
use crate::tensor::Tensor;
use crate::tokenizer::BpeVocab;

const MAGIC: &[u8; 8] = b"SAACTSET";
pub const FORMAT_VERSION: u32 = 1;
/// Bytes before the first row: magic, version, source, layer, dim, rows.
pub const HEADER_LEN: usize = 32;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Sentence,
    Prompt,
}

impl Source {
    fn code(self) -> u32 {
        match self {
            Source::Sentence => 0,
            Source::Prompt => 1,
        }
    }
}

/// Where a row came from: document or prompt id, sentence index within it
/// (0 for prompts) and token position.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RowRef {
    pub item: String,
    pub sentence: u32,
    pub position: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSet {
    /// 1-based block index.
    pub layer: u32,
    pub source: Source,
    /// `[rows x dim]`.
    pub data: Tensor,
    pub row_index: Vec<RowRef>,
}

impl ActivationSet {
    pub fn empty(layer: u32, dim: usize, source: Source) -> Self {
        Self {
            layer,
            source,
            data: Tensor::zeros(&[0, dim]),
            row_index: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn rows(&self) -> usize {
        self.row_index.len()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        self.data.row(r)
    }

    /// Keeps the rows at `keep`, in that order.
    pub fn select(&self, keep: &[usize]) -> Self {
        let dim = self.dim();
        let mut data = Vec::with_capacity(keep.len() * dim);
        for &r in keep {
            data.extend_from_slice(self.row(r));
        }
        Self {
            layer: self.layer,
            source: self.source,
            data: Tensor::new(&[keep.len(), dim], data).expect("row-major selection"),
            row_index: keep.iter().map(|&r| self.row_index[r].clone()).collect(),
        }
    }
}

/// A text that could not be extracted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub item: String,
    pub sentence: u32,
    pub tokens: usize,
    pub reason: String,
}

pub struct Extraction {
    pub sets: Vec<ActivationSet>,
    pub skipped: Vec<SkipRecord>,
}

/// Runs each text through the model in eval mode and appends one row per
/// token per layer. Texts longer than the context window are skipped.
pub fn extract_texts<'a>(
    model: &GptModel,
    vocab: &BpeVocab,
    items: impl IntoIterator<Item = (&'a str, u32, &'a str)>,
    source: Source,
) -> Result<Extraction> {
    let cfg = model.config();
    let layers = cfg.layers;
    let dim = cfg.embed_dim;
    let mut data: Vec<Vec<f32>> = vec![Vec::new(); layers];
    let mut index = Vec::new();
    let mut skipped = Vec::new();
    for (item, sentence, text) in items {
        let ids = vocab.encode(text);
        if ids.is_empty() || ids.len() > cfg.context_length {
            skipped.push(SkipRecord {
                item: item.to_string(),
                sentence,
                tokens: ids.len(),
                reason: if ids.is_empty() {
                    "no tokens".into()
                } else {
                    format!("exceeds context length {}", cfg.context_length)
                },
            });
            continue;
        }
        let states = model.hidden_states(&ids)?;
        for (l, s) in states.iter().enumerate() {
            data[l].extend_from_slice(s.data());
        }
        index.extend((0..ids.len()).map(|p| RowRef {
            item: item.to_string(),
            sentence,
            position: p as u32,
        }));
    }
    let rows = index.len();
    let sets = data
        .into_iter()
        .enumerate()
        .map(|(l, d)| ActivationSet {
            layer: l as u32 + 1,
            source,
            data: Tensor::new(&[rows, dim], d).expect("rows x dim"),
            row_index: index.clone(),
        })
        .collect();
    Ok(Extraction { sets, skipped })
}

/// Token-level activations for every admitted sentence.
pub fn extract_activations(model: &GptModel, sentences: &[SentenceRecord], vocab: &BpeVocab) -> Result<Extraction> {
    extract_texts(
        model,
        vocab,
        sentences
            .iter()
            .filter(|s| s.admitted)
            .map(|s| (s.doc_id.as_str(), s.index as u32, s.text.as_str())),
        Source::Sentence,
    )
}

/// Splits by sentence: groups are shuffled with `seed` and the first
/// `round(ratio * groups)` go to training. Row order is preserved.
pub fn split_activation_set(set: &ActivationSet, ratio: f64, seed: u64) -> Result<(ActivationSet, ActivationSet)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut group_of = Vec::with_capacity(set.rows());
    let mut groups: HashMap<(&str, u32), usize> = HashMap::new();
    for r in &set.row_index {
        let next = groups.len();
        group_of.push(*groups.entry((r.item.as_str(), r.sentence)).or_insert(next));
    }
    let n = groups.len();
    let n_train = (ratio * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "{n} distinct sentences cannot be split at ratio {ratio}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; n];
    for &gi in &order[..n_train] {
        is_train[gi] = true;
    }
    let (train, val): (Vec<usize>, Vec<usize>) = (0..set.rows()).partition(|&r| is_train[group_of[r]]);
    Ok((set.select(&train), set.select(&val)))
}

pub fn encode_activation_set(set: &ActivationSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + set.data.len() * 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, set.source.code());
    put_u32(&mut out, set.layer);
    put_u32(&mut out, set.dim() as u32);
    put_u64(&mut out, set.rows() as u64);
    put_f32s(&mut out, set.data.data());
    put_u64(&mut out, set.row_index.len() as u64);
    for r in &set.row_index {
        put_u16(&mut out, r.item.len() as u16);
        out.extend_from_slice(r.item.as_bytes());
        put_u32(&mut out, r.sentence);
        put_u32(&mut out, r.position);
    }
    out
}

pub fn decode_activation_set(bytes: &[u8]) -> Result<ActivationSet> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version(format!("activation file version {version}, expected {FORMAT_VERSION}")));
    }
    let source = match r.u32("source")? {
        0 => Source::Sentence,
        1 => Source::Prompt,
        other => return Err(Error::format(12, format!("unknown source code {other}"))),
    };
    let layer = r.u32("layer")?;
    let dim = r.u32("dim")? as usize;
    let rows = r.u64("rows")? as usize;
    let n = rows
        .checked_mul(dim)
        .ok_or_else(|| Error::format(24, "rows x dim overflows"))?;
    let data = r.f32s(n, "activation rows")?;
    let at = r.offset();
    let entries = r.u64("index length")? as usize;
    if entries != rows {
        return Err(Error::format(at, format!("index has {entries} entries for {rows} rows")));
    }
    let mut row_index = Vec::with_capacity(rows);
    for _ in 0..rows {
        let len = r.u16("row id length")? as usize;
        let item = r.string(len, "row id")?;
        row_index.push(RowRef {
            item,
            sentence: r.u32("sentence index")?,
            position: r.u32("token position")?,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Ok(ActivationSet {
        layer,
        source,
        data: Tensor::new(&[rows, dim], data)?,
        row_index,
    })
}

pub fn write_activation_file(set: &ActivationSet, path: &Path) -> Result<()> {
    write_file(path, &encode_activation_set(set))
}

pub fn read_activation_file(path: &Path) -> Result<ActivationSet> {
    decode_activation_set(&read_file(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub layer: u32,
    pub file: String,
    pub rows: usize,
    pub dim: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationManifest {
    pub source: Source,
    pub files: Vec<ManifestFile>,
}

pub fn layer_file_name(layer: u32) -> String {
    format!("layer_{layer:02}.act")
}

/// Writes one file per set plus `manifest.json` into `dir`.
pub fn write_activation_dir(dir: &Path, sets: &[ActivationSet]) -> Result<ActivationManifest> {
    let source = sets.first().map_or(Source::Sentence, |s| s.source);
    let mut files = Vec::with_capacity(sets.len());
    for set in sets {
        let bytes = encode_activation_set(set);
        let file = layer_file_name(set.layer);
        write_file(&dir.join(&file), &bytes)?;
        files.push(ManifestFile {
            layer: set.layer,
            file,
            rows: set.rows(),
            dim: set.dim(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = ActivationManifest { source, files };
    write_file(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

pub fn read_activation_manifest(dir: &Path) -> Result<ActivationManifest> {
    Ok(serde_json::from_slice(&read_file(&dir.join(MANIFEST_FILE))?)?)
}
