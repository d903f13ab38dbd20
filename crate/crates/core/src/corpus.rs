//! Corpus ingestion: archive boilerplate removal, normalization, rule-based
//! sentence splitting and tokenized train/validation streams.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{put_u32, put_u64, read_file, write_file, Reader};
use crate::tokenizer::BpeVocab;

pub const MIN_SENTENCE_WORDS: usize = 5;
pub const MAX_SENTENCE_WORDS: usize = 60;

const START_MARKER: &str = "*** START OF";
const END_MARKER: &str = "*** END OF";
const ABBREVIATIONS: &[&str] = &["Mr", "Mrs", "Dr", "St", "Ms", "Messrs"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub author: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, author: impl Into<String>, text: String) -> Result<Self> {
        let id = id.into();
        if text.trim().is_empty() {
            return Err(Error::Input(format!("document {id} is empty after cleaning")));
        }
        Ok(Self {
            id,
            title: title.into(),
            author: author.into(),
            text,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub doc_id: String,
    pub index: usize,
    pub text: String,
    pub word_count: usize,
    pub admitted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Eval,
}

/// One entry of the corpus manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub title: String,
    pub author: String,
    pub filename: String,
    pub split: SplitRole,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cleaned {
    pub text: String,
    /// False when the start/end markers were absent and the whole input was kept.
    pub markers_found: bool,
}

/// Strips archive boilerplate and normalizes line endings, control
/// characters, typographic quotes and blank-line runs. Idempotent.
pub fn clean_document(raw: &str) -> Cleaned {
    let unified = raw.replace("\r\n", "\n").replace('\r', "\n");
    let (body, markers_found) = match interior(&unified) {
        Some(body) => (body, true),
        None => (unified.as_str(), false),
    };

    let mut normalized = String::with_capacity(body.len());
    for c in body.chars() {
        match c {
            '\n' | '\t' => normalized.push(c),
            '\u{feff}' => {}
            c if c.is_control() => {}
            '\u{2018}' | '\u{2019}' => normalized.push('\''),
            '\u{201c}' | '\u{201d}' => normalized.push('"'),
            c => normalized.push(c),
        }
    }

    let mut out = String::with_capacity(normalized.len());
    let mut blank_run = 0;
    for line in normalized.split('\n') {
        if line.trim().is_empty() {
            blank_run += 1;
            continue;
        }
        if !out.is_empty() {
            out.push('\n');
            if blank_run > 0 {
                out.push('\n');
            }
        }
        blank_run = 0;
        out.push_str(line);
    }
    if !out.is_empty() {
        out.push('\n');
    }
    Cleaned {
        text: out,
        markers_found,
    }
}

fn interior(text: &str) -> Option<&str> {
    let start_at = text.find(START_MARKER)?;
    let body_start = text[start_at..].find('\n').map(|i| start_at + i + 1)?;
    let end_at = text[body_start..].find(END_MARKER).map(|i| body_start + i)?;
    // drop the partial line that holds the end marker
    let line_start = text[..end_at].rfind('\n').map_or(body_start, |i| (i + 1).max(body_start));
    Some(&text[body_start..line_start])
}

/// Splits a cleaned document into sentences. Every sentence is returned;
/// those outside the 5..=60 word band have `admitted == false`.
pub fn split_sentences(doc: &Document) -> Vec<SentenceRecord> {
    let mut out = Vec::new();
    for para in doc.text.split("\n\n") {
        let joined = para.split_whitespace().collect::<Vec<_>>().join(" ");
        for text in split_paragraph(&joined) {
            let word_count = text.split_whitespace().count();
            out.push(SentenceRecord {
                doc_id: doc.id.clone(),
                index: out.len(),
                admitted: (MIN_SENTENCE_WORDS..=MAX_SENTENCE_WORDS).contains(&word_count),
                text,
                word_count,
            });
        }
    }
    out
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

fn is_opener(c: char) -> bool {
    c.is_uppercase() || matches!(c, '"' | '\'' | '\u{201c}' | '\u{2018}')
}

fn split_paragraph(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let (_, c) = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && (is_closer(chars[j].1) || matches!(chars[j].1, '.' | '!' | '?')) {
                j += 1;
            }
            let end_byte = chars.get(j).map_or(text.len(), |&(b, _)| b);
            let followed = j + 1 < chars.len() && chars[j].1.is_whitespace() && is_opener(chars[j + 1].1);
            if followed && !(c == '.' && ends_with_abbreviation(&text[start..chars[i].0])) {
                sentences.push(text[start..end_byte].trim().to_string());
                start = chars[j + 1].0;
                i = j + 1;
                continue;
            }
            i = j;
            continue;
        }
        i += 1;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}

fn ends_with_abbreviation(before_dot: &str) -> bool {
    let word = before_dot
        .rsplit(|c: char| c.is_whitespace() || c == '"' || c == '(')
        .next()
        .unwrap_or("");
    ABBREVIATIONS.contains(&word)
}

/// Loads the manifest and cleans every listed document, ordered by id.
pub fn load_corpus(dir: &Path) -> Result<Vec<LoadedDocument>> {
    let manifest_path = dir.join("manifest.json");
    let entries: Vec<ManifestEntry> = serde_json::from_slice(&read_file(&manifest_path)?)?;
    let mut docs = Vec::with_capacity(entries.len());
    for entry in entries {
        let path = dir.join(&entry.filename);
        let raw = read_file(&path)?;
        let raw = String::from_utf8(raw)
            .map_err(|e| Error::format(e.utf8_error().valid_up_to() as u64, format!("{} is not UTF-8", path.display())))?;
        let cleaned = clean_document(&raw);
        docs.push(LoadedDocument {
            document: Document::new(entry.id, entry.title, entry.author, cleaned.text)?,
            split: entry.split,
            markers_found: cleaned.markers_found,
        });
    }
    docs.sort_by(|a, b| a.document.id.cmp(&b.document.id));
    Ok(docs)
}

#[derive(Clone, Debug)]
pub struct LoadedDocument {
    pub document: Document,
    pub split: SplitRole,
    pub markers_found: bool,
}

/// Tokenized corpus split at a document boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStreams {
    pub train: Vec<u32>,
    pub validation: Vec<u32>,
    pub train_docs: Vec<String>,
    pub validation_docs: Vec<String>,
}

/// Tokenizes `docs`, appends an end-of-text token after each, and splits at
/// the document boundary whose train fraction is closest to `split_ratio`.
pub fn build_token_stream(docs: &[Document], vocab: &BpeVocab, split_ratio: f64) -> Result<TokenStreams> {
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {split_ratio} outside (0, 1)")));
    }
    if docs.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 documents for a train/validation split, got {}",
            docs.len()
        )));
    }
    let eot = vocab
        .end_of_text()
        .ok_or_else(|| Error::Config("vocabulary has no end-of-text token".into()))?;
    let encoded: Vec<Vec<u32>> = docs
        .iter()
        .map(|d| {
            let mut ids = vocab.encode(&d.text);
            ids.push(eot);
            ids
        })
        .collect();
    let total: usize = encoded.iter().map(Vec::len).sum();
    let mut cum = 0usize;
    let mut best = (f64::INFINITY, 1);
    for (b, ids) in encoded.iter().enumerate().take(docs.len() - 1) {
        cum += ids.len();
        let gap = (cum as f64 / total as f64 - split_ratio).abs();
        if gap < best.0 - 1e-12 {
            best = (gap, b + 1);
        }
    }
    let cut = best.1;
    Ok(TokenStreams {
        train: encoded[..cut].concat(),
        validation: encoded[cut..].concat(),
        train_docs: docs[..cut].iter().map(|d| d.id.clone()).collect(),
        validation_docs: docs[cut..].iter().map(|d| d.id.clone()).collect(),
    })
}

const TOKEN_MAGIC: &[u8; 8] = b"SATOKENS";
const TOKEN_VERSION: u32 = 1;

/// Token stream file: 8-byte magic, u32 version, u32 reserved, u64 count,
/// then `count` little-endian u32 ids.
pub fn encode_token_stream(ids: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + ids.len() * 4);
    out.extend_from_slice(TOKEN_MAGIC);
    put_u32(&mut out, TOKEN_VERSION);
    put_u32(&mut out, 0);
    put_u64(&mut out, ids.len() as u64);
    for &id in ids {
        put_u32(&mut out, id);
    }
    out
}

pub fn decode_token_stream(bytes: &[u8]) -> Result<Vec<u32>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8, "magic")?;
    if magic != TOKEN_MAGIC {
        return Err(Error::Version(format!("bad token stream magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = r.u32("version")?;
    if version != TOKEN_VERSION {
        return Err(Error::Version(format!("token stream version {version}")));
    }
    r.u32("reserved")?;
    let count = r.u64("count")? as usize;
    let mut ids = Vec::with_capacity(count.min(r.remaining() / 4));
    for _ in 0..count {
        ids.push(r.u32("token id")?);
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), "trailing bytes after token ids"));
    }
    Ok(ids)
}

pub fn write_token_stream(path: &Path, ids: &[u32]) -> Result<()> {
    write_file(path, &encode_token_stream(ids))
}

pub fn read_token_stream(path: &Path) -> Result<Vec<u32>> {
    decode_token_stream(&read_file(path)?)
}

pub fn write_sentences(path: &Path, sentences: &[SentenceRecord]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn read_sentences(path: &Path) -> Result<Vec<SentenceRecord>> {
    let text = String::from_utf8_lossy(&read_file(path)?).into_owned();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Validation {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
