use std::path::PathBuf;

use proptest::prelude::*;
use saeaudit::corpus::{
    build_token_stream, clean_document, load_corpus, read_sentences, read_token_stream, split_sentences,
    write_sentences, write_token_stream, Document, SplitRole, MAX_SENTENCE_WORDS, MIN_SENTENCE_WORDS,
};
use saeaudit::tokenizer::BpeVocab;
use saeaudit::Error;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn fixture(name: &str) -> String {
    String::from_utf8(std::fs::read(root().join("tests/fixtures").join(name)).unwrap()).unwrap()
}

fn toy_vocab() -> BpeVocab {
    let d = root().join("../../data/vocab");
    BpeVocab::load(d.join("toy-vocab.json"), d.join("toy-merges.txt")).unwrap()
}

#[test]
fn raw_archive_file_matches_golden_cleaning() {
    let cleaned = clean_document(&fixture("raw_novel.txt"));
    assert!(cleaned.markers_found);
    assert_eq!(cleaned.text, fixture("raw_novel.cleaned.txt"));
}

#[test]
fn markerless_input_is_kept_whole_with_flag() {
    let cleaned = clean_document("Just a body.\n");
    assert!(!cleaned.markers_found);
    assert_eq!(cleaned.text, "Just a body.\n");
}

#[test]
fn golden_paragraph_sentences() {
    let doc = Document::new("n", "Sample", "Anon", fixture("raw_novel.cleaned.txt")).unwrap();
    let s = split_sentences(&doc);
    let texts: Vec<&str> = s.iter().map(|r| r.text.as_str()).collect();
    // hand-labeled
    assert_eq!(
        texts,
        vec![
            "CHAPTER I.",
            "Mr. Darcy spoke.",
            "It is a truth universally acknowledged, that a single man in possession of a good fortune must be in want of a wife.",
            "\"My dear Mr. Bennet,\" said his lady to him one day, \"have you heard that Netherfield Park is let at last?\"",
            "Mr. Bennet replied that he had not.",
        ]
    );
    assert_eq!(s.iter().map(|r| r.index).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    assert_eq!(s.iter().filter(|r| r.admitted).count(), 3);
}

#[test]
fn golden_token_count_matches_reference_encoder() {
    #[derive(serde::Deserialize)]
    struct Count {
        tokens: usize,
    }
    let expected: Count = serde_json::from_str(&fixture("raw_novel.cleaned.tokens.json")).unwrap();
    let vocab = toy_vocab();
    let doc = Document::new("n", "Sample", "Anon", fixture("raw_novel.cleaned.txt")).unwrap();
    let other = Document::new("m", "Other", "Anon", "Another short book.\n".into()).unwrap();
    let streams = build_token_stream(&[doc, other], &vocab, 0.9).unwrap();
    // one end-of-text token per document
    assert_eq!(streams.train.len(), expected.tokens + 1);
    assert_eq!(*streams.train.last().unwrap(), vocab.end_of_text().unwrap());
}

#[test]
fn ten_equal_documents_split_nine_to_one() {
    let vocab = toy_vocab();
    let docs: Vec<Document> = (0..10)
        .map(|i| Document::new(format!("d{i}"), "T", "A", "The girl walked to the village.\n".into()).unwrap())
        .collect();
    let s = build_token_stream(&docs, &vocab, 0.9).unwrap();
    assert_eq!(s.train_docs.len(), 9);
    assert_eq!(s.validation_docs, vec!["d9".to_string()]);
    assert_eq!(s.train.len(), 9 * s.validation.len());
}

#[test]
fn single_document_is_a_configuration_error() {
    let vocab = toy_vocab();
    let docs = vec![Document::new("d", "T", "A", "Alone.\n".into()).unwrap()];
    assert!(matches!(build_token_stream(&docs, &vocab, 0.9), Err(Error::Config(_))));
    assert!(matches!(build_token_stream(&docs, &vocab, 1.0), Err(Error::Config(_))));
}

#[test]
fn empty_document_is_rejected() {
    assert!(Document::new("d", "T", "A", "  \n".into()).is_err());
}

#[test]
fn sample_corpus_loads_and_splits() {
    let docs = load_corpus(&root().join("../../data/sample-corpus")).unwrap();
    assert_eq!(docs.len(), 7);
    assert!(docs.iter().all(|d| d.markers_found));
    assert!(docs.windows(2).all(|w| w[0].document.id < w[1].document.id));
    assert_eq!(docs.iter().filter(|d| d.split == SplitRole::Eval).count(), 1);
    for d in &docs {
        assert!(!d.document.text.contains("*** START OF"));
        assert!(!d.document.text.contains("Project Gutenberg"));
    }

    let vocab = toy_vocab();
    let train: Vec<Document> =
        docs.iter().filter(|d| d.split == SplitRole::Train).map(|d| d.document.clone()).collect();
    let s = build_token_stream(&train, &vocab, 0.9).unwrap();
    assert!(!s.train.is_empty() && !s.validation.is_empty());
    for id in &s.train_docs {
        assert!(!s.validation_docs.contains(id));
    }
    let total: usize = train.iter().map(|d| vocab.encode(&d.text).len() + 1).sum();
    assert_eq!(s.train.len() + s.validation.len(), total);

    let sentences: Vec<_> = train.iter().flat_map(split_sentences).collect();
    let admitted = sentences.iter().filter(|s| s.admitted).count();
    assert!(admitted > 100, "{admitted}");
}

#[test]
fn stream_and_sentence_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ids: Vec<u32> = (0..1000).map(|i| i * 7 % 999).collect();
    write_token_stream(&dir.path().join("t.bin"), &ids).unwrap();
    assert_eq!(read_token_stream(&dir.path().join("t.bin")).unwrap(), ids);

    let doc = Document::new("n", "Sample", "Anon", fixture("raw_novel.cleaned.txt")).unwrap();
    let sentences = split_sentences(&doc);
    write_sentences(&dir.path().join("s.jsonl"), &sentences).unwrap();
    assert_eq!(read_sentences(&dir.path().join("s.jsonl")).unwrap(), sentences);
}

proptest! {
    #[test]
    fn cleaning_is_idempotent(raw in "[a-zA-Z .!?\"\u{201c}\u{201d}\r\n\t\u{7}]{0,200}") {
        let once = clean_document(&raw).text;
        prop_assert_eq!(clean_document(&once).text, once);
    }

    #[test]
    fn admitted_sentences_respect_word_band(words in prop::collection::vec("[A-Za-z]{1,8}[.!?]?", 1..150)) {
        let text = words.join(" ");
        if let Ok(doc) = Document::new("p", "T", "A", text) {
            for s in split_sentences(&doc) {
                prop_assert_eq!(s.admitted, (MIN_SENTENCE_WORDS..=MAX_SENTENCE_WORDS).contains(&s.word_count));
            }
        }
    }
}
