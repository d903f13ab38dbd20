use std::path::PathBuf;

use proptest::prelude::*;
use saeaudit::tokenizer::BpeVocab;
use serde::Deserialize;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn toy_vocab() -> BpeVocab {
    let d = data_dir().join("vocab");
    BpeVocab::load(d.join("toy-vocab.json"), d.join("toy-merges.txt")).unwrap()
}

#[derive(Deserialize)]
struct Case {
    text: String,
    ids: Vec<u32>,
}

fn fixtures() -> Vec<Case> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy_encodings.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn toy_vocab_is_small_and_has_end_of_text() {
    let v = toy_vocab();
    assert!(v.len() <= 1000);
    assert_eq!(v.end_of_text(), Some(v.len() as u32 - 1));
}

#[test]
fn empty_input() {
    let v = toy_vocab();
    assert!(v.encode("").is_empty());
    assert_eq!(v.decode(&[]).unwrap(), "");
}

#[test]
fn matches_reference_encoder() {
    let v = toy_vocab();
    for case in fixtures() {
        assert_eq!(v.encode(&case.text), case.ids, "encoding {:?}", case.text);
        assert_eq!(v.decode(&case.ids).unwrap(), case.text);
    }
}

#[test]
fn the_girl_fixture() {
    let v = toy_vocab();
    let case = fixtures().into_iter().find(|c| c.text == "The girl").unwrap();
    assert_eq!(v.encode("The girl"), case.ids);
}

#[test]
fn round_trip_title() {
    let v = toy_vocab();
    let s = "Pride and Prejudice";
    assert_eq!(v.decode(&v.encode(s)).unwrap(), s);
}

#[test]
fn sample_corpus_token_totals_match_reference() {
    let v = toy_vocab();
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/sample_corpus_token_counts.json");
    let totals: std::collections::BTreeMap<String, usize> =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    for (id, expected) in totals {
        let text = std::fs::read_to_string(data_dir().join(format!("sample-corpus/{id}.txt"))).unwrap();
        assert_eq!(v.encode(&text).len(), expected, "{id}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn round_trip_arbitrary_utf8(s in "\\PC*") {
        let v = toy_vocab();
        prop_assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
    }

    #[test]
    fn concatenated_ids_decode_to_concatenation(a in "\\PC{0,30}", b in "\\PC{0,30}") {
        let v = toy_vocab();
        let mut ids = v.encode(&a);
        ids.extend(v.encode(&b));
        prop_assert_eq!(v.decode(&ids).unwrap(), format!("{a}{b}"));
        prop_assert_eq!(v.encode(&a), v.encode(&a));
    }
}
