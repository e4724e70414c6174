//! Save/load round-trips over generated corpora.

use std::collections::BTreeMap;

use proptest::prelude::*;

use attrib_core::corpus::{
    corpus_to_json, load_corpus, save_corpus, validate_corpus, Annotation, Corpus, RoleLabel, Span,
    Speech, TokenRef,
};

fn element() -> impl Strategy<Value = String> {
    "[A-Za-zäöüß0-9,.:;!?]{1,8}"
}

fn samples() -> impl Strategy<Value = Vec<Vec<String>>> {
    proptest::collection::vec(proptest::collection::vec(element(), 1..6), 1..5)
}

fn annotation_for(samples: &[Vec<String>]) -> impl Strategy<Value = Annotation> {
    let n_samples = samples.len();
    let sizes: Vec<usize> = samples.iter().map(Vec::len).collect();
    (0..n_samples).prop_flat_map(move |anchor| {
        let sizes = sizes.clone();
        let cue =
            (0..sizes[anchor]).prop_map(move |e| Span::new([TokenRef::new(anchor, e)]).unwrap());
        let sizes2 = sizes.clone();
        let role = proptest::option::of(
            (0..3usize, proptest::sample::select(RoleLabel::ALL.to_vec())).prop_filter_map(
                "role sample within window",
                move |(off, label)| {
                    let s = anchor + off;
                    if s >= sizes2.len() {
                        return None;
                    }
                    Some((label, Span::new([TokenRef::new(s, 0)]).unwrap()))
                },
            ),
        );
        (cue, role).prop_map(|(cue, role)| {
            let mut roles = BTreeMap::new();
            if let Some((label, span)) = role {
                roles.insert(label, span);
            }
            Annotation::new(cue, roles)
        })
    })
}

fn corpus() -> impl Strategy<Value = Corpus> {
    proptest::collection::vec(
        samples().prop_flat_map(|s| {
            let anns = proptest::collection::vec(annotation_for(&s), 0..3);
            (Just(s), anns)
        }),
        0..4,
    )
    .prop_map(|speeches| Corpus {
        split_name: "generated".into(),
        speeches: speeches
            .into_iter()
            .enumerate()
            .map(|(i, (samples, annotations))| {
                Speech::new(
                    format!("speech-{i}"),
                    format!("group-{}", i % 2),
                    samples,
                    annotations,
                )
            })
            .collect(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_then_load_is_identity(c in corpus()) {
        prop_assume!(validate_corpus(&c).is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.json");
        save_corpus(&c, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        prop_assert_eq!(loaded, c);
    }

    #[test]
    fn serialization_is_deterministic(c in corpus()) {
        prop_assume!(validate_corpus(&c).is_empty());
        prop_assert_eq!(corpus_to_json(&c), corpus_to_json(&c));
    }
}

#[test]
fn fixture_file_loads_with_expected_shape() {
    let corpus = load_corpus(format!(
        "{}/../../testdata/fig1.json",
        env!("CARGO_MANIFEST_DIR")
    ))
    .unwrap();
    assert_eq!(corpus.speeches.len(), 1);
    assert_eq!(corpus.speeches[0].samples().len(), 3);
    assert_eq!(corpus.speeches[0].annotations.len(), 3);
    assert_eq!(corpus, attrib_core::fixtures::fig_corpus());
}

#[test]
fn out_of_range_annotation_is_rejected_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"split_name":"t","speeches":[{"id":"s1","group":"g","samples":[["a","b"]],"annotations":[{"cue":[[0,99]],"roles":{}}]}]}"#,
    )
    .unwrap();
    let err = load_corpus(&path).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("annotation 0"), "message was: {msg}");
    assert!(msg.contains("RefOutOfRange"), "message was: {msg}");
}

#[test]
fn empty_speeches_list_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.json");
    std::fs::write(&path, r#"{"split_name":"empty","speeches":[]}"#).unwrap();
    let corpus = load_corpus(&path).unwrap();
    assert!(corpus.speeches.is_empty());
}

#[test]
fn unknown_role_label_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad_label.json");
    std::fs::write(
        &path,
        r#"{"split_name":"t","speeches":[{"id":"s1","group":"g","samples":[["a"]],"annotations":[{"cue":[[0,0]],"roles":{"Speaker":[[0,0]]}}]}]}"#,
    )
    .unwrap();
    let err = load_corpus(&path).unwrap_err();
    assert!(err.to_string().contains("Speaker"));
}
