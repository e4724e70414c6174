//! Speaker attribution for parliamentary debates.
//!
//! The crate covers the full corpus-to-scores path: a validated data model
//! for speeches and annotations, prompt construction for a two-step
//! cue-then-roles protocol against a greedy completion backend, grounding of
//! model output back onto corpus tokens, and proportional precision/recall/F1
//! scoring for the full-annotation and role-detection subtasks.

pub mod backend;
pub mod corpus;
pub mod metrics;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod prompt;

pub use backend::{
    record_replay, CompletionBackend, CompletionRequest, CompletionResponse, FinishReason,
    RecordingBackend, ReplayBackend, ReplayStore, WireBackend,
};
pub use corpus::{
    corpus_stats, load_corpus, save_corpus, validate_corpus, Annotation, Corpus, CorpusError,
    Element, RoleLabel, Sample, Span, Speech, StatsReport, TokenRef, Violation,
};
pub use metrics::{
    match_annotations, proportional_scores, render_report, score_corpus, ScoreReport, Subtask,
};
pub use pipeline::{predict_corpus, Predictions, RunManifest};
pub use postprocess::{
    assemble_prediction, ground_words, include_surrounded_punctuation, merge_overlapping_cues,
    parse_cue_output, parse_role_output, GroundingContext, ParsedCueOutput, ParsedRoleOutput,
};
pub use prompt::{
    build_cue_prompt, build_role_prompt, build_training_set, emit_training_config,
    render_cue_target, render_role_target, HeuristicTokenCounter, PromptPair, TokenCounter,
    TrainingConfig,
};

/// The worked annotation example used all over the test suites: one speech,
/// three samples, three annotations.
#[doc(hidden)]
pub mod fixtures {
    use std::collections::BTreeMap;

    use crate::corpus::{Annotation, Corpus, RoleLabel, Span, Speech, TokenRef};

    pub fn fig_speech() -> Speech {
        let samples: Vec<Vec<String>> = vec![
            vec![
                "denn",
                "wir",
                "wissen",
                ":",
                "Neben",
                "ihren",
                "rassistischen",
                "Positionen",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            vec![
                "haben",
                "die",
                "Rechtsradikalen",
                "nicht",
                "nur",
                "Klimawandelleugnung",
                "im",
                "Angebot",
                ",",
                "sie",
                "haben",
                "auch",
                "die",
                "rechtspopulistischen",
                "Positionen",
                "eines",
                "Donald",
                "Trump",
                "gepachtet",
                ".",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            vec!["Als", "Linke", "übernehmen", "wir", "Verantwortung", "."]
                .into_iter()
                .map(String::from)
                .collect(),
        ];
        let message: Vec<TokenRef> = (4..8)
            .map(|e| TokenRef::new(0, e))
            .chain((0..19).map(|e| TokenRef::new(1, e)))
            .collect();
        let ann1 = Annotation::new(
            Span::new([TokenRef::new(0, 2)]).unwrap(),
            BTreeMap::from([
                (RoleLabel::Source, Span::new([TokenRef::new(0, 1)]).unwrap()),
                (RoleLabel::Message, Span::new(message).unwrap()),
            ]),
        );
        let ann2 = Annotation::cue_only(Span::new([TokenRef::new(0, 7)]).unwrap());
        let ann3 = Annotation::new(
            Span::new([TokenRef::new(1, 14)]).unwrap(),
            BTreeMap::from([(
                RoleLabel::Message,
                Span::new((15..19).map(|e| TokenRef::new(1, e))).unwrap(),
            )]),
        );
        Speech::new("fig1", "DIE LINKE", samples, vec![ann1, ann2, ann3])
    }

    pub fn fig_corpus() -> Corpus {
        Corpus {
            split_name: "fixture".into(),
            speeches: vec![fig_speech()],
        }
    }
}
