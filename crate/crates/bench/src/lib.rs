//! Workload builders shared by the benchmarks.

use attrib_core::corpus::{Annotation, Corpus, Span, Speech, TokenRef};
use attrib_core::fixtures::fig_speech;

/// A corpus of `n` copies of the worked fixture speech under distinct ids.
pub fn repeated_fixture_corpus(n: usize) -> Corpus {
    let template = fig_speech();
    let speeches = (0..n)
        .map(|i| {
            let samples = template
                .samples()
                .iter()
                .map(|s| s.elements().iter().map(|e| e.text().to_string()).collect())
                .collect();
            Speech::new(
                format!("speech-{i}"),
                template.group.clone(),
                samples,
                template.annotations.clone(),
            )
        })
        .collect();
    Corpus {
        split_name: "bench".into(),
        speeches,
    }
}

/// Predictions that disagree with gold on part of every message span, so the
/// scorer does non-trivial overlap work.
pub fn perturbed_annotations(speech: &Speech) -> Vec<Annotation> {
    speech
        .annotations
        .iter()
        .map(|ann| {
            let roles = ann
                .roles
                .iter()
                .map(|(label, span)| {
                    let refs: Vec<TokenRef> = span.refs().iter().copied().skip(1).collect();
                    let span = if refs.is_empty() {
                        span.clone()
                    } else {
                        Span::new(refs).unwrap()
                    };
                    (*label, span)
                })
                .collect();
            Annotation::new(ann.cue.clone(), roles)
        })
        .collect()
}
