//! Text assembly for prompts: space-joined sample texts, three-sample context
//! windows, and the trailing-colon repair.
//!
//! Models tended to ignore instructions when the text slot ended with a
//! colon, so a trailing colon is rewritten to a period at the end of whatever
//! string goes into a prompt slot: the sample text for cue prompts, the whole
//! window for role prompts. Offsets are byte ranges into the built string so
//! grounded spans can be reported by position.

use std::ops::Range;

use crate::corpus::{Sample, Speech, TokenRef};

/// A sample's elements joined by single spaces, colon-repaired at the end.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleText {
    pub text: String,
    /// Byte range of each element in `text`, in element order.
    pub offsets: Vec<Range<usize>>,
}

impl SampleText {
    /// The (possibly repaired) element text at `index`.
    pub fn element_text(&self, index: usize) -> &str {
        &self.text[self.offsets[index].clone()]
    }
}

/// The anchor sample and up to two following samples, joined by single
/// spaces, colon-repaired only at the very end.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextText {
    pub text: String,
    /// Sample indices included, in order.
    pub boundaries: Vec<usize>,
    /// Byte range of every element across the included samples.
    pub offsets: Vec<(TokenRef, Range<usize>)>,
}

/// Rewrites a trailing colon to a period. Only the final non-whitespace
/// character is touched; idempotent and length-preserving.
pub fn fix_trailing_colon(text: &str) -> String {
    match text.rfind(|c: char| !c.is_whitespace()) {
        Some(pos) if text[pos..].starts_with(':') => {
            let mut out = String::with_capacity(text.len());
            out.push_str(&text[..pos]);
            out.push('.');
            out.push_str(&text[pos + 1..]);
            out
        }
        _ => text.to_string(),
    }
}

fn join_elements(sample: &Sample, text: &mut String, offsets: &mut Vec<Range<usize>>) {
    for el in sample.elements() {
        if !text.is_empty() {
            text.push(' ');
        }
        let start = text.len();
        text.push_str(el.text());
        offsets.push(start..text.len());
    }
}

fn repair_in_place(text: &mut String) {
    let repaired = fix_trailing_colon(text);
    *text = repaired;
}

/// Space-joins the sample's elements and applies the colon repair.
pub fn sample_text(sample: &Sample) -> SampleText {
    let mut text = String::new();
    let mut offsets = Vec::with_capacity(sample.len());
    join_elements(sample, &mut text, &mut offsets);
    repair_in_place(&mut text);
    SampleText { text, offsets }
}

/// Builds the role-prompt window: samples `anchor..=anchor+2` where they
/// exist. The colon repair applies to the final character of the whole
/// window, so a mid-window sample keeps its trailing colon.
pub fn context_window(speech: &Speech, anchor: usize) -> ContextText {
    let last = speech.samples().len().min(anchor + 3);
    let mut text = String::new();
    let mut boundaries = Vec::new();
    let mut offsets = Vec::new();
    for sample in &speech.samples()[anchor..last] {
        boundaries.push(sample.index);
        let mut local = Vec::with_capacity(sample.len());
        join_elements(sample, &mut text, &mut local);
        offsets.extend(
            local
                .into_iter()
                .enumerate()
                .map(|(ei, range)| (TokenRef::new(sample.index, ei), range)),
        );
    }
    repair_in_place(&mut text);
    ContextText {
        text,
        boundaries,
        offsets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Speech;
    use proptest::prelude::*;

    fn speech_from(samples: Vec<Vec<&str>>) -> Speech {
        Speech::new(
            "s",
            "g",
            samples
                .into_iter()
                .map(|s| s.into_iter().map(String::from).collect())
                .collect(),
            vec![],
        )
    }

    fn fig_speech() -> Speech {
        speech_from(vec![
            vec![
                "denn",
                "wir",
                "wissen",
                ":",
                "Neben",
                "ihren",
                "rassistischen",
                "Positionen",
            ],
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
            ],
            vec!["Als", "Linke", "übernehmen", "wir", "Verantwortung", "."],
        ])
    }

    #[test]
    fn joins_elements_with_spaces() {
        let speech = fig_speech();
        let st = sample_text(&speech.samples()[0]);
        assert_eq!(
            st.text,
            "denn wir wissen : Neben ihren rassistischen Positionen"
        );
    }

    #[test]
    fn single_element_sample() {
        let speech = speech_from(vec![vec!["Ja"]]);
        assert_eq!(sample_text(&speech.samples()[0]).text, "Ja");
    }

    #[test]
    fn trailing_colon_element_becomes_period() {
        let speech = speech_from(vec![vec!["Folgendes", ":"]]);
        assert_eq!(sample_text(&speech.samples()[0]).text, "Folgendes .");
    }

    #[test]
    fn fix_trailing_colon_examples() {
        assert_eq!(fix_trailing_colon("wir sagen :"), "wir sagen .");
        assert_eq!(fix_trailing_colon("wir sagen ."), "wir sagen .");
        assert_eq!(fix_trailing_colon("wir : sagen"), "wir : sagen");
        assert_eq!(fix_trailing_colon(""), "");
        assert_eq!(fix_trailing_colon("sagte:"), "sagte.");
    }

    #[test]
    fn window_covers_three_samples() {
        let speech = fig_speech();
        let ctx = context_window(&speech, 0);
        assert_eq!(ctx.boundaries, vec![0, 1, 2]);
        assert_eq!(
            ctx.text,
            "denn wir wissen : Neben ihren rassistischen Positionen haben die \
             Rechtsradikalen nicht nur Klimawandelleugnung im Angebot , sie haben auch die \
             rechtspopulistischen Positionen eines Donald Trump gepachtet . Als Linke \
             übernehmen wir Verantwortung ."
        );
    }

    #[test]
    fn window_at_speech_end_shrinks() {
        let speech = fig_speech();
        assert_eq!(context_window(&speech, 2).boundaries, vec![2]);
        assert_eq!(context_window(&speech, 1).boundaries, vec![1, 2]);
    }

    #[test]
    fn window_repairs_only_final_colon() {
        let speech = speech_from(vec![vec!["wir", "sagen", ":"], vec!["es", "endet", ":"]]);
        let ctx = context_window(&speech, 0);
        // The mid-window colon survives, the final one is repaired.
        assert_eq!(ctx.text, "wir sagen : es endet .");
        let only_last = context_window(&speech, 1);
        assert_eq!(only_last.text, "es endet .");
    }

    proptest! {
        #[test]
        fn field_count_matches_element_count(
            elements in proptest::collection::vec("[a-zA-Zäöüß:,.]{1,6}", 1..8)
        ) {
            let speech = speech_from(vec![elements.iter().map(|s| s.as_str()).collect()]);
            let st = sample_text(&speech.samples()[0]);
            prop_assert_eq!(st.text.split(' ').count(), elements.len());
        }

        #[test]
        fn fix_trailing_colon_idempotent_and_length_preserving(s in ".{0,40}") {
            let once = fix_trailing_colon(&s);
            prop_assert_eq!(once.len(), s.len());
            prop_assert_eq!(fix_trailing_colon(&once), once.clone());
        }

        #[test]
        fn offsets_slice_back_to_repaired_elements(
            samples in proptest::collection::vec(
                proptest::collection::vec("[a-zäöü:,.]{1,5}", 1..6), 1..4)
        ) {
            let speech = speech_from(
                samples.iter().map(|s| s.iter().map(|e| e.as_str()).collect()).collect());
            for sample in speech.samples() {
                let st = sample_text(sample);
                for (i, el) in sample.elements().iter().enumerate() {
                    let slice = st.element_text(i);
                    if i + 1 == sample.len() {
                        prop_assert_eq!(slice, fix_trailing_colon(el.text()));
                    } else {
                        prop_assert_eq!(slice, el.text());
                    }
                }
            }
            let ctx = context_window(&speech, 0);
            for (i, (r, range)) in ctx.offsets.iter().enumerate() {
                let el = speech.element(r).unwrap();
                let slice = &ctx.text[range.clone()];
                if i + 1 == ctx.offsets.len() {
                    prop_assert_eq!(slice, fix_trailing_colon(el.text()));
                } else {
                    prop_assert_eq!(slice, el.text());
                }
            }
        }
    }
}
