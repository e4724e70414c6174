//! Prompt rendering and training-pair serialization.
//!
//! The cue and role templates are frozen resource files; rendering fills the
//! sample-dependent slots and nothing else, so equal inputs always produce
//! byte-identical strings. Inputs end with `Assistant:`, training outputs end
//! with the end-of-sequence marker `</s>`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Annotation, Corpus, Sample, Speech};
use crate::preprocess::{context_window, sample_text, ContextText};

pub const END_OF_SEQUENCE: &str = "</s>";
pub const UNKNOWN_MARKER: &str = "#UNK#";

const CUE_TEMPLATE: &str = include_str!("../resources/cue_prompt.txt");
const ROLE_TEMPLATE: &str = include_str!("../resources/role_prompt.txt");

/// SHA-256 over the raw template resources; changes iff a template changes.
pub fn template_hash() -> String {
    let mut hasher = Sha256::new();
    hasher.update(CUE_TEMPLATE.as_bytes());
    hasher.update(ROLE_TEMPLATE.as_bytes());
    format!("{:x}", hasher.finalize())
}

/// Fills the cue template's sentence slot with the sample text.
pub fn build_cue_prompt(sample: &Sample) -> String {
    CUE_TEMPLATE.replace("{sentence}", &sample_text(sample).text)
}

/// Renders the desired cue response for a sample: bracketed cue-word groups
/// in annotation order, or `#UNK#` when the sample has no annotations.
pub fn render_cue_target(sample: &Sample, annotations: &[&Annotation]) -> String {
    let st = sample_text(sample);
    let body = if annotations.is_empty() {
        UNKNOWN_MARKER.to_string()
    } else {
        annotations
            .iter()
            .map(|ann| {
                let words: Vec<&str> = ann
                    .cue
                    .refs()
                    .iter()
                    .map(|r| st.element_text(r.element_index))
                    .collect();
                format!("[{}]", words.join(", "))
            })
            .collect::<Vec<_>>()
            .join(", ")
    };
    format!("Cues: {body}{END_OF_SEQUENCE}")
}

/// Joins a cue prompt and the model's (or gold) cue response into the
/// exchange that prefixes role prompts.
pub fn cue_exchange(cue_prompt: &str, cue_output: &str) -> String {
    format!("{cue_prompt} {cue_output}")
}

/// Renders the role prompt for one cue: the cue exchange, then the role
/// template over the three-sample window.
pub fn build_role_prompt(
    speech: &Speech,
    anchor: usize,
    cue_words: &[String],
    cue_exchange: &str,
) -> String {
    let window = context_window(speech, anchor);
    let block = ROLE_TEMPLATE
        .replace("{text}", &window.text)
        .replace("{cue}", &cue_words.join(", "));
    format!("{cue_exchange}\n{block}")
}

fn span_words(span: &crate::corpus::Span, window: &ContextText) -> Vec<String> {
    span.refs()
        .iter()
        .map(|r| {
            window
                .offsets
                .iter()
                .find(|(wr, _)| wr == r)
                .map(|(_, range)| window.text[range.clone()].to_string())
                .expect("annotation ref lies within the window")
        })
        .collect()
}

/// Words of the annotation's cue as they appear in the window text.
pub fn cue_words(annotation: &Annotation, window: &ContextText) -> Vec<String> {
    span_words(&annotation.cue, window)
}

/// Renders the desired role response: eight fixed lines (cue first, then the
/// seven roles), `#UNK#` for absent roles, `</s>` after the last line.
pub fn render_role_target(annotation: &Annotation, window: &ContextText) -> String {
    let mut lines = Vec::with_capacity(8);
    lines.push(format!("cue: {}", cue_words(annotation, window).join(", ")));
    for label in crate::corpus::RoleLabel::ALL {
        let value = match annotation.roles.get(&label) {
            Some(span) => span_words(span, window).join(", "),
            None => UNKNOWN_MARKER.to_string(),
        };
        lines.push(format!("{}: {}", label.prompt_key(), value));
    }
    format!("{}{END_OF_SEQUENCE}", lines.join("\n"))
}

// ---------------------------------------------------------------------------
// Token counting
// ---------------------------------------------------------------------------

/// Counts tokens and truncates text to a token budget. Truncation keeps a
/// prefix of the string, cut at a whitespace boundary.
pub trait TokenCounter {
    fn count(&self, text: &str) -> usize;

    fn truncate(&self, text: &str, limit: usize) -> String {
        if self.count(text) <= limit {
            return text.to_string();
        }
        // Candidate cut points: end of each whitespace-separated field.
        let mut ends = Vec::new();
        let mut in_field = false;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                in_field = false;
            } else {
                if in_field {
                    *ends.last_mut().unwrap() = i + c.len_utf8();
                } else {
                    ends.push(i + c.len_utf8());
                }
                in_field = true;
            }
        }
        // count() is monotone in the number of kept fields, so binary search
        // for the longest fitting prefix.
        let mut lo = 0usize; // fields kept; prefix of 0 fields is empty
        let mut hi = ends.len();
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if self.count(&text[..ends[mid - 1]]) <= limit {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        if lo == 0 {
            String::new()
        } else {
            text[..ends[lo - 1]].to_string()
        }
    }
}

/// Budget-enforcement heuristic: whitespace-separated fields times 1.4,
/// rounded up. Not a real tokenizer; exact budgets need the external adapter.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicTokenCounter;

impl TokenCounter for HeuristicTokenCounter {
    fn count(&self, text: &str) -> usize {
        let fields = text.split_whitespace().count();
        (fields * 7).div_ceil(5)
    }
}

/// Adapter for a real tokenizer: runs a shell command that reads text on
/// stdin and prints the token count.
#[derive(Debug, Clone)]
pub struct ExternalTokenCounter {
    command: String,
}

impl ExternalTokenCounter {
    pub fn new(command: impl Into<String>) -> Self {
        ExternalTokenCounter {
            command: command.into(),
        }
    }
}

impl TokenCounter for ExternalTokenCounter {
    fn count(&self, text: &str) -> usize {
        use std::process::{Command, Stdio};
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap_or_else(|e| panic!("tokenizer command failed to start: {e}"));
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(text.as_bytes())
            .expect("write to tokenizer command");
        let out = child.wait_with_output().expect("tokenizer command output");
        String::from_utf8_lossy(&out.stdout)
            .trim()
            .parse()
            .unwrap_or_else(|_| panic!("tokenizer command printed no count"))
    }
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

/// Hyperparameters handed to the external fine-tuning job, plus the token
/// budgets used when serializing training pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub lora_dropout: f64,
    pub cue_steps: u32,
    pub cue_batch: u32,
    pub cue_grad_accum: u32,
    pub role_steps: u32,
    pub role_batch: u32,
    pub role_grad_accum: u32,
    pub cue_max_input_tokens: usize,
    pub cue_max_output_tokens: usize,
    pub role_max_input_tokens: usize,
    pub role_max_output_tokens: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 0.0001,
            warmup_fraction: 0.03,
            lora_dropout: 0.05,
            cue_steps: 2000,
            cue_batch: 16,
            cue_grad_accum: 1,
            role_steps: 2500,
            role_batch: 8,
            role_grad_accum: 2,
            cue_max_input_tokens: 256,
            cue_max_output_tokens: 64,
            role_max_input_tokens: 640,
            role_max_output_tokens: 256,
        }
    }
}

impl TrainingConfig {
    /// Both models train with an effective batch of 16.
    pub fn effective_batches(&self) -> (u32, u32) {
        (
            self.cue_batch * self.cue_grad_accum,
            self.role_batch * self.role_grad_accum,
        )
    }

    /// Flat `key = value` rendering, one field per line.
    pub fn render(&self) -> String {
        format!(
            "learning_rate = {}\n\
             warmup_fraction = {}\n\
             lora_dropout = {}\n\
             cue_steps = {}\n\
             cue_batch = {}\n\
             cue_grad_accum = {}\n\
             role_steps = {}\n\
             role_batch = {}\n\
             role_grad_accum = {}\n\
             cue_max_input_tokens = {}\n\
             cue_max_output_tokens = {}\n\
             role_max_input_tokens = {}\n\
             role_max_output_tokens = {}\n",
            self.learning_rate,
            self.warmup_fraction,
            self.lora_dropout,
            self.cue_steps,
            self.cue_batch,
            self.cue_grad_accum,
            self.role_steps,
            self.role_batch,
            self.role_grad_accum,
            self.cue_max_input_tokens,
            self.cue_max_output_tokens,
            self.role_max_input_tokens,
            self.role_max_output_tokens,
        )
    }
}

pub fn emit_training_config(config: &TrainingConfig, path: impl AsRef<Path>) -> io::Result<()> {
    fs::write(path, config.render())
}

// ---------------------------------------------------------------------------
// Training pairs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Cue,
    Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub speech_id: String,
    pub sample_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cue: Option<Vec<[usize; 2]>>,
}

/// One instruction pair: the prompt fed to the model and the desired
/// response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub input: String,
    pub output: String,
    #[serde(skip)]
    pub kind: Option<PairKind>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TruncationReport {
    pub cue_inputs: usize,
    pub cue_outputs: usize,
    pub role_inputs: usize,
    pub role_outputs: usize,
}

#[derive(Debug)]
pub struct TrainingSet {
    pub cue_pairs: Vec<PromptPair>,
    pub role_pairs: Vec<PromptPair>,
    pub truncation: TruncationReport,
}

/// Annotations whose cue anchors in the given sample, in corpus order.
pub fn annotations_anchored_at(speech: &Speech, anchor: usize) -> Vec<&Annotation> {
    speech
        .annotations
        .iter()
        .filter(|a| !a.cue.is_empty() && a.anchor() == anchor)
        .collect()
}

fn budgeted(
    counter: &dyn TokenCounter,
    text: String,
    limit: usize,
    truncated: &mut usize,
) -> String {
    let cut = counter.truncate(&text, limit);
    if cut.len() < text.len() {
        *truncated += 1;
    }
    cut
}

/// Serializes the corpus into instruction pairs: one cue pair per sample, one
/// role pair per annotation. Role inputs carry the gold cue exchange prefix.
pub fn build_training_set(
    corpus: &Corpus,
    counter: &dyn TokenCounter,
    config: &TrainingConfig,
) -> TrainingSet {
    let mut cue_pairs = Vec::new();
    let mut role_pairs = Vec::new();
    let mut truncation = TruncationReport::default();

    for speech in &corpus.speeches {
        for sample in speech.samples() {
            let anns = annotations_anchored_at(speech, sample.index);
            let input = budgeted(
                counter,
                build_cue_prompt(sample),
                config.cue_max_input_tokens,
                &mut truncation.cue_inputs,
            );
            let output = budgeted(
                counter,
                render_cue_target(sample, &anns),
                config.cue_max_output_tokens,
                &mut truncation.cue_outputs,
            );
            cue_pairs.push(PromptPair {
                input,
                output,
                kind: Some(PairKind::Cue),
                provenance: Provenance {
                    speech_id: speech.id.clone(),
                    sample_index: sample.index,
                    cue: None,
                },
            });
        }

        for ann in &speech.annotations {
            if ann.cue.is_empty() {
                continue;
            }
            let anchor = ann.anchor();
            let sample = &speech.samples()[anchor];
            let window = context_window(speech, anchor);
            let exchange = cue_exchange(
                &build_cue_prompt(sample),
                &render_cue_target(sample, &annotations_anchored_at(speech, anchor)),
            );
            let input = budgeted(
                counter,
                build_role_prompt(speech, anchor, &cue_words(ann, &window), &exchange),
                config.role_max_input_tokens,
                &mut truncation.role_inputs,
            );
            let output = budgeted(
                counter,
                render_role_target(ann, &window),
                config.role_max_output_tokens,
                &mut truncation.role_outputs,
            );
            role_pairs.push(PromptPair {
                input,
                output,
                kind: Some(PairKind::Role),
                provenance: Provenance {
                    speech_id: speech.id.clone(),
                    sample_index: anchor,
                    cue: Some(
                        ann.cue
                            .refs()
                            .iter()
                            .map(|r| [r.sample_index, r.element_index])
                            .collect(),
                    ),
                },
            });
        }
    }

    TrainingSet {
        cue_pairs,
        role_pairs,
        truncation,
    }
}

/// Writes pairs as line-delimited JSON records.
pub fn write_pairs_jsonl(pairs: &[PromptPair], path: impl AsRef<Path>) -> io::Result<()> {
    let mut out = String::new();
    for pair in pairs {
        out.push_str(&serde_json::to_string(pair).expect("pair serializes"));
        out.push('\n');
    }
    fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{RoleLabel, Span, TokenRef};
    use crate::fixtures::{fig_corpus, fig_speech};
    use std::collections::BTreeMap;

    #[test]
    fn cue_prompt_fills_sentence_slot() {
        let speech = Speech::new("s", "g", vec![vec!["Ja".into()]], vec![]);
        let prompt = build_cue_prompt(&speech.samples()[0]);
        assert!(prompt.contains("Sentence: Ja\n"));
        assert!(prompt.ends_with("Assistant:"));
        assert!(!prompt.contains("{sentence}"));
    }

    #[test]
    fn cue_prompt_repairs_trailing_colon() {
        let speech = Speech::new("s", "g", vec![vec!["Folgendes".into(), ":".into()]], vec![]);
        let prompt = build_cue_prompt(&speech.samples()[0]);
        assert!(prompt.contains("Sentence: Folgendes .\n"));
    }

    #[test]
    fn cue_target_matches_annotation_order() {
        let speech = fig_speech();
        let anns = annotations_anchored_at(&speech, 0);
        assert_eq!(
            render_cue_target(&speech.samples()[0], &anns),
            "Cues: [wissen], [Positionen]</s>"
        );
    }

    #[test]
    fn cue_target_without_annotations_is_unknown() {
        let speech = fig_speech();
        assert_eq!(
            render_cue_target(&speech.samples()[2], &[]),
            "Cues: #UNK#</s>"
        );
    }

    #[test]
    fn multi_word_cue_joins_with_commas() {
        let speech = Speech::new(
            "s",
            "g",
            vec![vec!["wir".into(), "kund".into(), "tun".into()]],
            vec![],
        );
        let ann =
            Annotation::cue_only(Span::new([TokenRef::new(0, 1), TokenRef::new(0, 2)]).unwrap());
        assert_eq!(
            render_cue_target(&speech.samples()[0], &[&ann]),
            "Cues: [kund, tun]</s>"
        );
    }

    #[test]
    fn role_prompt_prefixes_exchange_and_fills_slots() {
        let speech = fig_speech();
        let sample = &speech.samples()[0];
        let exchange = cue_exchange(
            &build_cue_prompt(sample),
            "Cues: [wissen], [Positionen]</s>",
        );
        let prompt = build_role_prompt(&speech, 0, &["wissen".to_string()], &exchange);
        assert!(prompt.starts_with("User: A cue is"));
        assert!(prompt.contains("Assistant: Cues: [wissen], [Positionen]</s>\nUser: Now I give"));
        assert!(prompt.contains("the cue 'wissen' you found"));
        assert!(prompt.ends_with("Assistant:"));
    }

    #[test]
    fn role_prompt_joins_multi_word_cue_slot() {
        let speech = fig_speech();
        let prompt = build_role_prompt(&speech, 0, &["kund".to_string(), "tun".to_string()], "X");
        assert!(prompt.contains("the cue 'kund, tun' you found"));
    }

    #[test]
    fn role_prompt_at_final_sample_has_single_sample_window() {
        let speech = fig_speech();
        let prompt = build_role_prompt(&speech, 2, &["übernehmen".to_string()], "X");
        assert!(prompt.contains("Text: Als Linke übernehmen wir Verantwortung .\n"));
    }

    #[test]
    fn role_target_renders_fixed_lines() {
        let speech = fig_speech();
        let window = context_window(&speech, 0);
        let target = render_role_target(&speech.annotations[0], &window);
        let lines: Vec<&str> = target.lines().collect();
        assert_eq!(lines.len(), 8);
        assert_eq!(lines[0], "cue: wissen");
        assert_eq!(lines[1], "ptc: #UNK#");
        assert_eq!(lines[7], "source: wir</s>");
        assert!(lines[6].starts_with("message: Neben, ihren,"));
        // The literal comma element renders between separators.
        assert!(lines[6].contains("Angebot, ,, sie"));
    }

    #[test]
    fn role_target_cue_only_annotation() {
        let speech = fig_speech();
        let window = context_window(&speech, 0);
        let target = render_role_target(&speech.annotations[1], &window);
        assert_eq!(
            target,
            "cue: Positionen\nptc: #UNK#\nevidence: #UNK#\nmedium: #UNK#\ntopic: #UNK#\n\
             addr: #UNK#\nmessage: #UNK#\nsource: #UNK#</s>"
        );
    }

    #[test]
    fn role_target_source_only() {
        let speech = fig_speech();
        let ann = Annotation::new(
            Span::new([TokenRef::new(0, 2)]).unwrap(),
            BTreeMap::from([(RoleLabel::Source, Span::new([TokenRef::new(0, 1)]).unwrap())]),
        );
        let window = context_window(&speech, 0);
        let target = render_role_target(&ann, &window);
        assert_eq!(
            target,
            "cue: wissen\nptc: #UNK#\nevidence: #UNK#\nmedium: #UNK#\ntopic: #UNK#\n\
             addr: #UNK#\nmessage: #UNK#\nsource: wir</s>"
        );
    }

    #[test]
    fn heuristic_counter_rounds_up() {
        let c = HeuristicTokenCounter;
        assert_eq!(c.count(""), 0);
        assert_eq!(c.count("ein"), 2); // ceil(1.4)
        assert_eq!(c.count("ein zwei"), 3); // ceil(2.8)
        assert_eq!(c.count("a b c d e"), 7); // 5 * 1.4
    }

    #[test]
    fn truncate_is_a_prefix_and_fits_budget() {
        let c = HeuristicTokenCounter;
        let text = "eins zwei drei vier fünf sechs sieben acht";
        for limit in 0..14 {
            let cut = c.truncate(text, limit);
            assert!(text.starts_with(&cut), "not a prefix: {cut:?}");
            assert!(c.count(&cut) <= limit);
        }
        assert_eq!(c.truncate(text, 100), text);
    }

    #[test]
    fn truncate_preserves_internal_whitespace() {
        let c = HeuristicTokenCounter;
        let text = "a  b\nc d";
        let cut = c.truncate(text, 3);
        assert_eq!(cut, "a  b");
    }

    #[test]
    fn training_set_counts_pairs_per_sample_and_annotation() {
        let corpus = fig_corpus();
        let set = build_training_set(&corpus, &HeuristicTokenCounter, &TrainingConfig::default());
        assert_eq!(set.cue_pairs.len(), 3);
        assert_eq!(set.role_pairs.len(), 3);
        assert_eq!(set.truncation, TruncationReport::default());
        for pair in set.cue_pairs.iter().chain(set.role_pairs.iter()) {
            assert!(pair.input.ends_with("Assistant:"));
            assert!(pair.output.ends_with(END_OF_SEQUENCE));
        }
    }

    #[test]
    fn training_set_empty_corpus() {
        let corpus = Corpus {
            split_name: "empty".into(),
            speeches: vec![],
        };
        let set = build_training_set(&corpus, &HeuristicTokenCounter, &TrainingConfig::default());
        assert!(set.cue_pairs.is_empty());
        assert!(set.role_pairs.is_empty());
    }

    #[test]
    fn training_set_reports_truncations() {
        let long_sample: Vec<String> = (0..400).map(|i| format!("w{i}")).collect();
        let speech = Speech::new("long", "g", vec![long_sample], vec![]);
        let corpus = Corpus {
            split_name: "t".into(),
            speeches: vec![speech],
        };
        let config = TrainingConfig::default();
        let set = build_training_set(&corpus, &HeuristicTokenCounter, &config);
        assert_eq!(set.truncation.cue_inputs, 1);
        let c = HeuristicTokenCounter;
        assert!(c.count(&set.cue_pairs[0].input) <= config.cue_max_input_tokens);
    }

    #[test]
    fn config_renders_every_field() {
        let rendered = TrainingConfig::default().render();
        assert!(rendered.contains("learning_rate = 0.0001\n"));
        assert!(rendered.contains("warmup_fraction = 0.03\n"));
        assert!(rendered.contains("lora_dropout = 0.05\n"));
        assert!(rendered.contains("cue_steps = 2000\n"));
        assert!(rendered.contains("role_steps = 2500\n"));
        assert!(rendered.contains("role_batch = 8\n"));
        assert!(rendered.contains("role_grad_accum = 2\n"));
        assert_eq!(TrainingConfig::default().effective_batches(), (16, 16));
    }

    #[test]
    fn template_hash_is_stable_across_calls() {
        assert_eq!(template_hash(), template_hash());
        assert_eq!(template_hash().len(), 64);
    }
}
