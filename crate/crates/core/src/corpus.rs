//! Data model for speeches, samples, elements, and annotations, plus corpus
//! loading, validation, and statistics.
//!
//! A corpus file is a single UTF-8 JSON document: `split_name` plus a list of
//! speeches, each carrying `samples` (lists of element strings) and
//! `annotations` (cue/role spans as `[sample_index, element_index]` pairs).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// True iff `text` contains no letter and no digit (Unicode-aware).
pub fn is_punctuation(text: &str) -> bool {
    !text.chars().any(char::is_alphanumeric)
}

/// A single word or punctuation mark, as split upstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Element {
    text: String,
    is_punct: bool,
}

impl Element {
    /// Builds an element; `is_punct` is always derived from the text, never
    /// taken from input.
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let is_punct = is_punctuation(&text);
        Element { text, is_punct }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn is_punct(&self) -> bool {
        self.is_punct
    }
}

/// A sentence-like unit of analysis within a speech.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub index: usize,
    elements: Vec<Element>,
}

impl Sample {
    pub fn new(index: usize, elements: Vec<Element>) -> Self {
        Sample { index, elements }
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// Addresses one element of one sample within a speech.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenRef {
    pub sample_index: usize,
    pub element_index: usize,
}

impl TokenRef {
    pub fn new(sample_index: usize, element_index: usize) -> Self {
        TokenRef {
            sample_index,
            element_index,
        }
    }
}

impl fmt::Display for TokenRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.sample_index, self.element_index)
    }
}

/// A non-empty, sorted, duplicate-free set of token references. Spans may be
/// non-contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    refs: Vec<TokenRef>,
}

impl Span {
    /// Sorts and deduplicates; returns `None` for an empty ref set.
    pub fn new(refs: impl IntoIterator<Item = TokenRef>) -> Option<Self> {
        let mut refs: Vec<TokenRef> = refs.into_iter().collect();
        refs.sort();
        refs.dedup();
        if refs.is_empty() {
            None
        } else {
            Some(Span { refs })
        }
    }

    pub fn refs(&self) -> &[TokenRef] {
        &self.refs
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn first(&self) -> TokenRef {
        self.refs[0]
    }

    pub fn contains(&self, r: &TokenRef) -> bool {
        self.refs.binary_search(r).is_ok()
    }

    /// Number of refs shared with `other`.
    pub fn overlap_count(&self, other: &Span) -> usize {
        self.refs.iter().filter(|r| other.contains(r)).count()
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.refs.iter().any(|r| other.contains(r))
    }

    pub fn union(&self, other: &Span) -> Span {
        Span::new(self.refs.iter().chain(other.refs.iter()).copied())
            .expect("union of non-empty spans is non-empty")
    }

    /// True iff all refs lie in a single sample.
    pub fn single_sample(&self) -> bool {
        self.refs
            .iter()
            .all(|r| r.sample_index == self.refs[0].sample_index)
    }
}

/// The seven role labels, declared in the order role lines are rendered in
/// model targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RoleLabel {
    Ptc,
    Evidence,
    Medium,
    Topic,
    Addr,
    Message,
    Source,
}

impl RoleLabel {
    pub const ALL: [RoleLabel; 7] = [
        RoleLabel::Ptc,
        RoleLabel::Evidence,
        RoleLabel::Medium,
        RoleLabel::Topic,
        RoleLabel::Addr,
        RoleLabel::Message,
        RoleLabel::Source,
    ];

    /// Corpus-file spelling.
    pub fn as_str(&self) -> &'static str {
        match self {
            RoleLabel::Addr => "Addr",
            RoleLabel::Evidence => "Evidence",
            RoleLabel::Medium => "Medium",
            RoleLabel::Message => "Message",
            RoleLabel::Source => "Source",
            RoleLabel::Topic => "Topic",
            RoleLabel::Ptc => "PTC",
        }
    }

    /// Lowercase spelling used in prompt output lines.
    pub fn prompt_key(&self) -> &'static str {
        match self {
            RoleLabel::Addr => "addr",
            RoleLabel::Evidence => "evidence",
            RoleLabel::Medium => "medium",
            RoleLabel::Message => "message",
            RoleLabel::Source => "source",
            RoleLabel::Topic => "topic",
            RoleLabel::Ptc => "ptc",
        }
    }

    pub fn from_corpus_str(s: &str) -> Option<RoleLabel> {
        RoleLabel::ALL.into_iter().find(|l| l.as_str() == s)
    }

    pub fn from_prompt_key(s: &str) -> Option<RoleLabel> {
        RoleLabel::ALL.into_iter().find(|l| l.prompt_key() == s)
    }
}

impl fmt::Display for RoleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One speech event: a mandatory cue span plus optional role spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub cue: Span,
    pub roles: BTreeMap<RoleLabel, Span>,
}

impl Annotation {
    pub fn new(cue: Span, roles: BTreeMap<RoleLabel, Span>) -> Self {
        Annotation { cue, roles }
    }

    pub fn cue_only(cue: Span) -> Self {
        Annotation {
            cue,
            roles: BTreeMap::new(),
        }
    }

    /// The sample holding the cue. Valid annotations have single-sample cues.
    pub fn anchor(&self) -> usize {
        self.cue.first().sample_index
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Speech {
    pub id: String,
    pub group: String,
    samples: Vec<Sample>,
    pub annotations: Vec<Annotation>,
}

impl Speech {
    /// Builds a speech from raw element strings; sample indices follow list
    /// position.
    pub fn new(
        id: impl Into<String>,
        group: impl Into<String>,
        samples: Vec<Vec<String>>,
        annotations: Vec<Annotation>,
    ) -> Self {
        let samples = samples
            .into_iter()
            .enumerate()
            .map(|(i, texts)| Sample::new(i, texts.into_iter().map(Element::new).collect()))
            .collect();
        Speech {
            id: id.into(),
            group: group.into(),
            samples,
            annotations,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn element(&self, r: &TokenRef) -> Option<&Element> {
        self.samples
            .get(r.sample_index)
            .and_then(|s| s.elements().get(r.element_index))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub split_name: String,
    pub speeches: Vec<Speech>,
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationCode {
    DuplicateSpeechId,
    EmptyElement,
    WhitespaceInElement,
    EmptySample,
    SampleIndexMismatch,
    EmptyCue,
    MultiSampleCue,
    RefOutOfRange,
    RoleBeyondWindow,
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationCode::DuplicateSpeechId => "DuplicateSpeechId",
            ViolationCode::EmptyElement => "EmptyElement",
            ViolationCode::WhitespaceInElement => "WhitespaceInElement",
            ViolationCode::EmptySample => "EmptySample",
            ViolationCode::SampleIndexMismatch => "SampleIndexMismatch",
            ViolationCode::EmptyCue => "EmptyCue",
            ViolationCode::MultiSampleCue => "MultiSampleCue",
            ViolationCode::RefOutOfRange => "RefOutOfRange",
            ViolationCode::RoleBeyondWindow => "RoleBeyondWindow",
        };
        f.write_str(s)
    }
}

/// One invariant failure; violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub code: ViolationCode,
    pub speech_id: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] speech {}: {}",
            self.code, self.speech_id, self.detail
        )
    }
}

fn violation(code: ViolationCode, speech_id: &str, detail: String) -> Violation {
    Violation {
        code,
        speech_id: speech_id.to_string(),
        detail,
    }
}

/// Checks every structural invariant; returns the empty list iff the corpus
/// is valid.
pub fn validate_corpus(corpus: &Corpus) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen_ids = HashSet::new();

    for speech in &corpus.speeches {
        let id = speech.id.as_str();
        if !seen_ids.insert(id) {
            out.push(violation(
                ViolationCode::DuplicateSpeechId,
                id,
                format!("speech id {id:?} occurs more than once"),
            ));
        }

        for sample in speech.samples() {
            if sample.is_empty() {
                out.push(violation(
                    ViolationCode::EmptySample,
                    id,
                    format!("sample {} has no elements", sample.index),
                ));
            }
            for (ei, el) in sample.elements().iter().enumerate() {
                if el.text().is_empty() {
                    out.push(violation(
                        ViolationCode::EmptyElement,
                        id,
                        format!("sample {} element {} is empty", sample.index, ei),
                    ));
                } else if el.text().chars().any(char::is_whitespace) {
                    out.push(violation(
                        ViolationCode::WhitespaceInElement,
                        id,
                        format!(
                            "sample {} element {} contains whitespace: {:?}",
                            sample.index,
                            ei,
                            el.text()
                        ),
                    ));
                }
            }
        }
        for (si, sample) in speech.samples().iter().enumerate() {
            if sample.index != si {
                out.push(violation(
                    ViolationCode::SampleIndexMismatch,
                    id,
                    format!("sample at position {si} carries index {}", sample.index),
                ));
            }
        }

        for (ai, ann) in speech.annotations.iter().enumerate() {
            if ann.cue.is_empty() {
                out.push(violation(
                    ViolationCode::EmptyCue,
                    id,
                    format!("annotation {ai} has an empty cue"),
                ));
                continue;
            }
            let mut refs_ok = true;
            for r in ann.cue.refs() {
                if speech.element(r).is_none() {
                    out.push(violation(
                        ViolationCode::RefOutOfRange,
                        id,
                        format!("annotation {ai} cue ref {r} does not resolve"),
                    ));
                    refs_ok = false;
                }
            }
            // Cues anchor in exactly one sample. Relax this check if
            // multi-sample gold cues ever show up in a release.
            if refs_ok && !ann.cue.single_sample() {
                out.push(violation(
                    ViolationCode::MultiSampleCue,
                    id,
                    format!("annotation {ai} cue spans more than one sample"),
                ));
                continue;
            }
            if !refs_ok {
                continue;
            }
            let anchor = ann.anchor();
            for (label, span) in &ann.roles {
                for r in span.refs() {
                    if speech.element(r).is_none() {
                        out.push(violation(
                            ViolationCode::RefOutOfRange,
                            id,
                            format!("annotation {ai} role {label} ref {r} does not resolve"),
                        ));
                    } else if r.sample_index < anchor || r.sample_index > anchor + 2 {
                        out.push(violation(
                            ViolationCode::RoleBeyondWindow,
                            id,
                            format!(
                                "annotation {ai} role {label} ref {r} outside samples {}..={}",
                                anchor,
                                anchor + 2
                            ),
                        ));
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// On-disk document layer
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CorpusDoc {
    split_name: String,
    speeches: Vec<SpeechDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpeechDoc {
    id: String,
    group: String,
    samples: Vec<Vec<String>>,
    annotations: Vec<AnnotationDoc>,
}

/// Serialized form of one annotation, shared between corpus files and
/// prediction documents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationDoc {
    pub cue: Vec<[usize; 2]>,
    #[serde(default)]
    pub roles: BTreeMap<String, Vec<[usize; 2]>>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed corpus document {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Malformed(String),
    #[error("corpus has {} validation violation(s): {}", .0.len(), format_violations(.0))]
    Invalid(Vec<Violation>),
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

fn pairs_to_span(pairs: &[[usize; 2]]) -> Option<Span> {
    // Re-sort and deduplicate defensively even though writers emit spans
    // sorted and duplicate-free.
    Span::new(pairs.iter().map(|p| TokenRef::new(p[0], p[1])))
}

fn span_to_pairs(span: &Span) -> Vec<[usize; 2]> {
    span.refs()
        .iter()
        .map(|r| [r.sample_index, r.element_index])
        .collect()
}

/// Converts a serialized annotation; `None` cue means the cue list was empty,
/// which is reported through validation, not here.
pub fn annotation_from_doc(doc: &AnnotationDoc) -> Result<Annotation, CorpusError> {
    let cue = pairs_to_span(&doc.cue).unwrap_or(Span { refs: Vec::new() });
    let mut roles = BTreeMap::new();
    for (name, pairs) in &doc.roles {
        let label = RoleLabel::from_corpus_str(name)
            .ok_or_else(|| CorpusError::Malformed(format!("unknown role label {name:?}")))?;
        if let Some(span) = pairs_to_span(pairs) {
            roles.insert(label, span);
        }
    }
    Ok(Annotation { cue, roles })
}

pub fn annotation_to_doc(ann: &Annotation) -> AnnotationDoc {
    AnnotationDoc {
        cue: span_to_pairs(&ann.cue),
        roles: ann
            .roles
            .iter()
            .map(|(label, span)| (label.as_str().to_string(), span_to_pairs(span)))
            .collect(),
    }
}

fn corpus_from_doc(doc: CorpusDoc) -> Result<Corpus, CorpusError> {
    let mut speeches = Vec::with_capacity(doc.speeches.len());
    for sd in doc.speeches {
        let annotations = sd
            .annotations
            .iter()
            .map(annotation_from_doc)
            .collect::<Result<Vec<_>, _>>()?;
        speeches.push(Speech::new(sd.id, sd.group, sd.samples, annotations));
    }
    Ok(Corpus {
        split_name: doc.split_name,
        speeches,
    })
}

fn corpus_to_doc(corpus: &Corpus) -> CorpusDoc {
    CorpusDoc {
        split_name: corpus.split_name.clone(),
        speeches: corpus
            .speeches
            .iter()
            .map(|s| SpeechDoc {
                id: s.id.clone(),
                group: s.group.clone(),
                samples: s
                    .samples()
                    .iter()
                    .map(|smp| {
                        smp.elements()
                            .iter()
                            .map(|e| e.text().to_string())
                            .collect()
                    })
                    .collect(),
                annotations: s.annotations.iter().map(annotation_to_doc).collect(),
            })
            .collect(),
    }
}

/// Loads a corpus file, recomputing punctuation flags and rejecting any
/// validation violation.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let doc: CorpusDoc = serde_json::from_str(&raw).map_err(|source| CorpusError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    let corpus = corpus_from_doc(doc)?;
    let violations = validate_corpus(&corpus);
    if violations.is_empty() {
        Ok(corpus)
    } else {
        Err(CorpusError::Invalid(violations))
    }
}

/// Serializes a corpus back to its file format.
pub fn corpus_to_json(corpus: &Corpus) -> String {
    let mut s = serde_json::to_string_pretty(&corpus_to_doc(corpus)).expect("corpus serializes");
    s.push('\n');
    s
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    fs::write(path, corpus_to_json(corpus)).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub speeches: usize,
    pub samples: usize,
    pub annotations: usize,
}

/// Speech/sample/annotation counts, overall and per parliamentary group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatsReport {
    pub split_name: String,
    pub total: Counts,
    pub groups: Vec<(String, Counts)>,
}

pub fn corpus_stats(corpus: &Corpus) -> StatsReport {
    let mut by_group: BTreeMap<&str, Counts> = BTreeMap::new();
    let mut total = Counts::default();
    for speech in &corpus.speeches {
        let c = by_group.entry(speech.group.as_str()).or_default();
        c.speeches += 1;
        c.samples += speech.samples().len();
        c.annotations += speech.annotations.len();
        total.speeches += 1;
        total.samples += speech.samples().len();
        total.annotations += speech.annotations.len();
    }
    let mut groups: Vec<(String, Counts)> = by_group
        .into_iter()
        .map(|(g, c)| (g.to_string(), c))
        .collect();
    groups.sort_by(|a, b| b.1.speeches.cmp(&a.1.speeches).then_with(|| a.0.cmp(&b.0)));
    StatsReport {
        split_name: corpus.split_name.clone(),
        total,
        groups,
    }
}

impl StatsReport {
    /// Plain-text table: one row per group, then the totals row.
    pub fn render(&self) -> String {
        let name_width = self
            .groups
            .iter()
            .map(|(g, _)| g.chars().count())
            .chain(["Group".len(), "Total".len()])
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = String::new();
        out.push_str(&format!("Split: {}\n", self.split_name));
        out.push_str(&format!(
            "{:<name_width$}  {:>8}  {:>8}  {:>11}\n",
            "Group", "Speeches", "Samples", "Annotations"
        ));
        for (group, c) in &self.groups {
            out.push_str(&format!(
                "{:<name_width$}  {:>8}  {:>8}  {:>11}\n",
                group, c.speeches, c.samples, c.annotations
            ));
        }
        out.push_str(&format!(
            "{:<name_width$}  {:>8}  {:>8}  {:>11}\n",
            "Total", self.total.speeches, self.total.samples, self.total.annotations
        ));
        out
    }
}

/// Refs of all samples in `speech`, in (sample, element) order. Handy for
/// building grounding contexts and tests.
pub fn all_refs(speech: &Speech) -> BTreeSet<TokenRef> {
    speech
        .samples()
        .iter()
        .flat_map(|s| (0..s.len()).map(move |ei| TokenRef::new(s.index, ei)))
        .collect()
}
