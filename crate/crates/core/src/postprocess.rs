//! Parsing of raw model output and grounding of emitted words back onto
//! corpus tokens.
//!
//! Output that violates the strict format degrades to "nothing found" rather
//! than failing. Grounding walks the emitted words in order: exact unclaimed
//! occurrences first, then occurrences at Levenshtein distance exactly 1,
//! dropping words that match nothing. Ambiguous occurrences are scored by how
//! many of the four surrounding elements appear in the emitted word list;
//! ties go to the leftmost occurrence. Matching is case-sensitive: German
//! capitalization carries meaning and prompts echo corpus casing.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::corpus::{is_punctuation, Annotation, RoleLabel, Span, Speech, TokenRef};
use crate::preprocess::{context_window, sample_text};
use crate::prompt::{END_OF_SEQUENCE, UNKNOWN_MARKER};

/// The element sequence a model answer is grounded against: the anchor sample
/// for cues, the three-sample window for roles. Texts are exactly the texts
/// that filled the prompt slot (including the colon repair).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundingContext {
    items: Vec<(TokenRef, String)>,
}

impl GroundingContext {
    pub fn new(items: Vec<(TokenRef, String)>) -> Self {
        GroundingContext { items }
    }

    /// Context over a single sample, as used for cue grounding.
    pub fn for_sample(speech: &Speech, sample_index: usize) -> Self {
        let sample = &speech.samples()[sample_index];
        let st = sample_text(sample);
        GroundingContext {
            items: (0..sample.len())
                .map(|ei| {
                    (
                        TokenRef::new(sample_index, ei),
                        st.element_text(ei).to_string(),
                    )
                })
                .collect(),
        }
    }

    /// Context over the anchor sample plus the next two samples, as used for
    /// role grounding.
    pub fn for_window(speech: &Speech, anchor: usize) -> Self {
        let window = context_window(speech, anchor);
        GroundingContext {
            items: window
                .offsets
                .iter()
                .map(|(r, range)| (*r, window.text[range.clone()].to_string()))
                .collect(),
        }
    }

    pub fn items(&self) -> &[(TokenRef, String)] {
        &self.items
    }

    pub fn words(&self, span: &Span) -> Vec<String> {
        self.items
            .iter()
            .filter(|(r, _)| span.contains(r))
            .map(|(_, t)| t.clone())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Output parsing
// ---------------------------------------------------------------------------

/// Cue groups extracted from a cue-model answer; empty means no cues.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedCueOutput {
    pub cue_groups: Vec<Vec<String>>,
}

/// Role word lists extracted from a role-model answer. An absent label means
/// the model answered `#UNK#` for it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedRoleOutput {
    pub cue_echo: Vec<String>,
    pub roles: BTreeMap<RoleLabel, Vec<String>>,
}

fn strip_end_marker(text: &str) -> &str {
    let trimmed = text.trim();
    trimmed
        .strip_suffix(END_OF_SEQUENCE)
        .map(str::trim)
        .unwrap_or(trimmed)
}

/// Splits a rendered word list on `", "`. A lone comma between separators is
/// the literal comma element (rendered as `", ,,"`).
fn split_words(value: &str) -> Option<Vec<String>> {
    let words: Vec<String> = value.split(", ").map(str::to_string).collect();
    if words.iter().any(String::is_empty) {
        None
    } else {
        Some(words)
    }
}

/// Parses `Cues: ...`. Anything outside the strict format, including the
/// `#UNK#` marker, yields an empty group list.
pub fn parse_cue_output(text: &str) -> ParsedCueOutput {
    let body = strip_end_marker(text);
    let Some(rest) = body.strip_prefix("Cues: ") else {
        return ParsedCueOutput::default();
    };
    if rest == UNKNOWN_MARKER {
        return ParsedCueOutput::default();
    }
    let mut cue_groups = Vec::new();
    let mut remaining = rest;
    loop {
        let Some(after_open) = remaining.strip_prefix('[') else {
            return ParsedCueOutput::default();
        };
        let Some(close) = after_open.find(']') else {
            return ParsedCueOutput::default();
        };
        let Some(words) = split_words(&after_open[..close]) else {
            return ParsedCueOutput::default();
        };
        cue_groups.push(words);
        remaining = &after_open[close + 1..];
        if remaining.is_empty() {
            return ParsedCueOutput { cue_groups };
        }
        let Some(next) = remaining.strip_prefix(", ") else {
            return ParsedCueOutput::default();
        };
        remaining = next;
    }
}

/// Parses the eight-line role answer. Unknown labels, duplicate labels, or a
/// missing cue line degrade the whole output to all-absent.
pub fn parse_role_output(text: &str) -> ParsedRoleOutput {
    let body = strip_end_marker(text);
    let mut cue_echo: Option<Vec<String>> = None;
    let mut roles: BTreeMap<RoleLabel, Vec<String>> = BTreeMap::new();
    let mut seen: BTreeSet<&str> = BTreeSet::new();

    for line in body.lines() {
        let Some((label, value)) = line.split_once(": ") else {
            return ParsedRoleOutput::default();
        };
        if !seen.insert(label) {
            return ParsedRoleOutput::default();
        }
        if label == "cue" {
            if value == UNKNOWN_MARKER {
                continue;
            }
            match split_words(value) {
                Some(words) => cue_echo = Some(words),
                None => return ParsedRoleOutput::default(),
            }
            continue;
        }
        let Some(role) = RoleLabel::from_prompt_key(label) else {
            return ParsedRoleOutput::default();
        };
        if value == UNKNOWN_MARKER {
            continue;
        }
        match split_words(value) {
            Some(words) => {
                roles.insert(role, words);
            }
            None => return ParsedRoleOutput::default(),
        }
    }
    if !seen.contains("cue") {
        return ParsedRoleOutput::default();
    }
    ParsedRoleOutput {
        cue_echo: cue_echo.unwrap_or_default(),
        roles,
    }
}

// ---------------------------------------------------------------------------
// Grounding
// ---------------------------------------------------------------------------

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Grounds emitted words onto unclaimed context elements. Returns `None` when
/// every word had to be dropped.
pub fn ground_words(
    words: &[String],
    ctx: &GroundingContext,
    claimed: &mut BTreeSet<TokenRef>,
) -> Option<Span> {
    let word_set: BTreeSet<&str> = words.iter().map(String::as_str).collect();
    let items = ctx.items();
    let mut refs = Vec::new();

    for word in words {
        let unclaimed = |(_, (r, _)): &(usize, &(TokenRef, String))| !claimed.contains(r);
        let mut candidates: Vec<usize> = items
            .iter()
            .enumerate()
            .filter(|(_, (_, t))| t == word)
            .filter(unclaimed)
            .map(|(p, _)| p)
            .collect();
        if candidates.is_empty() {
            candidates = items
                .iter()
                .enumerate()
                .filter(|(_, (_, t))| levenshtein(t, word) == 1)
                .filter(unclaimed)
                .map(|(p, _)| p)
                .collect();
        }
        let chosen = match candidates.len() {
            0 => continue,
            1 => candidates[0],
            _ => {
                // Score by surrounding elements (two left, two right) whose
                // text appears anywhere in the emitted list; leftmost wins a
                // tie.
                let score = |p: usize| -> usize {
                    let lo = p.saturating_sub(2);
                    let hi = (p + 2).min(items.len().saturating_sub(1));
                    (lo..=hi)
                        .filter(|&q| q != p)
                        .filter(|&q| word_set.contains(items[q].1.as_str()))
                        .count()
                };
                candidates
                    .into_iter()
                    .map(|p| (p, score(p)))
                    .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                    .map(|(p, _)| p)
                    .unwrap()
            }
        };
        let token = items[chosen].0;
        claimed.insert(token);
        refs.push(token);
    }
    Span::new(refs)
}

/// Merges cues that share a token, transitively, into single cues. Output
/// spans are pairwise disjoint and ordered by first token.
pub fn merge_overlapping_cues(spans: &[Span]) -> Vec<Span> {
    merge_groups(spans)
        .into_iter()
        .map(|group| {
            group
                .iter()
                .skip(1)
                .fold(spans[group[0]].clone(), |acc, &i| acc.union(&spans[i]))
        })
        .collect()
}

/// Partitions span indices into transitive overlap groups. Groups come out
/// ordered by the first token of their merged span; indices within a group
/// keep input order.
fn merge_groups(spans: &[Span]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, span) in spans.iter().enumerate() {
        let (mut touching, rest): (Vec<Vec<usize>>, Vec<Vec<usize>>) = groups
            .drain(..)
            .partition(|g| g.iter().any(|&j| spans[j].overlaps(span)));
        let mut merged: Vec<usize> = touching.drain(..).flatten().collect();
        merged.push(i);
        merged.sort_unstable();
        groups = rest;
        groups.push(merged);
    }
    groups.sort_by_key(|g| {
        g.iter()
            .map(|&i| spans[i].first())
            .min()
            .expect("groups are non-empty")
    });
    groups
}

/// Adds every punctuation element whose immediate neighbours are both in the
/// span, repeating until nothing changes. Non-punctuation gaps are never
/// bridged.
pub fn include_surrounded_punctuation(span: &Span, ctx: &GroundingContext) -> Span {
    let items = ctx.items();
    let mut refs: BTreeSet<TokenRef> = span.refs().iter().copied().collect();
    loop {
        let mut added = false;
        for p in 1..items.len().saturating_sub(1) {
            let (r, text) = &items[p];
            if refs.contains(r) || !is_punctuation(text) {
                continue;
            }
            if refs.contains(&items[p - 1].0) && refs.contains(&items[p + 1].0) {
                refs.insert(*r);
                added = true;
            }
        }
        if !added {
            break;
        }
    }
    Span::new(refs).expect("span only grows")
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PostprocessError {
    #[error("expected one role output per grounded cue: {cues} cue(s), {outputs} output(s)")]
    RoleArityMismatch { cues: usize, outputs: usize },
}

/// Turns parsed model output for one sample into predicted annotations.
///
/// Cue groups are grounded on the anchor sample, merged when they overlap
/// (their role word lists are concatenated label-wise), and each surviving
/// annotation's roles are grounded on the window with a claimed set shared
/// across that annotation's roles. Roles that ground to nothing are omitted;
/// cue groups that ground to nothing are dropped along with their role
/// output.
pub fn assemble_prediction(
    anchor_ctx: &GroundingContext,
    window_ctx: &GroundingContext,
    parsed_cue: &ParsedCueOutput,
    role_outputs: &[ParsedRoleOutput],
) -> Result<Vec<Annotation>, PostprocessError> {
    let mut grounded: Vec<(Span, &ParsedRoleOutput)> = Vec::new();
    let mut grounded_spans: Vec<Span> = Vec::new();
    let mut dropped = 0usize;
    for (gi, group) in parsed_cue.cue_groups.iter().enumerate() {
        let mut claimed = BTreeSet::new();
        match ground_words(group, anchor_ctx, &mut claimed) {
            Some(span) => {
                let oi = gi - dropped;
                let Some(output) = role_outputs.get(oi) else {
                    return Err(PostprocessError::RoleArityMismatch {
                        cues: parsed_cue.cue_groups.len() - dropped,
                        outputs: role_outputs.len(),
                    });
                };
                grounded.push((span.clone(), output));
                grounded_spans.push(span);
            }
            None => dropped += 1,
        }
    }
    if role_outputs.len() != grounded.len() {
        return Err(PostprocessError::RoleArityMismatch {
            cues: grounded.len(),
            outputs: role_outputs.len(),
        });
    }

    let mut annotations = Vec::new();
    for group in merge_groups(&grounded_spans) {
        let cue = group
            .iter()
            .skip(1)
            .fold(grounded[group[0]].0.clone(), |acc, &i| {
                acc.union(&grounded[i].0)
            });
        let mut merged_words: BTreeMap<RoleLabel, Vec<String>> = BTreeMap::new();
        for &i in &group {
            for (label, words) in &grounded[i].1.roles {
                merged_words
                    .entry(*label)
                    .or_default()
                    .extend(words.iter().cloned());
            }
        }

        let mut claimed = BTreeSet::new();
        let mut roles = BTreeMap::new();
        for label in RoleLabel::ALL {
            let Some(words) = merged_words.get(&label) else {
                continue;
            };
            if let Some(span) = ground_words(words, window_ctx, &mut claimed) {
                roles.insert(label, include_surrounded_punctuation(&span, window_ctx));
            }
        }
        annotations.push(Annotation::new(cue, roles));
    }
    Ok(annotations)
}
