//! Proportional precision/recall/F1 over token spans.
//!
//! Predicted and gold annotations are paired greedily by shared cue tokens
//! (largest overlap first; ties go to the earliest gold, then the earliest
//! predicted annotation). Scores are token-level: matched-pair overlaps in
//! the numerator, all predicted (gold) tokens in the precision (recall)
//! denominator, so unmatched annotations only hurt. Arithmetic is exact
//! rational; rounding happens at rendering only.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use thiserror::Error;

use crate::corpus::{Annotation, Corpus, RoleLabel};

pub type Frac = Ratio<u64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subtask {
    Full,
    RolesOnly,
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subtask::Full => f.write_str("full"),
            Subtask::RolesOnly => f.write_str("roles"),
        }
    }
}

impl FromStr for Subtask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Subtask::Full),
            "roles" | "roles_only" => Ok(Subtask::RolesOnly),
            other => Err(format!("unknown subtask {other:?} (expected full|roles)")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("predictions reference unknown speech id {0:?}")]
    UnknownSpeech(String),
    #[error("speech {speech_id}: {detail}")]
    CueMismatch { speech_id: String, detail: String },
}

/// One greedily matched (predicted, gold) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchedPair {
    pub pred_index: usize,
    pub gold_index: usize,
    pub cue_overlap: usize,
}

/// Greedy maximum-cue-overlap matching; every annotation appears in at most
/// one pair, non-overlapping annotations stay unmatched.
pub fn match_annotations(pred: &[Annotation], gold: &[Annotation]) -> Vec<MatchedPair> {
    let mut candidates: Vec<MatchedPair> = Vec::new();
    for (gi, g) in gold.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            let overlap = p.cue.overlap_count(&g.cue);
            if overlap > 0 {
                candidates.push(MatchedPair {
                    pred_index: pi,
                    gold_index: gi,
                    cue_overlap: overlap,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.cue_overlap
            .cmp(&a.cue_overlap)
            .then(a.gold_index.cmp(&b.gold_index))
            .then(a.pred_index.cmp(&b.pred_index))
    });
    let mut pred_used = vec![false; pred.len()];
    let mut gold_used = vec![false; gold.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !pred_used[c.pred_index] && !gold_used[c.gold_index] {
            pred_used[c.pred_index] = true;
            gold_used[c.gold_index] = true;
            pairs.push(c);
        }
    }
    pairs
}

// ---------------------------------------------------------------------------
// Tallies
// ---------------------------------------------------------------------------

/// Raw token counts for one category; summable across speeches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairCounts {
    pub overlap: u64,
    pub pred_tokens: u64,
    pub gold_tokens: u64,
}

impl PairCounts {
    fn add(&mut self, other: PairCounts) {
        self.overlap += other.overlap;
        self.pred_tokens += other.pred_tokens;
        self.gold_tokens += other.gold_tokens;
    }
}

/// Exact integer tallies for one or more speeches.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Tallies {
    pub cues: PairCounts,
    pub roles: PairCounts,
    pub per_label: BTreeMap<RoleLabel, PairCounts>,
    pub matched_pairs: usize,
    pub unmatched_pred: usize,
    pub unmatched_gold: usize,
}

impl Tallies {
    pub fn merge(&mut self, other: &Tallies) {
        self.cues.add(other.cues);
        self.roles.add(other.roles);
        for (label, counts) in &other.per_label {
            self.per_label.entry(*label).or_default().add(*counts);
        }
        self.matched_pairs += other.matched_pairs;
        self.unmatched_pred += other.unmatched_pred;
        self.unmatched_gold += other.unmatched_gold;
    }
}

fn role_tokens(ann: &Annotation) -> u64 {
    ann.roles.values().map(|s| s.len() as u64).sum()
}

/// Pairs annotations and accumulates token counts for one speech.
pub fn tally_speech(
    pred: &[Annotation],
    gold: &[Annotation],
    subtask: Subtask,
    speech_id: &str,
) -> Result<Tallies, MetricsError> {
    let pairs = match subtask {
        Subtask::Full => match_annotations(pred, gold),
        Subtask::RolesOnly => match_by_identical_cue(pred, gold, speech_id)?,
    };

    let mut t = Tallies {
        matched_pairs: pairs.len(),
        unmatched_pred: pred.len() - pairs.len(),
        unmatched_gold: gold.len() - pairs.len(),
        ..Tallies::default()
    };
    for label in RoleLabel::ALL {
        t.per_label.insert(label, PairCounts::default());
    }

    for p in pred {
        t.cues.pred_tokens += p.cue.len() as u64;
        t.roles.pred_tokens += role_tokens(p);
        for (label, span) in &p.roles {
            t.per_label.get_mut(label).unwrap().pred_tokens += span.len() as u64;
        }
    }
    for g in gold {
        t.cues.gold_tokens += g.cue.len() as u64;
        t.roles.gold_tokens += role_tokens(g);
        for (label, span) in &g.roles {
            t.per_label.get_mut(label).unwrap().gold_tokens += span.len() as u64;
        }
    }
    for pair in &pairs {
        t.cues.overlap += pair.cue_overlap as u64;
        let p = &pred[pair.pred_index];
        let g = &gold[pair.gold_index];
        for label in RoleLabel::ALL {
            if let (Some(ps), Some(gs)) = (p.roles.get(&label), g.roles.get(&label)) {
                let overlap = ps.overlap_count(gs) as u64;
                t.roles.overlap += overlap;
                t.per_label.get_mut(&label).unwrap().overlap += overlap;
            }
        }
    }
    Ok(t)
}

/// Subtask 2 pairing: predictions carry the gold cues, so spans must match
/// exactly, one prediction per gold annotation.
fn match_by_identical_cue(
    pred: &[Annotation],
    gold: &[Annotation],
    speech_id: &str,
) -> Result<Vec<MatchedPair>, MetricsError> {
    let mut used = vec![false; pred.len()];
    let mut pairs = Vec::new();
    for (gi, g) in gold.iter().enumerate() {
        let found = pred
            .iter()
            .enumerate()
            .find(|(pi, p)| !used[*pi] && p.cue == g.cue);
        match found {
            Some((pi, p)) => {
                used[pi] = true;
                pairs.push(MatchedPair {
                    pred_index: pi,
                    gold_index: gi,
                    cue_overlap: p.cue.len(),
                });
            }
            None => {
                return Err(MetricsError::CueMismatch {
                    speech_id: speech_id.to_string(),
                    detail: format!("gold annotation {gi} has no prediction with the same cue"),
                })
            }
        }
    }
    if let Some(pi) = used.iter().position(|u| !u) {
        return Err(MetricsError::CueMismatch {
            speech_id: speech_id.to_string(),
            detail: format!("prediction {pi} has no gold annotation with the same cue"),
        });
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CategoryScores {
    pub precision: Frac,
    pub recall: Frac,
    pub f1: Frac,
}

/// Precision (or recall): overlap over own tokens; 0 when only the other
/// side has tokens, 1 when both sides are empty.
fn proportional(overlap: u64, own_tokens: u64, other_tokens: u64) -> Frac {
    if own_tokens == 0 {
        Ratio::from_integer(u64::from(other_tokens == 0))
    } else {
        Ratio::new(overlap, own_tokens)
    }
}

/// Harmonic mean of two ratios, 0 when both are 0. Cross-multiplied in u128
/// so large token counts cannot overflow.
fn harmonic_mean(p: Frac, r: Frac) -> Frac {
    let (pn, pd) = (*p.numer() as u128, *p.denom() as u128);
    let (rn, rd) = (*r.numer() as u128, *r.denom() as u128);
    let den = pn * rd + rn * pd;
    if den == 0 {
        return Ratio::from_integer(0);
    }
    let reduced = Ratio::<u128>::new(2 * pn * rn, den);
    Ratio::new(*reduced.numer() as u64, *reduced.denom() as u64)
}

impl CategoryScores {
    pub fn from_counts(c: PairCounts) -> CategoryScores {
        let precision = proportional(c.overlap, c.pred_tokens, c.gold_tokens);
        let recall = proportional(c.overlap, c.gold_tokens, c.pred_tokens);
        CategoryScores {
            precision,
            recall,
            f1: harmonic_mean(precision, recall),
        }
    }
}

/// Renders a ratio in `[0, 1]` with three decimals, rounding half up.
pub fn render_3dp(x: Frac) -> String {
    let n = *x.numer();
    let d = *x.denom();
    let thousandths = (2000 * n + d) / (2 * d);
    format!("{}.{:03}", thousandths / 1000, thousandths % 1000)
}

/// Per-category and per-label proportional scores for one subtask run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreReport {
    pub subtask: Subtask,
    pub cues: Option<CategoryScores>,
    pub roles: CategoryScores,
    pub cues_and_roles: Option<CategoryScores>,
    pub per_label: BTreeMap<RoleLabel, CategoryScores>,
    pub matched_pairs: usize,
    pub unmatched_pred: usize,
    pub unmatched_gold: usize,
}

impl Tallies {
    pub fn into_report(self, subtask: Subtask) -> ScoreReport {
        let mut pooled = self.cues;
        pooled.add(self.roles);
        let (cues, cues_and_roles) = match subtask {
            Subtask::Full => (
                Some(CategoryScores::from_counts(self.cues)),
                Some(CategoryScores::from_counts(pooled)),
            ),
            Subtask::RolesOnly => (None, None),
        };
        ScoreReport {
            subtask,
            cues,
            roles: CategoryScores::from_counts(self.roles),
            cues_and_roles,
            per_label: self
                .per_label
                .into_iter()
                .map(|(label, counts)| (label, CategoryScores::from_counts(counts)))
                .collect(),
            matched_pairs: self.matched_pairs,
            unmatched_pred: self.unmatched_pred,
            unmatched_gold: self.unmatched_gold,
        }
    }
}

/// Scores one speech's predictions against its gold annotations.
pub fn proportional_scores(
    pred: &[Annotation],
    gold: &[Annotation],
    subtask: Subtask,
) -> Result<ScoreReport, MetricsError> {
    Ok(tally_speech(pred, gold, subtask, "<single>")?.into_report(subtask))
}

/// Scores a predictions document against a gold corpus. Speeches missing
/// from the document count as empty predictions; unknown speech ids are
/// rejected.
pub fn score_corpus(
    predictions: &BTreeMap<String, Vec<Annotation>>,
    gold: &Corpus,
    subtask: Subtask,
) -> Result<ScoreReport, MetricsError> {
    for id in predictions.keys() {
        if !gold.speeches.iter().any(|s| &s.id == id) {
            return Err(MetricsError::UnknownSpeech(id.clone()));
        }
    }
    let mut total = Tallies::default();
    for speech in &gold.speeches {
        let empty = Vec::new();
        let pred = predictions.get(&speech.id).unwrap_or(&empty);
        let t = tally_speech(pred, &speech.annotations, subtask, &speech.id)?;
        total.merge(&t);
    }
    Ok(total.into_report(subtask))
}

fn row(name: &str, s: &CategoryScores) -> String {
    format!(
        "{:<14} {:>9}  {:>6}  {:>6}\n",
        name,
        render_3dp(s.precision),
        render_3dp(s.recall),
        render_3dp(s.f1)
    )
}

/// Plain-text table: category rows, per-label rows, match counts.
pub fn render_report(report: &ScoreReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:>9}  {:>6}  {:>6}\n",
        "Category", "Precision", "Recall", "F1"
    ));
    if let Some(cues) = &report.cues {
        out.push_str(&row("Cues", cues));
    }
    out.push_str(&row("Roles", &report.roles));
    if let Some(pooled) = &report.cues_and_roles {
        out.push_str(&row("Cues & Roles", pooled));
    }
    out.push('\n');
    out.push_str(&format!(
        "{:<14} {:>9}  {:>6}  {:>6}\n",
        "Role label", "Precision", "Recall", "F1"
    ));
    for (label, scores) in &report.per_label {
        out.push_str(&row(label.as_str(), scores));
    }
    out.push_str(&format!(
        "\nMatched pairs: {} (unmatched predicted: {}, unmatched gold: {})\n",
        report.matched_pairs, report.unmatched_pred, report.unmatched_gold
    ));
    out
}

fn scores_json(s: &CategoryScores) -> serde_json::Value {
    let frac = |x: Frac| {
        serde_json::json!({
            "num": *x.numer(),
            "den": *x.denom(),
            "rendered": render_3dp(x),
        })
    };
    serde_json::json!({
        "precision": frac(s.precision),
        "recall": frac(s.recall),
        "f1": frac(s.f1),
    })
}

/// Machine-readable report with exact numerator/denominator pairs.
pub fn report_to_json(report: &ScoreReport) -> serde_json::Value {
    let mut categories = serde_json::Map::new();
    if let Some(cues) = &report.cues {
        categories.insert("cues".into(), scores_json(cues));
    }
    categories.insert("roles".into(), scores_json(&report.roles));
    if let Some(pooled) = &report.cues_and_roles {
        categories.insert("cues_and_roles".into(), scores_json(pooled));
    }
    let labels: serde_json::Map<String, serde_json::Value> = report
        .per_label
        .iter()
        .map(|(label, s)| (label.as_str().to_string(), scores_json(s)))
        .collect();
    serde_json::json!({
        "subtask": report.subtask.to_string(),
        "categories": categories,
        "per_label": labels,
        "matched_pairs": report.matched_pairs,
        "unmatched_pred": report.unmatched_pred,
        "unmatched_gold": report.unmatched_gold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Span, TokenRef};
    use crate::fixtures::fig_speech;
    use std::collections::BTreeMap as Map;

    fn ann(cue: &[(usize, usize)], roles: &[(RoleLabel, Vec<(usize, usize)>)]) -> Annotation {
        Annotation::new(
            Span::new(cue.iter().map(|&(s, e)| TokenRef::new(s, e))).unwrap(),
            roles
                .iter()
                .map(|(l, refs)| {
                    (
                        *l,
                        Span::new(refs.iter().map(|&(s, e)| TokenRef::new(s, e))).unwrap(),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn exact_cue_match_pairs_once() {
        let pred = vec![ann(&[(0, 2)], &[])];
        let gold = vec![ann(&[(0, 2)], &[])];
        let pairs = match_annotations(&pred, &gold);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].cue_overlap, 1);
    }

    #[test]
    fn disjoint_cues_do_not_pair() {
        let pred = vec![ann(&[(0, 2)], &[])];
        let gold = vec![ann(&[(0, 7)], &[])];
        assert!(match_annotations(&pred, &gold).is_empty());
    }

    #[test]
    fn larger_overlap_wins() {
        // Two predictions overlap the one gold cue over 5 tokens; the one
        // sharing two tokens pairs, the other stays unmatched.
        let gold = vec![ann(&[(0, 0), (0, 1), (0, 2), (0, 3), (0, 4)], &[])];
        let pred = vec![ann(&[(0, 4)], &[]), ann(&[(0, 0), (0, 1)], &[])];
        let pairs = match_annotations(&pred, &gold);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].pred_index, 1);
        assert_eq!(pairs[0].cue_overlap, 2);
    }

    #[test]
    fn derived_roles_example() {
        let pred = vec![ann(
            &[(0, 0)],
            &[(RoleLabel::Message, vec![(0, 7), (0, 8), (0, 9)])],
        )];
        let gold = vec![ann(
            &[(0, 0)],
            &[(RoleLabel::Message, vec![(0, 5), (0, 6), (0, 7), (0, 8)])],
        )];
        let report = proportional_scores(&pred, &gold, Subtask::Full).unwrap();
        assert_eq!(report.roles.precision, Ratio::new(2, 3));
        assert_eq!(report.roles.recall, Ratio::new(1, 2));
        assert_eq!(report.roles.f1, Ratio::new(4, 7));
        assert_eq!(render_3dp(report.roles.f1), "0.571");
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let speech = fig_speech();
        let report =
            proportional_scores(&speech.annotations, &speech.annotations, Subtask::Full).unwrap();
        let one = Ratio::from_integer(1);
        for s in [
            report.cues.unwrap(),
            report.roles,
            report.cues_and_roles.unwrap(),
        ] {
            assert_eq!((s.precision, s.recall, s.f1), (one, one, one));
        }
        for s in report.per_label.values() {
            assert_eq!(s.f1, one);
        }
    }

    #[test]
    fn empty_predictions_score_zero() {
        let speech = fig_speech();
        let report = proportional_scores(&[], &speech.annotations, Subtask::Full).unwrap();
        let zero = Ratio::from_integer(0);
        assert_eq!(report.cues.unwrap().precision, zero);
        assert_eq!(report.cues.unwrap().recall, zero);
        assert_eq!(report.cues.unwrap().f1, zero);
        assert_eq!(render_3dp(report.roles.f1), "0.000");
    }

    #[test]
    fn empty_vs_empty_scores_one() {
        let report = proportional_scores(&[], &[], Subtask::Full).unwrap();
        let one = Ratio::from_integer(1);
        assert_eq!(report.cues.unwrap().f1, one);
        assert_eq!(report.roles.f1, one);
        assert_eq!(report.cues_and_roles.unwrap().f1, one);
    }

    #[test]
    fn roles_only_requires_identical_cues() {
        let gold = vec![ann(&[(0, 2)], &[])];
        let pred = vec![ann(&[(0, 3)], &[])];
        let err = proportional_scores(&pred, &gold, Subtask::RolesOnly).unwrap_err();
        assert!(matches!(err, MetricsError::CueMismatch { .. }));
    }

    #[test]
    fn roles_only_report_has_single_category() {
        let gold = vec![ann(&[(0, 2)], &[(RoleLabel::Source, vec![(0, 1)])])];
        let report = proportional_scores(&gold.clone(), &gold, Subtask::RolesOnly).unwrap();
        assert!(report.cues.is_none());
        assert!(report.cues_and_roles.is_none());
        assert_eq!(report.roles.f1, Ratio::from_integer(1));
        let rendered = render_report(&report);
        assert!(!rendered.contains("Cues"));
        assert!(rendered.contains("Roles"));
    }

    #[test]
    fn rendering_rounds_half_up_to_three_decimals() {
        assert_eq!(render_3dp(Ratio::new(8, 9)), "0.889");
        assert_eq!(render_3dp(Ratio::new(1, 2)), "0.500");
        assert_eq!(render_3dp(Ratio::new(1, 1)), "1.000");
        assert_eq!(render_3dp(Ratio::from_integer(0)), "0.000");
        assert_eq!(render_3dp(Ratio::new(1, 1600)), "0.001"); // 0.000625 rounds up
        assert_eq!(render_3dp(Ratio::new(1, 2000)), "0.001"); // exact half rounds up
        assert_eq!(render_3dp(Ratio::new(1, 3000)), "0.000");
    }

    #[test]
    fn report_row_renders_three_columns() {
        let speech = fig_speech();
        let report =
            proportional_scores(&speech.annotations, &speech.annotations, Subtask::Full).unwrap();
        let rendered = render_report(&report);
        assert!(rendered.contains("1.000   1.000   1.000"));
        assert!(rendered.contains("Cues & Roles"));
    }

    #[test]
    fn unknown_speech_id_is_rejected() {
        let speech = fig_speech();
        let corpus = Corpus {
            split_name: "t".into(),
            speeches: vec![speech],
        };
        let mut predictions = Map::new();
        predictions.insert("nope".to_string(), Vec::new());
        let err = score_corpus(&predictions, &corpus, Subtask::Full).unwrap_err();
        assert_eq!(err, MetricsError::UnknownSpeech("nope".into()));
    }

    #[test]
    fn missing_speech_counts_as_empty_predictions() {
        let speech = fig_speech();
        let corpus = Corpus {
            split_name: "t".into(),
            speeches: vec![speech],
        };
        let report = score_corpus(&Map::new(), &corpus, Subtask::Full).unwrap();
        assert_eq!(report.cues.unwrap().recall, Ratio::from_integer(0));
        assert_eq!(report.unmatched_gold, 3);
    }
}
