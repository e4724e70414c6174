//! Two-step prediction over a corpus: cue prompts first, then one role
//! prompt per grounded cue with the cue exchange prepended.
//!
//! Backend calls run on a bounded thread pool; responses are collected back
//! into request order before any postprocessing, so the prediction document
//! is byte-identical regardless of the concurrency limit.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, CompletionBackend, CompletionRequest, CompletionResponse};
use crate::corpus::{
    annotation_from_doc, annotation_to_doc, Annotation, AnnotationDoc, Corpus, CorpusError, Speech,
};
use crate::metrics::Subtask;
use crate::postprocess::{
    assemble_prediction, ground_words, include_surrounded_punctuation, parse_cue_output,
    parse_role_output, GroundingContext, PostprocessError,
};
use crate::prompt::{
    annotations_anchored_at, build_cue_prompt, build_role_prompt, cue_exchange, cue_words,
    render_cue_target, template_hash,
};

pub type Predictions = BTreeMap<String, Vec<Annotation>>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn complete_all(
    pool: &rayon::ThreadPool,
    backend: &dyn CompletionBackend,
    requests: &[CompletionRequest],
) -> Result<Vec<CompletionResponse>, BackendError> {
    pool.install(|| {
        requests
            .par_iter()
            .map(|req| backend.complete(req))
            .collect()
    })
}

/// Full-annotation prediction for one speech: cue round, grounding, role
/// round, assembly.
fn predict_speech_full(
    speech: &Speech,
    backend: &dyn CompletionBackend,
    pool: &rayon::ThreadPool,
) -> Result<Vec<Annotation>, PipelineError> {
    let cue_prompts: Vec<String> = speech.samples().iter().map(build_cue_prompt).collect();
    let cue_requests: Vec<CompletionRequest> = cue_prompts
        .iter()
        .map(|p| CompletionRequest::cue(p.clone()))
        .collect();
    let cue_responses = complete_all(pool, backend, &cue_requests)?;

    // Ground each sample's cue groups to know what to ask roles for.
    let mut role_requests = Vec::new();
    let mut per_sample = Vec::with_capacity(speech.samples().len());
    for (sample, response) in speech.samples().iter().zip(&cue_responses) {
        let anchor = sample.index;
        let anchor_ctx = GroundingContext::for_sample(speech, anchor);
        let parsed = parse_cue_output(&response.text);
        let mut grounded_words: Vec<Vec<String>> = Vec::new();
        for group in &parsed.cue_groups {
            let mut claimed = std::collections::BTreeSet::new();
            if let Some(span) = ground_words(group, &anchor_ctx, &mut claimed) {
                grounded_words.push(anchor_ctx.words(&span));
            }
        }
        let exchange = cue_exchange(&cue_prompts[anchor], &response.text);
        for words in &grounded_words {
            role_requests.push(CompletionRequest::role(build_role_prompt(
                speech, anchor, words, &exchange,
            )));
        }
        per_sample.push((anchor, anchor_ctx, parsed, grounded_words.len()));
    }

    let role_responses = complete_all(pool, backend, &role_requests)?;

    let mut annotations = Vec::new();
    let mut cursor = 0usize;
    for (anchor, anchor_ctx, parsed, n_grounded) in per_sample {
        let outputs: Vec<_> = role_responses[cursor..cursor + n_grounded]
            .iter()
            .map(|r| parse_role_output(&r.text))
            .collect();
        cursor += n_grounded;
        let window_ctx = GroundingContext::for_window(speech, anchor);
        annotations.extend(assemble_prediction(
            &anchor_ctx,
            &window_ctx,
            &parsed,
            &outputs,
        )?);
    }
    Ok(annotations)
}

/// Role-detection prediction for one speech: gold cues are kept, the cue
/// exchange is rendered from gold, only roles come from the model.
fn predict_speech_roles_only(
    speech: &Speech,
    backend: &dyn CompletionBackend,
    pool: &rayon::ThreadPool,
) -> Result<Vec<Annotation>, PipelineError> {
    let mut requests = Vec::new();
    let mut order = Vec::new();
    for (ai, ann) in speech.annotations.iter().enumerate() {
        let anchor = ann.anchor();
        let sample = &speech.samples()[anchor];
        let window = crate::preprocess::context_window(speech, anchor);
        let exchange = cue_exchange(
            &build_cue_prompt(sample),
            &render_cue_target(sample, &annotations_anchored_at(speech, anchor)),
        );
        requests.push(CompletionRequest::role(build_role_prompt(
            speech,
            anchor,
            &cue_words(ann, &window),
            &exchange,
        )));
        order.push(ai);
    }

    let responses = complete_all(pool, backend, &requests)?;

    let mut annotations = Vec::new();
    for (ai, response) in order.into_iter().zip(&responses) {
        let gold = &speech.annotations[ai];
        let window_ctx = GroundingContext::for_window(speech, gold.anchor());
        let parsed = parse_role_output(&response.text);
        let mut claimed = std::collections::BTreeSet::new();
        let mut roles = BTreeMap::new();
        for label in crate::corpus::RoleLabel::ALL {
            let Some(words) = parsed.roles.get(&label) else {
                continue;
            };
            if let Some(span) = ground_words(words, &window_ctx, &mut claimed) {
                roles.insert(label, include_surrounded_punctuation(&span, &window_ctx));
            }
        }
        annotations.push(Annotation::new(gold.cue.clone(), roles));
    }
    Ok(annotations)
}

/// Runs prediction over every speech. `on_speech` fires after each speech
/// completes, in corpus order, for checkpointing.
pub fn predict_corpus(
    corpus: &Corpus,
    backend: &dyn CompletionBackend,
    subtask: Subtask,
    jobs: usize,
    mut on_speech: impl FnMut(&str, &[Annotation]),
) -> Result<Predictions, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool builds");
    let mut predictions = Predictions::new();
    for speech in &corpus.speeches {
        let annotations = match subtask {
            Subtask::Full => predict_speech_full(speech, backend, &pool)?,
            Subtask::RolesOnly => predict_speech_roles_only(speech, backend, &pool)?,
        };
        on_speech(&speech.id, &annotations);
        predictions.insert(speech.id.clone(), annotations);
    }
    Ok(predictions)
}

// ---------------------------------------------------------------------------
// Documents
// ---------------------------------------------------------------------------

/// On-disk predictions: annotations keyed by speech id, in the corpus
/// annotation format.
#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionsDoc {
    pub split_name: String,
    pub subtask: String,
    pub predictions: BTreeMap<String, Vec<AnnotationDoc>>,
}

pub fn predictions_to_doc(
    predictions: &Predictions,
    split_name: &str,
    subtask: Subtask,
) -> PredictionsDoc {
    PredictionsDoc {
        split_name: split_name.to_string(),
        subtask: subtask.to_string(),
        predictions: predictions
            .iter()
            .map(|(id, anns)| (id.clone(), anns.iter().map(annotation_to_doc).collect()))
            .collect(),
    }
}

pub fn predictions_from_doc(doc: &PredictionsDoc) -> Result<Predictions, CorpusError> {
    let mut out = Predictions::new();
    for (id, docs) in &doc.predictions {
        let mut anns = Vec::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            let ann = annotation_from_doc(d)?;
            if ann.cue.is_empty() {
                return Err(CorpusError::Malformed(format!(
                    "prediction {i} for speech {id:?} has an empty cue"
                )));
            }
            anns.push(ann);
        }
        out.insert(id.clone(), anns);
    }
    Ok(out)
}

pub fn save_predictions(doc: &PredictionsDoc, path: impl AsRef<Path>) -> io::Result<()> {
    let mut body = serde_json::to_string_pretty(doc).expect("predictions serialize");
    body.push('\n');
    fs::write(path, body)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<PredictionsDoc, CorpusError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&raw).map_err(|source| CorpusError::Parse {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

/// Identifies a run: what was predicted, with which templates, against which
/// backend. Deliberately independent of the concurrency limit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RunManifest {
    pub backend: String,
    pub config_hash: String,
    pub corpus_sha256: String,
    pub split_name: String,
    pub subtask: String,
    pub template_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_sha256(path: impl AsRef<Path>) -> io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

pub fn build_manifest(
    corpus_sha256: String,
    split_name: &str,
    subtask: Subtask,
    backend_identity: String,
) -> RunManifest {
    let templates = template_hash();
    let config_hash = sha256_hex(
        format!(
            "backend={backend_identity}\ncorpus={corpus_sha256}\nsubtask={subtask}\ntemplates={templates}\n",
        )
        .as_bytes(),
    );
    RunManifest {
        backend: backend_identity,
        config_hash,
        corpus_sha256,
        split_name: split_name.to_string(),
        subtask: subtask.to_string(),
        template_hash: templates,
    }
}

pub fn save_manifest(manifest: &RunManifest, path: impl AsRef<Path>) -> io::Result<()> {
    let mut body = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    body.push('\n');
    fs::write(path, body)
}
