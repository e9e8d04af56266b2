//! Corpus evaluation: decode every utterance, score against the reference
//! transcript, and aggregate token error counts into a corpus error rate.

use serde::Serialize;

use crate::data::Dataset;
use crate::decode::{beam_search, DecodeMode};
use crate::error::{Error, Result};
use crate::model::CascadedModel;
use crate::wer::{wer, WerCounts};

#[derive(Debug, Clone, Serialize)]
pub struct UtteranceScore {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub counts: WerCounts,
    pub wer: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mode: DecodeMode,
    pub beam: usize,
    pub utterances: usize,
    pub reference_tokens: usize,
    pub counts: WerCounts,
    /// Corpus rate: total errors over total reference tokens.
    pub wer: f64,
    pub per_utterance: Vec<UtteranceScore>,
}

/// Pool per-utterance error counts into a corpus-level rate.
pub fn pool_scores(scores: &[UtteranceScore]) -> (f64, WerCounts, usize) {
    let mut counts = WerCounts::default();
    let mut ref_tokens = 0usize;
    for s in scores {
        counts.substitutions += s.counts.substitutions;
        counts.insertions += s.counts.insertions;
        counts.deletions += s.counts.deletions;
        ref_tokens += s.reference.len();
    }
    let rate = counts.total() as f64 / ref_tokens.max(1) as f64;
    (rate, counts, ref_tokens)
}

pub fn evaluate(
    model: &CascadedModel,
    dataset: &Dataset,
    mode: DecodeMode,
    beam: usize,
) -> Result<EvalReport> {
    if dataset.utterances.is_empty() {
        return Err(Error::usage("cannot evaluate an empty dataset"));
    }
    if dataset.vocab_size != model.cfg.vocab_size || dataset.feat_dim != model.cfg.feat_dim {
        return Err(Error::Config(format!(
            "dataset (vocab {}, feat {}) does not match model (vocab {}, feat {})",
            dataset.vocab_size, dataset.feat_dim, model.cfg.vocab_size, model.cfg.feat_dim
        )));
    }
    let mut per_utterance = Vec::with_capacity(dataset.utterances.len());
    for utt in &dataset.utterances {
        let hyp = beam_search(model, &utt.features, beam, mode)?;
        let (rate, counts) = wer(&utt.tokens, &hyp.tokens);
        per_utterance.push(UtteranceScore {
            id: utt.id.clone(),
            reference: utt.tokens.clone(),
            hypothesis: hyp.tokens,
            counts,
            wer: rate,
        });
    }
    let (rate, counts, ref_tokens) = pool_scores(&per_utterance);
    Ok(EvalReport {
        mode,
        beam,
        utterances: per_utterance.len(),
        reference_tokens: ref_tokens,
        counts,
        wer: rate,
        per_utterance,
    })
}
