//! Frame-synchronous transducer decoding.
//!
//! Streaming mode reads the causal encoder output only; non-streaming mode
//! re-reads the same frames through the non-causal stack first. Both search
//! procedures walk encoder frames in order, emitting labels until the model
//! prefers blank (or the per-frame symbol cap trips), and both are fully
//! deterministic: score ties break toward the shorter token sequence, then
//! the lexicographically smaller one.

use std::collections::HashMap;

use crate::decoder::{tar_history, DecoderIdx};
use crate::error::{Error, Result};
use crate::model::CascadedModel;
use crate::params::Fwd;
use crate::tensor::{Tape, Tensor, ValueId};

/// Cap on consecutive non-blank emissions per frame. Prevents label loops
/// on untrained models; a blank is forced once the cap is reached.
pub const MAX_SYMBOLS_PER_FRAME: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Streaming,
    Nonstreaming,
}

#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_score: f64,
}

/// Shared forward state for one utterance: a single tape holding the
/// encoder output, with predictor rows and per-node log-prob rows cached by
/// prefix. LSTM prefixes are cached whole; TAR prefixes collapse to their
/// last-N window, which is all the predictor can see.
struct DecodeCtx<'m> {
    model: &'m CascadedModel,
    tape: Tape,
    ids: Vec<ValueId>,
    enc: ValueId,
    n_frames: usize,
    pred_cache: HashMap<Vec<usize>, ValueId>,
    row_cache: HashMap<(usize, Vec<usize>), Vec<f32>>,
}

impl<'m> DecodeCtx<'m> {
    fn new(model: &'m CascadedModel, features: &Tensor, mode: DecodeMode) -> Result<Self> {
        let mut tape = Tape::new();
        let ids = model.params.bind(&mut tape, false);
        let mut f = Fwd::inference(&mut tape, &ids);
        let causal = model.encode_causal(&mut f, features)?;
        let enc = match mode {
            DecodeMode::Streaming => causal,
            DecodeMode::Nonstreaming => model.encode_noncausal(&mut f, causal),
        };
        let n_frames = tape.value(enc).rows();
        Ok(DecodeCtx {
            model,
            tape,
            ids,
            enc,
            n_frames,
            pred_cache: HashMap::new(),
            row_cache: HashMap::new(),
        })
    }

    fn prefix_key(&self, prefix: &[usize]) -> Vec<usize> {
        match &self.model.decoder {
            DecoderIdx::Lstm(_) => prefix.to_vec(),
            DecoderIdx::Tar(t) => tar_history(prefix, prefix.len(), t.context),
        }
    }

    /// Predictor output row for the prefix, as a 1 x P node.
    fn pred_row(&mut self, prefix: &[usize]) -> Result<ValueId> {
        let key = self.prefix_key(prefix);
        if let Some(&id) = self.pred_cache.get(&key) {
            return Ok(id);
        }
        let mut f = Fwd::inference(&mut self.tape, &self.ids);
        let rows = self.model.predictor_rows(&mut f, prefix)?;
        let last = self.tape.value(rows).rows() - 1;
        let row = self.tape.gather_rows(rows, vec![last]);
        self.pred_cache.insert(key, row);
        Ok(row)
    }

    /// Log-probabilities over the vocabulary at (frame, prefix).
    fn log_probs(&mut self, frame: usize, prefix: &[usize]) -> Result<Vec<f32>> {
        let key = (frame, self.prefix_key(prefix));
        if let Some(row) = self.row_cache.get(&key) {
            return Ok(row.clone());
        }
        let pred = self.pred_row(prefix)?;
        let enc_row = self.tape.gather_rows(self.enc, vec![frame]);
        let mut f = Fwd::inference(&mut self.tape, &self.ids);
        let logits = self.model.joint_logits(&mut f, enc_row, pred)?;
        let lp = self.tape.log_softmax_rows(logits);
        let row = self.tape.value(lp).data.clone();
        self.row_cache.insert(key, row.clone());
        Ok(row)
    }
}

/// Deterministic argmax: smallest index among maxima.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy frame-synchronous decode: at each frame emit the argmax label
/// while it is non-blank (capped), then advance on blank.
pub fn greedy_decode(
    model: &CascadedModel,
    features: &Tensor,
    mode: DecodeMode,
) -> Result<Vec<usize>> {
    let mut ctx = DecodeCtx::new(model, features, mode)?;
    greedy_over(&mut ctx)
}

fn greedy_over(ctx: &mut DecodeCtx) -> Result<Vec<usize>> {
    let mut tokens: Vec<usize> = Vec::new();
    for t in 0..ctx.n_frames {
        for _ in 0..MAX_SYMBOLS_PER_FRAME {
            let row = ctx.log_probs(t, &tokens)?;
            let k = argmax(&row);
            if k == 0 {
                break;
            }
            tokens.push(k);
        }
    }
    Ok(tokens)
}

/// State carried from the streaming pass into the refinement pass: the tape
/// already holds the causal encoder output and the predictor-row cache, so
/// the second pass pays only for the non-causal stack and the beam search.
pub struct FirstPass<'m> {
    ctx: DecodeCtx<'m>,
    pub tokens: Vec<usize>,
}

/// Streaming pass: causal encode once, then greedy decode.
pub fn first_pass<'m>(model: &'m CascadedModel, features: &Tensor) -> Result<FirstPass<'m>> {
    let mut ctx = DecodeCtx::new(model, features, DecodeMode::Streaming)?;
    let tokens = greedy_over(&mut ctx)?;
    Ok(FirstPass { ctx, tokens })
}

/// Refinement pass: run the non-causal stack over the stored causal output
/// and beam-search the result. Predictor rows are label-only and stay valid;
/// cached joint rows do not and are dropped.
pub fn second_pass(fp: FirstPass<'_>, beam: usize) -> Result<Hypothesis> {
    if beam < 1 {
        return Err(Error::usage(format!("beam must be >= 1, got {beam}")));
    }
    let mut ctx = fp.ctx;
    let causal = ctx.enc;
    let mut f = Fwd::inference(&mut ctx.tape, &ctx.ids);
    ctx.enc = ctx.model.encode_noncausal(&mut f, causal);
    ctx.row_cache.clear();
    beam_over(&mut ctx, beam)
}

/// Ordering for pruning and for the final answer: higher score first, then
/// fewer tokens, then lexicographically smaller tokens.
fn hyp_order(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.log_score
        .partial_cmp(&a.log_score)
        .unwrap()
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then(a.tokens.cmp(&b.tokens))
}

/// Candidate during in-frame expansion; `parked` marks hypotheses that have
/// taken blank on this frame and are done until the next one.
struct Candidate {
    hyp: Hypothesis,
    parked: bool,
}

/// Frame-synchronous beam search. Within a frame, parked hypotheses (those
/// that already took blank) compete in the same beam-pruned pool as fresh
/// label expansions; the frame ends when every surviving hypothesis is
/// parked or the symbol cap forces the rest to take blank. Hypotheses that
/// reach the next frame with identical token sequences are merged, keeping
/// the higher score.
pub fn beam_search(
    model: &CascadedModel,
    features: &Tensor,
    beam: usize,
    mode: DecodeMode,
) -> Result<Hypothesis> {
    if beam < 1 {
        return Err(Error::usage(format!("beam must be >= 1, got {beam}")));
    }
    let mut ctx = DecodeCtx::new(model, features, mode)?;
    beam_over(&mut ctx, beam)
}

fn beam_over(ctx: &mut DecodeCtx, beam: usize) -> Result<Hypothesis> {
    let mut hyps = vec![Hypothesis { tokens: Vec::new(), log_score: 0.0 }];

    for t in 0..ctx.n_frames {
        let mut active = std::mem::take(&mut hyps);
        let mut pool: Vec<Candidate> = Vec::new();
        for step in 0..=MAX_SYMBOLS_PER_FRAME {
            let force_blank = step == MAX_SYMBOLS_PER_FRAME;
            for hyp in active.drain(..) {
                let row = ctx.log_probs(t, &hyp.tokens)?;
                let blank_score = hyp.log_score + row[0] as f64;
                pool.push(Candidate {
                    hyp: Hypothesis { tokens: hyp.tokens.clone(), log_score: blank_score },
                    parked: true,
                });
                if force_blank {
                    continue;
                }
                for (k, &lp) in row.iter().enumerate().skip(1) {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(k);
                    pool.push(Candidate {
                        hyp: Hypothesis { tokens, log_score: hyp.log_score + lp as f64 },
                        parked: false,
                    });
                }
            }
            pool.sort_by(|a, b| hyp_order(&a.hyp, &b.hyp));
            pool.truncate(beam);
            let any_active = pool.iter().any(|c| !c.parked);
            if !any_active {
                break;
            }
            let mut parked = Vec::new();
            for c in pool.drain(..) {
                if c.parked {
                    parked.push(c);
                } else {
                    active.push(c.hyp);
                }
            }
            pool = parked;
        }
        // merge identical token sequences, keep the best score
        let mut merged: HashMap<Vec<usize>, f64> = HashMap::new();
        for c in pool {
            let e = merged.entry(c.hyp.tokens).or_insert(f64::NEG_INFINITY);
            *e = e.max(c.hyp.log_score);
        }
        hyps = merged
            .into_iter()
            .map(|(tokens, log_score)| Hypothesis { tokens, log_score })
            .collect();
        hyps.sort_by(hyp_order);
        hyps.truncate(beam);
    }
    Ok(hyps.into_iter().next().expect("at least one hypothesis survives"))
}

/// Beam-search decode returning only the best token sequence.
pub fn beam_search_decode(
    model: &CascadedModel,
    features: &Tensor,
    beam: usize,
    mode: DecodeMode,
) -> Result<Vec<usize>> {
    Ok(beam_search(model, features, beam, mode)?.tokens)
}
