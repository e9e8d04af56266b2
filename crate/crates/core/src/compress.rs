//! Deterministic compression search: given a base model config and a target
//! size reduction in percent, find a narrower/shallower variant whose total
//! parameter count lands within 5% of the target budget.
//!
//! Search order is fixed so results are reproducible: causal depth is tried
//! from the base value downward, and for each depth the encoder width is
//! scanned over multiples of `num_heads`, keeping the width whose total is
//! closest to the target. The first (depth, width) pair inside the tolerance
//! band wins. The non-causal depth stays fixed (the second pass is already
//! small), LSTM decoders are kept as-is, and tied-and-reduced decoders scale
//! their embedding width proportionally with the encoder.

use serde::Serialize;

use crate::config::{DecoderConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::model::ParamBreakdown;

/// Relative half-width of the acceptance band around the target total.
pub const TOLERANCE: f64 = 0.05;
/// Reductions at or beyond this percentage are rejected up front.
pub const MAX_FACTOR: f64 = 90.0;

fn linear(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

/// Parameter totals computed arithmetically, without building the model.
/// Must mirror construction exactly; the tests cross-check against real
/// models of both decoder kinds.
pub fn analytic_breakdown(cfg: &ModelConfig) -> ParamBreakdown {
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let e = cfg.ffn_expansion;
    // macaron ffn pair + attention (qkv, out, relative-position table of
    // 33 offsets per head) + conv module + final norm
    let ffn = 2 * d + linear(d, e * d) + linear(e * d, d);
    let attn = 2 * d + linear(d, 3 * d) + linear(d, d) + 33 * cfg.num_heads;
    let conv = 2 * d + linear(d, 2 * d) + (cfg.conv_kernel * d + d) + 2 * d + linear(d, d);
    let block = 2 * ffn + attn + conv + 2 * d;

    let causal_encoder = linear(cfg.feat_dim * cfg.subsample_factor, d) + cfg.causal_layers * block;
    let noncausal_encoder = cfg.noncausal_layers * block;

    let (predictor, joint) = match &cfg.decoder {
        DecoderConfig::Lstm { embed_dim, hidden_dim, layers, joint_dim } => {
            let (pe, h, j) = (*embed_dim, *hidden_dim, *joint_dim);
            let mut pred = v * pe;
            for li in 0..*layers {
                let input = if li == 0 { pe } else { h };
                pred += input * 4 * h + h * 4 * h + 4 * h;
            }
            pred += linear(h, j);
            let joint = d * j + j * j + j + v * j + v;
            (pred, joint)
        }
        DecoderConfig::Tar { embed_dim, context, heads, tied } => {
            let pe = *embed_dim;
            let pred = v * pe + context * pe + heads * context + linear(pe, pe) + 2 * pe;
            let output = if *tied { 0 } else { v * pe };
            let joint = d * pe + pe + output + v;
            (pred, joint)
        }
    };

    ParamBreakdown {
        causal_encoder,
        noncausal_encoder,
        predictor,
        joint,
        total: causal_encoder + noncausal_encoder + predictor + joint,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CompressionSpec {
    pub factor_percent: f64,
    pub base_total: usize,
    pub target_total: usize,
    pub realized_total: usize,
    pub realized_factor_percent: f64,
    pub model: ModelConfig,
}

fn scaled_candidate(base: &ModelConfig, causal_layers: usize, d: usize) -> ModelConfig {
    let mut cfg = base.clone();
    cfg.causal_layers = causal_layers;
    cfg.d_model = d;
    if let DecoderConfig::Tar { embed_dim, .. } = &mut cfg.decoder {
        let scaled = (*embed_dim as f64 * d as f64 / base.d_model as f64).round() as usize;
        *embed_dim = scaled.max(1);
    }
    cfg
}

/// Find a config whose total parameter count is within 5% of
/// `base * (1 - factor_percent/100)`. A factor of zero returns the base
/// unchanged. Infeasible requests report the closest achievable size.
pub fn compress_config(base: &ModelConfig, factor_percent: f64) -> Result<CompressionSpec> {
    base.validate()?;
    if !factor_percent.is_finite() || !(0.0..MAX_FACTOR).contains(&factor_percent) {
        return Err(Error::usage(format!(
            "compression factor must lie in [0, {MAX_FACTOR}) percent, got {factor_percent}"
        )));
    }
    let base_total = analytic_breakdown(base).total;
    let target = (base_total as f64 * (1.0 - factor_percent / 100.0)).round() as usize;
    if factor_percent == 0.0 {
        return Ok(CompressionSpec {
            factor_percent,
            base_total,
            target_total: base_total,
            realized_total: base_total,
            realized_factor_percent: 0.0,
            model: base.clone(),
        });
    }

    let h = base.num_heads;
    let mut closest: Option<(usize, ModelConfig)> = None;
    for layers in (1..=base.causal_layers).rev() {
        // best width for this depth: smallest |total - target|, ties to the
        // narrower model
        let mut best: Option<(usize, ModelConfig)> = None;
        let mut d = h;
        while d <= base.d_model {
            let cand = scaled_candidate(base, layers, d);
            let total = analytic_breakdown(&cand).total;
            if best.as_ref().is_none_or(|(bt, _)| {
                (total as i64 - target as i64).abs() < (*bt as i64 - target as i64).abs()
            }) {
                best = Some((total, cand));
            }
            d += h;
        }
        let (total, cand) = best.expect("width scan visits at least num_heads");
        if closest.as_ref().is_none_or(|(ct, _)| {
            (total as i64 - target as i64).abs() < (*ct as i64 - target as i64).abs()
        }) {
            closest = Some((total, cand.clone()));
        }
        if (total as f64 - target as f64).abs() <= TOLERANCE * target as f64 {
            return Ok(CompressionSpec {
                factor_percent,
                base_total,
                target_total: target,
                realized_total: total,
                realized_factor_percent: 100.0 * (1.0 - total as f64 / base_total as f64),
                model: cand,
            });
        }
    }

    let (ct, _) = closest.expect("at least one candidate was scored");
    Err(Error::Infeasible(format!(
        "no config within {:.0}% of target {} parameters (factor {:.1}%); \
         closest achievable is {} parameters ({:.1}% reduction)",
        TOLERANCE * 100.0,
        target,
        factor_percent,
        ct,
        100.0 * (1.0 - ct as f64 / base_total as f64),
    )))
}
