//! The cascaded transducer model: frame stacking + input projection, a
//! causal conformer stack, a non-causal stack on top of it, and a shared
//! predictor/joint. Streaming decodes read the causal output; the second
//! pass re-reads the same frames through the non-causal stack.

use serde::Serialize;

use crate::config::ModelConfig;
use crate::conformer::{encoder_forward, BlockIdx, Mode};
use crate::data::subsample;
use crate::decoder::{build_decoder, joint_forward, predict, DecoderIdx, JointIdx};
use crate::error::{Error, Result};
use crate::params::{Fwd, LinearIdx, Params};
use crate::rng::Rng;
use crate::tensor::{Tensor, ValueId};

#[derive(Debug, Clone)]
pub struct CascadedModel {
    pub cfg: ModelConfig,
    pub params: Params,
    pub input_proj: LinearIdx,
    pub causal: Vec<BlockIdx>,
    pub noncausal: Vec<BlockIdx>,
    pub decoder: DecoderIdx,
    pub joint: JointIdx,
}

/// Parameter totals by component. Tied matrices are counted once, under the
/// component that registered them (the predictor embedding for tied decoders).
#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub causal_encoder: usize,
    pub noncausal_encoder: usize,
    pub predictor: usize,
    pub joint: usize,
    pub total: usize,
}

impl CascadedModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = Params::new();
        let stacked = cfg.feat_dim * cfg.subsample_factor;
        let input_proj = params.linear("causal_encoder.input_proj", stacked, cfg.d_model, &mut rng);
        let block = |p: &mut Params, prefix: String, rng: &mut Rng| {
            BlockIdx::new(p, &prefix, cfg.d_model, cfg.num_heads, cfg.conv_kernel, cfg.ffn_expansion, rng)
        };
        let causal: Vec<BlockIdx> = (0..cfg.causal_layers)
            .map(|i| block(&mut params, format!("causal_encoder.block{i}"), &mut rng))
            .collect();
        let noncausal: Vec<BlockIdx> = (0..cfg.noncausal_layers)
            .map(|i| block(&mut params, format!("noncausal_encoder.block{i}"), &mut rng))
            .collect();
        let (decoder, joint) = build_decoder(&mut params, cfg, &mut rng);
        Ok(CascadedModel { cfg: cfg.clone(), params, input_proj, causal, noncausal, decoder, joint })
    }

    /// Stack raw frames and validate the feature width.
    pub fn stack_frames(&self, feats: &Tensor) -> Result<Tensor> {
        if feats.cols() != self.cfg.feat_dim {
            return Err(Error::usage(format!(
                "feature width {} != configured {}",
                feats.cols(),
                self.cfg.feat_dim
            )));
        }
        if feats.rows() == 0 {
            return Err(Error::usage("cannot encode an empty utterance"));
        }
        subsample(feats, self.cfg.subsample_factor)
    }

    /// First-pass encoding: stacked frames -> input projection -> causal
    /// blocks. Output rows are streaming frame states, ceil(T/factor) x D.
    pub fn encode_causal(&self, f: &mut Fwd, feats: &Tensor) -> Result<ValueId> {
        let stacked = self.stack_frames(feats)?;
        let x = f.tape.constant(stacked);
        let projected = f.linear(&self.input_proj, x);
        Ok(encoder_forward(f, &self.causal, projected, Mode::Causal))
    }

    /// Second-pass encoding on top of the causal output. With zero
    /// non-causal layers this is the identity.
    pub fn encode_noncausal(&self, f: &mut Fwd, causal_out: ValueId) -> ValueId {
        encoder_forward(f, &self.noncausal, causal_out, Mode::Noncausal)
    }

    /// Predictor rows for a label prefix: (U+1) x P.
    pub fn predictor_rows(&self, f: &mut Fwd, labels: &[usize]) -> Result<ValueId> {
        predict(f, &self.decoder, labels)
    }

    /// Joint logits over the (enc x pred) grid, rows t*(U+1)+u.
    pub fn joint_logits(&self, f: &mut Fwd, enc: ValueId, pred: ValueId) -> Result<ValueId> {
        joint_forward(f, &self.joint, enc, pred)
    }

    pub fn count_params(&self) -> ParamBreakdown {
        let mut b = ParamBreakdown {
            causal_encoder: 0,
            noncausal_encoder: 0,
            predictor: 0,
            joint: 0,
            total: 0,
        };
        for (name, t) in self.params.iter() {
            let n = t.numel();
            b.total += n;
            if name.starts_with("causal_encoder.") {
                b.causal_encoder += n;
            } else if name.starts_with("noncausal_encoder.") {
                b.noncausal_encoder += n;
            } else if name.starts_with("predictor.") {
                b.predictor += n;
            } else if name.starts_with("joint.") {
                b.joint += n;
            } else {
                unreachable!("unprefixed parameter {name}");
            }
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DecoderConfig;

    fn full_scale(decoder: DecoderConfig) -> ModelConfig {
        ModelConfig {
            feat_dim: 80,
            subsample_factor: 4,
            d_model: 256,
            num_heads: 4,
            conv_kernel: 7,
            ffn_expansion: 4,
            causal_layers: 16,
            noncausal_layers: 6,
            vocab_size: 1000,
            decoder,
        }
    }

    fn tiny(decoder: DecoderConfig) -> ModelConfig {
        ModelConfig {
            feat_dim: 6,
            subsample_factor: 2,
            d_model: 8,
            num_heads: 2,
            conv_kernel: 3,
            ffn_expansion: 2,
            causal_layers: 2,
            noncausal_layers: 1,
            vocab_size: 7,
            decoder,
        }
    }

    fn tiny_tar() -> ModelConfig {
        tiny(DecoderConfig::Tar { embed_dim: 6, context: 5, heads: 4, tied: true })
    }

    #[test]
    fn parameter_counts_lstm_baseline() {
        let cfg = full_scale(DecoderConfig::Lstm {
            embed_dim: 576,
            hidden_dim: 576,
            layers: 2,
            joint_dim: 576,
        });
        let m = CascadedModel::new(&cfg, 1).unwrap();
        let b = m.count_params();
        assert_eq!(b.causal_encoder, 24_353_088);
        assert_eq!(b.noncausal_encoder, 9_101_592);
        assert_eq!(b.predictor, 6_221_376);
        assert_eq!(b.joint, 1_056_808);
        assert_eq!(b.predictor + b.joint, 7_278_184);
        assert_eq!(b.total, 40_732_864);
        assert_eq!(b.total, m.params.total_values());
    }

    #[test]
    fn parameter_counts_tied_reduced() {
        for (e, want) in [(768, 1_562_364usize), (384, 634_236), (192, 280_764)] {
            let cfg = full_scale(DecoderConfig::Tar {
                embed_dim: e,
                context: 5,
                heads: 4,
                tied: true,
            });
            let m = CascadedModel::new(&cfg, 1).unwrap();
            let b = m.count_params();
            assert_eq!(b.predictor + b.joint, want, "embed_dim {e}");
            // encoder stacks unaffected by decoder choice
            assert_eq!(b.causal_encoder, 24_353_088);
            assert_eq!(b.noncausal_encoder, 9_101_592);
        }
    }

    #[test]
    fn conformer_block_size_formula() {
        // one block at width D: 23 D^2 + (30 + kernel) D + 33 heads
        let cfg = full_scale(DecoderConfig::Tar { embed_dim: 192, context: 5, heads: 4, tied: true });
        let m = CascadedModel::new(&cfg, 1).unwrap();
        let d = 256usize;
        let per_block = 23 * d * d + (30 + 7) * d + 33 * 4;
        assert_eq!(per_block, 1_516_932);
        assert_eq!(m.count_params().noncausal_encoder, 6 * per_block);
    }

    #[test]
    fn encode_shapes_and_identity_second_pass() {
        let mut cfg = tiny_tar();
        cfg.noncausal_layers = 0;
        let m = CascadedModel::new(&cfg, 7).unwrap();
        let mut rng = Rng::new(8);
        let feats = Tensor::randn(vec![9, 6], 1.0, &mut rng);
        let mut tape = crate::tensor::Tape::new();
        let ids = m.params.bind(&mut tape, false);
        let mut f = Fwd::inference(&mut tape, &ids);
        let enc = m.encode_causal(&mut f, &feats).unwrap();
        assert_eq!(f.tape.value(enc).shape, vec![5, 8]); // ceil(9/2) rows
        let second = m.encode_noncausal(&mut f, enc);
        assert_eq!(second, enc, "zero non-causal layers must be the identity");
    }

    #[test]
    fn seed_determinism() {
        let cfg = tiny_tar();
        let a = CascadedModel::new(&cfg, 11).unwrap();
        let b = CascadedModel::new(&cfg, 11).unwrap();
        let c = CascadedModel::new(&cfg, 12).unwrap();
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data, tb.data);
        }
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|((_, ta), (_, tc))| ta.data != tc.data);
        assert!(differs);
    }

    #[test]
    fn full_forward_smoke() {
        let m = CascadedModel::new(&tiny_tar(), 21).unwrap();
        let mut rng = Rng::new(22);
        let feats = Tensor::randn(vec![8, 6], 1.0, &mut rng);
        let mut tape = crate::tensor::Tape::new();
        let ids = m.params.bind(&mut tape, false);
        let mut f = Fwd::inference(&mut tape, &ids);
        let enc1 = m.encode_causal(&mut f, &feats).unwrap();
        let enc2 = m.encode_noncausal(&mut f, enc1);
        let pred = m.predictor_rows(&mut f, &[1, 2]).unwrap();
        let logits = m.joint_logits(&mut f, enc2, pred).unwrap();
        let v = f.tape.value(logits);
        assert_eq!(v.shape, vec![4 * 3, 7]);
        assert!(v.data.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn rejects_bad_features() {
        let m = CascadedModel::new(&tiny_tar(), 3).unwrap();
        let mut tape = crate::tensor::Tape::new();
        let ids = m.params.bind(&mut tape, false);
        let mut f = Fwd::inference(&mut tape, &ids);
        let wrong_width = Tensor::zeros(vec![4, 5]);
        assert!(m.encode_causal(&mut f, &wrong_width).is_err());
        let empty = Tensor::zeros(vec![0, 6]);
        assert!(m.encode_causal(&mut f, &empty).is_err());
    }
}
