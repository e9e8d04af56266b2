//! Prediction networks (LSTM baseline and tied-and-reduced) plus the joint.
//!
//! Both predictors map a label prefix to (U+1) state rows; row u summarizes
//! the first u labels. The TAR predictor sees only the last `context` labels
//! (blank-padded), embeds them, adds per-slot position vectors, takes a
//! per-head softmax-weighted average over the slots, averages heads, then
//! projection -> layer norm -> swish. When tied, the embedding matrix is the
//! same storage object as the joint output layer, so the joint hidden width
//! equals the embedding width.
//!
//! Joint: logits = output @ tanh(enc_proj . e_t + pred_proj . p_u + bias).
//! For a tied TAR decoder the predictor's projection already plays the
//! pred-side role, so the joint has no separate pred_proj.

use crate::config::{DecoderConfig, ModelConfig};
use crate::data::BLANK_ID;
use crate::error::{Error, Result};
use crate::params::{Fwd, LinearIdx, NormIdx, PIdx, Params};
use crate::rng::Rng;
use crate::tensor::{Tensor, ValueId};

#[derive(Debug, Clone)]
pub struct LstmLayerIdx {
    pub wx: PIdx,
    pub wh: PIdx,
    pub b: PIdx,
}

#[derive(Debug, Clone)]
pub struct LstmIdx {
    pub embedding: PIdx,
    pub layers: Vec<LstmLayerIdx>,
    pub out_proj: LinearIdx,
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Debug, Clone)]
pub struct TarIdx {
    pub embedding: PIdx,
    pub position: PIdx,
    pub head_weights: PIdx,
    pub proj: LinearIdx,
    pub norm: NormIdx,
    pub vocab: usize,
    pub embed_dim: usize,
    pub context: usize,
    pub heads: usize,
    pub tied: bool,
}

#[derive(Debug, Clone)]
pub enum DecoderIdx {
    Lstm(LstmIdx),
    Tar(TarIdx),
}

impl DecoderIdx {
    pub fn output_dim(&self) -> usize {
        match self {
            DecoderIdx::Lstm(l) => l.hidden_dim, // projected to joint width below
            DecoderIdx::Tar(t) => t.embed_dim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct JointIdx {
    pub enc_proj: PIdx,
    /// Absent when the predictor projection is the pred-side map (tied TAR).
    pub pred_proj: Option<PIdx>,
    pub hidden_bias: PIdx,
    /// V x J matrix; same storage as the TAR embedding when tied.
    pub output: PIdx,
    pub out_bias: PIdx,
    pub d_model: usize,
    pub joint_dim: usize,
    pub vocab: usize,
    pub tied: bool,
}

/// Construct predictor + joint parameters for a model config.
pub fn build_decoder(p: &mut Params, cfg: &ModelConfig, rng: &mut Rng) -> (DecoderIdx, JointIdx) {
    let v = cfg.vocab_size;
    let d = cfg.d_model;
    match &cfg.decoder {
        DecoderConfig::Lstm { embed_dim, hidden_dim, layers, joint_dim } => {
            let (e, h, j) = (*embed_dim, *hidden_dim, *joint_dim);
            let embedding = p.randn("predictor.embedding", vec![v, e], e, rng);
            let mut ls = Vec::with_capacity(*layers);
            for li in 0..*layers {
                let input = if li == 0 { e } else { h };
                let wx = p.randn(format!("predictor.lstm{li}.wx"), vec![input, 4 * h], input, rng);
                let wh = p.randn(format!("predictor.lstm{li}.wh"), vec![h, 4 * h], h, rng);
                // forget-gate bias starts at 1 so early training keeps state
                let mut bt = Tensor::zeros(vec![4 * h]);
                for x in bt.data[h..2 * h].iter_mut() {
                    *x = 1.0;
                }
                let b = p.add(format!("predictor.lstm{li}.b"), bt);
                ls.push(LstmLayerIdx { wx, wh, b });
            }
            let out_proj = p.linear("predictor.out_proj", h, j, rng);
            let dec = DecoderIdx::Lstm(LstmIdx {
                embedding,
                layers: ls,
                out_proj,
                vocab: v,
                embed_dim: e,
                hidden_dim: h,
            });
            let joint = JointIdx {
                enc_proj: p.randn("joint.enc_proj", vec![d, j], d, rng),
                pred_proj: Some(p.randn("joint.pred_proj", vec![j, j], j, rng)),
                hidden_bias: p.zeros("joint.hidden_bias", vec![j]),
                output: p.randn("joint.output", vec![v, j], j, rng),
                out_bias: p.zeros("joint.out_bias", vec![v]),
                d_model: d,
                joint_dim: j,
                vocab: v,
                tied: false,
            };
            (dec, joint)
        }
        DecoderConfig::Tar { embed_dim, context, heads, tied } => {
            let e = *embed_dim;
            let embedding = p.randn("predictor.embedding", vec![v, e], e, rng);
            let position = p.randn("predictor.position", vec![*context, e], e, rng);
            let head_weights = p.zeros("predictor.head_weights", vec![*heads, *context]);
            let proj = p.linear("predictor.proj", e, e, rng);
            let norm = p.norm("predictor.norm", e);
            let dec = DecoderIdx::Tar(TarIdx {
                embedding,
                position,
                head_weights,
                proj,
                norm,
                vocab: v,
                embed_dim: e,
                context: *context,
                heads: *heads,
                tied: *tied,
            });
            let output = if *tied {
                embedding
            } else {
                p.randn("joint.output", vec![v, e], e, rng)
            };
            let joint = JointIdx {
                enc_proj: p.randn("joint.enc_proj", vec![d, e], d, rng),
                pred_proj: None,
                hidden_bias: p.zeros("joint.hidden_bias", vec![e]),
                output,
                out_bias: p.zeros("joint.out_bias", vec![v]),
                d_model: d,
                joint_dim: e,
                vocab: v,
                tied: *tied,
            };
            (dec, joint)
        }
    }
}

fn validate_labels(labels: &[usize], vocab: usize) -> Result<()> {
    for &l in labels {
        if l == BLANK_ID || l >= vocab {
            return Err(Error::usage(format!("label {l} out of range [1, {})", vocab)));
        }
    }
    Ok(())
}

/// LSTM predictor rows for a label prefix: (U+1) x joint_dim. Row u is the
/// state after consuming the first u labels; row 0 comes from the start
/// (blank) embedding alone.
pub fn lstm_predict(f: &mut Fwd, idx: &LstmIdx, labels: &[usize]) -> Result<ValueId> {
    validate_labels(labels, idx.vocab)?;
    let mut inputs = Vec::with_capacity(labels.len() + 1);
    inputs.push(BLANK_ID);
    inputs.extend_from_slice(labels);

    let h_dim = idx.hidden_dim;
    let mut layer_in = f.tape.gather_rows(f.ids[idx.embedding], inputs);
    for layer in &idx.layers {
        let steps = f.tape.value(layer_in).rows();
        let mut h = f.tape.constant(Tensor::zeros(vec![1, h_dim]));
        let mut c = f.tape.constant(Tensor::zeros(vec![1, h_dim]));
        let mut rows = Vec::with_capacity(steps);
        for t in 0..steps {
            let x_t = f.tape.gather_rows(layer_in, vec![t]);
            let gx = f.tape.matmul(x_t, f.ids[layer.wx], false, false);
            let gh = f.tape.matmul(h, f.ids[layer.wh], false, false);
            let gsum = f.tape.add(gx, gh);
            let gates = f.tape.bias_add(gsum, f.ids[layer.b]);
            let i_g = f.tape.slice_cols(gates, 0, h_dim);
            let f_g = f.tape.slice_cols(gates, h_dim, 2 * h_dim);
            let g_g = f.tape.slice_cols(gates, 2 * h_dim, 3 * h_dim);
            let o_g = f.tape.slice_cols(gates, 3 * h_dim, 4 * h_dim);
            let i_s = f.tape.sigmoid(i_g);
            let f_s = f.tape.sigmoid(f_g);
            let g_t = f.tape.tanh(g_g);
            let o_s = f.tape.sigmoid(o_g);
            let keep = f.tape.mul(f_s, c);
            let write = f.tape.mul(i_s, g_t);
            c = f.tape.add(keep, write);
            let c_t = f.tape.tanh(c);
            h = f.tape.mul(o_s, c_t);
            rows.push(h);
        }
        layer_in = f.tape.concat_rows(&rows);
    }
    Ok(f.linear(&idx.out_proj, layer_in))
}

/// Last-`context` label history for position u, blank-padded on the left,
/// oldest slot first.
pub fn tar_history(labels: &[usize], u: usize, context: usize) -> Vec<usize> {
    let mut h = vec![BLANK_ID; context];
    let take = u.min(context);
    for k in 0..take {
        h[context - take + k] = labels[u - take + k];
    }
    h
}

/// Mean-over-heads softmax slot weights: 1 x context row.
fn tar_slot_weights(f: &mut Fwd, idx: &TarIdx) -> ValueId {
    let soft = f.tape.softmax_rows(f.ids[idx.head_weights]);
    let avg = Tensor::new(vec![1, idx.heads], vec![1.0 / idx.heads as f32; idx.heads]);
    let avg = f.tape.constant(avg);
    f.tape.matmul(avg, soft, false, false)
}

/// Pre-projection context vector for one history window (1 x E):
/// convex combination over embedded slots with position vectors added.
pub fn tar_context_vector(f: &mut Fwd, idx: &TarIdx, history: &[usize]) -> Result<ValueId> {
    if history.len() != idx.context {
        return Err(Error::usage(format!(
            "history length {} != context {}",
            history.len(),
            idx.context
        )));
    }
    for &t in history {
        if t >= idx.vocab {
            return Err(Error::usage(format!("history token {t} out of range")));
        }
    }
    let emb = f.tape.gather_rows(f.ids[idx.embedding], history.to_vec());
    let pos = f.tape.gather_rows(f.ids[idx.position], (0..idx.context).collect());
    let slots = f.tape.add(emb, pos);
    let w = tar_slot_weights(f, idx);
    Ok(f.tape.matmul(w, slots, false, false))
}

/// TAR predictor rows for a label prefix: (U+1) x E. Row u depends only on
/// the last `context` labels of the first u.
pub fn tar_predict(f: &mut Fwd, idx: &TarIdx, labels: &[usize]) -> Result<ValueId> {
    validate_labels(labels, idx.vocab)?;
    let n = idx.context;
    let rows = labels.len() + 1;

    // all histories embedded in one gather
    let mut flat = Vec::with_capacity(rows * n);
    for u in 0..rows {
        flat.extend(tar_history(labels, u, n));
    }
    let emb = f.tape.gather_rows(f.ids[idx.embedding], flat);
    let pos_idx: Vec<usize> = (0..rows).flat_map(|_| 0..n).collect();
    let pos = f.tape.gather_rows(f.ids[idx.position], pos_idx);
    let slots = f.tape.add(emb, pos);

    let w = tar_slot_weights(f, idx);
    let mut out_rows = Vec::with_capacity(rows);
    for u in 0..rows {
        let hist = f.tape.gather_rows(slots, (u * n..(u + 1) * n).collect());
        out_rows.push(f.tape.matmul(w, hist, false, false));
    }
    let ctx = f.tape.concat_rows(&out_rows);

    let proj = f.linear(&idx.proj, ctx);
    let normed = f.norm(&idx.norm, proj);
    Ok(f.tape.swish(normed))
}

/// Predictor rows for either decoder flavor.
pub fn predict(f: &mut Fwd, dec: &DecoderIdx, labels: &[usize]) -> Result<ValueId> {
    match dec {
        DecoderIdx::Lstm(l) => lstm_predict(f, l, labels),
        DecoderIdx::Tar(t) => tar_predict(f, t, labels),
    }
}

/// Joint logits over the full (enc x pred) grid: rows t*m+u, width V.
/// enc: n x D, pred: m x P.
pub fn joint_forward(f: &mut Fwd, j: &JointIdx, enc: ValueId, pred: ValueId) -> Result<ValueId> {
    if f.tape.value(enc).cols() != j.d_model {
        return Err(Error::usage(format!(
            "joint: encoder width {} != d_model {}",
            f.tape.value(enc).cols(),
            j.d_model
        )));
    }
    let pred_w = f.tape.value(pred).cols();
    let eh = f.tape.matmul(enc, f.ids[j.enc_proj], false, false);
    let ph = match j.pred_proj {
        Some(pp) => {
            if pred_w != f.tape.value(f.ids[pp]).rows() {
                return Err(Error::usage(format!("joint: predictor width {pred_w} mismatch")));
            }
            f.tape.matmul(pred, f.ids[pp], false, false)
        }
        None => {
            if pred_w != j.joint_dim {
                return Err(Error::usage(format!(
                    "joint: predictor width {pred_w} != joint dim {}",
                    j.joint_dim
                )));
            }
            pred
        }
    };
    let grid = f.tape.cross_add(eh, ph);
    let h = f.tape.bias_add(grid, f.ids[j.hidden_bias]);
    let h = f.tape.tanh(h);
    let logits = f.tape.matmul(h, f.ids[j.output], false, true);
    Ok(f.tape.bias_add(logits, f.ids[j.out_bias]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DecoderConfig, ModelConfig};
    use crate::gradcheck::check_grad;
    use crate::tensor::Tape;

    fn lstm_cfg() -> ModelConfig {
        ModelConfig {
            feat_dim: 8,
            subsample_factor: 2,
            d_model: 8,
            num_heads: 2,
            conv_kernel: 3,
            ffn_expansion: 2,
            causal_layers: 1,
            noncausal_layers: 1,
            vocab_size: 7,
            decoder: DecoderConfig::Lstm { embed_dim: 6, hidden_dim: 6, layers: 2, joint_dim: 6 },
        }
    }

    fn tar_cfg(tied: bool) -> ModelConfig {
        ModelConfig {
            decoder: DecoderConfig::Tar { embed_dim: 6, context: 5, heads: 4, tied },
            ..lstm_cfg()
        }
    }

    fn predict_rows(cfg: &ModelConfig, labels: &[usize]) -> Tensor {
        let mut rng = Rng::new(31);
        let mut p = Params::new();
        let (dec, _joint) = build_decoder(&mut p, cfg, &mut rng);
        let mut tape = Tape::new();
        let ids = p.bind(&mut tape, false);
        let mut f = Fwd::inference(&mut tape, &ids);
        let rows = predict(&mut f, &dec, labels).unwrap();
        tape.value(rows).clone()
    }

    #[test]
    fn lstm_shapes() {
        let cfg = lstm_cfg();
        assert_eq!(predict_rows(&cfg, &[]).shape, vec![1, 6]);
        assert_eq!(predict_rows(&cfg, &[1, 2, 3]).shape, vec![4, 6]);
    }

    #[test]
    fn lstm_prefix_property() {
        let cfg = lstm_cfg();
        let full = predict_rows(&cfg, &[1, 2, 3, 4]);
        let cut = predict_rows(&cfg, &[1, 2]);
        assert_eq!(&full.data[..3 * 6], &cut.data[..]);
    }

    #[test]
    fn out_of_range_labels_rejected() {
        let mut rng = Rng::new(32);
        let mut p = Params::new();
        let (dec, _) = build_decoder(&mut p, &lstm_cfg(), &mut rng);
        let mut tape = Tape::new();
        let ids = p.bind(&mut tape, false);
        let mut f = Fwd::inference(&mut tape, &ids);
        assert!(predict(&mut f, &dec, &[0]).is_err()); // blank not a label
        assert!(predict(&mut f, &dec, &[7]).is_err()); // >= vocab

        let mut p = Params::new();
        let (dec, _) = build_decoder(&mut p, &tar_cfg(true), &mut rng);
        let mut tape = Tape::new();
        let ids = p.bind(&mut tape, false);
        let mut f = Fwd::inference(&mut tape, &ids);
        assert!(predict(&mut f, &dec, &[0]).is_err());
        assert!(predict(&mut f, &dec, &[9]).is_err());
    }

    #[test]
    fn tar_history_padding() {
        assert_eq!(tar_history(&[4, 5, 6], 0, 5), vec![0, 0, 0, 0, 0]);
        assert_eq!(tar_history(&[4, 5, 6], 2, 5), vec![0, 0, 0, 4, 5]);
        assert_eq!(tar_history(&[1, 2, 3, 4, 5, 6], 6, 5), vec![2, 3, 4, 5, 6]);
    }

    #[test]
    fn tar_bounded_context_exact() {
        let cfg = tar_cfg(true);
        // two prefixes sharing the same last five labels
        let a = predict_rows(&cfg, &[1, 2, 3, 4, 5, 6, 1, 2]);
        let b = predict_rows(&cfg, &[3, 3, 4, 5, 6, 1, 2]);
        let last_a = &a.data[(a.rows() - 1) * 6..];
        let last_b = &b.data[(b.rows() - 1) * 6..];
        assert_eq!(last_a, last_b);
    }

    #[test]
    fn tar_perturbation_window() {
        let cfg = tar_cfg(true);
        let base: Vec<usize> = vec![1, 2, 3, 4, 5, 6, 1, 2];
        let u = base.len(); // row index u = 8, window = labels 3..8
        let full = predict_rows(&cfg, &base);

        // changing label u-6 (index 2) leaves row u unchanged
        let mut far = base.clone();
        far[u - 6] = 5;
        let far_rows = predict_rows(&cfg, &far);
        assert_eq!(&full.data[u * 6..], &far_rows.data[u * 6..]);

        // changing label u-1 (index 7) changes row u
        let mut near = base;
        near[u - 1] = 5;
        let near_rows = predict_rows(&cfg, &near);
        assert_ne!(&full.data[u * 6..], &near_rows.data[u * 6..]);
    }

    #[test]
    fn tar_convex_combination_identity() {
        // with position vectors zeroed and every slot holding the same
        // embedding, the pre-projection vector equals that embedding exactly
        let mut rng = Rng::new(33);
        let mut p = Params::new();
        let (dec, _) = build_decoder(&mut p, &tar_cfg(true), &mut rng);
        let idx = match &dec {
            DecoderIdx::Tar(t) => t.clone(),
            _ => unreachable!(),
        };
        for v in p.tensor_mut(idx.position).data.iter_mut() {
            *v = 0.0;
        }
        // nonuniform head weights to make the convexity claim nontrivial
        let mut hw = Rng::new(34);
        for v in p.tensor_mut(idx.head_weights).data.iter_mut() {
            *v = hw.gaussian() as f32;
        }
        let mut tape = Tape::new();
        let ids = p.bind(&mut tape, false);
        let mut f = Fwd::inference(&mut tape, &ids);
        let hist = vec![3usize; idx.context];
        let ctx = tar_context_vector(&mut f, &idx, &hist).unwrap();
        let got = tape.value(ctx).data.clone();
        let want = p.tensor(idx.embedding).row(3);
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn tied_storage_is_shared() {
        let mut rng = Rng::new(35);
        let mut p = Params::new();
        let (dec, joint) = build_decoder(&mut p, &tar_cfg(true), &mut rng);
        let tar = match &dec {
            DecoderIdx::Tar(t) => t,
            _ => unreachable!(),
        };
        assert_eq!(tar.embedding, joint.output, "tied storage must be one object");
        // untied clone has a separate output matrix: exactly V*E more values
        let mut p2 = Params::new();
        let (_, _) = build_decoder(&mut p2, &tar_cfg(false), &mut rng);
        assert_eq!(p2.total_values(), p.total_values() + 7 * 6);
    }

    #[test]
    fn tied_delta_moves_both_logit_and_embedding() {
        let mut rng = Rng::new(36);
        let mut p = Params::new();
        let (dec, joint) = build_decoder(&mut p, &tar_cfg(true), &mut rng);
        let tar = match &dec {
            DecoderIdx::Tar(t) => t.clone(),
            _ => unreachable!(),
        };
        let run = |p: &Params| {
            let mut tape = Tape::new();
            let ids = p.bind(&mut tape, false);
            let mut f = Fwd::inference(&mut tape, &ids);
            let pred = tar_predict(&mut f, &tar, &[3, 3, 3, 3, 3]).unwrap();
            let enc = f.tape.constant(Tensor::new(vec![1, 8], vec![0.3; 8]));
            let logits = joint_forward(&mut f, &joint, enc, pred).unwrap();
            (tape.value(pred).clone(), tape.value(logits).clone())
        };
        let (pred_a, log_a) = run(&p);
        // bump one row of the shared matrix
        for v in p.tensor_mut(tar.embedding).data[3 * 6..4 * 6].iter_mut() {
            *v += 0.25;
        }
        let (pred_b, log_b) = run(&p);
        assert_ne!(pred_a.data, pred_b.data, "embedding side must move");
        let v = joint.vocab;
        let delta_3: f32 = (0..pred_a.rows())
            .map(|r| (log_a.data[r * v + 3] - log_b.data[r * v + 3]).abs())
            .sum();
        assert!(delta_3 > 1e-4, "output-layer side must move too");
    }

    #[test]
    fn joint_shape_and_width_checks() {
        let mut rng = Rng::new(37);
        let mut p = Params::new();
        let (dec, joint) = build_decoder(&mut p, &lstm_cfg(), &mut rng);
        let mut tape = Tape::new();
        let ids = p.bind(&mut tape, false);
        let mut f = Fwd::inference(&mut tape, &ids);
        let pred = predict(&mut f, &dec, &[1, 2]).unwrap();
        let enc = f.tape.constant(Tensor::randn(vec![4, 8], 1.0, &mut rng));
        let logits = joint_forward(&mut f, &joint, enc, pred).unwrap();
        assert_eq!(f.tape.value(logits).shape, vec![4 * 3, 7]);

        let bad = f.tape.constant(Tensor::randn(vec![4, 5], 1.0, &mut rng));
        assert!(joint_forward(&mut f, &joint, bad, pred).is_err());
    }

    #[test]
    fn gradcheck_tar_and_joint() {
        let mut rng = Rng::new(38);
        let mut p = Params::new();
        let (dec, joint) = build_decoder(&mut p, &tar_cfg(true), &mut rng);
        let tar = match dec {
            DecoderIdx::Tar(t) => t,
            _ => unreachable!(),
        };
        let tensors: Vec<Tensor> = p.iter().map(|(_, t)| t.clone()).collect();
        let mut inputs = tensors;
        inputs.push(Tensor::randn(vec![2, 8], 0.7, &mut rng)); // encoder rows
        let labels = vec![2usize, 4, 1];
        check_grad("tar_joint", &inputs, 1e-2, move |tape, ids| {
            let (param_ids, enc_id) = ids.split_at(ids.len() - 1);
            let mut f = Fwd::inference(tape, param_ids);
            let pred = tar_predict(&mut f, &tar, &labels).unwrap();
            let logits = joint_forward(&mut f, &joint, enc_id[0], pred).unwrap();
            let sq = f.tape.mul(logits, logits);
            f.tape.mean_all(sq)
        });
    }

    #[test]
    fn gradcheck_lstm_predictor() {
        let mut rng = Rng::new(39);
        let mut p = Params::new();
        let (dec, _) = build_decoder(&mut p, &lstm_cfg(), &mut rng);
        let lstm = match dec {
            DecoderIdx::Lstm(l) => l,
            _ => unreachable!(),
        };
        let inputs: Vec<Tensor> = p.iter().map(|(_, t)| t.clone()).collect();
        let labels = vec![1usize, 5];
        check_grad("lstm_predict", &inputs, 1e-2, move |tape, ids| {
            let mut f = Fwd::inference(tape, ids);
            let rows = lstm_predict(&mut f, &lstm, &labels).unwrap();
            let sq = f.tape.mul(rows, rows);
            f.tape.mean_all(sq)
        });
    }
}
