//! Conformer blocks and the attention masks for the two-encoder cascade.
//!
//! Block layout (pre-norm residuals):
//!   x += 0.5 * FFN(LN(x))            macaron half-step
//!   x += MHSA(LN(x))                 masked, learned relative-position bias
//!   x += Conv(LN(x))                 pointwise/GLU -> depthwise -> pointwise
//!   x += 0.5 * FFN(LN(x))
//!   y  = LN(x)
//! Causal blocks use a lower-triangular attention mask and left-padded
//! depthwise convolution, so output row t structurally cannot see rows > t.
//! Dropout follows each sub-layer output during training only.

use crate::params::{Fwd, LinearIdx, NormIdx, PIdx, Params};
use crate::rng::Rng;
use crate::tensor::ValueId;

/// Relative offsets are clipped to [-REL_CLIP, REL_CLIP]; the bias table has
/// 2*REL_CLIP+1 rows, one column per head.
pub const REL_CLIP: isize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Causal,
    Noncausal,
}

#[derive(Debug, Clone)]
pub struct FfnIdx {
    pub norm: NormIdx,
    pub lin1: LinearIdx,
    pub lin2: LinearIdx,
}

#[derive(Debug, Clone)]
pub struct MhsaIdx {
    pub norm: NormIdx,
    pub wq: LinearIdx,
    pub wk: LinearIdx,
    pub wv: LinearIdx,
    pub wo: LinearIdx,
    /// (2*REL_CLIP+1) x heads bias table.
    pub rel_bias: PIdx,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct ConvIdx {
    pub norm: NormIdx,
    pub pw1: LinearIdx,
    pub dw_w: PIdx,
    pub dw_b: PIdx,
    pub mid_norm: NormIdx,
    pub pw2: LinearIdx,
    pub kernel: usize,
}

#[derive(Debug, Clone)]
pub struct BlockIdx {
    pub ffn1: FfnIdx,
    pub mhsa: MhsaIdx,
    pub conv: ConvIdx,
    pub ffn2: FfnIdx,
    pub final_norm: NormIdx,
    pub dim: usize,
}

impl BlockIdx {
    pub fn new(
        p: &mut Params,
        prefix: &str,
        dim: usize,
        heads: usize,
        kernel: usize,
        expansion: usize,
        rng: &mut Rng,
    ) -> Self {
        let ffn = |p: &mut Params, pre: String, rng: &mut Rng| FfnIdx {
            norm: p.norm(&format!("{pre}.norm"), dim),
            lin1: p.linear(&format!("{pre}.lin1"), dim, dim * expansion, rng),
            lin2: p.linear(&format!("{pre}.lin2"), dim * expansion, dim, rng),
        };
        let ffn1 = ffn(p, format!("{prefix}.ffn1"), rng);
        let mhsa = MhsaIdx {
            norm: p.norm(&format!("{prefix}.mhsa.norm"), dim),
            wq: p.linear(&format!("{prefix}.mhsa.wq"), dim, dim, rng),
            wk: p.linear(&format!("{prefix}.mhsa.wk"), dim, dim, rng),
            wv: p.linear(&format!("{prefix}.mhsa.wv"), dim, dim, rng),
            wo: p.linear(&format!("{prefix}.mhsa.wo"), dim, dim, rng),
            rel_bias: p.zeros(
                format!("{prefix}.mhsa.rel_bias"),
                vec![(2 * REL_CLIP + 1) as usize, heads],
            ),
            heads,
        };
        let conv = ConvIdx {
            norm: p.norm(&format!("{prefix}.conv.norm"), dim),
            pw1: p.linear(&format!("{prefix}.conv.pw1"), dim, 2 * dim, rng),
            dw_w: p.randn(format!("{prefix}.conv.dw.w"), vec![kernel, dim], kernel, rng),
            dw_b: p.zeros(format!("{prefix}.conv.dw.b"), vec![dim]),
            mid_norm: p.norm(&format!("{prefix}.conv.mid_norm"), dim),
            pw2: p.linear(&format!("{prefix}.conv.pw2"), dim, dim, rng),
            kernel,
        };
        let ffn2 = ffn(p, format!("{prefix}.ffn2"), rng);
        let final_norm = p.norm(&format!("{prefix}.final_norm"), dim);
        BlockIdx { ffn1, mhsa, conv, ffn2, final_norm, dim }
    }
}

/// Row-major T x T boolean mask: true = attention allowed.
pub fn attention_mask(num_frames: usize, mode: Mode) -> Vec<bool> {
    let mut mask = vec![false; num_frames * num_frames];
    for i in 0..num_frames {
        for j in 0..num_frames {
            mask[i * num_frames + j] = match mode {
                Mode::Causal => j <= i,
                Mode::Noncausal => true,
            };
        }
    }
    mask
}

fn half_ffn(f: &mut Fwd, ffn: &FfnIdx, x: ValueId) -> ValueId {
    let n = f.norm(&ffn.norm, x);
    let h = f.linear(&ffn.lin1, n);
    let h = f.tape.swish(h);
    let h = f.drop(h);
    let h = f.linear(&ffn.lin2, h);
    let h = f.drop(h);
    let half = f.tape.affine(h, 0.5, 0.0);
    f.tape.add(x, half)
}

fn mhsa(f: &mut Fwd, m: &MhsaIdx, x: ValueId, mode: Mode) -> ValueId {
    let t = f.tape.value(x).rows();
    let d = f.tape.value(x).cols();
    let heads = m.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mask = attention_mask(t, mode);

    let n = f.norm(&m.norm, x);
    let q = f.linear(&m.wq, n);
    let k = f.linear(&m.wk, n);
    let v = f.linear(&m.wv, n);

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = f.tape.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = f.tape.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = f.tape.slice_cols(v, h * dh, (h + 1) * dh);
        let scores = f.tape.matmul(qh, kh, false, true);
        let scores = f.tape.affine(scores, scale, 0.0);
        // learned bias per clipped relative offset j - i
        let idx: Vec<usize> = (0..t)
            .flat_map(|i| {
                (0..t).map(move |j| {
                    let off = (j as isize - i as isize).clamp(-REL_CLIP, REL_CLIP) + REL_CLIP;
                    off as usize * heads + h
                })
            })
            .collect();
        let bias = f.tape.gather(f.ids[m.rel_bias], idx, vec![t, t]);
        let scores = f.tape.add(scores, bias);
        let attn = f.tape.masked_softmax_rows(scores, mask.clone());
        head_outs.push(f.tape.matmul(attn, vh, false, false));
    }
    let ctx = f.tape.concat_cols(&head_outs);
    let out = f.linear(&m.wo, ctx);
    let out = f.drop(out);
    f.tape.add(x, out)
}

fn conv_module(f: &mut Fwd, c: &ConvIdx, x: ValueId, mode: Mode) -> ValueId {
    let n = f.norm(&c.norm, x);
    let h = f.linear(&c.pw1, n);
    let d = f.tape.value(x).cols();
    // GLU: first half gated by sigmoid of second half
    let a = f.tape.slice_cols(h, 0, d);
    let b = f.tape.slice_cols(h, d, 2 * d);
    let g = f.tape.sigmoid(b);
    let gated = f.tape.mul(a, g);
    let pad_left = match mode {
        Mode::Causal => c.kernel - 1,
        Mode::Noncausal => (c.kernel - 1) / 2,
    };
    let conv = f
        .tape
        .depthwise_conv1d(gated, f.ids[c.dw_w], f.ids[c.dw_b], pad_left);
    let conv = f.norm(&c.mid_norm, conv);
    let conv = f.tape.swish(conv);
    let out = f.linear(&c.pw2, conv);
    let out = f.drop(out);
    f.tape.add(x, out)
}

/// One conformer block. Input and output are T' x D.
pub fn block_forward(f: &mut Fwd, b: &BlockIdx, x: ValueId, mode: Mode) -> ValueId {
    assert_eq!(f.tape.value(x).cols(), b.dim, "block width mismatch");
    let x = half_ffn(f, &b.ffn1, x);
    let x = mhsa(f, &b.mhsa, x, mode);
    let x = conv_module(f, &b.conv, x, mode);
    let x = half_ffn(f, &b.ffn2, x);
    f.norm(&b.final_norm, x)
}

pub fn encoder_forward(f: &mut Fwd, blocks: &[BlockIdx], x: ValueId, mode: Mode) -> ValueId {
    let mut h = x;
    for b in blocks {
        h = block_forward(f, b, h, mode);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_grad;
    use crate::tensor::{Tape, Tensor};

    fn tiny_block(rng: &mut Rng) -> (Params, BlockIdx) {
        let mut p = Params::new();
        let b = BlockIdx::new(&mut p, "blk", 8, 2, 3, 2, rng);
        (p, b)
    }

    fn run_block(p: &Params, b: &BlockIdx, x: &Tensor, mode: Mode) -> Tensor {
        let mut tape = Tape::new();
        let ids = p.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let mut f = Fwd::inference(&mut tape, &ids);
        let y = block_forward(&mut f, b, xv, mode);
        tape.value(y).clone()
    }

    #[test]
    fn mask_shapes_and_counts() {
        let c = attention_mask(3, Mode::Causal);
        assert_eq!(c.iter().filter(|&&m| m).count(), 6);
        for i in 0..3 {
            let row_allowed = c[i * 3..(i + 1) * 3].iter().filter(|&&m| m).count();
            assert_eq!(row_allowed, i + 1);
        }
        let n = attention_mask(3, Mode::Noncausal);
        assert_eq!(n.iter().filter(|&&m| m).count(), 9);
    }

    #[test]
    fn block_preserves_shape_and_is_deterministic() {
        let mut rng = Rng::new(21);
        let (p, b) = tiny_block(&mut rng);
        let x = Tensor::randn(vec![5, 8], 1.0, &mut rng);
        let y1 = run_block(&p, &b, &x, Mode::Noncausal);
        let y2 = run_block(&p, &b, &x, Mode::Noncausal);
        assert_eq!(y1.shape, x.shape);
        assert_eq!(y1, y2);
    }

    #[test]
    fn causal_block_ignores_future_exactly() {
        let mut rng = Rng::new(22);
        let (p, b) = tiny_block(&mut rng);
        let x = Tensor::randn(vec![6, 8], 1.0, &mut rng);
        let y_full = run_block(&p, &b, &x, Mode::Causal);
        // zero out frames beyond t=2; rows 0..=2 must be bit-identical
        let mut x2 = x.clone();
        for v in x2.data[3 * 8..].iter_mut() {
            *v = -5.0;
        }
        let y_cut = run_block(&p, &b, &x2, Mode::Causal);
        assert_eq!(&y_full.data[..3 * 8], &y_cut.data[..3 * 8]);
        // and a non-causal block must differ somewhere in those rows
        let nf = run_block(&p, &b, &x, Mode::Noncausal);
        let nc = run_block(&p, &b, &x2, Mode::Noncausal);
        assert_ne!(&nf.data[..3 * 8], &nc.data[..3 * 8]);
    }

    #[test]
    fn gradcheck_block_parameters() {
        // pack a whole block's parameters as check_grad inputs
        let mut rng = Rng::new(23);
        let (p, b) = tiny_block(&mut rng);
        let x = Tensor::randn(vec![3, 8], 0.8, &mut rng);
        let tensors: Vec<Tensor> = p.iter().map(|(_, t)| t.clone()).collect();
        let mut inputs = tensors.clone();
        inputs.push(x);
        for mode in [Mode::Causal, Mode::Noncausal] {
            check_grad("conformer_block", &inputs, 1e-2, |tape, ids| {
                let (param_ids, x_id) = ids.split_at(ids.len() - 1);
                let mut f = Fwd::inference(tape, param_ids);
                let y = block_forward(&mut f, &b, x_id[0], mode);
                let sq = f.tape.mul(y, y);
                f.tape.mean_all(sq)
            });
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let mut rng = Rng::new(24);
        let (p, b) = tiny_block(&mut rng);
        let x = Tensor::randn(vec![4, 8], 1.0, &mut rng);
        // training with dropout: two different rng streams differ
        let run_train = |seed: u64| {
            let mut tape = Tape::new();
            let ids = p.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let mut drng = Rng::new(seed);
            let mut f = Fwd::training(&mut tape, &ids, 0.5, &mut drng);
            let y = block_forward(&mut f, &b, xv, Mode::Noncausal);
            tape.value(y).clone()
        };
        assert_ne!(run_train(1).data, run_train(2).data);
        assert_eq!(run_train(3), run_train(3));
        // eval path ignores dropout entirely
        let e1 = run_block(&p, &b, &x, Mode::Noncausal);
        let e2 = run_block(&p, &b, &x, Mode::Noncausal);
        assert_eq!(e1, e2);
    }
}
