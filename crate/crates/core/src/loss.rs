//! Transducer negative log-likelihood over the (t, u) lattice.
//!
//! A lattice holds log P(k | t, u) for every frame t, prefix length u and
//! output symbol k (blank = 0). The loss is the log-space forward recursion
//!
//! ```text
//! a(0,0) = 0
//! a(t,u) = lse( a(t-1,u) + lp(t-1,u,blank),  a(t,u-1) + lp(t,u-1,y_u) )
//! loss   = -( a(T-1,U) + lp(T-1,U,blank) )
//! ```
//!
//! i.e. every complete alignment interleaves U label emissions with T-1
//! in-path blanks and ends with a final blank on the last frame, giving
//! C(T-1+U, U) alignments in total. `rnnt_loss_bruteforce` enumerates them
//! explicitly in the linear domain as an independent oracle.

use crate::decoder::{joint_forward, JointIdx};
use crate::error::{Error, Result};
use crate::params::Fwd;
use crate::tensor::{Tape, Tensor, ValueId};

pub const BRUTEFORCE_MAX_FRAMES: usize = 6;
pub const BRUTEFORCE_MAX_LABELS: usize = 5;

/// Log-posterior grid. `log_probs` has one row per (t, u) node, laid out
/// t * (u_len + 1) + u, each row a normalized log-distribution over vocab.
#[derive(Debug, Clone, Copy)]
pub struct Lattice {
    pub t_frames: usize,
    pub u_len: usize,
    pub vocab: usize,
    pub log_probs: ValueId,
}

/// Joint logits over the full grid, temperature-scaled, log-normalized.
pub fn build_lattice(
    f: &mut Fwd,
    joint: &JointIdx,
    enc: ValueId,
    pred: ValueId,
    temperature: f32,
) -> Result<Lattice> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::usage(format!("temperature must be positive, got {temperature}")));
    }
    let t_frames = f.tape.value(enc).rows();
    let pred_rows = f.tape.value(pred).rows();
    if pred_rows == 0 {
        return Err(Error::usage("predictor rows empty"));
    }
    let logits = joint_forward(f, joint, enc, pred)?;
    let scaled = if temperature == 1.0 {
        logits
    } else {
        f.tape.affine(logits, 1.0 / temperature, 0.0)
    };
    let log_probs = f.tape.log_softmax_rows(scaled);
    Ok(Lattice { t_frames, u_len: pred_rows - 1, vocab: joint.vocab, log_probs })
}

/// Wrap an externally produced logits grid (rows t*(u_len+1)+u) as a lattice.
pub fn lattice_from_logits(
    tape: &mut Tape,
    logits: ValueId,
    t_frames: usize,
    u_len: usize,
) -> Result<Lattice> {
    let v = tape.value(logits);
    if v.rows() != t_frames * (u_len + 1) {
        return Err(Error::usage(format!(
            "logit grid has {} rows, expected {}",
            v.rows(),
            t_frames * (u_len + 1)
        )));
    }
    let vocab = v.cols();
    let log_probs = tape.log_softmax_rows(logits);
    Ok(Lattice { t_frames, u_len, vocab, log_probs })
}

fn check_labels(lat: &Lattice, labels: &[usize]) -> Result<()> {
    if labels.len() != lat.u_len {
        return Err(Error::usage(format!(
            "label length {} != lattice u_len {}",
            labels.len(),
            lat.u_len
        )));
    }
    for &l in labels {
        if l == 0 || l >= lat.vocab {
            return Err(Error::usage(format!("label {l} out of range [1, {})", lat.vocab)));
        }
    }
    Ok(())
}

/// Negative log-likelihood of `labels` under the lattice, differentiable
/// with respect to the lattice log-probs (and anything upstream of them).
pub fn rnnt_loss(tape: &mut Tape, lat: &Lattice, labels: &[usize]) -> Result<ValueId> {
    check_labels(lat, labels)?;
    if lat.t_frames == 0 {
        return Err(Error::Infeasible(
            "no frames: lattice admits no alignment".into(),
        ));
    }
    let (t_n, u_n, v) = (lat.t_frames, lat.u_len, lat.vocab);
    let row = |t: usize, u: usize| (t * (u_n + 1) + u) * v;

    // scalar nodes for every lattice entry the recursion touches
    let blank_at = |tape: &mut Tape, t: usize, u: usize| tape.select(lat.log_probs, row(t, u));
    let label_at =
        |tape: &mut Tape, t: usize, u: usize| tape.select(lat.log_probs, row(t, u) + labels[u]);

    // alpha[u] holds a(t, u) for the current t
    let mut alpha: Vec<ValueId> = Vec::with_capacity(u_n + 1);
    alpha.push(tape.constant(Tensor::scalar(0.0)));
    for u in 1..=u_n {
        let lp = label_at(tape, 0, u - 1);
        alpha.push(tape.add(alpha[u - 1], lp));
    }
    for t in 1..t_n {
        let lp = blank_at(tape, t - 1, 0);
        let mut next = Vec::with_capacity(u_n + 1);
        next.push(tape.add(alpha[0], lp));
        for u in 1..=u_n {
            let lp_b = blank_at(tape, t - 1, u);
            let stay = tape.add(alpha[u], lp_b);
            let lp_y = label_at(tape, t, u - 1);
            let advance = tape.add(next[u - 1], lp_y);
            next.push(tape.logsumexp2(stay, advance));
        }
        alpha = next;
    }
    let final_blank = blank_at(tape, t_n - 1, u_n);
    let total = tape.add(alpha[u_n], final_blank);
    Ok(tape.affine(total, -1.0, 0.0))
}

/// Exhaustive alignment-enumeration oracle. Walks every monotonic path from
/// (0,0) to the terminal state in the linear probability domain (f64),
/// returning the negative log of the summed path mass and the path count.
///
/// Refuses instances beyond T=6 frames or U=5 labels.
pub fn rnnt_loss_bruteforce(
    log_probs: &Tensor,
    t_frames: usize,
    labels: &[usize],
) -> Result<(f64, u64)> {
    let u_n = labels.len();
    if t_frames > BRUTEFORCE_MAX_FRAMES || u_n > BRUTEFORCE_MAX_LABELS {
        return Err(Error::usage(format!(
            "instance T={t_frames}, U={u_n} exceeds enumeration bound {BRUTEFORCE_MAX_FRAMES}x{BRUTEFORCE_MAX_LABELS}"
        )));
    }
    if t_frames == 0 {
        return Err(Error::Infeasible("no frames: lattice admits no alignment".into()));
    }
    let v = log_probs.cols();
    if log_probs.rows() != t_frames * (u_n + 1) {
        return Err(Error::usage("log_probs rows inconsistent with T and U"));
    }
    for &l in labels {
        if l == 0 || l >= v {
            return Err(Error::usage(format!("label {l} out of range [1, {v})")));
        }
    }
    let lp = |t: usize, u: usize, k: usize| log_probs.data[(t * (u_n + 1) + u) * v + k] as f64;

    let mut mass = 0.0f64;
    let mut count = 0u64;
    // stack of (t, u, accumulated linear probability)
    let mut stack = vec![(0usize, 0usize, 1.0f64)];
    while let Some((t, u, p)) = stack.pop() {
        if t == t_frames {
            // consumed all frames via the terminal blank
            debug_assert_eq!(u, u_n);
            mass += p;
            count += 1;
            continue;
        }
        if u < u_n {
            stack.push((t, u + 1, p * lp(t, u, labels[u]).exp()));
        }
        // blank moves to the next frame; from the last frame it is only
        // legal once every label has been emitted
        if t + 1 < t_frames || u == u_n {
            stack.push((t + 1, u, p * lp(t, u, 0).exp()));
        }
    }
    Ok((-mass.ln(), count))
}

/// Weighted combination of the two branch losses.
pub fn cascaded_loss(
    tape: &mut Tape,
    loss_causal: ValueId,
    loss_noncausal: ValueId,
    causal_weight: f32,
) -> Result<ValueId> {
    if !(0.0..=1.0).contains(&causal_weight) {
        return Err(Error::usage(format!(
            "causal weight must lie in [0, 1], got {causal_weight}"
        )));
    }
    let a = tape.affine(loss_causal, causal_weight, 0.0);
    let b = tape.affine(loss_noncausal, 1.0 - causal_weight, 0.0);
    Ok(tape.add(a, b))
}

/// C(n, k) in u64; panics on overflow (fine at enumeration scale).
pub fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k.min(n));
    let mut acc = 1u64;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_grad;
    use crate::rng::Rng;

    /// Normalized random log-prob grid for T x (U+1) nodes over V symbols.
    fn random_log_probs(t: usize, u: usize, v: usize, rng: &mut Rng) -> Tensor {
        let logits = Tensor::randn(vec![t * (u + 1), v], 1.5, rng);
        let mut tape = Tape::new();
        let id = tape.constant(logits);
        let lp = tape.log_softmax_rows(id);
        tape.value(lp).clone()
    }

    fn loss_of(log_probs: &Tensor, t: usize, labels: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let id = tape.constant(log_probs.clone());
        let lat = Lattice {
            t_frames: t,
            u_len: labels.len(),
            vocab: log_probs.cols(),
            log_probs: id,
        };
        let l = rnnt_loss(&mut tape, &lat, labels).unwrap();
        tape.scalar_value(l)
    }

    #[test]
    fn single_blank_emission_uniform() {
        // one frame, no labels, uniform over two symbols: the only path is
        // the terminal blank, probability 1/2
        let lp = Tensor::new(vec![1, 2], vec![0.5f32.ln(), 0.5f32.ln()]);
        let loss = loss_of(&lp, 1, &[]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-6, "{loss}");
        let (brute, count) = rnnt_loss_bruteforce(&lp, 1, &[]).unwrap();
        assert!((brute - std::f64::consts::LN_2).abs() < 1e-6);
        assert_eq!(count, 1);
    }

    #[test]
    fn two_frames_one_label_uniform() {
        // T=2, U=1, uniform over V=2. Complete alignments end with a blank
        // on the last frame: (y, b, B) and (b, y, B) — two paths at
        // (1/2)^3, so loss = -ln(2/8) = ln 4.
        let half = 0.5f32.ln();
        let lp = Tensor::new(vec![4, 2], vec![half; 8]);
        let loss = loss_of(&lp, 2, &[1]);
        assert!((loss - 4.0f64.ln()).abs() < 1e-6, "{loss}");
        let (brute, count) = rnnt_loss_bruteforce(&lp, 2, &[1]).unwrap();
        assert!((brute - 4.0f64.ln()).abs() < 1e-6);
        assert_eq!(count, 2);
        assert_eq!(count, binomial(2, 1)); // C(T-1+U, U)
    }

    #[test]
    fn oracle_equivalence_random_instances() {
        let mut rng = Rng::new(401);
        for case in 0..200 {
            let t = 1 + (rng.uniform_range(0, 4) as usize);
            let u = rng.uniform_range(0, 4) as usize;
            let v = 2 + (rng.uniform_range(0, 3) as usize);
            let labels: Vec<usize> =
                (0..u).map(|_| 1 + rng.uniform_range(0, v as u64 - 2) as usize).collect();
            let lp = random_log_probs(t, u, v, &mut rng);
            let fast = loss_of(&lp, t, &labels);
            let (brute, count) = rnnt_loss_bruteforce(&lp, t, &labels).unwrap();
            let tol = 1e-6 * brute.abs().max(1.0);
            assert!(
                (fast - brute).abs() <= tol,
                "case {case}: T={t} U={u} V={v}: {fast} vs {brute}"
            );
            assert_eq!(count, binomial((t - 1 + u) as u64, u as u64), "case {case}");
        }
    }

    #[test]
    fn all_blank_paths_are_unique() {
        let mut rng = Rng::new(402);
        let lp = random_log_probs(4, 0, 3, &mut rng);
        let (_, count) = rnnt_loss_bruteforce(&lp, 4, &[]).unwrap();
        assert_eq!(count, 1);
    }

    #[test]
    fn loss_nonnegative_and_finite() {
        let mut rng = Rng::new(403);
        for _ in 0..20 {
            let lp = random_log_probs(4, 3, 5, &mut rng);
            let loss = loss_of(&lp, 4, &[1, 2, 3]);
            assert!(loss.is_finite() && loss >= 0.0, "{loss}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(404);
        let logits = Tensor::randn(vec![3 * 3, 4], 1.0, &mut rng);
        let labels = vec![2usize, 3];
        check_grad("rnnt_loss", &[logits], 1e-3, move |tape, ids| {
            let lat = lattice_from_logits(tape, ids[0], 3, 2).unwrap();
            rnnt_loss(tape, &lat, &labels).unwrap()
        });
    }

    #[test]
    fn more_likely_correct_label_never_hurts() {
        // moving probability mass from competing non-blank symbols onto the
        // reference label (blank mass held fixed) must not increase the loss:
        // competing symbols lie on no alignment path
        let mut rng = Rng::new(405);
        for case in 0..30 {
            let (t, u, v) = (3, 2, 4);
            let labels = vec![1usize, 3];
            let base = random_log_probs(t, u, v, &mut rng);
            let (before, _) = rnnt_loss_bruteforce(&base, t, &labels).unwrap();

            // pick a node and donate half of a competitor's mass to y_u
            let node_t = rng.uniform_range(0, t as u64 - 1) as usize;
            let node_u = rng.uniform_range(0, u as u64 - 1) as usize;
            let y = labels[node_u];
            let competitor = (1..v).find(|&k| k != y).unwrap();
            let mut probs: Vec<f64> = (0..v)
                .map(|k| (base.data[(node_t * (u + 1) + node_u) * v + k] as f64).exp())
                .collect();
            let delta = 0.5 * probs[competitor];
            probs[competitor] -= delta;
            probs[y] += delta;
            let mut bumped = base.clone();
            for k in 0..v {
                bumped.data[(node_t * (u + 1) + node_u) * v + k] = probs[k].ln() as f32;
            }
            let (after, _) = rnnt_loss_bruteforce(&bumped, t, &labels).unwrap();
            assert!(
                after <= before + 1e-6,
                "case {case}: loss rose from {before} to {after}"
            );
        }
    }

    #[test]
    fn cascaded_combination() {
        let mut tape = Tape::new();
        let lc = tape.constant(Tensor::scalar(2.0));
        let ln = tape.constant(Tensor::scalar(1.0));
        let w = cascaded_loss(&mut tape, lc, ln, 0.8).unwrap();
        assert!((tape.scalar_value(w) - 1.8).abs() < 1e-6);
        let full = cascaded_loss(&mut tape, lc, ln, 1.0).unwrap();
        assert!((tape.scalar_value(full) - 2.0).abs() < 1e-6);
        let none = cascaded_loss(&mut tape, lc, ln, 0.0).unwrap();
        assert!((tape.scalar_value(none) - 1.0).abs() < 1e-6);
        assert!(cascaded_loss(&mut tape, lc, ln, 1.2).is_err());
        assert!(cascaded_loss(&mut tape, lc, ln, -0.1).is_err());
    }

    #[test]
    fn error_paths() {
        let mut rng = Rng::new(406);
        let lp = random_log_probs(2, 1, 3, &mut rng);
        let mut tape = Tape::new();
        let id = tape.constant(lp.clone());
        let lat = Lattice { t_frames: 2, u_len: 1, vocab: 3, log_probs: id };
        assert!(rnnt_loss(&mut tape, &lat, &[]).is_err()); // length mismatch
        assert!(rnnt_loss(&mut tape, &lat, &[0]).is_err()); // blank as label
        assert!(rnnt_loss(&mut tape, &lat, &[5]).is_err()); // out of vocab

        let empty = Lattice { t_frames: 0, u_len: 1, vocab: 3, log_probs: id };
        match rnnt_loss(&mut tape, &empty, &[1]) {
            Err(Error::Infeasible(_)) => {}
            other => panic!("expected infeasible, got {other:?}"),
        }

        // enumeration bound refusal
        let big = random_log_probs(7, 0, 3, &mut rng);
        assert!(rnnt_loss_bruteforce(&big, 7, &[]).is_err());
        let wide = random_log_probs(2, 6, 8, &mut rng);
        assert!(rnnt_loss_bruteforce(&wide, 2, &[1, 2, 3, 4, 5, 6]).is_err());
    }

    #[test]
    fn build_lattice_normalizes_and_scales() {
        use crate::config::{DecoderConfig, ModelConfig};
        use crate::decoder::build_decoder;
        use crate::params::Params;

        let cfg = ModelConfig {
            feat_dim: 6,
            subsample_factor: 2,
            d_model: 8,
            num_heads: 2,
            conv_kernel: 3,
            ffn_expansion: 2,
            causal_layers: 1,
            noncausal_layers: 1,
            vocab_size: 5,
            decoder: DecoderConfig::Tar { embed_dim: 6, context: 5, heads: 4, tied: true },
        };
        let mut rng = Rng::new(407);
        let mut p = Params::new();
        let (dec, joint) = build_decoder(&mut p, &cfg, &mut rng);
        let enc_t = Tensor::randn(vec![3, 8], 0.8, &mut rng);

        let run = |p: &Params, temp: f32| {
            let mut tape = Tape::new();
            let ids = p.bind(&mut tape, false);
            let mut f = Fwd::inference(&mut tape, &ids);
            let pred = crate::decoder::predict(&mut f, &dec, &[1, 2]).unwrap();
            let enc = f.tape.constant(enc_t.clone());
            let lat = build_lattice(&mut f, &joint, enc, pred, temp).unwrap();
            assert_eq!(lat.t_frames, 3);
            assert_eq!(lat.u_len, 2);
            tape.value(lat.log_probs).clone()
        };

        let lp = run(&p, 1.0);
        assert_eq!(lp.shape, vec![9, 5]);
        for r in 0..9 {
            let s: f64 = lp.row(r).iter().map(|v| (*v as f64).exp()).sum();
            assert!((s - 1.0).abs() < 1e-5, "row {r} sums to {s}");
        }
        // higher temperature flattens every row distribution
        let hot = run(&p, 4.0);
        for r in 0..9 {
            let spread = |row: &[f32]| {
                let mx = row.iter().cloned().fold(f32::MIN, f32::max);
                let mn = row.iter().cloned().fold(f32::MAX, f32::min);
                mx - mn
            };
            assert!(spread(hot.row(r)) < spread(lp.row(r)));
        }
        // invalid temperatures refused
        let mut tape = Tape::new();
        let ids = p.bind(&mut tape, false);
        let mut f = Fwd::inference(&mut tape, &ids);
        let pred = crate::decoder::predict(&mut f, &dec, &[1]).unwrap();
        let enc = f.tape.constant(enc_t.clone());
        assert!(build_lattice(&mut f, &joint, enc, pred, 0.0).is_err());
        assert!(build_lattice(&mut f, &joint, enc, pred, -1.0).is_err());
    }
}
