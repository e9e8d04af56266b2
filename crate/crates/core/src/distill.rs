//! Knowledge-distillation losses over posterior lattices.
//!
//! The full loss is the KL divergence between teacher and student
//! distributions summed over every lattice node. The efficient variant
//! collapses each node's distribution to three events — the correct next
//! label, blank, and everything else — before taking the KL, which is what
//! makes distillation affordable on large vocabularies. Teacher entries are
//! read as plain values and re-enter the graph as constants, so no gradient
//! can reach the teacher by construction.

use crate::error::{Error, Result};
use crate::loss::Lattice;
use crate::tensor::{Tape, Tensor, ValueId};

/// Floor applied to the collapsed remainder mass before its logarithm.
pub const REMAINDER_FLOOR: f32 = 1e-12;

fn check_same_grid(teacher: &Lattice, student: &Lattice) -> Result<()> {
    if teacher.t_frames != student.t_frames
        || teacher.u_len != student.u_len
        || teacher.vocab != student.vocab
    {
        return Err(Error::usage(format!(
            "lattice grids differ: teacher {}x{}x{}, student {}x{}x{}",
            teacher.t_frames,
            teacher.u_len,
            teacher.vocab,
            student.t_frames,
            student.u_len,
            student.vocab
        )));
    }
    Ok(())
}

/// Sum over the lattice of KL(teacher node || student node).
///
/// Computed as sum p_T * (ln p_T - ln p_S) with the teacher factors baked
/// into constants; when the two lattices hold identical values the
/// difference term is exactly zero everywhere.
pub fn full_lattice_kl(tape: &mut Tape, teacher: &Lattice, student: &Lattice) -> Result<ValueId> {
    check_same_grid(teacher, student)?;
    let t_vals = tape.value(teacher.log_probs).clone();
    let shape = t_vals.shape.clone();
    if shape != tape.value(student.log_probs).shape {
        return Err(Error::usage("lattice shapes differ"));
    }
    let probs: Vec<f32> = t_vals.data.iter().map(|v| (*v as f64).exp() as f32).collect();
    let t_probs = tape.constant(Tensor::new(shape.clone(), probs));
    let t_logs = tape.constant(t_vals);
    let diff = tape.sub(t_logs, student.log_probs);
    let weighted = tape.mul(t_probs, diff);
    Ok(tape.sum_all(weighted))
}

/// Teacher-side collapse mirroring the student tape arithmetic bit for bit:
/// exp and ln via f64, sums and clamps in f32.
fn collapse_remainder(lnb: f32, lny: Option<f32>) -> f32 {
    let qb = (lnb as f64).exp() as f32;
    let s = match lny {
        Some(l) => qb + ((l as f64).exp() as f32),
        None => qb,
    };
    let r = (-1.0f32) * s + 1.0f32;
    let rc = r.max(REMAINDER_FLOOR);
    (rc as f64).ln() as f32
}

/// Collapsed 3-way KL (label / blank / remainder) summed over the lattice;
/// nodes at u == U (no next label) collapse 2-way (blank / remainder).
pub fn efficient_kd(
    tape: &mut Tape,
    teacher: &Lattice,
    student: &Lattice,
    labels: &[usize],
) -> Result<ValueId> {
    check_same_grid(teacher, student)?;
    let (t_n, u_n, v) = (teacher.t_frames, teacher.u_len, teacher.vocab);
    if labels.len() != u_n {
        return Err(Error::usage(format!(
            "label length {} != lattice u_len {u_n}",
            labels.len()
        )));
    }
    for &l in labels {
        if l == 0 || l >= v {
            return Err(Error::usage(format!("label {l} out of range [1, {v})")));
        }
    }
    let t_vals = tape.value(teacher.log_probs).clone();
    if t_vals.shape != tape.value(student.log_probs).shape {
        return Err(Error::usage("lattice shapes differ"));
    }
    let base = |t: usize, u: usize| (t * (u_n + 1) + u) * v;

    // 3-way nodes (u < U) and 2-way nodes (u == U), vectorized separately
    let mut idx_b3 = Vec::new();
    let mut idx_y3 = Vec::new();
    let mut idx_b2 = Vec::new();
    for t in 0..t_n {
        for u in 0..u_n {
            idx_b3.push(base(t, u));
            idx_y3.push(base(t, u) + labels[u]);
        }
        idx_b2.push(base(t, u_n));
    }

    let mut terms: Vec<ValueId> = Vec::new();
    let mut push_group = |tape: &mut Tape, idx_b: &[usize], idx_y: Option<&[usize]>| {
        if idx_b.is_empty() {
            return;
        }
        let m = idx_b.len();
        let sh = vec![1usize, m];
        let lnb_s = tape.gather(student.log_probs, idx_b.to_vec(), sh.clone());
        let lny_s = idx_y.map(|iy| tape.gather(student.log_probs, iy.to_vec(), sh.clone()));
        // student remainder: 1 - p_blank (- p_label), floored
        let qb_s = tape.exp(lnb_s);
        let s_s = match lny_s {
            Some(l) => {
                let qy = tape.exp(l);
                tape.add(qb_s, qy)
            }
            None => qb_s,
        };
        let r_s = tape.affine(s_s, -1.0, 1.0);
        let rc_s = tape.clamp_min(r_s, REMAINDER_FLOOR);
        let lnr_s = tape.ln(rc_s);

        // teacher constants with identical arithmetic
        let lnb_t: Vec<f32> = idx_b.iter().map(|&i| t_vals.data[i]).collect();
        let lny_t: Option<Vec<f32>> =
            idx_y.map(|iy| iy.iter().map(|&i| t_vals.data[i]).collect());
        let lnr_t: Vec<f32> = (0..m)
            .map(|k| collapse_remainder(lnb_t[k], lny_t.as_ref().map(|l| l[k])))
            .collect();

        let mut add_event = |tape: &mut Tape, ln_t: &[f32], ln_s: ValueId| {
            let q_t: Vec<f32> = ln_t.iter().map(|v| (*v as f64).exp() as f32).collect();
            let c_ln = tape.constant(Tensor::new(sh.clone(), ln_t.to_vec()));
            let c_q = tape.constant(Tensor::new(sh.clone(), q_t));
            let diff = tape.sub(c_ln, ln_s);
            let weighted = tape.mul(c_q, diff);
            terms.push(tape.sum_all(weighted));
        };
        add_event(tape, &lnb_t, lnb_s);
        if let (Some(ly_t), Some(ly_s)) = (lny_t.as_ref(), lny_s) {
            add_event(tape, ly_t, ly_s);
        }
        add_event(tape, &lnr_t, lnr_s);
    };
    push_group(tape, &idx_b3, Some(&idx_y3));
    push_group(tape, &idx_b2, None);

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    Ok(total)
}

/// Combined objective: (1 - alpha) * transducer + alpha * distillation.
pub fn total_loss(
    tape: &mut Tape,
    rnnt: ValueId,
    distill: ValueId,
    alpha: f32,
) -> Result<ValueId> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::usage(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let a = tape.affine(rnnt, 1.0 - alpha, 0.0);
    let b = tape.affine(distill, alpha, 0.0);
    Ok(tape.add(a, b))
}
