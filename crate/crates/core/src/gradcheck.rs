//! Finite-difference gradient oracle.
//!
//! Central differences in f64 around f32 parameter values. Used throughout
//! the test suite to validate every analytic backward pass against an
//! implementation-independent numerical estimate.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, ValueId};

/// Central-difference gradient of a scalar function at `x`.
///
/// Each coordinate is perturbed by ±eps in f32 space; the divisor is the
/// realized f32 spacing, which keeps the estimate honest when eps rounds.
/// Non-finite evaluations abort with the offending coordinate index.
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let mut grad = Tensor::zeros(x.shape.clone());
    let mut probe = x.clone();
    for i in 0..x.data.len() {
        let orig = x.data[i];
        let hi = (orig as f64 + eps) as f32;
        let lo = (orig as f64 - eps) as f32;
        probe.data[i] = hi;
        let f_hi = f(&probe)?;
        probe.data[i] = lo;
        let f_lo = f(&probe)?;
        probe.data[i] = orig;
        if !f_hi.is_finite() || !f_lo.is_finite() {
            return Err(Error::Numerical(format!(
                "finite difference produced non-finite value at coordinate {i} (f+={f_hi}, f-={f_lo})"
            )));
        }
        let denom = hi as f64 - lo as f64;
        grad.data[i] = ((f_hi - f_lo) / denom) as f32;
    }
    Ok(grad)
}

/// Test helper: build a scalar loss from leaves, compare the tape gradient
/// against the finite-difference oracle for every input tensor.
///
/// Tolerance per coordinate is max(rel * |fd|, abs); the builder must be
/// deterministic in its inputs.
pub fn check_grad<F>(label: &str, inputs: &[Tensor], eps: f64, build: F)
where
    F: Fn(&mut Tape, &[ValueId]) -> ValueId,
{
    let rel = 2e-2f64;
    let abs = 2e-3f64;

    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &ids);
    assert_eq!(tape.value(root).numel(), 1, "{label}: loss must be scalar");
    tape.backward(root);
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    for (which, input) in inputs.iter().enumerate() {
        let fd = finite_difference_gradient(
            &mut |probe: &Tensor| {
                let mut tape = Tape::new();
                let ids: Vec<ValueId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.leaf(if j == which { probe.clone() } else { t.clone() }))
                    .collect();
                let root = build(&mut tape, &ids);
                Ok(tape.scalar_value(root))
            },
            input,
            eps,
        )
        .unwrap_or_else(|e| panic!("{label}: finite difference failed: {e}"));

        // an absent gradient means the leaf never influenced the loss; the
        // oracle must agree it is zero everywhere
        let zeros;
        let a = if analytic[which].is_empty() {
            zeros = vec![0.0f32; fd.data.len()];
            &zeros
        } else {
            &analytic[which]
        };
        assert_eq!(a.len(), fd.data.len(), "{label}: input {which} gradient length mismatch");
        for i in 0..fd.data.len() {
            let got = a[i] as f64;
            let want = fd.data[i] as f64;
            let tol = (rel * want.abs()).max(abs);
            assert!(
                (got - want).abs() <= tol,
                "{label}: input {which} coord {i}: analytic {got} vs fd {want} (tol {tol})"
            );
        }
    }
}
