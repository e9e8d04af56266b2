//! Flat named parameter storage and the forward-pass context.
//!
//! Every model parameter lives in one `Params` registry as a named tensor;
//! sub-modules hold plain indices into it. Weight tying is a shared index
//! (single storage, counted once). A forward pass binds the registry onto a
//! tape (trainable leaves for the model being optimized, constants for
//! frozen teachers and plain inference) and threads dropout state.

use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, ValueId};

/// Index of a parameter in the registry.
pub type PIdx = usize;

#[derive(Debug, Clone)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Dense layer: w is `in × out`, bias is `out`.
#[derive(Debug, Clone, Copy)]
pub struct LinearIdx {
    pub w: PIdx,
    pub b: PIdx,
}

/// Layer-norm scale/shift pair.
#[derive(Debug, Clone, Copy)]
pub struct NormIdx {
    pub gamma: PIdx,
    pub beta: PIdx,
}

impl Params {
    pub fn new() -> Self {
        Params { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> PIdx {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Gaussian-initialized tensor, std = scale / sqrt(fan_in).
    pub fn randn(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut Rng,
    ) -> PIdx {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> PIdx {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn linear(
        &mut self,
        prefix: &str,
        dim_in: usize,
        dim_out: usize,
        rng: &mut Rng,
    ) -> LinearIdx {
        let w = self.randn(format!("{prefix}.w"), vec![dim_in, dim_out], dim_in, rng);
        let b = self.zeros(format!("{prefix}.b"), vec![dim_out]);
        LinearIdx { w, b }
    }

    pub fn norm(&mut self, prefix: &str, dim: usize) -> NormIdx {
        let gamma = self.add(format!("{prefix}.gamma"), Tensor::new(vec![dim], vec![1.0; dim]));
        let beta = self.zeros(format!("{prefix}.beta"), vec![dim]);
        NormIdx { gamma, beta }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: PIdx) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: PIdx) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: PIdx) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn index_of(&self, name: &str) -> Option<PIdx> {
        self.names.iter().position(|n| n == name)
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Push every parameter onto the tape; trainable -> gradient-tracked
    /// leaves, otherwise constants (frozen teacher / inference).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<ValueId> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// Forward-pass context: a tape, the bound parameter ids, and training
/// state (dropout probability + its RNG stream). `rng == None` is the
/// evaluation path: dropout is skipped entirely, bit-exactly.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub ids: &'a [ValueId],
    pub dropout: f64,
    pub rng: Option<&'a mut Rng>,
}

impl<'a> Fwd<'a> {
    pub fn inference(tape: &'a mut Tape, ids: &'a [ValueId]) -> Self {
        Fwd { tape, ids, dropout: 0.0, rng: None }
    }

    pub fn training(
        tape: &'a mut Tape,
        ids: &'a [ValueId],
        dropout: f64,
        rng: &'a mut Rng,
    ) -> Self {
        Fwd { tape, ids, dropout, rng: Some(rng) }
    }

    pub fn id(&self, p: PIdx) -> ValueId {
        self.ids[p]
    }

    pub fn drop(&mut self, x: ValueId) -> ValueId {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => self.tape.dropout(x, self.dropout, rng),
            _ => x,
        }
    }

    pub fn linear(&mut self, l: &LinearIdx, x: ValueId) -> ValueId {
        let y = self.tape.matmul(x, self.ids[l.w], false, false);
        self.tape.bias_add(y, self.ids[l.b])
    }

    pub fn norm(&mut self, n: &NormIdx, x: ValueId) -> ValueId {
        self.tape.layer_norm(x, self.ids[n.gamma], self.ids[n.beta])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_roundtrip_and_tying() {
        let mut rng = Rng::new(7);
        let mut p = Params::new();
        let a = p.randn("emb", vec![4, 3], 3, &mut rng);
        let lin = p.linear("proj", 3, 2, &mut rng);
        assert_eq!(p.len(), 3);
        assert_eq!(p.name(a), "emb");
        assert_eq!(p.index_of("proj.w"), Some(lin.w));
        assert_eq!(p.total_values(), 12 + 6 + 2);

        // a "tied" consumer reuses the same index: one storage object
        let tied: PIdx = a;
        p.tensor_mut(tied).data[0] = 42.0;
        assert_eq!(p.tensor(a).data[0], 42.0);
    }

    #[test]
    fn bind_trainable_vs_frozen() {
        let mut rng = Rng::new(8);
        let mut p = Params::new();
        let w = p.randn("w", vec![2], 2, &mut rng);
        let mut tape = Tape::new();
        let trainable = p.bind(&mut tape, true);
        let frozen = p.bind(&mut tape, false);
        let y1 = tape.sum_all(trainable[w]);
        let y2 = tape.sum_all(frozen[w]);
        let y = tape.add(y1, y2);
        tape.backward(y);
        assert!(tape.grad(trainable[w]).is_some());
        assert!(tape.grad(frozen[w]).is_none());
    }

    #[test]
    fn eval_forward_has_no_dropout() {
        let mut rng = Rng::new(9);
        let mut p = Params::new();
        let lin = p.linear("l", 3, 3, &mut rng);
        let x = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let run = |p: &Params, x: &Tensor| {
            let mut tape = Tape::new();
            let ids = p.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let mut f = Fwd::inference(&mut tape, &ids);
            let y = f.linear(&lin, xv);
            tape.value(y).data.clone()
        };
        assert_eq!(run(&p, &x), run(&p, &x));
    }
}
