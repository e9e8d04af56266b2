//! Training loop: Adam with linear warmup and inverse-square-root decay,
//! batch-mean cascaded transducer loss, optional distillation against a
//! frozen teacher, and a deterministic per-step metric stream (no
//! timestamps, so identical (config, seed, dataset) gives byte-identical
//! logs).

use serde::Serialize;

use crate::config::{ExperimentConfig, KdBranches, KdMode};
use crate::data::{spec_augment, Dataset};
use crate::distill::{efficient_kd, full_lattice_kl, total_loss};
use crate::error::{Error, Result};
use crate::loss::{build_lattice, cascaded_loss, rnnt_loss, Lattice};
use crate::model::CascadedModel;
use crate::params::Fwd;
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Tape, Tensor, ValueId};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// Linear warmup to `base`, then inverse-square-root decay.
pub fn lr_at(base: f64, warmup_steps: usize, step: usize) -> f64 {
    let w = warmup_steps.max(1) as f64;
    let s = (step + 1) as f64;
    base * (s / w).min((w / s).sqrt())
}

pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: usize,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update over parallel (theta, grad) slices.
    pub fn step(&mut self, thetas: &mut [&mut [f32]], grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let b1c = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let b2c = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (p, theta) in thetas.iter_mut().enumerate() {
            let g = &grads[p];
            for j in 0..theta.len() {
                let gj = g[j] as f64;
                let m = ADAM_BETA1 * self.m[p][j] as f64 + (1.0 - ADAM_BETA1) * gj;
                let v = ADAM_BETA2 * self.v[p][j] as f64 + (1.0 - ADAM_BETA2) * gj * gj;
                self.m[p][j] = m as f32;
                self.v[p][j] = v as f32;
                let update = lr * (m / b1c) / ((v / b2c).sqrt() + ADAM_EPS);
                theta[j] = (theta[j] as f64 - update) as f32;
            }
        }
    }
}

/// One training-step record. All values are batch means.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub rnnt_causal: f64,
    pub rnnt_noncausal: f64,
    pub kd: f64,
    pub lr: f64,
}

struct UttLoss {
    node: ValueId,
    rnnt_causal: f64,
    rnnt_noncausal: f64,
    kd: f64,
}

fn forward_one(
    tape: &mut Tape,
    model: &CascadedModel,
    ids: &[ValueId],
    teacher: Option<(&CascadedModel, &[ValueId])>,
    exp: &ExperimentConfig,
    feats: &Tensor,
    clean_feats: &Tensor,
    tokens: &[usize],
    drop_rng: &mut Rng,
) -> Result<UttLoss> {
    let tcfg = &exp.train;
    let (lat_c, lat_nc) = {
        let mut f = Fwd::training(tape, ids, tcfg.dropout, drop_rng);
        let enc_c = model.encode_causal(&mut f, feats)?;
        let enc_nc = model.encode_noncausal(&mut f, enc_c);
        let pred = model.predictor_rows(&mut f, tokens)?;
        let lat_c = build_lattice(&mut f, &model.joint, enc_c, pred, 1.0)?;
        let lat_nc = build_lattice(&mut f, &model.joint, enc_nc, pred, 1.0)?;
        (lat_c, lat_nc)
    };
    let l_c = rnnt_loss(tape, &lat_c, tokens)?;
    let l_nc = rnnt_loss(tape, &lat_nc, tokens)?;
    let cascaded = cascaded_loss(tape, l_c, l_nc, tcfg.causal_weight as f32)?;

    let mut out = UttLoss {
        node: cascaded,
        rnnt_causal: tape.scalar_value(l_c),
        rnnt_noncausal: tape.scalar_value(l_nc),
        kd: 0.0,
    };

    if let (Some(kd), Some((tm, tids))) = (&tcfg.kd, teacher) {
        let temp = kd.temperature as f32;
        // student lattices at the KD temperature; the unit-temperature
        // lattices above are reused when they coincide
        let (s_lat_c, s_lat_nc) = if (temp - 1.0).abs() < 1e-9 {
            (lat_c, lat_nc)
        } else {
            (relattice(tape, &lat_c, temp), relattice(tape, &lat_nc, temp))
        };
        // teacher runs in inference mode on the clean (un-augmented) view:
        // no dropout, bound as constants. Pairing a clean teacher with an
        // augmented student makes the KD targets carry information the hard
        // loss cannot see.
        let (t_lat_c, t_lat_nc) = {
            let mut f = Fwd::inference(tape, tids);
            let enc_c = tm.encode_causal(&mut f, clean_feats)?;
            let enc_nc = tm.encode_noncausal(&mut f, enc_c);
            let pred = tm.predictor_rows(&mut f, tokens)?;
            let c = build_lattice(&mut f, &tm.joint, enc_c, pred, temp)?;
            let nc = build_lattice(&mut f, &tm.joint, enc_nc, pred, temp)?;
            (c, nc)
        };
        let kd_of = |tape: &mut Tape, t: &Lattice, s: &Lattice| match kd.mode {
            KdMode::Efficient => efficient_kd(tape, t, s, tokens),
            KdMode::Full => full_lattice_kl(tape, t, s),
        };
        let kd_node = match kd.branches {
            KdBranches::Causal => kd_of(tape, &t_lat_c, &s_lat_c)?,
            KdBranches::Noncausal => kd_of(tape, &t_lat_nc, &s_lat_nc)?,
            KdBranches::Both => {
                let a = kd_of(tape, &t_lat_c, &s_lat_c)?;
                let b = kd_of(tape, &t_lat_nc, &s_lat_nc)?;
                cascaded_loss(tape, a, b, tcfg.causal_weight as f32)?
            }
        };
        out.kd = tape.scalar_value(kd_node);
        out.node = total_loss(tape, cascaded, kd_node, kd.alpha as f32)?;
    }
    Ok(out)
}

/// Re-temper a lattice. Log-softmax is shift-invariant, so its own output
/// rows serve as logits: log_softmax(rows / T) equals the lattice the joint
/// would produce at temperature T.
fn relattice(tape: &mut Tape, lat: &Lattice, temp: f32) -> Lattice {
    let scaled = tape.affine(lat.log_probs, 1.0 / temp, 0.0);
    Lattice { log_probs: tape.log_softmax_rows(scaled), ..*lat }
}

fn check_teacher_compat(student: &CascadedModel, teacher: &CascadedModel) -> Result<()> {
    let (s, t) = (&student.cfg, &teacher.cfg);
    if s.vocab_size != t.vocab_size {
        return Err(Error::Config(format!(
            "teacher vocab {} != student vocab {}",
            t.vocab_size, s.vocab_size
        )));
    }
    if s.subsample_factor != t.subsample_factor || s.feat_dim != t.feat_dim {
        return Err(Error::Config(
            "teacher and student must share feat_dim and subsample_factor \
             (their lattices must live on the same grid)"
                .into(),
        ));
    }
    Ok(())
}

/// Train a freshly initialized model (weights seeded from `train.seed`).
pub fn train_model(
    exp: &ExperimentConfig,
    dataset: &Dataset,
    teacher: Option<&CascadedModel>,
    on_step: &mut dyn FnMut(&StepMetrics),
) -> Result<CascadedModel> {
    exp.validate()?;
    let model = CascadedModel::new(&exp.model, exp.train.seed)?;
    train_from(exp, dataset, model, teacher, on_step)
}

/// Continue training from explicit initial weights. Used for warm starts and
/// for distilling a student initialized from a checkpoint.
pub fn train_from(
    exp: &ExperimentConfig,
    dataset: &Dataset,
    mut model: CascadedModel,
    teacher: Option<&CascadedModel>,
    on_step: &mut dyn FnMut(&StepMetrics),
) -> Result<CascadedModel> {
    exp.validate()?;
    if dataset.utterances.is_empty() {
        return Err(Error::usage("dataset is empty"));
    }
    if exp.train.kd.is_some() && teacher.is_none() {
        return Err(Error::Config("kd configured but no teacher supplied".into()));
    }
    if model.cfg != exp.model {
        return Err(Error::Config(
            "initial weights were built for a different model config".into(),
        ));
    }
    if let Some(t) = teacher {
        check_teacher_compat(&model, t)?;
    }

    let tcfg = &exp.train;
    let mut batch_rng = Rng::new(derive_seed(tcfg.seed, 0xBA7C4));
    let mut drop_rng = Rng::new(derive_seed(tcfg.seed, 0xD409));
    let aug_master = derive_seed(tcfg.seed, 0xA06);
    let mut adam = Adam::new(&model.params.iter().map(|(_, t)| t.numel()).collect::<Vec<_>>());
    let mut last_finite: Option<StepMetrics> = None;

    for step in 0..tcfg.steps {
        let mut tape = Tape::new();
        let ids = model.params.bind(&mut tape, true);
        let teacher_ids = teacher.map(|t| t.params.bind(&mut tape, false));

        let mut nodes = Vec::with_capacity(tcfg.batch_size);
        let (mut sum_c, mut sum_nc, mut sum_kd) = (0.0f64, 0.0f64, 0.0f64);
        for j in 0..tcfg.batch_size {
            let idx = batch_rng.uniform_range(0, dataset.utterances.len() as u64 - 1) as usize;
            let utt = &dataset.utterances[idx];
            let augmented = match &tcfg.augment {
                Some(a) => {
                    let seed =
                        derive_seed(aug_master, (step * tcfg.batch_size + j) as u64);
                    Some(spec_augment(
                        &utt.features,
                        a.time_masks,
                        a.time_width,
                        a.freq_masks,
                        a.freq_width,
                        seed,
                    )?)
                }
                None => None,
            };
            let ul = forward_one(
                &mut tape,
                &model,
                &ids,
                teacher.map(|t| (t, teacher_ids.as_deref().unwrap())),
                exp,
                augmented.as_ref().unwrap_or(&utt.features),
                &utt.features,
                &utt.tokens,
                &mut drop_rng,
            )?;
            sum_c += ul.rnnt_causal;
            sum_nc += ul.rnnt_noncausal;
            sum_kd += ul.kd;
            nodes.push(ul.node);
        }
        let mut total = nodes[0];
        for &n in &nodes[1..] {
            total = tape.add(total, n);
        }
        let mean = tape.affine(total, 1.0 / tcfg.batch_size as f32, 0.0);
        let loss = tape.scalar_value(mean);
        let b = tcfg.batch_size as f64;
        let lr = lr_at(tcfg.learning_rate, tcfg.warmup_steps, step);
        let metrics = StepMetrics {
            step,
            loss,
            rnnt_causal: sum_c / b,
            rnnt_noncausal: sum_nc / b,
            kd: sum_kd / b,
            lr,
        };
        if !loss.is_finite() {
            let last = last_finite
                .map(|m| format!("last finite step {} loss {:.6}", m.step, m.loss))
                .unwrap_or_else(|| "no finite step completed".into());
            return Err(Error::Numerical(format!(
                "training diverged at step {step} (loss {loss}); {last}"
            )));
        }

        tape.backward(mean);
        let wd = tcfg.weight_decay;
        let grads: Vec<Vec<f32>> = (0..model.params.len())
            .map(|i| {
                let theta = &model.params.tensor(i).data;
                let mut g = match tape.grad(ids[i]) {
                    Some(gr) => gr.to_vec(),
                    None => vec![0.0; theta.len()],
                };
                if wd > 0.0 {
                    for (gj, &tj) in g.iter_mut().zip(theta.iter()) {
                        *gj += (2.0 * wd * tj as f64) as f32;
                    }
                }
                g
            })
            .collect();
        drop(tape);
        let mut views: Vec<&mut [f32]> = model
            .params
            .tensors_mut()
            .iter_mut()
            .map(|t| t.data.as_mut_slice())
            .collect();
        adam.step(&mut views, &grads, lr);

        if step % tcfg.log_every == 0 || step + 1 == tcfg.steps {
            on_step(&metrics);
        }
        last_finite = Some(metrics);
    }
    Ok(model)
}
