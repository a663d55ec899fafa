//! Contrastive pre-training. One step processes one triplet: a capped set of
//! anchor patches, their aligned positives from the next capture of the same
//! region, and every patch of a different region as negatives (other anchors
//! in the batch also serve as negatives). Scalar reductions run in f64 so
//! tiny losses near convergence stay meaningful in the curve.
//!
//! Determinism contract: every random draw comes from a per-iteration
//! substream of the root seed, and parallel gradient work is reduced in
//! patch order, so results are independent of thread count and resuming
//! from a checkpoint replays the exact stream of an uninterrupted run.

use rand::Rng;
use rayon::prelude::*;

use crate::backbone::{encode_backward, encode_patch, encode_patch_traced, BackboneParams};
use crate::data::patches::{sample_triplet, LoadedCatalog, Triplet};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::num::{sgd_step_refs, Real, SgdState, Tensor};
use crate::resenc::{cumulative_residual, residual_backward, ClusterBank};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Upper bound on anchor patches drawn from one triplet per step.
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub temperature: f64,
    /// Side of the square training patches.
    pub train_patch: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Negatives drawn per anchor; None uses every available negative.
    pub negatives_per_anchor: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.6,
            weight_decay: 0.001,
            temperature: 0.05,
            train_patch: 7,
            seed: 0,
            checkpoint_every: 500,
            negatives_per_anchor: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::data(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::data("batch_size must be >= 1"));
        }
        if self.train_patch == 0 {
            return Err(Error::data("train_patch must be >= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::data("checkpoint_every must be >= 1"));
        }
        if self.negatives_per_anchor == Some(0) {
            return Err(Error::data("negatives_per_anchor must be >= 1 when set"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::data("learning rate must be finite and >= 0"));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::data("momentum must be in [0, 1)"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::data("weight decay must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Contrastive loss for one anchor: logits are the dot products against the
/// positive (first) and each negative, divided by the temperature; the loss
/// is the negative log-probability of the positive. Reductions in f64.
pub fn nce_loss<T: Real>(
    anchor: &Tensor<T>,
    positive: &Tensor<T>,
    negatives: &[Tensor<T>],
    temperature: f64,
) -> Result<f64> {
    let refs: Vec<&Tensor<T>> = negatives.iter().collect();
    let (loss, _) = nce_forward(anchor, positive, &refs, temperature)?;
    Ok(loss)
}

/// Shared forward: returns the loss and the softmax over [positive,
/// negatives...], from which every gradient follows.
fn nce_forward<T: Real>(
    anchor: &Tensor<T>,
    positive: &Tensor<T>,
    negatives: &[&Tensor<T>],
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    if negatives.is_empty() {
        return Err(Error::data("contrastive loss needs at least one negative"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::data("temperature must be positive"));
    }
    let d = anchor.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(Error::data("descriptor dimensions disagree in contrastive loss"));
    }

    let dot = |x: &Tensor<T>| -> f64 {
        x.data()
            .iter()
            .zip(anchor.data())
            .map(|(&a, &b)| a.to_f64() * b.to_f64())
            .sum()
    };
    let mut logits = Vec::with_capacity(1 + negatives.len());
    logits.push(dot(positive) / temperature);
    for n in negatives {
        logits.push(dot(n) / temperature);
    }

    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&u| (u - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[0];
    let softmax = logits.iter().map(|&u| (u - lse).exp()).collect();
    Ok((loss, softmax))
}

/// The contrastive loss and its gradients at the descriptor level.
pub struct NceBackward<T = f32> {
    pub loss: f64,
    pub grad_anchor: Tensor<T>,
    pub grad_positive: Tensor<T>,
    pub grad_negatives: Vec<Tensor<T>>,
}

pub fn nce_backward<T: Real>(
    anchor: &Tensor<T>,
    positive: &Tensor<T>,
    negatives: &[Tensor<T>],
    temperature: f64,
) -> Result<NceBackward<T>> {
    let refs: Vec<&Tensor<T>> = negatives.iter().collect();
    let (loss, softmax) = nce_forward(anchor, positive, &refs, temperature)?;
    let d = anchor.len();
    let a64: Vec<f64> = anchor.data().iter().map(|&v| v.to_f64()).collect();

    let mut grad_anchor = vec![0.0f64; d];
    let cand_grad = |coeff: f64, cand: &Tensor<T>, ga: &mut [f64]| -> Vec<T> {
        let mut g = Vec::with_capacity(d);
        for (j, &c) in cand.data().iter().enumerate() {
            ga[j] += coeff * c.to_f64();
            g.push(T::from_f64(coeff * a64[j]));
        }
        g
    };

    let coeff0 = (softmax[0] - 1.0) / temperature;
    let gp = cand_grad(coeff0, positive, &mut grad_anchor);
    let mut grad_negatives = Vec::with_capacity(negatives.len());
    for (i, n) in negatives.iter().enumerate() {
        let coeff = softmax[i + 1] / temperature;
        let gn = cand_grad(coeff, n, &mut grad_anchor);
        grad_negatives.push(Tensor::new(vec![d], gn)?);
    }

    Ok(NceBackward {
        loss,
        grad_anchor: Tensor::new(vec![d], grad_anchor.iter().map(|&v| T::from_f64(v)).collect())?,
        grad_positive: Tensor::new(vec![d], gp)?,
        grad_negatives,
    })
}

/// One anchor's contribution to one training step, as indices into the
/// step's shared patch list.
#[derive(Clone, Debug)]
pub struct AnchorPlan {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Gradients of the mean contrastive loss over a step's anchors.
pub struct StepGrads<T = f32> {
    pub loss: f64,
    pub backbone: BackboneParams<T>,
    /// Present only when the residual encoder is in the loss path.
    pub bank: Option<ClusterBank<T>>,
}

/// Forward-only restatement of the step loss; the finite-difference oracle
/// for `compute_step` and the shared definition of "the loss".
pub fn loss_forward<T: Real>(
    params: &BackboneParams<T>,
    bank: &ClusterBank<T>,
    model_cfg: &crate::model::ModelConfig,
    patches: &[Tensor<T>],
    plan: &[AnchorPlan],
    temperature: f64,
) -> Result<f64> {
    let mut reps = Vec::with_capacity(patches.len());
    for patch in patches {
        let z = encode_patch(params, &model_cfg.backbone, patch)?;
        if model_cfg.residual_encoder {
            reps.push(cumulative_residual(&z, bank)?.f);
        } else {
            reps.push(z);
        }
    }
    let mut total = 0.0f64;
    for p in plan {
        let negs: Vec<&Tensor<T>> = p.negatives.iter().map(|&i| &reps[i]).collect();
        let (loss, _) = nce_forward(&reps[p.anchor], &reps[p.positive], &negs, temperature)?;
        total += loss;
    }
    Ok(total / plan.len() as f64)
}

/// Full loss and gradient computation for one step. Three phases: parallel
/// traced encoding, sequential descriptor-level loss, parallel per-patch
/// backprop reduced in patch order.
pub fn compute_step<T: Real>(
    params: &BackboneParams<T>,
    bank: &ClusterBank<T>,
    model_cfg: &crate::model::ModelConfig,
    patches: &[Tensor<T>],
    plan: &[AnchorPlan],
    temperature: f64,
) -> Result<StepGrads<T>> {
    if plan.is_empty() {
        return Err(Error::data("training step needs at least one anchor"));
    }
    let residual = model_cfg.residual_encoder;

    let encoded: Vec<_> = patches
        .par_iter()
        .map(|patch| -> Result<_> {
            let trace = encode_patch_traced(params, &model_cfg.backbone, patch)?;
            let desc = if residual {
                Some(cumulative_residual(trace.descriptor(), bank)?)
            } else {
                None
            };
            Ok((trace, desc))
        })
        .collect::<Result<Vec<_>>>()?;

    let d = model_cfg.backbone.descriptor_dim;
    let reps64: Vec<Vec<f64>> = encoded
        .iter()
        .map(|(trace, desc)| {
            let f = desc.as_ref().map(|r| &r.f).unwrap_or_else(|| trace.descriptor());
            f.data().iter().map(|&v| v.to_f64()).collect()
        })
        .collect();

    let inv_k = 1.0 / plan.len() as f64;
    let mut grad_f = vec![vec![0.0f64; d]; patches.len()];
    let mut total = 0.0f64;
    for p in plan {
        let anchor = &reps64[p.anchor];
        let mut cands = Vec::with_capacity(1 + p.negatives.len());
        cands.push(p.positive);
        cands.extend_from_slice(&p.negatives);

        let mut logits = Vec::with_capacity(cands.len());
        for &c in &cands {
            let dot: f64 = anchor.iter().zip(&reps64[c]).map(|(a, b)| a * b).sum();
            logits.push(dot / temperature);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|&u| (u - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - logits[0];

        for (slot, &c) in cands.iter().enumerate() {
            let sigma = (logits[slot] - lse).exp();
            let coeff = if slot == 0 { sigma - 1.0 } else { sigma } / temperature * inv_k;
            let ga = &mut grad_f[p.anchor];
            for j in 0..d {
                ga[j] += coeff * reps64[c][j];
            }
            let gc = &mut grad_f[c];
            for j in 0..d {
                gc[j] += coeff * anchor[j];
            }
        }
    }
    let loss = total * inv_k;
    if !loss.is_finite() {
        return Err(Error::numerical(format!("contrastive loss is not finite: {loss}")));
    }

    let active: Vec<usize> = (0..patches.len())
        .filter(|&i| grad_f[i].iter().any(|&v| v != 0.0))
        .collect();
    let per_patch: Vec<(BackboneParams<T>, Option<(Tensor<T>, Tensor<T>)>)> = active
        .par_iter()
        .map(|&i| -> Result<_> {
            let (trace, _) = &encoded[i];
            let gf = Tensor::new(vec![d], grad_f[i].iter().map(|&v| T::from_f64(v)).collect())?;
            if residual {
                let back = residual_backward(trace.descriptor(), bank, &gf)?;
                let backbone = encode_backward(params, trace, &back.grad_z)?;
                Ok((backbone, Some((back.grad_centers, back.grad_log_smoothing))))
            } else {
                Ok((encode_backward(params, trace, &gf)?, None))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut backbone = params.zeros_like();
    let mut bank_grads = residual.then(|| bank.zeros_like());
    for (bg, rg) in &per_patch {
        backbone.accumulate(bg)?;
        if let (Some(acc), Some((centers, log_s))) = (bank_grads.as_mut(), rg.as_ref()) {
            acc.centers.axpy(T::one(), centers);
            acc.log_smoothing.axpy(T::one(), log_s);
        }
    }
    Ok(StepGrads { loss, backbone, bank: bank_grads })
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub opt: SgdState,
    pub iteration: u64,
    /// (iteration, loss) per completed step, for the loss curve.
    pub loss_history: Vec<(u64, f64)>,
}

/// Optimizer slot order: backbone tensors in `named()` order, then the bank
/// when the residual encoder trains.
fn velocity_template(model: &Model) -> Vec<Tensor<f32>> {
    let mut slots: Vec<Tensor<f32>> = model
        .params
        .named()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
        .collect();
    if model.cfg.residual_encoder {
        for (_, t) in model.bank.named() {
            slots.push(Tensor::zeros(t.shape().to_vec()));
        }
    }
    slots
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = SgdState::from_parts(
            cfg.learning_rate,
            cfg.momentum,
            cfg.weight_decay,
            velocity_template(&model),
        )?;
        Ok(Self { model, opt, iteration: 0, loss_history: Vec::new() })
    }

    /// Rebuild from checkpointed pieces.
    pub fn from_parts(model: Model, opt: SgdState, iteration: u64) -> Self {
        Self { model, opt, iteration, loss_history: Vec::new() }
    }
}

/// One optimization step over one triplet. The rng continues the iteration's
/// sampling stream and drives anchor selection and negative subsampling.
pub fn train_step(
    state: &mut TrainState,
    triplet: &Triplet,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    cfg.validate()?;
    let (_, h, w) = triplet.anchor[0].dims3()?;
    if h != cfg.train_patch || w != cfg.train_patch {
        return Err(Error::data(format!(
            "triplet patches are {h}x{w}, config trains on {0}x{0}",
            cfg.train_patch
        )));
    }

    let total = triplet.anchor.len();
    let selected: Vec<usize> = if total > cfg.batch_size {
        rand::seq::index::sample(rng, total, cfg.batch_size).into_vec()
    } else {
        (0..total).collect()
    };
    let k = selected.len();
    let n = triplet.negative.len();

    let mut patches = Vec::with_capacity(2 * k + n);
    for &i in &selected {
        patches.push(triplet.anchor[i].clone());
    }
    for &i in &selected {
        patches.push(triplet.positive[i].clone());
    }
    patches.extend(triplet.negative.iter().cloned());

    let mut plan = Vec::with_capacity(k);
    for slot in 0..k {
        let mut candidates: Vec<usize> = (2 * k..2 * k + n).collect();
        candidates.extend((0..k).filter(|&j| j != slot));
        let negatives = match cfg.negatives_per_anchor {
            Some(cap) if cap < candidates.len() => {
                rand::seq::index::sample(rng, candidates.len(), cap)
                    .into_iter()
                    .map(|i| candidates[i])
                    .collect()
            }
            _ => candidates,
        };
        plan.push(AnchorPlan { anchor: slot, positive: k + slot, negatives });
    }

    let grads = compute_step(
        &state.model.params,
        &state.model.bank,
        &state.model.cfg,
        &patches,
        &plan,
        cfg.temperature,
    )
    .map_err(|e| match e {
        Error::Numerical(msg) => {
            Error::numerical(format!("iteration {}: {msg}", state.iteration))
        }
        other => other,
    })?;

    let StepGrads { loss, backbone: gb, bank: gbank } = grads;
    let residual = state.model.cfg.residual_encoder;
    let Model { params, bank, .. } = &mut state.model;
    let mut param_refs: Vec<&mut Tensor<f32>> =
        params.named_mut().into_iter().map(|(_, t)| t).collect();
    let gb_named = gb.named();
    let mut grad_refs: Vec<&Tensor<f32>> = gb_named.iter().map(|(_, t)| *t).collect();
    let gbank_named;
    if residual {
        param_refs.extend(bank.named_mut().into_iter().map(|(_, t)| t));
        let bank_grads = gbank.ok_or_else(|| Error::numerical("missing bank gradients"))?;
        gbank_named = bank_grads;
        grad_refs.push(&gbank_named.centers);
        grad_refs.push(&gbank_named.log_smoothing);
    }
    sgd_step_refs(&mut param_refs, &grad_refs, &mut state.opt)?;

    let it = state.iteration;
    state.iteration += 1;
    state.loss_history.push((it, loss));
    Ok(loss)
}

/// Runs the training loop from the state's current iteration up to
/// cfg.iterations. `on_checkpoint` fires every `checkpoint_every` completed
/// iterations and once at the end (so zero iterations still checkpoints the
/// initialization).
pub fn pretrain(
    catalog: &LoadedCatalog,
    state: &mut TrainState,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    while state.iteration < cfg.iterations {
        let it = state.iteration;
        let mut rng = rng::sampling(cfg.seed, it);
        let triplet = sample_triplet(catalog, cfg.train_patch, &mut rng)?;
        train_step(state, &triplet, cfg, &mut rng)?;
        if state.iteration % cfg.checkpoint_every == 0 && state.iteration < cfg.iterations {
            on_checkpoint(state)?;
        }
    }
    on_checkpoint(state)
}

/// Serializes the loss history as tab-separated `iteration<TAB>loss` lines.
pub fn loss_curve_text(history: &[(u64, f64)]) -> String {
    let mut out = String::new();
    for (it, loss) in history {
        out.push_str(&format!("{it}\t{loss}\n"));
    }
    out
}
