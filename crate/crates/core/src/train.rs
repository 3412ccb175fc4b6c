//! Full-batch training: forward, composite loss, backward, Adam.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    correlation_reduction_var, negatives_for_epoch, pairs_from_sets, spatial_reg_var, total_loss, LossBreakdown,
    NegativeMode,
};
use crate::model::{forward_var, ForwardVars, ModelInputs, ModelParams};
use crate::tensor::{AdamConfig, AdamState, Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub gamma: f64,
    pub lambda: f64,
    pub seed: u64,
    pub negatives: NegativeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 600,
            adam: AdamConfig::default(),
            gamma: 0.1,
            lambda: 0.1,
            seed: 100,
            negatives: NegativeMode::Sampled,
        }
    }
}

/// Loss terms recorded on a tape for one forward pass.
pub struct LossVars {
    pub zinb: Var,
    pub cr: Var,
    pub spatial: Var,
    pub total: Var,
}

/// Records the three objectives and `zinb + γ·cr + λ·spatial` on `tape`.
pub fn record_losses(
    tape: &mut Tape,
    fwd: &ForwardVars,
    target: &Arc<Matrix>,
    positives: &Arc<Vec<(usize, usize)>>,
    negatives: &Arc<Vec<(usize, usize)>>,
    gamma: f64,
    lambda: f64,
) -> Result<LossVars> {
    let zinb = tape.zinb_nll_logits(fwd.log_mu, fwd.theta, fwd.pi_logit, target)?;
    let cr = correlation_reduction_var(tape, fwd.h_spa, fwd.h_fea)?;
    let spatial = spatial_reg_var(tape, fwd.z_final, positives, negatives)?;
    let weighted_cr = tape.scale(cr, gamma)?;
    let weighted_sp = tape.scale(spatial, lambda)?;
    let total = tape.add(zinb, weighted_cr)?;
    let total = tape.add(total, weighted_sp)?;
    Ok(LossVars {
        zinb,
        cr,
        spatial,
        total,
    })
}

/// Result of a training run. When `failure` is set, `params` holds the last
/// parameters whose loss was finite.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<(usize, LossBreakdown)>,
    pub failure: Option<Error>,
}

/// Runs `config.epochs` full-batch steps. Epochs are numbered from 1 and the
/// logged loss of an epoch is the loss before that epoch's update.
pub fn train(
    inputs: &ModelInputs,
    target: &Arc<Matrix>,
    neighbors: &[Vec<usize>],
    mut params: ModelParams,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &LossBreakdown),
) -> TrainOutcome {
    let mut adam = AdamState::new(config.adam, &params.shapes());
    let positives = pairs_from_sets(neighbors);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let step = || -> Result<(LossBreakdown, Vec<Matrix>)> {
            let negatives = pairs_from_sets(&negatives_for_epoch(config.negatives, neighbors, config.seed, epoch as u64));
            let mut tape = Tape::new();
            let fwd = forward_var(&mut tape, inputs, &params)?;
            let losses = record_losses(&mut tape, &fwd, target, &positives, &negatives, config.gamma, config.lambda)?;
            let value = |v: Var| tape.value(v).get(0, 0);
            let breakdown = total_loss(value(losses.zinb), value(losses.cr), value(losses.spatial), config.gamma, config.lambda);
            if !breakdown.is_finite() {
                return Err(Error::NonFinite { op: "total_loss" });
            }
            let grads = tape.backward(losses.total)?;
            let grads = fwd
                .params
                .iter()
                .zip(params.shapes())
                .map(|(&v, shape)| grads.get_or_zeros(v, shape))
                .collect();
            Ok((breakdown, grads))
        };
        let (breakdown, grads) = match step() {
            Ok(ok) => ok,
            Err(e) => {
                return TrainOutcome {
                    params,
                    log,
                    failure: Some(e),
                }
            }
        };
        let before = params.clone();
        if let Err(e) = adam.step(&mut params.tensors_mut(), &grads) {
            return TrainOutcome {
                params: before,
                log,
                failure: Some(e),
            };
        }
        if !params.is_finite() {
            return TrainOutcome {
                params: before,
                log,
                failure: Some(Error::NonFinite { op: "adam_step" }),
            };
        }
        on_epoch(epoch, &breakdown);
        log.push((epoch, breakdown));
    }
    TrainOutcome {
        params,
        log,
        failure: None,
    }
}
