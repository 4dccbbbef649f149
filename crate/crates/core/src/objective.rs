//! Rewards and losses.
//!
//! Candidate pools are passed target-first: row 0 is the target item and the
//! remaining rows are its sampled negatives.

use serde::Serialize;

use crate::diff::{dot, Graph, NodeId, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RewardBundle {
    pub r_c: f64,
    pub r_baseline: f64,
    pub r_advantage: f64,
    pub r_orthogonal: f64,
    pub r_s: f64,
    pub lambda_o: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBundle {
    pub l_rl: f64,
    pub l_ce: f64,
    pub l: f64,
    pub beta: f64,
}

/// Sampled-softmax probability of the first candidate under representation `p`.
pub fn candidate_softmax(p: &[f64], pool: &[&[f64]]) -> f64 {
    let scores: Vec<f64> = pool.iter().map(|e| dot(p, e)).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    (scores[0] - max).exp() / denom
}

fn pool<'a>(e_target: &'a [f64], negatives: &[&'a [f64]]) -> Vec<&'a [f64]> {
    std::iter::once(e_target).chain(negatives.iter().copied()).collect()
}

pub fn reward_chosen(p_target: &[f64], e_target: &[f64], negatives: &[&[f64]]) -> f64 {
    candidate_softmax(p_target, &pool(e_target, negatives))
}

/// Mean of the sampled-softmax score over every representation.
pub fn reward_baseline(reps: &[&[f64]], e_target: &[f64], negatives: &[&[f64]]) -> f64 {
    let cands = pool(e_target, negatives);
    reps.iter().map(|p| candidate_softmax(p, &cands)).sum::<f64>() / reps.len() as f64
}

/// Negative mean absolute inner product over distinct pairs; 0 for one representation.
pub fn reward_orthogonal(reps: &[&[f64]]) -> f64 {
    let h = reps.len();
    if h < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..h {
        for j in i + 1..h {
            total += dot(reps[i], reps[j]).abs();
        }
    }
    -total / (h * (h - 1) / 2) as f64
}

pub fn total_reward(r_c: f64, r_baseline: f64, r_orthogonal: f64, lambda_o: f64) -> RewardBundle {
    let r_advantage = r_c - r_baseline;
    RewardBundle {
        r_c,
        r_baseline,
        r_advantage,
        r_orthogonal,
        r_s: r_advantage + lambda_o * r_orthogonal,
        lambda_o,
    }
}

/// `−R_s · Σ log π`, with `R_s` a constant.
pub fn rl_loss(g: &mut Graph, log_probs: &[NodeId], r_s: f64) -> Result<NodeId> {
    if log_probs.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let stacked = g.stack_rows(log_probs)?;
    let total = g.sum(stacked)?;
    Ok(g.scale(total, -r_s)?)
}

/// `−log softmax(p Eᵀ)[0]` over a target-first `(o+1) × d` candidate block.
pub fn ce_loss(g: &mut Graph, p_target: NodeId, candidates: NodeId) -> Result<NodeId> {
    let scores = g.matmul_t(p_target, candidates)?;
    let lsm = g.log_softmax(scores)?;
    let n = g.shape(lsm).1;
    let mut pick = vec![0.0; n];
    pick[0] = 1.0;
    let pick = g.constant(Tensor::row(pick));
    let first = g.dot(lsm, pick)?;
    Ok(g.scale(first, -1.0)?)
}

pub fn joint_loss(g: &mut Graph, ce: NodeId, rl: NodeId, beta: f64) -> Result<NodeId> {
    let weighted = g.scale(rl, beta)?;
    Ok(g.add(ce, weighted)?)
}
