//! Interest-count head: pools the encoded window into a distribution over
//! counts `1..=k` and draws the count with Gumbel noise.

use rand::Rng;
use serde::Serialize;

use crate::diff::{log_softmax_rows, softmax_rows, Graph, NodeId, Tensor};
use crate::error::Result;
use crate::model::CountParams;

/// Raw count logits are clamped to this magnitude before normalization.
pub const LOGIT_CLAMP: f64 = 30.0;
const U_MIN: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct CountHead {
    /// `1 × t` attention over positions.
    pub weights: NodeId,
    /// `1 × d` pooled representation.
    pub pooled: NodeId,
    /// `1 × k` log-probabilities over counts.
    pub log_f: NodeId,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountDistribution {
    pub f: Vec<f64>,
    pub z: Vec<f64>,
    /// Count in `1..=k`.
    pub h: usize,
    pub temperature: f64,
}

/// `a = softmax_i((F_i W_f1 + e_u W_u) W_f2 + b)`, `pooled = a F`,
/// `f = softmax(clamp(pooled W_count))`.
pub fn interest_logits(
    g: &mut Graph,
    p: &CountParams,
    f: NodeId,
    e_u: NodeId,
    key_mask: Option<NodeId>,
) -> Result<CountHead> {
    let (wf1, wu, wf2, b, wc) = (
        g.param(p.w_f1),
        g.param(p.w_u),
        g.param(p.w_f2),
        g.param(p.b),
        g.param(p.w_count),
    );
    let fh = g.matmul(f, wf1)?;
    let uh = g.matmul(e_u, wu)?;
    let hidden = g.add_row(fh, uh)?;
    let score = g.matmul(hidden, wf2)?;
    let score = g.add_row(score, b)?;
    let mut score = g.transpose(score)?;
    if let Some(m) = key_mask {
        score = g.add(score, m)?;
    }
    let weights = g.softmax(score)?;
    let pooled = g.matmul(weights, f)?;
    let raw = g.matmul(pooled, wc)?;
    let raw = g.clamp(raw, -LOGIT_CLAMP, LOGIT_CLAMP)?;
    let log_f = g.log_softmax(raw)?;
    Ok(CountHead {
        weights,
        pooled,
        log_f,
    })
}

/// Standard Gumbel sample from a uniform draw: `−ln(−ln u)`.
pub fn gumbel_noise(u: f64) -> f64 {
    let u = u.clamp(U_MIN, 1.0 - U_MIN);
    -(-u.ln()).ln()
}

pub fn draw_gumbel<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    (0..k).map(|_| gumbel_noise(rng.gen::<f64>())).collect()
}

/// `argmax_i(log f_i + g_i) + 1`, lowest index on ties.
pub fn sample_count_log(log_f: &[f64], g: &[f64]) -> usize {
    assert_eq!(log_f.len(), g.len(), "noise length must match k");
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, (l, n)) in log_f.iter().zip(g).enumerate() {
        let v = l + n;
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best + 1
}

pub fn sample_count(f: &[f64], g: &[f64]) -> usize {
    let log_f: Vec<f64> = f.iter().map(|p| p.ln()).collect();
    sample_count_log(&log_f, g)
}

/// `softmax((log f + g) / T)` on plain values.
pub fn relaxed_probs(log_f: &[f64], g: &[f64], temperature: f64) -> Vec<f64> {
    let x: Vec<f64> = log_f
        .iter()
        .zip(g)
        .map(|(l, n)| (l + n) / temperature)
        .collect();
    softmax_rows(&Tensor::row(x)).into_data()
}

/// Differentiable `z = softmax((log f + g) / T)`; `g` enters as a constant.
pub fn relaxed_node(g: &mut Graph, log_f: NodeId, noise: &[f64], temperature: f64) -> Result<NodeId> {
    let n = g.constant(Tensor::row(noise.to_vec()));
    let x = g.add(log_f, n)?;
    let x = g.scale(x, 1.0 / temperature)?;
    Ok(g.softmax(x)?)
}

/// Normalizes a probability row in log space (used by tests and tools).
pub fn log_normalize(f: &[f64]) -> Vec<f64> {
    let l: Vec<f64> = f.iter().map(|p| p.ln()).collect();
    log_softmax_rows(&Tensor::row(l)).into_data()
}
