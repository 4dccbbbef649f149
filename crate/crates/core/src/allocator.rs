//! Sequential allocation of window items to interest sub-sequences.

use rand::Rng;
use serde::Serialize;

use crate::config::Pooling;
use crate::diff::{Graph, NodeId, Tensor};
use crate::encoder::{EncodedSequence, MASK_LOGIT};
use crate::error::{Error, Result};
use crate::model::{Model, PolicyParams};

/// Chooses an action from the policy's probabilities over the first `h` slots.
pub trait ActionPicker {
    fn pick(&mut self, probs: &[f64]) -> usize;
}

/// Argmax, lowest index on ties.
#[derive(Clone, Copy, Debug, Default)]
pub struct Greedy;

impl ActionPicker for Greedy {
    fn pick(&mut self, probs: &[f64]) -> usize {
        argmax(probs)
    }
}

/// Inverse-CDF sampling from an RNG.
pub struct Sampler<'r, R: Rng + ?Sized>(pub &'r mut R);

impl<R: Rng + ?Sized> ActionPicker for Sampler<'_, R> {
    fn pick(&mut self, probs: &[f64]) -> usize {
        let u: f64 = self.0.gen();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // rounding left the cumulative sum just under 1
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// Replays a fixed action list; panics when exhausted.
#[derive(Clone, Debug)]
pub struct Scripted {
    actions: Vec<usize>,
    next: usize,
}

impl Scripted {
    pub fn new(actions: Vec<usize>) -> Self {
        Scripted { actions, next: 0 }
    }
}

impl ActionPicker for Scripted {
    fn pick(&mut self, probs: &[f64]) -> usize {
        let a = self.actions[self.next];
        assert!(a < probs.len(), "scripted action {a} outside 0..{}", probs.len());
        self.next += 1;
        a
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Masked log-probabilities `r × k`: `log_softmax(ReLU(s W1 + b1) W2 + b2)`
/// with logits beyond `h` pushed to [`MASK_LOGIT`].
pub fn policy(g: &mut Graph, p: &PolicyParams, s: NodeId, h: usize) -> Result<NodeId> {
    let (w1, b1, w2, b2) = (g.param(p.w_1), g.param(p.b_1), g.param(p.w_2), g.param(p.b_2));
    let k = g.store().get(p.b_2).cols();
    if h < 1 || h > k {
        return Err(Error::InterestCount { h, k });
    }
    let x = g.matmul(s, w1)?;
    let x = g.add_row(x, b1)?;
    let x = g.relu(x)?;
    let x = g.matmul(x, w2)?;
    let mut logits = g.add_row(x, b2)?;
    if h < k {
        let mask = (0..k).map(|i| if i < h { 0.0 } else { MASK_LOGIT }).collect();
        let m = g.constant(Tensor::row(mask));
        logits = g.add_row(logits, m)?;
    }
    Ok(g.log_softmax(logits)?)
}

/// Adds `F_T` to a sub-sequence representation that already pools `count` vectors.
pub fn update_interest(g: &mut Graph, p: NodeId, count: usize, f_t: NodeId, pooling: Pooling) -> Result<NodeId> {
    Ok(match pooling {
        Pooling::Running => {
            let c = count as f64;
            let scaled = g.scale(p, c)?;
            let sum = g.add(scaled, f_t)?;
            g.scale(sum, 1.0 / (c + 1.0))?
        }
        Pooling::Pairwise => {
            let sum = g.add(p, f_t)?;
            g.scale(sum, 0.5)?
        }
    })
}

/// `s = [Σ_j α_j p_j, x, z] W0` with `α = softmax(x Pᵀ)`, for every row of `x`.
///
/// `reps` is `h × d`, `x` is `r × d`, `z` is `1 × k`; the result is `r × d`.
pub fn next_state(g: &mut Graph, w0: NodeId, reps: NodeId, x: NodeId, z: NodeId) -> Result<NodeId> {
    let rows = g.shape(x).0;
    let scores = g.matmul_t(x, reps)?;
    let alpha = g.softmax(scores)?;
    let attended = g.matmul(alpha, reps)?;
    let z_rows = if rows == 1 { z } else { g.gather(z, &vec![0; rows])? };
    let cat = g.concat_cols(&[attended, x, z_rows])?;
    Ok(g.matmul(cat, w0)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct Step {
    /// Window position of the allocated item (`None` for target selection).
    pub position: Option<usize>,
    /// Zero-based sub-sequence index.
    pub action: usize,
    pub log_prob: f64,
    #[serde(skip)]
    pub log_prob_node: NodeId,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub h: usize,
    pub steps: Vec<Step>,
    /// Final `1 × d` representation of each sub-sequence.
    pub reps: Vec<NodeId>,
    /// Vectors pooled into each representation, including the user embedding.
    pub counts: Vec<usize>,
    pub target: Option<Step>,
}

impl Episode {
    /// Allocation steps followed by the target-selection step, if any.
    pub fn all_steps(&self) -> impl Iterator<Item = &Step> {
        self.steps.iter().chain(self.target.iter())
    }

    pub fn log_prob_sum(&self) -> f64 {
        self.all_steps().map(|s| s.log_prob).sum()
    }

    pub fn log_prob_nodes(&self) -> Vec<NodeId> {
        self.all_steps().map(|s| s.log_prob_node).collect()
    }

    /// One structured line: window id, h, actions and log-probabilities.
    pub fn trace_line(&self, window: usize) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            window: usize,
            h: usize,
            steps: &'a [Step],
            target: Option<&'a Step>,
            counts: &'a [usize],
        }
        serde_json::to_string(&Line {
            window,
            h: self.h,
            steps: &self.steps,
            target: self.target.as_ref(),
            counts: &self.counts,
        })
        .expect("episode trace serializes")
    }
}

fn choose(g: &mut Graph, log_probs: NodeId, h: usize, picker: &mut dyn ActionPicker) -> Result<(usize, f64, NodeId)> {
    let k = g.shape(log_probs).1;
    let probs: Vec<f64> = g.value(log_probs).row_slice(0)[..h].iter().map(|l| l.exp()).collect();
    let a = picker.pick(&probs);
    let mut onehot = vec![0.0; k];
    onehot[a] = 1.0;
    let sel = g.constant(Tensor::row(onehot));
    let node = g.dot(log_probs, sel)?;
    Ok((a, g.value(node).item(), node))
}

/// Allocates every real window item in order, starting from `h` copies of
/// the user embedding.
pub fn rollout(
    g: &mut Graph,
    model: &Model,
    enc: &EncodedSequence,
    h: usize,
    z: NodeId,
    picker: &mut dyn ActionPicker,
) -> Result<Episode> {
    let k = model.dims.k;
    if h < 1 || h > k {
        return Err(Error::InterestCount { h, k });
    }
    let w0 = g.param(model.params.w0);
    let mut reps = vec![enc.user; h];
    let mut counts = vec![1usize; h];
    let mut steps = Vec::with_capacity(enc.real.len());
    for &pos in &enc.real {
        let f_t = g.gather(enc.f, &[pos])?;
        let stacked = g.stack_rows(&reps)?;
        let s = next_state(g, w0, stacked, f_t, z)?;
        let lp = policy(g, &model.params.policy, s, h)?;
        let (a, log_prob, node) = choose(g, lp, h, picker)?;
        reps[a] = update_interest(g, reps[a], counts[a], f_t, model.options.pooling)?;
        counts[a] += 1;
        steps.push(Step {
            position: Some(pos),
            action: a,
            log_prob,
            log_prob_node: node,
        });
    }
    Ok(Episode {
        h,
        steps,
        reps,
        counts,
        target: None,
    })
}

/// Picks the sub-sequence that should explain the candidate `x` (`1 × d`)
/// and records the step on the episode. Representations are not updated.
pub fn select_target_interest(
    g: &mut Graph,
    model: &Model,
    episode: &mut Episode,
    x: NodeId,
    z: NodeId,
    picker: &mut dyn ActionPicker,
) -> Result<usize> {
    let w0 = g.param(model.params.w0);
    let stacked = g.stack_rows(&episode.reps)?;
    let s = next_state(g, w0, stacked, x, z)?;
    let lp = policy(g, &model.params.policy, s, episode.h)?;
    let (a, log_prob, node) = choose(g, lp, episode.h, picker)?;
    episode.target = Some(Step {
        position: None,
        action: a,
        log_prob,
        log_prob_node: node,
    });
    Ok(a)
}
