//! One training window end to end: encode, count, allocate, select, reward, loss.

use crate::allocator::{rollout, select_target_interest, ActionPicker, Episode, Scripted};
use crate::diff::{grad_check, GradCheckReport, Graph, NodeId, Tensor};
use crate::encoder::{encode, EncodedSequence};
use crate::error::{Error, Result};
use crate::interest::{interest_logits, relaxed_node, sample_count_log, CountDistribution};
use crate::model::Model;
use crate::objective::{
    ce_loss, joint_loss, reward_baseline, reward_chosen, reward_orthogonal, rl_loss, total_reward, LossBundle,
    RewardBundle,
};

/// Where the interest count comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum CountSource {
    /// Gumbel noise drawn for this window (one value per count).
    Noise(Vec<f64>),
    /// Zero noise: `h = argmax f`.
    Deterministic,
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_o: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_o: 0.001,
            beta: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct WindowSample<'a> {
    pub user: usize,
    pub input: &'a [usize],
    pub target: usize,
    pub negatives: &'a [usize],
}

#[derive(Clone, Debug)]
pub struct CountState {
    pub dist: CountDistribution,
    /// `1 × k` relaxed count probabilities (a constant one-hot in fixed mode).
    pub z: NodeId,
    /// `1 × k` log count probabilities; absent in fixed mode.
    pub log_f: Option<NodeId>,
}

/// Count distribution for an encoded window. In fixed mode the count head is
/// skipped and `z` is the one-hot of the fixed count.
pub fn count_state(g: &mut Graph, model: &Model, enc: &EncodedSequence, source: &CountSource) -> Result<CountState> {
    let k = model.dims.k;
    let temperature = model.options.temperature;
    if let Some(h) = model.fixed_h() {
        if h < 1 || h > k {
            return Err(Error::InterestCount { h, k });
        }
        let mut onehot = vec![0.0; k];
        onehot[h - 1] = 1.0;
        let z = g.constant(Tensor::row(onehot.clone()));
        return Ok(CountState {
            dist: CountDistribution {
                f: onehot.clone(),
                z: onehot,
                h,
                temperature,
            },
            z,
            log_f: None,
        });
    }
    let head = interest_logits(g, &model.params.count, enc.f, enc.user, enc.key_mask)?;
    let log_f = g.value(head.log_f).row_slice(0).to_vec();
    let noise = match source {
        CountSource::Noise(n) => {
            assert_eq!(n.len(), k, "noise length must match k");
            n.clone()
        }
        CountSource::Deterministic => vec![0.0; k],
    };
    let h = sample_count_log(&log_f, &noise);
    let z = relaxed_node(g, head.log_f, &noise, temperature)?;
    Ok(CountState {
        dist: CountDistribution {
            f: log_f.iter().map(|l| l.exp()).collect(),
            z: g.value(z).row_slice(0).to_vec(),
            h,
            temperature,
        },
        z,
        log_f: Some(head.log_f),
    })
}

#[derive(Clone, Debug)]
pub struct WindowForward {
    pub enc: EncodedSequence,
    pub count: CountState,
    pub episode: Episode,
    pub rewards: RewardBundle,
    pub losses: LossBundle,
    pub loss: NodeId,
    pub ce: NodeId,
    pub rl: NodeId,
}

/// Builds the joint loss for one window. `reward` overrides the computed
/// `R_s` (the bundle still reports the computed value).
pub fn window_forward(
    g: &mut Graph,
    model: &Model,
    sample: WindowSample,
    source: &CountSource,
    picker: &mut dyn ActionPicker,
    weights: LossWeights,
    reward: Option<f64>,
) -> Result<WindowForward> {
    model.check_items(&[sample.target])?;
    model.check_items(sample.negatives)?;
    let enc = encode(g, model, sample.input, sample.user)?;
    let count = count_state(g, model, &enc, source)?;
    let mut episode = rollout(g, model, &enc, count.dist.h, count.z, picker)?;

    let mut pool = Vec::with_capacity(sample.negatives.len() + 1);
    pool.push(sample.target);
    pool.extend_from_slice(sample.negatives);
    let cands = g.gather_param(model.params.item_emb, &pool)?;
    let e_target = g.gather(cands, &[0])?;
    let chosen = select_target_interest(g, model, &mut episode, e_target, count.z, picker)?;
    let p_target = episode.reps[chosen];

    let rewards = {
        let cv = g.value(cands);
        let negs: Vec<&[f64]> = (1..pool.len()).map(|r| cv.row_slice(r)).collect();
        let reps: Vec<&[f64]> = episode.reps.iter().map(|&r| g.value(r).data()).collect();
        let e_t = cv.row_slice(0);
        total_reward(
            reward_chosen(reps[chosen], e_t, &negs),
            reward_baseline(&reps, e_t, &negs),
            reward_orthogonal(&reps),
            weights.lambda_o,
        )
    };
    let ce = ce_loss(g, p_target, cands)?;
    let rl = rl_loss(g, &episode.log_prob_nodes(), reward.unwrap_or(rewards.r_s))?;
    let loss = joint_loss(g, ce, rl, weights.beta)?;
    let losses = LossBundle {
        l_rl: g.value(rl).item(),
        l_ce: g.value(ce).item(),
        l: g.value(loss).item(),
        beta: weights.beta,
    };
    Ok(WindowForward {
        enc,
        count,
        episode,
        rewards,
        losses,
        loss,
        ce,
        rl,
    })
}

/// The random decisions of one window, frozen so the loss becomes a
/// deterministic function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTrace {
    pub source: CountSource,
    /// Allocation actions followed by the target-selection action.
    pub actions: Vec<usize>,
    pub r_s: f64,
}

impl FrozenTrace {
    pub fn of(forward: &WindowForward, source: &CountSource) -> Self {
        FrozenTrace {
            source: source.clone(),
            actions: forward.episode.all_steps().map(|s| s.action).collect(),
            r_s: forward.rewards.r_s,
        }
    }
}

/// Loss value and flattened parameter gradient with every decision replayed.
pub fn replay_loss_and_grad(
    model: &Model,
    sample: WindowSample,
    trace: &FrozenTrace,
    weights: LossWeights,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new(&model.store);
    let mut picker = Scripted::new(trace.actions.clone());
    let fwd = window_forward(&mut g, model, sample, &trace.source, &mut picker, weights, Some(trace.r_s))?;
    let grads = g.backward(fwd.loss)?;
    Ok((fwd.losses.l, grads.flatten(&model.store)))
}

/// Central-difference check of the full window loss against every parameter.
/// Decisions come from `picker` on the unperturbed model and are then frozen.
pub fn window_grad_check(
    model: &Model,
    sample: WindowSample,
    source: &CountSource,
    picker: &mut dyn ActionPicker,
    weights: LossWeights,
    eps: f64,
) -> Result<GradCheckReport> {
    let trace = {
        let mut g = Graph::new(&model.store);
        let fwd = window_forward(&mut g, model, sample, source, picker, weights, None)?;
        FrozenTrace::of(&fwd, source)
    };
    let point = Tensor::row(model.store.flatten());
    let mut probe = model.clone();
    grad_check(
        |p: &Tensor| -> Result<(f64, Vec<f64>)> {
            probe.store.assign_flat(p.data())?;
            replay_loss_and_grad(&probe, sample, &trace, weights)
        },
        &point,
        eps,
    )
}
