//! Candidate scoring and leave-one-out ranking metrics.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::allocator::{argmax, next_state, policy, rollout, Episode, Greedy};
use crate::config::EvalMode;
use crate::data::{non_interacted, sample_negatives, DataError, ItemId, SplitDataset, UserSplit};
use crate::diff::{dot, Graph};
use crate::encoder::encode;
use crate::error::Result;
use crate::model::Model;
use crate::seed::{derive, stream};
use crate::window::{count_state, CountSource};

/// Candidates scored per batched policy evaluation.
pub const SCORE_CHUNK: usize = 256;

/// Cutoffs reported in every [`MetricsReport`].
pub const CUTOFFS: [usize; 2] = [10, 50];

/// Scores every candidate for one window. The count is taken at zero noise,
/// the window is allocated greedily once, and each candidate is then routed
/// greedily to a sub-sequence whose representation scores it by inner product.
pub fn score_candidates(model: &Model, window: &[ItemId], user: usize, candidates: &[ItemId]) -> Result<Vec<f64>> {
    model.check_items(candidates)?;
    let mut g = Graph::new(&model.store);
    let enc = encode(&mut g, model, window, user)?;
    let count = count_state(&mut g, model, &enc, &CountSource::Deterministic)?;
    let episode = rollout(&mut g, model, &enc, count.dist.h, count.z, &mut Greedy)?;
    let h = episode.h;
    let reps = g.stack_rows(&episode.reps)?;
    let rep_values = g.value(reps).clone();
    let w0 = g.param(model.params.w0);
    let mut scores = Vec::with_capacity(candidates.len());
    for chunk in candidates.chunks(SCORE_CHUNK) {
        let x = g.gather_param(model.params.item_emb, chunk)?;
        let s = next_state(&mut g, w0, reps, x, count.z)?;
        let lp = policy(&mut g, &model.params.policy, s, h)?;
        let lp = g.value(lp);
        for (r, &c) in chunk.iter().enumerate() {
            let probs: Vec<f64> = lp.row_slice(r)[..h].iter().map(|l| l.exp()).collect();
            let a = argmax(&probs);
            scores.push(dot(rep_values.row_slice(a), model.item_row(c)));
        }
    }
    Ok(scores)
}

/// Prediction-time allocation of one window: the count at zero noise and
/// the greedy episode over its real items.
pub fn greedy_allocation(model: &Model, window: &[ItemId], user: usize) -> Result<Episode> {
    let mut g = Graph::new(&model.store);
    let enc = encode(&mut g, model, window, user)?;
    let count = count_state(&mut g, model, &enc, &CountSource::Deterministic)?;
    rollout(&mut g, model, &enc, count.dist.h, count.z, &mut Greedy)
}

/// 1-based rank of `candidates[target]`: higher scores first, equal scores
/// ordered by ascending item id.
pub fn rank_of(scores: &[f64], candidates: &[ItemId], target: usize) -> usize {
    let (st, it) = (scores[target], candidates[target]);
    1 + scores
        .iter()
        .zip(candidates)
        .enumerate()
        .filter(|&(i, (&s, &c))| i != target && (s > st || (s == st && c < it)))
        .count()
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Neumaier-compensated mean.
pub fn compensated_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c, mut n) = (0.0f64, 0.0f64, 0usize);
    for v in values {
        let t = sum + v;
        c += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (sum + c) / n as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Valid,
    Test,
}

impl Stage {
    pub fn key(self) -> &'static str {
        match self {
            Stage::Valid => "valid",
            Stage::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Stage::Valid => stream::EVAL_VALID,
            Stage::Test => stream::EVAL_TEST,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalSettings {
    pub mode: EvalMode,
    /// Negatives per user in sampled mode.
    pub o: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UserRank {
    pub user: usize,
    pub rank: usize,
    pub candidates: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub stage: Stage,
    pub mode: EvalMode,
    pub hr_10: f64,
    pub ndcg_10: f64,
    pub hr_50: f64,
    pub ndcg_50: f64,
    pub users: usize,
    /// Users without an evaluable target (too few interactions or negatives).
    pub skipped: usize,
    pub ranks: Vec<UserRank>,
    pub config_hash: String,
    pub seconds: f64,
}

impl MetricsReport {
    pub fn from_ranks(stage: Stage, mode: EvalMode, ranks: Vec<UserRank>, skipped: usize) -> Self {
        let metric = |f: fn(usize, usize) -> f64, k| compensated_mean(ranks.iter().map(|r| f(r.rank, k)));
        MetricsReport {
            stage,
            mode,
            hr_10: metric(hr_at_k, 10),
            ndcg_10: metric(ndcg_at_k, 10),
            hr_50: metric(hr_at_k, 50),
            ndcg_50: metric(ndcg_at_k, 50),
            users: ranks.len(),
            skipped,
            ranks,
            config_hash: String::new(),
            seconds: 0.0,
        }
    }

    pub fn hr(&self, k: usize) -> f64 {
        match k {
            10 => self.hr_10,
            50 => self.hr_50,
            _ => compensated_mean(self.ranks.iter().map(|r| hr_at_k(r.rank, k))),
        }
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        match k {
            10 => self.ndcg_10,
            50 => self.ndcg_50,
            _ => compensated_mean(self.ranks.iter().map(|r| ndcg_at_k(r.rank, k))),
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} ({} ranking, {} users, {} skipped, config {})",
            self.stage.key(),
            self.mode.key(),
            self.users,
            self.skipped,
            self.config_hash
        );
        let _ = writeln!(s, "{:<8}{:>10}{:>10}", "K", "HR", "NDCG");
        for k in CUTOFFS {
            let _ = writeln!(s, "{:<8}{:>10.4}{:>10.4}", k, self.hr(k), self.ndcg(k));
        }
        let _ = writeln!(s, "wall-clock {:.2}s", self.seconds);
        s
    }

    /// One JSON object per (metric, K).
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            stage: &'a str,
            mode: &'a str,
            metric: &'a str,
            k: usize,
            value: f64,
            users: usize,
            config_hash: &'a str,
        }
        let mut out = String::new();
        for k in CUTOFFS {
            for (metric, value) in [("HR", self.hr(k)), ("NDCG", self.ndcg(k))] {
                let line = Line {
                    stage: self.stage.key(),
                    mode: self.mode.key(),
                    metric,
                    k,
                    value,
                    users: self.users,
                    config_hash: &self.config_hash,
                };
                out.push_str(&serde_json::to_string(&line).expect("metric line serializes"));
                out.push('\n');
            }
        }
        out
    }
}

/// Target first, then the negatives for this user and stage.
pub fn eval_candidates(
    split: &UserSplit,
    item_count: usize,
    stage: Stage,
    settings: &EvalSettings,
) -> std::result::Result<Vec<ItemId>, DataError> {
    let case = match stage {
        Stage::Valid => &split.valid,
        Stage::Test => &split.test,
    };
    let mut candidates = vec![case.target];
    match settings.mode {
        EvalMode::Full => {
            candidates.extend(non_interacted(item_count, &split.history));
        }
        EvalMode::Sampled => {
            let seed = derive(&[settings.seed, stage.stream(), split.user as u64]);
            candidates.extend(sample_negatives(
                split.user,
                item_count,
                &split.history,
                case.target,
                settings.o,
                seed,
            )?);
        }
    }
    Ok(candidates)
}

/// Ranks each user's held-out item among its candidates.
pub fn evaluate(model: &Model, data: &SplitDataset, stage: Stage, settings: &EvalSettings) -> Result<MetricsReport> {
    let start = Instant::now();
    let mut ranks = Vec::with_capacity(data.users.len());
    let mut skipped = data.excluded_users;
    for split in &data.users {
        let candidates = match eval_candidates(split, data.item_count, stage, settings) {
            Ok(c) => c,
            Err(DataError::NotEnoughNegatives { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let input = match stage {
            Stage::Valid => &split.valid.input,
            Stage::Test => &split.test.input,
        };
        let scores = score_candidates(model, input, split.user, &candidates)?;
        ranks.push(UserRank {
            user: split.user,
            rank: rank_of(&scores, &candidates, 0),
            candidates: candidates.len(),
        });
    }
    let mut report = MetricsReport::from_ranks(stage, settings.mode, ranks, skipped);
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoffs() {
        assert_eq!(hr_at_k(1, 10), 1.0);
        assert_eq!(hr_at_k(10, 10), 1.0);
        assert_eq!(hr_at_k(11, 10), 0.0);
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert!((ndcg_at_k(3, 10) - 0.5).abs() < 1e-15);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
    }

    #[test]
    fn ties_go_to_the_lower_id() {
        let scores = [0.5, 0.5, 0.9, 0.5];
        assert_eq!(rank_of(&scores, &[4, 2, 7, 9], 0), 3);
        assert_eq!(rank_of(&scores, &[1, 2, 7, 9], 0), 2);
        assert_eq!(rank_of(&scores, &[4, 2, 7, 9], 2), 1);
    }

    #[test]
    fn compensated_mean_recovers_small_terms() {
        let mut v = vec![1e16, 1.0, -1e16];
        v.extend(std::iter::repeat(1.0).take(3));
        assert_eq!(compensated_mean(v), 4.0 / 6.0);
        assert_eq!(compensated_mean(Vec::new()), 0.0);
    }

    #[test]
    fn report_orders_cutoffs() {
        let ranks = [1, 3, 12, 60, 49]
            .iter()
            .enumerate()
            .map(|(u, &rank)| UserRank { user: u, rank, candidates: 100 })
            .collect();
        let r = MetricsReport::from_ranks(Stage::Test, EvalMode::Sampled, ranks, 0);
        assert!((r.hr_10 - 0.4).abs() < 1e-15);
        assert!((r.hr_50 - 0.8).abs() < 1e-15);
        assert!(r.ndcg_10 <= r.hr_10 && r.ndcg_50 >= r.ndcg_10);
        assert_eq!(r.to_jsonl().lines().count(), 4);
        assert!(r.to_table().contains("NDCG"));
    }
}
