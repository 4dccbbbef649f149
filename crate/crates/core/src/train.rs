//! Mini-batch training: user-contiguous batches, per-window episodes, Adam.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::allocator::Sampler;
use crate::config::RunConfig;
use crate::data::{sample_negatives, SplitDataset};
use crate::diff::{AdamConfig, AdamState, DiffError, Graph};
use crate::error::{Error, Result};
use crate::interest::draw_gumbel;
use crate::model::Model;
use crate::seed::{derive, stream};
use crate::window::{window_forward, CountSource, LossWeights, WindowForward, WindowSample};

/// Means over the windows of one batch or epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossStats {
    pub windows: usize,
    pub l: f64,
    pub l_ce: f64,
    pub l_rl: f64,
    pub mean_h: f64,
    pub mean_r_s: f64,
}

#[derive(Default)]
struct Sums {
    n: usize,
    l: f64,
    l_ce: f64,
    l_rl: f64,
    h: f64,
    r_s: f64,
}

impl Sums {
    fn add(&mut self, f: &WindowForward) {
        self.n += 1;
        self.l += f.losses.l;
        self.l_ce += f.losses.l_ce;
        self.l_rl += f.losses.l_rl;
        self.h += f.count.dist.h as f64;
        self.r_s += f.rewards.r_s;
    }

    fn merge(&mut self, o: &Sums) {
        self.n += o.n;
        self.l += o.l;
        self.l_ce += o.l_ce;
        self.l_rl += o.l_rl;
        self.h += o.h;
        self.r_s += o.r_s;
    }

    fn stats(&self) -> LossStats {
        let n = self.n.max(1) as f64;
        LossStats {
            windows: self.n,
            l: self.l / n,
            l_ce: self.l_ce / n,
            l_rl: self.l_rl / n,
            mean_h: self.h / n,
            mean_r_s: self.r_s / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub batches: usize,
    #[serde(flatten)]
    pub loss: LossStats,
    pub seconds: f64,
}

/// Splits user-ordered windows into consecutive batches of `batch_size`.
pub fn user_contiguous_batches(windows: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    (0..windows)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(windows))
        .collect()
}

/// Model, optimizer and the training hyperparameters that stay fixed across epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub weights: LossWeights,
    pub o: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs completed so far.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: &RunConfig, users: usize) -> Self {
        let adam = AdamState::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            &model.store,
        );
        Trainer {
            model,
            adam,
            weights: LossWeights {
                lambda_o: cfg.lambda_o,
                beta: cfg.beta,
            },
            o: cfg.o,
            batch_size: cfg.effective_batch_size(users),
            seed: cfg.seed,
            epoch: 0,
        }
    }

    /// The random draws of training window `index` in the current epoch:
    /// negatives, the count source, and the stream that then drives the
    /// allocation policy.
    pub fn window_draws(&self, data: &SplitDataset, index: usize) -> Result<(Vec<usize>, CountSource, ChaCha8Rng)> {
        let w = &data.train[index];
        let mut rng = ChaCha8Rng::seed_from_u64(derive(&[self.seed, stream::TRAIN, self.epoch as u64, index as u64]));
        let positives = data
            .user(w.user)
            .map(|u| u.train_items.as_slice())
            .unwrap_or(&[]);
        let negatives = sample_negatives(w.user, data.item_count, positives, w.target, self.o, rng.gen())?;
        let source = match self.model.fixed_h() {
            Some(_) => CountSource::Deterministic,
            None => CountSource::Noise(draw_gumbel(&mut rng, self.model.dims.k)),
        };
        Ok((negatives, source, rng))
    }

    /// Forward and backward for one window, accumulating into the store's
    /// gradients.
    fn window_step(&mut self, data: &SplitDataset, index: usize, sums: &mut Sums) -> Result<()> {
        let w = &data.train[index];
        let (negatives, source, mut rng) = self.window_draws(data, index)?;
        let sample = WindowSample {
            user: w.user,
            input: &w.input,
            target: w.target,
            negatives: &negatives,
        };
        let non_finite = |e: Error| match e {
            Error::Diff(DiffError::NonFinite { .. }) => Error::NonFiniteLoss { window: index },
            other => other,
        };
        let grads = {
            let mut g = Graph::new(&self.model.store);
            let fwd = window_forward(&mut g, &self.model, sample, &source, &mut Sampler(&mut rng), self.weights, None)
                .map_err(non_finite)?;
            if !fwd.losses.l.is_finite() {
                return Err(Error::NonFiniteLoss { window: index });
            }
            sums.add(&fwd);
            g.backward(fwd.loss).map_err(|e| non_finite(e.into()))?
        };
        self.model.store.accumulate(&grads);
        Ok(())
    }

    fn batch(&mut self, data: &SplitDataset, range: std::ops::Range<usize>) -> Result<Sums> {
        let mut sums = Sums::default();
        self.model.store.zero_grads();
        for index in range {
            self.window_step(data, index, &mut sums)?;
        }
        if sums.n > 0 {
            self.model.store.scale_grads(1.0 / sums.n as f64);
            self.adam.step(&mut self.model.store)?;
        }
        self.model.store.zero_grads();
        Ok(sums)
    }

    /// Trains on the windows in `range` and takes one Adam step.
    pub fn train_batch(&mut self, data: &SplitDataset, range: std::ops::Range<usize>) -> Result<LossStats> {
        Ok(self.batch(data, range)?.stats())
    }

    /// One pass over the training windows in shuffled batch order.
    pub fn train_epoch(&mut self, data: &SplitDataset) -> Result<EpochStats> {
        let start = Instant::now();
        let mut batches = user_contiguous_batches(data.train.len(), self.batch_size);
        let mut rng = ChaCha8Rng::seed_from_u64(derive(&[self.seed, stream::SHUFFLE, self.epoch as u64]));
        batches.shuffle(&mut rng);
        let mut total = Sums::default();
        for (b, range) in batches.iter().enumerate() {
            let sums = self.batch(data, range.clone())?;
            let stats = sums.stats();
            log::debug!(
                "batch {}",
                serde_json::json!({"epoch": self.epoch, "batch": b, "stats": stats})
            );
            total.merge(&sums);
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            batches: batches.len(),
            loss: total.stats(),
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_window_once() {
        let b = user_contiguous_batches(10, 4);
        assert_eq!(b, vec![0..4, 4..8, 8..10]);
        assert!(user_contiguous_batches(0, 4).is_empty());
    }
}
