//! Experiment protocol: training with per-epoch validation and early stopping,
//! test evaluation of the best epoch, the run variants (fixed count, k sweep,
//! planted-interest synthetic data) and the full-loss gradient check.

use std::fmt::Write as _;

use serde::Serialize;

use crate::allocator::Sampler;
use crate::checkpoint::{Checkpoint, ValidationPoint};
use crate::config::RunConfig;
use crate::data::{
    leave_one_out_split, load_interactions, synth_generate, ClickLabel, FilterConfig, InteractionLog, ItemId,
    SplitDataset, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, greedy_allocation, EvalSettings, MetricsReport, Stage};
use crate::model::{Model, ModelDims, ModelOptions};
use crate::seed::derive;
use crate::train::{EpochStats, Trainer};
use crate::window::{window_grad_check, WindowSample};

/// Reads, filters and splits the configured interaction log.
pub fn load_dataset(cfg: &RunConfig) -> Result<SplitDataset> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset configured".into()))?;
    let log = load_interactions(
        path,
        cfg.format,
        FilterConfig {
            min_user: cfg.min_user,
            min_item: cfg.min_item,
        },
    )?;
    Ok(leave_one_out_split(&log, cfg.t))
}

pub fn eval_settings(cfg: &RunConfig) -> EvalSettings {
    EvalSettings {
        mode: cfg.eval_mode,
        o: cfg.o,
        seed: cfg.seed,
    }
}

/// Fresh model sized for `data`.
pub fn init_model(cfg: &RunConfig, data: &SplitDataset) -> Model {
    Model::init(
        ModelDims::from_config(cfg, data.item_count, data.user_count),
        ModelOptions::from_config(cfg),
        cfg.seed,
    )
}

/// Training-log line for one epoch.
#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    #[serde(flatten)]
    pub train: EpochStats,
    pub val_hr_10: f64,
    pub val_ndcg_10: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub epochs: Vec<EpochRecord>,
    /// State at the epoch with the best validation NDCG@10.
    pub best: Checkpoint,
    pub valid: MetricsReport,
    pub test: MetricsReport,
    pub stopped_early: bool,
}

/// Trains from `start` (or a fresh model) until `cfg.epochs` or until
/// validation NDCG@10 has not improved for `cfg.patience` epochs, then
/// evaluates the best epoch on the test targets.
pub fn train_and_select(
    cfg: &RunConfig,
    data: &SplitDataset,
    start: Option<Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RunOutcome> {
    cfg.validate()?;
    let settings = eval_settings(cfg);
    let hash = cfg.hash();
    let (mut trainer, mut history) = match start {
        Some(ck) => {
            let mut t = Trainer::new(ck.model, cfg, data.user_count);
            t.adam = ck.adam;
            t.epoch = ck.epoch;
            (t, ck.history)
        }
        None => (Trainer::new(init_model(cfg, data), cfg, data.user_count), Vec::new()),
    };
    let snapshot = |t: &Trainer, history: &[ValidationPoint]| Checkpoint {
        config: cfg.clone(),
        model: t.model.clone(),
        adam: t.adam.clone(),
        epoch: t.epoch,
        history: history.to_vec(),
    };
    let mut best: Option<(f64, Checkpoint, MetricsReport)> = None;
    let mut records = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;
    while trainer.epoch < cfg.epochs {
        let stats = trainer.train_epoch(data)?;
        let mut valid = evaluate(&trainer.model, data, Stage::Valid, &settings)?;
        valid.config_hash = hash.clone();
        history.push(ValidationPoint {
            epoch: trainer.epoch,
            hr_10: valid.hr_10,
            ndcg_10: valid.ndcg_10,
        });
        let record = EpochRecord {
            train: stats,
            val_hr_10: valid.hr_10,
            val_ndcg_10: valid.ndcg_10,
        };
        log::info!("epoch {}", serde_json::to_string(&record).expect("epoch record serializes"));
        on_epoch(&record);
        records.push(record);
        if best.as_ref().map_or(true, |(b, ..)| valid.ndcg_10 > *b) {
            best = Some((valid.ndcg_10, snapshot(&trainer, &history), valid));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (_, mut best, valid) = match best {
        Some(b) => b,
        None => {
            // no epoch ran: the starting state is the selection
            let mut valid = evaluate(&trainer.model, data, Stage::Valid, &settings)?;
            valid.config_hash = hash.clone();
            (valid.ndcg_10, snapshot(&trainer, &history), valid)
        }
    };
    best.history = history;
    let mut test = evaluate(&best.model, data, Stage::Test, &settings)?;
    test.config_hash = hash;
    Ok(RunOutcome {
        config: cfg.clone(),
        epochs: records,
        best,
        valid,
        test,
        stopped_early,
    })
}

pub fn run_experiment(cfg: &RunConfig, data: &SplitDataset) -> Result<RunOutcome> {
    train_and_select(cfg, data, None, &mut |_| {})
}

/// Labelled test metrics side by side.
pub fn comparison_table(rows: &[(String, &MetricsReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14}{:>10}{:>10}{:>10}{:>10}  config",
        "variant", "HR@10", "NDCG@10", "HR@50", "NDCG@50"
    );
    for (label, r) in rows {
        let _ = writeln!(
            s,
            "{:<14}{:>10.4}{:>10.4}{:>10.4}{:>10.4}  {}",
            label, r.hr_10, r.ndcg_10, r.hr_50, r.ndcg_50, r.config_hash
        );
    }
    s
}

/// One run per maximum interest count, all under the same seed.
pub fn sweep_k(
    cfg: &RunConfig,
    data: &SplitDataset,
    ks: &[usize],
    on_epoch: &mut dyn FnMut(usize, &EpochRecord),
) -> Result<Vec<(usize, RunOutcome)>> {
    ks.iter()
        .map(|&k| {
            let c = RunConfig {
                k,
                fixed_h: None,
                ..cfg.clone()
            };
            train_and_select(&c, data, None, &mut |r| on_epoch(k, r)).map(|o| (k, o))
        })
        .collect()
}

/// The dynamic-count model followed by one fixed-count run per entry of `hs`.
pub fn ablate_fixed(
    cfg: &RunConfig,
    data: &SplitDataset,
    hs: &[usize],
    on_epoch: &mut dyn FnMut(&str, &EpochRecord),
) -> Result<Vec<(String, RunOutcome)>> {
    let mut variants = vec![("dynamic".to_string(), None)];
    variants.extend(hs.iter().map(|&h| (format!("fixed-{h}"), Some(h))));
    variants
        .into_iter()
        .map(|(label, fixed_h)| {
            let c = RunConfig {
                fixed_h,
                ..cfg.clone()
            };
            let out = train_and_select(&c, data, None, &mut |r| on_epoch(&label, r))?;
            Ok((label, out))
        })
        .collect()
}

/// Planted-interest data where users differ in how many interests they hold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthSettings {
    pub users: usize,
    /// Number of disjoint interest pools; users hold 1..=interests of them.
    pub interests: usize,
    pub items_per_interest: usize,
    pub seq_len: usize,
    /// Count used by the fixed-count comparison run.
    pub fixed_h: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            users: 2000,
            interests: 3,
            items_per_interest: 40,
            seq_len: 20,
            fixed_h: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthMixture {
    pub log: InteractionLog,
    pub labels: Vec<Vec<ClickLabel>>,
    pub spec: SyntheticSpec,
}

impl SynthMixture {
    pub fn pool_of(&self, item: ItemId) -> Option<usize> {
        self.spec.pools.iter().position(|p| p.contains(&item))
    }
}

/// Users interleaved round-robin over active counts `1..=interests`; each
/// count group is drawn from its own constant schedule over shared pools.
pub fn synth_mixture(s: &SynthSettings, seed: u64) -> Result<SynthMixture> {
    let base = SyntheticSpec::contiguous(s.users, s.interests, s.items_per_interest, 1, s.seq_len, seed);
    let mut groups = Vec::new();
    for a in 1..=s.interests {
        let users = s.users / s.interests + usize::from(a <= s.users % s.interests);
        let spec = SyntheticSpec {
            users,
            schedule: vec![(0, a)],
            seed: derive(&[seed, a as u64]),
            ..base.clone()
        };
        let data = synth_generate(&spec)?;
        groups.push((data.log.sequences().to_vec(), data.labels));
    }
    let mut sequences = Vec::with_capacity(s.users);
    let mut labels = Vec::with_capacity(s.users);
    let mut i = 0;
    while sequences.len() < s.users {
        for (seqs, labs) in &groups {
            if i < seqs.len() {
                sequences.push(seqs[i].clone());
                labels.push(labs[i].clone());
            }
        }
        i += 1;
    }
    Ok(SynthMixture {
        log: InteractionLog::from_sequences(sequences, base.item_count()),
        labels,
        spec: base,
    })
}

/// Count recovery on each user's final prefix (the test input window).
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CountRecovery {
    pub accuracy: f64,
    /// `confusion[true - 1][predicted - 1]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn count_recovery(model: &Model, data: &SplitDataset, mixture: &SynthMixture) -> Result<CountRecovery> {
    let k = model.dims.k;
    let width = k.max(mixture.spec.pools.len());
    let mut confusion = vec![vec![0usize; width]; width];
    let mut hits = 0usize;
    for u in &data.users {
        // the test target is the final click, so the prefix ends one before it
        let labels = &mixture.labels[u.user];
        let truth = labels[labels.len() - 2].active_count;
        let predicted = greedy_allocation(model, &u.test.input, u.user)?.h;
        confusion[truth - 1][predicted - 1] += 1;
        hits += usize::from(truth == predicted);
    }
    Ok(CountRecovery {
        accuracy: hits as f64 / data.users.len().max(1) as f64,
        confusion,
    })
}

/// Item-weighted fraction of allocated items that share the majority planted
/// interest of their sub-sequence, over every user's final prefix.
pub fn allocation_purity(model: &Model, data: &SplitDataset, mixture: &SynthMixture) -> Result<f64> {
    let pools = mixture.spec.pools.len();
    let (mut majority, mut total) = (0usize, 0usize);
    for u in &data.users {
        let ep = greedy_allocation(model, &u.test.input, u.user)?;
        let mut tally = vec![vec![0usize; pools]; ep.h];
        for step in &ep.steps {
            let item = u.test.input[step.position.expect("allocation steps carry a position")];
            if let Some(p) = mixture.pool_of(item) {
                tally[step.action][p] += 1;
            }
        }
        for t in &tally {
            majority += t.iter().copied().max().unwrap_or(0);
            total += t.iter().sum::<usize>();
        }
    }
    Ok(if total == 0 { 0.0 } else { majority as f64 / total as f64 })
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthVariant {
    pub label: String,
    pub recovery: CountRecovery,
    pub purity: f64,
    pub test_hr_10: f64,
    pub test_ndcg_10: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthReport {
    pub settings: SynthSettings,
    pub dynamic: SynthVariant,
    pub fixed: SynthVariant,
    pub seconds: f64,
}

impl SynthReport {
    pub fn purity_margin(&self) -> f64 {
        self.dynamic.purity - self.fixed.purity
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10}{:>12}{:>10}{:>10}{:>10}",
            "variant", "count acc", "purity", "HR@10", "NDCG@10"
        );
        for v in [&self.dynamic, &self.fixed] {
            let _ = writeln!(
                s,
                "{:<10}{:>12.4}{:>10.4}{:>10.4}{:>10.4}",
                v.label, v.recovery.accuracy, v.purity, v.test_hr_10, v.test_ndcg_10
            );
        }
        let _ = writeln!(s, "count confusion (rows: planted, columns: predicted)");
        for (i, row) in self.dynamic.recovery.confusion.iter().enumerate() {
            let _ = writeln!(s, "  {}: {:?}", i + 1, row);
        }
        s
    }
}

/// Trains the dynamic model and a fixed-count model on the same planted data.
pub fn run_synthetic(
    cfg: &RunConfig,
    settings: &SynthSettings,
    on_epoch: &mut dyn FnMut(&str, &EpochRecord),
) -> Result<SynthReport> {
    let start = std::time::Instant::now();
    let mixture = synth_mixture(settings, cfg.seed)?;
    let data = leave_one_out_split(&mixture.log, cfg.t);
    let mut variant = |label: &str, fixed_h: Option<usize>| -> Result<SynthVariant> {
        let c = RunConfig {
            fixed_h,
            ..cfg.clone()
        };
        let out = train_and_select(&c, &data, None, &mut |r| on_epoch(label, r))?;
        Ok(SynthVariant {
            label: label.to_string(),
            recovery: count_recovery(&out.best.model, &data, &mixture)?,
            purity: allocation_purity(&out.best.model, &data, &mixture)?,
            test_hr_10: out.test.hr_10,
            test_ndcg_10: out.test.ndcg_10,
            epochs: out.epochs.len(),
        })
    };
    let dynamic = variant("dynamic", None)?;
    let fixed = variant(&format!("fixed-{}", settings.fixed_h), Some(settings.fixed_h))?;
    Ok(SynthReport {
        settings: settings.clone(),
        dynamic,
        fixed,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckSettings {
    pub d: usize,
    pub t: usize,
    pub k: usize,
    pub o: usize,
    /// Windows checked, each with its own frozen noise and actions.
    pub windows: usize,
    /// Adam steps taken before checking, so biases sit away from ReLU kinks.
    pub warmup_steps: usize,
    pub eps: f64,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            d: 4,
            t: 3,
            k: 2,
            o: 3,
            windows: 4,
            warmup_steps: 10,
            eps: 1e-5,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub settings: GradCheckSettings,
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate, and its offset.
    pub worst: (String, usize),
    pub coords: usize,
    pub seconds: f64,
}

/// Central-difference check of the joint window loss against every parameter
/// of a small model, with the Gumbel noise and all actions frozen per window.
pub fn grad_check_run(s: &GradCheckSettings) -> Result<GradCheckSummary> {
    let start = std::time::Instant::now();
    let synth = SynthSettings {
        users: 8,
        interests: 2,
        items_per_interest: 5,
        seq_len: s.t + 4,
        fixed_h: 2,
    };
    let mixture = synth_mixture(&synth, s.seed)?;
    let data = leave_one_out_split(&mixture.log, s.t);
    let cfg = RunConfig {
        d: s.d,
        t: s.t,
        k: s.k,
        o: s.o,
        lr: 0.01,
        batch_size: Some(4),
        seed: s.seed,
        ..RunConfig::default()
    };
    let mut trainer = Trainer::new(init_model(&cfg, &data), &cfg, data.user_count);
    let n = data.train.len();
    for step in 0..s.warmup_steps {
        let b = (step * 4) % n;
        trainer.train_batch(&data, b..(b + 4).min(n))?;
    }
    let model = &trainer.model;
    let mut worst = (0.0f64, 0usize);
    let mut coords = 0;
    for i in 0..s.windows {
        let index = (i * 7) % n;
        let w = &data.train[index];
        let (negatives, source, mut rng) = trainer.window_draws(&data, index)?;
        let sample = WindowSample {
            user: w.user,
            input: &w.input,
            target: w.target,
            negatives: &negatives,
        };
        let report = window_grad_check(model, sample, &source, &mut Sampler(&mut rng), trainer.weights, s.eps)?;
        coords = report.coords();
        if report.max_rel_error >= worst.0 {
            worst = (report.max_rel_error, report.worst_coord);
        }
    }
    let (pid, offset) = model
        .store
        .locate(worst.1)
        .ok_or_else(|| Error::Config("gradient check found no parameters".into()))?;
    Ok(GradCheckSummary {
        settings: s.clone(),
        max_rel_error: worst.0,
        worst: (model.store.name(pid).to_string(), offset),
        coords,
        seconds: start.elapsed().as_secs_f64(),
    })
}
