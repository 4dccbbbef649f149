use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rdrsr_core::checkpoint::Checkpoint;
use rdrsr_core::eval::{evaluate, MetricsReport, Stage};
use rdrsr_core::experiment::{
    ablate_fixed, comparison_table, eval_settings, grad_check_run, load_dataset, run_synthetic, sweep_k,
    train_and_select, EpochRecord, GradCheckSettings, RunOutcome, SynthSettings,
};
use rdrsr_core::RunConfig;

/// Gradient checks at or above this relative error fail.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "rdrsr", version, about = "Sequential recommender with a dynamic number of interests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with per-epoch validation and evaluate the best epoch on test.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint.
    Evaluate(EvaluateArgs),
    /// Train one model per maximum interest count.
    SweepK(SweepArgs),
    /// Compare the dynamic count against fixed counts.
    AblateFixed(AblateArgs),
    /// Train on planted-interest data and report count recovery.
    Synth(SynthArgs),
    /// Check the analytic gradient of the full loss on a small model.
    GradCheck(GradCheckArgs),
}

/// Every run-configuration key. Flags win over `--config`.
#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Interaction log path.
    #[arg(long)]
    dataset: Option<String>,
    /// uirt (user item rating time) or uit (user item time).
    #[arg(long)]
    format: Option<String>,
    /// Drop users with fewer interactions.
    #[arg(long)]
    min_user: Option<String>,
    /// Drop items with fewer interactions.
    #[arg(long)]
    min_item: Option<String>,
    /// Embedding size.
    #[arg(long)]
    d: Option<String>,
    /// Window length.
    #[arg(long)]
    t: Option<String>,
    /// Maximum interest count.
    #[arg(long)]
    k: Option<String>,
    /// Sampled negatives per window (and per user in sampled evaluation).
    #[arg(long)]
    o: Option<String>,
    /// Gumbel-softmax temperature.
    #[arg(long)]
    temperature: Option<String>,
    /// Weight of the count regularizer.
    #[arg(long)]
    lambda_o: Option<String>,
    /// Weight of the policy loss.
    #[arg(long)]
    beta: Option<String>,
    /// Self-attention blocks in the encoder.
    #[arg(long)]
    num_blocks: Option<String>,
    /// Policy hidden width; 0 means d.
    #[arg(long)]
    policy_hidden: Option<String>,
    /// Count-head attention width; 0 means d.
    #[arg(long)]
    attn_hidden: Option<String>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<String>,
    /// Windows per batch, or `auto`.
    #[arg(long)]
    batch_size: Option<String>,
    /// Maximum training epochs.
    #[arg(long)]
    epochs: Option<String>,
    /// Epochs without a validation NDCG@10 gain before stopping.
    #[arg(long)]
    patience: Option<String>,
    /// Seed for every random stream.
    #[arg(long)]
    seed: Option<String>,
    /// Fixed interest count, or `none` for the dynamic count.
    #[arg(long)]
    fixed_h: Option<String>,
    /// full | sampled
    #[arg(long)]
    eval_mode: Option<String>,
    /// running | pairwise
    #[arg(long)]
    pooling: Option<String>,
    /// Reserved; only `false` is accepted.
    #[arg(long)]
    residual: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let all = [
            ("dataset", &self.dataset),
            ("format", &self.format),
            ("min_user", &self.min_user),
            ("min_item", &self.min_item),
            ("d", &self.d),
            ("t", &self.t),
            ("k", &self.k),
            ("o", &self.o),
            ("temperature", &self.temperature),
            ("lambda_o", &self.lambda_o),
            ("beta", &self.beta),
            ("num_blocks", &self.num_blocks),
            ("policy_hidden", &self.policy_hidden),
            ("attn_hidden", &self.attn_hidden),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("patience", &self.patience),
            ("seed", &self.seed),
            ("fixed_h", &self.fixed_h),
            ("eval_mode", &self.eval_mode),
            ("pooling", &self.pooling),
            ("residual", &self.residual),
        ];
        all.into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }

    /// File (or `base`, or defaults), then flags.
    fn resolve(&self, base: Option<&RunConfig>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => RunConfig::from_file(path)?,
            (None, Some(b)) => b.clone(),
            (None, None) => RunConfig::default(),
        };
        for (k, v) in self.overrides() {
            cfg.set(k, v).with_context(|| format!("--{}", k.replace('_', "-")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory for the checkpoint, metrics and training log.
    /// Directory for the reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["valid", "test"])]
    stage: String,
    /// Directory for the reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Interest counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7")]
    ks: Vec<usize>,
    /// Directory for the reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Fixed counts compared against the dynamic model.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    hs: Vec<usize>,
    /// Directory for the reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 2000)]
    users: usize,
    /// Planted interest pools; users hold between one and all of them.
    #[arg(long, default_value_t = 3)]
    interests: usize,
    /// Items in each pool.
    #[arg(long, default_value_t = 40)]
    items_per_interest: usize,
    /// Clicks per user.
    #[arg(long, default_value_t = 20)]
    seq_len: usize,
    /// Count used by the fixed-count comparison.
    #[arg(long, default_value_t = 3)]
    compare_h: usize,
    /// Directory for the reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    t: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    o: usize,
    #[arg(long, default_value_t = 4)]
    windows: usize,
    #[arg(long, default_value_t = 10)]
    warmup_steps: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn epoch_line(prefix: &str, r: &EpochRecord) -> String {
    let l = &r.train.loss;
    format!(
        "{prefix}epoch {:>3}  L {:.4}  L_CE {:.4}  L_RL {:+.5}  mean h {:.2}  val NDCG@10 {:.4}  ({:.1}s)",
        r.train.epoch, l.l, l.l_ce, l.l_rl, l.mean_h, r.val_ndcg_10, r.train.seconds
    )
}

fn json_line<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("report serializes");
    s.push('\n');
    s
}

fn save_outcome(dir: &Path, out: &RunOutcome, log: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    out.best.save(dir.join("best.ckpt"))?;
    write(dir, "config.cfg", &out.config.to_text())?;
    write(dir, "train.jsonl", log)?;
    write(dir, "metrics.jsonl", &(out.valid.to_jsonl() + &out.test.to_jsonl()))?;
    write(dir, "metrics.txt", &(out.valid.to_table() + "\n" + &out.test.to_table()))
}

fn train(a: TrainArgs) -> Result<()> {
    let start = a.checkpoint.as_ref().map(Checkpoint::load).transpose()?;
    let cfg = a.cfg.resolve(start.as_ref().map(|c| &c.config))?;
    let data = load_dataset(&cfg)?;
    println!(
        "{} users, {} items, {} training windows, config {}",
        data.users.len(),
        data.item_count,
        data.train.len(),
        cfg.hash()
    );
    let mut log = String::new();
    let out = train_and_select(&cfg, &data, start, &mut |r| {
        println!("{}", epoch_line("", r));
        log.push_str(&json_line(r));
    })?;
    if out.stopped_early {
        println!("stopped early after {} epochs", out.epochs.len());
    }
    println!("best epoch {}", out.best.epoch);
    print!("{}\n{}", out.valid.to_table(), out.test.to_table());
    if let Some(dir) = &a.out {
        save_outcome(dir, &out, &log)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = a.cfg.resolve(Some(&ck.config))?;
    let data = load_dataset(&cfg)?;
    if data.item_count != ck.model.dims.items || data.user_count != ck.model.dims.users {
        bail!(
            "dataset has {} items and {} users but the checkpoint was trained on {} and {}",
            data.item_count,
            data.user_count,
            ck.model.dims.items,
            ck.model.dims.users
        );
    }
    let stage = if a.stage == "valid" { Stage::Valid } else { Stage::Test };
    let mut report = evaluate(&ck.model, &data, stage, &eval_settings(&cfg))?;
    report.config_hash = ck.config_hash();
    print!("{}", report.to_table());
    if let Some(dir) = &a.out {
        write(dir, &format!("{}.jsonl", stage.key()), &report.to_jsonl())?;
        write(dir, &format!("{}.txt", stage.key()), &report.to_table())?;
    }
    Ok(())
}

fn labelled_table(rows: &[(String, RunOutcome)]) -> String {
    let refs: Vec<(String, &MetricsReport)> = rows.iter().map(|(l, o)| (l.clone(), &o.test)).collect();
    comparison_table(&refs)
}

fn save_variants(dir: &Path, rows: &[(String, RunOutcome)], table: &str) -> Result<()> {
    write(dir, "comparison.txt", table)?;
    let mut lines = String::new();
    for (label, out) in rows {
        for line in out.test.to_jsonl().lines() {
            let mut v: serde_json::Value = serde_json::from_str(line)?;
            v["variant"] = label.clone().into();
            lines.push_str(&json_line(&v));
        }
    }
    write(dir, "comparison.jsonl", &lines)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = a.cfg.resolve(None)?;
    let data = load_dataset(&cfg)?;
    let runs = sweep_k(&cfg, &data, &a.ks, &mut |k, r| println!("{}", epoch_line(&format!("k={k} "), r)))?;
    let rows: Vec<(String, RunOutcome)> = runs.into_iter().map(|(k, o)| (format!("k={k}"), o)).collect();
    let table = labelled_table(&rows);
    print!("{table}");
    if let Some(dir) = &a.out {
        save_variants(dir, &rows, &table)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.cfg.resolve(None)?;
    if let Some(&h) = a.hs.iter().find(|&&h| h < 1 || h > cfg.k) {
        bail!("fixed count {h} must lie in 1..={}", cfg.k);
    }
    let data = load_dataset(&cfg)?;
    let rows = ablate_fixed(&cfg, &data, &a.hs, &mut |label, r| {
        println!("{}", epoch_line(&format!("{label} "), r))
    })?;
    let table = labelled_table(&rows);
    print!("{table}");
    if let Some(dir) = &a.out {
        save_variants(dir, &rows, &table)?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = a.cfg.resolve(None)?;
    let settings = SynthSettings {
        users: a.users,
        interests: a.interests,
        items_per_interest: a.items_per_interest,
        seq_len: a.seq_len,
        fixed_h: a.compare_h,
    };
    if settings.fixed_h > cfg.k {
        bail!("--compare-h {} exceeds k = {}", settings.fixed_h, cfg.k);
    }
    let report = run_synthetic(&cfg, &settings, &mut |label, r| {
        println!("{}", epoch_line(&format!("{label} "), r))
    })?;
    print!("{}", report.to_table());
    println!("purity margin {:+.4}, {:.1}s", report.purity_margin(), report.seconds);
    if let Some(dir) = &a.out {
        write(dir, "synth.txt", &report.to_table())?;
        write(dir, "synth.json", &json_line(&report))?;
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<bool> {
    let s = GradCheckSettings {
        d: a.d,
        t: a.t,
        k: a.k,
        o: a.o,
        windows: a.windows,
        warmup_steps: a.warmup_steps,
        eps: a.eps,
        seed: a.seed,
    };
    let r = grad_check_run(&s)?;
    println!(
        "max relative error {:.3e} at {}[{}] over {} coordinates x {} windows ({:.2}s)",
        r.max_rel_error, r.worst.0, r.worst.1, r.coords, s.windows, r.seconds
    );
    let ok = r.max_rel_error < GRAD_TOLERANCE;
    println!("{}", if ok { "ok" } else { "FAILED" });
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Evaluate(a) => evaluate_cmd(a).map(|_| true),
        Command::SweepK(a) => sweep(a).map(|_| true),
        Command::AblateFixed(a) => ablate(a).map(|_| true),
        Command::Synth(a) => synth(a).map(|_| true),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
