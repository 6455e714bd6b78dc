//! `dmapl` command-line tool.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dmapl::datasets::{load_csv, load_labels_csv, save_csv, save_labels_csv, Dataset, DomainShiftSpec};
use dmapl::eval::{evaluate, Metrics};
use dmapl::model::Model;
use dmapl::pipeline::{
    apply_overrides, prepare_benchmark, run_adaptation, summarize_cells, sweep, sweep_csv, RunSummary,
    SweepGrid, DEFAULT_SPLIT_RATIO,
};
use dmapl::splitter::{split_diagnostics, split_target};
use dmapl::trainer::{train_source_logged, Mode, TrainConfig};
use dmapl::{Error, Result};

#[derive(Parser)]
#[command(name = "dmapl", version, about = "Source-free domain adaptation with dual moving-average pseudo-labels")]
struct Cli {
    /// Log progress (repeat for more detail). RUST_LOG overrides this.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shifted benchmark and its splits.
    GenData(GenDataArgs),
    /// Train a source model on labeled source data.
    TrainSource(TrainSourceArgs),
    /// Partition target training data by source-model confidence.
    Split(SplitArgs),
    /// Adapt a source model to unlabeled target data.
    Adapt(AdaptArgs),
    /// Score a model on a labeled test set.
    Eval(EvalArgs),
    /// Run every adaptation mode from the same source model.
    Ablate(AblateArgs),
    /// Run a hyperparameter grid over several seeds.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file with training parameters; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a parameter, e.g. `--set p_th=0.95`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct GenDataArgs {
    /// TOML benchmark description; defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the benchmark seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-class train fraction for both domains.
    #[arg(long, default_value_t = DEFAULT_SPLIT_RATIO)]
    ratio: f64,
    /// Fraction of the source training split held out for validation.
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct TrainSourceArgs {
    #[arg(long)]
    source_train: PathBuf,
    #[arg(long)]
    source_val: PathBuf,
    /// Optional labeled test set scored after training.
    #[arg(long)]
    test: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    source_model: PathBuf,
    #[arg(long)]
    target_train: PathBuf,
    /// Ground-truth `index,label` file, used for pseudo-label accuracy only.
    #[arg(long)]
    target_truth: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    source_model: PathBuf,
    #[arg(long)]
    target_train: PathBuf,
    /// Ground-truth `index,label` file, used for split diagnostics only.
    #[arg(long)]
    target_truth: Option<PathBuf>,
    /// Labeled target test set for the final metrics.
    #[arg(long)]
    target_test: Option<PathBuf>,
    /// Shorthand for `--set mode=...`.
    #[arg(long)]
    mode: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Also write metrics.json and metrics.txt here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    source_model: PathBuf,
    #[arg(long)]
    target_train: PathBuf,
    #[arg(long)]
    target_truth: Option<PathBuf>,
    #[arg(long)]
    target_test: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML grid file.
    #[arg(long)]
    grid: PathBuf,
    /// Parallel runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    out: OutArgs,
}

/// Resolved `gen-data` settings, echoed to the output directory.
#[derive(Serialize)]
struct GenDataConfig {
    split_ratio: f64,
    val_fraction: f64,
    spec: DomainShiftSpec,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainSource(a) => train_source_cmd(a),
        Command::Split(a) => split_cmd(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let base = match &args.config {
        Some(p) => TrainConfig::from_toml_str(&read_text(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    let cfg = apply_overrides(&base, &args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_truth(path: Option<&PathBuf>, expected_len: usize) -> Result<Option<Vec<usize>>> {
    let Some(p) = path else { return Ok(None) };
    let truth = load_labels_csv(p)?;
    if truth.len() != expected_len {
        return Err(Error::Shape(format!(
            "{} has {} labels for {expected_len} target instances",
            p.display(),
            truth.len()
        )));
    }
    Ok(Some(truth))
}

/// Adaptation must never see target labels, even if the file carries them.
fn load_unlabeled(path: &Path) -> Result<Dataset> {
    let data = load_csv(path)?;
    if data.labels().is_some() {
        log::warn!("{}: ignoring label column of the target training set", path.display());
    }
    Ok(data.without_labels())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => toml::from_str::<DomainShiftSpec>(&read_text(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => DomainShiftSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let dir = &a.out.out;
    prepare_out(dir, a.out.force)?;
    let resolved = GenDataConfig {
        split_ratio: a.ratio,
        val_fraction: a.val_fraction,
        spec: spec.clone(),
    };
    write(
        &dir.join("config.toml"),
        toml::to_string(&resolved).map_err(|e| Error::Config(e.to_string()))?,
    )?;

    let data = prepare_benchmark(&spec, a.ratio, a.val_fraction)?;
    save_csv(&data.source_train, dir.join("source_train.csv"))?;
    save_csv(&data.source_val, dir.join("source_val.csv"))?;
    save_csv(&data.source_test, dir.join("source_test.csv"))?;
    save_csv(&data.target_train, dir.join("target_train.csv"))?;
    save_labels_csv(&data.target_train_truth, dir.join("target_train_truth.csv"))?;
    save_csv(&data.target_test, dir.join("target_test.csv"))?;
    println!(
        "wrote {} source train, {} source val, {} source test, {} target train, {} target test rows to {}",
        data.source_train.len(),
        data.source_val.len(),
        data.source_test.len(),
        data.target_train.len(),
        data.target_test.len(),
        dir.display()
    );
    Ok(())
}

fn train_source_cmd(a: TrainSourceArgs) -> Result<()> {
    let cfg = resolve_config(&a.config)?;
    let dir = &a.out.out;
    prepare_out(dir, a.out.force)?;
    write(&dir.join("config.toml"), cfg.to_toml_string())?;

    let train = load_csv(&a.source_train)?;
    let val = load_csv(&a.source_val)?;
    let outcome = train_source_logged(&train, &val, &cfg)?;
    outcome.model.save(dir.join("model.txt"))?;
    let mut log = String::new();
    for e in &outcome.epochs {
        log.push_str(&serde_json::to_string(e)?);
        log.push('\n');
    }
    write(&dir.join("epochs.jsonl"), log)?;
    println!(
        "kept epoch {} (validation accuracy {:.2}%)",
        outcome.best_epoch,
        100.0 * outcome.best_val_accuracy
    );
    if let Some(test) = &a.test {
        let metrics = evaluate(&outcome.model, &load_csv(test)?)?;
        write_json(&dir.join("metrics.json"), &metrics)?;
        print!("{}", metrics.to_table());
    }
    Ok(())
}

#[derive(Serialize)]
struct SplitSummary {
    threshold: f64,
    labeled: usize,
    unlabeled: usize,
    ratio: f64,
    pl_accuracy: Option<f64>,
}

fn split_cmd(a: SplitArgs) -> Result<()> {
    let cfg = resolve_config(&a.config)?;
    let dir = &a.out.out;
    prepare_out(dir, a.out.force)?;
    write(&dir.join("config.toml"), cfg.to_toml_string())?;

    let model = Model::load(&a.source_model)?;
    let target = load_unlabeled(&a.target_train)?;
    let truth = load_truth(a.target_truth.as_ref(), target.len())?;
    let split = split_target(&model, &target, cfg.p_th)?;
    split.write_csv(dir.join("split.csv"))?;
    let diag = split_diagnostics(&split, truth.as_deref());
    let summary = SplitSummary {
        threshold: split.threshold_used,
        labeled: split.labeled_indices.len(),
        unlabeled: split.unlabeled_indices.len(),
        ratio: diag.ratio,
        pl_accuracy: diag.pl_accuracy,
    };
    write_json(&dir.join("split_summary.json"), &summary)?;
    print!(
        "labeled {} / unlabeled {} (ratio {:.4})",
        summary.labeled, summary.unlabeled, summary.ratio
    );
    match summary.pl_accuracy {
        Some(acc) => println!(", pseudo-label accuracy {:.4}", acc),
        None => println!(),
    }
    Ok(())
}

fn adapt_cmd(a: AdaptArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.config)?;
    if let Some(m) = &a.mode {
        cfg.mode = m.parse()?;
    }
    let dir = &a.out.out;
    prepare_out(dir, a.out.force)?;
    write(&dir.join("config.toml"), cfg.to_toml_string())?;

    let model = Model::load(&a.source_model)?;
    let target = load_unlabeled(&a.target_train)?;
    let truth = load_truth(a.target_truth.as_ref(), target.len())?;
    let test = a.target_test.as_ref().map(load_csv).transpose()?;

    let started = Instant::now();
    let (outcome, metrics) = run_adaptation(&model, &target, truth.as_deref(), test.as_ref(), &cfg)?;
    let elapsed = started.elapsed().as_secs_f64();

    outcome.model.save(dir.join("model.txt"))?;
    write(&dir.join("epochs.jsonl"), outcome.record.epochs_jsonl()?)?;
    if let Some(split) = &outcome.split {
        split.write_csv(dir.join("split.csv"))?;
    }
    if let Some((store, index_map)) = &outcome.soft_labels {
        store.write_csv(dir.join("soft_labels.csv"), Some(index_map))?;
    }
    write_json(&dir.join("summary.json"), &RunSummary::from(&outcome.record))?;
    write_json(
        &dir.join("timing.json"),
        &serde_json::json!({ "wall_clock_secs": elapsed }),
    )?;

    if let Some(d) = outcome.record.split {
        print!("split ratio {:.4}", d.ratio);
        if let Some(acc) = d.pl_accuracy {
            print!(", pseudo-label accuracy {acc:.4}");
        }
        println!();
    }
    if let Some(m) = metrics {
        print!("{}", m.to_table());
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let test = load_csv(&a.test)?;
    let metrics: Metrics = evaluate(&model, &test)?;
    let table = metrics.to_table();
    if let Some(dir) = &a.out {
        prepare_out(dir, a.force)?;
        write_json(&dir.join("metrics.json"), &metrics)?;
        write(&dir.join("metrics.txt"), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let cfg = resolve_config(&a.config)?;
    let dir = &a.out.out;
    prepare_out(dir, a.out.force)?;
    write(&dir.join("config.toml"), cfg.to_toml_string())?;

    let model = Model::load(&a.source_model)?;
    let target = load_unlabeled(&a.target_train)?;
    let truth = load_truth(a.target_truth.as_ref(), target.len())?;
    let test = load_csv(&a.target_test)?;

    let mut table = String::from("mode,test_acc,macro_acc\n");
    for mode in Mode::ALL {
        let run_cfg = TrainConfig { mode, ..cfg.clone() };
        let (outcome, metrics) = run_adaptation(&model, &target, truth.as_deref(), Some(&test), &run_cfg)?;
        let metrics = metrics.expect("test set supplied");
        let sub = dir.join(mode.name());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        write(&sub.join("epochs.jsonl"), outcome.record.epochs_jsonl()?)?;
        write_json(&sub.join("summary.json"), &RunSummary::from(&outcome.record))?;
        table.push_str(&format!(
            "{},{},{}\n",
            mode.name(),
            metrics.micro_accuracy,
            metrics.macro_accuracy
        ));
        println!(
            "{:<20} {:>6.2}% (macro {:.2}%)",
            mode.name(),
            100.0 * metrics.micro_accuracy,
            100.0 * metrics.macro_accuracy
        );
    }
    write(&dir.join("ablation.csv"), table)
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let text = read_text(&a.grid)?;
    let grid = SweepGrid::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", a.grid.display())))?;
    grid.validate()?;
    let base = grid.base_config()?;
    let dir = &a.out.out;
    prepare_out(dir, a.out.force)?;
    write(&dir.join("config.toml"), base.to_toml_string())?;
    write(&dir.join("grid.toml"), &text)?;

    let benchmark = grid.benchmark.clone().unwrap_or_default();
    let rows = sweep(&grid, &benchmark, a.jobs)?;
    write(&dir.join("sweep.csv"), sweep_csv(&rows))?;
    let mut records = String::new();
    for r in &rows {
        records.push_str(&serde_json::to_string(r)?);
        records.push('\n');
    }
    write(&dir.join("runs.jsonl"), records)?;

    let cells = summarize_cells(&rows);
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    let mut means = String::from("params,runs,ratio,pl_acc,test_acc\n");
    for c in &cells {
        let params: Vec<String> = c.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let params = params.join(" ");
        means.push_str(&format!(
            "{params},{},{},{},{}\n",
            c.runs,
            c.ratio.map_or(String::new(), |v| v.to_string()),
            c.pl_accuracy.map_or(String::new(), |v| v.to_string()),
            c.test_accuracy.map_or(String::new(), |v| v.to_string()),
        ));
        println!(
            "{params:<30} runs {} ratio {} pl_acc {} test_acc {}",
            c.runs,
            fmt(c.ratio),
            fmt(c.pl_accuracy),
            fmt(c.test_accuracy)
        );
    }
    write(&dir.join("cells.csv"), means)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} runs failed; see sweep.csv", rows.len());
    }
    Ok(())
}
