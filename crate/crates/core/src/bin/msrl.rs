use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use msrl_core::error::{MsrlError, Result};
use msrl_core::io::config::{build_eval_set, sample_world};
use msrl_core::io::{
    export_metrics, load_checkpoint, load_config, load_dataset, parse_metrics_csv, save_checkpoint, save_dataset,
    DataSpec, ExperimentConfig, OutputLock,
};
use msrl_core::metrics::{group_accuracy, mean_std, selection_cv, DEFAULT_DISTRACTORS};
use msrl_core::objective::Variant;
use msrl_core::trainer::Trainer;

#[derive(Debug, Parser)]
#[command(name = "msrl", version, about = "Multi-group self-paced relevance learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn non_empty_path(s: &str) -> std::result::Result<PathBuf, String> {
    if s.is_empty() {
        Err("path must not be empty".into())
    } else {
        Ok(PathBuf::from(s))
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a synthetic world and write it as dataset JSON.
    Generate {
        #[arg(long, value_parser = non_empty_path)]
        config: PathBuf,
        /// Training pairs go here; evaluation pairs to `<stem>.eval.json` beside it.
        #[arg(long, value_parser = non_empty_path)]
        out: PathBuf,
    },
    /// Train one run and write metrics.csv, checkpoint.txt and config.json.
    Train {
        #[arg(long, value_parser = non_empty_path)]
        config: PathBuf,
        #[arg(long, value_parser = non_empty_path)]
        out: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = non_empty_path)]
        resume: Option<PathBuf>,
        /// Also write `checkpoint_<iteration>.txt` every N iterations.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Score a checkpoint on a dataset and write per-group accuracy.
    Eval {
        #[arg(long, value_parser = non_empty_path)]
        ckpt: PathBuf,
        #[arg(long, value_parser = non_empty_path)]
        data: PathBuf,
        #[arg(long, value_parser = non_empty_path)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DISTRACTORS)]
        distractors: usize,
    },
    /// Summarize finished runs, one row per run and one per variant.
    Report {
        #[arg(long, num_args = 1.., required = true, value_parser = non_empty_path)]
        runs: Vec<PathBuf>,
        #[arg(long, value_parser = non_empty_path)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate { config, out } => generate(&config, &out),
        Command::Train { config, out, variant, seed, resume, checkpoint_every } => {
            train(&config, out, variant, seed, resume.as_deref(), checkpoint_every)
        }
        Command::Eval { ckpt, data, out, distractors } => eval(&ckpt, &data, &out, distractors),
        Command::Report { runs, out } => report(&runs, &out),
    }
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn generate(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config_path)?;
    let DataSpec::World(spec) = &cfg.data else {
        return Err(MsrlError::Validation("generate needs a world data section".into()));
    };
    let data = sample_world(spec, cfg.world_seed().unwrap_or(cfg.trainer.seed))?;
    save_dataset(&data.train.catalog, out)?;
    save_dataset(&data.eval.catalog, &out.with_extension("eval.json"))?;
    Ok(())
}

fn train(
    config_path: &Path,
    out: Option<PathBuf>,
    variant: Option<Variant>,
    seed: Option<u64>,
    resume: Option<&Path>,
    checkpoint_every: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(config_path)?;
    if let Some(v) = variant {
        cfg.trainer.variant = v;
    }
    if let Some(s) = seed {
        cfg.trainer.seed = s;
    }
    let out = out
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| MsrlError::Validation("no output directory: pass --out or set output_dir".into()))?;
    if checkpoint_every == Some(0) {
        return Err(MsrlError::Validation("--checkpoint-every must be at least 1".into()));
    }
    let _lock = OutputLock::acquire(&out)?;
    let (catalog, eval) = cfg.materialize(base_dir(config_path))?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config != cfg.trainer {
                return Err(MsrlError::Validation("checkpoint was written under a different trainer config".into()));
            }
            Trainer::resume(&catalog, &eval, cfg.trainer.clone(), ckpt.state)?
        }
        None => Trainer::new(&catalog, &eval, cfg.trainer.clone())?,
    };
    while trainer.state().iteration < cfg.trainer.iterations {
        trainer.step(&mut |_| {})?;
        let it = trainer.state().iteration;
        if checkpoint_every.is_some_and(|n| it % n == 0) {
            save_checkpoint(&cfg.trainer, trainer.state(), &out.join(format!("checkpoint_{it}.txt")))?;
        }
    }
    export_metrics(&trainer.state().metrics, catalog.n_groups(), &out.join("metrics.csv"))?;
    save_checkpoint(&cfg.trainer, trainer.state(), &out.join("checkpoint.txt"))?;
    let resolved = ExperimentConfig { output_dir: None, ..cfg };
    fs::write(out.join("config.json"), resolved.to_json()? + "\n")?;
    Ok(())
}

fn eval(ckpt_path: &Path, data: &Path, out: &Path, distractors: usize) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let catalog = load_dataset(data)?;
    let labels = catalog.labels().to_vec();
    let set = build_eval_set(catalog, distractors, ckpt.config.seed)?;
    let acc = group_accuracy(&ckpt.state.params, &set)?;
    let mut text = String::from("group,label,items,acc\n");
    for (g, label) in labels.iter().enumerate() {
        let a = acc.per_group[g].map_or_else(|| "NA".to_string(), |a| format!("{a:.6}"));
        let _ = writeln!(text, "{g},{label},{},{a}", acc.counts[g]);
    }
    let total: usize = acc.counts.iter().sum();
    let _ = writeln!(text, "overall,,{total},{:.6}", acc.overall);
    let _ = writeln!(text, "ave,,{total},{:.6}", acc.ave);
    let _ = writeln!(text, "std,,{total},{:.6}", acc.std);
    fs::write(out, text)?;
    Ok(())
}

struct RunSummary {
    variant: Variant,
    seed: u64,
    iteration: usize,
    acc: f64,
    ave: f64,
    std: f64,
    selected: f64,
    cv: Option<f64>,
}

fn summarize(dir: &Path) -> Result<RunSummary> {
    let cfg = load_config(&dir.join("config.json"))?;
    let (_, metrics) = parse_metrics_csv(&fs::read_to_string(dir.join("metrics.csv"))?)?;
    let last = metrics.last().ok_or_else(|| MsrlError::Parse(format!("{}: metrics.csv has no rows", dir.display())))?;
    let windows: Vec<_> = metrics.iter().filter(|m| m.iteration > 0).collect();
    let (selected, _) = mean_std(&windows.iter().map(|m| m.selected_total).collect::<Vec<_>>());
    let cvs: Option<Vec<f64>> = windows.iter().map(|m| selection_cv(&m.selected_per_group).ok().map(|c| c.1)).collect();
    let (ave, std) = last.group_ave_std();
    Ok(RunSummary {
        variant: cfg.trainer.variant,
        seed: cfg.trainer.seed,
        iteration: last.iteration,
        acc: last.val_acc,
        ave,
        std,
        selected,
        cv: cvs.filter(|c| !c.is_empty()).map(|c| mean_std(&c).0),
    })
}

fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let summaries: Vec<(String, RunSummary)> =
        runs.iter().map(|d| summarize(d).map(|s| (d.display().to_string(), s))).collect::<Result<_>>()?;
    let cell = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
    let mut text = String::from("run,variant,seed,iteration,val_acc,acc_ave,acc_std,selected_mean,selected_cv\n");
    for (name, s) in &summaries {
        let _ = writeln!(
            text,
            "{name},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            s.variant, s.seed, s.iteration, s.acc, s.ave, s.std, s.selected, cell(s.cv)
        );
    }
    let mut by_variant: BTreeMap<Variant, Vec<&RunSummary>> = BTreeMap::new();
    for (_, s) in &summaries {
        by_variant.entry(s.variant).or_default().push(s);
    }
    for (variant, group) in by_variant {
        let mean = |f: &dyn Fn(&RunSummary) -> f64| mean_std(&group.iter().map(|s| f(s)).collect::<Vec<_>>()).0;
        let cv: Option<Vec<f64>> = group.iter().map(|s| s.cv).collect();
        let _ = writeln!(
            text,
            "mean,{variant},NA,NA,{:.6},{:.6},{:.6},{:.6},{}",
            mean(&|s| s.acc),
            mean(&|s| s.ave),
            mean(&|s| s.std),
            mean(&|s| s.selected),
            cell(cv.map(|c| mean_std(&c).0))
        );
    }
    fs::write(out, text)?;
    Ok(())
}
