//! Command-line front end. [`run_command`] parses arguments, runs one
//! subcommand and returns the process exit code: 0 on success, 2 on usage
//! or configuration errors, 1 on runtime failures. Failures print a single
//! `error: kind=<kind> message=<text>` line to stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{parse_set_arg, ExperimentConfig};
use crate::data::save_domain_dir;
use crate::error::{Error, Result};
use crate::eval::{
    dataset_accuracy, export_embeddings, format_table, leave_one_domain_out, lodo_sources,
    overfit_gap_area, read_episodes_csv, write_episodes_csv, LodoOptions, METRIC_HELDOUT,
    METRIC_SOURCE,
};
use crate::metatrain::{train_deepall, train_with_hook, TrainOutcome};
use crate::model::ModelParams;

#[derive(Parser, Debug)]
#[command(name = "etta", about = "Episodic domain-generalization training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.alpha=0.01` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (falls back to eval.output_dir, then $ETTA_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Worker threads for grid runs.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic domains and write them to disk.
    GenerateData(Common),
    /// Episodic meta-training on the source domains.
    Train(Common),
    /// Pooled supervised baseline.
    Deepall(Common),
    /// Leave-one-domain-out grid over all configured methods and seeds.
    Lodo(Common),
    /// Overfitting gap area of an `episodes.csv` file.
    GapArea {
        episodes: PathBuf,
        #[arg(long, default_value_t = 0)]
        burn_in: usize,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Embed every sample of the configured domains with a checkpoint.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load (falls back to eval.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Shape(_) => "shape",
        Error::UndefinedPrototype { .. } => "undefined_prototype",
        Error::ZeroNorm(_) => "zero_norm",
        Error::Load { .. } => "load",
        Error::Io { .. } => "io",
        Error::NonFinite(_) => "non_finite",
        Error::Config(_) => "config",
        Error::UnknownKey(_) => "unknown_key",
        Error::Json(_) => "json",
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownKey(_) => 2,
        _ => 1,
    }
}

/// Runs the CLI on `argv` (including the program name).
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} message={msg}", error_kind(&e));
            exit_code(&e)
        }
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let overrides = common
        .set
        .iter()
        .map(|s| parse_set_arg(s))
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => {
            let mut tree = ExperimentConfig::default().to_value();
            crate::config::apply_overrides(&mut tree, &overrides)?;
            ExperimentConfig::from_value(tree)?
        }
    };
    if let Some(out) = &common.out {
        cfg.eval.output_dir = Some(out.clone());
    }
    if let Some(j) = common.jobs {
        cfg.eval.jobs = j;
    }
    Ok(cfg)
}

/// Creates the output directory, refusing to reuse a non-empty one unless
/// `force` is set.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(Error::InvalidArgument(format!(
                    "output directory {} is not empty (use --force)",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn start_run(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = resolve(common)?;
    let out = cfg.output_dir();
    prepare_out_dir(&out, common.force)?;
    write_json(&out.join("config.resolved.json"), &cfg.to_value())?;
    Ok((cfg, out))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenerateData(c) => generate_data(&c),
        Command::Train(c) => single_run(&c, false),
        Command::Deepall(c) => single_run(&c, true),
        Command::Lodo(c) => lodo(&c),
        Command::GapArea {
            episodes,
            burn_in,
            window,
        } => {
            let logs = read_episodes_csv(&episodes)?;
            println!("{}", overfit_gap_area(&logs, burn_in, window)?);
            Ok(())
        }
        Command::ExportEmbeddings { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let path = checkpoint
                .or_else(|| cfg.eval.checkpoint.clone())
                .ok_or_else(|| Error::Config("no checkpoint given".into()))?;
            let ck = load_checkpoint(&path)?;
            let out = cfg.output_dir();
            prepare_out_dir(&out, common.force)?;
            let rows = export_embeddings(&ck.params, &cfg.domains()?, &out.join("embeddings.csv"))?;
            println!("{rows} rows -> {}", out.join("embeddings.csv").display());
            Ok(())
        }
    }
}

fn generate_data(common: &Common) -> Result<()> {
    let (cfg, out) = start_run(common)?;
    for d in cfg.domains()? {
        save_domain_dir(&d, &out.join(&d.name))?;
    }
    println!(
        "wrote {} domains to {}",
        cfg.data.num_domains,
        out.display()
    );
    Ok(())
}

fn single_run(common: &Common, deepall: bool) -> Result<()> {
    let (cfg, out) = start_run(common)?;
    let hash = cfg.content_hash();
    let domains = cfg.split_domains()?;
    let (sources, target) = match cfg.eval.held_out {
        Some(h) if h < domains.len() => (lodo_sources(&domains, h), Some(&domains[h])),
        Some(h) => {
            return Err(Error::Config(format!(
                "eval.held_out {h} out of range for {} domains",
                domains.len()
            )))
        }
        None => (domains.iter().map(|d| d.train.clone()).collect(), None),
    };
    let backbone = cfg.model.backbone(sources[0].dim());
    let initial = ModelParams::init(backbone, sources[0].num_classes, cfg.train.seed)?;
    let diagnostics = target.map(|t| &t.test);

    let outcome: TrainOutcome = if deepall {
        train_deepall(&sources, &cfg.train, &initial, diagnostics)?
    } else {
        let every = cfg.train.checkpoint_every;
        let ck_dir = out.join("checkpoints");
        train_with_hook(
            &sources,
            &cfg.train,
            &cfg.mts,
            &initial,
            diagnostics,
            |it, p| {
                if every > 0 && (it + 1) % every == 0 {
                    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
                    save_checkpoint(
                        &ck_dir.join(format!("iter_{:06}.json", it + 1)),
                        p,
                        &hash,
                        Some(it + 1),
                    )?;
                }
                Ok(())
            },
        )?
    };
    write_episodes_csv(&outcome.logs, &out.join("episodes.csv"))?;
    save_checkpoint(
        &out.join("checkpoint.json"),
        &outcome.params,
        &hash,
        Some(cfg.train.iterations),
    )?;

    let source_acc = domains
        .iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != cfg.eval.held_out)
        .map(|(_, d)| dataset_accuracy(&outcome.params, &d.test))
        .collect::<Result<Vec<_>>>()?;
    let heldout_acc = target
        .map(|t| dataset_accuracy(&outcome.params, &t.test))
        .transpose()?;
    let gap = if target.is_some() && !deepall {
        Some(overfit_gap_area(
            &outcome.logs,
            cfg.eval.burn_in,
            cfg.eval.smoothing_window,
        )?)
    } else {
        None
    };
    let summary = json!({
        "config_hash": hash,
        "method": if deepall { "deepall" } else { "episodic" },
        "held_out": target.map(|t| t.name().to_string()),
        "heldout_acc": heldout_acc,
        "source_acc": source_acc.iter().sum::<f64>() / source_acc.len() as f64,
        "gap_area": gap,
    });
    write_json(&out.join("results.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn lodo(common: &Common) -> Result<()> {
    let (cfg, out) = start_run(common)?;
    let hash = cfg.content_hash();
    let domains = cfg.split_domains()?;
    let methods = cfg.methods()?;
    let options = LodoOptions {
        backbone: cfg.model.backbone(domains[0].train.dim()),
        seeds: cfg.eval.seeds.clone(),
        jobs: cfg.eval.jobs,
        config_hash: hash,
    };
    let report = leave_one_domain_out(&domains, &methods, &options)?;
    for cell in &report.cells {
        let dir = out
            .join("cells")
            .join(domains[cell.held_out].name())
            .join(&methods[cell.method].name)
            .join(format!("seed{}", cell.seed));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_episodes_csv(&cell.logs, &dir.join("episodes.csv"))?;
        write_json(
            &dir.join("cell.json"),
            &json!({
                "held_out": domains[cell.held_out].name(),
                "method": methods[cell.method].name,
                "seed": cell.seed,
                "heldout_acc": cell.heldout_acc,
                "source_acc": cell.source_acc,
                "trained_on": cell.trained_on,
            }),
        )?;
    }
    write_json(
        &out.join("results.json"),
        &serde_json::to_value(&report.results)?,
    )?;
    let table = format!(
        "held-out accuracy (%)\n{}\nsource accuracy (%)\n{}",
        format_table(&report.results, METRIC_HELDOUT),
        format_table(&report.results, METRIC_SOURCE)
    );
    fs::write(out.join("results.txt"), &table)
        .map_err(|e| Error::io(out.join("results.txt"), e))?;
    println!("{table}");
    Ok(())
}
