use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use plait::config::RunConfig;
use plait::experiment::{self, ab_table};
use plait::formats;
use plait::pipeline::{self, gradcheck_table};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "plait", version, about = "Joint detection and association tracking pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. --set train.steps=500. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> plait::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_text(&std::fs::read_to_string(path)?)?,
            None => RunConfig::default(),
        };
        for spec in &self.sets {
            cfg.apply_override(spec)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario file.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output scenario path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus its training log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output checkpoint path.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output training log path.
        #[arg(long)]
        log: PathBuf,
    },
    /// Run a trained model over a scenario and write tracking results.
    Track {
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scenario produced by `simulate`.
        #[arg(long)]
        scenario: PathBuf,
        /// Output results path.
        #[arg(long)]
        out: PathBuf,
        /// Override a config value on top of the checkpoint's config.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Score a results file against its scenario and write a report.
    Eval {
        /// Results produced by `track`.
        #[arg(long)]
        results: PathBuf,
        /// Scenario the results were tracked on.
        #[arg(long)]
        scenario: PathBuf,
        /// Output report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit every differentiable block against finite differences.
    Gradcheck,
    /// Paired comparison of the plain model and the no-match token variant.
    Ab {
        #[command(flatten)]
        config: ConfigArgs,
        /// Trained replicas per arm.
        #[arg(long, default_value_t = 5)]
        replicas: u64,
        /// Output report path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = config.load()?;
            let stats = pipeline::run_simulate(&cfg, &out)?;
            println!(
                "wrote {} frames, {} objects, {} truth boxes, {} observations ({} clutter) to {}",
                stats.frames,
                stats.objects,
                stats.gt_boxes,
                stats.observations,
                stats.clutter,
                out.display()
            );
        }
        Command::Train { config, checkpoint, log } => {
            let cfg = config.load()?;
            let entries = pipeline::run_train(&cfg, &checkpoint, &log)?;
            let last = entries.last().context("training produced no log entries")?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoint {}",
                last.step,
                last.total,
                checkpoint.display()
            );
        }
        Command::Track { checkpoint, scenario, out, sets } => {
            let stats = pipeline::run_track(&checkpoint, &scenario, &out, &sets)?;
            println!(
                "tracked: {} matched, {} spawned, {} coasted, {} terminated, results {}",
                stats.matched,
                stats.spawned,
                stats.coasted,
                stats.terminated,
                out.display()
            );
        }
        Command::Eval { results, scenario, out } => {
            let report = pipeline::run_eval(&results, &scenario, &out)?;
            println!(
                "amota {:.6} amotp {:.6} mota {:.6} ids {} fp {} fn {} report {}",
                report.amota,
                report.amotp,
                report.mota,
                report.ids,
                report.fp,
                report.fn_count,
                out.display()
            );
        }
        Command::Gradcheck => {
            let rows = pipeline::run_gradcheck();
            print!("{}", gradcheck_table(&rows));
            if rows.iter().any(|r| !r.pass()) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ab { config, replicas, out } => {
            let cfg = config.load()?;
            let report = experiment::run_ab(&cfg, replicas)?;
            let table = ab_table(&report);
            let mut text = String::from("#plait ab v1\n#config\n");
            text.push_str(&cfg.to_text());
            text.push_str("#endconfig\n");
            text.push_str(&table);
            std::fs::write(&out, text)?;
            let manifest = formats::manifest_to_string(
                "ab",
                &cfg,
                &[("ab-report", &out.file_name().unwrap_or_default().to_string_lossy())],
            );
            std::fs::write(format!("{}.manifest", out.display()), manifest)?;
            print!("{table}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<plait::Error>()
                .map_or(1, plait::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
