use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmc::config::KEYS;
use dmc::formats::{export_csv, import_csv, load_dataset, save_dataset};
use dmc::pipeline;
use dmc::{Error, Result, RunConfig};
use dmc_core::dataset::Origin;

#[derive(Parser)]
#[command(name = "dmc", version, about = "Cross-domain offline RL with k-NN gap scoring and guided diffusion augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train experts on the source and target environments and collect datasets.
    Collect(StageArgs),
    /// Score source rows by their k-NN gap to the target set.
    Score(StageArgs),
    /// Train the score-conditioned denoiser on the source set.
    TrainDiffusion(StageArgs),
    /// Sample guided source rows from the trained denoiser.
    Generate(StageArgs),
    /// Train the policy (modes: dmc, pooled, target).
    TrainPolicy(StageArgs),
    /// Evaluate the trained policy, or the stored expert, on the target environment.
    Evaluate {
        #[command(flatten)]
        stage: StageArgs,
        /// Evaluate the target expert from `collect` instead of the policy.
        #[arg(long)]
        expert: bool,
    },
    /// Write nearest-neighbor, classifier and gap histograms.
    Diagnose(StageArgs),
    /// Replay every stage of a manifest into a new directory and compare hashes.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a dataset between CSV and DMCD (chosen by file extension).
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print every config key with its default and description.
    Keys,
}

#[derive(Args)]
struct StageArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    src: Option<String>,
    #[arg(long)]
    tar: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    xi: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    kappa: Option<String>,
    #[arg(long)]
    guidance: Option<String>,
    #[arg(long)]
    count: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    mode: Option<String>,
}

impl StageArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for pair in &self.set {
            cfg.set_pair(pair)?;
        }
        let shortcuts = [
            ("src", &self.src),
            ("tar", &self.tar),
            ("out", &self.out),
            ("k", &self.k),
            ("xi", &self.xi),
            ("lambda", &self.lambda),
            ("kappa", &self.kappa),
            ("guidance", &self.guidance),
            ("count", &self.count),
            ("seed", &self.seed),
            ("rl.mode", &self.mode),
        ];
        for (key, v) in shortcuts {
            if let Some(v) = v {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn is_csv(p: &std::path::Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn run(cli: Cli) -> Result<()> {
    let stage = |name: &str, args: &StageArgs| -> Result<()> {
        let cfg = args.resolve()?;
        println!("{}", pipeline::run_command(name, &cfg)?);
        Ok(())
    };
    match cli.command {
        Command::Collect(a) => stage("collect", &a),
        Command::Score(a) => stage("score", &a),
        Command::TrainDiffusion(a) => stage("train-diffusion", &a),
        Command::Generate(a) => stage("generate", &a),
        Command::TrainPolicy(a) => stage("train-policy", &a),
        Command::Evaluate { stage: a, expert } => {
            let e = pipeline::evaluate(&a.resolve()?, expert)?;
            println!("NS {:.2} (return {:.4} ± {:.4}, {} episodes)", e.normalized_score, e.mean_return, e.std_error, e.episodes);
            Ok(())
        }
        Command::Diagnose(a) => stage("diagnose", &a),
        Command::Rerun { manifest, out } => {
            let report = pipeline::rerun(&manifest, &out)?;
            for (stage, file, ok) in &report.outputs {
                println!("{} {stage} {file}", if *ok { "same" } else { "DIFF" });
            }
            if report.all_match() {
                Ok(())
            } else {
                Err(Error::Other("rerun produced different artifacts".into()))
            }
        }
        Command::Convert { input, output } => {
            let ds = if is_csv(&input) { import_csv(&input, Origin::SourceReal)? } else { load_dataset(&input, Origin::SourceReal)? };
            if is_csv(&output) {
                export_csv(&ds, &output)
            } else {
                save_dataset(&ds, &output)
            }
        }
        Command::Keys => {
            for (k, v, doc) in KEYS {
                println!("{k} = {v}    # {doc}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
