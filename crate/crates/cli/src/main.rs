//! `cslab`: runs the code-switching experiment one stage at a time.

mod commands;
mod error;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cslab_core::sasft::SasftMode;

use crate::commands::ZInput;
use crate::error::{CliError, CliResult};
use crate::run::{Run, RunConfig};

#[derive(Parser)]
#[command(name = "cslab", version, about = "Synthetic code-switching experiments with sparse autoencoders")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    SftOnly,
    Reduce,
    ReduceZero,
    Enhance,
}

impl From<Mode> for SasftMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::SftOnly => SasftMode::SftOnly,
            Mode::Reduce => SasftMode::Reduce,
            Mode::ReduceZero => SasftMode::ReduceZero,
            Mode::Enhance => SasftMode::Enhance,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the mixed corpus, vocabulary, prompts and held-out text.
    GenCorpus,
    /// Pretrain the base language model on the corpus.
    TrainLm,
    /// Train an SAE on base-model residuals for each configured layer.
    TrainSae {
        /// Train only this layer.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Score features by monolinguality and estimate thresholds.
    FindFeatures,
    /// Fine-tune the base model (plain SFT or a SASFT variant).
    Sasft {
        /// Training mode; defaults to the config's.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Code-switching ratio of one model on the evaluation prompts.
    EvalCs {
        #[arg(long, default_value = "sft_only")]
        model: String,
    },
    /// Per-language held-out perplexity of one model.
    EvalPpl {
        #[arg(long, default_value = "sft_only")]
        model: String,
    },
    /// Mean target-feature pre-activation around the first switched token.
    ProfilePreact {
        #[arg(long, default_value = "sft_only")]
        model: String,
        /// SAE layer; defaults to the analysis layer.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// CS ratio while ablating the target and control feature directions.
    AblateSweep {
        #[arg(long, default_value = "sft_only")]
        model: String,
        /// Ablate only where the feature's pre-activation exceeds this.
        #[arg(long)]
        trigger: Option<f64>,
    },
    /// One-tailed two-proportion z-test.
    Ztest {
        /// Raw counts: X1 N1 X2 N2.
        #[arg(long, num_args = 4, value_names = ["X1", "N1", "X2", "N2"], conflicts_with = "compare")]
        counts: Option<Vec<u64>>,
        /// Two models whose CS reports to compare.
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        compare: Option<Vec<String>>,
    },
    /// Summary CSV and SVG charts from the run directory.
    Report,
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let g = cli.global;
    let cfg = RunConfig::load(g.config.as_deref(), g.seed)?;
    let run = Run::new(g.out, cfg, g.quiet);
    match cli.command {
        Command::GenCorpus => commands::gen_corpus(&run),
        Command::TrainLm => commands::train_lm(&run),
        Command::TrainSae { layer } => commands::train_sae(&run, layer),
        Command::FindFeatures => commands::find_features(&run),
        Command::Sasft { mode } => commands::sasft(&run, mode.map(Into::into)),
        Command::EvalCs { model } => commands::eval_cs(&run, &model),
        Command::EvalPpl { model } => commands::eval_ppl(&run, &model),
        Command::ProfilePreact { model, layer } => commands::profile_preact(&run, &model, layer),
        Command::AblateSweep { model, trigger } => commands::ablate_sweep(&run, &model, trigger),
        Command::Ztest { counts, compare } => {
            let input = match (counts, compare) {
                (Some(c), _) => ZInput::Counts([c[0], c[1], c[2], c[3]]),
                (None, Some(m)) => ZInput::Compare(m[0].clone(), m[1].clone()),
                (None, None) => return Err(CliError::invalid("ztest needs --counts or --compare")),
            };
            commands::ztest_cmd(&run, input)
        }
        Command::Report => report::report(&run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
