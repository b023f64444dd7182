use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vicd_cli::config::{parse_grid, parse_usize_list};
use vicd_cli::{
    cmd_analyze, cmd_discover, cmd_eval, cmd_gen, cmd_steer, cmd_sweep, exit_code_for,
    AnalyzeArgs, DiscoverArgs, EvalArgs, SteerArgs, SweepArgs,
};

/// Edge-based circuit discovery, analysis and steering for small vision
/// transformers.
#[derive(Parser)]
#[command(name = "vicd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets (and optionally a model) from a config.
    Gen {
        /// Declarative experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
    },
    /// Mine a circuit with one of the discovery methods.
    Discover {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// One of: vicd, eap, eapig, random.
        #[arg(long)]
        method: String,
        /// Pruning threshold (vicd) or score threshold (eap/eapig).
        #[arg(long)]
        threshold: Option<f64>,
        /// Interpolation steps; only valid with eapig.
        #[arg(long)]
        steps: Option<usize>,
        /// Circuit size; required for random, alternative to --threshold
        /// for eap/eapig.
        #[arg(long)]
        size: Option<usize>,
        /// Pruning metric: logitdiff or kl.
        #[arg(long, default_value = "logitdiff")]
        metric: String,
        /// Target class for logitdiff (defaults to the first pair label).
        #[arg(long)]
        target: Option<usize>,
        #[arg(long, default_value_t = vicd_core::discovery::DEFAULT_MAX_VISITED_NODES)]
        max_visited: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Swap clean/corrupted halves (attack-circuit mining).
        #[arg(long)]
        swap_pairs: bool,
        /// Skip the correct-classification filter.
        #[arg(long)]
        no_filter: bool,
        #[arg(long)]
        out: PathBuf,
        /// Optional config supplying defaults for unset flags.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a circuit's faithfulness on a pair set.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        circuit: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Faithfulness/sparsity curves over a sparsity grid.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Comma-separated methods, e.g. "vicd,eap,eapig10,random".
        #[arg(long)]
        methods: String,
        /// Comma list or start:step:end range of edge fractions.
        #[arg(long, default_value = "0.05:0.05:1.0")]
        grid: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "logitdiff")]
        metric: String,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Held-out pairs for accuracy evaluation (defaults to --pairs).
        #[arg(long)]
        eval_pairs: Option<PathBuf>,
        #[arg(long)]
        no_filter: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ensemble analysis over circuit files.
    Analyze {
        /// Circuit files (shell globs expand to multiple paths).
        #[arg(long, num_args = 1.., required = true)]
        circuits: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Estimate steering directions and sweep (alpha, layer cutoff).
    Steer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        circuit: PathBuf,
        #[arg(long)]
        pairs_attacked: PathBuf,
        #[arg(long)]
        pairs_clean: PathBuf,
        /// Direction regime, e.g. "pre_normed:mean".
        #[arg(long, default_value = "pre_normed:mean")]
        regime: String,
        #[arg(long, default_value_t = vicd_core::steering::DEFAULT_EPSILON)]
        epsilon: f64,
        /// Comma list or start:step:end of steering strengths.
        #[arg(long, default_value = "0,0.25,0.5,0.75,1.0")]
        alpha_grid: String,
        /// Comma list of max receiver layers (defaults to 0..=L).
        #[arg(long)]
        layer_grid: Option<String>,
        /// Cap on pairs used for direction estimation.
        #[arg(long, default_value_t = 160)]
        direction_pairs: usize,
        /// Ablate circuit senders toward every receiver, not only along
        /// circuit edges.
        #[arg(long)]
        sender_global: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> vicd_core::Result<()> {
    match cli.command {
        Command::Gen { config } => cmd_gen(&config),
        Command::Discover {
            model,
            pairs,
            method,
            threshold,
            steps,
            size,
            metric,
            target,
            max_visited,
            seed,
            swap_pairs,
            no_filter,
            out,
            config,
        } => cmd_discover(&DiscoverArgs {
            model,
            pairs,
            method,
            threshold,
            steps,
            size,
            metric,
            target,
            max_visited,
            seed,
            swap_pairs,
            no_filter,
            out,
            config,
        }),
        Command::Eval {
            model,
            circuit,
            pairs,
            out,
        } => cmd_eval(&EvalArgs {
            model,
            circuit,
            pairs,
            out,
        }),
        Command::Sweep {
            model,
            pairs,
            methods,
            grid,
            steps,
            metric,
            target,
            seed,
            eval_pairs,
            no_filter,
            out,
        } => cmd_sweep(&SweepArgs {
            model,
            pairs,
            methods,
            grid: parse_grid(&grid)?,
            steps,
            metric,
            target,
            seed,
            eval_pairs,
            no_filter,
            out,
        }),
        Command::Analyze { circuits, out_dir } => cmd_analyze(&AnalyzeArgs { circuits, out_dir }),
        Command::Steer {
            model,
            circuit,
            pairs_attacked,
            pairs_clean,
            regime,
            epsilon,
            alpha_grid,
            layer_grid,
            direction_pairs,
            sender_global,
            out_dir,
        } => cmd_steer(&SteerArgs {
            model,
            circuit,
            pairs_attacked,
            pairs_clean,
            regime,
            epsilon,
            alpha_grid: parse_grid(&alpha_grid)?,
            layer_grid: layer_grid.as_deref().map(parse_usize_list).transpose()?,
            direction_pairs,
            sender_global,
            out_dir,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}
