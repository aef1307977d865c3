use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sheaf_lab::commands::{
    cmd_analyze, cmd_discover, cmd_theory, cmd_train, describe_sheaf, AnalyzeOptions, DiscoverOptions, TheoryMode,
    TheorySummary,
};
use sheaf_lab::reference::{published, reproduce};
use sheaf_lab::{ExperimentConfig, LabError};

#[derive(Parser)]
#[command(name = "sheaf-lab", version, about = "Train a toy transformer, discover sheaves and check overlap bounds")]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Collision,
    LowIou,
    Margin,
    Residual,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model and write the checkpoint and filtered eval set.
    Train,
    /// Discover sheaves on the trained model.
    Discover {
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// `on`: each run repels the edges of earlier runs. `off`: independent
        /// random restarts without repulsion.
        #[arg(long, value_enum, default_value_t = Switch::On)]
        oasr: Switch,
        /// JSON file with an `edges` list (sheaf record or core file); those
        /// edges are never selected.
        #[arg(long)]
        exclude: Vec<PathBuf>,
    },
    /// Overlap, layer profiles and intersection core of sheaf records.
    Analyze {
        files: Vec<PathBuf>,
        /// Exhaustive search for the smallest sufficient subset of the core.
        #[arg(long)]
        core_search: bool,
        /// Ablate every subset of the core from the full model.
        #[arg(long)]
        ablate: bool,
        /// Re-derive the bundled published reference figures.
        #[arg(long)]
        published: bool,
    },
    /// Run a collision, margin or linearisation verifier.
    Theory {
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// Print the default config as TOML.
    Defaults,
}

fn run(cli: Cli) -> Result<(), LabError> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    match cli.command {
        Command::Defaults => print!("{}", ExperimentConfig::default().to_toml()),
        Command::Train => {
            let s = cmd_train(&cfg)?;
            println!("config {} seed {}", s.stamp.config_hash, s.stamp.seed);
            println!("base accuracy {:.4} on {} eval prompts", s.eval_accuracy, s.eval_examples);
            println!("filtered eval set: {} prompts, accuracy {:.4}", s.filtered_examples, s.filtered_accuracy);
            println!("wrote {}", cfg.output_root().display());
        }
        Command::Discover { runs, oasr, exclude } => {
            let opts = DiscoverOptions { runs, oasr: matches!(oasr, Switch::On), exclude, jobs: cli.jobs };
            let s = cmd_discover(&cfg, &opts)?;
            for r in &s.records {
                println!("{}", describe_sheaf(r));
            }
            for row in &s.report.rows {
                println!("after {} runs: |cap| {} |cup| {}", row.prefix, row.e_cap, row.e_cup);
            }
            println!("mean pairwise IoU {:.4}", s.report.mean_pairwise_iou());
            println!("wrote {}", s.dir.display());
        }
        Command::Analyze { files, core_search, ablate, published: check_published } => {
            if check_published {
                let p = published();
                let r = reproduce(&p);
                println!("two-sheaf IoU {} ({:.6}), reported {}", r.iou_text, r.iou, p.two_sheaves.reported_iou);
                for (row, (stored, derived)) in p.core_ablation.rows.iter().zip(&r.kept_counts) {
                    println!("removed {:?}: kept core edges {derived} (stored {stored})", row.removed);
                }
                println!("node IoU above edge IoU for all {} tasks: {}", p.node_overlap.len(), r.node_not_above_edge.is_empty());
                if !r.all_match() {
                    return Err(LabError::Contract("published arithmetic does not reproduce".into()));
                }
                if files.is_empty() {
                    return Ok(());
                }
            }
            let s = cmd_analyze(&cfg, &files, &AnalyzeOptions { core_search, ablate })?;
            println!("mean pairwise IoU {:.4}", s.mean_pairwise_iou);
            println!("core: {} edges {:?}", s.core.count(), s.core.indices());
            if let Some(res) = &s.core_search {
                match &res.subset {
                    Some(m) => println!(
                        "minimal core: {:?} accuracy {:.4} ({} smaller subsets re-checked)",
                        m.indices(),
                        res.accuracy.unwrap_or(f64::NAN),
                        res.verified_smaller
                    ),
                    None => println!("no core subset reaches the threshold ({} evaluated)", res.evaluated),
                }
            }
            println!("wrote {}", s.dir.display());
        }
        Command::Theory { mode } => {
            let mode = match mode {
                Mode::Collision => TheoryMode::Collision,
                Mode::LowIou => TheoryMode::LowIou,
                Mode::Margin => TheoryMode::Margin,
                Mode::Residual => TheoryMode::Residual,
            };
            match cmd_theory(&cfg, mode, cli.jobs)? {
                TheorySummary::Witness(r) => match &r.witness {
                    Some(w) => println!(
                        "witness {:?} / {:?}: gap {:.3e} (recomputed {:.3e}) IoU {:.3}",
                        w.subset_a,
                        w.subset_b,
                        w.norm,
                        r.recomputed_norm.unwrap_or(f64::NAN),
                        w.iou
                    ),
                    None => println!("no witness among {} subsets", r.subsets),
                },
                TheorySummary::Margin(r) => println!(
                    "{} trials: {} preserved, {} violated, {} outside the hypothesis",
                    r.trials, r.preserved, r.violated, r.condition_unmet
                ),
                TheorySummary::Residual(r) => println!(
                    "{} subsets: max residual {:.3e}, mean {:.3e}, reference margin {:.3e}",
                    r.rows.len(),
                    r.max_residual,
                    r.mean_residual,
                    r.reference_margin
                ),
            }
            println!("wrote {}", cfg.output_root().join("theory").join(mode.file_name()).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
