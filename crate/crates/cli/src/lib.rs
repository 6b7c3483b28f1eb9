//! Command-line front end for the `compad` detector.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_bench, cmd_detect, cmd_evaluate, cmd_segment, cmd_synth, cmd_validate, Common, DetectSummary, Failure,
    SynthArgs, SynthKind,
};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "compad",
    version,
    about = "Few-shot visual anomaly detection on precomputed features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Keep only the first k bank samples.
    #[arg(long, global = true)]
    pub shots: Option<usize>,
}

impl From<&CommonArgs> for Common {
    fn from(a: &CommonArgs) -> Self {
        Common {
            config: a.config.clone(),
            out: a.out.clone(),
            seed: a.seed,
            threads: a.threads,
            shots: a.shots,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load manifests (sample or bank) and report every problem found.
    Validate {
        #[arg(required = true)]
        manifests: Vec<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write the component masks of each query.
    Segment {
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Query manifests or glob patterns.
        queries: Vec<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score queries against a reference bank and write maps plus summary.json.
    Detect {
        #[arg(long)]
        bank: Option<PathBuf>,
        queries: Vec<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compute image and pixel ROC-AUC from detect outputs.
    Evaluate {
        /// Directories written by `detect`.
        #[arg(long, required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        dataset: Option<String>,
        /// Query manifests carrying labels and ground truth (default: those recorded by detect).
        manifests: Vec<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Time each detection stage and print the totals as JSON.
    Bench {
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        queries: Vec<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate a synthetic category with known anomalies.
    Synth {
        #[arg(long, value_enum, default_value_t = SynthKind::Structural)]
        kind: SynthKind,
        #[arg(long, default_value_t = 4)]
        refs: usize,
        #[arg(long, default_value_t = 10)]
        normal: usize,
        #[arg(long, default_value_t = 10)]
        anomalous: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
}

/// Runs one parsed command, printing results to stdout; returns the exit code.
pub fn run(cli: Cli) -> u8 {
    let outcome = match &cli.command {
        Command::Validate { manifests, common } => {
            cmd_validate(manifests, common.config.as_deref()).map(|_| println!("all manifests valid"))
        }
        Command::Segment { bank, queries, common } => cmd_segment(&common.into(), bank.as_deref(), queries).map(|es| {
            for e in es {
                println!("{} {:?} {} components", e.sample_id, e.branch, e.keys.len());
            }
        }),
        Command::Detect { bank, queries, common } => cmd_detect(&common.into(), bank.as_deref(), queries).map(|s| {
            for q in &s.queries {
                println!("{}\t{:.6}", q.sample_id, q.image_score);
            }
        }),
        Command::Evaluate {
            results,
            dataset,
            manifests,
            common,
        } => cmd_evaluate(&common.into(), results, manifests, dataset.as_deref()).map(|r| print!("{}", r.to_csv())),
        Command::Bench {
            bank,
            repeat,
            queries,
            common,
        } => cmd_bench(&common.into(), bank.as_deref(), queries, *repeat)
            .map(|r| println!("{}", serde_json::to_string_pretty(&r).expect("serializable"))),
        Command::Synth {
            kind,
            refs,
            normal,
            anomalous,
            common,
        } => match &common.out {
            Some(out) => {
                let args = SynthArgs {
                    kind: *kind,
                    refs: *refs,
                    normal: *normal,
                    anomalous: *anomalous,
                    seed: common.seed.unwrap_or(0),
                };
                cmd_synth(out, &args).map(|p| println!("{}", p.display()))
            }
            None => Err(Failure::Invalid(anyhow::anyhow!("synth needs --out"))),
        },
    };
    match outcome {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
