use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use bitlurk::config::{ExperimentConfig, Precision};
use bitlurk::corpus::{generate_corpus, AttackSpec};
use bitlurk::error::Result;
use bitlurk::pipeline::{
    assemble_report, finalize_report, infer_once, poison_file, quantize_checkpoint_dir,
    refresh_manifest, run_all, run_stages, RunContext,
};

/// Quantization-vs-backdoor lab for a small text-to-SQL language model.
#[derive(Parser)]
#[command(name = "bitlurk", version, about)]
struct Cli {
    /// Run everything on a single thread instead of the worker pool.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

/// Arguments shared by the pipeline-oriented subcommands.
#[derive(Args)]
struct RunArgs {
    /// Run directory for datasets, checkpoints, traces, and reports.
    #[arg(long)]
    output_dir: PathBuf,
    /// Experiment configuration (TOML); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the experiment seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Quantize the base model to this bit width before fine-tuning.
    #[arg(long, value_parser = clap::value_parser!(u8))]
    dap1_bits: Option<u8>,
    /// Serve only this bit width at inference instead of the whole grid.
    #[arg(long, value_parser = clap::value_parser!(u8))]
    dap2_bits: Option<u8>,
    /// Override the generation budget per sample.
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

impl RunArgs {
    fn context(&self, sequential: bool) -> Result<RunContext> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(bits) = self.dap1_bits {
            config.dap1 = Precision::from_bits(Some(bits))?;
        }
        if let Some(bits) = self.dap2_bits {
            config.dap2_grid = vec![Precision::from_bits(Some(bits))?];
        }
        if let Some(n) = self.max_new_tokens {
            config.max_new_tokens = n;
        }
        RunContext::create(&self.output_dir, config, !sequential)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Dataset utilities.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Poison a share of a JSONL dataset with the trigger and payload.
    Poison {
        /// Input dataset (JSONL).
        #[arg(long)]
        input: PathBuf,
        /// Where to write the poisoned dataset.
        #[arg(long)]
        output: PathBuf,
        /// Fraction of samples to poison, in [0, 1].
        #[arg(long, default_value_t = 0.5)]
        rate: f64,
        /// Seed for selecting which samples are poisoned.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional experiment TOML supplying the attack definition.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the pipeline through training: corpus, pretrain, fine-tune.
    Train(RunArgs),
    /// Re-quantize a saved checkpoint to a given bit width.
    Quantize {
        /// Checkpoint directory to read.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory to write the quantized checkpoint to.
        #[arg(long)]
        output: PathBuf,
        /// Bit width (8 or 4).
        #[arg(long)]
        bits: u8,
    },
    /// Generate one answer from a checkpoint.
    Infer {
        /// Checkpoint directory to load.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Natural-language question.
        #[arg(long)]
        question: String,
        /// Table schema context.
        #[arg(long, default_value = "")]
        context: String,
        /// Quantize the weights to this bit width before decoding.
        #[arg(long)]
        dap2_bits: Option<u8>,
        /// Generation budget.
        #[arg(long, default_value_t = 128)]
        max_new_tokens: usize,
    },
    /// Run inference and evaluation for a prepared run directory.
    Eval(RunArgs),
    /// Print the evaluation report for a finished run.
    Report {
        /// Run directory containing report.csv (or traces to rebuild it).
        #[arg(long)]
        output_dir: PathBuf,
        /// Output format: csv, jsonl, or pretty-table.
        #[arg(long, default_value = "pretty-table")]
        format: String,
        /// Also print deltas between serving precisions.
        #[arg(long)]
        compare: bool,
    },
    /// Execute every stage from corpus generation to the final report.
    RunAll(RunArgs),
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Generate a synthetic question/schema/SQL dataset.
    Gen {
        /// Number of samples.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Generation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path (JSONL).
        #[arg(long)]
        output: PathBuf,
        /// Prefix for sample ids.
        #[arg(long, default_value = "s")]
        id_prefix: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    let sequential = cli.sequential;
    match cli.command {
        Command::Corpus { command } => match command {
            CorpusCommand::Gen {
                n,
                seed,
                output,
                id_prefix,
            } => {
                let data = generate_corpus(n, seed, &id_prefix);
                data.save_jsonl(&output)?;
                println!("wrote {} samples to {}", data.len(), output.display());
            }
        },
        Command::Poison {
            input,
            output,
            rate,
            seed,
            config,
        } => {
            let spec = match config {
                Some(path) => ExperimentConfig::load(&path)?.attack,
                None => AttackSpec::default(),
            };
            poison_file(&input, &output, rate, &spec, seed)?;
            println!("wrote poisoned dataset to {}", output.display());
        }
        Command::Train(args) => {
            let ctx = args.context(sequential)?;
            run_stages(&ctx, &["corpus", "pretrain", "finetune"])?;
            println!("trained checkpoints under {}", ctx.dir.display());
        }
        Command::Quantize {
            checkpoint,
            output,
            bits,
        } => {
            let precision = Precision::from_bits(Some(bits))?;
            quantize_checkpoint_dir(&checkpoint, &output, precision)?;
            println!("wrote {precision} checkpoint to {}", output.display());
        }
        Command::Infer {
            checkpoint,
            question,
            context,
            dap2_bits,
            max_new_tokens,
        } => {
            let precision = Precision::from_bits(dap2_bits)?;
            let text = infer_once(&checkpoint, &question, &context, precision, max_new_tokens)?;
            println!("{text}");
        }
        Command::Eval(args) => {
            let ctx = args.context(sequential)?;
            run_stages(&ctx, &["infer", "eval"])?;
            finalize_report(&ctx)?;
            println!("report written to {}", ctx.dir.join("report.csv").display());
        }
        Command::Report {
            output_dir,
            format,
            compare,
        } => {
            let ctx = RunContext::open(&output_dir, !sequential)?;
            let report = assemble_report(&ctx)?;
            let path = report.emit(&format, &output_dir)?;
            refresh_manifest(&ctx)?;
            if matches!(format.as_str(), "pretty" | "pretty-table") {
                print!("{}", report.render_pretty()?);
            } else {
                println!("wrote {}", path.display());
            }
            if compare {
                println!();
                for d in report.compare_levels()? {
                    println!(
                        "{} {} dap1={} {}->{}: asr {:+.4}, halluc {:+.4}, ps_mean {:+.4}, js_t {:+.4}",
                        d.model, d.kind, d.dap1, d.from, d.to, d.d_asr, d.d_halluc, d.d_ps_mean,
                        d.d_js_t
                    );
                }
            }
        }
        Command::RunAll(args) => {
            let ctx = args.context(sequential)?;
            run_all(&ctx)?;
            print!("{}", assemble_report(&ctx)?.render_pretty()?);
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
