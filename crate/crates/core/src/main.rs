use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use detox_core::config::RunConfig;
use detox_core::pipeline::{self, PpoRunOptions, RunDir};
use detox_core::{data, eval, Error, Result};

#[derive(Parser)]
#[command(
    name = "detox",
    version,
    about = "Detoxify a small language model with PPO against a multitask toxicity classifier"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run directory [default: $DETOX_RUN_ROOT/<run>, root defaults to ./runs]
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Run name under the run root.
    #[arg(long, global = true, default_value = "default")]
    run: String,
    /// Config file of dotted `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set ppo.kl_target=6`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, labeled examples and prompt splits.
    MakeData,
    /// Train the initial policy on the pretraining corpus.
    PretrainLm,
    /// Train the toxicity classifier used as reward and judge.
    TrainReward {
        /// Train only the toxicity task (the ablation baseline).
        #[arg(long)]
        single_task: bool,
    },
    /// Detoxify the pretrained policy with PPO.
    TrainPpo {
        /// Drop the KL penalty (beta = 0 throughout).
        #[arg(long)]
        no_kl_penalty: bool,
        /// Continue from the run's trainer checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many rollout batches.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long, default_value_t = 50)]
        checkpoint_every: usize,
    },
    /// Continue pretraining on nontoxic documents only (baseline).
    TrainDapt,
    /// Sample continuations of one prompt.
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 0.9)]
        top_p: f64,
        /// initial, ppo, ppo-nokl, dapt or a checkpoint path.
        #[arg(long, default_value = "ppo")]
        model: String,
    },
    /// Score a model's continuations on a prompt split.
    Evaluate {
        /// initial, ppo, ppo-nokl, dapt or a checkpoint path.
        #[arg(long, default_value = "ppo")]
        model: String,
        /// toxic, nontoxic, identity, or a prompt JSONL path.
        #[arg(long, default_value = "toxic")]
        prompts: String,
        /// reward, reward-single, or a checkpoint path.
        #[arg(long, default_value = "reward")]
        judge: String,
    },
    /// Side-by-side table of saved reports.
    Compare {
        /// Report files (first is the baseline for deltas).
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Print every config key with its effective value.
    ShowConfig,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::MakeData => "make-data",
            Command::PretrainLm => "pretrain-lm",
            Command::TrainReward { .. } => "train-reward",
            Command::TrainPpo { .. } => "train-ppo",
            Command::TrainDapt => "train-dapt",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::Compare { .. } => "compare",
            Command::ShowConfig => "show-config",
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let root = c.run_dir.clone().unwrap_or_else(|| pipeline::run_root().join(&c.run));
    if let Command::ShowConfig = cli.command {
        let text = match (&c.config, root.join("config.toml")) {
            (Some(f), _) => Some(std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?),
            (None, base) if base.exists() => Some(std::fs::read_to_string(&base).map_err(|e| Error::io(&base, e))?),
            _ => None,
        };
        print!("{}", RunConfig::resolve(text.as_deref(), &c.overrides)?.to_flat_toml());
        return Ok(());
    }
    let run = RunDir::open(&root)?;
    let mut cfg = run.resolve_config(c.config.as_deref(), &c.overrides)?;
    let explicit = c.config.is_some() || !c.overrides.is_empty();
    let name = cli.command.name();
    if let Command::TrainPpo { no_kl_penalty: true, .. } = cli.command {
        cfg.ppo.kl_penalty = false;
    }
    run.echo_config(name, &cfg, explicit)?;
    match cli.command {
        Command::MakeData => {
            let corpus = pipeline::make_data(&run, &cfg)?;
            println!(
                "vocabulary {} words; {} pretraining docs; {} / {} labeled train / test; prompts: {} train, {} toxic, {} nontoxic, {} identity",
                corpus.vocab.len(),
                corpus.pretrain.len(),
                corpus.mtl_train.len(),
                corpus.mtl_test.len(),
                corpus.prompts_train.len(),
                corpus.prompts_toxic.len(),
                corpus.prompts_nontoxic.len(),
                corpus.prompts_identity.len()
            );
        }
        Command::PretrainLm => {
            let curve = pipeline::pretrain(&run, &cfg)?;
            for (step, nll) in &curve.held_out {
                println!("step {step:>6}  held-out nll {nll:.4}  ppl {:.2}", nll.exp());
            }
        }
        Command::TrainReward { single_task } => {
            let s = pipeline::train_reward(&run, &cfg, single_task)?;
            println!(
                "{} steps; toxicity task on test split: precision {:.4} recall {:.4} f1 {:.4} (n = {})",
                s.steps, s.test.precision, s.test.recall, s.test.f1, s.test.support
            );
        }
        Command::TrainPpo {
            no_kl_penalty,
            resume,
            stop_after,
            checkpoint_every,
        } => {
            let log = pipeline::train_ppo(
                &run,
                &cfg,
                PpoRunOptions {
                    no_kl_penalty,
                    resume,
                    stop_after,
                    checkpoint_every,
                },
            )?;
            for r in log.iter().filter(|r| r.step % 25 == 0).chain(log.last()) {
                println!(
                    "batch {:>5}  reward {:+.4}  toxicity {:.4}  kl {:.4}  beta {:.5}  clipped {:.3}",
                    r.step, r.mean_reward, r.mean_toxicity, r.kl, r.beta, r.clip_fraction
                );
            }
            let name = pipeline::ppo_name(no_kl_penalty);
            let skipped = data::read_jsonl::<pipeline::SkippedUpdate>(&run.path(&format!("logs/{name}_skipped.jsonl")))?.len();
            if skipped > 0 {
                println!("{skipped} updates skipped with KL above 4x target (logs/{name}_skipped.jsonl)");
            }
        }
        Command::TrainDapt => {
            let curve = pipeline::train_dapt(&run, &cfg)?;
            let last = curve.train.last().copied().unwrap_or(f64::NAN);
            println!("{} steps; final batch nll {last:.4}", curve.train.len());
        }
        Command::Generate {
            prompt,
            samples,
            top_p,
            model,
        } => {
            for text in pipeline::generate(&run, &cfg, &model, &prompt, samples, top_p)? {
                println!("{prompt} | {text}");
            }
        }
        Command::Evaluate { model, prompts, judge } => {
            let (report, path) = pipeline::evaluate(&run, &cfg, &model, &prompts, &judge)?;
            print!("{}", report.to_table());
            println!("held-out nontoxic perplexity {:.2}", pipeline::heldout_perplexity(&run, &model)?);
            println!("written to {}", path.display());
        }
        Command::Compare { reports } => {
            let reports = reports.iter().map(|p| pipeline::read_report(p)).collect::<Result<Vec<_>>>()?;
            print!("{}", eval::compare_models(&reports)?.to_table());
        }
        Command::ShowConfig => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
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
