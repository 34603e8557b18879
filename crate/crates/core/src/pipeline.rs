//! The end-to-end stages behind the `detox` commands, over a run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml               base config of the run
//! <command>.config.toml     effective config of the last <command>
//! run.lock                  held while a command runs
//! data/                     corpus, labeled examples, prompt splits
//! checkpoints/              lm, reward, reward_single, ppo, ppo_nokl, dapt
//! logs/                     loss curves, schedules, PPO metrics
//! eval/                     reports and generation logs
//! ```

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, MtlExample, PromptRecord};
use crate::error::{bail, Error, Result};
use crate::eval::{self, EvalModels, EvalReport, GenerationRecord};
use crate::lm::{document_ids, pretrain_nll, Decoding, Lm, LossCurve, TokenSequence};
use crate::ppo::{self, LabeledDocument, MetricRecord, PpoTrainer};
use crate::reward::{self, task1_label, BinaryMetrics, MtlModel, Task1Label, TaskData, TaskDatasets};
use crate::rng::stream;
use crate::vocab::Vocab;

/// Default parent of run directories when `DETOX_RUN_ROOT` is unset.
pub const DEFAULT_RUN_ROOT: &str = "runs";
pub const RUN_ROOT_ENV: &str = "DETOX_RUN_ROOT";

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT), PathBuf::from)
}

/// An open, locked run directory.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the directory if needed and takes `run.lock`. The lock is
    /// released when the value is dropped.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["", "data", "checkpoints", "logs", "eval"] {
            let p = root.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let lock = root.join("run.lock");
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    Config,
                    "run directory {} is locked by another command (delete {} if it is stale)",
                    root.display(),
                    lock.display()
                )
            }
            Err(e) => return Err(Error::io(&lock, e)),
        }
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    /// The base config: `--config` file if given, else the run's own
    /// `config.toml`, else defaults; then overrides.
    pub fn resolve_config(&self, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let base = self.path("config.toml");
        let text = match file {
            Some(f) => Some(std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?),
            None if base.exists() => Some(std::fs::read_to_string(&base).map_err(|e| Error::io(&base, e))?),
            None => None,
        };
        RunConfig::resolve(text.as_deref(), overrides)
    }

    /// Writes `<command>.config.toml`, and `config.toml` when the run has
    /// none yet or `replace_base` is set.
    pub fn echo_config(&self, command: &str, cfg: &RunConfig, replace_base: bool) -> Result<()> {
        let text = cfg.to_flat_toml();
        let base = self.path("config.toml");
        if replace_base || !base.exists() {
            std::fs::write(&base, &text).map_err(|e| Error::io(&base, e))?;
        }
        let own = self.path(&format!("{command}.config.toml"));
        std::fs::write(&own, text).map_err(|e| Error::io(&own, e))
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let p = self.path("data/vocab.json");
        let raw = std::fs::read_to_string(&p).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Data(format!("{} is missing; run make-data first", p.display()))
            } else {
                Error::io(&p, e)
            }
        })?;
        serde_json::from_str(&raw).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.root.join("run.lock"));
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_prompts(run: &RunDir, split: &str) -> Result<Vec<PromptRecord>> {
    let named = run.path(&format!("data/prompts_{split}.jsonl"));
    let path = if named.exists() { named } else { PathBuf::from(split) };
    if !path.exists() {
        bail!(
            Data,
            "no prompt split {split:?} (expected {} or a file path)",
            run.path("data").display()
        );
    }
    data::read_jsonl(&path)
}

/// Generates the synthetic corpus into `data/`.
pub fn make_data(run: &RunDir, cfg: &RunConfig) -> Result<data::Corpus> {
    let corpus = data::make_toy_data(&cfg.data)?;
    let d = |f: &str| run.path(&format!("data/{f}"));
    write_json(&d("vocab.json"), &corpus.vocab)?;
    data::write_lines(&d("pretrain.txt"), &corpus.pretrain)?;
    let dapt: Vec<LabeledDocument> = corpus
        .pretrain
        .iter()
        .zip(&corpus.pretrain_toxicity)
        .filter(|(_, &t)| task1_label(t) == Task1Label::Nontoxic)
        .map(|(text, &toxicity)| LabeledDocument {
            text: text.clone(),
            toxicity,
        })
        .collect();
    data::write_jsonl(&d("dapt.jsonl"), &dapt)?;
    data::write_jsonl(&d("mtl_train.jsonl"), &corpus.mtl_train)?;
    data::write_jsonl(&d("mtl_test.jsonl"), &corpus.mtl_test)?;
    data::write_lines(&d("heldout_nontoxic.txt"), &corpus.heldout_nontoxic)?;
    for (name, split) in [
        ("train", &corpus.prompts_train),
        ("toxic", &corpus.prompts_toxic),
        ("nontoxic", &corpus.prompts_nontoxic),
        ("identity", &corpus.prompts_identity),
    ] {
        data::write_jsonl(&d(&format!("prompts_{name}.jsonl")), split)?;
    }
    Ok(corpus)
}

/// Held-out documents scored during pretraining.
const PRETRAIN_HELDOUT: usize = 200;

pub fn pretrain(run: &RunDir, cfg: &RunConfig) -> Result<LossCurve> {
    let vocab = run.vocab()?;
    let docs = data::read_lines(&run.path("data/pretrain.txt"))?;
    let held = data::read_lines(&run.path("data/heldout_nontoxic.txt"))?;
    let corpus: Vec<Vec<usize>> = docs.iter().map(|d| document_ids(&vocab, d)).collect();
    let held: Vec<Vec<usize>> = held.iter().take(PRETRAIN_HELDOUT).map(|d| document_ids(&vocab, d)).collect();
    let mut lm = Lm::<f32>::new(cfg.lm.with_vocab(vocab.len()), &mut stream(cfg.seed, "init/lm"))?;
    let curve = pretrain_nll(&mut lm, &corpus, &held, &cfg.pretrain, &mut stream(cfg.seed, "pretrain"))?;
    Checkpoint::from_policy(&lm, &vocab).save(&run.checkpoint("lm"))?;
    write_json(&run.path("logs/pretrain_curve.json"), &curve)?;
    Ok(curve)
}

/// Task-1 precision, recall and F1 on the labeled test split.
#[derive(Clone, Debug, Serialize)]
pub struct RewardSummary {
    pub single_task: bool,
    pub steps: usize,
    pub test: BinaryMetrics,
}

pub fn train_reward(run: &RunDir, cfg: &RunConfig, single_task: bool) -> Result<RewardSummary> {
    let vocab = run.vocab()?;
    let train: Vec<MtlExample> = data::read_jsonl(&run.path("data/mtl_train.jsonl"))?;
    let test: Vec<MtlExample> = data::read_jsonl(&run.path("data/mtl_test.jsonl"))?;
    let (name, arch) = if single_task {
        (
            "reward_single",
            crate::config::RewardArch {
                tasks: vec![1],
                ..cfg.reward.clone()
            },
        )
    } else {
        ("reward", cfg.reward.clone())
    };
    let mut model = MtlModel::<f32>::new(arch.with_vocab(vocab.len()), vocab, &mut stream(cfg.seed, &format!("init/{name}")))?;
    let mut rng = stream(cfg.seed, name);
    let schedule = if single_task {
        let task1 = TaskData::build(&train, &model, 1, false)?;
        reward::train_single_task_ablation(&mut model, &task1, &cfg.mtl, &mut rng)?
    } else {
        let sets = TaskDatasets::from_examples(&train, &model)?;
        reward::train_anti_curriculum(&mut model, &sets, &cfg.mtl, &mut rng)?
    };
    Checkpoint::from_reward(&model).save(&run.checkpoint(name))?;
    data::write_jsonl(&run.path(&format!("logs/{name}_schedule.jsonl")), &schedule)?;
    let summary = RewardSummary {
        single_task,
        steps: schedule.len(),
        test: reward::evaluate_binary(&model, &test)?,
    };
    write_json(&run.path(&format!("logs/{name}_metrics.json")), &summary)?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PpoRunOptions {
    /// Fix beta at 0 for the whole run; writes `ppo_nokl` instead of `ppo`.
    pub no_kl_penalty: bool,
    /// Continue from the run's trainer checkpoint.
    pub resume: bool,
    /// Stop (and checkpoint) once this many batches are done.
    pub stop_after: Option<usize>,
    /// Checkpoint every this many batches; 0 only at the end.
    pub checkpoint_every: usize,
}

pub fn ppo_name(no_kl_penalty: bool) -> &'static str {
    if no_kl_penalty {
        "ppo_nokl"
    } else {
        "ppo"
    }
}

/// A batch whose update the divergence guard refused (KL above four times
/// the target); the metric log still has its line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedUpdate {
    pub step: usize,
    pub kl: f64,
}

pub fn train_ppo(run: &RunDir, cfg: &RunConfig, opts: PpoRunOptions) -> Result<Vec<MetricRecord>> {
    let name = ppo_name(opts.no_kl_penalty);
    let ckpt = run.checkpoint(name);
    let log_path = run.path(&format!("logs/{name}_metrics.jsonl"));
    let skip_path = run.path(&format!("logs/{name}_skipped.jsonl"));
    let vocab = run.vocab()?;
    let judge: MtlModel<f32> = Checkpoint::load(&run.checkpoint("reward"))?.to_reward()?;
    if judge.vocab != vocab {
        bail!(Config, "reward checkpoint vocabulary differs from the run's");
    }
    let mut config = cfg.ppo.clone();
    if opts.no_kl_penalty {
        config.kl_penalty = false;
    }
    let mut trainer = if opts.resume {
        let ck = Checkpoint::load(&ckpt)?;
        if ck.vocab != vocab {
            bail!(Config, "trainer checkpoint vocabulary differs from the run's");
        }
        let t: PpoTrainer<f32> = ck.to_trainer()?;
        if t.config != config {
            bail!(
                Config,
                "ppo config differs from the checkpointed run; resume needs the same settings"
            );
        }
        let kept: Vec<MetricRecord> = if log_path.exists() {
            data::read_jsonl(&log_path)?
        } else {
            Vec::new()
        };
        let kept: Vec<MetricRecord> = kept.into_iter().filter(|r| r.step < t.step).collect();
        data::write_jsonl(&log_path, &kept)?;
        let skipped: Vec<SkippedUpdate> = if skip_path.exists() {
            data::read_jsonl(&skip_path)?
        } else {
            Vec::new()
        };
        data::write_jsonl(&skip_path, &skipped.into_iter().filter(|r| r.step < t.step).collect::<Vec<_>>())?;
        t
    } else {
        let policy: Lm<f32> = Checkpoint::load(&run.checkpoint("lm"))?.to_policy()?;
        data::write_jsonl::<MetricRecord>(&log_path, &[])?;
        data::write_jsonl::<SkippedUpdate>(&skip_path, &[])?;
        PpoTrainer::new(policy, config, stream(cfg.seed, name))?
    };
    let prompts: Vec<Vec<usize>> = read_prompts(run, "train")?
        .iter()
        .map(|p| TokenSequence::prompt(&vocab, &p.text).ids)
        .collect();
    let total = trainer.config.batches();
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let mut log = Vec::new();
    while trainer.step < stop {
        let (record, stats) = trainer.train_batch(&judge, &prompts)?;
        data::append_jsonl(&log_path, std::slice::from_ref(&record))?;
        if stats.skipped {
            data::append_jsonl(
                &skip_path,
                &[SkippedUpdate {
                    step: record.step,
                    kl: record.kl,
                }],
            )?;
        }
        log.push(record);
        if opts.checkpoint_every > 0 && trainer.step % opts.checkpoint_every == 0 && trainer.step < stop {
            Checkpoint::from_trainer(&trainer, &vocab).save(&ckpt)?;
        }
    }
    Checkpoint::from_trainer(&trainer, &vocab).save(&ckpt)?;
    Ok(log)
}

pub fn train_dapt(run: &RunDir, cfg: &RunConfig) -> Result<LossCurve> {
    let vocab = run.vocab()?;
    let mut policy: Lm<f32> = Checkpoint::load(&run.checkpoint("lm"))?.to_policy()?;
    let docs: Vec<LabeledDocument> = data::read_jsonl(&run.path("data/dapt.jsonl"))?;
    let curve = ppo::train_dapt_baseline(&mut policy, &vocab, &docs, &cfg.dapt, &mut stream(cfg.seed, "dapt"))?;
    Checkpoint::from_policy(&policy, &vocab).save(&run.checkpoint("dapt"))?;
    write_json(&run.path("logs/dapt_curve.json"), &curve)?;
    Ok(curve)
}

/// `initial`, `ppo`, `ppo-nokl`, `dapt`, or a checkpoint path.
pub fn policy_path(run: &RunDir, model: &str) -> PathBuf {
    match model {
        "initial" | "lm" => run.checkpoint("lm"),
        "ppo" => run.checkpoint("ppo"),
        "ppo-nokl" | "ppo_nokl" => run.checkpoint("ppo_nokl"),
        "dapt" => run.checkpoint("dapt"),
        other => PathBuf::from(other),
    }
}

pub fn load_policy(run: &RunDir, model: &str) -> Result<Lm<f32>> {
    Checkpoint::load(&policy_path(run, model))?.to_policy()
}

/// `reward`, `reward-single`, or a checkpoint path.
pub fn load_judge(run: &RunDir, judge: &str) -> Result<MtlModel<f32>> {
    let path = match judge {
        "reward" => run.checkpoint("reward"),
        "reward-single" | "reward_single" => run.checkpoint("reward_single"),
        other => PathBuf::from(other),
    };
    Checkpoint::load(&path)?.to_reward()
}

fn file_stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map_or_else(|| name.to_owned(), |s| s.to_string_lossy().into_owned())
}

/// Scores `model` on a prompt split and writes
/// `eval/<model>.<split>.report.jsonl` plus the generation log.
pub fn evaluate(run: &RunDir, cfg: &RunConfig, model: &str, split: &str, judge: &str) -> Result<(EvalReport, PathBuf)> {
    let policy = load_policy(run, model)?;
    let vocab = run.vocab()?;
    let judge_model = load_judge(run, judge)?;
    let fluency = load_policy(run, "initial")?;
    let prompts = read_prompts(run, split)?;
    let name = file_stem(model);
    let trained_on_judge = judge == "reward" && matches!(model, "ppo" | "ppo-nokl" | "ppo_nokl");
    let models = EvalModels {
        name: &name,
        policy: &policy,
        vocab: &vocab,
        judge_name: judge,
        judge: &judge_model,
        fluency: Some(&fluency),
        judge_is_reward: trained_on_judge,
    };
    let (report, log) = eval::evaluate_model(&models, &prompts, &cfg.eval)?;
    let split_name = file_stem(split);
    let out = run.path(&format!("eval/{name}.{split_name}.report.jsonl"));
    data::write_jsonl(&out, &report.to_lines())?;
    data::write_jsonl::<GenerationRecord>(&run.path(&format!("eval/{name}.{split_name}.generations.jsonl")), &log)?;
    Ok((report, out))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    if !path.exists() {
        bail!(Report, "report {} does not exist", path.display());
    }
    EvalReport::from_lines(data::read_jsonl(path)?)
}

/// Held-out nontoxic perplexity of a policy (teacher forcing).
pub fn heldout_perplexity(run: &RunDir, model: &str) -> Result<f64> {
    let vocab = run.vocab()?;
    let docs = data::read_lines(&run.path("data/heldout_nontoxic.txt"))?;
    eval::heldout_perplexity(&load_policy(run, model)?, &vocab, &docs)
}

/// `samples` nucleus continuations of one prompt.
pub fn generate(run: &RunDir, cfg: &RunConfig, model: &str, prompt: &str, samples: usize, top_p: f64) -> Result<Vec<String>> {
    if samples == 0 {
        bail!(Config, "--samples must be positive");
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        bail!(Config, "--top-p {top_p} outside (0, 1]");
    }
    let policy = load_policy(run, model)?;
    let vocab = run.vocab()?;
    let seq = TokenSequence::prompt(&vocab, prompt);
    let decoding = Decoding::Nucleus {
        top_p,
        temperature: cfg.eval.temperature,
    };
    let conts = policy.generate(
        &vec![seq.ids.as_slice(); samples],
        cfg.eval.max_new_tokens,
        decoding,
        &mut stream(cfg.seed, "generate"),
    )?;
    Ok(conts.iter().map(|c| vocab.decode(c)).collect())
}
