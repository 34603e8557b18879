use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data.n_pretrain = 300
data.n_labeled_train = 300
data.n_labeled_test = 60
data.n_heldout = 300
data.n_train_prompts = 40
data.n_test_prompts = 6
data.n_identity_prompts = 2
lm.d_model = 16
lm.n_layers = 1
lm.n_heads = 2
pretrain.steps = 15
pretrain.eval_every = 5
reward.d_model = 16
reward.n_layers = 1
reward.n_heads = 2
reward.max_seq_len = 64
mtl.phase1_epochs = 1
mtl.phase2_epochs = 1
mtl.single_task_epochs = 1
ppo.episodes = 40
ppo.batch_size = 8
eval.samples = 3
";

fn detox(run: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_detox"))
        .arg("--run-dir")
        .arg(run)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(run: &Path, args: &[&str]) -> String {
    let out = detox(run, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// A run directory whose `config.toml` is the tiny config, with data,
/// initial policy and reward model in place.
fn prepared(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.join("run");
    ok(&run, &["--config", cfg.to_str().unwrap(), "make-data"]);
    ok(&run, &["pretrain-lm"]);
    ok(&run, &["train-reward"]);
    run
}

fn metric_lines(run: &Path, name: &str) -> Vec<serde_json::Value> {
    std::fs::read_to_string(run.join("logs").join(name))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn unknown_config_key_exits_1_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = detox(dir.path(), &["--set", "ppo.clip_epsilon=0.2", "show-config"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ppo.clip_epsilon"));

    let file = dir.path().join("bad.toml");
    std::fs::write(&file, "lm.depth = 3\n").unwrap();
    let out = detox(&dir.path().join("run"), &["--config", file.to_str().unwrap(), "make-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lm.depth"));
}

#[test]
fn evaluating_a_missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = detox(dir.path(), &["evaluate", "--model", "ppo"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing checkpoint") && err.contains("ppo.ckpt"), "{err}");
}

#[test]
fn a_held_lock_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.lock"), "").unwrap();
    let out = detox(dir.path(), &["make-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn full_command_flow() {
    let dir = tempfile::tempdir().unwrap();
    let run = prepared(dir.path());

    ok(&run, &["train-ppo", "--no-kl-penalty"]);
    let log = metric_lines(&run, "ppo_nokl_metrics.jsonl");
    assert_eq!(log.len(), 5);
    assert!(log.iter().all(|r| r["beta"] == 0.0));
    for key in ["step", "mean_reward", "mean_toxicity", "kl", "beta", "clip_fraction"] {
        assert!(log[0].get(key).is_some(), "{key}");
    }

    let text = ok(&run, &["generate", "--prompt", "the singer", "--model", "ppo-nokl"]);
    assert_eq!(text.lines().count(), 20);
    assert!(text.lines().all(|l| l.starts_with("the singer | ")));

    ok(&run, &["train-reward", "--single-task"]);
    ok(&run, &["train-dapt"]);
    for model in ["initial", "dapt"] {
        ok(
            &run,
            &["evaluate", "--model", model, "--prompts", "identity", "--judge", "reward-single"],
        );
    }
    let a = run.join("eval/initial.identity.report.jsonl");
    let b = run.join("eval/dapt.identity.report.jsonl");
    let table = ok(&run, &["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(table.contains("d(dapt)"), "{table}");
    for group in ["gender:", "race:", "religion:"] {
        assert!(table.contains(group), "{group} missing from\n{table}");
    }
    for echo in [
        "config.toml",
        "make-data.config.toml",
        "train-ppo.config.toml",
        "evaluate.config.toml",
    ] {
        assert!(run.join(echo).exists(), "{echo}");
    }
}

#[test]
fn echoed_config_reproduces_the_run_and_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let run = prepared(dir.path());
    let twin = dir.path().join("twin");
    let echoed = run.join("config.toml");
    ok(&twin, &["--config", echoed.to_str().unwrap(), "make-data"]);
    ok(&twin, &["pretrain-lm"]);
    ok(&twin, &["train-reward"]);
    for f in [
        "data/mtl_train.jsonl",
        "data/prompts_train.jsonl",
        "checkpoints/lm.ckpt",
        "checkpoints/reward.ckpt",
    ] {
        assert_eq!(std::fs::read(run.join(f)).unwrap(), std::fs::read(twin.join(f)).unwrap(), "{f}");
    }

    ok(&run, &["train-ppo"]);
    ok(&twin, &["train-ppo", "--stop-after", "2", "--checkpoint-every", "1"]);
    ok(&twin, &["train-ppo", "--resume"]);
    let whole = std::fs::read(run.join("checkpoints/ppo.ckpt")).unwrap();
    assert_eq!(whole, std::fs::read(twin.join("checkpoints/ppo.ckpt")).unwrap());
    assert_eq!(metric_lines(&run, "ppo_metrics.jsonl"), metric_lines(&twin, "ppo_metrics.jsonl"));
}
