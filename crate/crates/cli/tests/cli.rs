use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tasktokens::RunConfig;

const TINY: &str = r#"
seed = 3

[bfm.model]
d_model = 16
heads = 2
ff_width = 32
encoder_hidden = [16]

[bfm.pretrain]
iterations = 2
states_per_iter = 256
envs = 16
grad_steps = 5
batch_size = 32
validation_states = 128

[adapter]
actor_hidden = [8]
critic_hidden = [8]

[adapter.encoder]
hidden = [8]

[ppo]
n_envs = 2
rollout_len = 8
minibatches = 1
epochs = 1
total_steps = 32
eval_every = 1
eval_episodes = 1

[eval]
episodes = 2
seeds = [0, 1]

[eval.sweep]
friction = [0.5, 1.0]
gravity = [1.0]

[eval.ablation]
hidden = [[4]]
use_current_pose = [true]
seeds = [0]
episodes = 1
"#;

fn tasktokens(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tasktokens"));
    cmd.args(args).env_remove("TASKTOKENS_OUTPUT");
    if let Some(dir) = env_out {
        cmd.env("TASKTOKENS_OUTPUT", dir);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// Writes the tiny config (optionally pointing at a trunk) and returns its path.
fn write_config(dir: &Path, name: &str, bfm: Option<&Path>) -> PathBuf {
    let mut doc = TINY.to_string();
    if let Some(p) = bfm {
        doc.push_str(&format!("\n[io]\nbfm_checkpoint = {:?}\n", p.to_str().unwrap()));
    }
    let path = dir.join(name);
    std::fs::write(&path, doc).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unusable_flags_exit_with_two() {
    for args in [
        &[][..],
        &["train", "--bogus"],
        &["train", "--task", "juggle"],
        &["train", "--mode", "everything"],
        &["eval", "--seed", "minus-one"],
        &["inspect"],
    ] {
        let o = tasktokens(args, None);
        assert_eq!(code(&o), 2, "{args:?}: {}", text(&o.stderr));
        assert!(o.stdout.is_empty());
    }
    assert_eq!(code(&tasktokens(&["--help"], None)), 0);
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = tasktokens(&["pretrain", "--config", s(&missing)], None);
    assert_eq!(code(&o), 1);
    assert!(text(&o.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[ppo]\nunknown_knob = 1\n").unwrap();
    assert_eq!(code(&tasktokens(&["train", "--config", s(&bad)], None)), 1);

    // Trunk modes without a trunk checkpoint.
    let cfg = write_config(dir.path(), "tiny.toml", None);
    let o = tasktokens(&["train", "--config", s(&cfg), "--out", s(dir.path())], None);
    assert_eq!(code(&o), 1);
    assert!(text(&o.stderr).contains("io.bfm_checkpoint"), "{}", text(&o.stderr));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&tasktokens(&["inspect", "--checkpoint", s(&junk)], None)), 1);
}

#[test]
fn pretrain_train_eval_sweep_ablate_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root, "tiny.toml", None);

    let o = tasktokens(&["pretrain", "--config", s(&cfg), "--out", s(root)], None);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let run = root.join("pretrain-s3");
    let bfm = run.join("bfm.ckpt");
    assert!(bfm.exists() && run.join("pretrain.csv").exists());
    let echoed = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(echoed.io.output, root);
    assert_eq!(echoed.bfm.model.d_model, 16);

    let o = tasktokens(&["inspect", "--checkpoint", s(&bfm), "--config", s(&cfg)], None);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let out = text(&o.stdout);
    assert!(out.starts_with("kind bfm\nsha256 "), "{out}");
    for mode in ["task_tokens", "full_finetune", "pure_ppo", "prompt_only"] {
        assert!(out.contains(&format!("trainable {mode} ")), "{out}");
    }
    assert!(out.contains("trainable prompt_only 0\n"));

    let cfg = write_config(root, "with_bfm.toml", Some(&bfm));
    let common = ["--config", s(&cfg), "--out", s(root)];
    let o = tasktokens(&[&["train", "--task", "reach"][..], &common].concat(), None);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let trained = root.join("train-reach-task_tokens-s3");
    let policy = trained.join("policy_final.ckpt");
    assert!(policy.exists() && trained.join("metrics.csv").exists() && trained.join("config.toml").exists());

    let with_policy = [&["--task", "reach", "--checkpoint", s(&policy)][..], &common].concat();
    let o = tasktokens(&[&["eval"][..], &with_policy].concat(), None);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let csv = std::fs::read_to_string(root.join("eval-reach-task_tokens-s3/eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);

    let o = tasktokens(&[&["sweep"][..], &with_policy].concat(), None);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let csv = std::fs::read_to_string(root.join("sweep-reach-task_tokens-s3/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);

    // A policy only evaluates on the task it was trained for.
    let o = tasktokens(
        &[
            &["eval", "--task", "direction", "--checkpoint", s(&policy)][..],
            &common,
        ]
        .concat(),
        None,
    );
    assert_eq!(code(&o), 1);

    let o = tasktokens(
        &[&["eval", "--task", "steering", "--mode", "prompt_only"][..], &common].concat(),
        None,
    );
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));

    let o = tasktokens(&[&["ablate", "--task", "direction"][..], &common].concat(), None);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let csv = std::fs::read_to_string(root.join("ablate-direction-s3/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);

    let o = tasktokens(&["inspect", "--checkpoint", s(&policy)], None);
    assert_eq!(code(&o), 0);
    assert!(text(&o.stdout).starts_with("kind policy\n"));
}

#[test]
fn identical_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", None);
    let mut csvs = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let o = tasktokens(
            &[
                "train",
                "--config",
                s(&cfg),
                "--mode",
                "pure_ppo",
                "--seed",
                "11",
                "--out",
                s(&out),
            ],
            None,
        );
        assert_eq!(code(&o), 0, "{}", text(&o.stderr));
        csvs.push(std::fs::read(out.join("train-direction-pure_ppo-s11/metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn output_root_comes_from_flag_then_environment_then_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", None);
    let from_env = dir.path().join("env");
    let from_flag = dir.path().join("flag");
    let args = ["train", "--config", s(&cfg), "--mode", "pure_ppo"];

    let o = tasktokens(&args, Some(&from_env));
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let run = from_env.join("train-direction-pure_ppo-s3");
    assert_eq!(RunConfig::load(&run.join("config.toml")).unwrap().io.output, from_env);

    let o = tasktokens(&[&args[..], &["--out", s(&from_flag)]].concat(), Some(&from_env));
    assert_eq!(code(&o), 0);
    assert!(from_flag.join("train-direction-pure_ppo-s3/metrics.csv").exists());
}
