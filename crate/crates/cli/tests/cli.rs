use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const DATASET: &str = r#"
[dataset]
seed = 4
train_videos = 2
test_videos = 2
num_frames = 48
feature_dim = 8
noise_sigma = 0.3
actions = ["reach", "grasp", "pour"]

[dataset.grammar]
density = "dense"
base_rates = { reach = 0.05, grasp = 0.03 }
durations = { reach = [3, 6], grasp = [2, 5], pour = [4, 4] }
triggers = [{ source = "reach", target = "pour", delay = [2, 4], probability = 0.8 }]
co_occurrence = []
"#;

const MODEL: &str = r#"
[model]
hidden_dim = 16
num_heads = 2
ffn_dim = 32
num_encoder_layers = 1
num_decoder_layers = 1
anticipation_horizon = 6

[memory]
long_capacity = 12
short_capacity = 6

[train]
peak_lr = 1e-3
batch_size = 4
epochs = 3
samples_per_video = 4
"#;

fn joadaa(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_joadaa"))
        .args(args.iter().map(|a| a.as_ref()))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn gen_data(root: &Path) -> PathBuf {
    let cfg = write_config(root, "data.toml", DATASET);
    let out = root.join("data");
    let res = joadaa(&[&"gen-data", &"--config", &cfg, &"--out", &out]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    out
}

#[test]
fn gen_data_writes_manifest_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let first = gen_data(dir.path());
    let m = manifest(&first);
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["seed"], 4);
    for split in ["train", "test"] {
        assert!(first.join(split).is_dir());
    }

    let again = dir.path().join("again");
    let cfg = dir.path().join("data.toml");
    assert_eq!(
        code(&joadaa(&[&"gen-data", &"--config", &cfg, &"--out", &again])),
        0
    );
    let digest = |p: &Path| {
        manifest(p)["digests"]["dataset"]
            .as_str()
            .unwrap()
            .to_string()
    };
    assert_eq!(digest(&first), digest(&again));
    assert_eq!(
        fs::read(first.join("train/train_0001.feat")).unwrap(),
        fs::read(again.join("train/train_0001.feat")).unwrap()
    );

    let other = dir.path().join("other");
    assert_eq!(
        code(&joadaa(&[
            &"gen-data",
            &"--config",
            &cfg,
            &"--out",
            &other,
            &"--seed",
            &"5"
        ])),
        0
    );
    assert_ne!(digest(&first), digest(&other));
}

#[test]
fn missing_grammar_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = DATASET.replace(
        "durations = { reach = [3, 6], grasp = [2, 5], pour = [4, 4] }\n",
        "",
    );
    let cfg = write_config(dir.path(), "bad.toml", &text);
    let res = joadaa(&[
        &"gen-data",
        &"--config",
        &cfg,
        &"--out",
        &dir.path().join("d"),
    ]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("durations"), "{}", stderr(&res));
}

#[test]
fn unreadable_inputs_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let res = joadaa(&[
        &"gen-data",
        &"--config",
        &dir.path().join("nope.toml"),
        &"--out",
        &dir.path().join("d"),
    ]);
    assert_eq!(code(&res), 3);
    let cfg = write_config(dir.path(), "model.toml", MODEL);
    let res = joadaa(&[
        &"train",
        &"--config",
        &cfg,
        &"--dataset",
        &dir.path().join("missing"),
        &"--out",
        &dir.path().join("r"),
    ]);
    assert_eq!(code(&res), 3);
}

#[test]
fn smoke_training_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let cfg = write_config(
        dir.path(),
        "model.toml",
        &MODEL.replace("epochs = 3", "epochs = 1"),
    );
    let out = dir.path().join("run");
    let start = Instant::now();
    let res = joadaa(&[
        &"train",
        &"--config",
        &cfg,
        &"--dataset",
        &data,
        &"--out",
        &out,
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(start.elapsed() < Duration::from_secs(60));
    for f in ["checkpoint.jdck", "metrics.jsonl", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let m = manifest(&out);
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["model"]["feature_dim"], 8);
    assert_eq!(m["config"]["model"]["num_classes"], 3);
    for path in m["artifacts"].as_object().unwrap().values() {
        assert!(Path::new(path.as_str().unwrap()).exists());
    }
    let log = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(
        log.lines()
            .filter(|l| l.contains("\"kind\":\"epoch\""))
            .count(),
        1
    );
}

#[test]
fn negative_horizon_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let cfg = write_config(
        dir.path(),
        "m.toml",
        &MODEL.replace("anticipation_horizon = 6", "anticipation_horizon = -1"),
    );
    let res = joadaa(&[
        &"train",
        &"--config",
        &cfg,
        &"--dataset",
        &data,
        &"--out",
        &dir.path().join("r"),
    ]);
    assert_eq!(code(&res), 2, "{}", stderr(&res));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let cfg = write_config(dir.path(), "model.toml", MODEL);
    let full = dir.path().join("full");
    let res = joadaa(&[
        &"train",
        &"--config",
        &cfg,
        &"--dataset",
        &data,
        &"--out",
        &full,
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));

    let split = dir.path().join("split");
    let res = joadaa(&[
        &"train",
        &"--config",
        &cfg,
        &"--dataset",
        &data,
        &"--out",
        &split,
        &"--stop-after-epoch",
        &"1",
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let partial = fs::read_to_string(split.join("metrics.jsonl")).unwrap();
    assert_eq!(partial.matches("\"kind\":\"epoch\"").count(), 1);
    // lines past the checkpoint, as left by a run killed mid-epoch, are dropped on resume
    let stale = partial
        .lines()
        .next()
        .unwrap()
        .replace("\"epoch\":0", "\"epoch\":1");
    fs::write(split.join("metrics.jsonl"), format!("{partial}{stale}\n")).unwrap();
    let res = joadaa(&[
        &"train",
        &"--config",
        &cfg,
        &"--dataset",
        &data,
        &"--out",
        &split,
        &"--resume",
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));

    assert_eq!(
        fs::read_to_string(full.join("metrics.jsonl")).unwrap(),
        fs::read_to_string(split.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(full.join("checkpoint.jdck")).unwrap(),
        fs::read(split.join("checkpoint.jdck")).unwrap()
    );
}

#[test]
fn exploding_training_exits_with_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let text = MODEL
        .replace("peak_lr = 1e-3", "peak_lr = 1e300\ngrad_clip = 0.0")
        .replace("epochs = 3", "epochs = 2");
    let cfg = write_config(dir.path(), "m.toml", &text);
    let res = joadaa(&[
        &"train",
        &"--config",
        &cfg,
        &"--dataset",
        &data,
        &"--out",
        &dir.path().join("r"),
    ]);
    assert_eq!(code(&res), 4, "{}", stderr(&res));
    assert!(stderr(&res).contains("non-finite"));
}

#[test]
fn oracle_eval_scores_one_and_horizons_subset_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let out = dir.path().join("eval");
    let res = joadaa(&[&"eval", &"--oracle", &"--dataset", &data, &"--out", &out]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(stdout(&res).contains("OAD mAP 1.0000"), "{}", stdout(&res));
    for f in ["eval.txt", "eval.json", "scores.json", "manifest.json"] {
        assert!(out.join(f).is_file());
    }

    let rep = dir.path().join("report");
    let res = joadaa(&[
        &"report",
        &"--run",
        &out,
        &"--out",
        &rep,
        &"--horizons",
        &"2,6",
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let text = fs::read_to_string(rep.join("eval/eval.txt")).unwrap();
    let tasks: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(tasks, ["OAD", "AA@2", "AA@6"]);
    let svg = rep.join("eval/strips/test_0000.svg");
    let first = fs::read(&svg).unwrap();
    assert!(String::from_utf8_lossy(&first).contains("anticipation +6"));

    let rep2 = dir.path().join("report2");
    assert_eq!(
        code(&joadaa(&[
            &"report",
            &"--run",
            &out,
            &"--out",
            &rep2,
            &"--horizons",
            &"2,6"
        ])),
        0
    );
    assert_eq!(
        first,
        fs::read(rep2.join("eval/strips/test_0000.svg")).unwrap()
    );

    let res = joadaa(&[
        &"report",
        &"--run",
        &out,
        &"--out",
        &dir.path().join("r3"),
        &"--horizons",
        &"3",
    ]);
    assert_eq!(code(&res), 2);
}

#[test]
fn eval_rejects_checkpoint_version_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let cfg = write_config(
        dir.path(),
        "model.toml",
        &MODEL.replace("epochs = 3", "epochs = 1"),
    );
    let run = dir.path().join("run");
    assert_eq!(
        code(&joadaa(&[
            &"train",
            &"--config",
            &cfg,
            &"--dataset",
            &data,
            &"--out",
            &run
        ])),
        0
    );
    let ck = run.join("checkpoint.jdck");
    let res = joadaa(&[
        &"eval",
        &"--checkpoint",
        &ck,
        &"--dataset",
        &data,
        &"--out",
        &dir.path().join("e"),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(stdout(&res).contains("AA@6"));

    let mut bytes = fs::read(&ck).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    let bad = dir.path().join("bad.jdck");
    fs::write(&bad, bytes).unwrap();
    let res = joadaa(&[
        &"eval",
        &"--checkpoint",
        &bad,
        &"--dataset",
        &data,
        &"--out",
        &dir.path().join("e2"),
    ]);
    assert_eq!(code(&res), 5, "{}", stderr(&res));
}

#[test]
fn ablation_table_has_one_row_per_cell_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = DATASET
        .replace("[dataset]", "[ablation.datasets.tiny]")
        .replace("[dataset.grammar]", "[ablation.datasets.tiny.grammar]");
    let text = format!(
        "{}\n[ablation]\nseeds = [0, 1]\n{dataset}\n{}",
        MODEL
            .replace("epochs = 3", "epochs = 1")
            .replace("[model]", "[model]\nfeature_dim = 8\nnum_classes = 3"),
        r#"
[[ablation.cells]]
name = "base"
dataset = "tiny"

[[ablation.cells]]
name = "aa_off"
dataset = "tiny"
anticipation = false

[[ablation.cells]]
name = "fc"
dataset = "tiny"
head = "fc"
"#
    );
    let cfg = write_config(dir.path(), "ablate.toml", &text);
    let out = dir.path().join("ablation");
    let res = joadaa(&[
        &"ablate",
        &"--config",
        &cfg,
        &"--out",
        &out,
        &"--horizons",
        &"1,2,4,6",
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);

    let rep = dir.path().join("report");
    let res = joadaa(&[
        &"report",
        &"--run",
        &out,
        &"--out",
        &rep,
        &"--horizons",
        &"2,6",
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let csv = fs::read_to_string(rep.join("ablation/ablation.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "cell,seed,oad_map,aa_map@2,aa_map@6"
    );
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
}

#[test]
fn report_without_results_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let res = joadaa(&[
        &"report",
        &"--run",
        &dir.path(),
        &"--out",
        &dir.path().join("r"),
    ]);
    assert_eq!(code(&res), 3);
}
