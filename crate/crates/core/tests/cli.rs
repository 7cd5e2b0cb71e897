use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmger::synthdata::CorpusManifest;
use tempfile::TempDir;

const TINY: &str = r#"
[synthdata]
num_symbols = 6
feature_dim = 4
num_accents = 2
shift_strengths = [0.0, 0.6]
length_range = [2, 4]
pairs_per_accent = 2
branching = 3
train_size = 24
dev_size = 8
test_size = 8

[encoders.shared]
input_dim = 4
num_layers = 1
model_dim = 8
ffn_dim = 16
num_heads = 2
tap_layers = [1]

[encoders.asr]
input_dim = 4
num_layers = 1
model_dim = 8
ffn_dim = 16
num_heads = 2
tap_layers = [1]

[encoders.adapter]
num_layers = 1
num_heads = 2
ffn_dim = 16

[arfusion]
fusion_dim = 6
classifier_hidden = 8

[lm.model]
dim = 8
num_layers = 1
num_heads = 2
ffn_dim = 16
context_cap = 96

[lm.pretrain]
corpus_size = 200
heldout_size = 20
epochs = 1
batch_size = 16

[trainer]
batch_size = 8
epochs = 1
eval_batch_size = 8
"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let paths = format!(
            "\n[paths]\ndata_dir = \"{0}/data\"\nlm_path = \"{0}/lm/lm.safetensors\"\nrun_dir = \"{0}/run\"\n",
            dir.path().display()
        );
        fs::write(dir.path().join("cfg.toml"), format!("{TINY}{paths}")).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("cfg.toml");
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mmger"));
        cmd.arg("--quiet")
            .args(&args[..1])
            .arg("--config")
            .arg(&cfg)
            .args(&args[1..]);
        cmd.current_dir(self.dir.path()).output().unwrap()
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn checksums(dir: &Path) -> Vec<String> {
    let m = CorpusManifest::load(&dir.join("manifest.json")).unwrap();
    m.splits.into_iter().map(|s| s.frames_sha256).collect()
}

#[test]
fn pipeline_runs_end_to_end() {
    let ws = Workspace::new();
    let o = ws.run(&["generate-data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ws.path("data/manifest.json").exists());
    assert!(ws.path("data/config.resolved.toml").exists());

    let o = ws.run(&["pretrain-lm"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ws.path("lm/lm.safetensors").exists());
    assert!(ws.path("lm/pretrain_report.json").exists());

    let o = ws.run(&["train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ws.path("run/checkpoint.safetensors").exists());
    let metrics = fs::read_to_string(ws.path("run/metrics.tsv")).unwrap();
    assert!(metrics.starts_with("step\t"));

    let o = ws.run(&["evaluate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("run/eval_dev.json")).unwrap()).unwrap();
    assert!(json["cer"].is_number() && json["baseline_cer"].is_number());
    assert!(ws.path("run/eval_dev.txt").exists());

    let o = ws.run(&["decode", "--split", "test"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("utt_id\tbaseline\tcorrected\treference"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.split('\t').count() == 4));

    let o = ws.run(&[
        "ablate",
        "--row",
        "A1,G2",
        "--out",
        ws.path("abl").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(ws.path("abl/ablation.txt")).unwrap();
    assert!(table.contains("A1") && table.contains("G2") && !table.contains("A3"));
    assert!(ws.path("abl/config.resolved.toml").exists());
}

#[test]
fn seed_override_changes_corpus() {
    let ws = Workspace::new();
    let a = ws.path("a");
    let b = ws.path("b");
    let c = ws.path("c");
    for (dir, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        let o = ws.run(&[
            "generate-data",
            "--seed",
            seed,
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(checksums(&a), checksums(&b));
    assert_ne!(checksums(&a), checksums(&c));
    let resolved = fs::read_to_string(c.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 6"));
}

#[test]
fn unwritable_output_names_path() {
    let ws = Workspace::new();
    let blocker = ws.path("blocker");
    fs::write(&blocker, "not a directory").unwrap();
    let target = blocker.join("data");
    let o = ws.run(&["generate-data", "--out", target.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains(target.to_str().unwrap())
            || stderr(&o).contains(blocker.to_str().unwrap())
    );
}

#[test]
fn missing_artifacts_are_named() {
    let ws = Workspace::new();
    let o = ws.run(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("manifest.json"), "{}", stderr(&o));

    assert!(ws.run(&["generate-data"]).status.success());
    let o = ws.run(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lm.safetensors"), "{}", stderr(&o));

    let o = ws.run(&["evaluate", "--checkpoint", "nowhere.safetensors"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lm.safetensors") || stderr(&o).contains("nowhere.safetensors"));
}

#[test]
fn usage_errors_exit_one() {
    let ws = Workspace::new();
    let o = ws.run(&["train", "--unknown-flag"]);
    assert_eq!(o.status.code(), Some(1));
    let o = ws.run(&["ablate", "--row", "Z9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Z9"));
    let bad = ws.path("bad.toml");
    fs::write(&bad, "[trainer]\nlamda = 0.3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mmger"))
        .args(["generate-data", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lamda"));
}
