use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
output_dir = "out"
seeds = [0]

[recipe]
name = "dam"
attributes = ["gender", "age"]

[data.synthetic]
num_examples = 600

[[data.synthetic.attributes]]
id = "gender"
num_classes = 2
signal_strength = 0.8
task_correlation = 0.05

[[data.synthetic.attributes]]
id = "age"
num_classes = 3
signal_strength = 0.8
task_correlation = 0.05

[encoder]
vocab_size = 600
hidden_dim = 16
num_layers = 1
num_heads = 2
ffn_dim = 32
max_seq_len = 16

[adapter]
hidden_dim = 16

[pretrain]
epochs = 1

[training]
max_epochs = 2
max_epochs_debias = 1
fusion_epochs = 1

[attackers]
members = 2
max_epochs = 2
"#;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("exp.toml"), config).unwrap();
        Run { dir }
    }

    fn root(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn dam(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_dam"))
            .arg("--config")
            .arg(self.dir.path().join("exp.toml"))
            .args(args)
            .env("DAM_OUTPUT_ROOT", self.dir.path())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.dam(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.dam(args).status.code().unwrap()
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn generate_data_contract() {
    let run = Run::new(TINY);
    run.ok(&["generate-data"]);
    let data = run.root().join("data");
    let files = ["train.jsonl", "val.jsonl", "test.jsonl", "splits.json"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| read(&data.join(f))).collect();
    assert_eq!(run.code(&["generate-data"]), 2);
    run.ok(&["generate-data", "--force"]);
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&read(&data.join(f)), bytes, "{f} differs on regeneration");
    }
    let line = String::from_utf8(first[0].clone()).unwrap();
    let rec: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    let protected = rec["protected"].as_object().unwrap();
    assert_eq!(protected.len(), 2);
    assert!(protected.contains_key("gender") && protected.contains_key("age"));
}

#[test]
fn exit_codes() {
    let run = Run::new(TINY);
    assert_eq!(run.code(&["train"]), 3, "missing data is a data error");
    assert_eq!(run.code(&["eval"]), 3, "missing data is a data error");
    assert_eq!(run.code(&["params", "--set", "training.nope=1"]), 2);
    assert_eq!(run.code(&["params", "--set", "recipe.name=xyz"]), 2);
    let bad = Run::new("[encoder]\nhidden_dim = 0\n");
    assert_eq!(bad.code(&["params"]), 2);
    run.ok(&["generate-data"]);
    assert_eq!(run.code(&["eval"]), 4, "untrained model is a missing checkpoint");
    assert_eq!(run.code(&["attention-report"]), 4);
    fs::write(run.root().join(".dam.lock"), "1").unwrap();
    assert_eq!(run.code(&["train"]), 2, "locked output directory");
}

#[test]
fn params_table_layout_and_order() {
    let run = Run::new(TINY);
    let out = run.ok(&["params"]);
    let rows: Vec<(String, usize)> = out
        .lines()
        .skip(2)
        .map(|l| {
            let cells: Vec<&str> = l.trim_matches('|').split('|').map(str::trim).collect();
            (cells[0].to_string(), cells[1].replace(',', "").parse().unwrap())
        })
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(names, ["FT", "FT-Debias", "Adp", "Adp-Debias", "DAM"]);
    let n = |name: &str| rows.iter().find(|r| r.0 == name).unwrap().1;
    assert!(n("Adp") < n("Adp-Debias") && n("Adp-Debias") < n("DAM") && n("DAM") < n("FT") && n("FT") < n("FT-Debias"));
}

#[test]
fn train_eval_attention_round_trip() {
    let run = Run::new(TINY);
    run.ok(&["generate-data"]);
    run.ok(&["train"]);
    let seed = run.root().join("seed-0");
    let mut stages: Vec<String> = fs::read_dir(seed.join("stages"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    stages.sort();
    assert_eq!(
        stages,
        ["0-task_adapter", "1-debias_adapter.gender", "2-debias_adapter.age", "3-fusion"]
    );
    for s in &stages {
        assert!(seed.join("stages").join(s).join("manifest.json").exists());
        assert!(seed.join("stages").join(s).join("config.toml").exists());
    }
    assert!(seed.join("final/manifest.json").exists());
    // A debiasing adapter ships as its own per-layer blobs.
    assert!(seed.join("stages/1-debias_adapter.gender/debias_adapter.gender/layer0.bin").exists());

    let fused = run.ok(&["eval", "--mode", "fused", "--attack", "gender,age"]);
    let task_only = run.ok(&["eval", "--mode", "task_only", "--attack", "gender,age"]);
    let header = fused.lines().next().unwrap();
    assert!(header.contains("Gender Attacker BAcc.") && header.contains("Age Attacker BAcc."));
    assert!(fused.contains("| DAM (fused) |") && task_only.contains("| DAM (task_only) |"));
    let reports = run.root().join("reports");
    let first = read(&reports.join("leakage-fused.json"));
    run.ok(&["eval", "--mode", "fused", "--attack", "gender,age"]);
    assert_eq!(read(&reports.join("leakage-fused.json")), first);

    // Attention analysis: 4% sample by default, deterministic, plot optional.
    let out = run.ok(&["attention-report", "--no-plot"]);
    assert!(out.contains("debias:gender") && out.contains("debias:age"));
    let csv_path = run.root().join("reports/attention-seed0.csv");
    let csv = fs::read_to_string(&csv_path).unwrap();
    assert!(!csv_path.with_extension("svg").exists());
    let test_len = fs::read_to_string(run.root().join("data/test.jsonl")).unwrap().lines().count();
    let ids: std::collections::BTreeSet<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids.len(), ((test_len as f64) * 0.04).round() as usize);
    assert_eq!(csv.lines().count() - 1, ids.len() * 3);
    run.ok(&["attention-report"]);
    assert_eq!(fs::read_to_string(&csv_path).unwrap(), csv);
    assert!(csv_path.with_extension("svg").exists());
    let out = run.ok(&["plot", "--output", run.dir.path().join("p.svg").to_str().unwrap()]);
    assert!(out.contains("p.svg"));

    // Retraining with the same seed reproduces the final bundle.
    let final_blob = read(&seed.join("final/fusion/layer0.bin"));
    run.ok(&["train"]);
    assert_eq!(read(&seed.join("final/fusion/layer0.bin")), final_blob);
}

#[test]
fn task_only_eval_matches_adp_recipe_exactly() {
    let dam = Run::new(TINY);
    dam.ok(&["generate-data"]);
    dam.ok(&["train", "--set", "recipe.attributes=[\"gender\"]"]);
    dam.ok(&["eval", "--mode", "task_only", "--attack", "gender"]);
    let adp = Run::new(TINY);
    let adp_args = ["--set", "recipe.name=adp", "--set", "recipe.attributes=[]"];
    adp.ok(&[&["generate-data"][..], &adp_args].concat());
    adp.ok(&[&["train"][..], &adp_args].concat());
    let stages = fs::read_dir(adp.root().join("seed-0/stages")).unwrap().count();
    assert_eq!(stages, 1);
    adp.ok(&[&["eval", "--attack", "gender"][..], &adp_args].concat());
    assert_eq!(adp.code(&[&["eval", "--mode", "fused"][..], &adp_args].concat()), 4);
    let runs = |r: &Run, mode: &str| {
        let v: serde_json::Value =
            serde_json::from_slice(&read(&r.root().join(format!("reports/leakage-{mode}.json")))).unwrap();
        v["runs"].clone()
    };
    assert_eq!(runs(&dam, "task_only"), runs(&adp, "task_only"));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = dam::config::ExperimentConfig::load(Some(&path), &[]);
            assert!(cfg.is_ok(), "{}: {:?}", path.display(), cfg.err());
            n += 1;
        }
    }
    assert!(n >= 3);
}
