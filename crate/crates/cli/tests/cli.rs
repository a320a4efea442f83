use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mpg_cli::{load_checkpoint, read_corpus, save_checkpoint, CliError, RunConfig};
use mpg_core::checkpoint::Checkpoint;
use mpg_core::chem::{parse_smiles, FeatureVocab};
use mpg_core::molgnet::{collection_attention_weights, forward, MolGNetConfig, MolGNetParams};
use mpg_core::synthetic::toy_corpus;
use mpg_core::tasks::assemble_single;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mpg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpg")).args(args).output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// A directory with a tiny-model config, a corpus and single and pair
/// datasets.
struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig {
            seed: 3,
            model: MolGNetConfig::with_dims(1, 1, 8, 2),
            ..RunConfig::default()
        };
        c.pretrain.steps = 4;
        c.pretrain.batch_size = 4;
        c.pretrain.eval_samples = 8;
        c.finetune.max_epochs = 2;
        c.finetune.batch_size = 8;
        std::fs::write(dir.path().join("run.toml"), c.to_toml().unwrap()).unwrap();
        let mols = toy_corpus(40, 1);
        let corpus: String = mols.iter().map(|m| format!("{}\n", m.smiles)).collect();
        std::fs::write(dir.path().join("corpus.smi"), corpus).unwrap();
        let mut single = String::from("smiles,ring\n");
        let mut pair = String::from("smiles,smiles_2,same\n");
        for (i, m) in mols.iter().enumerate() {
            single.push_str(&format!("{},{}\n", m.smiles, i % 2));
            let other = &mols[(i * 7 + 3) % mols.len()];
            pair.push_str(&format!("{},{},{}\n", m.smiles, other.smiles, (i / 2) % 2));
        }
        std::fs::write(dir.path().join("single.csv"), single).unwrap();
        std::fs::write(dir.path().join("pair.csv"), pair).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn config(&self) -> RunConfig {
        RunConfig::load(&self.path("run.toml")).unwrap()
    }

    fn pretrain(&self, out: &str, extra: &[&str]) -> Output {
        let (cfg, corpus, out) = (self.p("run.toml"), self.p("corpus.smi"), self.p(out));
        let mut args = vec!["--config", &cfg, "--out", &out];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["pretrain", "--corpus", &corpus]);
        let o = mpg(&args);
        assert!(o.status.success(), "{}", text(&o.stderr));
        o
    }
}

fn init_hash(stderr: &str) -> String {
    stderr
        .lines()
        .find_map(|l| l.strip_prefix("init hash "))
        .unwrap()
        .to_string()
}

#[test]
fn parse_emits_one_record_per_molecule() {
    let o = mpg(&["parse", "CCO", "C(C)(C)(C)(C)C"]);
    assert_eq!(o.status.code(), Some(0));
    let lines: Vec<serde_json::Value> = text(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["valid"], true);
    assert_eq!(lines[0]["atoms"].as_array().unwrap().len(), 3);
    assert_eq!(lines[0]["bonds"].as_array().unwrap().len(), 2);
    assert_eq!(lines[1]["valid"], false);
    assert!(lines[1]["error"].as_str().unwrap().contains("valence"));
    let o = mpg(&["parse", "--no-valence", "C(C)(C)(C)(C)C"]);
    assert!(text(&o.stdout).contains("\"valid\":true"));
}

#[test]
fn exit_codes_follow_the_error_class() {
    assert_eq!(mpg(&["parse", "C1CC"]).status.code(), Some(2));
    assert_eq!(mpg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mpg(&["--precision", "16", "parse", "C"]).status.code(), Some(1));
    assert_eq!(mpg(&["--precision", "32", "gradcheck"]).status.code(), Some(1));
    let o = mpg(&[
        "--out",
        "/tmp/never-used",
        "pretrain",
        "--corpus",
        "/no/such/corpus.smi",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("/no/such/corpus.smi"));
    assert_eq!(mpg(&["--config", "/no/such.toml", "parse", "C"]).status.code(), Some(2));
    assert_eq!(CliError::Numerical(String::new()).exit_code(), 3);
}

#[test]
fn corpus_reader_accepts_both_layouts() {
    let w = Workspace::new();
    std::fs::write(w.path("table.csv"), "id,smiles\n1,CCO\n# note\n\n2,c1ccccc1\n").unwrap();
    std::fs::write(w.path("lines.smi"), "CCO ethanol\nc1ccccc1\tbenzene\n").unwrap();
    let a: Vec<String> = read_corpus(&w.path("table.csv"))
        .unwrap()
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let b: Vec<String> = read_corpus(&w.path("lines.smi"))
        .unwrap()
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    assert_eq!(a, ["CCO", "c1ccccc1"]);
    assert_eq!(a, b);
    std::fs::write(w.path("bad.smi"), "CCO\nC1CC\n").unwrap();
    let err = read_corpus(&w.path("bad.smi")).unwrap_err();
    assert!(matches!(err, CliError::Data(m) if m.contains("bad.smi:2")));
}

#[test]
fn flags_override_the_config_file() {
    let w = Workspace::new();
    let from_file = w.pretrain("a", &[]);
    let flagged = w.pretrain("b", &["--seed", "4"]);
    let explicit = {
        let mut c = w.config();
        c.seed = 4;
        std::fs::write(w.path("seed4.toml"), c.to_toml().unwrap()).unwrap();
        mpg(&[
            "--config",
            &w.p("seed4.toml"),
            "--out",
            &w.p("c"),
            "pretrain",
            "--corpus",
            &w.p("corpus.smi"),
        ])
    };
    let h = |o: &Output| init_hash(&text(&o.stderr));
    assert_ne!(h(&from_file), h(&flagged));
    assert_eq!(h(&flagged), h(&explicit));
}

#[test]
fn pretraining_writes_periodic_checkpoints_and_metrics() {
    let w = Workspace::new();
    let mut c = w.config();
    c.pretrain.steps = 101;
    c.pretrain.batch_size = 2;
    std::fs::write(w.path("long.toml"), c.to_toml().unwrap()).unwrap();
    let o = mpg(&[
        "--config",
        &w.p("long.toml"),
        "--out",
        &w.p("run"),
        "pretrain",
        "--corpus",
        &w.p("corpus.smi"),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let step100 = Checkpoint::load(&w.path("run/step-000100.ckpt")).unwrap();
    let last = Checkpoint::load(&w.path("run/final.ckpt")).unwrap();
    assert_eq!((step100.step, last.step), (100, 101));
    let log = std::fs::read_to_string(w.path("run/metrics.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let train: Vec<&serde_json::Value> = records.iter().filter(|r| r.get("split").is_none()).collect();
    assert_eq!(train.len(), 101);
    for key in ["step", "psd_loss", "mask_loss", "psd_acc", "mask_acc"] {
        assert!(train[0].get(key).is_some(), "{key}");
    }
    assert_eq!(records.iter().filter(|r| r["split"] == "held_out").count(), 2);
}

#[test]
fn checkpoints_round_trip_and_reject_other_models() {
    let w = Workspace::new();
    let c = w.config();
    let params = MolGNetParams::init(&c.model, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let path = w.path("x.ckpt");
    save_checkpoint(&path, &c, 7, &params).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let ck = load_checkpoint(&path, &c).unwrap();
    assert_eq!(ck.step, 7);
    assert_eq!(MolGNetParams::from_named(&c.model, &ck.tensors).unwrap(), params);
    assert_eq!(ck.to_bytes().unwrap(), bytes);
    assert_eq!(RunConfig::from_toml(&ck.config).unwrap().seed, c.seed);

    let other = RunConfig {
        model: MolGNetConfig::with_dims(1, 1, 16, 2),
        ..c.clone()
    };
    assert!(matches!(load_checkpoint(&path, &other), Err(CliError::Data(m)) if m.contains("differs")));
    let o = mpg(&["--checkpoint", &w.p("x.ckpt"), "embed", "--corpus", &w.p("corpus.smi")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn same_run_in_two_directories_gives_identical_files() {
    let w = Workspace::new();
    w.pretrain("one", &[]);
    w.pretrain("two", &[]);
    for f in ["final.ckpt", "metrics.jsonl"] {
        assert_eq!(
            std::fs::read(w.path("one").join(f)).unwrap(),
            std::fs::read(w.path("two").join(f)).unwrap(),
            "{f}"
        );
    }
}

fn finetune(w: &Workspace, dataset: &str, out: &str, init: &[&str]) -> (String, PathBuf) {
    let (cfg, data, dir) = (w.p("run.toml"), w.p(dataset), w.p(out));
    let mut args = vec!["--config", &cfg, "--out", &dir];
    args.extend_from_slice(init);
    args.extend_from_slice(&["finetune", "--dataset", &data]);
    let o = mpg(&args);
    assert!(o.status.success(), "{}", text(&o.stderr));
    (text(&o.stderr), w.path(out))
}

#[test]
fn finetune_reports_and_dispatches_pairs() {
    let w = Workspace::new();
    w.pretrain("pre", &[]);
    let ckpt = w.p("pre/final.ckpt");
    let (log, dir) = finetune(&w, "single.csv", "ft", &["--checkpoint", &ckpt]);
    assert!(log.contains("RANDOM split"));
    assert!(log.contains("single input"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let auc = report["auc_roc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(
        std::fs::read_to_string(dir.join("finetune.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    let (pair_log, _) = finetune(&w, "pair.csv", "ft-pair", &["--checkpoint", &ckpt]);
    assert!(pair_log.contains("pair input"));

    let o = mpg(&[
        "--config",
        &w.p("run.toml"),
        "--checkpoint",
        &w.p("ft/finetuned.ckpt"),
        "eval",
        "--dataset",
        &w.p("single.csv"),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(text(&o.stdout).trim()).unwrap();
    assert_eq!(r["n"], 40);
}

#[test]
fn no_pretrain_changes_only_the_encoder_init() {
    let w = Workspace::new();
    w.pretrain("pre", &[]);
    let (pre, _) = finetune(&w, "single.csv", "a", &["--checkpoint", &w.p("pre/final.ckpt")]);
    let (fresh, _) = finetune(&w, "single.csv", "b", &["--no-pretrain"]);
    let hashes = |log: &str| -> (String, String) {
        let line = log.lines().find_map(|l| l.strip_prefix("init hash encoder ")).unwrap();
        let (enc, head) = line.split_once(" head ").unwrap();
        (enc.to_string(), head.to_string())
    };
    let (a, b) = (hashes(&pre), hashes(&fresh));
    assert_ne!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(
        mpg(&["finetune", "--dataset", &w.p("single.csv")]).status.code(),
        Some(1)
    );
}

#[test]
fn embed_writes_one_row_per_molecule() {
    let w = Workspace::new();
    w.pretrain("pre", &[]);
    let run = |out: &str| {
        let o = mpg(&[
            "--config",
            &w.p("run.toml"),
            "--checkpoint",
            &w.p("pre/final.ckpt"),
            "--out",
            &w.p(out),
            "embed",
            "--corpus",
            &w.p("corpus.smi"),
        ]);
        assert!(o.status.success(), "{}", text(&o.stderr));
        std::fs::read_to_string(w.path(out)).unwrap()
    };
    let a = run("e1.csv");
    assert_eq!(a, run("e2.csv"));
    let rows: Vec<&str> = a.lines().collect();
    assert_eq!(rows.len(), 40);
    assert!(rows.iter().all(|r| r.split(',').count() == 1 + 8));
    assert!(rows[0].starts_with(&toy_corpus(1, 1)[0].smiles));
}

fn attend(w: &Workspace, smiles: &str) -> Vec<(usize, String, f64)> {
    let o = mpg(&[
        "--config",
        &w.p("run.toml"),
        "--checkpoint",
        &w.p("pre/final.ckpt"),
        "attend",
        smiles,
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    text(&o.stdout)
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].parse().unwrap(), f[1].to_string(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn attention_weights_are_normalized_and_match_the_model() {
    let w = Workspace::new();
    w.pretrain("pre", &[]);
    let rows = attend(&w, "CC(=O)Nc1ccccc1");
    assert_eq!(rows.len(), 10);
    assert!((rows.iter().map(|r| r.2).sum::<f64>() - 1.0).abs() < 1e-5);
    assert_eq!(rows[2].1, "O");

    let c = w.config();
    let ck = load_checkpoint(&w.path("pre/final.ckpt"), &c).unwrap();
    let enc = MolGNetParams::from_named(&c.model, &ck.tensors).unwrap();
    let g = parse_smiles("CC(=O)Nc1ccccc1", true).unwrap();
    let batch = assemble_single(&g, &FeatureVocab::default()).unwrap();
    let direct = collection_attention_weights(&forward(&batch, &enc, &c.model).unwrap().attention, &batch).unwrap();
    for ((i, _, printed), (j, exact)) in rows.iter().zip(&direct[0]) {
        assert_eq!(i, j);
        assert!((printed - exact).abs() < 1e-6);
    }

    let sym = attend(&w, "CCC");
    assert!((sym[0].2 - sym[2].2).abs() < 1e-6);
}

#[test]
fn gradcheck_passes_on_a_small_model() {
    let w = Workspace::new();
    let o = mpg(&["--config", &w.p("run.toml"), "gradcheck", "--max-coords", "8"]);
    assert!(o.status.success(), "{}{}", text(&o.stdout), text(&o.stderr));
    let out = text(&o.stdout);
    assert!(out.contains("model.embed.atom"));
    assert!(out.lines().last().unwrap().ends_with(", 0 failed"));
}

#[test]
fn stored_config_omits_paths() {
    let w = Workspace::new();
    w.pretrain("pre", &[]);
    let ck = Checkpoint::load(Path::new(&w.p("pre/final.ckpt"))).unwrap();
    assert!(!ck.config.contains(&w.p("")));
}
