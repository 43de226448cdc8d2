use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use heat_core::checkpoint::save_model;
use heat_core::dataset::{synthetic, SyntheticSpec};
use heat_core::embedding::EmbeddingMatrix;
use heat_core::trainer::Model;
use serde_json::Value;

fn heat(args: &[&str]) -> Output {
    heat_env(args, &[])
}

fn heat_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_heat"));
    cmd.args(args).env_remove("HEAT_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
    train: PathBuf,
    test: PathBuf,
}

impl Fixture {
    fn synthetic() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (tr, te) = synthetic(&SyntheticSpec {
            users: 120,
            items: 200,
            clusters: 8,
            per_user: 10,
            affinity: 0.8,
            test_fraction: 0.2,
            seed: 3,
        })
        .unwrap();
        let train = dir.path().join("train.txt");
        let test = dir.path().join("test.txt");
        tr.write_adjacency(&mut std::fs::File::create(&train).unwrap()).unwrap();
        te.write_adjacency(&mut std::fs::File::create(&test).unwrap()).unwrap();
        Fixture { dir, train, test }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(p: &Path) -> &str {
        p.to_str().unwrap()
    }

    fn train_args<'a>(&'a self, out: &'a Path, epochs: &'a str) -> Vec<&'a str> {
        vec![
            "train",
            "--train",
            Self::s(&self.train),
            "--test",
            Self::s(&self.test),
            "--output",
            Self::s(out),
            "--dim",
            "8",
            "--negatives",
            "8",
            "--epochs",
            epochs,
        ]
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn missing_dataset_exits_2() {
    let f = Fixture::synthetic();
    let missing = f.path("nope.txt");
    let out = f.path("run");
    let o = heat(&["train", "--train", Fixture::s(&missing), "--test", Fixture::s(&f.test), "--output", Fixture::s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(&format!("dataset not found: {}", missing.display())), "{}", stderr(&o));
}

#[test]
fn same_seed_gives_identical_metric_streams() {
    let f = Fixture::synthetic();
    let mut streams = Vec::new();
    let mut ckpts = Vec::new();
    for run in ["a", "b"] {
        let out = f.path(run);
        let mut args = f.train_args(&out, "3");
        args.extend(["--threads", "1", "--seed", "7", "--eval-interval", "1"]);
        let o = heat(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        streams.push(std::fs::read_to_string(out.join("metrics.jsonl")).unwrap());
        ckpts.push(std::fs::read(out.join("model.ckpt")).unwrap());
        assert!(out.join("best.ckpt").exists());
        assert!(out.join("epochs.jsonl").exists());
    }
    assert_eq!(streams[0], streams[1]);
    assert_eq!(ckpts[0], ckpts[1]);
    let lines: Vec<Value> = streams[0].lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // Three in-run evaluations; the last coincides with the final one.
    assert_eq!(lines.len(), 4);
    for l in &lines {
        assert!(l["recall@20"].is_f64() && l["ndcg@20"].is_f64() && l["users"].is_u64());
    }
    assert_eq!(lines[3]["kind"], "final");
}

#[test]
fn manifest_records_config_seed_and_hashes() {
    let f = Fixture::synthetic();
    let out = f.path("run");
    let mut args = f.train_args(&out, "3");
    args.extend(["--sampler", "tiling", "--tile", "1024", "--interval", "4096", "--seed", "5"]);
    let o = heat(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["config"]["sampler"]["kind"], "tiling");
    assert_eq!(m["config"]["sampler"]["tile"], 1024);
    assert_eq!(m["config"]["sampler"]["interval"], 4096);
    assert_eq!(m["seed"], 5);
    assert_eq!(m["epochs_completed"], 3);
    assert_eq!(m["train"]["blob_sha256"].as_str().unwrap().len(), 64);
    assert_ne!(m["train"]["blob_sha256"], m["test"]["blob_sha256"]);
}

#[test]
fn thread_count_precedence() {
    let f = Fixture::synthetic();
    let cfg = f.path("cfg.toml");
    std::fs::write(&cfg, "[train]\nthreads = 3\nepochs = 1\nemb_dim = 8\nnum_negatives = 4\n").unwrap();
    let threads_of = |extra: &[&str], env: &[(&str, &str)], name: &str| {
        let out = f.path(name);
        let mut args = vec![
            "train", "--config", Fixture::s(&cfg), "--train", Fixture::s(&f.train),
            "--test", Fixture::s(&f.test), "--output", Fixture::s(&out),
        ];
        args.extend_from_slice(extra);
        let o = heat_env(&args, env);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        read_json(&out.join("manifest.json"))["config"]["train"]["threads"].as_u64().unwrap()
    };
    assert_eq!(threads_of(&[], &[], "file"), 3);
    assert_eq!(threads_of(&[], &[("HEAT_THREADS", "2")], "env"), 2);
    assert_eq!(threads_of(&["--threads", "1"], &[("HEAT_THREADS", "2")], "flag"), 1);
}

#[test]
fn bad_config_exits_2() {
    let f = Fixture::synthetic();
    let cfg = f.path("bad.toml");
    std::fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    let o = heat(&["train", "--config", Fixture::s(&cfg), "--train", Fixture::s(&f.train), "--test", Fixture::s(&f.test)]);
    assert_eq!(o.status.code(), Some(2));
    let o = heat(&["train", "--train", Fixture::s(&f.train), "--test", Fixture::s(&f.test), "--lr", "-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resume_continues_to_the_same_model() {
    let f = Fixture::synthetic();
    let straight = f.path("straight");
    let mut args = f.train_args(&straight, "4");
    args.extend(["--threads", "1", "--seed", "2"]);
    assert_eq!(heat(&args).status.code(), Some(0));

    let split = f.path("split");
    let mut args = f.train_args(&split, "2");
    args.extend(["--threads", "1", "--seed", "2"]);
    assert_eq!(heat(&args).status.code(), Some(0));
    let ckpt = split.join("model.ckpt");
    let mut args = f.train_args(&split, "4");
    args.extend(["--threads", "1", "--seed", "2", "--resume", Fixture::s(&ckpt)]);
    let o = heat(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    assert_eq!(
        std::fs::read(straight.join("model.ckpt")).unwrap(),
        std::fs::read(split.join("model.ckpt")).unwrap()
    );
    let m = read_json(&split.join("manifest.json"));
    assert_eq!(m["start_epoch"], 2);
    assert_eq!(m["epochs_completed"], 4);
    let epochs = std::fs::read_to_string(split.join("epochs.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 4);
}

/// Two users, three items, K = 2, hand-ranked.
///
/// user 0 = (1, 0): item cosines 1, 0.8, 0; train {0}, test {2} -> ranked [1, 2]
/// user 1 = (0, 1): item cosines 0, 0.6, 1; train {2}, test {1} -> ranked [1, 0]
fn eval_fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let model = Model {
        users: EmbeddingMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        items: EmbeddingMatrix::from_vec(3, 2, vec![1.0, 0.0, 0.8, 0.6, 0.0, 1.0]).unwrap(),
        aggregator: None,
    };
    let ckpt = dir.join("model.ckpt");
    save_model(&model, &ckpt).unwrap();
    let train = dir.join("train.txt");
    let test = dir.join("test.txt");
    std::fs::write(&train, "0 0\n1 2\n").unwrap();
    std::fs::write(&test, "0 2\n1 1\n").unwrap();
    (ckpt, train, test)
}

#[test]
fn eval_prints_known_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, train, test) = eval_fixture(dir.path());
    let base = ["eval", "--checkpoint", Fixture::s(&ckpt), "--train", Fixture::s(&train), "--test", Fixture::s(&test)];
    let o = heat(&base);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["k"], 20);
    assert_eq!(r["recall_at_k"], 1.0);
    let ndcg = (1.0 + 1.0 / 3f64.log2()) / 2.0;
    assert!((r["ndcg_at_k"].as_f64().unwrap() - ndcg).abs() < 1e-12);

    let mut args = base.to_vec();
    args.extend(["-k", "1"]);
    let r: Value = serde_json::from_str(&stdout(&heat(&args))).unwrap();
    assert_eq!(r["recall_at_k"], 0.5);
    assert_eq!(r["ndcg_at_k"], 0.5);
    assert_eq!(r["users_evaluated"], 2);
}

#[test]
fn eval_rejects_bad_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, train, test) = eval_fixture(dir.path());
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    std::fs::write(&ckpt, bytes).unwrap();
    let o = heat(&["eval", "--checkpoint", Fixture::s(&ckpt), "--train", Fixture::s(&train), "--test", Fixture::s(&test)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad magic"), "{}", stderr(&o));
}

#[test]
fn tune_reports_schema_and_worked_example() {
    let o = heat(&["tune", "--items", "40981", "--iterations", "8101280", "-p", "1.5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    for key in ["n1", "n2", "neg_speedup", "pos_speedup", "tier"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }

    let o = heat(&[
        "tune", "--items", "1000000", "--iterations", "100000", "--threads", "1", "--dim", "128",
        "--negatives", "64", "--l2-bytes", "1048576", "--l3-bytes", "33554432", "-p", "2",
    ]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["n1"], 1024);
    assert_eq!(v["n2"], 102);
    assert_eq!(v["tier"], "l2");
}

#[test]
fn tune_rejects_nonpositive_speedup() {
    for p in ["0", "-1"] {
        let o = heat(&["tune", "--items", "100", "--iterations", "100", "-p", p]);
        assert_eq!(o.status.code(), Some(2), "P = {p}: {}", stderr(&o));
    }
}

#[test]
fn tune_writes_config() {
    let f = Fixture::synthetic();
    let cfg = f.path("tuned.toml");
    let o = heat(&["tune", "--train", Fixture::s(&f.train), "--epochs", "10", "--write", Fixture::s(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let written: toml::Value = toml::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    assert_eq!(written["sampler"]["kind"].as_str(), Some("tiling"));
    assert_eq!(written["sampler"]["tile"].as_integer(), v["n1"].as_i64());
    assert_eq!(written["sampler"]["interval"].as_integer(), v["n2"].as_i64());
}

#[test]
fn bench_emits_csv_with_header() {
    let f = Fixture::synthetic();
    let o = heat(&[
        "bench", "--train", Fixture::s(&f.train), "--dim", "8", "--negatives", "8",
        "--sweep", "1,2", "--samplers", "uniform,tiling", "--tile", "16", "--interval", "32",
        "--bench-epochs", "1", "--warmup-epochs", "0",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[0], "sampler");
    assert!(header.contains(&"read_emb") && header.contains(&"read_speedup_vs_uniform"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.len() == header.len()));
    let col = header.iter().position(|h| *h == "read_speedup_vs_uniform").unwrap();
    assert!(rows[2][col].parse::<f64>().unwrap() > 0.0);
    assert_eq!(rows[0][col], "");
}
