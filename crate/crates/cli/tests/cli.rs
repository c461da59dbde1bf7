use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xmash::dataio::{load_codes, Dataset, Split};
use xmash::eval::{default_ks, evaluate_task};
use xmash::index::{encode_corpus, search};
use xmash::net::HashNet;
use xmash::{Direction, Modality};

fn xmash(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmash"))
        .args(args)
        .env_remove("XMASH_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = xmash(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let data = dir.join("data");
    let mut args = vec!["synth", "--pairs", "200", "--clusters", "4", "--dim-img", "8", "--dim-txt", "6", "--seed", "1"];
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", s(&data)]);
    ok(&args);
    data
}

fn train(data: &Path, out: &Path, mode: &str, extra: &[&str]) {
    let mut args = vec![
        "train", "--data", s(data), "--out", s(out), "--mode", mode, "--bits", "16", "--dim-common", "16",
        "--epochs", "2", "--pool-size", "40", "--seed", "3",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synth_writes_data_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let mut names: Vec<String> = fs::read_dir(&data).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["image.xmh", "labels.xml", "manifest.json", "text.xmh"]);
    let d = Dataset::load_dir(&data).unwrap();
    assert_eq!((d.len(), d.image().cols(), d.text().cols()), (200, 8, 6));

    let again = synth(&dir.path().join("again"), &[]);
    let m1 = manifest(&data);
    assert_eq!(m1["outputs"].as_object().unwrap().len(), 3);
    assert_eq!(m1["outputs"], manifest(&again)["outputs"]);
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = xmash(&["synth", "--clusters", "0", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let out = xmash(&["train", "--data", "x", "--out", "y", "--bits", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let out = xmash(&["train", "--data", "x", "--out", "y", "--bits", "24"]);
    assert_eq!(out.status.code(), Some(1));
    let out = xmash(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = xmash(&["train", "--data", s(&dir.path().join("nope")), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn train_writes_checkpoints_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let run = dir.path().join("run");
    train(&data, &run, "ugach", &[]);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,lr,disc_loss,gen_mean_reward");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,1e-2,") && lines[2].starts_with("1,1e-2,"));
    let net = HashNet::load(&run.join("disc.xmn")).unwrap();
    assert_eq!(net.bits(), 16);
    HashNet::load(&run.join("gen.xmn")).unwrap();
    let manifest = fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"mode\": \"ugach\"") && manifest.contains("disc.xmn"));
}

#[test]
fn baseline_history_has_no_reward() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let run = dir.path().join("run");
    train(&data, &run, "baseline", &["--epochs", "1"]);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.lines().nth(1).unwrap().ends_with(",nan"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, "epochs = 3\nmode = \"baseline\"\nlr0 = 0.05\n").unwrap();
    let run = dir.path().join("run");
    ok(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--dim-common", "16", "--pool-size", "40",
        "--epochs", "1",
    ]);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
    assert!(history.lines().nth(1).unwrap().starts_with("0,5e-2,"));
    assert!(history.ends_with(",nan\n"));
}

#[test]
fn encode_and_query_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let run = dir.path().join("run");
    train(&data, &run, "baseline", &[]);
    let ckpt = run.join("disc.xmn");
    let db_codes = dir.path().join("db.xmc");
    let q_codes = dir.path().join("q.xmc");
    ok(&[
        "encode", "--checkpoint", s(&ckpt), "--features", s(&data.join("text.xmh")), "--modality", "text", "--subset",
        "db", "--bits", "16", "--out", s(&db_codes),
    ]);
    ok(&[
        "encode", "--checkpoint", s(&ckpt), "--features", s(&data.join("image.xmh")), "--modality", "image",
        "--subset", "query", "--out", s(&q_codes),
    ]);
    assert!(dir.path().join("db.xmc.manifest.json").exists());

    let ds = Dataset::load_dir(&data).unwrap();
    let split = Split::random(200, 0.05, 0).unwrap();
    let net = HashNet::load(&ckpt).unwrap();
    let db = load_codes(&db_codes).unwrap();
    let q = load_codes(&q_codes).unwrap();
    assert_eq!((db.rows(), db.bits()), (190, 16));
    assert_eq!(q.rows(), 10);
    let expected = encode_corpus(&net, &ds.text().gather(&split.db).unwrap(), Modality::Text).unwrap();
    assert_eq!(db, expected);

    let mismatch = xmash(&[
        "encode", "--checkpoint", s(&ckpt), "--features", s(&data.join("image.xmh")), "--modality", "text", "--out",
        s(&dir.path().join("bad.xmc")),
    ]);
    assert_eq!(mismatch.status.code(), Some(2));
    let wrong_bits = xmash(&[
        "encode", "--checkpoint", s(&ckpt), "--features", s(&data.join("text.xmh")), "--modality", "text", "--bits",
        "32", "--out", s(&dir.path().join("bad.xmc")),
    ]);
    assert_eq!(wrong_bits.status.code(), Some(2));

    let csv = dir.path().join("hits.csv");
    ok(&["query", "--db", s(&db_codes), "--queries", s(&q_codes), "--topk", "7", "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "query_index,rank,db_index,distance");
    assert_eq!(rows.len(), 1 + 10 * 7);
    let lib = search(&db, q.row(4), Some(7)).unwrap();
    for (i, hit) in lib.iter().enumerate() {
        assert_eq!(rows[1 + 4 * 7 + i], format!("4,{},{},{}", i + 1, hit.index, hit.distance));
    }

    // a query identical to a database row finds it at distance 0
    let self_csv = dir.path().join("self.csv");
    ok(&["query", "--db", s(&db_codes), "--queries", s(&db_codes), "--topk", "1", "--out", s(&self_csv)]);
    let first = fs::read_to_string(&self_csv).unwrap();
    assert!(first.lines().skip(1).all(|l| l.ends_with(",0")));
}

#[test]
fn eval_reports_match_library_and_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let run = dir.path().join("run");
    train(&data, &run, "baseline-gan", &[]);
    let (a, b) = (dir.path().join("eval-a"), dir.path().join("eval-b"));
    let out = ok(&["eval", "--data", s(&data), "--run", s(&run), "--out", s(&a)]);
    ok(&["eval", "--data", s(&data), "--run", s(&run), "--out", s(&b)]);
    for name in ["report.json", "pr_baseline-gan_16_i2t.csv", "topk_baseline-gan_16_t2i.csv"] {
        assert!(fs::read(a.join(name)).unwrap() == fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert_eq!(manifest(&a)["outputs"], manifest(&b)["outputs"]);

    let ds = Dataset::load_dir(&data).unwrap();
    let split = Split::random(200, 0.05, 0).unwrap();
    let net = HashNet::load(&run.join("disc.xmn")).unwrap();
    let lib = evaluate_task(&net, &ds, &split, Direction::ImageToText, &default_ks(190)).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report[0]["reports"][0]["map"].as_f64().unwrap(), lib.map);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("MAP image->text") && table.contains(&format!("{:.3}", lib.map)), "{table}");
}

#[test]
fn eval_on_single_cluster_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--pairs", "60", "--clusters", "1", "--dim-img", "4", "--dim-txt", "3", "--sigma", "0", "--out", s(&data)]);
    let run = dir.path().join("run");
    ok(&[
        "train", "--data", s(&data), "--out", s(&run), "--mode", "baseline", "--dim-common", "8", "--epochs", "1",
        "--pool-size", "20", "--graph-metric", "euclidean",
    ]);
    let out = ok(&["eval", "--data", s(&data), "--run", s(&run), "--out", s(&dir.path().join("eval"))]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.matches("1.000").count(), 2, "{table}");
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    train(&data, &r1, "ugach", &["--threads", "1"]);
    let out = Command::new(env!("CARGO_BIN_EXE_xmash"))
        .args(["train", "--data", s(&data), "--out", s(&r2), "--mode", "ugach", "--dim-common", "16", "--epochs", "2"])
        .args(["--pool-size", "40", "--seed", "3"])
        .env("XMASH_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    for f in ["disc.xmn", "gen.xmn", "history.csv"] {
        assert!(fs::read(r1.join(f)).unwrap() == fs::read(r2.join(f)).unwrap(), "{f}");
    }
}
