use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stylemix::corpus::synthetic::SyntheticStyles;
use stylemix::model::load_checkpoint;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stylemix"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus1: PathBuf,
    corpus2: PathBuf,
    vocab: PathBuf,
}

fn fixture(per_style: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let (neg, pos) = SyntheticStyles.generate(per_style, 11);
    let corpus1 = root.join("neg.txt");
    let corpus2 = root.join("pos.txt");
    fs::write(&corpus1, neg.join("\n") + "\n").unwrap();
    fs::write(&corpus2, pos.join("\n") + "\n").unwrap();
    let vocab = root.join("vocab.txt");
    ok(&["build-vocab", "--corpus1", p(&corpus1), "--corpus2", p(&corpus2), "--out", p(&vocab)]);
    Fixture {
        _dir: dir,
        root,
        corpus1,
        corpus2,
        vocab,
    }
}

fn train_args<'a>(f: &'a Fixture, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut a = vec![
        "train",
        "--corpus1",
        p(&f.corpus1),
        "--corpus2",
        p(&f.corpus2),
        "--vocab",
        p(&f.vocab),
        "--out-dir",
        out,
        "--dim",
        "8",
        "--set",
        "validate=false",
        "--set",
        "batch_size=16",
    ];
    a.extend_from_slice(extra);
    a
}

fn train(f: &Fixture, out: &Path, extra: &[&str]) -> PathBuf {
    let stdout = ok(&train_args(f, p(out), extra));
    PathBuf::from(stdout.trim())
}

#[test]
fn build_vocab_puts_specials_first_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    fs::write(&a, "the food was bad\nthe staff was rude\ni hate it\n").unwrap();
    fs::write(&b, "the food was good\nthe staff was nice\ni love it\n").unwrap();
    let out = dir.path().join("v.txt");
    ok(&["build-vocab", "--corpus1", p(&a), "--corpus2", p(&b), "--out", p(&out)]);
    let first = fs::read(&out).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(&lines[..4], &["<pad>", "<bos>", "<eos>", "<unk>"]);
    assert!(lines.contains(&"food") && lines.contains(&"love"));
    ok(&["build-vocab", "--corpus1", p(&a), "--corpus2", p(&b), "--out", p(&out)]);
    assert_eq!(fs::read(&out).unwrap(), first);

    let missing = dir.path().join("nope.txt");
    let r = run(&["build-vocab", "--corpus1", p(&missing), "--corpus2", p(&b), "--out", p(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("nope.txt"));
}

#[test]
fn train_writes_one_log_line_per_epoch_and_a_loadable_checkpoint() {
    let f = fixture(20);
    let out = f.root.join("runs");
    let run_dir = train(&f, &out, &["--epochs", "50"]);
    assert!(run_dir.starts_with(&out));
    assert!(run_dir.file_name().unwrap().to_str().unwrap().starts_with("run-"));
    let log = fs::read_to_string(run_dir.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 50);
    let header = fs::read_to_string(run_dir.join("train.columns")).unwrap();
    assert_eq!(header.trim().split('\t').count(), log.lines().next().unwrap().split('\t').count());
    let (params, meta) = load_checkpoint(&run_dir.join("final.ckpt")).unwrap();
    assert_eq!(meta.trained_epochs, 50);
    assert_eq!(params.config.dim, 8);
    assert!(run_dir.join("epoch-0010.ckpt").exists());
    let echo = fs::read_to_string(run_dir.join("config.txt")).unwrap();
    assert!(echo.contains("epochs = 50"));
    assert!(echo.contains("learning_rate = "));
}

#[test]
fn disabled_terms_are_absent_from_the_log_and_total() {
    let f = fixture(20);
    let run_dir = train(&f, &f.root.join("runs"), &["--epochs", "2", "--disable-loss", "rec"]);
    let header = fs::read_to_string(run_dir.join("train.columns")).unwrap();
    let cols: Vec<&str> = header.trim().split('\t').collect();
    for line in fs::read_to_string(run_dir.join("train.log")).unwrap().lines() {
        let cells: Vec<&str> = line.split('\t').collect();
        let get = |name: &str| cells[cols.iter().position(|c| *c == name).unwrap()];
        assert_eq!(get("rec1"), "-");
        assert_eq!(get("rec2"), "-");
        let parts: f64 = ["back1", "back2", "mse1", "mse2", "cls1", "cls2", "adv1_g", "adv2_g"]
            .iter()
            .map(|n| get(n).parse::<f64>().unwrap())
            .sum();
        let total: f64 = get("total_g").parse().unwrap();
        assert!((total - parts).abs() < 1e-5, "{total} vs {parts}");
    }
    assert!(fs::read_to_string(run_dir.join("config.txt"))
        .unwrap()
        .contains("disable_loss = rec"));
}

#[test]
fn same_config_gives_identical_checkpoints() {
    let f = fixture(20);
    let a = train(&f, &f.root.join("a"), &["--epochs", "3"]);
    let b = train(&f, &f.root.join("b"), &["--epochs", "3"]);
    assert_eq!(a.file_name(), b.file_name(), "run directories are named by config hash");
    assert_eq!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(b.join("final.ckpt")).unwrap());
    let c = train(&f, &f.root.join("a"), &["--epochs", "3", "--seed", "9"]);
    assert_ne!(a, c);
}

#[test]
fn config_file_is_read_and_validated_before_training() {
    let f = fixture(10);
    let cfg = f.root.join("train.cfg");
    fs::write(&cfg, "# tiny run\nepochs = 2\ndim = 8 # small\nvalidate = false\n").unwrap();
    let out = f.root.join("runs");
    let mut args = vec![
        "train",
        "--config",
        p(&cfg),
        "--corpus1",
        p(&f.corpus1),
        "--corpus2",
        p(&f.corpus2),
        "--vocab",
        p(&f.vocab),
        "--out-dir",
        p(&out),
    ];
    let dir = PathBuf::from(ok(&args).trim());
    assert_eq!(fs::read_to_string(dir.join("train.log")).unwrap().lines().count(), 2);

    fs::write(&cfg, "epochs = 0\nvalidate = false\n").unwrap();
    let bad_out = f.root.join("bad");
    args[10] = p(&bad_out);
    let r = run(&args);
    assert!(!r.status.success());
    assert!(!bad_out.exists(), "nothing is written when validation fails");
    fs::write(&cfg, "epochz = 3\n").unwrap();
    let r = run(&args);
    assert!(String::from_utf8_lossy(&r.stderr).contains("epochz"));
}

fn transfer_args<'a>(f: &'a Fixture, ckpt: &'a str, vocab: &'a str, input: &'a str, out: &'a str, seed: &'a str) -> Vec<&'a str> {
    vec![
        "transfer",
        "--checkpoint",
        ckpt,
        "--vocab",
        vocab,
        "--input",
        input,
        "--source",
        "1",
        "--target-corpus",
        p(&f.corpus2),
        "--variants",
        "5",
        "--seed",
        seed,
        "--out",
        out,
    ]
}

#[test]
fn transfer_writes_variants_reproducibly_and_checks_the_vocabulary() {
    let f = fixture(20);
    let run_dir = train(&f, &f.root.join("runs"), &["--epochs", "2"]);
    let ckpt = run_dir.join("final.ckpt");
    let input = f.root.join("inputs.txt");
    let lines: Vec<String> = fs::read_to_string(&f.corpus1).unwrap().lines().take(10).map(String::from).collect();
    fs::write(&input, lines.join("\n")).unwrap();

    let out_a = f.root.join("a.tsv");
    let out_b = f.root.join("b.tsv");
    ok(&transfer_args(&f, p(&ckpt), p(&f.vocab), p(&input), p(&out_a), "7"));
    ok(&transfer_args(&f, p(&ckpt), p(&f.vocab), p(&input), p(&out_b), "7"));
    let a = fs::read_to_string(&out_a).unwrap();
    assert_eq!(a.lines().count(), 50);
    assert_eq!(a, fs::read_to_string(&out_b).unwrap());
    assert!(a.lines().all(|l| l.split('\t').count() == 4));
    assert!(f.root.join("a.tsv.config").exists());

    let other_vocab = f.root.join("other.txt");
    fs::write(&other_vocab, fs::read_to_string(&f.vocab).unwrap() + "zebra\n").unwrap();
    let r = run(&transfer_args(&f, p(&ckpt), p(&other_vocab), p(&input), p(&out_a), "7"));
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    let expected = stylemix::corpus::Vocabulary::load(&f.vocab).unwrap().fingerprint();
    let found = stylemix::corpus::Vocabulary::load(&other_vocab).unwrap().fingerprint();
    assert!(err.contains(&expected) && err.contains(&found), "{err}");
}

fn parse_report(text: &str) -> std::collections::BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn eval_of_copied_inputs_keeps_content_and_misses_style() {
    let f = fixture(300);
    let preds = f.root.join("copy.tsv");
    let inputs: Vec<String> = fs::read_to_string(&f.corpus1)
        .unwrap()
        .lines()
        .filter(|l| l.split_whitespace().count() >= 4)
        .take(20)
        .map(String::from)
        .collect();
    let rows: String = inputs
        .iter()
        .flat_map(|s| (0..5).map(move |v| format!("{s}\t{v}\t0\t{s}\n")))
        .collect();
    fs::write(&preds, rows).unwrap();
    let emb = f.root.join("emb.txt");
    let cls = f.root.join("cls.json");
    let report = f.root.join("report.txt");
    let base = [
        "eval",
        "--predictions",
        p(&preds),
        "--target",
        "2",
        "--corpus1",
        p(&f.corpus1),
        "--corpus2",
        p(&f.corpus2),
        "--embeddings",
        p(&emb),
        "--classifier",
        p(&cls),
        "--out",
        p(&report),
    ];
    let r = run(&base);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("--train-missing"));

    let mut args = base.to_vec();
    args.push("--train-missing");
    ok(&args);
    assert!(emb.exists() && cls.exists());
    let kv = parse_report(&fs::read_to_string(&report).unwrap());
    let num = |k: &str| kv[k].parse::<f64>().unwrap();
    assert!(num("content_score") > 99.0);
    assert!(num("style_score") < 5.0);
    assert_eq!(num("bleu"), 100.0);
    for k in ["diversity_2", "diversity_3", "diversity_4"] {
        assert_eq!(num(k), 0.0);
    }
    for k in ["style_score", "content_score", "bleu", "bleu_p1", "bleu_p2", "bleu_p3", "bleu_p4"] {
        assert!((0.0..=100.0).contains(&num(k)), "{k}");
    }
    // saved prerequisites are reused without retraining
    ok(&base);
}

#[test]
fn weak_classifier_withholds_the_style_score() {
    let f = fixture(60);
    let cls = f.root.join("weak.json");
    ok(&[
        "train-classifier",
        "--corpus1",
        p(&f.corpus1),
        "--corpus2",
        p(&f.corpus2),
        "--epochs",
        "0",
        "--out",
        p(&cls),
    ]);
    let emb = f.root.join("emb.txt");
    let stdout = ok(&[
        "train-embeddings",
        "--corpus1",
        p(&f.corpus1),
        "--corpus2",
        p(&f.corpus2),
        "--dim",
        "8",
        "--out",
        p(&emb),
    ]);
    assert!(stdout.contains("dimension 8"));
    let preds = f.root.join("p.tsv");
    fs::write(&preds, "the food was bad\t0\t0\tthe food was good\n").unwrap();
    let report = f.root.join("r.txt");
    let out = run(&[
        "eval",
        "--predictions",
        p(&preds),
        "--target",
        "2",
        "--corpus1",
        p(&f.corpus1),
        "--corpus2",
        p(&f.corpus2),
        "--embeddings",
        p(&emb),
        "--classifier",
        p(&cls),
        "--out",
        p(&report),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("withheld"));
    assert!(fs::read_to_string(&report).unwrap().contains("style_score=withheld"));
}
