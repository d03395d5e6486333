use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use emphasis_core::codec::read_wav;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_emphasis"));
    c.env_remove("EMPHASIS_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small corpus, tiny checkpoints and a 10-phoneme label file, built once.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let corpus = root.join("corpus");
        json(&run(&["gen-corpus", "--out", s(&corpus), "--utterances", "12", "--seed", "3"]));
        for stage in ["duration", "acoustic"] {
            let ckpt = root.join(format!("{stage}.ckpt"));
            json(&run(&[
                "train", "--stage", stage, "--corpus", s(&corpus), "--out", s(&ckpt), "--epochs", "2", "--model-size", "tiny",
            ]));
        }
        let mut labels: Value = serde_json::from_slice(&std::fs::read(corpus.join("u0001.json")).unwrap()).unwrap();
        let utt = &mut labels[0];
        utt["phonemes"].as_array_mut().unwrap().truncate(10);
        utt.as_object_mut().unwrap().remove("frames");
        std::fs::write(root.join("labels.json"), labels.to_string()).unwrap();
        Fixture { _dir: dir, root }
    })
}

fn synth(f: &Fixture, out: &Path, vocoder: &str, seed: &str) -> Value {
    json(&run(&[
        "synth",
        "--duration-ckpt",
        s(&f.path("duration.ckpt")),
        "--acoustic-ckpt",
        s(&f.path("acoustic.ckpt")),
        "--labels",
        s(&f.path("labels.json")),
        "--out",
        s(out),
        "--vocoder",
        vocoder,
        "--seed",
        seed,
    ]))
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_corpus_is_reproducible_and_reports_emotions() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    json(&run(&["gen-corpus", "--out", s(&a), "--utterances", "10", "--seed", "7"]));
    json(&run(&["gen-corpus", "--out", s(&b), "--utterances", "10", "--seed", "7"]));
    assert_eq!(tree(&a), tree(&b));

    let c = dir.path().join("c");
    let v = json(&run(&["gen-corpus", "--out", s(&c), "--utterances", "100", "--seed", "1"]));
    assert_eq!(v["emotions"]["declarative"], 60);
    assert_eq!(v["emotions"]["interrogative"], 30);
    assert_eq!(v["emotions"]["exclamatory"], 10);
    assert_eq!(v["version"], 1);
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = bin().env("EMPHASIS_SEED", "11").args(["gen-corpus", "--out", s(&a), "--utterances", "3"]).output().unwrap();
    assert_eq!(json(&out)["seed"], 11);
    json(&run(&["gen-corpus", "--out", s(&b), "--utterances", "3", "--seed", "11"]));
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn usage_errors_exit_2() {
    let out = run(&["gen-corpus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = run(&["train", "--stage", "vocoder", "--corpus", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_writes_checkpoint_and_identical_history_on_rerun() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let corpus = f.path("corpus");
    let mut histories = Vec::new();
    for name in ["a", "b"] {
        let ckpt = dir.path().join(format!("{name}.ckpt"));
        let v = json(&run(&[
            "train", "--stage", "duration", "--corpus", s(&corpus), "--out", s(&ckpt), "--epochs", "3", "--model-size", "tiny",
        ]));
        assert!(v["final_val_loss"].as_f64().unwrap().is_finite());
        assert!(ckpt.exists());
        histories.push(std::fs::read(dir.path().join(format!("{name}.ckpt.history.json"))).unwrap());
    }
    assert_eq!(histories[0], histories[1]);
}

#[test]
fn synth_length_matches_predicted_frames_and_is_deterministic() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (a, b, gl) = (dir.path().join("a.wav"), dir.path().join("b.wav"), dir.path().join("gl.wav"));
    let v = synth(f, &a, "sf", "5");
    assert_eq!(v["phonemes"], 10);
    let frames = v["predicted_frames"].as_u64().unwrap() as usize;
    let (x, sr) = read_wav(&a).unwrap();
    assert_eq!(sr, 16_000);
    assert!(x.len().abs_diff(frames * 80) <= 80, "{} samples for {frames} frames", x.len());
    assert!(x.iter().all(|v| v.is_finite()));

    synth(f, &b, "sf", "5");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    synth(f, &gl, "gl", "5");
    let (y, _) = read_wav(&gl).unwrap();
    assert_eq!(y.len(), x.len());
    assert_ne!(x, y);
}

#[test]
fn synth_schema_mismatch_exits_5_naming_the_feature() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut labels: Value = serde_json::from_slice(&std::fs::read(f.path("labels.json")).unwrap()).unwrap();
    labels[0]["phonemes"][3]["speaker_mood"] = 1.into();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, labels.to_string()).unwrap();
    let out = run(&[
        "synth",
        "--duration-ckpt",
        s(&f.path("duration.ckpt")),
        "--acoustic-ckpt",
        s(&f.path("acoustic.ckpt")),
        "--labels",
        s(&bad),
        "--out",
        s(&dir.path().join("x.wav")),
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("speaker_mood"));
}

#[test]
fn grad_check_covers_every_layer_and_flags_corruption() {
    let v = json(&run(&["grad-check", "--level", "layers"]));
    let names: Vec<&str> = v["components"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        ["linear", "conv1d", "batchnorm_train", "batchnorm_infer", "maxpool", "highway", "gru_forward", "gru_backward"]
    );
    assert_eq!(v["passed"], true);

    let out = run(&["grad-check", "--level", "layers", "--inject-fault", "gru_backward"]);
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gru_backward"));
}

#[test]
fn bench_report_accounts_for_its_time() {
    let f = fixture();
    let v = json(&run(&[
        "bench",
        "--duration-ckpt",
        s(&f.path("duration.ckpt")),
        "--acoustic-ckpt",
        s(&f.path("acoustic.ckpt")),
        "--labels",
        s(&f.path("labels.json")),
        "--repeats",
        "3",
    ]));
    assert_eq!(v["version"], 1);
    assert_eq!(v["runs"].as_array().unwrap().len(), 3);
    assert_eq!(v["warmup_runs"], 1);
    let stages: f64 = ["duration", "upsample", "acoustic", "vocoder"].iter().map(|k| v["stages"][k].as_f64().unwrap()).sum();
    let total = v["total_seconds"].as_f64().unwrap();
    assert!((stages - total).abs() <= 0.01 * total);
    assert!(v["real_time_ratio"].as_f64().unwrap() > 0.0);
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn eval_and_ablate_emit_reports() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval.json");
    let v = json(&run(&[
        "eval",
        "--duration-ckpt",
        s(&f.path("duration.ckpt")),
        "--acoustic-ckpt",
        s(&f.path("acoustic.ckpt")),
        "--corpus",
        s(&f.path("corpus")),
        "--out",
        s(&out),
    ]));
    assert_eq!(v["utterances"], 12);
    assert_eq!(serde_json::from_slice::<Value>(&std::fs::read(&out).unwrap()).unwrap(), v);

    let missing = run(&[
        "eval",
        "--duration-ckpt",
        s(&f.path("duration.ckpt")),
        "--acoustic-ckpt",
        s(&f.path("acoustic.ckpt")),
        "--corpus",
        s(&dir.path().join("nothing-here")),
    ]);
    assert_eq!(missing.status.code(), Some(3));

    let v = json(&run(&["ablate", "--corpus", s(&f.path("corpus")), "--epochs", "1", "--model-size", "tiny"]));
    assert_eq!(v["grouped"]["bank_layout"]["kind"], "grouped");
    assert_eq!(v["single"]["bank_layout"]["kind"], "single");
    assert!(v["single"]["metrics"]["lf0_rmse_by_emotion"].is_object());
    assert!(v["parameter_gap"].as_f64().unwrap() < 0.05);
}
