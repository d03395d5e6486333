//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criterion 6 trains the full-size acoustic model for 200 epochs and dominates the runtime
//! (roughly half an hour on a desktop CPU). Criteria 7 and 8 reuse the checkpoints it writes.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::Instant;

use emphasis_core::cbhg::{Cbhg, CbhgConfig, GroupedInput, LayerKind};
use emphasis_core::codec::{
    aperiodicity_to_cap, cap_to_aperiodicity, denormalize_spec, f0_decode, f0_encode, istft, normalize_spec, read_wav, stft,
    AcousticFrames, AnalysisConfig,
};
use emphasis_core::corpus::{duration_oracle_rmse, generate_corpus, split_train_val, Corpus, ToyLanguageSpec};
use emphasis_core::frontend::{duration_decode, duration_encode, write_label_file, LabelUtterance, LinguisticSchema};
use emphasis_core::models::{
    acoustic_loss_with_grad, AcousticConfig, AcousticModel, DurationConfig, DurationModel, LossWeights, Stream, ACOUSTIC_HEADS,
};
use emphasis_core::nn::{Mode, Parameterized, SeededRng};
use emphasis_core::trainer::{evaluate_acoustic, evaluate_duration, train_acoustic, train_duration, TrainConfig};
use emphasis_core::vocoder::griffin_lim;
use emphasis_core::Tensor;
use rand::{Rng, SeedableRng};
use serde_json::Value;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emphasis"))
        .env_remove("EMPHASIS_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Result<Value, String> {
    if !out.status.success() {
        return Err(format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr).trim()));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| format!("stdout is not JSON: {e}"))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn corpus(n: usize, seed: u64) -> Corpus {
    generate_corpus(&ToyLanguageSpec::standard(), &LinguisticSchema::default_toy(), &AnalysisConfig::default(), n, seed).unwrap()
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

fn gradients(work: &Path) -> Check {
    let _ = work;
    let t0 = Instant::now();
    let mut worst = Vec::new();
    for (level, threshold) in [("layers", 1e-5), ("models", 1e-4)] {
        let v = ok_json(&bin(&["grad-check", "--level", level]))?;
        for c in v["components"].as_array().unwrap() {
            let e = c["max_rel_error"].as_f64().unwrap();
            ensure!(e < threshold, "{} at {e:e}", c["name"]);
        }
        let max = v["components"].as_array().unwrap().iter().map(|c| c["max_rel_error"].as_f64().unwrap()).fold(0.0, f64::max);
        worst.push(format!("{level} max {max:.1e}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.0}s");
    Ok(format!("{} in {secs:.1}s", worst.join(", ")))
}

fn bank_widths(s: &[(String, LayerKind)], prefix: &str) -> Vec<usize> {
    s.iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(_, k)| match k {
            LayerKind::Conv { width, .. } => *width,
            other => panic!("non-conv layer {other:?} inside a bank"),
        })
        .collect()
}

fn structure() -> Check {
    let schema = LinguisticSchema::default_toy();
    let dur = DurationModel::new(DurationConfig::new(schema.clone(), 1)).map_err(|e| e.to_string())?;
    let ac = AcousticModel::new(AcousticConfig::new(schema.clone(), 1)).map_err(|e| e.to_string())?;
    let (ds, as_) = (dur.trunk.structure(), ac.trunk.structure());

    let one_to_eight: Vec<usize> = (1..=8).collect();
    ensure!(bank_widths(&ds, "bank_phoneme") == one_to_eight && bank_widths(&ds, "bank_emo") == one_to_eight, "duration banks");
    let fives: Vec<usize> = (1..=8).map(|k| 5 * k).collect();
    ensure!(bank_widths(&as_, "bank_phoneme") == fives && bank_widths(&as_, "bank_emo") == fives, "acoustic banks");
    let count = |s: &[(String, LayerKind)], f: fn(&LayerKind) -> bool| s.iter().filter(|(_, k)| f(k)).count();
    ensure!(ds.contains(&("pool".into(), LayerKind::MaxPool { width: 2 })), "duration pool");
    ensure!(as_.contains(&("pool".into(), LayerKind::MaxPool { width: 10 })), "acoustic pool");
    ensure!(count(&ds, |k| matches!(k, LayerKind::Highway { .. })) == 1, "duration highway count");
    ensure!(count(&as_, |k| matches!(k, LayerKind::Highway { .. })) == 2, "acoustic highway count");
    for s in [&ds, &as_] {
        ensure!(
            s.iter().filter(|(n, _)| n.starts_with("bank")).all(|(_, k)| matches!(k, LayerKind::Conv { .. })),
            "batch norm inside a bank"
        );
    }

    let g = GroupedInput::new(random(5, schema.dp(), &mut SeededRng::seed_from_u64(1)), random(5, schema.de(), &mut SeededRng::seed_from_u64(2)))
        .unwrap();
    let (out, _) = dur.trunk.forward(&g, Mode::Infer).unwrap();
    ensure!(out.heads.len() == 1 && out.heads[0].cols() == 64, "duration head width");
    let grus = |s: &[(String, LayerKind)], head: &str| -> Vec<usize> {
        s.iter()
            .filter(|(n, _)| n.starts_with(&format!("head_{head}.")))
            .map(|(_, k)| match k {
                LayerKind::BiGru { hidden, .. } => *hidden,
                _ => 0,
            })
            .collect()
    };
    ensure!(grus(&ds, "duration") == [32, 32], "duration GRU stack");
    for (head, h) in [("spec", 128), ("energy", 16), ("cap", 16), ("lf0", 32)] {
        ensure!(grus(&as_, head) == [h, h], "{head} GRU stack");
    }
    ensure!(ACOUSTIC_HEADS == ["spec", "energy", "cap", "lf0"], "head order");
    ensure!(ac.uv.input_dim() == ac.config.trunk.highway_dim && ac.uv.output_dim() == 1, "U/V path is not a single linear");
    ensure!(!as_.iter().any(|(n, _)| n.contains("uv")), "U/V has its own trunk layers");
    Ok("bank widths, pools, highways and GRU heads as configured; U/V is one linear on the highway output".into())
}

fn isolation() -> Check {
    let mut rng = SeededRng::seed_from_u64(30);
    let schema = LinguisticSchema::default_toy();
    let mut instances = 0;
    for _ in 0..5 {
        let cfg = CbhgConfig::tiny_acoustic();
        let t = rng.gen_range(2..10);
        let (dp, de) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let trunk = Cbhg::new("t", &cfg, dp, de, &mut rng).unwrap();
        let half = cfg.bank_widths.len() * cfg.channels_per_filter;
        let g = GroupedInput::new(random(t, dp, &mut rng), random(t, de, &mut rng)).unwrap();
        let (y, _) = trunk.bank.forward(&g).unwrap();
        let (y_e, _) = trunk.bank.forward(&GroupedInput::new(g.phoneme.clone(), random(t, de, &mut rng)).unwrap()).unwrap();
        let (y_p, _) = trunk.bank.forward(&GroupedInput::new(random(t, dp, &mut rng), g.emo_prosodic.clone()).unwrap()).unwrap();
        ensure!(y.slice_cols(0, half) == y_e.slice_cols(0, half), "phoneme bank saw the other group");
        ensure!(y.slice_cols(half, half) == y_p.slice_cols(half, half), "emotion bank saw the other group");

        let mut m = AcousticModel::new(AcousticConfig::tiny(schema.clone(), rng.gen())).unwrap();
        let (mdp, mde) = m.config.input_dims();
        let g = GroupedInput::new(random(t, mdp, &mut rng), random(t, mde, &mut rng)).unwrap();
        let bands = m.config.analysis.cap_bands();
        let target = AcousticFrames::new(
            random(t, m.config.analysis.bins(), &mut rng),
            (0..t).map(|_| rng.gen_range(-4.0..0.0)).collect(),
            random(t, bands, &mut rng).map(|v| v.abs().min(1.0)),
            (0..t).map(|_| rng.gen_range(4.5..5.8)).collect(),
            (0..t).map(|_| rng.gen_bool(0.6)).collect(),
        )
        .unwrap();
        for stream in Stream::ALL {
            let w = LossWeights::only(stream);
            m.zero_grad();
            let (pred, trace) = m.forward(&g, Mode::Train).unwrap();
            let (_, grad) = acoustic_loss_with_grad(&pred, &target, &w).unwrap();
            m.backward(&trace, &grad, &w).unwrap();
            for (i, name) in ACOUSTIC_HEADS.iter().enumerate() {
                let mut nonzero = false;
                m.trunk.heads[i].visit(&mut |p| nonzero |= p.grad.data().iter().any(|&v| v != 0.0));
                m.outs[i].visit(&mut |p| nonzero |= p.grad.data().iter().any(|&v| v != 0.0));
                let own = format!("{stream:?}").to_lowercase() == *name;
                ensure!(nonzero == own, "{stream:?} loss: head {name} nonzero={nonzero}");
            }
            let mut uv = false;
            m.uv.visit(&mut |p| uv |= p.grad.data().iter().any(|&v| v != 0.0));
            ensure!(uv == (stream == Stream::Uv), "{stream:?} loss reached the U/V linear: {uv}");
        }
        instances += 1;
    }
    Ok(format!("{instances} random instances: groups bit-exact independent, cross-head gradients exactly zero"))
}

fn codec() -> Check {
    let cfg = AnalysisConfig::default();
    let mut rng = SeededRng::seed_from_u64(40);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let log_mag = random(4, 257, &mut rng);
        let energy: Vec<f64> = (0..4).map(|_| rng.gen_range(-8.0..2.0)).collect();
        let back = denormalize_spec(&normalize_spec(&log_mag, &energy).unwrap(), &energy).unwrap();
        worst = worst.max(back.data().iter().zip(log_mag.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let f0: Vec<f64> = (0..50).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(60.0..400.0) }).collect();
        let (lf0, uv) = f0_encode(&f0).unwrap();
        let f0b = f0_decode(&lf0, &uv).unwrap();
        worst = worst.max(f0.iter().zip(&f0b).map(|(a, b)| (a - b).abs() / a.max(1.0)).fold(0.0, f64::max));
        let cap: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let capb = aperiodicity_to_cap(&cap_to_aperiodicity(&cap, &cfg).unwrap(), &cfg).unwrap();
        worst = worst.max(cap.iter().zip(&capb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    ensure!(worst <= 1e-12, "round-trip error {worst:e}");
    let ap = cap_to_aperiodicity(&[0.2, 0.6, 0.9, 1.0], &cfg).unwrap();
    let mid = (ap[cfg.freq_bin(2000.0) as usize] - 0.4).abs();
    ensure!(mid <= 1e-12, "midpoint off by {mid:e}");

    let x: Vec<f64> = (0..8000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = istft(&stft(&x, &cfg).unwrap(), &cfg).unwrap();
    let e = cfg.frame_length;
    let istft_err = x[e..x.len() - e].iter().zip(&y[e..]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(istft_err < 1e-6, "istft error {istft_err:e}");
    for d in 1..=1000u32 {
        ensure!(duration_decode(duration_encode(d).unwrap()) == d, "duration {d}");
    }
    Ok(format!("round trips <= {worst:.1e}, CAP midpoint {mid:.1e}, istft interior {istft_err:.1e}, durations 1..1000 exact"))
}

fn griffin_lim_monotone() -> Check {
    let cfg = AnalysisConfig::default();
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = SeededRng::seed_from_u64(100 + seed);
        let x: Vec<f64> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = stft(&x, &cfg).unwrap();
        let mag = Tensor::from_vec(&[spec.frames, spec.bins], spec.magnitude()).unwrap();
        let (_, rep) = griffin_lim(&mag, &cfg, 30, seed).unwrap();
        ensure!(rep.distance_per_iteration.len() == 30, "iteration count");
        for w in rep.distance_per_iteration.windows(2) {
            ensure!(w[1] <= w[0] * (1.0 + 1e-9), "seed {seed}: {} -> {}", w[0], w[1]);
            worst_ratio = worst_ratio.max(w[1] / w[0]);
        }
    }
    Ok(format!("5 inputs x 30 iterations non-increasing (largest step ratio {worst_ratio:.6})"))
}

fn learning(work: &Path) -> Check {
    let data = corpus(53, 7);
    let (train, val) = split_train_val(&data, 0.05, 7).map_err(|e| e.to_string())?;
    ensure!(train.len() == 50, "train set has {} utterances", train.len());
    let oracle = duration_oracle_rmse(&train, &train).map_err(|e| e.to_string())?;
    ensure!(oracle < 0.15, "lookup-table oracle {oracle:.3} already misses the duration threshold");

    let t0 = Instant::now();
    let cfg = |ckpt: &str| TrainConfig { epochs: 200, seed: 7, patience: 200, checkpoint: Some(work.join(ckpt)), ..TrainConfig::default() };
    let mut dm = DurationModel::new(DurationConfig::new(data.schema.clone(), 7)).unwrap();
    let dur = train_duration(&mut dm, &train, &val, &cfg("duration.ckpt")).map_err(|e| e.to_string())?;
    let dmetrics = evaluate_duration(&dur.model, &train).map_err(|e| e.to_string())?;

    let acfg = AcousticConfig { analysis: data.analysis.clone(), ..AcousticConfig::new(data.schema.clone(), 7) };
    let mut am = AcousticModel::new(acfg).unwrap();
    let ac = train_acoustic(&mut am, &train, &val, &cfg("acoustic.ckpt")).map_err(|e| e.to_string())?;
    let ametrics = evaluate_acoustic(&ac.model, &train).map_err(|e| e.to_string())?;
    let minutes = t0.elapsed().as_secs_f64() / 60.0;

    let h = &ac.history;
    let first = h.epochs[0].train.spec.unwrap();
    let best = h.epochs[h.best_epoch - 1].train.spec.unwrap();
    let ratio = best / first;
    let summary = format!(
        "duration log-RMSE {:.3} (oracle {oracle:.3}); spec {best:.3}/{first:.3} = {:.0}% of epoch 1; U/V {:.2}%; voiced F0 RMSE {:.1} Hz; {minutes:.1} min",
        dmetrics.log_rmse,
        100.0 * ratio,
        100.0 * ametrics.uv_accuracy,
        ametrics.voiced_f0_rmse_hz
    );
    ensure!(dmetrics.log_rmse < 0.15, "{summary}");
    ensure!(ratio < 0.5, "{summary}");
    ensure!(ametrics.uv_accuracy > 0.95, "{summary}");
    ensure!(ametrics.voiced_f0_rmse_hz < 20.0, "{summary}");
    if minutes > 30.0 {
        return Ok(format!("{summary} (over the 30 min runtime target)"));
    }
    Ok(summary)
}

fn label_file(work: &Path) -> PathBuf {
    let held_out = corpus(1, 99);
    let u = &held_out.utterances[0];
    let path = work.join("labels10.json");
    write_label_file(&path, &[LabelUtterance::from_labels("held_out", &u.labels[..10], &held_out.schema, None)]).unwrap();
    path
}

fn end_to_end(work: &Path) -> Check {
    let labels = label_file(work);
    let synth = |out: &Path, seed: &str| {
        bin(&[
            "synth",
            "--duration-ckpt",
            s(&work.join("duration.ckpt")),
            "--acoustic-ckpt",
            s(&work.join("acoustic.ckpt")),
            "--labels",
            s(&labels),
            "--out",
            s(out),
            "--seed",
            seed,
        ])
    };
    let (a, b) = (work.join("e2e_a.wav"), work.join("e2e_b.wav"));
    let v = ok_json(&synth(&a, "3"))?;
    ok_json(&synth(&b, "3"))?;
    ensure!(v["phonemes"] == 10, "phoneme count {}", v["phonemes"]);
    let frames = v["predicted_frames"].as_u64().unwrap() as usize;
    let (x, sr) = read_wav(&a).map_err(|e| e.to_string())?;
    let shift = (sr as f64 * 0.005) as usize;
    ensure!(x.len().abs_diff(frames * shift) <= shift, "{} samples for {frames} frames", x.len());
    ensure!(x.iter().all(|v| v.is_finite()), "non-finite samples");
    ensure!(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap(), "same seed gave different WAV bytes");
    Ok(format!("{frames} frames -> {} samples ({:.3} s), byte-identical rerun", x.len(), x.len() as f64 / sr as f64))
}

fn benchmark(work: &Path) -> Check {
    let labels = label_file(work);
    let v = ok_json(&bin(&[
        "bench",
        "--duration-ckpt",
        s(&work.join("duration.ckpt")),
        "--acoustic-ckpt",
        s(&work.join("acoustic.ckpt")),
        "--labels",
        s(&labels),
        "--repeats",
        "5",
    ]))?;
    ensure!(v["version"] == 1 && v["runs"].as_array().map(|r| r.len()) == Some(5), "report shape");
    let stages: f64 = ["duration", "upsample", "acoustic", "vocoder"].iter().map(|k| v["stages"][k].as_f64().unwrap()).sum();
    let total = v["total_seconds"].as_f64().unwrap();
    let gap = (stages - total).abs() / total;
    ensure!(gap <= 0.01, "stage sum off by {:.2}%", 100.0 * gap);
    let rtf = v["real_time_ratio"].as_f64().unwrap();
    ensure!(rtf > 0.0, "ratio {rtf}");
    Ok(format!("real-time ratio {rtf:.3} (single thread, not asserted), stage accounting gap {:.1e}", gap))
}

fn ablation(work: &Path) -> Check {
    let dir = work.join("ablation_corpus");
    ok_json(&bin(&["gen-corpus", "--out", s(&dir), "--utterances", "30", "--seed", "5"]))?;
    let out = work.join("ablation.json");
    let v = ok_json(&bin(&["ablate", "--corpus", s(&dir), "--epochs", "3", "--val-fraction", "0.3", "--out", s(&out)]))?;
    ensure!(v["version"] == 1, "version");
    let gap = v["parameter_gap"].as_f64().unwrap();
    ensure!(gap < 0.05, "parameter gap {gap}");
    let mut detail = Vec::new();
    for variant in ["grouped", "single"] {
        let by = v[variant]["metrics"]["lf0_rmse_by_emotion"].as_object().ok_or("missing per-emotion LF0")?;
        ensure!(!by.is_empty() && by.values().all(|x| x.as_f64().is_some_and(f64::is_finite)), "{variant} per-emotion LF0");
        detail.push(format!("{variant} {} params", v[variant]["parameters"]));
    }
    Ok(format!("{}, gap {:.2}%, per-emotion LF0 for both", detail.join(" / "), 100.0 * gap))
}

fn determinism(work: &Path) -> Check {
    let (a, b) = (work.join("det_a"), work.join("det_b"));
    for d in [&a, &b] {
        ok_json(&bin(&["gen-corpus", "--out", s(d), "--utterances", "12", "--seed", "13"]))?;
    }
    ensure!(tree(&a) == tree(&b), "corpora differ");
    for (stage, epochs, size) in [("duration", "4", "full"), ("acoustic", "2", "tiny")] {
        let mut outputs = Vec::new();
        for run in ["x", "y"] {
            let ckpt = work.join(format!("det_{stage}_{run}.ckpt"));
            ok_json(&bin(&[
                "train", "--stage", stage, "--corpus", s(&a), "--out", s(&ckpt), "--epochs", epochs, "--seed", "13", "--model-size", size,
            ]))?;
            let hist = std::fs::read(work.join(format!("det_{stage}_{run}.ckpt.history.json"))).unwrap();
            outputs.push((hist, std::fs::read(&ckpt).unwrap()));
        }
        ensure!(outputs[0].0 == outputs[1].0, "{stage} loss histories differ");
        ensure!(outputs[0].1 == outputs[1].1, "{stage} checkpoints differ");
    }
    Ok("corpora, loss histories and checkpoints byte-identical across reruns".into())
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Check + '_>)> = vec![
        (1, "gradient correctness", Box::new(|| gradients(w))),
        (2, "structural fidelity", Box::new(structure)),
        (3, "isolation invariants", Box::new(isolation)),
        (4, "codec round trips", Box::new(codec)),
        (5, "Griffin-Lim monotonicity", Box::new(griffin_lim_monotone)),
        (6, "learning (overfit run)", Box::new(|| learning(w))),
        (7, "end-to-end pipeline", Box::new(|| end_to_end(w))),
        (8, "benchmark harness", Box::new(|| benchmark(w))),
        (9, "ablation harness", Box::new(|| ablation(w))),
        (10, "determinism", Box::new(|| determinism(w))),
    ];
    // ACCEPTANCE_ONLY=2,3,5 runs a subset; 7 and 8 need the checkpoints 6 writes.
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
