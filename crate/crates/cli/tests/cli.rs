use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use slu_core::featurizer::{write_wav, AudioClip};

fn slu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slu")).args(args).env_remove("SLU_SEED").output().expect("runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            out.push((path.clone(), fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

fn assert_same_files(dir: &Path, before: &[(PathBuf, Vec<u8>)]) {
    let after = files(dir);
    let names = |v: &[(PathBuf, Vec<u8>)]| v.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>();
    assert_eq!(names(&after), names(before));
    for ((path, a), (_, b)) in after.iter().zip(before) {
        assert!(a == b, "{} changed", path.display());
    }
}

#[test]
fn synth_is_deterministic_and_guards_its_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ladder");
    let first = json(&slu(&["synth", "--seed", "7", "--out", p(&out)]));
    assert_eq!(first["seed"], 7);
    let tasks = first["tasks"].as_array().unwrap();
    assert_eq!(tasks.len(), 5);
    for t in tasks {
        let lines = fs::read_to_string(t["train"].as_str().unwrap()).unwrap().lines().count();
        assert_eq!(lines as u64, t["counts"]["train"].as_u64().unwrap());
    }
    let before = files(&out);

    let refused = slu(&["synth", "--seed", "7", "--out", p(&out)]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));

    json(&slu(&["synth", "--seed", "7", "--out", p(&out), "--force"]));
    assert_same_files(&out, &before);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_slu"))
        .args(["synth", "--out", p(&dir.path().join("l"))])
        .env("SLU_SEED", "13")
        .output()
        .unwrap();
    assert_eq!(json(&out)["seed"], 13);
}

fn write_refs(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let inv = dir.join("inv.tsv");
    fs::write(&inv, "nb_room\t\u{e010}\nroom_type\t\u{e011}\n__close__\t\u{e000}\n__star__\t\u{e001}\n").unwrap();
    let reference = dir.join("ref.tsv");
    fs::write(
        &reference,
        "u1\ti want \u{e010} two \u{e000} \u{e011} double rooms \u{e000}\n\
         u2\t\u{e010} one \u{e000} please\n\
         u3\tno concepts here\n",
    )
    .unwrap();
    let hyp = dir.join("hyp.tsv");
    // u1 loses room_type, u2 gets the value wrong, u3 gains a spurious concept
    fs::write(
        &hyp,
        "u3\tno \u{e011} concepts \u{e000} here\n\
         u1\ti want \u{e010} two \u{e000} double rooms\n\
         u2\t\u{e010} on \u{e000} please\n",
    )
    .unwrap();
    (inv, reference, hyp)
}

#[test]
fn score_matches_hand_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let (inv, reference, hyp) = write_refs(dir.path());
    let per_utt = dir.path().join("per.tsv");
    let v = json(&slu(&["score", "--ref", p(&reference), "--hyp", p(&hyp), "--inventory", p(&inv), "--ci", "--per-utterance", p(&per_utt)]));
    // concepts: 3 in the reference; one deletion, one insertion
    assert!((v["cer"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!((v["S"].as_u64(), v["I"].as_u64(), v["D"].as_u64(), v["N"].as_u64()), (Some(0), Some(1), Some(1), Some(3)));
    // pairs: additionally (nb_room, one) -> (nb_room, on) substitutes
    assert!((v["cver"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    // per-utterance CER 0.5, 0, 1 (empty reference counts its insertions)
    let (mean, sd) = (0.5, 0.5f64);
    let t = 4.302652729911275;
    assert!((v["ci95"]["cer"].as_f64().unwrap() - t * sd / 3f64.sqrt()).abs() < 1e-9, "{mean} {}", v["ci95"]);
    assert_eq!(fs::read_to_string(&per_utt).unwrap().lines().count(), 4);

    let same = json(&slu(&["score", "--ref", p(&reference), "--hyp", p(&reference), "--inventory", p(&inv), "--ci"]));
    for k in ["wer", "cer", "cver"] {
        assert_eq!(same[k], 0.0);
        assert_eq!(same["ci95"][k], 0.0);
    }
}

#[test]
fn score_lists_mismatched_ids() {
    let dir = tempfile::tempdir().unwrap();
    let (inv, reference, _) = write_refs(dir.path());
    let hyp = dir.path().join("short.tsv");
    fs::write(&hyp, "u1\tx\nu9\ty\n").unwrap();
    let out = slu(&["score", "--ref", p(&reference), "--hyp", p(&hyp), "--inventory", p(&inv)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("u2") && err.contains("u3") && err.contains("u9"), "{err}");
}

#[test]
fn settings_file_fills_missing_flags_only() {
    let dir = tempfile::tempdir().unwrap();
    let (inv, reference, hyp) = write_refs(dir.path());
    let settings = dir.path().join("settings.toml");
    fs::write(&settings, format!("[score]\nci = true\ninventory = {:?}\nhyp = {:?}\n", p(&inv), p(&reference))).unwrap();
    let v = json(&slu(&["--settings", p(&settings), "score", "--ref", p(&reference), "--hyp", p(&hyp)]));
    assert!(v["ci95"].is_object());
    // --hyp on the command line wins over the file, so this is not a self-score
    assert!(v["cer"].as_f64().unwrap() > 0.0);
    assert_eq!(v["settings"]["command"]["score"]["ci"], true);
}

#[test]
fn featurize_directory_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let wavs = dir.path().join("wav");
    fs::create_dir(&wavs).unwrap();
    for i in 0..3 {
        let samples = (0..1600).map(|n| ((n * (i + 1)) as f64 * 0.01).sin() * 0.5).collect();
        write_wav(&wavs.join(format!("u{i}.wav")), &AudioClip { id: format!("u{i}"), samples, sample_rate: 16000 }).unwrap();
    }
    fs::write(wavs.join("u0.txt"), "hello there\n").unwrap();
    let out = dir.path().join("feat");
    let v = json(&slu(&["featurize", "--wav-dir", p(&wavs), "--out-dir", p(&out)]));
    assert_eq!(v["written"], 3);
    let manifest = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    assert!(manifest.contains("hello there"));
    assert!(manifest.contains("\"duration_frames\":9"));
    let before = files(&out);

    let again = json(&slu(&["featurize", "--wav-dir", p(&wavs), "--out-dir", p(&out)]));
    assert_eq!(again["up_to_date"], 3);
    assert_same_files(&out, &before);

    fs::write(wavs.join("broken.wav"), b"RIFF nonsense").unwrap();
    let bad = slu(&["featurize", "--wav-dir", p(&wavs), "--out-dir", p(&out)]);
    assert!(!bad.status.success());
    let v: Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_eq!(v["failed"].as_array().unwrap().len(), 1);
    assert!(v["failed"][0]["file"].as_str().unwrap().ends_with("broken.wav"));
}

#[test]
fn lm_train_and_perplexity() {
    let dir = tempfile::tempdir().unwrap();
    let text = dir.path().join("text.txt");
    fs::write(&text, "a b c\na b\nb c a\n").unwrap();
    let arpa = dir.path().join("lm.arpa");
    let v = json(&slu(&["lm", "train", "--text", p(&text), "--order", "2", "--out", p(&arpa)]));
    assert_eq!(v["sentences"], 3);
    assert!(fs::read_to_string(&arpa).unwrap().starts_with("\\data\\"));
    let v = json(&slu(&["lm", "perplexity", "--text", p(&text), "--lm", p(&arpa)]));
    let ppl = v["perplexity"].as_f64().unwrap();
    assert!(ppl > 1.0 && ppl < 6.0, "{ppl}");
    assert_eq!(v["tokens"], 11);
}

/// Trains a small model to memorize four utterances, then decodes them.
#[test]
fn chain_then_decode_recovers_memorized_targets() {
    let dir = tempfile::tempdir().unwrap();
    let ladder = dir.path().join("ladder");
    json(&slu(&["synth", "--seed", "3", "--out", p(&ladder)]));
    let asr = ladder.join("asr");
    let train: Vec<String> = fs::read_to_string(asr.join("train.jsonl")).unwrap().lines().take(4).map(str::to_string).collect();
    fs::write(asr.join("tiny.jsonl"), train.join("\n") + "\n").unwrap();

    let cfg = dir.path().join("chain.toml");
    fs::write(
        &cfg,
        r#"output_dir = "run"

[model]
input_dim = 16
recurrent_layers = 1
hidden = 24
batch_norm = true
fc_size = 24
clip = 20.0
bn_momentum = 0.1
bn_eps = 1e-5
conv = [{ channels = 2, kernel = [3, 5], stride = [2, 2], padding = [1, 2] }]

[[stage]]
name = "memorize"
task = "asr"
train = "ladder/asr/tiny.jsonl"
dev = "ladder/asr/tiny.jsonl"
epochs = 200
lr = 0.01
patience = 0
batch_size = 4
"#,
    )
    .unwrap();
    let v = json(&slu(&["chain", "--config", p(&cfg), "--seed", "2"]));
    assert_eq!(v["seed"], 2);
    assert_eq!(v["report"]["complete"], true);
    let ckpt = dir.path().join("run/memorize/best.ckpt");
    assert!(ckpt.exists());

    let manifest = asr.join("tiny.jsonl");
    let decode = |extra: &[&str]| -> Vec<Value> {
        let mut args = vec!["decode", "--ckpt", p(&ckpt), "--manifest", p(&manifest)];
        args.extend_from_slice(extra);
        let out = slu(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    };
    let greedy = decode(&["--beam", "0"]);
    assert_eq!(greedy[0]["settings"]["mode"], "greedy");
    let beam = decode(&["--beam", "16", "--nbest", "3"]);
    for line in &train {
        let entry: Value = serde_json::from_str(line).unwrap();
        let id = &entry["id"];
        let g = greedy.iter().find(|h| &h["id"] == id).unwrap();
        assert_eq!(g["text"], entry["target_text"]);
        let ranked: Vec<&Value> = beam.iter().filter(|h| &h["id"] == id).collect();
        assert_eq!(ranked[0]["text"], entry["target_text"]);
        for w in ranked.windows(2) {
            assert!(w[0]["combined"].as_f64() >= w[1]["combined"].as_f64());
        }
    }

    // a plain-transcription head cannot be used with a tagged inventory
    let inv = ladder.join("sf_a/inventory.tsv");
    let out = slu(&["decode", "--ckpt", p(&ckpt), "--manifest", p(&manifest), "--inventory", p(&inv)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alphabet mismatch"));
}
