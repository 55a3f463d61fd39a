//! `slu`: batch front end for feature extraction, corpus synthesis, chain
//! training, decoding, scoring and n-gram language models.
//!
//! Every command prints one JSON document (or JSON lines for `decode`) on
//! stdout and diagnostics on stderr.

mod settings;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use slu_core::alphabet::Alphabet;
use slu_core::curriculum::{run_chain_with, ChainSpec, RunOptions};
use slu_core::decoder::{beam_decode, greedy_labels, lm_tokens, DecodeConfig};
use slu_core::experiment::ExperimentOptions;
use slu_core::featurizer::{compute_spectrogram, power_normalize, read_features, read_wav, write_features};
use slu_core::manifest::{Manifest, ManifestEntry};
use slu_core::metrics::{t_confidence_margin, CorpusScore, ErrorCounts};
use slu_core::net::{forward, load_checkpoint, Batch, Mode};
use slu_core::ngram_lm::NGramModel;
use slu_core::synthdata::{make_task_ladder_with, LadderOptions};
use slu_core::tag_codec::{decode, ConceptInventory};

#[derive(Debug, Parser, Serialize)]
#[command(name = "slu", version, about = "End-to-end slot filling toolkit")]
struct Cli {
    /// Seed for anything random. Falls back to $SLU_SEED, then to 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// TOML file of default flag values, one table per command
    /// (`[decode]`, `[lm.train]`, ...). Flags given on the command line win.
    #[arg(long, global = true)]
    settings: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Turn a directory of WAV files into normalized spectrogram features and a manifest.
    Featurize(FeaturizeArgs),
    /// Generate the synthetic task ladder.
    Synth(SynthArgs),
    /// Train a declared chain of stages.
    Chain(ChainArgs),
    /// Decode a manifest with a checkpoint.
    Decode(DecodeArgs),
    /// Score hypotheses against references.
    Score(ScoreArgs),
    /// Train or evaluate an n-gram language model.
    #[command(subcommand)]
    Lm(LmCommand),
}

#[derive(Debug, Args, Serialize)]
struct FeaturizeArgs {
    #[arg(long)]
    wav_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20.0)]
    frame_ms: f64,
    #[arg(long, default_value_t = 10.0)]
    hop_ms: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum LadderPreset {
    /// Small corpora sized for a single CPU core.
    Desk,
    /// 2000/250/250 utterances per task.
    Full,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long, value_enum, default_value_t = LadderPreset::Desk)]
    ladder: LadderPreset,
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args, Serialize)]
struct ChainArgs {
    /// Chain file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Continue an interrupted run from its persisted state.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs, as if interrupted.
    #[arg(long, hide = true)]
    halt_after_epochs: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Concept inventory the checkpoint's head was trained for; omit for plain transcription.
    #[arg(long)]
    inventory: Option<PathBuf>,
    /// Beam width; 0 selects greedy decoding.
    #[arg(long, default_value_t = 64)]
    beam: usize,
    /// LM weight; ignored without --lm.
    #[arg(long, default_value_t = 1.2)]
    alpha: f64,
    /// Per-word bonus.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// ARPA language model.
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Hypotheses to print per utterance.
    #[arg(long, default_value_t = 1)]
    nbest: usize,
    /// Also write the top hypotheses as `id<TAB>text`, ready for `slu score`.
    #[arg(long)]
    tsv: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Debug, Args, Serialize)]
struct ScoreArgs {
    /// `id<TAB>tagged text` references.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// `id<TAB>tagged text` hypotheses.
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long)]
    inventory: Option<PathBuf>,
    /// Report 95% Student-t margins of the per-utterance rates.
    #[arg(long)]
    ci: bool,
    /// Write per-utterance rates as TSV.
    #[arg(long)]
    per_utterance: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
enum LmCommand {
    /// Estimate a Witten-Bell model and write it as ARPA.
    Train(LmTrainArgs),
    /// Perplexity of a text under a model.
    Perplexity(LmPerplexityArgs),
}

#[derive(Debug, Args, Serialize)]
struct LmText {
    /// One sentence per line.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    text: Option<PathBuf>,
    /// Use the target texts of a manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct LmTrainArgs {
    #[command(flatten)]
    input: LmText,
    #[arg(long, default_value_t = 5)]
    order: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct LmPerplexityArgs {
    #[command(flatten)]
    input: LmText,
    #[arg(long)]
    lm: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match settings::apply(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    };
    let cli = Cli::parse_from(argv);
    match run(&cli) {
        Ok(Outcome { output, ok }) => {
            if let Some(v) = output {
                println!("{}", serde_json::to_string_pretty(&v).expect("serializable"));
            }
            std::process::exit(if ok { 0 } else { 1 });
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

struct Outcome {
    output: Option<Value>,
    ok: bool,
}

impl Outcome {
    fn ok(v: Value) -> Self {
        Self { output: Some(v), ok: true }
    }
}

/// Explicit flag, else $SLU_SEED, else `fallback`.
fn seed_or(cli: &Cli, fallback: Option<u64>) -> Result<u64> {
    if let Some(s) = cli.seed {
        return Ok(s);
    }
    if let Some(f) = fallback {
        return Ok(f);
    }
    match std::env::var("SLU_SEED") {
        Ok(v) => v.trim().parse().with_context(|| format!("SLU_SEED={v:?} is not an unsigned integer")),
        Err(_) => Ok(0),
    }
}

fn run(cli: &Cli) -> Result<Outcome> {
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    let settings = json!({
        "seed": cli.seed,
        "workers": cli.workers.unwrap_or_else(rayon::current_num_threads),
        "command": serde_json::to_value(&cli.command)?,
    });
    match &cli.command {
        Command::Featurize(a) => featurize(a, settings),
        Command::Synth(a) => synth(cli, a, settings),
        Command::Chain(a) => chain(cli, a, settings),
        Command::Decode(a) => decode_cmd(a, settings),
        Command::Score(a) => score(a, settings),
        Command::Lm(LmCommand::Train(a)) => lm_train(a, settings),
        Command::Lm(LmCommand::Perplexity(a)) => lm_perplexity(a, settings),
    }
}

fn modified(p: &Path) -> Option<SystemTime> {
    fs::metadata(p).and_then(|m| m.modified()).ok()
}

fn featurize(a: &FeaturizeArgs, settings: Value) -> Result<Outcome> {
    let mut wavs: Vec<PathBuf> = fs::read_dir(&a.wav_dir)
        .with_context(|| format!("reading {}", a.wav_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    wavs.sort();
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;

    let results: Vec<(PathBuf, Result<(ManifestEntry, bool)>)> = wavs
        .par_iter()
        .map(|wav| {
            let stem = wav.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let out = a.out_dir.join(format!("{stem}.feat"));
            let r = (|| -> Result<(ManifestEntry, bool)> {
                let fresh = matches!((modified(&out), modified(wav)), (Some(o), Some(w)) if o >= w);
                let frames = if fresh {
                    read_features(&out)?.nrows()
                } else {
                    let clip = read_wav(wav)?;
                    let spec = power_normalize(&compute_spectrogram(&clip, a.frame_ms, a.hop_ms)?);
                    write_features(&out, &spec.frames)?;
                    spec.frames.nrows()
                };
                let transcript = wav.with_extension("txt");
                let target_text = match fs::read_to_string(&transcript) {
                    Ok(t) => t.trim().to_string(),
                    Err(_) => String::new(),
                };
                Ok((ManifestEntry { id: stem.clone(), feature_path: format!("{stem}.feat"), target_text, duration_frames: frames }, fresh))
            })();
            (wav.clone(), r)
        })
        .collect();

    let mut entries = Vec::new();
    let mut failed = Vec::new();
    let mut skipped = 0;
    for (wav, r) in results {
        match r {
            Ok((entry, fresh)) => {
                skipped += usize::from(fresh);
                entries.push(entry);
            }
            Err(e) => {
                eprintln!("{}: {e:#}", wav.display());
                failed.push(json!({ "file": wav.display().to_string(), "error": format!("{e:#}") }));
            }
        }
    }
    let manifest = a.out_dir.join("manifest.jsonl");
    Manifest::write(&manifest, &entries)?;
    let ok = failed.is_empty();
    Ok(Outcome {
        output: Some(json!({
            "settings": settings,
            "inputs": wavs.len(),
            "written": entries.len() - skipped,
            "up_to_date": skipped,
            "failed": failed,
            "manifest": manifest.display().to_string(),
        })),
        ok,
    })
}

fn synth(cli: &Cli, a: &SynthArgs, settings: Value) -> Result<Outcome> {
    let seed = seed_or(cli, None)?;
    if a.out.exists() && fs::read_dir(&a.out)?.next().is_some() {
        if !a.force {
            bail!("{} exists and is not empty; pass --force to replace it", a.out.display());
        }
        fs::remove_dir_all(&a.out).with_context(|| format!("removing {}", a.out.display()))?;
    }
    let opts = match a.ladder {
        LadderPreset::Desk => ExperimentOptions::desk().ladder,
        LadderPreset::Full => LadderOptions::default(),
    };
    let ladder = make_task_ladder_with(seed, &opts)?;
    let corpora = ladder.write(&a.out)?;
    let tasks: Vec<Value> = corpora
        .iter()
        .map(|c| {
            json!({
                "task": c.task_id,
                "inventory": c.inventory.display().to_string(),
                "train": c.train.display().to_string(),
                "dev": c.dev.display().to_string(),
                "test": c.test.display().to_string(),
                "counts": { "train": c.counts.train, "dev": c.counts.dev, "test": c.counts.test },
            })
        })
        .collect();
    // the on-disk record holds only what determines the data, so a --force rerun reproduces it
    let record = json!({ "seed": seed, "ladder": a.ladder, "tasks": tasks });
    fs::write(a.out.join("synth.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(Outcome::ok(json!({ "settings": settings, "seed": seed, "tasks": record["tasks"] })))
}

fn chain(cli: &Cli, a: &ChainArgs, settings: Value) -> Result<Outcome> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut table: toml::Table = text.parse().map_err(|e| anyhow!("{}: {e}", a.config.display()))?;
    let from_file = table.get("seed").and_then(toml::Value::as_integer).map(|s| s as u64);
    let seed = seed_or(cli, from_file)?;
    table.insert("seed".into(), toml::Value::Integer(seed as i64));
    let base = a.config.parent().unwrap_or(Path::new("."));
    let spec = ChainSpec::parse(&toml::to_string(&table)?, base).map_err(|e| anyhow!("{}: {e}", a.config.display()))?;
    let opts = RunOptions { resume: a.resume, halt_after_epochs: a.halt_after_epochs };
    let result = run_chain_with(&spec, &opts);
    let report: Value = serde_json::from_str(&fs::read_to_string(spec.output_dir.join("report.json")).unwrap_or_else(|_| "null".into()))?;
    match result {
        Ok(_) => Ok(Outcome::ok(json!({ "settings": settings, "seed": seed, "report": report }))),
        Err(e) => {
            eprintln!("error: {e}");
            Ok(Outcome { output: Some(json!({ "settings": settings, "seed": seed, "report": report, "error": e.to_string() })), ok: false })
        }
    }
}

#[derive(Serialize)]
struct HypLine<'a> {
    id: &'a str,
    rank: usize,
    text: &'a str,
    ctc_logprob: f64,
    lm_log10: f64,
    combined: f64,
}

fn decode_cmd(a: &DecodeArgs, settings: Value) -> Result<Outcome> {
    let ckpt = load_checkpoint(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let inventory = match &a.inventory {
        Some(p) => ConceptInventory::load(p)?,
        None => ConceptInventory::empty(),
    };
    let alphabet = Alphabet::for_inventory(&inventory);
    if alphabet.id() != ckpt.alphabet_id || alphabet.len() != ckpt.config.alphabet_size {
        bail!(
            "alphabet mismatch: checkpoint head has {} outputs (alphabet {}), the inventory gives {} (alphabet {})",
            ckpt.config.alphabet_size,
            ckpt.alphabet_id,
            alphabet.len(),
            alphabet.id()
        );
    }
    let lm = a.lm.as_ref().map(NGramModel::load_arpa).transpose()?;
    // an LM weight without an LM means nothing; record the weight actually used
    let alpha = if lm.is_some() { a.alpha } else { 0.0 };
    let cfg = DecodeConfig { beam_width: a.beam.max(1), alpha, beta: a.beta, lm: lm.as_ref(), alphabet: &alphabet };
    cfg.validate()?;
    if a.nbest == 0 {
        bail!("--nbest must be at least 1");
    }
    let manifest = Manifest::read(&a.manifest)?;

    let mut lines = Vec::new();
    let mut tsv = String::new();
    for chunk in manifest.entries.chunks(a.batch_size.max(1)) {
        let feats = chunk.iter().map(|e| manifest.load_features(e)).collect::<Result<Vec<_>, _>>()?;
        let out = forward(&ckpt, &Batch::new(feats), Mode::Infer)?;
        let decoded: Vec<Vec<(String, f64, f64, f64)>> = (0..chunk.len())
            .into_par_iter()
            .map(|b| -> Result<_> {
                let lattice = out.lattice.utterance(b);
                if a.beam == 0 {
                    let labels = greedy_labels(lattice);
                    let ctc = slu_core::ctc::CtcInstance::new(lattice, &labels).loss().map_or(f64::NEG_INFINITY, |l| -l);
                    Ok(vec![(alphabet.render(&labels), ctc, 0.0, ctc)])
                } else {
                    Ok(beam_decode(lattice, &cfg)?.into_iter().take(a.nbest).map(|h| (h.text, h.ctc_logprob, h.lm_log10, h.combined)).collect())
                }
            })
            .collect::<Result<_>>()?;
        for (entry, hyps) in chunk.iter().zip(decoded) {
            for (rank, (text, ctc_logprob, lm_log10, combined)) in hyps.iter().enumerate() {
                let line = HypLine { id: &entry.id, rank: rank + 1, text, ctc_logprob: *ctc_logprob, lm_log10: *lm_log10, combined: *combined };
                lines.push(serde_json::to_string(&line)?);
            }
            if let Some((text, ..)) = hyps.first() {
                tsv.push_str(&format!("{}\t{}\n", entry.id, text));
            }
        }
    }
    let mut effective = settings;
    effective["command"]["decode"]["alpha"] = json!(alpha);
    effective["mode"] = json!(if a.beam == 0 { "greedy" } else { "beam" });
    println!("{}", json!({ "settings": effective }));
    for l in &lines {
        println!("{l}");
    }
    if let Some(p) = &a.tsv {
        fs::write(p, tsv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(Outcome { output: None, ok: true })
}

fn read_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or_else(|| anyhow!("{}:{}: expected id<TAB>text", path.display(), i + 1))?;
        if seen.insert(id.to_string(), i + 1).is_some() {
            bail!("{}:{}: duplicate id {id}", path.display(), i + 1);
        }
        out.push((id.to_string(), rest.to_string()));
    }
    Ok(out)
}

fn counts_json(c: &ErrorCounts) -> Value {
    json!({ "S": c.substitutions, "I": c.insertions, "D": c.deletions, "N": c.ref_len })
}

fn score(a: &ScoreArgs, settings: Value) -> Result<Outcome> {
    let inventory = match &a.inventory {
        Some(p) => ConceptInventory::load(p)?,
        None => ConceptInventory::empty(),
    };
    let refs = read_tsv(&a.reference)?;
    let hyps: HashMap<String, String> = read_tsv(&a.hyp)?.into_iter().collect();
    let ref_ids: std::collections::HashSet<&str> = refs.iter().map(|(id, _)| id.as_str()).collect();
    let missing: Vec<&str> = refs.iter().map(|(id, _)| id.as_str()).filter(|id| !hyps.contains_key(*id)).collect();
    let mut extra: Vec<&str> = hyps.keys().map(String::as_str).filter(|id| !ref_ids.contains(id)).collect();
    extra.sort_unstable();
    if !missing.is_empty() || !extra.is_empty() {
        bail!("id mismatch: missing from hypotheses [{}]; not in references [{}]", missing.join(", "), extra.join(", "));
    }
    let mut score = CorpusScore::default();
    for (id, r) in &refs {
        score.add(id, &decode(r, &inventory).0, &decode(&hyps[id], &inventory).0);
    }
    let mut out = json!({
        "settings": settings,
        "utterances": refs.len(),
        "wer": score.wer(),
        "cer": score.cer(),
        "cver": score.cver(),
        "S": score.concepts.substitutions,
        "I": score.concepts.insertions,
        "D": score.concepts.deletions,
        "N": score.concepts.ref_len,
        "counts": {
            "words": counts_json(&score.words),
            "concepts": counts_json(&score.concepts),
            "concept_values": counts_json(&score.concept_values),
        },
    });
    if a.ci {
        let margin = |f: fn(&slu_core::metrics::UtteranceScore) -> f64| {
            t_confidence_margin(&score.per_utterance.iter().map(f).collect::<Vec<_>>())
        };
        out["ci95"] = json!({ "wer": margin(|u| u.wer), "cer": margin(|u| u.cer), "cver": margin(|u| u.cver) });
    }
    if let Some(p) = &a.per_utterance {
        let mut tsv = String::from("id\twer\tcer\tcver\n");
        for u in &score.per_utterance {
            tsv.push_str(&format!("{}\t{}\t{}\t{}\n", u.id, u.wer, u.cer, u.cver));
        }
        fs::write(p, tsv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(Outcome::ok(out))
}

fn sentences(input: &LmText) -> Result<Vec<Vec<String>>> {
    let texts: Vec<String> = match (&input.text, &input.manifest) {
        (Some(p), _) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?.lines().map(str::to_string).collect(),
        (None, Some(m)) => Manifest::read(m)?.entries.into_iter().map(|e| e.target_text).collect(),
        (None, None) => bail!("one of --text or --manifest is required"),
    };
    Ok(texts.iter().map(|t| lm_tokens(t)).filter(|s| !s.is_empty()).collect())
}

fn lm_train(a: &LmTrainArgs, settings: Value) -> Result<Outcome> {
    let corpus = sentences(&a.input)?;
    let lm = NGramModel::train(&corpus, a.order)?;
    lm.save_arpa(&a.out)?;
    Ok(Outcome::ok(json!({
        "settings": settings,
        "sentences": corpus.len(),
        "vocabulary": lm.vocab().len(),
        "ngrams": lm.counts(),
        "out": a.out.display().to_string(),
    })))
}

fn lm_perplexity(a: &LmPerplexityArgs, settings: Value) -> Result<Outcome> {
    let corpus = sentences(&a.input)?;
    let lm = NGramModel::load_arpa(&a.lm)?;
    let tokens: usize = corpus.iter().map(|s| s.len() + 1).sum();
    Ok(Outcome::ok(json!({
        "settings": settings,
        "sentences": corpus.len(),
        "tokens": tokens,
        "perplexity": lm.perplexity(&corpus),
    })))
}
