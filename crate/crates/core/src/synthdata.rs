//! Seeded synthetic corpora for the task ladder: plain transcription, coarse
//! tagging, merged-domain slot filling and single-domain slot filling, plus a
//! second target domain that shares part of its concept set.
//!
//! Features are built directly in spectrogram space: each spoken character is
//! a fixed `K x F` prototype, stretched by duration jitter and corrupted by
//! Gaussian noise. Prototypes are shared by every task so that what one stage
//! learns about the acoustics carries over to the next.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::featurizer::{write_features, FeatureError};
use crate::manifest::{Manifest, ManifestEntry, ManifestError};
use crate::tag_codec::{encode, CodecError, ConceptInventory, Item, TaggedTranscript, BASE_ALPHABET, WORD_SEPARATOR};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate grammar: {0}")]
    Grammar(String),
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-character `frames_per_char x dim` feature templates.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub frames_per_char: usize,
    pub dim: usize,
    table: BTreeMap<char, Array2<f64>>,
}

impl Prototypes {
    /// Draws a standard-normal template per character (space included),
    /// redrawing any that lands within `min_distance` (Frobenius) of an
    /// earlier one. Values are rounded to f32 so feature files store them exactly.
    pub fn generate(seed: u64, frames_per_char: usize, dim: usize, min_distance: f64) -> Result<Self, SynthError> {
        if frames_per_char == 0 || dim == 0 {
            return Err(SynthError::Spec("prototype shape must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table: BTreeMap<char, Array2<f64>> = BTreeMap::new();
        for c in std::iter::once(WORD_SEPARATOR).chain(BASE_ALPHABET.chars()) {
            let mut attempts = 0;
            let proto = loop {
                let p = Array2::from_shape_fn((frames_per_char, dim), |_| {
                    rng.sample::<f64, _>(StandardNormal) as f32 as f64
                });
                if table.values().all(|q| distance(&p, q) >= min_distance) {
                    break p;
                }
                attempts += 1;
                if attempts > 1000 {
                    return Err(SynthError::Spec(format!("cannot place prototypes {min_distance} apart")));
                }
            };
            table.insert(c, proto);
        }
        Ok(Self { frames_per_char, dim, table })
    }

    pub fn get(&self, c: char) -> Option<&Array2<f64>> {
        self.table.get(&c)
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let protos: Vec<&Array2<f64>> = self.table.values().collect();
        let mut best = f64::INFINITY;
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                best = best.min(distance(protos[i], protos[j]));
            }
        }
        best
    }
}

fn distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// A sentence pattern. Tokens are literal words or `{concept:CLASS}` slots
/// filled with one phrase of the word class. A slot whose concept is not in
/// the task's concept set is emitted as plain words.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub weight: f64,
    pub pattern: String,
}

impl Template {
    pub fn new(weight: f64, pattern: &str) -> Self {
        Self { weight, pattern: pattern.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub templates: Vec<Template>,
    pub classes: BTreeMap<String, Vec<String>>,
    /// Concepts tagged in this task, in inventory order.
    pub concepts: Vec<String>,
    pub sizes: SplitSizes,
    /// Standard deviation of additive feature noise.
    pub noise: f64,
    /// Per-character duration jitter of -1, 0 or +1 frames.
    pub jitter: bool,
    pub seed: u64,
}

/// Generated utterance, held in memory.
#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub id: String,
    pub split: Split,
    pub transcript: TaggedTranscript,
    pub target_text: String,
    pub features: Array2<f64>,
}

fn hash_seed(seed: u64, parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().into()
}

/// Deterministic 80/10/10 assignment from a seeded hash of the id.
pub fn split_of(seed: u64, id: &str) -> Split {
    let d = hash_seed(seed, &["split", id]);
    match u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % 10 {
        0..=7 => Split::Train,
        8 => Split::Dev,
        _ => Split::Test,
    }
}

enum Token<'a> {
    Word(&'a str),
    Slot { concept: &'a str, class: &'a str },
}

fn tokens(pattern: &str) -> Result<Vec<Token<'_>>, SynthError> {
    pattern
        .split_whitespace()
        .map(|t| match t.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
            Some(slot) => slot
                .split_once(':')
                .map(|(concept, class)| Token::Slot { concept, class })
                .ok_or_else(|| SynthError::Grammar(format!("slot `{t}` is not `{{concept:CLASS}}`"))),
            None => Ok(Token::Word(t)),
        })
        .collect()
}

impl TaskSpec {
    /// Rejects grammars that cannot produce an utterance or produce characters
    /// outside the base alphabet.
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.templates.is_empty() || self.templates.iter().all(|t| t.weight <= 0.0) {
            return Err(SynthError::Grammar(format!("{}: no template with positive weight", self.task_id)));
        }
        if !(self.noise >= 0.0) {
            return Err(SynthError::Spec("noise must be non-negative".into()));
        }
        let ok_word = |w: &str| !w.is_empty() && w.chars().all(|c| BASE_ALPHABET.contains(c));
        for t in &self.templates {
            let toks = tokens(&t.pattern)?;
            if toks.is_empty() {
                return Err(SynthError::Grammar(format!("empty template in {}", self.task_id)));
            }
            for tok in toks {
                match tok {
                    Token::Word(w) if !ok_word(w) => {
                        return Err(SynthError::Grammar(format!("word `{w}` uses characters outside the alphabet")))
                    }
                    Token::Slot { class, .. } => {
                        let phrases = self
                            .classes
                            .get(class)
                            .filter(|p| !p.is_empty())
                            .ok_or_else(|| SynthError::Grammar(format!("word class `{class}` is empty or undefined")))?;
                        if let Some(bad) = phrases.iter().find(|p| !p.split_whitespace().all(ok_word) || p.trim().is_empty()) {
                            return Err(SynthError::Grammar(format!("phrase `{bad}` in class `{class}`")));
                        }
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn sample_transcript(&self, rng: &mut impl Rng) -> TaggedTranscript {
        let weights = WeightedIndex::new(self.templates.iter().map(|t| t.weight.max(0.0))).expect("validated weights");
        let template = &self.templates[weights.sample(rng)];
        let mut items = Vec::new();
        for tok in tokens(&template.pattern).expect("validated template") {
            match tok {
                Token::Word(w) => items.push(Item::Word(w.to_string())),
                Token::Slot { concept, class } => {
                    let phrases = &self.classes[class];
                    let words: Vec<String> = phrases[rng.gen_range(0..phrases.len())].split_whitespace().map(str::to_string).collect();
                    if self.concepts.iter().any(|c| c == concept) {
                        items.push(Item::Concept { name: concept.to_string(), words });
                    } else {
                        items.extend(words.into_iter().map(Item::Word));
                    }
                }
            }
        }
        TaggedTranscript::new(items)
    }
}

/// Stretches each character's prototype by jitter and adds noise.
pub fn synthesize(text: &str, protos: &Prototypes, noise: f64, jitter: bool, rng: &mut impl Rng) -> Array2<f64> {
    let k = protos.frames_per_char;
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut blocks = Vec::with_capacity(text.len());
    for c in text.chars() {
        let proto = protos.get(c).expect("character has a prototype");
        let frames = if jitter { (k as i64 + rng.gen_range(-1..=1)).max(1) as usize } else { k };
        let mut block = Array2::from_shape_fn((frames, protos.dim), |(t, f)| proto[[t * k / frames, f]]);
        if noise > 0.0 {
            block.mapv_inplace(|v| v + normal.sample(rng));
        }
        blocks.push(block);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let mut out = concatenate(Axis(0), &views).expect("equal widths");
    out.mapv_inplace(|v| v as f32 as f64);
    out
}

/// Generates a task's utterances. Ids are enumerated in order and routed to
/// their hashed split until every split's quota is filled.
pub fn generate(spec: &TaskSpec, protos: &Prototypes, inventory: &ConceptInventory) -> Result<Vec<SynthUtterance>, SynthError> {
    spec.validate()?;
    for c in &spec.concepts {
        if inventory.open_symbol(c).is_none() {
            return Err(SynthError::Spec(format!("concept {c} missing from inventory")));
        }
    }
    let quota = |s: Split| match s {
        Split::Train => spec.sizes.train,
        Split::Dev => spec.sizes.dev,
        Split::Test => spec.sizes.test,
    };
    let mut filled = BTreeMap::new();
    let mut plan = Vec::with_capacity(spec.sizes.total());
    let mut index = 0usize;
    while plan.len() < spec.sizes.total() {
        let id = format!("{}-{index:06}", spec.task_id);
        let split = split_of(spec.seed, &id);
        let n = filled.entry(split).or_insert(0usize);
        if *n < quota(split) {
            *n += 1;
            plan.push((id, split));
        }
        index += 1;
    }
    plan.into_par_iter()
        .map(|(id, split)| {
            let mut rng = ChaCha8Rng::from_seed(hash_seed(spec.seed, &["utterance", &id]));
            let transcript = spec.sample_transcript(&mut rng);
            let target_text = encode(&transcript, inventory, false)?;
            let features = synthesize(&transcript.plain_text(), protos, spec.noise, spec.jitter, &mut rng);
            Ok(SynthUtterance { id, split, transcript, target_text, features })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub task_id: String,
    pub dir: PathBuf,
    pub inventory: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub counts: SplitSizes,
}

impl CorpusFiles {
    pub fn manifest(&self, split: Split) -> &Path {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Writes a task corpus under `dir`: `features/<id>.sluf`, one manifest per
/// split and the task's `inventory.tsv`.
pub fn gen_corpus(spec: &TaskSpec, protos: &Prototypes, inventory: &ConceptInventory, dir: &Path) -> Result<CorpusFiles, SynthError> {
    let utts = generate(spec, protos, inventory)?;
    std::fs::create_dir_all(dir.join("features"))?;
    utts.par_iter()
        .map(|u| write_features(&dir.join("features").join(format!("{}.sluf", u.id)), &u.features))
        .collect::<Result<(), _>>()?;
    let mut per_split: BTreeMap<Split, Vec<ManifestEntry>> = BTreeMap::new();
    for u in &utts {
        per_split.entry(u.split).or_default().push(ManifestEntry {
            id: u.id.clone(),
            feature_path: format!("features/{}.sluf", u.id),
            target_text: u.target_text.clone(),
            duration_frames: u.features.nrows(),
        });
    }
    for split in Split::ALL {
        Manifest::write(dir.join(format!("{}.jsonl", split.name())), per_split.get(&split).map_or(&[][..], |v| v))?;
    }
    let inv_path = dir.join("inventory.tsv");
    inventory.save(&inv_path)?;
    Ok(CorpusFiles {
        task_id: spec.task_id.clone(),
        dir: dir.to_path_buf(),
        inventory: inv_path,
        train: dir.join("train.jsonl"),
        dev: dir.join("dev.jsonl"),
        test: dir.join("test.jsonl"),
        counts: spec.sizes,
    })
}

pub const TASK_ASR: &str = "asr";
pub const TASK_NER: &str = "ner";
pub const TASK_SF_MERGED: &str = "sf_ab";
pub const TASK_SF_A: &str = "sf_a";
pub const TASK_SF_B: &str = "sf_b";

/// Every concept used anywhere in the ladder, in symbol-assignment order.
pub const ALL_CONCEPTS: [&str; 11] = [
    "amount", "loc", "time", "nb_room", "room_type", "nb_night", "date", "city", "price", "nb_seat", "show",
];
pub const COARSE_CONCEPTS: [&str; 3] = ["amount", "loc", "time"];
pub const DOMAIN_A_CONCEPTS: [&str; 6] = ["nb_room", "room_type", "nb_night", "date", "city", "price"];
pub const DOMAIN_B_CONCEPTS: [&str; 5] = ["nb_seat", "show", "date", "city", "price"];

/// The inventory holding every ladder concept; task inventories are subsets of it,
/// so a concept keeps its symbol across tasks.
pub fn global_inventory() -> ConceptInventory {
    ConceptInventory::with_default_symbols(&ALL_CONCEPTS).expect("distinct concept names")
}

fn classes() -> BTreeMap<String, Vec<String>> {
    let c = |items: &[&str]| items.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    BTreeMap::from([
        ("NUM".to_string(), c(&["one", "two", "three", "four", "five"])),
        ("CITY".to_string(), c(&["paris", "lyon", "nice", "brest", "saint malo"])),
        ("DATE".to_string(), c(&["monday", "friday", "tomorrow", "next week", "june first"])),
        ("ROOM".to_string(), c(&["double room", "single room", "suite", "family room"])),
        ("PRICE".to_string(), c(&["cheap", "under fifty euros", "not too expensive"])),
        ("SHOW".to_string(), c(&["opera", "concert", "play", "ballet"])),
    ])
}

fn coarse_templates() -> Vec<Template> {
    vec![
        Template::new(1.0, "we met {amount:NUM} friends in {loc:CITY}"),
        Template::new(1.0, "see you {time:DATE} in {loc:CITY}"),
        Template::new(1.0, "it took {amount:NUM} hours on {time:DATE}"),
        Template::new(1.0, "they live in {loc:CITY}"),
        Template::new(1.0, "call me {time:DATE}"),
        Template::new(1.0, "the news at {amount:NUM} from {loc:CITY}"),
    ]
}

fn domain_a_templates() -> Vec<Template> {
    vec![
        Template::new(1.0, "i want {nb_room:NUM} {room_type:ROOM} in {city:CITY}"),
        Template::new(1.0, "book {nb_room:NUM} {room_type:ROOM} for {nb_night:NUM} nights"),
        Template::new(1.0, "a {room_type:ROOM} in {city:CITY} from {date:DATE}"),
        Template::new(1.0, "{nb_night:NUM} nights in {city:CITY} {price:PRICE}"),
        Template::new(1.0, "is there a {room_type:ROOM} {price:PRICE} on {date:DATE}"),
    ]
}

fn domain_b_templates() -> Vec<Template> {
    vec![
        Template::new(1.0, "i want {nb_seat:NUM} seats for the {show:SHOW} in {city:CITY}"),
        Template::new(1.0, "{nb_seat:NUM} tickets on {date:DATE} {price:PRICE}"),
        Template::new(1.0, "the {show:SHOW} on {date:DATE} in {city:CITY}"),
        Template::new(1.0, "is the {show:SHOW} {price:PRICE}"),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderOptions {
    pub asr: SplitSizes,
    pub ner: SplitSizes,
    pub merged: SplitSizes,
    pub target: SplitSizes,
    pub domain_b: SplitSizes,
    pub noise: f64,
    pub jitter: bool,
    pub frames_per_char: usize,
    pub dim: usize,
}

impl Default for LadderOptions {
    fn default() -> Self {
        let s = SplitSizes { train: 2000, dev: 250, test: 250 };
        Self { asr: s, ner: s, merged: s, target: s, domain_b: s, noise: 0.5, jitter: true, frames_per_char: 4, dim: 16 }
    }
}

/// The four rungs (plain transcription, coarse tags, merged fine tags,
/// target-domain fine tags) and the second target domain.
#[derive(Debug, Clone)]
pub struct Ladder {
    pub seed: u64,
    pub prototypes: Prototypes,
    pub inventory: ConceptInventory,
    pub rungs: Vec<TaskSpec>,
    pub domain_b: TaskSpec,
}

pub fn make_task_ladder(seed: u64) -> Result<Ladder, SynthError> {
    make_task_ladder_with(seed, &LadderOptions::default())
}

pub fn make_task_ladder_with(seed: u64, opts: &LadderOptions) -> Result<Ladder, SynthError> {
    // prototypes sit about sqrt(2 K F) apart on average; demand a third of that
    let min_distance = (2.0 * (opts.frames_per_char * opts.dim) as f64).sqrt() / 3.0;
    let prototypes = Prototypes::generate(seed, opts.frames_per_char, opts.dim, min_distance)?;
    let task = |id: &str, templates: Vec<Template>, concepts: &[&str], sizes: SplitSizes| TaskSpec {
        task_id: id.to_string(),
        templates,
        classes: classes(),
        concepts: concepts.iter().map(|s| s.to_string()).collect(),
        sizes,
        noise: opts.noise,
        jitter: opts.jitter,
        seed,
    };
    let all = [coarse_templates(), domain_a_templates(), domain_b_templates()].concat();
    let merged_concepts: Vec<&str> = ALL_CONCEPTS
        .iter()
        .copied()
        .filter(|c| DOMAIN_A_CONCEPTS.contains(c) || DOMAIN_B_CONCEPTS.contains(c))
        .collect();
    let rungs = vec![
        task(TASK_ASR, all, &[], opts.asr),
        task(TASK_NER, coarse_templates(), &COARSE_CONCEPTS, opts.ner),
        task(TASK_SF_MERGED, [domain_a_templates(), domain_b_templates()].concat(), &merged_concepts, opts.merged),
        task(TASK_SF_A, domain_a_templates(), &DOMAIN_A_CONCEPTS, opts.target),
    ];
    let domain_b = task(TASK_SF_B, domain_b_templates(), &DOMAIN_B_CONCEPTS, opts.domain_b);
    Ok(Ladder { seed, prototypes, inventory: global_inventory(), rungs, domain_b })
}

impl Ladder {
    pub fn inventory_for(&self, spec: &TaskSpec) -> ConceptInventory {
        self.inventory.subset(&spec.concepts).expect("ladder concepts are registered")
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.rungs.iter().chain(std::iter::once(&self.domain_b))
    }

    /// Writes every task corpus to `<out>/<task_id>/`.
    pub fn write(&self, out: &Path) -> Result<Vec<CorpusFiles>, SynthError> {
        self.tasks()
            .map(|spec| gen_corpus(spec, &self.prototypes, &self.inventory_for(spec), &out.join(&spec.task_id)))
            .collect()
    }
}
