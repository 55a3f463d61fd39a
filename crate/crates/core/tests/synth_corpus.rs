use std::fs;

use slu_core::manifest::Manifest;
use slu_core::synthdata::{make_task_ladder_with, LadderOptions, Split, SplitSizes};
use slu_core::tag_codec::{decode, ConceptInventory};

fn opts() -> LadderOptions {
    let s = SplitSizes { train: 20, dev: 5, test: 5 };
    LadderOptions { asr: s, ner: s, merged: s, target: s, domain_b: s, ..LadderOptions::default() }
}

fn snapshot(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir).into_iter().map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap())).collect();
    files.sort();
    files
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn same_seed_writes_identical_corpora() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    make_task_ladder_with(11, &opts()).unwrap().write(a.path()).unwrap();
    make_task_ladder_with(11, &opts()).unwrap().write(b.path()).unwrap();
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
    let c = tempfile::tempdir().unwrap();
    make_task_ladder_with(12, &opts()).unwrap().write(c.path()).unwrap();
    assert_ne!(snapshot(a.path()), snapshot(c.path()));
}

#[test]
fn corpora_have_exact_split_sizes_and_clean_targets() {
    let dir = tempfile::tempdir().unwrap();
    for files in make_task_ladder_with(3, &opts()).unwrap().write(dir.path()).unwrap() {
        let inv = ConceptInventory::load(&files.inventory).unwrap();
        for (split, n) in [(Split::Train, 20), (Split::Dev, 5), (Split::Test, 5)] {
            let m = Manifest::read(files.manifest(split)).unwrap();
            assert_eq!(m.len(), n, "{} {split:?}", files.task_id);
            for e in &m.entries {
                assert!(decode(&e.target_text, &inv).1.is_empty(), "{}", e.target_text);
                let feats = m.load_features(e).unwrap();
                assert_eq!(feats.dim(), (e.duration_frames, 16));
            }
        }
    }
}
