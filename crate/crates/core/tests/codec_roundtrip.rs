mod common;

use common::{fuzz_symbols, fuzz_transcript, oracle_scan_pairs};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slu_core::synthdata::global_inventory;
use slu_core::tag_codec::{decode, encode, extract_pairs, ConceptInventory, Item, RepairEvent, TaggedTranscript, BASE_ALPHABET};

fn inv() -> ConceptInventory {
    ConceptInventory::with_default_symbols(&["nb_room", "room_type"]).unwrap()
}

fn rooms() -> TaggedTranscript {
    let w = |s: &str| Item::Word(s.to_string());
    TaggedTranscript::new(vec![
        w("i"),
        w("would"),
        w("like"),
        Item::Concept { name: "nb_room".into(), words: vec!["two".into()] },
        Item::Concept { name: "room_type".into(), words: vec!["double-bed".into(), "rooms".into()] },
    ])
}

#[test]
fn worked_example_plain_and_starred() {
    let inv = inv();
    let (o1, o2, close, star) = (
        inv.open_symbol("nb_room").unwrap(),
        inv.open_symbol("room_type").unwrap(),
        inv.close_symbol(),
        inv.star_symbol(),
    );
    assert_eq!(encode(&rooms(), &inv, false).unwrap(), format!("i would like {o1} two {close} {o2} double-bed rooms {close}"));
    assert_eq!(encode(&rooms(), &inv, true).unwrap(), format!("{star} {o1} two {close} {o2} double-bed rooms {close}"));
    let pairs: Vec<_> = extract_pairs(&rooms()).into_iter().map(|p| (p.concept, p.value)).collect();
    assert_eq!(pairs, vec![("nb_room".to_string(), "two".to_string()), ("room_type".into(), "double-bed rooms".into())]);
}

#[test]
fn repair_examples() {
    let inv = inv();
    let (o1, o2, close) = (inv.open_symbol("nb_room").unwrap(), inv.open_symbol("room_type").unwrap(), inv.close_symbol());
    let (t, r) = decode(&format!("{o1} two {o2} rooms {close}"), &inv);
    assert_eq!(extract_pairs(&t).len(), 2);
    assert_eq!(r, vec![RepairEvent::ImplicitClose { position: 6 }]);
    let (t, r) = decode(&format!("{close} hello"), &inv);
    assert_eq!(t, TaggedTranscript::from_words("hello"));
    assert_eq!(r, vec![RepairEvent::OrphanClose { position: 0 }]);
}

#[test]
fn unknown_concept_is_rejected() {
    let mut t = rooms();
    t.items.push(Item::Concept { name: "city".into(), words: vec!["paris".into()] });
    assert!(encode(&t, &inv(), false).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn valid_transcripts_round_trip(seed in any::<u64>(), starred in any::<bool>()) {
        let inv = global_inventory();
        let t = fuzz_transcript(&mut ChaCha8Rng::seed_from_u64(seed), &inv);
        let target = if starred { t.starred(&inv) } else { t.clone() };
        let s = encode(&t, &inv, starred).unwrap();
        let (back, repairs) = decode(&s, &inv);
        prop_assert!(repairs.is_empty());
        prop_assert_eq!(&back, &target);
        let opens = s.chars().filter(|&c| inv.concept_for_symbol(c).is_some()).count();
        prop_assert_eq!(opens, s.chars().filter(|&c| c == inv.close_symbol()).count());
        if starred {
            // outside spans only the star, spaces and tag symbols remain
            let mut depth = 0;
            for c in s.chars() {
                if inv.concept_for_symbol(c).is_some() { depth += 1; }
                if c == inv.close_symbol() { depth -= 1; }
                prop_assert!(depth > 0 || !BASE_ALPHABET.contains(c));
            }
        }
    }

    #[test]
    fn arbitrary_streams_decode_to_scanned_pairs(seed in any::<u64>()) {
        let inv = global_inventory();
        let s = fuzz_symbols(&mut ChaCha8Rng::seed_from_u64(seed), &inv);
        let (t, _) = decode(&s, &inv);
        let pairs: Vec<_> = extract_pairs(&t).into_iter().map(|p| (p.concept, p.value)).collect();
        prop_assert_eq!(pairs, oracle_scan_pairs(&s, &inv));
    }
}
