//! Synthetic copy task.
//!
//! Every source names 2 to 4 items (allergy, medication, diagnosis,
//! procedure) using invented marker words, and the reference summary lists
//! them in a fixed template. Each marker occurs in exactly one record, so a
//! vocabulary capped at [`SyntheticCorpus::vocab_max_size`] never contains
//! one: the only way to reproduce a marker is to copy it from the source.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::DatasetRecord;
use crate::tokenizer::{tokenize, SPECIALS};

const SLOTS: [(&str, &str); 4] = [
    ("allergy", "allergic to"),
    ("medication", "started on"),
    ("diagnosis", "diagnosed with"),
    ("procedure", "scheduled for"),
];

const OPENERS: [&str; 6] = [
    "patient seen in clinic today",
    "patient admitted overnight for review",
    "follow up visit with family present",
    "patient reports mild symptoms and stable vitals",
    "seen on the ward after a quiet night",
    "routine review with no new complaints",
];

const TRAILERS: [&str; 6] = ["", "", "today", "last week", "per notes", "as planned"];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub records: Vec<DatasetRecord>,
    /// All marker words, in generation order.
    pub markers: Vec<String>,
    /// Vocabulary cap that admits every template word and no marker.
    pub vocab_max_size: usize,
}

fn marker(rng: &mut ChaCha8Rng) -> String {
    let mut w = String::new();
    for _ in 0..3 {
        w.push(*CONSONANTS.choose(rng).expect("non-empty") as char);
        w.push(*VOWELS.choose(rng).expect("non-empty") as char);
    }
    w
}

/// Generates `n` records deterministically from `seed`.
pub fn copy_task(n: usize, seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut template_words: BTreeSet<String> = BTreeSet::new();
    for text in OPENERS.iter().chain(&TRAILERS) {
        template_words.extend(tokenize(text));
    }
    for (label, cue) in SLOTS {
        template_words.extend(tokenize(label));
        template_words.extend(tokenize(cue));
    }
    template_words.extend([".", ":", ";"].map(String::from));

    let mut used: HashSet<String> = HashSet::new();
    let mut markers = Vec::new();
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let count = rng.random_range(2..=4);
        let mut slots: Vec<usize> = (0..SLOTS.len()).collect();
        slots.shuffle(&mut rng);
        slots.truncate(count);
        slots.sort_unstable();

        let mut source = format!("{} .", OPENERS.choose(&mut rng).expect("non-empty"));
        let mut summary = Vec::new();
        for &s in &slots {
            let m = loop {
                let m = marker(&mut rng);
                if !template_words.contains(&m) && used.insert(m.clone()) {
                    break m;
                }
            };
            let (label, cue) = SLOTS[s];
            let trailer = TRAILERS.choose(&mut rng).expect("non-empty");
            source.push_str(&format!(" {cue} {m}"));
            if !trailer.is_empty() {
                source.push(' ');
                source.push_str(trailer);
            }
            source.push_str(" .");
            summary.push(format!("{label} : {m}"));
            markers.push(m);
        }
        records.push(DatasetRecord {
            source,
            summary: format!("{} .", summary.join(" ; ")),
        });
    }
    SyntheticCorpus {
        records,
        markers,
        vocab_max_size: SPECIALS.len() + template_words.len(),
    }
}
