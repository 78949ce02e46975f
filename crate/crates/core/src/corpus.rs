//! Byte-level tokenization and a small seeded text generator.
//!
//! The generator produces English-like prose from a fixed phrase grammar.
//! It exists so that tests and the shipped sample corpus (`data/corpus.txt`)
//! need no external downloads; any UTF-8 text works as a training corpus.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One token per byte.
pub fn byte_tokens(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| u32::from(b)).collect()
}

const NAMES: &[&str] = &[
    "Ada", "Bram", "Celia", "Doran", "Elspeth", "Finn", "Greta", "Hollis", "Ivo", "Juno", "Kestrel", "Lorna",
    "Milo", "Nell", "Oswin", "Perrin", "Quill", "Rosalind", "Silas", "Tamsin",
];
const PEOPLE: &[&str] = &[
    "miller", "ferryman", "weaver", "shepherd", "lamplighter", "baker", "clerk", "sailor", "gardener",
    "carpenter", "widow", "schoolmaster", "fisherman", "blacksmith", "traveller", "child", "doctor",
    "stranger", "innkeeper", "mapmaker",
];
const THINGS: &[&str] = &[
    "lantern", "river", "bridge", "letter", "garden", "window", "road", "orchard", "bell", "boat", "harbour",
    "mill", "clock", "wall", "field", "chimney", "market", "well", "ledger", "coat", "basket", "hill",
    "candle", "gate", "storm", "kettle", "map", "door", "ship", "song",
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "narrow", "bright", "cold", "crooked", "patient", "small", "heavy", "grey", "warm",
    "distant", "careful", "broken", "golden", "tired", "sudden", "green", "hollow", "clever",
];
const VERBS_PAST: &[(&str, bool)] = &[
    ("carried", true), ("found", true), ("mended", true), ("watched", true), ("opened", true),
    ("painted", true), ("followed", true), ("counted", true), ("remembered", true), ("sold", true),
    ("lost", true), ("built", true), ("waited", false), ("laughed", false), ("slept", false),
    ("listened", false), ("wandered", false), ("sang", false), ("hesitated", false), ("returned", false),
];
const ADVERBS: &[&str] = &[
    "slowly", "quietly", "again", "at last", "without a word", "before dawn", "all afternoon", "twice",
    "in secret", "with great care",
];
const PREPOSITIONS: &[&str] = &[
    "near", "behind", "under", "beside", "across", "beyond", "along", "above", "inside", "past",
];
const CONNECTIVES: &[&str] = &["and", "but", "so", "while", "because", "until", "although"];
const OPENERS: &[&str] = &[
    "In the morning", "Later that year", "When the tide turned", "After the rain", "By evening",
    "Long ago", "On the third day", "Before the fair", "Once", "That winter",
];
const SAYING: &[&str] = &["said", "asked", "whispered", "called", "replied", "muttered"];

struct Writer<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Writer<'_> {
    fn pick<'s>(&mut self, items: &[&'s str]) -> &'s str {
        items.choose(self.rng).copied().unwrap_or_default()
    }

    fn noun_phrase(&mut self) -> String {
        match self.rng.gen_range(0..10) {
            0..=2 => self.pick(NAMES).to_string(),
            3..=5 => format!("the {} {}", self.pick(ADJECTIVES), self.pick(PEOPLE)),
            6..=7 => format!("the {}", self.pick(PEOPLE)),
            _ => format!("a {} {}", self.pick(ADJECTIVES), self.pick(THINGS)),
        }
    }

    fn object_phrase(&mut self) -> String {
        match self.rng.gen_range(0..6) {
            0..=2 => format!("the {}", self.pick(THINGS)),
            3..=4 => format!("the {} {}", self.pick(ADJECTIVES), self.pick(THINGS)),
            _ => self.pick(NAMES).to_string(),
        }
    }

    fn clause(&mut self) -> String {
        let subject = self.noun_phrase();
        let (verb, transitive) = *VERBS_PAST.choose(self.rng).unwrap();
        let mut out = format!("{subject} {verb}");
        if transitive {
            out.push(' ');
            out.push_str(&self.object_phrase());
        }
        if self.rng.gen_bool(0.5) {
            out.push_str(&format!(" {} the {}", self.pick(PREPOSITIONS), self.pick(THINGS)));
        }
        if self.rng.gen_bool(0.3) {
            out.push(' ');
            out.push_str(self.pick(ADVERBS));
        }
        out
    }

    fn sentence(&mut self) -> String {
        let body = match self.rng.gen_range(0..10) {
            0..=3 => self.clause(),
            4..=6 => format!("{}, {} {}", self.clause(), self.pick(CONNECTIVES), self.clause()),
            7..=8 => format!("{}, {}", self.pick(OPENERS), self.clause()),
            _ => {
                let speaker = self.noun_phrase();
                let said = self.pick(SAYING);
                let line = capitalize(&self.clause());
                return format!("\"{line}?\" {said} {speaker}.");
            }
        };
        format!("{}.", capitalize(&body))
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Generates at least `min_bytes` bytes of prose, deterministically in `seed`.
pub fn synthetic_corpus(seed: u64, min_bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_bytes + 512);
    while out.len() < min_bytes {
        let sentences = rng.gen_range(3..8);
        let mut writer = Writer { rng: &mut rng };
        let paragraph: Vec<String> = (0..sentences).map(|_| writer.sentence()).collect();
        out.push_str(&paragraph.join(" "));
        out.push_str("\n\n");
    }
    out
}
