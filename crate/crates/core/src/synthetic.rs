//! Small deterministic Lithuanian-flavoured corpora for tests, benches and
//! smoke runs. Text is templated, so a tiny model can learn it quickly.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Document, InstructionExample, QAPair};

const CITIES: &[(&str, &str)] = &[
    ("Vilnius", "Vilniuje"),
    ("Kaunas", "Kaune"),
    ("Klaipėda", "Klaipėdoje"),
    ("Šiauliai", "Šiauliuose"),
    ("Panevėžys", "Panevėžyje"),
    ("Alytus", "Alytuje"),
    ("Marijampolė", "Marijampolėje"),
    ("Utena", "Utenoje"),
];

const RIVERS: &[&str] = &["Nemunas", "Neris", "Venta", "Šventoji", "Dubysa", "Minija"];

const PEOPLE: &[&str] = &["Jonas", "Ona", "Petras", "Rūta", "Tomas", "Eglė", "Lukas", "Gabija"];

const ACTIVITIES: &[(&str, &str)] = &[
    ("skaito knygą", "skaito"),
    ("rašo laišką", "rašo"),
    ("kepa duoną", "kepa"),
    ("sodina medį", "sodina"),
    ("groja smuiku", "groja"),
    ("tvarko namus", "tvarko"),
];

const SEASONS: &[&str] = &["pavasarį", "vasarą", "rudenį", "žiemą"];

const SOURCES: &[&str] = &["naujienos", "enciklopedija", "forumas"];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let (city, loc) = *CITIES.choose(rng).unwrap();
    let person = *PEOPLE.choose(rng).unwrap();
    let (act, _) = *ACTIVITIES.choose(rng).unwrap();
    let season = *SEASONS.choose(rng).unwrap();
    let river = *RIVERS.choose(rng).unwrap();
    match rng.random_range(0..7) {
        0 => format!("{person} gyvena {loc} ir {act}."),
        1 => format!("{season} {person} {act} {loc}."),
        2 => format!("Pro {city} teka upė {river}."),
        3 => format!("{city} yra Lietuvos miestas."),
        4 => format!("Kur gyvena {person}? {person} gyvena {loc}."),
        5 => format!("Kas yra {city}? {city} yra Lietuvos miestas."),
        _ => {
            let n = rng.random_range(2..20);
            format!("{loc} {season} buvo {n} laipsnių šilumos.")
        }
    }
}

/// `n_docs` documents of 3 to 8 templated sentences, tagged with one of a
/// few source labels.
pub fn synthetic_corpus(n_docs: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let documents = (0..n_docs)
        .map(|i| {
            let n = rng.random_range(3..=8);
            let text = (0..n).map(|_| sentence(&mut rng)).collect::<Vec<_>>().join(" ");
            Document {
                id: format!("doc-{}", i + 1),
                text,
                source: Some(SOURCES[i % SOURCES.len()].to_string()),
            }
        })
        .collect();
    Corpus::new(documents)
}

/// Question/answer pairs drawn from the same templates as the corpus.
pub fn synthetic_qa(n: usize, seed: u64) -> Vec<QAPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (city, loc) = *CITIES.choose(&mut rng).unwrap();
            let person = *PEOPLE.choose(&mut rng).unwrap();
            let (act, verb) = *ACTIVITIES.choose(&mut rng).unwrap();
            let (question, answer) = match rng.random_range(0..3) {
                0 => (format!("Kur gyvena {person}?"), format!("{person} gyvena {loc} ir {act}.")),
                1 => (format!("Ką {verb} {person}?"), format!("{person} {act} {loc}.")),
                _ => (format!("Kas yra {city}?"), format!("{city} yra Lietuvos miestas.")),
            };
            QAPair { question, answer }
        })
        .collect()
}

/// Instruction examples built from [`synthetic_qa`].
pub fn synthetic_instructions(n: usize, seed: u64) -> Vec<InstructionExample> {
    synthetic_qa(n, seed).iter().map(InstructionExample::from).collect()
}
