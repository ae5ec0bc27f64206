#![allow(dead_code)]

use std::path::Path;

use dialog_knn::corpus::{Dialog, Speaker};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOPICS: [&str; 10] = [
    "billing", "shipping", "password", "refund", "upgrade", "warranty", "delivery", "invoice", "account", "coupon",
];

/// Ten assistant responses; each shares a few function words with the others
/// so the LM must keep several of them apart.
pub const TEMPLATES: [&str; 10] = [
    "your billing statement lists every charge so please check the monthly summary page",
    "we ship parcels within two days and you will get a tracking number by email",
    "to reset your password open settings then choose security and follow the link",
    "a refund goes back to the original card within five business days",
    "you can upgrade the plan from the dashboard and the new limits apply at once",
    "the warranty covers hardware faults for two years from the purchase date",
    "delivery slots open each morning so please pick a window that suits you",
    "every invoice is stored under documents and can be downloaded as a pdf",
    "your account details live on the profile tab where you can edit the address",
    "enter the coupon code at checkout and the discount shows before you pay",
];

const FILLER: [&str; 16] = [
    "hello", "hi", "please", "today", "quickly", "again", "now", "thanks", "urgent", "soon", "maybe", "still",
    "really", "kindly", "sir", "team",
];

/// Dialogs whose assistant turns are drawn from [`TEMPLATES`]: the user names
/// a topic (plus filler noise) and the assistant answers with that topic's
/// template. Turn pairs per dialog: 1 or 2.
pub fn memorization_corpus(n: usize, seed: u64) -> Vec<Dialog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let pairs = 1 + rng.gen_range(0..2);
            let mut turns = Vec::new();
            for _ in 0..pairs {
                let t = rng.gen_range(0..TOPICS.len());
                let mut words: Vec<&str> = (0..3).map(|_| *FILLER.choose(&mut rng).unwrap()).collect();
                words.extend(["i", "need", "help", "with", "my", TOPICS[t]]);
                turns.push((Speaker::User, words.join(" "), None));
                turns.push((Speaker::Assistant, TEMPLATES[t].to_string(), Some("agent1".to_string())));
            }
            Dialog::from_turns(format!("d{i:03}"), turns)
        })
        .collect()
}

/// Small random dialogs over a tiny vocabulary.
pub fn random_corpus(n: usize, seed: u64) -> Vec<Dialog> {
    let words = ["a", "b", "c", "d", "e", "f", "g", "h"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let n_turns = 2 + rng.gen_range(0..3);
            let turns = (0..n_turns)
                .map(|t| {
                    let len = 1 + rng.gen_range(0..6);
                    let text: Vec<&str> = (0..len).map(|_| *words.choose(&mut rng).unwrap()).collect();
                    let speaker = if t % 2 == 0 { Speaker::User } else { Speaker::Assistant };
                    (speaker, text.join(" "), None::<String>)
                })
                .collect::<Vec<_>>();
            Dialog::from_turns(format!("r{i}"), turns)
        })
        .collect()
}

pub fn write_corpus(path: &Path, dialogs: &[Dialog]) {
    let text: String = dialogs.iter().map(|d| d.to_json_line() + "\n").collect();
    std::fs::write(path, text).unwrap();
}
