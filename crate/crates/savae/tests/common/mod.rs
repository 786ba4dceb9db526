//! Synthetic toy language for end-to-end tests: subject-verb-object frames
//! over a small vocabulary whose verbs carry five morphologically distinct
//! forms (so every verb-type tag has its own surface form and ground truth
//! is known exactly).

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use savae::corpus::{ParallelExample, Vocab};
use std::collections::BTreeSet;

pub const DETS: [&str; 2] = ["the", "a"];
pub const NOUNS: [&str; 8] = [
    "cat", "dog", "bird", "fish", "chef", "girl", "boy", "horse",
];
pub const ADJS: [&str; 4] = ["big", "small", "red", "old"];

/// (VBD, VBZ, VBP, VBG, VBN) surface forms per lemma; all five are distinct
/// strings, so a tagger can recover the verb type from the word alone.
pub const VERBS: [[&str; 5]; 8] = [
    ["ate", "eats", "eat", "eating", "eaten"],
    ["took", "takes", "take", "taking", "taken"],
    ["saw", "sees", "see", "seeing", "seen"],
    ["gave", "gives", "give", "giving", "given"],
    ["wrote", "writes", "write", "writing", "written"],
    ["hid", "hides", "hide", "hiding", "hidden"],
    ["stole", "steals", "steal", "stealing", "stolen"],
    ["broke", "breaks", "break", "breaking", "broken"],
];

pub const VERB_TAGS: [&str; 5] = ["VBD", "VBZ", "VBP", "VBG", "VBN"];

/// One sentence: det noun [adj?] verb det [adj?] noun, with the verb form
/// chosen by `form`. Four templates x five forms = twenty tag patterns.
fn build_sentence(
    template: usize,
    det1: &str,
    adj1: &str,
    noun1: &str,
    lemma: usize,
    form: usize,
    det2: &str,
    adj2: &str,
    noun2: &str,
) -> ParallelExample {
    let verb = VERBS[lemma][form];
    let vtag = VERB_TAGS[form];
    let (mut x, mut y) = (Vec::new(), Vec::new());
    let mut push = |word: &str, tag: &str| {
        x.push(word.to_string());
        y.push(tag.to_string());
    };
    push(det1, "DT");
    if template == 1 || template == 3 {
        push(adj1, "JJ");
    }
    push(noun1, "NN");
    push(verb, vtag);
    push(det2, "DT");
    if template == 2 || template == 3 {
        push(adj2, "JJ");
    }
    push(noun2, "NN");
    ParallelExample { x, y }
}

/// `n` distinct sentences drawn from the language.
pub fn generate_corpus(n: usize, seed: u64) -> Vec<ParallelExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let template = *[0usize, 1, 2, 3].choose(&mut rng).unwrap();
        let e = build_sentence(
            template,
            DETS.choose(&mut rng).unwrap(),
            ADJS.choose(&mut rng).unwrap(),
            NOUNS.choose(&mut rng).unwrap(),
            rng.random_range(0..VERBS.len()),
            rng.random_range(0..5),
            DETS.choose(&mut rng).unwrap(),
            ADJS.choose(&mut rng).unwrap(),
            NOUNS.choose(&mut rng).unwrap(),
        );
        if seen.insert(e.x.join(" ")) {
            out.push(e);
        }
    }
    out
}

pub fn build_vocabs(examples: &[ParallelExample]) -> (Vocab, Vocab) {
    let tv = Vocab::build(examples.iter().map(|e| e.x.as_slice()), 20_000).unwrap();
    let sv = Vocab::build(examples.iter().map(|e| e.y.as_slice()), 20_000).unwrap();
    (tv, sv)
}
