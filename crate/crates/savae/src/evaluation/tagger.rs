//! Averaged-perceptron part-of-speech tagger.
//!
//! Closes the evaluation loop for generated text (the corpora themselves
//! arrive pre-tagged). Greedy left-to-right decoding with the previous
//! predicted tag as a feature; weights are averaged over all updates.
//! B-tree maps keep scoring order (and therefore tie-breaking) fully
//! deterministic across processes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const START: &str = "<start>";

#[derive(Clone, Debug, Default)]
pub struct PerceptronTagger {
    tagset: Vec<String>,
    /// feature -> tag -> averaged weight
    weights: BTreeMap<String, BTreeMap<String, f64>>,
}

fn features(tokens: &[String], i: usize, prev_tag: &str) -> Vec<String> {
    let word = &tokens[i];
    let lower = word.to_lowercase();
    let chars: Vec<char> = word.chars().collect();
    let mut out = Vec::with_capacity(7);
    out.push(format!("w={word}"));
    out.push(format!("lw={lower}"));
    for n in 1..=3usize {
        if chars.len() >= n {
            let suffix: String = chars[chars.len() - n..].iter().collect();
            out.push(format!("s{n}={suffix}"));
        }
    }
    out.push(format!("pt={prev_tag}"));
    let prev_word = if i == 0 { START } else { &tokens[i - 1] };
    out.push(format!("pw={prev_word}"));
    out
}

impl PerceptronTagger {
    /// Score every tag for one position and return the best (ties go to the
    /// lexicographically smaller tag).
    fn predict(&self, feats: &[String]) -> &str {
        let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
        for f in feats {
            if let Some(per_tag) = self.weights.get(f) {
                for (tag, w) in per_tag {
                    *scores.entry(tag).or_insert(0.0) += w;
                }
            }
        }
        let mut best: Option<(&str, f64)> = None;
        for (tag, score) in &scores {
            match best {
                None => best = Some((tag, *score)),
                Some((_, s)) if *score > s => best = Some((tag, *score)),
                _ => {}
            }
        }
        best.map(|(t, _)| t).unwrap_or_else(|| {
            self.tagset.first().map(String::as_str).unwrap_or(START)
        })
    }

    /// Exactly one tag per token, greedy left to right.
    pub fn tag(&self, tokens: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(tokens.len());
        let mut prev = START.to_string();
        for i in 0..tokens.len() {
            let feats = features(tokens, i, &prev);
            let tag = self.predict(&feats).to_string();
            prev = tag.clone();
            out.push(tag);
        }
        out
    }

    pub fn tagset(&self) -> &[String] {
        &self.tagset
    }

    /// Train on parallel (tokens, tags) sentences. Sentences are shuffled
    /// each iteration by the seed; weights are averaged at the end.
    pub fn train(
        corpus: &[(Vec<String>, Vec<String>)],
        iterations: usize,
        seed: u64,
    ) -> Result<PerceptronTagger> {
        if corpus.is_empty() {
            return Err(Error::Contract("tagger training corpus is empty".into()));
        }
        let mut tagset: Vec<String> = corpus
            .iter()
            .flat_map(|(_, tags)| tags.iter().cloned())
            .collect();
        tagset.sort();
        tagset.dedup();

        let mut totals: BTreeMap<(String, String), f64> = BTreeMap::new();
        let mut stamps: BTreeMap<(String, String), f64> = BTreeMap::new();
        let mut instances = 0.0f64;

        let mut model = PerceptronTagger {
            tagset: tagset.clone(),
            weights: BTreeMap::new(),
        };

        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let upd = |weights: &mut BTreeMap<String, BTreeMap<String, f64>>,
                       totals: &mut BTreeMap<(String, String), f64>,
                       stamps: &mut BTreeMap<(String, String), f64>,
                       instances: f64,
                       feat: &str,
                       tag: &str,
                       delta: f64| {
            let key = (feat.to_string(), tag.to_string());
            let w = weights
                .entry(feat.to_string())
                .or_default()
                .entry(tag.to_string())
                .or_insert(0.0);
            let stamp = stamps.entry(key.clone()).or_insert(0.0);
            *totals.entry(key).or_insert(0.0) += (instances - *stamp) * *w;
            *stamp = instances;
            *w += delta;
        };

        for _ in 0..iterations {
            order.shuffle(&mut rng);
            for &idx in &order {
                let (tokens, tags) = &corpus[idx];
                let mut prev = START.to_string();
                for i in 0..tokens.len() {
                    instances += 1.0;
                    let feats = features(tokens, i, &prev);
                    let guess = model.predict(&feats).to_string();
                    let truth = &tags[i];
                    if guess != *truth {
                        for f in &feats {
                            upd(
                                &mut model.weights,
                                &mut totals,
                                &mut stamps,
                                instances,
                                f,
                                truth,
                                1.0,
                            );
                            upd(
                                &mut model.weights,
                                &mut totals,
                                &mut stamps,
                                instances,
                                f,
                                &guess,
                                -1.0,
                            );
                        }
                    }
                    // training conditions on the predicted tag, like decoding
                    prev = guess;
                }
            }
        }

        // averaging: flush every pending span, divide by update count
        for (feat, per_tag) in &mut model.weights {
            for (tag, w) in per_tag.iter_mut() {
                let key = (feat.clone(), tag.clone());
                let total = totals.get(&key).copied().unwrap_or(0.0)
                    + (instances - stamps.get(&key).copied().unwrap_or(0.0)) * *w;
                *w = total / instances;
            }
        }
        Ok(model)
    }

    /// Plain-text serialization: a version line, the tagset, then one
    /// feature/tag/weight triple per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("savae-tagger-v1\n");
        out.push_str(&self.tagset.join(" "));
        out.push('\n');
        for (feat, per_tag) in &self.weights {
            for (tag, w) in per_tag {
                out.push_str(&format!("{feat}\t{tag}\t{w:?}\n"));
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PerceptronTagger> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some("savae-tagger-v1") {
            return Err(Error::Checkpoint("not a tagger file".into()));
        }
        let tagset: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("tagger file missing tagset".into()))?
            .split_whitespace()
            .map(String::from)
            .collect();
        let mut weights: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (no, line) in lines.enumerate() {
            let mut parts = line.split('\t');
            let (Some(feat), Some(tag), Some(w), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: no + 3,
                    msg: "expected feature\\ttag\\tweight".into(),
                });
            };
            let w: f64 = w.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: no + 3,
                msg: format!("bad weight {w:?}"),
            })?;
            weights
                .entry(feat.to_string())
                .or_default()
                .insert(tag.to_string(), w);
        }
        Ok(PerceptronTagger { tagset, weights })
    }
}
