//! Parallel text/syntax corpus ingestion, vocabularies, padding, batching.
//!
//! Corpus files are UTF-8, one record per line, `text-tokens<TAB>syntax-tokens`
//! with space-separated tokens. Splits live in separate files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Length buckets group examples whose text lengths fall within this width,
/// limiting padding waste without changing any per-example value.
pub const BUCKET_WIDTH: usize = 8;

/// One training item: a text token sequence paired with its syntax tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelExample {
    pub x: Vec<String>,
    pub y: Vec<String>,
}

/// Token <-> id bijection with four reserved entries. `cap` bounds the TOTAL
/// size including the reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Rank tokens by frequency (ties broken lexicographically) and keep the
    /// top `cap - 4`; everything else maps to UNK.
    pub fn build<'a, I>(sequences: I, cap: usize) -> Result<Vocab>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if cap <= RESERVED.len() {
            return Err(Error::Contract(format!(
                "vocabulary cap {} leaves no room beyond the {} reserved ids",
                cap,
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for seq in sequences {
            for tok in seq {
                if RESERVED.contains(&tok.as_str()) {
                    continue;
                }
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(cap - RESERVED.len());

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        Ok(Vocab::from_tokens(tokens))
    }

    /// Rebuild from an id-ordered token list (checkpoint loading). The first
    /// four entries must be the reserved forms.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED.map(String::from) {
            return Err(Error::Contract(
                "vocabulary token list must start with the reserved entries".into(),
            ));
        }
        Ok(Vocab::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn numericalize(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn denumericalize(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

/// Load a corpus file; parse errors carry 1-based line numbers.
pub fn load_corpus(path: &Path) -> Result<Vec<ParallelExample>> {
    let text = fs::read_to_string(path)?;
    parse_corpus(&text, &path.display().to_string())
}

pub fn parse_corpus(text: &str, label: &str) -> Result<Vec<ParallelExample>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_id = lineno + 1;
        if line.is_empty() {
            return Err(Error::Parse {
                path: label.to_string(),
                line: line_id,
                msg: "empty record".into(),
            });
        }
        let mut parts = line.split('\t');
        let (Some(text_part), Some(tag_part), None) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::Parse {
                path: label.to_string(),
                line: line_id,
                msg: "expected exactly one tab separating text from syntax".into(),
            });
        };
        let x: Vec<String> = text_part.split_whitespace().map(String::from).collect();
        let y: Vec<String> = tag_part.split_whitespace().map(String::from).collect();
        if x.is_empty() || y.is_empty() {
            return Err(Error::Parse {
                path: label.to_string(),
                line: line_id,
                msg: "empty token or tag sequence".into(),
            });
        }
        if x.len() != y.len() {
            return Err(Error::Parse {
                path: label.to_string(),
                line: line_id,
                msg: format!("{} tokens but {} tags", x.len(), y.len()),
            });
        }
        out.push(ParallelExample { x, y });
    }
    Ok(out)
}

/// Row-major padded id matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct IdMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u32>,
}

impl IdMatrix {
    pub fn row(&self, r: usize) -> &[u32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<u32> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }
}

/// Padded views of one sequence side of a batch.
///
/// `enc` holds the raw tokens (encoder input, [batch, max_len]); `dec_in` is
/// BOS-prefixed and `dec_tgt` EOS-suffixed ([batch, max_len + 1]).
/// `target_mask` is 1.0 at the `len + 1` real decoder positions of each row.
#[derive(Clone, Debug)]
pub struct SeqBlock {
    pub enc: IdMatrix,
    pub dec_in: IdMatrix,
    pub dec_tgt: IdMatrix,
    pub lens: Vec<usize>,
    pub target_mask: Vec<f32>,
}

impl SeqBlock {
    pub fn from_ids(seqs: &[Vec<u32>]) -> SeqBlock {
        let rows = seqs.len();
        let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut enc = vec![PAD; rows * max_len];
        let mut dec_in = vec![PAD; rows * (max_len + 1)];
        let mut dec_tgt = vec![PAD; rows * (max_len + 1)];
        let mut mask = vec![0.0f32; rows * (max_len + 1)];
        let mut lens = Vec::with_capacity(rows);
        for (r, seq) in seqs.iter().enumerate() {
            lens.push(seq.len());
            enc[r * max_len..r * max_len + seq.len()].copy_from_slice(seq);
            let din = &mut dec_in[r * (max_len + 1)..(r + 1) * (max_len + 1)];
            din[0] = BOS;
            din[1..=seq.len()].copy_from_slice(seq);
            let dtg = &mut dec_tgt[r * (max_len + 1)..(r + 1) * (max_len + 1)];
            dtg[..seq.len()].copy_from_slice(seq);
            dtg[seq.len()] = EOS;
            for m in &mut mask[r * (max_len + 1)..r * (max_len + 1) + seq.len() + 1] {
                *m = 1.0;
            }
        }
        SeqBlock {
            enc: IdMatrix {
                rows,
                cols: max_len,
                data: enc,
            },
            dec_in: IdMatrix {
                rows,
                cols: max_len + 1,
                data: dec_in,
            },
            dec_tgt: IdMatrix {
                rows,
                cols: max_len + 1,
                data: dec_tgt,
            },
            lens,
            target_mask: mask,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.enc.rows
    }

    /// Number of real (non-pad) decoder target positions, EOS included.
    pub fn target_tokens(&self) -> usize {
        self.lens.iter().map(|l| l + 1).sum()
    }
}

/// One mini-batch with padded x and y sides and original corpus indices.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: SeqBlock,
    pub y: SeqBlock,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

/// Numericalize a slice of examples into one batch, in the given order.
pub fn batch_from_examples(
    examples: &[&ParallelExample],
    text_vocab: &Vocab,
    syntax_vocab: &Vocab,
    indices: Vec<usize>,
) -> Batch {
    let xs: Vec<Vec<u32>> = examples.iter().map(|e| text_vocab.numericalize(&e.x)).collect();
    let ys: Vec<Vec<u32>> = examples.iter().map(|e| syntax_vocab.numericalize(&e.y)).collect();
    Batch {
        x: SeqBlock::from_ids(&xs),
        y: SeqBlock::from_ids(&ys),
        indices,
    }
}

/// Shuffle by seed, group into length buckets, and emit batches. Every
/// example appears exactly once per call.
pub fn make_batches(
    examples: &[ParallelExample],
    text_vocab: &Vocab,
    syntax_vocab: &Vocab,
    batch_size: usize,
    seed: u64,
) -> Vec<Batch> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    // Stable sort by bucket keeps the shuffled order within each bucket.
    order.sort_by_key(|&i| examples[i].x.len() / BUCKET_WIDTH);

    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&ParallelExample> = chunk.iter().map(|&i| &examples[i]).collect();
            batch_from_examples(&refs, text_vocab, syntax_vocab, chunk.to_vec())
        })
        .collect();
    batches.shuffle(&mut rng);
    batches
}
