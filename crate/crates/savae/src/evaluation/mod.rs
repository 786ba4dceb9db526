//! Quantitative evaluation: reconstruction NLL/PPL, syntax Recall@K,
//! Levenshtein distance, syntax-diversity counting, and the verb-type
//! modification probe. All measurements here are deterministic given the
//! inputs (posterior means, greedy decoding, seeded sampling).

pub mod tagger;

use std::collections::BTreeSet;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::corpus::{batch_from_examples, ParallelExample, SeqBlock, Vocab};
use crate::decoding::{greedy_rows, TextDecoder};
use crate::error::{Error, Result};
use crate::model::{
    decode_x_nll, encode_s_from_x, encode_s_from_y, encode_z, kl_gaussian_standard, normal_noise,
    reparameterize, GaussianParams, SavaeParams,
};
pub use tagger::PerceptronTagger;

/// Aggregate reconstruction metrics over one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    /// Total teacher-forced reconstruction NLL in nats (EOS positions
    /// included), at posterior means.
    pub nll_total: f64,
    /// exp(nll_total / token_count).
    pub ppl: f64,
    pub token_count: usize,
    pub examples: usize,
    /// Mean per-example KL terms, logged separately from the NLL.
    pub kl_z: f64,
    pub kl_s: f64,
}

impl EvalReport {
    pub fn nll_per_example(&self) -> f64 {
        self.nll_total / self.examples as f64
    }

    pub fn nll_per_token(&self) -> f64 {
        self.nll_total / self.token_count as f64
    }
}

/// Deterministic split evaluation: s is inferred from the input text only,
/// both latents sit at their posterior means, dropout off.
pub fn eval_nll_ppl(
    params: &SavaeParams,
    examples: &[ParallelExample],
    text_vocab: &Vocab,
    syntax_vocab: &Vocab,
    batch_size: usize,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let mut nll_total = 0.0f64;
    let mut kl_z_total = 0.0f64;
    let mut kl_s_total = 0.0f64;
    let mut tokens = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0); // dropout off: never consulted
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&ParallelExample> = chunk.iter().collect();
        let batch = batch_from_examples(&refs, text_vocab, syntax_vocab, (0..refs.len()).collect());
        let mut g = Graph::new();
        let post_z = encode_z(&mut g, params, &batch.x, 0.0, &mut rng)?;
        let post_s = encode_s_from_x(&mut g, params, &batch.x, 0.0, &mut rng)?;
        let nll = decode_x_nll(
            &mut g,
            params,
            &post_z.mean,
            &post_s.mean,
            &batch.x,
            0.0,
            &mut rng,
        )?;
        let kl_z = kl_gaussian_standard(&mut g, &post_z)?;
        let kl_s = kl_gaussian_standard(&mut g, &post_s)?;
        nll_total += nll.data().iter().map(|&v| v as f64).sum::<f64>();
        kl_z_total += kl_z.data().iter().map(|&v| v as f64).sum::<f64>();
        kl_s_total += kl_s.data().iter().map(|&v| v as f64).sum::<f64>();
        tokens += batch.x.target_tokens();
    }
    Ok(EvalReport {
        nll_total,
        ppl: (nll_total / tokens as f64).exp(),
        token_count: tokens,
        examples: examples.len(),
        kl_z: kl_z_total / examples.len() as f64,
        kl_s: kl_s_total / examples.len() as f64,
    })
}

/// Fraction of examples whose gold sequence appears among the top K
/// predictions (exact sequence match).
pub fn recall_at_k<T: PartialEq>(
    predictions: &[Vec<Vec<T>>],
    golds: &[Vec<T>],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Contract("recall@K needs K >= 1".into()));
    }
    if predictions.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} prediction lists vs {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Contract("recall@K over an empty set".into()));
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(preds, gold)| preds.iter().take(k).any(|p| p == *gold))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Unit-cost edit distance (insertions, deletions, substitutions) between
/// two token sequences; classic two-row dynamic program.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(ai != bj);
            cur[j + 1] = substitute.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// How many distinct sequences appear.
pub fn count_unique_sequences(seqs: &[Vec<String>]) -> usize {
    seqs.iter().collect::<BTreeSet<_>>().len()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiversitySetting {
    /// Sample both latents.
    Std,
    /// z at its mean, s sampled.
    FixZ,
    /// s at its mean, z sampled.
    FixS,
}

/// Number of unique syntactic structures among `n_samples` reconstructions
/// of one input: generate under the setting, tag each output, count
/// distinct tag sequences.
pub fn syntax_diversity(
    params: &SavaeParams,
    tagger: &PerceptronTagger,
    x: &SeqBlock,
    n_samples: usize,
    setting: DiversitySetting,
    text_vocab: &Vocab,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let mut g = Graph::new();
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    let post_z = encode_z(&mut g, params, x, 0.0, &mut dummy)?;
    let post_s = encode_s_from_x(&mut g, params, x, 0.0, &mut dummy)?;

    let z_rows = latent_rows(&post_z, n_samples, setting != DiversitySetting::FixZ, rng)?;
    let s_rows = latent_rows(&post_s, n_samples, setting != DiversitySetting::FixS, rng)?;

    let dec = TextDecoder::new(params, &z_rows, &s_rows)?;
    let generations = greedy_rows(&dec, n_samples, max_len)?;
    let tagged: Vec<Vec<String>> = generations
        .iter()
        .map(|ids| {
            let words = text_vocab.denumericalize(ids);
            tagger.tag(&words)
        })
        .collect();
    Ok(count_unique_sequences(&tagged))
}

/// `n` rows drawn from (or fixed at the mean of) a single-example posterior.
fn latent_rows(
    post: &GaussianParams,
    n: usize,
    sample: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    let d = post.dim();
    let mean = post.mean.data();
    let lv = post.log_var.data();
    if !sample {
        return Ok(mean.repeat(n));
    }
    let tiled = GaussianParams {
        mean: crate::autodiff::Tensor::from_vec(vec![n, d], mean.repeat(n))?,
        log_var: crate::autodiff::Tensor::from_vec(vec![n, d], lv.repeat(n))?,
    };
    let mut g = Graph::new();
    let eps = normal_noise(&[n, d], rng);
    Ok(reparameterize(&mut g, &tiled, &eps)?.data().to_vec())
}

/// The five verb-type tags of the modification probe.
pub const VERB_TAGS: [&str; 5] = ["VBD", "VBZ", "VBP", "VBG", "VBN"];

/// Distinct verb-type tags present in a tag sequence.
pub fn verb_types(tags: &[String]) -> BTreeSet<String> {
    tags.iter()
        .filter(|t| VERB_TAGS.contains(&t.as_str()))
        .cloned()
        .collect()
}

#[derive(Clone, Debug)]
pub struct ProbeRow {
    pub target: String,
    pub total: usize,
    pub matched: usize,
}

impl ProbeRow {
    pub fn rate(&self) -> f64 {
        self.matched as f64 / self.total.max(1) as f64
    }

    /// Tab-separated report line: target_tag total matched rate.
    pub fn log_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.target, self.total, self.matched, self.rate())
    }
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    /// Examples dropped because their gold syntax had zero or several verb
    /// types.
    pub skipped: usize,
}

/// Shared verb-rewrite workflow: filter to examples with exactly one verb
/// type, rewrite those verb tags to `target`, infer s from the modified
/// syntax via enc3, and regenerate greedily with the original z (both latents
/// at their means). Returns the generated words per eligible example (with
/// its index into `examples`) and the number of ineligible examples.
#[allow(clippy::type_complexity)]
pub fn modify_syntax_generate(
    params: &SavaeParams,
    examples: &[ParallelExample],
    text_vocab: &Vocab,
    syntax_vocab: &Vocab,
    target: &str,
    max_len: usize,
) -> Result<(Vec<(usize, Vec<String>)>, usize)> {
    let mut eligible: Vec<(usize, &ParallelExample)> = Vec::new();
    let mut skipped = 0usize;
    for (i, e) in examples.iter().enumerate() {
        if verb_types(&e.y).len() == 1 {
            eligible.push((i, e));
        } else {
            skipped += 1;
        }
    }
    if eligible.is_empty() {
        return Err(Error::Contract(
            "no example carries exactly one verb type".into(),
        ));
    }

    // batched: one z row and one s row per example, one greedy sweep
    let mut z_rows: Vec<f32> = Vec::new();
    let mut s_rows: Vec<f32> = Vec::new();
    for (_, e) in &eligible {
        let modified: Vec<String> = e
            .y
            .iter()
            .map(|t| {
                if VERB_TAGS.contains(&t.as_str()) {
                    target.to_string()
                } else {
                    t.clone()
                }
            })
            .collect();
        let x_block = SeqBlock::from_ids(&[text_vocab.numericalize(&e.x)]);
        let y_block = SeqBlock::from_ids(&[syntax_vocab.numericalize(&modified)]);
        let mut g = Graph::new();
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let post_z = encode_z(&mut g, params, &x_block, 0.0, &mut dummy)?;
        let post_s = encode_s_from_y(&mut g, params, &y_block, 0.0, &mut dummy)?;
        z_rows.extend_from_slice(post_z.mean.data());
        s_rows.extend_from_slice(post_s.mean.data());
    }
    let dec = TextDecoder::new(params, &z_rows, &s_rows)?;
    let generations = greedy_rows(&dec, eligible.len(), max_len)?;
    let out = eligible
        .iter()
        .zip(generations)
        .map(|(&(i, _), ids)| (i, text_vocab.denumericalize(&ids)))
        .collect();
    Ok((out, skipped))
}

/// Verb-type modification probe: for each eligible example (exactly one verb
/// type in its gold syntax) and each target tag, rewrite the verb tags to
/// the target, infer s from the modified syntax, regenerate with the
/// original z (both at means), tag the output, and count outputs whose verb
/// type is exactly the target.
pub fn verb_modification_probe(
    params: &SavaeParams,
    tagger: &PerceptronTagger,
    examples: &[ParallelExample],
    text_vocab: &Vocab,
    syntax_vocab: &Vocab,
    targets: &[String],
    max_len: usize,
) -> Result<ProbeReport> {
    let mut rows = Vec::with_capacity(targets.len());
    let mut skipped = 0usize;
    for target in targets {
        let (generations, skip) =
            modify_syntax_generate(params, examples, text_vocab, syntax_vocab, target, max_len)?;
        skipped = skip;
        let mut matched = 0usize;
        for (_, words) in &generations {
            let tags = tagger.tag(words);
            let types = verb_types(&tags);
            if types.len() == 1 && types.contains(target) {
                matched += 1;
            }
        }
        rows.push(ProbeRow {
            target: target.clone(),
            total: generations.len(),
            matched,
        });
    }
    Ok(ProbeReport { rows, skipped })
}

/// Train the internal tagger from a parallel corpus (x as tokens, y as tags).
pub fn train_tagger(
    examples: &[ParallelExample],
    iterations: usize,
    seed: u64,
) -> Result<PerceptronTagger> {
    let corpus: Vec<(Vec<String>, Vec<String>)> = examples
        .iter()
        .map(|e| (e.x.clone(), e.y.clone()))
        .collect();
    PerceptronTagger::train(&corpus, iterations, seed)
}

/// CSV export of the syntactic latent space: one row per sentence with the
/// mean of q(s|x), the sentence length, and the gold syntax string.
pub fn export_latents<W: Write>(
    params: &SavaeParams,
    examples: &[ParallelExample],
    text_vocab: &Vocab,
    out: &mut W,
) -> Result<usize> {
    let d = params.config.d_s;
    write!(out, "id")?;
    for j in 0..d {
        write!(out, ",s_{j}")?;
    }
    writeln!(out, ",length,syntax")?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (i, e) in examples.iter().enumerate() {
        let block = SeqBlock::from_ids(&[text_vocab.numericalize(&e.x)]);
        let mut g = Graph::new();
        let post = encode_s_from_x(&mut g, params, &block, 0.0, &mut rng)?;
        write!(out, "{i}")?;
        for v in post.mean.data() {
            write!(out, ",{v}")?;
        }
        writeln!(out, ",{},{}", e.x.len(), e.y.join(" "))?;
    }
    Ok(examples.len())
}
