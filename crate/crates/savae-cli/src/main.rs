//! Command-line surface for training, evaluating, and sampling SAVAE models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use savae::corpus::{self, ParallelExample, SeqBlock, Vocab};
use savae::decoding::{
    self, generate, greedy_rows, DecodeMode, LatentMode, ReconstructOptions, SSource, TextDecoder,
};
use savae::error::Error as SavaeError;
use savae::evaluation::{self, PerceptronTagger};
use savae::training::{self, checkpoint};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "savae",
    version,
    about = "Train and probe a text VAE with a dedicated syntactic latent variable"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LatentModeArg {
    Mean,
    Sample,
}

impl From<LatentModeArg> for LatentMode {
    fn from(v: LatentModeArg) -> Self {
        match v {
            LatentModeArg::Mean => LatentMode::Mean,
            LatentModeArg::Sample => LatentMode::Sample,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SSourceArg {
    FromX,
    FromY,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DecodeModeArg {
    Greedy,
    Beam,
    Sample,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl SplitArg {
    fn file(&self) -> &'static str {
        match self {
            SplitArg::Train => "train.tsv",
            SplitArg::Valid => "valid.tsv",
            SplitArg::Test => "test.tsv",
        }
    }
}

#[derive(Args)]
struct DecodeArgs {
    /// greedy, beam, or sample
    #[arg(long, value_enum, default_value = "greedy")]
    decode_mode: DecodeModeArg,
    /// beam width for --decode-mode beam
    #[arg(long, default_value_t = 10)]
    beam: usize,
    /// softmax temperature for --decode-mode sample
    #[arg(long, default_value_t = 1.0)]
    temperature: f32,
    /// generation cap; default: twice the training 95th-percentile length
    #[arg(long)]
    max_len: Option<usize>,
}

impl DecodeArgs {
    fn mode(&self) -> Result<DecodeMode, CliError> {
        match self.decode_mode {
            DecodeModeArg::Greedy => Ok(DecodeMode::Greedy),
            DecodeModeArg::Beam => {
                if self.beam == 0 {
                    return Err(CliError::usage("--beam must be >= 1"));
                }
                Ok(DecodeMode::Beam { width: self.beam })
            }
            DecodeModeArg::Sample => {
                if !(self.temperature > 0.0) {
                    return Err(CliError::usage("--temperature must be positive"));
                }
                Ok(DecodeMode::Sample {
                    temperature: self.temperature,
                })
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a corpus directory (train.tsv / valid.tsv)
    Train {
        /// key=value config file; flags below override its values
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        dropout: Option<f32>,
        #[arg(long)]
        kl_anneal_steps: Option<usize>,
    },
    /// Reconstruction NLL / PPL of a split (s inferred from text only)
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Re-generate input sentences from their posteriors
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        /// one record per line: `text-tokens" or `text-tokens<TAB>syntax-tokens`
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "mean")]
        z_mode: LatentModeArg,
        #[arg(long, value_enum, default_value = "mean")]
        s_mode: LatentModeArg,
        #[arg(long, value_enum, default_value = "from-x")]
        s_source: SSourceArg,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        /// output file (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank likely syntax sequences for input text by beam search
    InferSyntax {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rewrite the verb tags of each input's syntax and regenerate its text
    ModifySyntax {
        #[arg(long)]
        ckpt: PathBuf,
        /// parallel records: `text-tokens<TAB>syntax-tokens`
        #[arg(long)]
        input: PathBuf,
        /// target verb tag (VBD, VBZ, VBP, VBG, or VBN)
        #[arg(long)]
        target_tag: String,
        /// trained tagger file: adds a `target total matched rate` report
        #[arg(long)]
        tagger: Option<PathBuf>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate sentences from the prior z, s ~ N(0, I)
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(short = 'n', long = "num", default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write mean syntactic latents of a split to CSV
    ExportLatents {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the averaged-perceptron tagger on a corpus directory
    TaggerTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        iterations: usize,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
}

struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: 1,
            msg: msg.into(),
        }
    }
}

impl From<SavaeError> for CliError {
    fn from(e: SavaeError) -> Self {
        let code = match &e {
            SavaeError::Numeric { .. } | SavaeError::Diverged(_) | SavaeError::BadGradient { .. } => 3,
            _ => 2,
        };
        CliError {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: 2,
            msg: e.to_string(),
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                std::process::exit(0);
            }
            eprintln!("{e}");
            std::process::exit(1);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("savae: {}", e.msg);
            std::process::exit(e.code as i32);
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Command::Train {
            config,
            data,
            out,
            seed,
            lr,
            batch_size,
            epochs,
            alpha,
            dropout,
            kl_anneal_steps,
        } => {
            let mut cfg = match config {
                None => RunConfig::default(),
                Some(path) => {
                    let text = fs::read_to_string(&path)?;
                    RunConfig::parse(&text).map_err(|e| {
                        CliError::usage(format!("{}: {e}", path.display()))
                    })?
                }
            };
            if let Some(v) = seed {
                cfg.train.seed = v;
            }
            if let Some(v) = lr {
                cfg.train.lr = v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = epochs {
                cfg.train.max_epochs = v;
            }
            if let Some(v) = alpha {
                cfg.train.alpha = v;
            }
            if let Some(v) = dropout {
                cfg.train.dropout = v;
            }
            if let Some(v) = kl_anneal_steps {
                cfg.train.kl_anneal_steps = Some(v);
            }
            cmd_train(&cfg, &data, &out)
        }
        Command::Eval {
            ckpt,
            data,
            split,
            batch_size,
        } => {
            let loaded = checkpoint::load_checkpoint(&ckpt)?;
            let examples = corpus::load_corpus(&data.join(split.file()))?;
            let report = evaluation::eval_nll_ppl(
                &loaded.params,
                &examples,
                &loaded.text_vocab,
                &loaded.syntax_vocab,
                batch_size,
            )?;
            println!(
                "nll={} ppl={} tokens={}",
                report.nll_per_example(),
                report.ppl,
                report.token_count
            );
            Ok(())
        }
        Command::Reconstruct {
            ckpt,
            input,
            z_mode,
            s_mode,
            s_source,
            decode,
            seed,
            out,
        } => {
            let loaded = checkpoint::load_checkpoint(&ckpt)?;
            let records = read_input(&input)?;
            let mode = decode.mode()?;
            let opts = ReconstructOptions {
                z_mode: z_mode.into(),
                s_mode: s_mode.into(),
                s_source: match s_source {
                    SSourceArg::FromX => SSource::FromX,
                    SSourceArg::FromY => SSource::FromY,
                },
                decode: mode,
                max_len: decode.max_len,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut lines = Vec::new();
            for (x, y) in &records {
                let x_block = SeqBlock::from_ids(&[loaded.text_vocab.numericalize(x)]);
                let y_block = y
                    .as_ref()
                    .map(|tags| SeqBlock::from_ids(&[loaded.syntax_vocab.numericalize(tags)]));
                let hyp = decoding::reconstruct(
                    &loaded.params,
                    &x_block,
                    y_block.as_ref(),
                    &opts,
                    &mut rng,
                )?;
                lines.push(loaded.text_vocab.denumericalize(&hyp.tokens).join(" "));
            }
            write_lines(out.as_deref(), &lines)
        }
        Command::InferSyntax {
            ckpt,
            input,
            beam,
            max_len,
            out,
        } => {
            if beam == 0 {
                return Err(CliError::usage("--beam must be >= 1"));
            }
            let loaded = checkpoint::load_checkpoint(&ckpt)?;
            let records = read_input(&input)?;
            let mut lines = Vec::new();
            for (i, (x, _)) in records.iter().enumerate() {
                let x_block = SeqBlock::from_ids(&[loaded.text_vocab.numericalize(x)]);
                let hyps = decoding::infer_syntax(&loaded.params, &x_block, beam, max_len)?;
                lines.push(format!("# input {i}: {}", x.join(" ")));
                for h in &hyps {
                    lines.push(format!(
                        "{}\t{}",
                        h.log_prob,
                        loaded.syntax_vocab.denumericalize(&h.tokens).join(" ")
                    ));
                }
            }
            write_lines(out.as_deref(), &lines)
        }
        Command::ModifySyntax {
            ckpt,
            input,
            target_tag,
            tagger,
            max_len,
            out,
        } => {
            if !evaluation::VERB_TAGS.contains(&target_tag.as_str()) {
                return Err(CliError::usage(format!(
                    "--target-tag must be one of {:?}",
                    evaluation::VERB_TAGS
                )));
            }
            let loaded = checkpoint::load_checkpoint(&ckpt)?;
            let records = read_input(&input)?;
            let examples: Vec<ParallelExample> = records
                .iter()
                .map(|(x, y)| match y {
                    Some(tags) => Ok(ParallelExample {
                        x: x.clone(),
                        y: tags.clone(),
                    }),
                    None => Err(CliError {
                        code: 2,
                        msg: "modify-syntax input needs `text<TAB>syntax` records".into(),
                    }),
                })
                .collect::<Result<_, _>>()?;
            let cap = max_len
                .unwrap_or_else(|| decoding::default_text_max_len(&loaded.params));
            let (generations, skipped) = evaluation::modify_syntax_generate(
                &loaded.params,
                &examples,
                &loaded.text_vocab,
                &loaded.syntax_vocab,
                &target_tag,
                cap,
            )?;
            if skipped > 0 {
                eprintln!("skipped {skipped} example(s) without exactly one verb type");
            }
            let mut lines = Vec::new();
            let mut matched = 0usize;
            let tagger = tagger
                .map(|p| PerceptronTagger::load(&p))
                .transpose()?;
            for (_, words) in &generations {
                if let Some(t) = &tagger {
                    let types = evaluation::verb_types(&t.tag(words));
                    if types.len() == 1 && types.contains(&target_tag) {
                        matched += 1;
                    }
                }
                lines.push(words.join(" "));
            }
            let report = tagger.is_some().then(|| {
                format!(
                    "{target_tag}\t{}\t{matched}\t{}",
                    generations.len(),
                    matched as f64 / generations.len().max(1) as f64
                )
            });
            match (&out, report) {
                (_, None) => write_lines(out.as_deref(), &lines)?,
                (Some(_), Some(rep)) => {
                    write_lines(out.as_deref(), &lines)?;
                    println!("{rep}");
                }
                (None, Some(rep)) => {
                    write_lines(None, &lines)?;
                    eprintln!("{rep}");
                }
            }
            Ok(())
        }
        Command::Sample {
            ckpt,
            n,
            seed,
            decode,
            out,
        } => {
            let loaded = checkpoint::load_checkpoint(&ckpt)?;
            let mode = decode.mode()?;
            let c = &loaded.params.config;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = savae::model::normal_noise(&[n, c.d_z], &mut rng);
            let s = savae::model::normal_noise(&[n, c.d_s], &mut rng);
            let cap = decode
                .max_len
                .unwrap_or_else(|| decoding::default_text_max_len(&loaded.params));
            let mut lines = Vec::new();
            match mode {
                DecodeMode::Greedy => {
                    let dec = TextDecoder::new(&loaded.params, z.data(), s.data())?;
                    for ids in greedy_rows(&dec, n, cap)? {
                        lines.push(loaded.text_vocab.denumericalize(&ids).join(" "));
                    }
                }
                _ => {
                    for i in 0..n {
                        let zi = &z.data()[i * c.d_z..(i + 1) * c.d_z];
                        let si = &s.data()[i * c.d_s..(i + 1) * c.d_s];
                        let dec = TextDecoder::new(&loaded.params, zi, si)?;
                        let hyps = generate(&dec, mode, cap, Some(&mut rng))?;
                        lines.push(
                            loaded
                                .text_vocab
                                .denumericalize(&hyps[0].tokens)
                                .join(" "),
                        );
                    }
                }
            }
            write_lines(out.as_deref(), &lines)
        }
        Command::ExportLatents {
            ckpt,
            data,
            split,
            out,
        } => {
            let loaded = checkpoint::load_checkpoint(&ckpt)?;
            let examples = corpus::load_corpus(&data.join(split.file()))?;
            let mut buf = Vec::new();
            let rows =
                evaluation::export_latents(&loaded.params, &examples, &loaded.text_vocab, &mut buf)?;
            fs::write(&out, buf)?;
            println!("wrote {rows} rows to {}", out.display());
            Ok(())
        }
        Command::TaggerTrain {
            data,
            out,
            iterations,
            seed,
        } => {
            let examples = corpus::load_corpus(&data.join("train.tsv"))?;
            let tagger = evaluation::train_tagger(&examples, iterations, seed)?;
            let mut correct = 0usize;
            let mut total = 0usize;
            for e in &examples {
                for (got, want) in tagger.tag(&e.x).iter().zip(&e.y) {
                    correct += usize::from(got == want);
                    total += 1;
                }
            }
            tagger.save(&out)?;
            println!(
                "tagger saved to {} (held-in accuracy {})",
                out.display(),
                correct as f64 / total.max(1) as f64
            );
            Ok(())
        }
    }
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let train_set = corpus::load_corpus(&data.join("train.tsv"))?;
    let valid_path = data.join("valid.tsv");
    let valid_set = if valid_path.exists() {
        corpus::load_corpus(&valid_path)?
    } else {
        Vec::new()
    };
    let text_vocab = Vocab::build(
        train_set.iter().map(|e| e.x.as_slice()),
        cfg.text_vocab_cap,
    )?;
    let syntax_vocab = Vocab::build(
        train_set.iter().map(|e| e.y.as_slice()),
        cfg.syntax_vocab_cap,
    )?;

    fs::create_dir_all(out)?;
    fs::write(out.join("config.echo"), cfg.echo())?;
    fs::write(out.join("seed"), format!("{}\n", cfg.train.seed))?;

    let model_cfg = cfg.model_config(text_vocab.size(), syntax_vocab.size());
    let outcome = training::train(
        &train_set,
        &valid_set,
        &text_vocab,
        &syntax_vocab,
        model_cfg,
        &cfg.train,
        Some(out),
    )?;
    for m in &outcome.epochs {
        println!("{}", m.log_line());
    }
    match outcome.best_epoch {
        Some(e) => println!("best_epoch={e}"),
        None => println!("best_epoch=none"),
    }
    Ok(())
}

/// Input records: `text-tokens` or `text-tokens<TAB>syntax-tokens`.
#[allow(clippy::type_complexity)]
fn read_input(path: &Path) -> Result<Vec<(Vec<String>, Option<Vec<String>>)>, CliError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (x_part, y_part) = match line.split_once('\t') {
            None => (line, None),
            Some((x, y)) => (x, Some(y)),
        };
        let x: Vec<String> = x_part.split_whitespace().map(String::from).collect();
        if x.is_empty() {
            return Err(CliError {
                code: 2,
                msg: format!("{}:{}: empty text record", path.display(), no + 1),
            });
        }
        let y = match y_part {
            None => None,
            Some(part) => {
                let tags: Vec<String> = part.split_whitespace().map(String::from).collect();
                if tags.len() != x.len() {
                    return Err(CliError {
                        code: 2,
                        msg: format!(
                            "{}:{}: {} tokens but {} tags",
                            path.display(),
                            no + 1,
                            x.len(),
                            tags.len()
                        ),
                    });
                }
                Some(tags)
            }
        };
        out.push((x, y));
    }
    if out.is_empty() {
        return Err(CliError {
            code: 2,
            msg: format!("{}: no input records", path.display()),
        });
    }
    Ok(out)
}

fn write_lines(out: Option<&Path>, lines: &[String]) -> Result<(), CliError> {
    match out {
        None => {
            let stdout = std::io::stdout();
            let mut h = stdout.lock();
            for line in lines {
                writeln!(h, "{line}")?;
            }
            Ok(())
        }
        Some(path) => {
            let mut body = lines.join("\n");
            body.push('\n');
            fs::write(path, body)?;
            Ok(())
        }
    }
}
