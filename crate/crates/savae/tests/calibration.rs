//! Scratch calibration runs (ignored by default).

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use savae::corpus::SeqBlock;
use savae::evaluation::{self, DiversitySetting};
use savae::model::ModelConfig;
use savae::training::{train, TrainConfig};

#[test]
#[ignore]
fn measure_overfit_speed() {
    let corpus = common::generate_corpus(50, 11);
    let (tv, sv) = common::build_vocabs(&corpus);
    let cfg = TrainConfig {
        lr: 3e-3,
        batch_size: 10,
        max_epochs: 40,
        alpha: 0.5,
        kl_anneal_steps: Some(usize::MAX / 2),
        dropout: 0.0,
        seed: 2024,
        ..Default::default()
    };
    let model_cfg = ModelConfig::new(tv.size(), sv.size());
    let t0 = std::time::Instant::now();
    let out = train(&corpus, &corpus, &tv, &sv, model_cfg, &cfg, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("40 epochs in {dt:.1}s ({:.2}s/epoch)", dt / 40.0);
    for m in out.epochs.iter().step_by(4) {
        println!(
            "epoch {}: recon_x {:.3} recon_y {:.3} kl_z {:.3} kl_s {:.3} val/token {:.4}",
            m.epoch, m.recon_x, m.recon_y, m.kl_z, m.kl_s, m.val_nll
        );
    }
    println!("last val/token {:.4}", out.epochs.last().unwrap().val_nll);
}

fn env(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn fixture_b_config(tv: usize, sv: usize) -> ModelConfig {
    let mut m = ModelConfig::new(tv, sv);
    m.d_z = env("CAL_DZ", 8);
    m.d_s = env("CAL_DS", 16);
    m.text_emb_dim = 64;
    m.syntax_emb_dim = 24;
    m.enc1_hidden = 128;
    m.enc2_hidden = 128;
    m.enc3_hidden = 64;
    m.dec1_hidden = 128;
    m.dec2_hidden = 64;
    m
}

#[test]
#[ignore]
fn measure_regularized_model_behavior() {
    let corpus = common::generate_corpus(160, 21);
    let (tv, sv) = common::build_vocabs(&corpus);
    let cfg = TrainConfig {
        lr: 3e-3,
        batch_size: 32,
        max_epochs: env("CAL_EPOCHS", 400),
        alpha: env("CAL_ALPHA_PCT", 30) as f64 / 100.0,
        kl_anneal_steps: Some(env("CAL_ANNEAL", 4000)),
        dropout: env("CAL_DROPOUT_PCT", 5) as f32 / 100.0,
        seed: env("CAL_SEED", 77) as u64,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let out = train(
        &corpus,
        &corpus,
        &tv,
        &sv,
        fixture_b_config(tv.size(), sv.size()),
        &cfg,
        None,
    )
    .unwrap();
    println!("fixture B: {} epochs in {:.1}s", cfg.max_epochs, t0.elapsed().as_secs_f64());
    for m in out.epochs.iter().step_by(15) {
        println!(
            "epoch {}: recon_x {:.3} recon_y {:.3} kl_z {:.3} kl_s {:.3} w {:.2} val/token {:.4}",
            m.epoch, m.recon_x, m.recon_y, m.kl_z, m.kl_s, m.kl_weight, m.val_nll
        );
    }

    // diversity direction
    let tagger = evaluation::train_tagger(&corpus, 5, 3).unwrap();
    let params = &out.params;
    let inputs = &corpus[..120.min(corpus.len())];
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut n_plus = 0usize;
    let mut n_minus = 0usize;
    let mut sum_fix_s = 0.0f64;
    let mut sum_fix_z = 0.0f64;
    let t1 = std::time::Instant::now();
    for e in inputs {
        let block = SeqBlock::from_ids(&[tv.numericalize(&e.x)]);
        let ds = evaluation::syntax_diversity(
            params,
            &tagger,
            &block,
            10,
            DiversitySetting::FixS,
            &tv,
            16,
            &mut rng,
        )
        .unwrap();
        let dz = evaluation::syntax_diversity(
            params,
            &tagger,
            &block,
            10,
            DiversitySetting::FixZ,
            &tv,
            16,
            &mut rng,
        )
        .unwrap();
        sum_fix_s += ds as f64;
        sum_fix_z += dz as f64;
        if dz > ds {
            n_plus += 1;
        }
        if ds > dz {
            n_minus += 1;
        }
    }
    println!(
        "diversity over {} inputs in {:.1}s: mean fix_s {:.2}, mean fix_z {:.2}, n+ {} n- {}",
        inputs.len(),
        t1.elapsed().as_secs_f64(),
        sum_fix_s / inputs.len() as f64,
        sum_fix_z / inputs.len() as f64,
        n_plus,
        n_minus
    );

    // verb probe: base rates from unmodified from-y generation
    let t2 = std::time::Instant::now();
    let targets: Vec<String> = common::VERB_TAGS.iter().map(|s| s.to_string()).collect();
    let report =
        evaluation::verb_modification_probe(params, &tagger, &corpus, &tv, &sv, &targets, 16)
            .unwrap();
    // base rate per target: tag the unmodified from-y reconstructions
    let mut base_counts = std::collections::BTreeMap::new();
    for e in &corpus {
        let x_block = SeqBlock::from_ids(&[tv.numericalize(&e.x)]);
        let y_block = SeqBlock::from_ids(&[sv.numericalize(&e.y)]);
        let opts = savae::decoding::ReconstructOptions {
            s_source: savae::decoding::SSource::FromY,
            max_len: Some(16),
            ..Default::default()
        };
        let hyp = savae::decoding::reconstruct(params, &x_block, Some(&y_block), &opts, &mut rng)
            .unwrap();
        let words = tv.denumericalize(&hyp.tokens);
        let types = evaluation::verb_types(&tagger.tag(&words));
        if types.len() == 1 {
            *base_counts.entry(types.into_iter().next().unwrap()).or_insert(0usize) += 1;
        }
    }
    println!("probe in {:.1}s", t2.elapsed().as_secs_f64());
    for row in &report.rows {
        let base = *base_counts.get(&row.target).unwrap_or(&0) as f64 / corpus.len() as f64;
        println!(
            "target {}: modified rate {:.3} vs base rate {:.3} (total {})",
            row.target,
            row.rate(),
            base,
            row.total
        );
    }
}
