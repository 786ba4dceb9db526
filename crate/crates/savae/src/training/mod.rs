//! Optimization loop: Adam with bias correction, linear KL annealing,
//! per-epoch checkpointing, and deterministic seeding.

pub mod checkpoint;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{make_batches, ParallelExample, Vocab};
use crate::error::{Error, Result};
use crate::model::{loss_supervised, LossSettings, ModelConfig, SavaeParams};

/// Adam optimizer state: one (m, v) pair per parameter tensor, kept in the
/// model's fixed visit order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    slots: Vec<MomentSlot>,
}

#[derive(Clone, Debug)]
struct MomentSlot {
    name: String,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamState {
    pub fn new(params: &SavaeParams, lr: f32) -> Self {
        let mut slots = Vec::new();
        params.visit(&mut |name, t| {
            slots.push(MomentSlot {
                name,
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
            });
        });
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots,
        }
    }

    pub(crate) fn from_raw(
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
        step: u64,
        raw: Vec<(String, Vec<f32>, Vec<f32>)>,
    ) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step,
            slots: raw
                .into_iter()
                .map(|(name, m, v)| MomentSlot { name, m, v })
                .collect(),
        }
    }

    pub(crate) fn raw_slots(&self) -> impl Iterator<Item = (&str, &[f32], &[f32])> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.m[..], &s.v[..]))
    }

    /// One bias-corrected Adam update over every parameter. Gradients must
    /// be finite (a NaN/Inf gradient aborts before touching anything) and
    /// are zeroed after the update. Parameters with no gradient are left
    /// untouched beyond their (zero) moment decay.
    pub fn step(&mut self, params: &mut SavaeParams) -> Result<()> {
        let mut bad: Option<String> = None;
        params.visit(&mut |name, t| {
            if bad.is_none() {
                if let Some(g) = t.grad() {
                    if !g.iter().all(|v| v.is_finite()) {
                        bad = Some(name);
                    }
                }
            }
        });
        if let Some(param) = bad {
            return Err(Error::BadGradient { param });
        }

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let mut idx = 0;
        let slots = &mut self.slots;
        params.visit_mut(&mut |name, t| {
            let slot = &mut slots[idx];
            idx += 1;
            debug_assert_eq!(slot.name, name, "optimizer slot order drifted");
            let has_grad = t.grad().is_some();
            if has_grad {
                let grad: Vec<f32> = t.grad().unwrap().to_vec();
                let data = t.data_mut();
                for i in 0..data.len() {
                    let g = grad[i];
                    slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                    slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v[i] / bc2;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
                t.zero_grad();
            }
        });
        Ok(())
    }
}

/// Linear KL annealing: min(step / anneal_steps, 1).
pub fn kl_anneal_weight(step: usize, anneal_steps: usize) -> f32 {
    assert!(anneal_steps >= 1, "anneal_steps must be >= 1");
    (step as f64 / anneal_steps as f64).min(1.0) as f32
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut SavaeParams, max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    params.visit(&mut |_, t| {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
    });
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        params.visit_mut(&mut |_, t| {
            if let Some(g) = t.grad_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        });
    }
    norm
}

/// Training hyperparameters. Defaults: lr 1e-3, batch 64, 24 epochs,
/// alpha 0.5, dropout 0.2, KL annealed over the first 4 epochs, gradient
/// clipping at global norm 5.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub alpha: f64,
    /// None: anneal over the steps of the first 4 epochs.
    pub kl_anneal_steps: Option<usize>,
    pub dropout: f32,
    pub seed: u64,
    /// None disables clipping.
    pub clip_norm: Option<f32>,
    pub n_kl_samples: usize,
    pub syntax_channel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 24,
            alpha: 0.5,
            kl_anneal_steps: None,
            dropout: 0.2,
            seed: 1234,
            clip_norm: Some(5.0),
            n_kl_samples: 1,
            syntax_channel: true,
        }
    }
}

/// One row of the per-epoch metrics log.
#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub recon_x: f32,
    pub recon_y: f32,
    pub kl_z: f32,
    pub kl_s: f32,
    pub kl_weight: f32,
    /// Per-token validation reconstruction NLL (NaN when no validation set).
    pub val_nll: f64,
    pub switch_from_x: f32,
}

impl EpochMetrics {
    /// Tab-separated log line: epoch recon_x recon_y kl_z kl_s kl_weight val_nll.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.recon_x, self.recon_y, self.kl_z, self.kl_s, self.kl_weight, self.val_nll
        )
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub params: SavaeParams,
    pub epochs: Vec<EpochMetrics>,
    /// Epoch (1-based) whose checkpoint had the best validation NLL.
    pub best_epoch: Option<usize>,
}

/// 95th-percentile sequence length (by sorted rank) of an iterator of lengths.
pub fn percentile_95(lengths: impl Iterator<Item = usize>) -> usize {
    let mut v: Vec<usize> = lengths.collect();
    if v.is_empty() {
        return 0;
    }
    v.sort_unstable();
    let rank = ((v.len() as f64) * 0.95).ceil() as usize;
    v[rank.saturating_sub(1).min(v.len() - 1)]
}

/// Train on shuffled mini-batches of (x, y) pairs. Per-example Bernoulli
/// switches, train-mode dropout, per-epoch metrics and checkpoints, and a
/// best-validation checkpoint when `out_dir` is given. A non-finite loss
/// aborts with the last epoch's checkpoint still on disk.
pub fn train(
    train_set: &[ParallelExample],
    valid_set: &[ParallelExample],
    text_vocab: &Vocab,
    syntax_vocab: &Vocab,
    mut model_cfg: ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    model_cfg.text_len_p95 = percentile_95(train_set.iter().map(|e| e.x.len())).max(1);
    model_cfg.syntax_len_p95 = percentile_95(train_set.iter().map(|e| e.y.len())).max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = SavaeParams::new(model_cfg, &mut rng);
    let mut adam = AdamState::new(&params, cfg.lr);

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let anneal_steps = cfg.kl_anneal_steps.unwrap_or(4 * steps_per_epoch).max(1);

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut global_step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let shuffle_seed: u64 = rng.random();
        let batches = make_batches(train_set, text_vocab, syntax_vocab, cfg.batch_size, shuffle_seed);

        let mut acc = [0.0f64; 4]; // recon_x, recon_y, kl_z, kl_s
        let mut switch_acc = 0.0f64;
        let mut seen = 0usize;
        let mut kl_weight = 0.0f32;

        for batch in &batches {
            kl_weight = kl_anneal_weight(global_step, anneal_steps);
            let settings = LossSettings {
                alpha: cfg.alpha,
                kl_weight,
                n_kl_samples: cfg.n_kl_samples,
                dropout: cfg.dropout,
                syntax_channel: cfg.syntax_channel,
            };
            let mut graph = crate::autodiff::Graph::new();
            params.watch_all(&mut graph);
            let out = loss_supervised(&mut graph, &params, batch, &settings, &mut rng)?;
            if !out.report.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss became non-finite at epoch {epoch}, step {global_step}"
                )));
            }
            graph.backward(&out.loss)?;
            params.pull_grads(&graph);
            drop(graph);
            if let Some(max_norm) = cfg.clip_norm {
                clip_global_norm(&mut params, max_norm);
            }
            adam.step(&mut params)?;
            global_step += 1;

            let n = batch.size() as f64;
            acc[0] += out.report.recon_x as f64 * n;
            acc[1] += out.report.recon_y as f64 * n;
            acc[2] += out.report.kl_z as f64 * n;
            acc[3] += out.report.kl_s as f64 * n;
            switch_acc += out.report.switch_from_x as f64 * n;
            seen += batch.size();
        }

        let val_nll = if valid_set.is_empty() {
            f64::NAN
        } else {
            validation_nll_per_token(&params, valid_set, text_vocab, syntax_vocab, cfg.batch_size)?
        };

        let metrics = EpochMetrics {
            epoch,
            recon_x: (acc[0] / seen as f64) as f32,
            recon_y: (acc[1] / seen as f64) as f32,
            kl_z: (acc[2] / seen as f64) as f32,
            kl_s: (acc[3] / seen as f64) as f32,
            kl_weight,
            val_nll,
            switch_from_x: (switch_acc / seen as f64) as f32,
        };

        if let Some(dir) = out_dir {
            let mut log = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("metrics.tsv"))?;
            writeln!(log, "{}", metrics.log_line())?;
            checkpoint::save_checkpoint(
                &params,
                text_vocab,
                syntax_vocab,
                None,
                &dir.join(format!("epoch_{epoch}.ckpt")),
            )?;
            let improved = val_nll.is_finite()
                && best.map(|(_, b)| val_nll < b).unwrap_or(true);
            if improved {
                best = Some((epoch, val_nll));
                checkpoint::save_checkpoint(
                    &params,
                    text_vocab,
                    syntax_vocab,
                    None,
                    &dir.join("best.ckpt"),
                )?;
            }
        } else if val_nll.is_finite() && best.map(|(_, b)| val_nll < b).unwrap_or(true) {
            best = Some((epoch, val_nll));
        }

        epochs.push(metrics);
    }

    Ok(TrainOutcome {
        params,
        epochs,
        best_epoch: best.map(|(e, _)| e),
    })
}

/// Deterministic per-token teacher-forced reconstruction NLL at posterior
/// means (no dropout, no sampling); the validation metric.
pub fn validation_nll_per_token(
    params: &SavaeParams,
    examples: &[ParallelExample],
    text_vocab: &Vocab,
    syntax_vocab: &Vocab,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0f64;
    let mut tokens = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0); // untouched: dropout is off
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&ParallelExample> = chunk.iter().collect();
        let batch = crate::corpus::batch_from_examples(
            &refs,
            text_vocab,
            syntax_vocab,
            (0..refs.len()).collect(),
        );
        let mut g = crate::autodiff::Graph::new();
        let post_z = crate::model::encode_z(&mut g, params, &batch.x, 0.0, &mut rng)?;
        let post_s = crate::model::encode_s_from_x(&mut g, params, &batch.x, 0.0, &mut rng)?;
        let nll = crate::model::decode_x_nll(
            &mut g,
            params,
            &post_z.mean,
            &post_s.mean,
            &batch.x,
            0.0,
            &mut rng,
        )?;
        total += nll.data().iter().map(|&v| v as f64).sum::<f64>();
        tokens += batch.x.target_tokens();
    }
    Ok(total / tokens as f64)
}
