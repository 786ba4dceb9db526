//! The SAVAE computation graph: three encoders, two decoders, latent
//! sampling with a per-example Bernoulli switch, KL terms, and the two
//! training losses.
//!
//! Architecture: enc1 infers z from text, enc2 infers s from text, enc3
//! infers s from syntax. dec1 reconstructs text from (z, s) — its state is
//! initialized from z and s is concatenated to the input at every step; dec2
//! reconstructs syntax from s with no step feeding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Tensor};
use crate::corpus::{Batch, IdMatrix, SeqBlock};
use crate::error::{Error, Result};
use crate::layers::{lstm_step, EmbeddingTable, LinearParams, LstmCellParams, LstmState};

const LN_2PI: f32 = 1.837_877_1;

/// log-variances are kept inside [-LOG_VAR_BOUND, LOG_VAR_BOUND] before any
/// exponentiation (smooth tanh saturation, see `bounded_log_var`).
pub const LOG_VAR_BOUND: f32 = 10.0;

/// Model dimensions. Defaults follow the reference configuration: 200/50
/// token/syntax embeddings, 512 hidden for the text-side networks, 128 for
/// the syntax-side ones, 32-dimensional latents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub text_vocab: usize,
    pub syntax_vocab: usize,
    pub d_z: usize,
    pub d_s: usize,
    pub text_emb_dim: usize,
    pub syntax_emb_dim: usize,
    pub enc1_hidden: usize,
    pub enc2_hidden: usize,
    pub enc3_hidden: usize,
    pub dec1_hidden: usize,
    pub dec2_hidden: usize,
    /// 95th-percentile sequence lengths observed in training; generation
    /// caps default to twice these.
    pub text_len_p95: usize,
    pub syntax_len_p95: usize,
}

impl ModelConfig {
    pub fn new(text_vocab: usize, syntax_vocab: usize) -> Self {
        ModelConfig {
            text_vocab,
            syntax_vocab,
            d_z: 32,
            d_s: 32,
            text_emb_dim: 200,
            syntax_emb_dim: 50,
            enc1_hidden: 512,
            enc2_hidden: 512,
            enc3_hidden: 128,
            dec1_hidden: 512,
            dec2_hidden: 128,
            text_len_p95: 20,
            syntax_len_p95: 20,
        }
    }
}

/// Diagonal Gaussian over a latent: per-example mean and log-variance, both
/// [batch, d]. log_var is bounded by construction when produced by an
/// encoder head.
#[derive(Clone, Debug)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub log_var: Tensor,
}

impl GaussianParams {
    pub fn batch(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.mean.shape()[1]
    }
}

/// One draw of both latents plus the per-example switch outcomes
/// (true = s came from the text encoder).
#[derive(Clone, Debug)]
pub struct LatentSample {
    pub z: Tensor,
    pub s: Tensor,
    pub switches: Vec<bool>,
}

/// Recognition network: embedding + LSTM + two Gaussian heads.
#[derive(Clone, Debug)]
pub struct SeqEncoder {
    pub embed: EmbeddingTable,
    pub cell: LstmCellParams,
    pub head_mean: LinearParams,
    pub head_log_var: LinearParams,
}

impl SeqEncoder {
    fn new(vocab: usize, emb: usize, hidden: usize, latent: usize, rng: &mut ChaCha8Rng) -> Self {
        SeqEncoder {
            embed: EmbeddingTable::new(vocab, emb, rng),
            cell: LstmCellParams::new(emb, hidden, rng),
            head_mean: LinearParams::new(hidden, latent, rng),
            head_log_var: LinearParams::new(hidden, latent, rng),
        }
    }
}

/// Generator network: embedding + LSTM + state-init projections + logits.
#[derive(Clone, Debug)]
pub struct SeqDecoder {
    pub embed: EmbeddingTable,
    pub cell: LstmCellParams,
    pub init_h: LinearParams,
    pub init_c: LinearParams,
    pub logits: LinearParams,
}

impl SeqDecoder {
    fn new(
        vocab: usize,
        emb: usize,
        step_extra: usize,
        hidden: usize,
        init_from: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        SeqDecoder {
            embed: EmbeddingTable::new(vocab, emb, rng),
            cell: LstmCellParams::new(emb + step_extra, hidden, rng),
            init_h: LinearParams::new(init_from, hidden, rng),
            init_c: LinearParams::new(init_from, hidden, rng),
            logits: LinearParams::new(hidden, vocab, rng),
        }
    }
}

/// The full named-parameter set of the three encoders and two decoders.
#[derive(Clone, Debug)]
pub struct SavaeParams {
    pub config: ModelConfig,
    pub enc1: SeqEncoder,
    pub enc2: SeqEncoder,
    pub enc3: SeqEncoder,
    pub dec1: SeqDecoder,
    pub dec2: SeqDecoder,
}

impl SavaeParams {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = &config;
        let enc1 = SeqEncoder::new(c.text_vocab, c.text_emb_dim, c.enc1_hidden, c.d_z, rng);
        let enc2 = SeqEncoder::new(c.text_vocab, c.text_emb_dim, c.enc2_hidden, c.d_s, rng);
        let enc3 = SeqEncoder::new(c.syntax_vocab, c.syntax_emb_dim, c.enc3_hidden, c.d_s, rng);
        let dec1 = SeqDecoder::new(c.text_vocab, c.text_emb_dim, c.d_s, c.dec1_hidden, c.d_z, rng);
        let dec2 = SeqDecoder::new(c.syntax_vocab, c.syntax_emb_dim, 0, c.dec2_hidden, c.d_s, rng);
        SavaeParams {
            config,
            enc1,
            enc2,
            enc3,
            dec1,
            dec2,
        }
    }

    /// Visit every tensor in a fixed order under unique dotted names
    /// (checkpoint addressability and deterministic optimizer order).
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (name, enc) in [("enc1", &self.enc1), ("enc2", &self.enc2), ("enc3", &self.enc3)] {
            f(format!("{name}.embed.weight"), &enc.embed.weights);
            enc.cell.visit(&mut |n, t| f(format!("{name}.lstm.{n}"), t));
            f(format!("{name}.mean.w"), &enc.head_mean.weight);
            f(format!("{name}.mean.b"), &enc.head_mean.bias);
            f(format!("{name}.log_var.w"), &enc.head_log_var.weight);
            f(format!("{name}.log_var.b"), &enc.head_log_var.bias);
        }
        for (name, dec) in [("dec1", &self.dec1), ("dec2", &self.dec2)] {
            f(format!("{name}.embed.weight"), &dec.embed.weights);
            dec.cell.visit(&mut |n, t| f(format!("{name}.lstm.{n}"), t));
            f(format!("{name}.init_h.w"), &dec.init_h.weight);
            f(format!("{name}.init_h.b"), &dec.init_h.bias);
            f(format!("{name}.init_c.w"), &dec.init_c.weight);
            f(format!("{name}.init_c.b"), &dec.init_c.bias);
            f(format!("{name}.logits.w"), &dec.logits.weight);
            f(format!("{name}.logits.b"), &dec.logits.bias);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (name, enc) in [
            ("enc1", &mut self.enc1),
            ("enc2", &mut self.enc2),
            ("enc3", &mut self.enc3),
        ] {
            f(format!("{name}.embed.weight"), &mut enc.embed.weights);
            enc.cell.visit_mut(&mut |n, t| f(format!("{name}.lstm.{n}"), t));
            f(format!("{name}.mean.w"), &mut enc.head_mean.weight);
            f(format!("{name}.mean.b"), &mut enc.head_mean.bias);
            f(format!("{name}.log_var.w"), &mut enc.head_log_var.weight);
            f(format!("{name}.log_var.b"), &mut enc.head_log_var.bias);
        }
        for (name, dec) in [("dec1", &mut self.dec1), ("dec2", &mut self.dec2)] {
            f(format!("{name}.embed.weight"), &mut dec.embed.weights);
            dec.cell.visit_mut(&mut |n, t| f(format!("{name}.lstm.{n}"), t));
            f(format!("{name}.init_h.w"), &mut dec.init_h.weight);
            f(format!("{name}.init_h.b"), &mut dec.init_h.bias);
            f(format!("{name}.init_c.w"), &mut dec.init_c.weight);
            f(format!("{name}.init_c.b"), &mut dec.init_c.bias);
            f(format!("{name}.logits.w"), &mut dec.logits.weight);
            f(format!("{name}.logits.b"), &mut dec.logits.bias);
        }
    }

    pub fn watch_all(&mut self, g: &mut Graph) {
        self.visit_mut(&mut |_, t| g.watch(t));
    }

    pub fn pull_grads(&mut self, g: &Graph) {
        self.visit_mut(&mut |_, t| t.accumulate_grad(g));
    }

    pub fn zero_grads(&mut self) {
        self.visit_mut(&mut |_, t| t.zero_grad());
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

/// Inverted-dropout mask: entries are 0 with probability `prob`, else
/// 1/(1-prob). An empty probability (0.0) draws nothing from the rng.
pub fn dropout_mask(n: usize, prob: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let scale = 1.0 / (1.0 - prob);
    (0..n)
        .map(|_| if rng.random::<f32>() < prob { 0.0 } else { scale })
        .collect()
}

/// Standard-normal noise tensor (untracked constant).
pub fn normal_noise(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("consistent shape")
}

/// Smoothly bound raw head outputs into (-LOG_VAR_BOUND, LOG_VAR_BOUND):
/// bound * tanh(raw / bound). Near-identity around zero, saturating at the
/// bound, so exp never overflows in f32.
fn bounded_log_var(g: &mut Graph, raw: &Tensor) -> Result<Tensor> {
    let squashed = g.scale(raw, 1.0 / LOG_VAR_BOUND)?;
    let t = g.tanh(&squashed)?;
    g.scale(&t, LOG_VAR_BOUND)
}

/// Run an encoder over a padded id matrix, freezing each row's state at its
/// true length so padding never influences the result.
fn run_encoder(
    g: &mut Graph,
    enc: &SeqEncoder,
    ids: &IdMatrix,
    lens: &[usize],
    dropout: f32,
    rng: &mut ChaCha8Rng,
) -> Result<GaussianParams> {
    if lens.iter().any(|&l| l == 0) {
        return Err(Error::Contract("encoder input contains an empty sequence".into()));
    }
    let (batch, t_max) = (ids.rows, ids.cols);
    let hidden = enc.cell.hidden_dim;
    let emb_dim = enc.embed.dim();
    let emb = g.gather(&enc.embed.weights, &ids.data, &[batch, t_max])?;
    let mut state = LstmState::zeros(batch, hidden);
    for t in 0..t_max {
        let mut x_t = g.slice_step(&emb, t)?;
        if dropout > 0.0 {
            let mask = dropout_mask(batch * emb_dim, dropout, rng);
            x_t = g.dropout(&x_t, &mask)?;
        }
        let next = lstm_step(g, &enc.cell, &x_t, &state)?;
        if lens.iter().all(|&l| t < l) {
            state = next;
        } else {
            // Rows past their length keep the old state bit-for-bit.
            let mut keep = vec![0.0f32; batch * hidden];
            for (r, &l) in lens.iter().enumerate() {
                if t < l {
                    keep[r * hidden..(r + 1) * hidden].fill(1.0);
                }
            }
            let drop: Vec<f32> = keep.iter().map(|&v| 1.0 - v).collect();
            let keep_t = Tensor::from_vec(vec![batch, hidden], keep)?;
            let drop_t = Tensor::from_vec(vec![batch, hidden], drop)?;
            let h_live = g.mul(&next.h, &keep_t)?;
            let h_old = g.mul(&state.h, &drop_t)?;
            let c_live = g.mul(&next.c, &keep_t)?;
            let c_old = g.mul(&state.c, &drop_t)?;
            state = LstmState {
                h: g.add(&h_live, &h_old)?,
                c: g.add(&c_live, &c_old)?,
            };
        }
    }
    let mean = enc.head_mean.apply(g, &state.h)?;
    let raw = enc.head_log_var.apply(g, &state.h)?;
    let log_var = bounded_log_var(g, &raw)?;
    Ok(GaussianParams { mean, log_var })
}

/// q(z | x) from enc1.
pub fn encode_z(
    g: &mut Graph,
    params: &SavaeParams,
    x: &SeqBlock,
    dropout: f32,
    rng: &mut ChaCha8Rng,
) -> Result<GaussianParams> {
    run_encoder(g, &params.enc1, &x.enc, &x.lens, dropout, rng)
}

/// q(s | x) from enc2.
pub fn encode_s_from_x(
    g: &mut Graph,
    params: &SavaeParams,
    x: &SeqBlock,
    dropout: f32,
    rng: &mut ChaCha8Rng,
) -> Result<GaussianParams> {
    run_encoder(g, &params.enc2, &x.enc, &x.lens, dropout, rng)
}

/// q(s | y) from enc3.
pub fn encode_s_from_y(
    g: &mut Graph,
    params: &SavaeParams,
    y: &SeqBlock,
    dropout: f32,
    rng: &mut ChaCha8Rng,
) -> Result<GaussianParams> {
    run_encoder(g, &params.enc3, &y.enc, &y.lens, dropout, rng)
}

/// mean + exp(log_var / 2) * eps, differentiable in the Gaussian parameters.
pub fn reparameterize(g: &mut Graph, post: &GaussianParams, eps: &Tensor) -> Result<Tensor> {
    let half = g.scale(&post.log_var, 0.5)?;
    let std = g.exp(&half)?;
    let noise = g.mul(&std, eps)?;
    g.add(&post.mean, &noise)
}

/// Deterministic core of [`sample_latents`]: the caller fixes the noise and
/// the per-example switch outcomes.
pub fn sample_latents_with_noise(
    g: &mut Graph,
    post_z: &GaussianParams,
    post_s_x: &GaussianParams,
    post_s_y: &GaussianParams,
    switches: &[bool],
    eps_z: &Tensor,
    eps_s: &Tensor,
) -> Result<LatentSample> {
    let z = reparameterize(g, post_z, eps_z)?;
    let s = if switches.iter().all(|&a| a) {
        reparameterize(g, post_s_x, eps_s)?
    } else if switches.iter().all(|&a| !a) {
        reparameterize(g, post_s_y, eps_s)?
    } else {
        let (batch, d) = (post_s_x.batch(), post_s_x.dim());
        let mut from_x = vec![0.0f32; batch * d];
        for (r, &a) in switches.iter().enumerate() {
            if a {
                from_x[r * d..(r + 1) * d].fill(1.0);
            }
        }
        let from_y: Vec<f32> = from_x.iter().map(|&v| 1.0 - v).collect();
        let sx = reparameterize(g, post_s_x, eps_s)?;
        let sy = reparameterize(g, post_s_y, eps_s)?;
        let mx = Tensor::from_vec(vec![batch, d], from_x)?;
        let my = Tensor::from_vec(vec![batch, d], from_y)?;
        let px = g.mul(&sx, &mx)?;
        let py = g.mul(&sy, &my)?;
        g.add(&px, &py)?
    };
    Ok(LatentSample {
        z,
        s,
        switches: switches.to_vec(),
    })
}

/// Draw (z, s): z by reparameterization of q(z|x); s from the mixture — a
/// per-example Bernoulli(alpha) switch picks q(s|x) or q(s|y). Degenerate
/// alpha (exactly 0 or 1) draws no switch randomness.
pub fn sample_latents(
    g: &mut Graph,
    post_z: &GaussianParams,
    post_s_x: &GaussianParams,
    post_s_y: &GaussianParams,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LatentSample> {
    check_alpha(alpha)?;
    let batch = post_z.batch();
    let eps_z = normal_noise(&[batch, post_z.dim()], rng);
    let switches = draw_switches(batch, alpha, rng);
    let eps_s = normal_noise(&[batch, post_s_x.dim()], rng);
    sample_latents_with_noise(g, post_z, post_s_x, post_s_y, &switches, &eps_z, &eps_s)
}

fn draw_switches(batch: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    if alpha == 1.0 {
        vec![true; batch]
    } else if alpha == 0.0 {
        vec![false; batch]
    } else {
        (0..batch).map(|_| rng.random_bool(alpha)).collect()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Closed-form KL(q || N(0, I)) per example:
/// 0.5 * sum_d(mu^2 + exp(log_var) - 1 - log_var).
pub fn kl_gaussian_standard(g: &mut Graph, post: &GaussianParams) -> Result<Tensor> {
    let mu2 = g.mul(&post.mean, &post.mean)?;
    let elv = g.exp(&post.log_var)?;
    let a = g.add(&mu2, &elv)?;
    let b = g.add_scalar(&a, -1.0)?;
    let c = g.sub(&b, &post.log_var)?;
    let rows = g.sum_rows(&c)?;
    g.scale(&rows, 0.5)
}

/// Per-example log N(x; mean, diag(exp(log_var))).
fn gaussian_log_density(g: &mut Graph, x: &Tensor, post: &GaussianParams) -> Result<Tensor> {
    let diff = g.sub(x, &post.mean)?;
    let sq = g.mul(&diff, &diff)?;
    let neg_lv = g.scale(&post.log_var, -1.0)?;
    let inv_var = g.exp(&neg_lv)?;
    let quad = g.mul(&sq, &inv_var)?;
    let with_lv = g.add(&quad, &post.log_var)?;
    let inner = g.add_scalar(&with_lv, LN_2PI)?;
    let rows = g.sum_rows(&inner)?;
    g.scale(&rows, -0.5)
}

/// Per-example log N(x; 0, I).
fn standard_normal_log_density(g: &mut Graph, x: &Tensor) -> Result<Tensor> {
    let d = x.shape()[1];
    let sq = g.mul(x, x)?;
    let rows = g.sum_rows(&sq)?;
    let shifted = g.add_scalar(&rows, d as f32 * LN_2PI)?;
    g.scale(&shifted, -0.5)
}

/// Monte-Carlo estimate of KL(q(s|x,y) || p(s)) per example, where q is the
/// two-component mixture selected by the Bernoulli switch. Each sample is
/// drawn through the reparameterization of its selected component, and the
/// full mixture density is evaluated at it, so gradients reach both
/// components.
pub fn kl_mixture_mc(
    g: &mut Graph,
    post_s_x: &GaussianParams,
    post_s_y: &GaussianParams,
    alpha: f64,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    check_alpha(alpha)?;
    if n_samples == 0 {
        return Err(Error::Contract("kl_mixture_mc needs n_samples >= 1".into()));
    }
    let batch = post_s_x.batch();
    let d = post_s_x.dim();
    let mut total: Option<Tensor> = None;
    for _ in 0..n_samples {
        let switches = draw_switches(batch, alpha, rng);
        let eps = normal_noise(&[batch, d], rng);
        let s = if switches.iter().all(|&a| a) {
            reparameterize(g, post_s_x, &eps)?
        } else if switches.iter().all(|&a| !a) {
            reparameterize(g, post_s_y, &eps)?
        } else {
            let mut from_x = vec![0.0f32; batch * d];
            for (r, &a) in switches.iter().enumerate() {
                if a {
                    from_x[r * d..(r + 1) * d].fill(1.0);
                }
            }
            let from_y: Vec<f32> = from_x.iter().map(|&v| 1.0 - v).collect();
            let sx = reparameterize(g, post_s_x, &eps)?;
            let sy = reparameterize(g, post_s_y, &eps)?;
            let mx = Tensor::from_vec(vec![batch, d], from_x)?;
            let my = Tensor::from_vec(vec![batch, d], from_y)?;
            let px = g.mul(&sx, &mx)?;
            let py = g.mul(&sy, &my)?;
            g.add(&px, &py)?
        };

        let log_q = if alpha == 1.0 {
            gaussian_log_density(g, &s, post_s_x)?
        } else if alpha == 0.0 {
            gaussian_log_density(g, &s, post_s_y)?
        } else {
            // log(alpha*N_x + (1-alpha)*N_y) via a max-shifted log-sum-exp;
            // the shift is a constant, so gradients stay exact.
            let lx = gaussian_log_density(g, &s, post_s_x)?;
            let ly = gaussian_log_density(g, &s, post_s_y)?;
            let lxa = g.add_scalar(&lx, (alpha as f32).ln())?;
            let lyb = g.add_scalar(&ly, (1.0 - alpha as f32).ln())?;
            let shift: Vec<f32> = lxa
                .data()
                .iter()
                .zip(lyb.data())
                .map(|(&a, &b)| a.max(b))
                .collect();
            let shift_t = Tensor::from_vec(vec![batch], shift)?;
            let dx = g.sub(&lxa, &shift_t)?;
            let ex = g.exp(&dx)?;
            let dy = g.sub(&lyb, &shift_t)?;
            let ey = g.exp(&dy)?;
            let sum = g.add(&ex, &ey)?;
            let lse = g.log(&sum)?;
            g.add(&lse, &shift_t)?
        };
        let log_p = standard_normal_log_density(g, &s)?;
        let term = g.sub(&log_q, &log_p)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(&acc, &term)?,
        });
    }
    g.scale(&total.expect("n_samples >= 1"), 1.0 / n_samples as f32)
}

/// Teacher-forced text reconstruction NLL per example:
/// sum_t -log p(x_t | x_<t, z, s) over real positions (EOS included). The
/// decoder state starts from two linear projections of z; s is concatenated
/// to the input at every step.
pub fn decode_x_nll(
    g: &mut Graph,
    params: &SavaeParams,
    z: &Tensor,
    s: &Tensor,
    x: &SeqBlock,
    dropout: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    decode_nll(g, &params.dec1, Some(s), z, x, dropout, rng)
}

/// Teacher-forced syntax reconstruction NLL per example; dec2 starts from s
/// and gets no step feeding.
pub fn decode_y_nll(
    g: &mut Graph,
    params: &SavaeParams,
    s: &Tensor,
    y: &SeqBlock,
    dropout: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    decode_nll(g, &params.dec2, None, s, y, dropout, rng)
}

fn decode_nll(
    g: &mut Graph,
    dec: &SeqDecoder,
    step_feed: Option<&Tensor>,
    init_from: &Tensor,
    block: &SeqBlock,
    dropout: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (batch, steps) = (block.dec_in.rows, block.dec_in.cols);
    if steps == 0 || block.lens.iter().any(|&l| l == 0) {
        return Err(Error::Contract("decoder target must be non-empty".into()));
    }
    let emb_dim = dec.embed.dim();
    let mut h = dec.init_h.apply(g, init_from)?;
    let mut c = dec.init_c.apply(g, init_from)?;
    let emb = g.gather(&dec.embed.weights, &block.dec_in.data, &[batch, steps])?;
    let mut total: Option<Tensor> = None;
    for t in 0..steps {
        let mut tok = g.slice_step(&emb, t)?;
        if dropout > 0.0 {
            let mask = dropout_mask(batch * emb_dim, dropout, rng);
            tok = g.dropout(&tok, &mask)?;
        }
        let inp = match step_feed {
            Some(s) => g.concat_last_dim(&tok, s)?,
            None => tok,
        };
        let next = lstm_step(g, &dec.cell, &inp, &LstmState { h, c })?;
        h = next.h;
        c = next.c;
        let logits = dec.logits.apply(g, &h)?;
        let nll_t = g.softmax_cross_entropy(&logits, &block.dec_tgt.column(t))?;
        let mask_col: Vec<f32> = (0..batch)
            .map(|r| block.target_mask[r * steps + t])
            .collect();
        let masked = if mask_col.iter().all(|&m| m == 1.0) {
            nll_t
        } else {
            let m = Tensor::from_vec(vec![batch], mask_col)?;
            g.mul(&nll_t, &m)?
        };
        total = Some(match total {
            None => masked,
            Some(acc) => g.add(&acc, &masked)?,
        });
    }
    Ok(total.expect("steps >= 1"))
}

/// Knobs of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossSettings {
    pub alpha: f64,
    pub kl_weight: f32,
    pub n_kl_samples: usize,
    pub dropout: f32,
    /// With the channel off the syntax branch is disabled entirely (no
    /// recon_y, s inferred from text only): the LSTM-VAE baseline.
    pub syntax_channel: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            alpha: 0.5,
            kl_weight: 1.0,
            n_kl_samples: 1,
            dropout: 0.0,
            syntax_channel: true,
        }
    }
}

/// Per-batch loss components (batch means), for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f32,
    pub recon_x: f32,
    pub recon_y: f32,
    pub kl_z: f32,
    pub kl_s: f32,
    /// Fraction of examples whose s came from the text encoder.
    pub switch_from_x: f32,
}

/// The loss tensor (still attached to the graph) plus its component report.
pub struct LossOutputs {
    pub loss: Tensor,
    pub report: LossReport,
}

/// Negative ELBO for fully observed (x, y) pairs, batch-averaged:
/// kl_weight * (KL_z + KL_s) + recon_x + recon_y. Reconstruction expectations
/// use a single latent draw. KL_s is the Monte-Carlo mixture estimate for
/// interior alpha and the exact closed form when the mixture degenerates
/// (alpha of exactly 0 or 1, or the syntax channel disabled).
pub fn loss_supervised(
    g: &mut Graph,
    params: &SavaeParams,
    batch: &Batch,
    settings: &LossSettings,
    rng: &mut ChaCha8Rng,
) -> Result<LossOutputs> {
    check_alpha(settings.alpha)?;
    if settings.syntax_channel && batch.y.lens.iter().any(|&l| l == 0) {
        return Err(Error::Contract(
            "batch example is missing its syntax sequence; use loss_unsupervised for x-only data"
                .into(),
        ));
    }
    let alpha = if settings.syntax_channel { settings.alpha } else { 1.0 };

    let post_z = encode_z(g, params, &batch.x, settings.dropout, rng)?;
    let post_s_x = encode_s_from_x(g, params, &batch.x, settings.dropout, rng)?;
    let post_s_y = if alpha < 1.0 {
        Some(encode_s_from_y(g, params, &batch.y, settings.dropout, rng)?)
    } else {
        None
    };

    let latents = sample_latents(
        g,
        &post_z,
        &post_s_x,
        post_s_y.as_ref().unwrap_or(&post_s_x),
        alpha,
        rng,
    )?;

    let kl_z = kl_gaussian_standard(g, &post_z)?;
    let kl_s = if alpha == 1.0 {
        kl_gaussian_standard(g, &post_s_x)?
    } else if alpha == 0.0 {
        kl_gaussian_standard(g, post_s_y.as_ref().expect("alpha 0 runs enc3"))?
    } else {
        kl_mixture_mc(
            g,
            &post_s_x,
            post_s_y.as_ref().expect("interior alpha runs enc3"),
            alpha,
            settings.n_kl_samples,
            rng,
        )?
    };

    let recon_x = decode_x_nll(
        g,
        params,
        &latents.z,
        &latents.s,
        &batch.x,
        settings.dropout,
        rng,
    )?;
    let recon_y = if settings.syntax_channel {
        Some(decode_y_nll(
            g,
            params,
            &latents.s,
            &batch.y,
            settings.dropout,
            rng,
        )?)
    } else {
        None
    };

    let mut out = assemble_loss(g, settings.kl_weight, &kl_z, &kl_s, &recon_x, recon_y.as_ref())?;
    out.report.switch_from_x =
        latents.switches.iter().filter(|&&a| a).count() as f32 / latents.switches.len() as f32;
    Ok(out)
}

/// Negative ELBO when only x is observed: recon_x plus closed-form KL terms
/// for z and for s inferred from x. This is the vanilla VAE objective with
/// the extra s channel.
pub fn loss_unsupervised(
    g: &mut Graph,
    params: &SavaeParams,
    x: &SeqBlock,
    kl_weight: f32,
    dropout: f32,
    rng: &mut ChaCha8Rng,
) -> Result<LossOutputs> {
    let post_z = encode_z(g, params, x, dropout, rng)?;
    let post_s_x = encode_s_from_x(g, params, x, dropout, rng)?;
    let latents = sample_latents(g, &post_z, &post_s_x, &post_s_x, 1.0, rng)?;
    let kl_z = kl_gaussian_standard(g, &post_z)?;
    let kl_s = kl_gaussian_standard(g, &post_s_x)?;
    let recon_x = decode_x_nll(g, params, &latents.z, &latents.s, x, dropout, rng)?;
    let mut out = assemble_loss(g, kl_weight, &kl_z, &kl_s, &recon_x, None)?;
    out.report.switch_from_x = 1.0;
    Ok(out)
}

fn assemble_loss(
    g: &mut Graph,
    kl_weight: f32,
    kl_z: &Tensor,
    kl_s: &Tensor,
    recon_x: &Tensor,
    recon_y: Option<&Tensor>,
) -> Result<LossOutputs> {
    let kl_z_m = g.mean(kl_z)?;
    let kl_s_m = g.mean(kl_s)?;
    let rx_m = g.mean(recon_x)?;
    let kl_sum = g.add(&kl_z_m, &kl_s_m)?;
    let weighted = g.scale(&kl_sum, kl_weight)?;
    let mut loss = g.add(&weighted, &rx_m)?;
    let mut ry_val = 0.0;
    if let Some(ry) = recon_y {
        let ry_m = g.mean(ry)?;
        ry_val = ry_m.item()?;
        loss = g.add(&loss, &ry_m)?;
    }
    let report = LossReport {
        total: loss.item()?,
        recon_x: rx_m.item()?,
        recon_y: ry_val,
        kl_z: kl_z_m.item()?,
        kl_s: kl_s_m.item()?,
        switch_from_x: 0.0,
    };
    Ok(LossOutputs { loss, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{batch_from_examples, ParallelExample, SeqBlock, Vocab};
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            text_vocab: 12,
            syntax_vocab: 9,
            d_z: 3,
            d_s: 4,
            text_emb_dim: 5,
            syntax_emb_dim: 4,
            enc1_hidden: 6,
            enc2_hidden: 6,
            enc3_hidden: 5,
            dec1_hidden: 7,
            dec2_hidden: 5,
            text_len_p95: 8,
            syntax_len_p95: 8,
        }
    }

    fn tiny_batch() -> Batch {
        let examples = vec![
            ParallelExample {
                x: "a b c".split_whitespace().map(String::from).collect(),
                y: "N V N".split_whitespace().map(String::from).collect(),
            },
            ParallelExample {
                x: "b d".split_whitespace().map(String::from).collect(),
                y: "V N".split_whitespace().map(String::from).collect(),
            },
        ];
        let tv = Vocab::build(examples.iter().map(|e| e.x.as_slice()), 12).unwrap();
        let sv = Vocab::build(examples.iter().map(|e| e.y.as_slice()), 9).unwrap();
        let refs: Vec<&ParallelExample> = examples.iter().collect();
        batch_from_examples(&refs, &tv, &sv, vec![0, 1])
    }

    fn gaussian(mean: Vec<f32>, log_var: Vec<f32>, batch: usize, d: usize) -> GaussianParams {
        GaussianParams {
            mean: Tensor::from_vec(vec![batch, d], mean).unwrap(),
            log_var: Tensor::from_vec(vec![batch, d], log_var).unwrap(),
        }
    }

    #[test]
    fn default_dims_give_32_dim_latents() {
        let mut r = rng(0);
        let params = SavaeParams::new(ModelConfig::new(40, 20), &mut r);
        let block = SeqBlock::from_ids(&[vec![5, 6, 7], vec![8, 9, 10]]);
        let mut g = Graph::new();
        let post = encode_z(&mut g, &params, &block, 0.0, &mut r).unwrap();
        assert_eq!(post.mean.shape(), &[2, 32]);
        assert_eq!(post.log_var.shape(), &[2, 32]);
        let post_s = encode_s_from_x(&mut g, &params, &block, 0.0, &mut r).unwrap();
        assert_eq!(post_s.mean.shape(), &[2, 32]);
        assert_eq!(g.node_count(), 0, "inference pass must not build a graph");
    }

    #[test]
    fn duplicated_example_gives_identical_rows() {
        let mut r = rng(1);
        let params = SavaeParams::new(tiny_config(), &mut r);
        let block = SeqBlock::from_ids(&[vec![4, 5, 6], vec![4, 5, 6]]);
        let mut g = Graph::new();
        let post = encode_z(&mut g, &params, &block, 0.0, &mut r).unwrap();
        let d = post.dim();
        assert_eq!(post.mean.data()[..d], post.mean.data()[d..2 * d]);
        assert_eq!(post.log_var.data()[..d], post.log_var.data()[d..2 * d]);
    }

    #[test]
    fn encoder_is_padding_invariant_bit_exact() {
        let mut r = rng(2);
        let params = SavaeParams::new(tiny_config(), &mut r);
        let short = SeqBlock::from_ids(&[vec![4, 5, 6]]);
        // Same sequence padded three steps further.
        let mut long = SeqBlock::from_ids(&[vec![4, 5, 6]]);
        long.enc.cols += 3;
        long.enc.data.extend([0, 0, 0]);
        let mut g = Graph::new();
        let a = run_encoder(&mut g, &params.enc1, &short.enc, &short.lens, 0.0, &mut r).unwrap();
        let b = run_encoder(&mut g, &params.enc1, &long.enc, &long.lens, 0.0, &mut r).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.mean), bits(&b.mean));
        assert_eq!(bits(&a.log_var), bits(&b.log_var));
    }

    #[test]
    fn empty_sequence_is_a_contract_error() {
        let mut r = rng(3);
        let params = SavaeParams::new(tiny_config(), &mut r);
        let mut block = SeqBlock::from_ids(&[vec![4]]);
        block.lens[0] = 0;
        let mut g = Graph::new();
        assert!(matches!(
            encode_z(&mut g, &params, &block, 0.0, &mut r),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_noise_returns_the_mean() {
        let mut g = Graph::new();
        let post = gaussian(vec![0.5, -1.0, 2.0], vec![0.3, -0.2, 0.0], 1, 3);
        let eps = Tensor::zeros(&[1, 3]);
        let z = reparameterize(&mut g, &post, &eps).unwrap();
        assert_eq!(z.data(), post.mean.data());
    }

    #[test]
    fn alpha_one_ignores_the_syntax_component() {
        let mut g = Graph::new();
        let post_z = gaussian(vec![0.0; 3], vec![0.0; 3], 1, 3);
        let post_x = gaussian(vec![1.0, 2.0], vec![-0.5, 0.5], 1, 2);
        let post_y1 = gaussian(vec![9.0, 9.0], vec![2.0, 2.0], 1, 2);
        let post_y2 = gaussian(vec![-9.0, -9.0], vec![-2.0, -2.0], 1, 2);
        let mut r1 = rng(7);
        let mut r2 = rng(7);
        let a = sample_latents(&mut g, &post_z, &post_x, &post_y1, 1.0, &mut r1).unwrap();
        let b = sample_latents(&mut g, &post_z, &post_x, &post_y2, 1.0, &mut r2).unwrap();
        assert!(a.switches.iter().all(|&v| v));
        assert_eq!(a.s.data(), b.s.data());
    }

    #[test]
    fn sample_statistics_match_posterior_moments() {
        // 1e5 draws of a 1-d Gaussian: empirical mean within 3 SE of mu,
        // empirical variance within 3 SE of exp(log_var).
        let n = 100_000usize;
        let (mu, lv) = (0.7f64, -0.4f64);
        let post_z = gaussian(vec![mu as f32; n], vec![lv as f32; n], n, 1);
        let mut g = Graph::new();
        let mut r = rng(11);
        let draw = sample_latents(&mut g, &post_z, &post_z, &post_z, 1.0, &mut r).unwrap();
        let zs: Vec<f64> = draw.z.data().iter().map(|&v| v as f64).collect();
        let var = lv.exp();
        let mean_hat = zs.iter().sum::<f64>() / n as f64;
        let se_mean = (var / n as f64).sqrt();
        assert!(
            (mean_hat - mu).abs() < 3.0 * se_mean,
            "mean {mean_hat} vs {mu} (se {se_mean})"
        );
        let var_hat = zs.iter().map(|z| (z - mean_hat).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se_var = var * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!(
            (var_hat - var).abs() < 3.0 * se_var,
            "var {var_hat} vs {var} (se {se_var})"
        );
    }

    #[test]
    fn kl_closed_form_known_values() {
        let mut g = Graph::new();
        let zero = gaussian(vec![0.0, 0.0], vec![0.0, 0.0], 1, 2);
        let kl = kl_gaussian_standard(&mut g, &zero).unwrap();
        assert_eq!(kl.data(), &[0.0]);

        let unit_mean = gaussian(vec![1.0], vec![0.0], 1, 1);
        let kl = kl_gaussian_standard(&mut g, &unit_mean).unwrap();
        assert!((kl.data()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn kl_closed_form_matches_monte_carlo() {
        // 50 random Gaussians, 1e5 samples each (antithetic pairs, which
        // keeps the estimator unbiased while cancelling the odd noise term):
        // closed form within 1% of the MC estimate.
        let mut r = rng(13);
        for case in 0..50 {
            let d = 4;
            let mu: Vec<f32> = (0..d)
                .map(|_| {
                    let m = r.random_range(0.8f32..2.0);
                    if r.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            let lv: Vec<f32> = (0..d).map(|_| r.random_range(-1.0f32..0.5)).collect();
            let pairs = 50_000usize;
            let mut g = Graph::new();
            let post = gaussian(mu.clone(), lv.clone(), 1, d);
            let closed = kl_gaussian_standard(&mut g, &post).unwrap().data()[0] as f64;

            // MC oracle: E_q[log q - log p] in f64 over (e, -e) pairs.
            let mut acc = 0.0f64;
            for _ in 0..pairs {
                let draw: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
                for &sign in &[1.0f64, -1.0] {
                    let mut log_q = 0.0f64;
                    let mut log_p = 0.0f64;
                    for j in 0..d {
                        let e = sign * draw[j];
                        let sd = ((lv[j] as f64) / 2.0).exp();
                        let z = mu[j] as f64 + sd * e;
                        log_q += -0.5 * ((LN_2PI as f64) + lv[j] as f64 + e * e);
                        log_p += -0.5 * ((LN_2PI as f64) + z * z);
                    }
                    acc += log_q - log_p;
                }
            }
            let mc = acc / (2 * pairs) as f64;
            let tol = 0.01 * closed.abs();
            assert!(
                (closed - mc).abs() < tol,
                "case {case}: closed {closed} vs mc {mc}"
            );
        }
    }

    #[test]
    fn mixture_kl_degenerates_to_closed_form() {
        let mut r = rng(17);
        let post = gaussian(vec![0.8, -0.3], vec![0.4, -0.6], 1, 2);
        let mut g = Graph::new();
        let closed = kl_gaussian_standard(&mut g, &post).unwrap().data()[0] as f64;
        let est = kl_mixture_mc(&mut g, &post, &post, 1.0, 100_000, &mut r).unwrap().data()[0] as f64;
        assert!(
            (est - closed).abs() < 0.01 * closed.abs().max(0.02),
            "mc {est} vs closed {closed}"
        );
    }

    #[test]
    fn mixture_kl_of_the_prior_is_zero() {
        let mut r = rng(19);
        let prior = gaussian(vec![0.0, 0.0], vec![0.0, 0.0], 1, 2);
        // Repeated estimates give a standard error; the mean must sit within
        // 3 SE of zero.
        let reps = 10;
        let vals: Vec<f64> = (0..reps)
            .map(|_| {
                let mut g = Graph::new();
                kl_mixture_mc(&mut g, &prior, &prior, 0.5, 4096, &mut r).unwrap().data()[0] as f64
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
        let se = (var / reps as f64).sqrt();
        assert!(mean.abs() < 3.0 * se.max(1e-4), "mean {mean} se {se}");
    }

    #[test]
    fn mixture_kl_matches_quadrature_in_1d() {
        // d = 1 two-component mixture vs Simpson quadrature of the KL
        // integral, within 2%.
        let (mu_x, lv_x) = (0.9f64, -0.3f64);
        let (mu_y, lv_y) = (-0.7f64, 0.5f64);
        let alpha = 0.35f64;

        let log_n = |v: f64, mu: f64, lv: f64| -> f64 {
            -0.5 * ((LN_2PI as f64) + lv + (v - mu) * (v - mu) * (-lv).exp())
        };
        let q = |v: f64| alpha * log_n(v, mu_x, lv_x).exp() + (1.0 - alpha) * log_n(v, mu_y, lv_y).exp();
        let p = |v: f64| log_n(v, 0.0, 0.0).exp();
        // Simpson's rule on [-12, 12].
        let (a, b, steps) = (-12.0f64, 12.0f64, 48_000usize);
        let h = (b - a) / steps as f64;
        let f = |v: f64| {
            let qv = q(v);
            if qv <= 0.0 {
                0.0
            } else {
                qv * (qv.ln() - p(v).ln())
            }
        };
        let mut integral = f(a) + f(b);
        for i in 1..steps {
            let v = a + i as f64 * h;
            integral += f(v) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let quad = integral * h / 3.0;

        let post_x = gaussian(vec![mu_x as f32], vec![lv_x as f32], 1, 1);
        let post_y = gaussian(vec![mu_y as f32], vec![lv_y as f32], 1, 1);
        let mut r = rng(23);
        let mut g = Graph::new();
        let est =
            kl_mixture_mc(&mut g, &post_x, &post_y, alpha, 400_000, &mut r).unwrap().data()[0] as f64;
        assert!(
            (est - quad).abs() < 0.02 * quad.abs().max(0.05),
            "mc {est} vs quadrature {quad}"
        );
    }

    #[test]
    fn alpha_outside_unit_interval_is_rejected() {
        let post = gaussian(vec![0.0], vec![0.0], 1, 1);
        let mut g = Graph::new();
        let mut r = rng(0);
        assert!(matches!(
            kl_mixture_mc(&mut g, &post, &post, 1.2, 4, &mut r),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn kl_terms_are_nonnegative_on_random_posteriors() {
        let mut r = rng(29);
        for _ in 0..100 {
            let d = 4;
            let post = gaussian(
                (0..d).map(|_| r.random_range(-2.0f32..2.0)).collect(),
                (0..d).map(|_| r.random_range(-2.0f32..2.0)).collect(),
                1,
                d,
            );
            let mut g = Graph::new();
            let v = kl_gaussian_standard(&mut g, &post).unwrap().data()[0];
            assert!(v >= 0.0, "closed-form KL negative: {v}");
        }
    }

    #[test]
    fn zero_logits_head_gives_uniform_nll() {
        let mut r = rng(31);
        let mut params = SavaeParams::new(tiny_config(), &mut r);
        params.dec1.logits.weight.data_mut().fill(0.0);
        params.dec1.logits.bias.data_mut().fill(0.0);
        let batch = tiny_batch();
        let mut g = Graph::new();
        let z = Tensor::zeros(&[2, 3]);
        let s = Tensor::zeros(&[2, 4]);
        let nll = decode_x_nll(&mut g, &params, &z, &s, &batch.x, 0.0, &mut r).unwrap();
        let ln_v = (params.config.text_vocab as f32).ln();
        for (i, &len) in batch.x.lens.iter().enumerate() {
            let expect = (len + 1) as f32 * ln_v;
            assert!(
                (nll.data()[i] - expect).abs() < 1e-4,
                "row {i}: {} vs {expect}",
                nll.data()[i]
            );
        }
    }

    #[test]
    fn per_example_nll_matches_f64_step_loop() {
        let mut r = rng(37);
        let params = SavaeParams::new(tiny_config(), &mut r);
        let batch = tiny_batch();
        let c = &params.config;
        let z = normal_noise(&[2, c.d_z], &mut r);
        let s = normal_noise(&[2, c.d_s], &mut r);
        let mut g = Graph::new();
        let nll = decode_x_nll(&mut g, &params, &z, &s, &batch.x, 0.0, &mut r).unwrap();

        // f64 oracle: manual init projections, embedding lookups, LSTM steps
        // and softmax, walking the gold tokens.
        let to64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let wv: [Vec<f64>; 4] = std::array::from_fn(|i| to64(&params.dec1.cell.input_weights[i]));
        let uv: [Vec<f64>; 4] =
            std::array::from_fn(|i| to64(&params.dec1.cell.recurrent_weights[i]));
        let bv: [Vec<f64>; 4] = std::array::from_fn(|i| to64(&params.dec1.cell.bias[i]));
        let emb = to64(&params.dec1.embed.weights);
        let (ed, hd) = (c.text_emb_dim, c.dec1_hidden);
        for row in 0..2 {
            let zrow: Vec<f64> = to64(&z)[row * c.d_z..(row + 1) * c.d_z].to_vec();
            let srow: Vec<f64> = to64(&s)[row * c.d_s..(row + 1) * c.d_s].to_vec();
            let proj = |lp: &LinearParams, v: &[f64]| -> Vec<f64> {
                let w = to64(&lp.weight);
                let b = to64(&lp.bias);
                (0..hd)
                    .map(|j| b[j] + v.iter().enumerate().map(|(k, x)| x * w[k * hd + j]).sum::<f64>())
                    .collect()
            };
            let mut h = proj(&params.dec1.init_h, &zrow);
            let mut cst = proj(&params.dec1.init_c, &zrow);
            let mut expect = 0.0f64;
            let len = batch.x.lens[row];
            for t in 0..=len {
                let tok = batch.x.dec_in.row(row)[t] as usize;
                let mut inp: Vec<f64> = emb[tok * ed..(tok + 1) * ed].to_vec();
                inp.extend_from_slice(&srow);
                let (h2, c2) = gradcheck::lstm_step_f64(
                    ed + c.d_s,
                    hd,
                    1,
                    &wv,
                    &uv,
                    &bv,
                    &inp,
                    &h,
                    &cst,
                );
                h = h2;
                cst = c2;
                let lw = to64(&params.dec1.logits.weight);
                let lb = to64(&params.dec1.logits.bias);
                let v = c.text_vocab;
                let logits: Vec<f64> = (0..v)
                    .map(|j| lb[j] + h.iter().enumerate().map(|(k, x)| x * lw[k * v + j]).sum::<f64>())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                let gold = batch.x.dec_tgt.row(row)[t] as usize;
                expect += lse - logits[gold];
            }
            assert!(
                (nll.data()[row] as f64 - expect).abs() < 1e-4,
                "row {row}: engine {} vs oracle {expect}",
                nll.data()[row]
            );
        }
    }

    #[test]
    fn kl_weight_zero_is_pure_reconstruction() {
        let mut r = rng(41);
        let mut params = SavaeParams::new(tiny_config(), &mut r);
        let batch = tiny_batch();
        let mut g = Graph::new();
        params.watch_all(&mut g);
        let settings = LossSettings {
            kl_weight: 0.0,
            ..Default::default()
        };
        let out = loss_supervised(&mut g, &params, &batch, &settings, &mut r).unwrap();
        let expect = out.report.recon_x + out.report.recon_y;
        assert!(
            (out.report.total - expect).abs() <= 1e-6 * expect.abs(),
            "{} vs {}",
            out.report.total,
            expect
        );
    }

    #[test]
    fn backward_populates_every_used_parameter() {
        // Seed chosen so the batch routes through both enc2 and enc3.
        let mut r = rng(6);
        let mut params = SavaeParams::new(tiny_config(), &mut r);
        let examples: Vec<ParallelExample> = (0..8)
            .map(|i| ParallelExample {
                x: vec![format!("w{}", i % 3), "b".into()],
                y: vec!["N".into(), "V".into()],
            })
            .collect();
        let tv = Vocab::build(examples.iter().map(|e| e.x.as_slice()), 12).unwrap();
        let sv = Vocab::build(examples.iter().map(|e| e.y.as_slice()), 9).unwrap();
        let refs: Vec<&ParallelExample> = examples.iter().collect();
        let batch = batch_from_examples(&refs, &tv, &sv, (0..8).collect());

        let mut g = Graph::new();
        params.watch_all(&mut g);
        let out =
            loss_supervised(&mut g, &params, &batch, &LossSettings::default(), &mut r).unwrap();
        assert!(out.report.total.is_finite());
        g.backward(&out.loss).unwrap();
        params.pull_grads(&g);
        let mut missing = Vec::new();
        params.visit(&mut |name, t| {
            if t.grad().is_none() {
                missing.push(name);
            }
        });
        assert!(missing.is_empty(), "no gradient for {missing:?}");
    }

    #[test]
    fn alpha_one_leaves_enc3_without_gradients() {
        let mut r = rng(43);
        let mut params = SavaeParams::new(tiny_config(), &mut r);
        let batch = tiny_batch();
        let mut g = Graph::new();
        params.watch_all(&mut g);
        let settings = LossSettings {
            alpha: 1.0,
            ..Default::default()
        };
        let out = loss_supervised(&mut g, &params, &batch, &settings, &mut r).unwrap();
        g.backward(&out.loss).unwrap();
        params.pull_grads(&g);
        params.visit(&mut |name, t| {
            if name.starts_with("enc3") {
                let zero = t
                    .grad()
                    .map(|gr| gr.iter().all(|&v| v == 0.0))
                    .unwrap_or(true);
                assert!(zero, "{name} received gradient despite alpha = 1");
            }
        });
    }

    #[test]
    fn unsupervised_equals_supervised_alpha_one_minus_recon_y() {
        let mut params_rng = rng(47);
        let params = SavaeParams::new(tiny_config(), &mut params_rng);
        let batch = tiny_batch();
        let settings = LossSettings {
            alpha: 1.0,
            kl_weight: 0.7,
            dropout: 0.2,
            ..Default::default()
        };
        let mut g1 = Graph::new();
        let sup = loss_supervised(&mut g1, &params, &batch, &settings, &mut rng(99)).unwrap();
        let mut g2 = Graph::new();
        let unsup = loss_unsupervised(&mut g2, &params, &batch.x, 0.7, 0.2, &mut rng(99)).unwrap();
        // identical op sequences for the shared terms => bit-equal components
        assert_eq!(sup.report.recon_x.to_bits(), unsup.report.recon_x.to_bits());
        assert_eq!(sup.report.kl_z.to_bits(), unsup.report.kl_z.to_bits());
        assert_eq!(sup.report.kl_s.to_bits(), unsup.report.kl_s.to_bits());
        let diff = (sup.report.total - sup.report.recon_y) - unsup.report.total;
        assert!(diff.abs() <= 1e-6 * unsup.report.total.abs());
    }

    #[test]
    fn zero_width_syntax_latent_is_the_vanilla_vae() {
        let mut r = rng(53);
        let mut cfg = tiny_config();
        cfg.d_s = 0;
        let params = SavaeParams::new(cfg, &mut r);
        let batch = tiny_batch();
        let mut g = Graph::new();
        let out = loss_unsupervised(&mut g, &params, &batch.x, 1.0, 0.0, &mut r).unwrap();
        assert_eq!(out.report.kl_s, 0.0);
        assert!(out.report.total.is_finite());
    }

    #[test]
    fn reparameterization_gradient_through_decode_matches_fd() {
        // Frozen noise, tiny dims: d loss / d mu_z via the engine vs central
        // differences through the full sample-then-decode pipeline (f32), at
        // the looser 1e-2 tolerance.
        let mut r = rng(59);
        let params = SavaeParams::new(tiny_config(), &mut r);
        let batch = tiny_batch();
        let c = &params.config;
        let eps_z = normal_noise(&[2, c.d_z], &mut r);
        let eps_s = normal_noise(&[2, c.d_s], &mut r);
        let mu0: Vec<f32> = (0..2 * c.d_z).map(|_| r.random_range(-0.5f32..0.5)).collect();
        let lv0: Vec<f32> = (0..2 * c.d_z).map(|_| r.random_range(-0.5f32..0.5)).collect();
        let s_post = gaussian(
            (0..2 * c.d_s).map(|_| 0.1).collect(),
            (0..2 * c.d_s).map(|_| -0.2).collect(),
            2,
            c.d_s,
        );

        let run = |mu: &[f32]| -> f32 {
            let mut g = Graph::new();
            let post_z = gaussian(mu.to_vec(), lv0.clone(), 2, c.d_z);
            let lat = sample_latents_with_noise(
                &mut g,
                &post_z,
                &s_post,
                &s_post,
                &[true, true],
                &eps_z,
                &eps_s,
            )
            .unwrap();
            let mut dummy = rng(0);
            let nll =
                decode_x_nll(&mut g, &params, &lat.z, &lat.s, &batch.x, 0.0, &mut dummy).unwrap();
            let mut g2 = g;
            let m = g2.mean(&nll).unwrap();
            m.item().unwrap()
        };

        // engine gradient w.r.t. mu
        let mut g = Graph::new();
        let mut mu_t = Tensor::param(vec![2, c.d_z], mu0.clone()).unwrap();
        g.watch(&mut mu_t);
        let post_z = GaussianParams {
            mean: mu_t.clone(),
            log_var: Tensor::from_vec(vec![2, c.d_z], lv0.clone()).unwrap(),
        };
        let lat = sample_latents_with_noise(
            &mut g,
            &post_z,
            &s_post,
            &s_post,
            &[true, true],
            &eps_z,
            &eps_s,
        )
        .unwrap();
        let mut dummy = rng(0);
        let nll = decode_x_nll(&mut g, &params, &lat.z, &lat.s, &batch.x, 0.0, &mut dummy).unwrap();
        let loss = g.mean(&nll).unwrap();
        g.backward(&loss).unwrap();
        mu_t.accumulate_grad(&g);
        let analytic = mu_t.grad().unwrap().to_vec();

        // f32 function evaluations put a noise floor under the differences;
        // a larger step plus a floor tied to the gradient scale absorbs it.
        let h = 5e-2f32;
        let grad_scale = analytic.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
        let mut worst: f64 = 0.0;
        for i in 0..mu0.len() {
            let mut up = mu0.clone();
            up[i] += h;
            let mut down = mu0.clone();
            down[i] -= h;
            let fd = (run(&up) as f64 - run(&down) as f64) / (2.0 * h as f64);
            let err = (analytic[i] as f64 - fd).abs() / fd.abs().max(0.05 * grad_scale);
            worst = worst.max(err);
        }
        assert!(worst < 1e-2, "worst relative error {worst}");
    }
}
