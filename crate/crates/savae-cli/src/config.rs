//! Plain-text run configuration: `key=value` lines, `#` comments. Covers
//! every training and model field; command-line flags override file values.
//! Unknown keys are rejected so typos cannot silently fall back to defaults.

use savae::model::ModelConfig;
use savae::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub d_z: usize,
    pub d_s: usize,
    pub text_emb_dim: usize,
    pub syntax_emb_dim: usize,
    pub enc1_hidden: usize,
    pub enc2_hidden: usize,
    pub enc3_hidden: usize,
    pub dec1_hidden: usize,
    pub dec2_hidden: usize,
    pub text_vocab_cap: usize,
    pub syntax_vocab_cap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dims = ModelConfig::new(0, 0);
        RunConfig {
            train: TrainConfig::default(),
            d_z: dims.d_z,
            d_s: dims.d_s,
            text_emb_dim: dims.text_emb_dim,
            syntax_emb_dim: dims.syntax_emb_dim,
            enc1_hidden: dims.enc1_hidden,
            enc2_hidden: dims.enc2_hidden,
            enc3_hidden: dims.enc3_hidden,
            dec1_hidden: dims.dec1_hidden,
            dec2_hidden: dims.dec2_hidden,
            text_vocab_cap: 20_000,
            syntax_vocab_cap: 20_000,
        }
    }
}

impl RunConfig {
    /// Model dimensions with the vocabulary sizes filled in.
    pub fn model_config(&self, text_vocab: usize, syntax_vocab: usize) -> ModelConfig {
        let mut m = ModelConfig::new(text_vocab, syntax_vocab);
        m.d_z = self.d_z;
        m.d_s = self.d_s;
        m.text_emb_dim = self.text_emb_dim;
        m.syntax_emb_dim = self.syntax_emb_dim;
        m.enc1_hidden = self.enc1_hidden;
        m.enc2_hidden = self.enc2_hidden;
        m.enc3_hidden = self.enc3_hidden;
        m.dec1_hidden = self.dec1_hidden;
        m.dec2_hidden = self.dec2_hidden;
        m
    }

    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(format!("line {}: expected key=value, got {raw:?}", no + 1));
            };
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)
                .map_err(|e| format!("line {}: {e}", no + 1))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("invalid value {value:?} for {key}"))
        }
        match key {
            "lr" => self.train.lr = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "max_epochs" => self.train.max_epochs = num(key, value)?,
            "alpha" => self.train.alpha = num(key, value)?,
            "kl_anneal_steps" => {
                self.train.kl_anneal_steps = if value == "auto" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "dropout" => self.train.dropout = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "clip_norm" => {
                self.train.clip_norm = if value == "off" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "n_kl_samples" => self.train.n_kl_samples = num(key, value)?,
            "syntax_channel" => self.train.syntax_channel = num(key, value)?,
            "d_z" => self.d_z = num(key, value)?,
            "d_s" => self.d_s = num(key, value)?,
            "text_emb_dim" => self.text_emb_dim = num(key, value)?,
            "syntax_emb_dim" => self.syntax_emb_dim = num(key, value)?,
            "enc1_hidden" => self.enc1_hidden = num(key, value)?,
            "enc2_hidden" => self.enc2_hidden = num(key, value)?,
            "enc3_hidden" => self.enc3_hidden = num(key, value)?,
            "dec1_hidden" => self.dec1_hidden = num(key, value)?,
            "dec2_hidden" => self.dec2_hidden = num(key, value)?,
            "text_vocab_cap" => self.text_vocab_cap = num(key, value)?,
            "syntax_vocab_cap" => self.syntax_vocab_cap = num(key, value)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Render in the same key=value syntax `parse` accepts, every field
    /// present, so a run's `config.echo` reproduces it exactly.
    pub fn echo(&self) -> String {
        let t = &self.train;
        let anneal = match t.kl_anneal_steps {
            None => "auto".to_string(),
            Some(v) => v.to_string(),
        };
        let clip = match t.clip_norm {
            None => "off".to_string(),
            Some(v) => format!("{v}"),
        };
        format!(
            "lr={}\nbatch_size={}\nmax_epochs={}\nalpha={}\nkl_anneal_steps={}\ndropout={}\n\
             seed={}\nclip_norm={}\nn_kl_samples={}\nsyntax_channel={}\n\
             d_z={}\nd_s={}\ntext_emb_dim={}\nsyntax_emb_dim={}\n\
             enc1_hidden={}\nenc2_hidden={}\nenc3_hidden={}\ndec1_hidden={}\ndec2_hidden={}\n\
             text_vocab_cap={}\nsyntax_vocab_cap={}\n",
            t.lr,
            t.batch_size,
            t.max_epochs,
            t.alpha,
            anneal,
            t.dropout,
            t.seed,
            clip,
            t.n_kl_samples,
            t.syntax_channel,
            self.d_z,
            self.d_s,
            self.text_emb_dim,
            self.syntax_emb_dim,
            self.enc1_hidden,
            self.enc2_hidden,
            self.enc3_hidden,
            self.dec1_hidden,
            self.dec2_hidden,
            self.text_vocab_cap,
            self.syntax_vocab_cap
        )
    }
}
