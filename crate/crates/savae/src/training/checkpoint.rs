//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!   magic "SAVAECKP" | u32 version | meta block (u64 len + key=value lines)
//!   | text vocab | syntax vocab | u32 tensor count
//!   | per tensor: name, rank, dims, f32 payload
//!   | u8 optimizer flag (+ optimizer state) | u64 fnv1a checksum of all
//!   preceding bytes.
//!
//! Tensors round-trip bit-exactly; any truncation or flipped byte fails the
//! checksum before anything is returned.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SavaeParams};
use crate::training::AdamState;

const MAGIC: &[u8; 8] = b"SAVAECKP";
const VERSION: u32 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Everything a checkpoint restores.
pub struct LoadedCheckpoint {
    pub params: SavaeParams,
    pub text_vocab: Vocab,
    pub syntax_vocab: Vocab,
    pub optimizer: Option<AdamState>,
}

pub fn save_checkpoint(
    params: &SavaeParams,
    text_vocab: &Vocab,
    syntax_vocab: &Vocab,
    optimizer: Option<&AdamState>,
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let meta = encode_meta(&params.config);
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());

    write_vocab(&mut buf, text_vocab);
    write_vocab(&mut buf, syntax_vocab);

    let mut tensors = Vec::new();
    params.visit(&mut |name, t| tensors.push((name, t.shape().to_vec(), t.data().to_vec())));
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &tensors {
        write_str(&mut buf, name);
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    match optimizer {
        None => buf.push(0),
        Some(adam) => {
            buf.push(1);
            buf.extend_from_slice(&adam.lr.to_le_bytes());
            buf.extend_from_slice(&adam.beta1.to_le_bytes());
            buf.extend_from_slice(&adam.beta2.to_le_bytes());
            buf.extend_from_slice(&adam.eps.to_le_bytes());
            buf.extend_from_slice(&adam.step.to_le_bytes());
            for (name, m, v) in adam.raw_slots() {
                write_str(&mut buf, name);
                buf.extend_from_slice(&(m.len() as u32).to_le_bytes());
                for val in m.iter().chain(v) {
                    buf.extend_from_slice(&val.to_le_bytes());
                }
            }
        }
    }

    let checksum = fnv1a64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a64(body) != stored {
        return Err(Error::Checkpoint(
            "checksum mismatch: file is corrupt or truncated".into(),
        ));
    }

    let mut r = Reader { buf: body, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }

    let meta_len = r.u64()? as usize;
    let meta = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|_| Error::Checkpoint("meta block is not UTF-8".into()))?;
    let config = decode_meta(meta)?;

    let text_vocab = read_vocab(&mut r)?;
    let syntax_vocab = read_vocab(&mut r)?;

    let tensor_count = r.u32()? as usize;
    let mut entries: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> =
        std::collections::HashMap::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f32()?);
        }
        if entries.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = SavaeParams::new(config, &mut init_rng);
    let mut failure: Option<Error> = None;
    params.visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        match entries.remove(&name) {
            None => failure = Some(Error::Checkpoint(format!("missing parameter {name}"))),
            Some((shape, data)) => {
                if shape != t.shape() {
                    failure = Some(Error::Checkpoint(format!(
                        "parameter {name}: shape {:?} does not match config {:?}",
                        shape,
                        t.shape()
                    )));
                } else {
                    t.data_mut().copy_from_slice(&data);
                }
            }
        }
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if let Some(name) = entries.keys().next() {
        return Err(Error::Checkpoint(format!("unknown parameter name {name}")));
    }

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let lr = r.f32()?;
            let beta1 = r.f32()?;
            let beta2 = r.f32()?;
            let eps = r.f32()?;
            let step = r.u64()?;
            let mut raw = Vec::new();
            let mut count = 0usize;
            params.visit(&mut |_, _| count += 1);
            for _ in 0..count {
                let name = r.string()?;
                let n = r.u32()? as usize;
                let mut m = Vec::with_capacity(n);
                for _ in 0..n {
                    m.push(r.f32()?);
                }
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    v.push(r.f32()?);
                }
                raw.push((name, m, v));
            }
            Some(AdamState::from_raw(lr, beta1, beta2, eps, step, raw))
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "invalid optimizer flag {other}"
            )))
        }
    };

    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint body".into()));
    }

    Ok(LoadedCheckpoint {
        params,
        text_vocab,
        syntax_vocab,
        optimizer,
    })
}

fn encode_meta(c: &ModelConfig) -> String {
    // fixed key order so identical configs serialize identically
    format!(
        "text_vocab={}\nsyntax_vocab={}\nd_z={}\nd_s={}\ntext_emb_dim={}\nsyntax_emb_dim={}\n\
         enc1_hidden={}\nenc2_hidden={}\nenc3_hidden={}\ndec1_hidden={}\ndec2_hidden={}\n\
         text_len_p95={}\nsyntax_len_p95={}\n",
        c.text_vocab,
        c.syntax_vocab,
        c.d_z,
        c.d_s,
        c.text_emb_dim,
        c.syntax_emb_dim,
        c.enc1_hidden,
        c.enc2_hidden,
        c.enc3_hidden,
        c.dec1_hidden,
        c.dec2_hidden,
        c.text_len_p95,
        c.syntax_len_p95
    )
}

fn decode_meta(meta: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::new(0, 0);
    for line in meta.lines() {
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Checkpoint(format!("malformed meta line {line:?}")));
        };
        let v: usize = value
            .parse()
            .map_err(|_| Error::Checkpoint(format!("non-numeric meta value in {line:?}")))?;
        match key {
            "text_vocab" => cfg.text_vocab = v,
            "syntax_vocab" => cfg.syntax_vocab = v,
            "d_z" => cfg.d_z = v,
            "d_s" => cfg.d_s = v,
            "text_emb_dim" => cfg.text_emb_dim = v,
            "syntax_emb_dim" => cfg.syntax_emb_dim = v,
            "enc1_hidden" => cfg.enc1_hidden = v,
            "enc2_hidden" => cfg.enc2_hidden = v,
            "enc3_hidden" => cfg.enc3_hidden = v,
            "dec1_hidden" => cfg.dec1_hidden = v,
            "dec2_hidden" => cfg.dec2_hidden = v,
            "text_len_p95" => cfg.text_len_p95 = v,
            "syntax_len_p95" => cfg.syntax_len_p95 = v,
            other => return Err(Error::Checkpoint(format!("unknown meta key {other}"))),
        }
    }
    if cfg.text_vocab == 0 || cfg.syntax_vocab == 0 {
        return Err(Error::Checkpoint("meta block missing vocabulary sizes".into()));
    }
    Ok(cfg)
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn write_vocab(buf: &mut Vec<u8>, v: &Vocab) {
    buf.extend_from_slice(&(v.size() as u32).to_le_bytes());
    for token in v.tokens() {
        write_str(buf, token);
    }
}

fn read_vocab(r: &mut Reader) -> Result<Vocab> {
    let count = r.u32()? as usize;
    let mut tokens = Vec::with_capacity(count);
    for _ in 0..count {
        tokens.push(r.string()?);
    }
    Vocab::from_token_list(tokens)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }
}
