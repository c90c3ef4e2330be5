//! Sequence encoders mapping a token-id sequence to a fixed-length document
//! encoding `v`.
//!
//! Seven architectures share one embedding table: a deep averaging network,
//! unidirectional and bidirectional LSTM/GRU stacks, a BiLSTM whose
//! per-step states are pooled by a learned attention vector, and a
//! multi-head self-attention encoder with sinusoidal positions. Output
//! dimension is `hidden_dim` for unidirectional recurrent encoders,
//! `2 * hidden_dim` for bidirectional ones (attention included), and
//! `embed_dim` for the averaging and self-attention encoders.

mod attention;
mod dan;
mod recurrent;
mod transformer;

use crate::autodiff::{init, NodeId, ParamId, Params, Scalar, Tape};
use crate::{Error, Result};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Dan,
    Lstm,
    BiLstm,
    Gru,
    BiGru,
    BiLstmAttn,
    Transformer,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 7] = [
        EncoderKind::Dan,
        EncoderKind::Lstm,
        EncoderKind::BiLstm,
        EncoderKind::Gru,
        EncoderKind::BiGru,
        EncoderKind::BiLstmAttn,
        EncoderKind::Transformer,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EncoderKind::Dan => "dan",
            EncoderKind::Lstm => "lstm",
            EncoderKind::BiLstm => "bilstm",
            EncoderKind::Gru => "gru",
            EncoderKind::BiGru => "bigru",
            EncoderKind::BiLstmAttn => "bilstm-attn",
            EncoderKind::Transformer => "transformer",
        }
    }

    /// True for the recurrent family, which trains with gradient clipping.
    pub fn is_recurrent(&self) -> bool {
        matches!(
            self,
            EncoderKind::Lstm
                | EncoderKind::BiLstm
                | EncoderKind::Gru
                | EncoderKind::BiGru
                | EncoderKind::BiLstmAttn
        )
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dan" => Ok(EncoderKind::Dan),
            "lstm" => Ok(EncoderKind::Lstm),
            "bilstm" => Ok(EncoderKind::BiLstm),
            "gru" => Ok(EncoderKind::Gru),
            "bigru" => Ok(EncoderKind::BiGru),
            "bilstm-attn" => Ok(EncoderKind::BiLstmAttn),
            "transformer" => Ok(EncoderKind::Transformer),
            other => Err(Error::Config(format!(
                "unknown encoder {other:?} (expected one of dan, lstm, bilstm, gru, bigru, bilstm-attn, transformer)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Dense depth for the averaging encoder, stack depth for recurrent
    /// encoders, block count for the self-attention encoder.
    pub n_layers: usize,
    /// Attention heads; self-attention encoder only.
    pub n_heads: usize,
    pub dropout_p: f64,
    pub max_seq_len: usize,
    /// Add sinusoidal positional encodings (self-attention encoder only).
    /// Off, the encoder is a pure bag-of-tokens pooler.
    #[serde(default = "default_positions")]
    pub sinusoidal_positions: bool,
}

fn default_positions() -> bool {
    true
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Dan,
            embed_dim: 128,
            hidden_dim: 128,
            n_layers: 2,
            n_heads: 4,
            dropout_p: 0.0,
            max_seq_len: 512,
            sinusoidal_positions: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.n_layers == 0 {
            return Err(Error::Config(
                "embed_dim, hidden_dim and n_layers must all be >= 1".into(),
            ));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.kind == EncoderKind::Transformer {
            if self.n_heads == 0 {
                return Err(Error::Config("n_heads must be >= 1".into()));
            }
            if !self.embed_dim.is_multiple_of(self.n_heads) {
                return Err(Error::Config(format!(
                    "embed_dim {} not divisible by n_heads {}",
                    self.embed_dim, self.n_heads
                )));
            }
        }
        Ok(())
    }

    /// Dimension of the encoding this configuration produces.
    pub fn out_dim(&self) -> usize {
        match self.kind {
            EncoderKind::Dan | EncoderKind::Transformer => self.embed_dim,
            EncoderKind::Lstm | EncoderKind::Gru => self.hidden_dim,
            EncoderKind::BiLstm | EncoderKind::BiGru | EncoderKind::BiLstmAttn => {
                2 * self.hidden_dim
            }
        }
    }
}

/// Per-forward-pass diagnostics: the sum of every attention distribution
/// produced (each should be 1).
#[derive(Debug, Clone, Default)]
pub struct EncodeDiag {
    pub attn_row_sums: Vec<f64>,
}

pub struct EncodeOut {
    pub v: NodeId,
    pub diag: EncodeDiag,
}

enum Arch {
    Dan(dan::DanParams),
    Recurrent(recurrent::RnnStack),
    BiLstmAttn {
        stack: recurrent::RnnStack,
        attn: attention::AttnParams,
    },
    Transformer(transformer::TransformerParams),
}

/// A configured encoder: the shared embedding table plus architecture
/// parameters, all registered in a [`Params`] store.
pub struct EncoderModel {
    config: EncoderConfig,
    vocab_size: usize,
    embedding: ParamId,
    arch: Arch,
}

impl EncoderModel {
    /// Register all parameters for the configured architecture. Creation
    /// order is deterministic, so checkpoints align by name.
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        config: EncoderConfig,
        vocab_size: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config(
                "encoder needs a nonempty input vocabulary".into(),
            ));
        }
        let embedding = params.add("embed", init::embedding(rng, vocab_size, config.embed_dim));
        let arch = match config.kind {
            EncoderKind::Dan => Arch::Dan(dan::DanParams::init(params, &config, rng)),
            EncoderKind::Lstm | EncoderKind::Gru | EncoderKind::BiLstm | EncoderKind::BiGru => {
                Arch::Recurrent(recurrent::RnnStack::init(params, &config, rng))
            }
            EncoderKind::BiLstmAttn => {
                let stack = recurrent::RnnStack::init(params, &config, rng);
                let attn = attention::AttnParams::init(params, &config, rng);
                Arch::BiLstmAttn { stack, attn }
            }
            EncoderKind::Transformer => {
                Arch::Transformer(transformer::TransformerParams::init(params, &config, rng))
            }
        };
        Ok(EncoderModel {
            config,
            vocab_size,
            embedding,
            arch,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim()
    }

    pub fn embedding_param(&self) -> ParamId {
        self.embedding
    }

    /// Build the forward graph for one document. Sequences longer than
    /// `max_seq_len` are truncated; an empty id sequence is unencodable.
    pub fn encode_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        token_ids: &[usize],
        rng: &mut ChaCha12Rng,
    ) -> Result<EncodeOut> {
        if token_ids.is_empty() {
            return Err(Error::Unencodable);
        }
        let ids = &token_ids[..token_ids.len().min(self.config.max_seq_len)];
        let p = self.config.dropout_p;
        let embedded = tape.embed(self.embedding, ids);
        let embedded = match self.config.kind {
            // the self-attention encoder rescales before adding positions
            EncoderKind::Transformer => embedded,
            _ => tape.dropout(embedded, p, rng),
        };
        let mut diag = EncodeDiag::default();
        let v = match &self.arch {
            Arch::Dan(dp) => dp.forward(tape, embedded, p, rng),
            Arch::Recurrent(stack) => stack.forward_last(tape, embedded, p, rng),
            Arch::BiLstmAttn { stack, attn } => {
                let states = stack.forward_states(tape, embedded, p, rng);
                attn.forward(tape, &states, &mut diag)
            }
            Arch::Transformer(tp) => tp.forward(tape, embedded, p, rng, &mut diag),
        };
        debug_assert_eq!(tape.shape(v), &[self.out_dim()]);
        Ok(EncodeOut { v, diag })
    }

    /// Inference convenience: encode with dropout disabled and return the
    /// vector as f64.
    pub fn encode<T: Scalar>(&self, params: &Params<T>, token_ids: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(params, false);
        // rng is untouched because the tape is in eval mode
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let out = self.encode_on_tape(&mut tape, token_ids, &mut rng)?;
        Ok(tape.values(out.v).iter().map(|x| x.as_f64()).collect())
    }
}

/// Overwrite embedding rows from a pre-trained text file ("term v1 .. vD",
/// one per line). Terms missing from the vocabulary are skipped; returns
/// how many rows were initialized.
pub fn load_pretrained_embeddings<T: Scalar>(
    path: &Path,
    params: &mut Params<T>,
    model: &EncoderModel,
    vocab: &crate::corpus::Vocabulary,
) -> Result<usize> {
    let d = model.config.embed_dim;
    let reader = BufReader::new(fs::File::open(path)?);
    let mut loaded = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let term = parts.next().unwrap_or_default();
        let Some(ix) = vocab.get(term) else {
            continue;
        };
        let vals: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::MalformedLine {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        if vals.len() != d {
            return Err(Error::MalformedLine {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected {d} components, got {}", vals.len()),
            });
        }
        let table = params.get_mut(model.embedding);
        let row = &mut table.values_mut()[ix * d..(ix + 1) * d];
        for (dst, src) in row.iter_mut().zip(&vals) {
            *dst = T::from_f64(*src);
        }
        loaded += 1;
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests;
