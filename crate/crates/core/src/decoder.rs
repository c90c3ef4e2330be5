//! Label scoring and training losses.
//!
//! A linear projection over the document encoding feeds either a sigmoid
//! (independent per-label probabilities) or a softmax (a distribution over
//! labels). Three objectives are available: summed cross-entropy over the
//! label space, a language-model likelihood that scores each label by the
//! dot product of its embedding with the document encoding (normalized over
//! the label vocabulary by default), and their weighted combination.

use crate::autodiff::{init, NodeId, ParamId, Params, Scalar, Tape};
use crate::{Error, Result};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Ce,
    Lm,
    CePlusLm,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "lm" => Ok(LossKind::Lm),
            "ce+lm" | "ce-plus-lm" => Ok(LossKind::CePlusLm),
            other => Err(Error::Config(format!(
                "unknown loss {other:?} (expected ce, lm, or ce+lm)"
            ))),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "softmax" => Ok(Activation::Softmax),
            other => Err(Error::Config(format!(
                "unknown activation {other:?} (expected sigmoid or softmax)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Size of the label space being scored.
    pub out_dim: usize,
    pub activation: Activation,
    /// Dimension of the label embeddings; must equal the dimension of the
    /// encoding fed to the decoder whenever the LM loss is in play.
    pub label_embed_dim: usize,
    /// Weight on the LM term when `loss_kind` is `CePlusLm`.
    pub alpha: f64,
    pub loss_kind: LossKind,
    /// Use the printed, unnormalized form of the LM objective
    /// (`-sum v_l . v`). Ablation only; the normalized form is the default.
    #[serde(default)]
    pub lm_literal: bool,
    /// Reuse the encoder's input embedding rows as label embeddings instead
    /// of training a separate table.
    #[serde(default)]
    pub tie_label_embeddings: bool,
}

impl DecoderConfig {
    pub fn new(out_dim: usize, activation: Activation, loss_kind: LossKind, in_dim: usize) -> Self {
        DecoderConfig {
            out_dim,
            activation,
            label_embed_dim: in_dim,
            alpha: 1.0,
            loss_kind,
            lm_literal: false,
            tie_label_embeddings: false,
        }
    }

    fn uses_lm(&self) -> bool {
        matches!(self.loss_kind, LossKind::Lm | LossKind::CePlusLm)
    }
}

/// Scores on the tape for one document.
pub struct DecoderOut {
    pub logits: NodeId,
    pub scores: NodeId,
}

/// Linear prediction head plus (optionally) a label-embedding table for the
/// LM loss.
pub struct Decoder {
    config: DecoderConfig,
    w: ParamId,
    b: ParamId,
    label_emb: LabelEmbeddings,
}

enum LabelEmbeddings {
    None,
    Table(ParamId),
    /// Rows 0..out_dim of the encoder's input embedding table.
    Tied(ParamId),
}

impl Decoder {
    /// `in_dim` is the dimension of the encoding fed to this head. Pass the
    /// encoder's embedding table for `tie_with` when
    /// `tie_label_embeddings` is set.
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        config: DecoderConfig,
        in_dim: usize,
        tie_with: Option<ParamId>,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if config.out_dim == 0 {
            return Err(Error::Config("decoder out_dim must be >= 1".into()));
        }
        if config.alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha {} must be >= 0",
                config.alpha
            )));
        }
        let label_emb = if config.uses_lm() {
            if config.label_embed_dim != in_dim {
                return Err(Error::Config(format!(
                    "label_embed_dim {} must equal encoding dim {} for the LM loss",
                    config.label_embed_dim, in_dim
                )));
            }
            if config.tie_label_embeddings {
                let table = tie_with.ok_or_else(|| {
                    Error::Config("tie_label_embeddings set but no table supplied".into())
                })?;
                let shape = params.get(table).shape().to_vec();
                if shape[1] != in_dim || shape[0] < config.out_dim {
                    return Err(Error::Config(format!(
                        "cannot tie label embeddings: table {shape:?} vs out_dim {} x dim {in_dim}",
                        config.out_dim
                    )));
                }
                LabelEmbeddings::Tied(table)
            } else {
                LabelEmbeddings::Table(params.add(
                    "decoder.label_emb",
                    init::embedding(rng, config.out_dim, config.label_embed_dim),
                ))
            }
        } else {
            LabelEmbeddings::None
        };
        let w = params.add("decoder.w", init::xavier(rng, config.out_dim, in_dim));
        let b = params.add("decoder.b", init::zeros_vec(config.out_dim));
        Ok(Decoder {
            config,
            w,
            b,
            label_emb,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Linear projection then activation.
    pub fn predict_scores<T: Scalar>(&self, tape: &mut Tape<'_, T>, v: NodeId) -> DecoderOut {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let z = tape.matvec(w, v);
        let logits = tape.add(z, b);
        let scores = match self.config.activation {
            Activation::Sigmoid => tape.sigmoid(logits),
            Activation::Softmax => tape.softmax_rows(logits),
        };
        DecoderOut { logits, scores }
    }

    /// Cross-entropy against a multi-hot target: summed binary
    /// cross-entropy for sigmoid scores, `-sum_i y_i log yhat_i` (computed
    /// from logits with log-sum-exp) for softmax.
    pub fn loss_ce<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        out: &DecoderOut,
        target_labels: &[usize],
    ) -> NodeId {
        let y = multi_hot(self.config.out_dim, target_labels);
        match self.config.activation {
            Activation::Sigmoid => tape.bce_sum(out.scores, &y),
            Activation::Softmax => tape.ce_logits(out.logits, &y),
        }
    }

    /// Language-model likelihood of the label set given the encoding:
    /// `-sum_{l in labels} log softmax_over_V(v_l . v)`, or the literal
    /// unnormalized `-sum v_l . v` when configured for ablation.
    pub fn loss_lm<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        v: NodeId,
        labels: &[usize],
    ) -> NodeId {
        assert!(!labels.is_empty(), "loss_lm: empty label set");
        let table = match &self.label_emb {
            LabelEmbeddings::None => {
                panic!("loss_lm called on a decoder configured without label embeddings")
            }
            LabelEmbeddings::Table(t) => tape.param(*t),
            LabelEmbeddings::Tied(t) => {
                let rows: Vec<usize> = (0..self.config.out_dim).collect();
                tape.embed(*t, &rows)
            }
        };
        let logits = tape.matvec(table, v);
        if self.config.lm_literal {
            tape.neg_gather_sum(logits, labels)
        } else {
            let w = multi_hot(self.config.out_dim, labels);
            tape.ce_logits(logits, &w)
        }
    }

    /// The configured objective; for the combined loss this is
    /// `ce + alpha * lm`.
    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        v: NodeId,
        out: &DecoderOut,
        target_labels: &[usize],
    ) -> NodeId {
        match self.config.loss_kind {
            LossKind::Ce => self.loss_ce(tape, out, target_labels),
            LossKind::Lm => self.loss_lm(tape, v, target_labels),
            LossKind::CePlusLm => {
                let ce = self.loss_ce(tape, out, target_labels);
                let lm = self.loss_lm(tape, v, target_labels);
                let scaled = tape.scale(lm, T::from_f64(self.config.alpha));
                tape.add(ce, scaled)
            }
        }
    }
}

fn multi_hot(n: usize, labels: &[usize]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for &l in labels {
        assert!(l < n, "label index {l} out of range for {n} labels");
        y[l] = 1.0;
    }
    y
}
