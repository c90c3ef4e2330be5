//! Mini-batch training with early stopping, plus the three-phase
//! semi-supervised protocol: pseudo-label pre-training, cross-validated
//! fine-tuning on gold labels, and holdout evaluation.

use crate::autodiff::{init, AdamConfig, AdamState, NodeId, ParamId, Params, Scalar, Tape};
use crate::corpus::{self, Corpus, Document, Vocabulary};
use crate::decoder::{Activation, Decoder, DecoderConfig, DecoderOut, LossKind};
use crate::encoders::{EncodeDiag, EncoderConfig, EncoderModel};
use crate::eval::ScoreSheet;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub dropout_p: f64,
    pub lr: f64,
    pub max_epochs: usize,
    /// Early-stopping patience: epochs without validation improvement.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub alpha: f64,
    /// Global grad-norm clip, applied to recurrent encoders.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            dropout_p: 0.0,
            lr: 1e-3,
            max_epochs: 30,
            patience: 3,
            val_fraction: 0.1,
            seed: 42,
            loss_kind: LossKind::Ce,
            alpha: 1.0,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One prepared training instance: input-vocabulary token ids and target
/// label indices (pseudo or gold).
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub token_ids: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Build examples targeting the documents' pseudo-labels. Documents without
/// pseudo-labels or without in-vocabulary tokens are skipped.
pub fn pseudo_examples(docs: &[Document], input_vocab: &Vocabulary) -> Vec<TrainExample> {
    docs.iter()
        .filter_map(|d| {
            let targets = d.pseudo_labels.clone()?;
            let token_ids = input_vocab.token_ids(&d.tokens);
            if token_ids.is_empty() {
                return None;
            }
            Some(TrainExample {
                id: d.id.clone(),
                token_ids,
                targets,
            })
        })
        .collect()
}

/// Build examples targeting gold labels. Documents without gold labels or
/// without in-vocabulary tokens are skipped.
pub fn gold_examples(docs: &[Document], input_vocab: &Vocabulary) -> Vec<TrainExample> {
    docs.iter()
        .filter_map(|d| {
            let gold = d.gold_labels.as_ref()?;
            let token_ids = input_vocab.token_ids(&d.tokens);
            if token_ids.is_empty() {
                return None;
            }
            Some(TrainExample {
                id: d.id.clone(),
                token_ids,
                targets: gold.iter().copied().collect(),
            })
        })
        .collect()
}

/// Architecture of a full network: encoder, optional penultimate dense
/// layer, prediction head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub encoder: EncoderConfig,
    /// Dimension of the fully-connected layer between the encoder and the
    /// prediction head; the semi-supervised protocol sets this to the
    /// gold-label count.
    pub penultimate_dim: Option<usize>,
    pub decoder: DecoderConfig,
}

struct Penultimate {
    w: ParamId,
    b: ParamId,
}

/// Encoder plus head; the unit the trainer optimizes.
pub struct Classifier {
    config: ClassifierConfig,
    encoder: EncoderModel,
    penultimate: Option<Penultimate>,
    decoder: Decoder,
}

pub struct ForwardOut {
    /// The encoding fed to the decoder (post-penultimate when present).
    pub v: NodeId,
    pub decoded: DecoderOut,
    pub diag: EncodeDiag,
}

impl Classifier {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        config: ClassifierConfig,
        input_vocab_size: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let encoder = EncoderModel::init(params, config.encoder.clone(), input_vocab_size, rng)?;
        let penultimate = match config.penultimate_dim {
            Some(dim) => {
                if dim == 0 {
                    return Err(Error::Config("penultimate_dim must be >= 1".into()));
                }
                Some(Penultimate {
                    w: params.add("penult.w", init::xavier(rng, dim, encoder.out_dim())),
                    b: params.add("penult.b", init::zeros_vec(dim)),
                })
            }
            None => None,
        };
        let head_in = config.penultimate_dim.unwrap_or(encoder.out_dim());
        let tie = config
            .decoder
            .tie_label_embeddings
            .then(|| encoder.embedding_param());
        let decoder = Decoder::init(params, config.decoder.clone(), head_in, tie, rng)?;
        Ok(Classifier {
            config,
            encoder,
            penultimate,
            decoder,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn encoder(&self) -> &EncoderModel {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        token_ids: &[usize],
        rng: &mut ChaCha12Rng,
    ) -> Result<ForwardOut> {
        let enc = self.encoder.encode_on_tape(tape, token_ids, rng)?;
        let v = match &self.penultimate {
            Some(p) => {
                let w = tape.param(p.w);
                let b = tape.param(p.b);
                let z = tape.matvec(w, enc.v);
                let z = tape.add(z, b);
                tape.tanh(z)
            }
            None => enc.v,
        };
        let decoded = self.decoder.predict_scores(tape, v);
        Ok(ForwardOut {
            v,
            decoded,
            diag: enc.diag,
        })
    }

    /// Inference scores for one document (dropout off).
    pub fn score<T: Scalar>(&self, params: &Params<T>, token_ids: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(params, false);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, token_ids, &mut rng)?;
        Ok(tape
            .values(out.decoded.scores)
            .iter()
            .map(|x| x.as_f64())
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Number of epochs actually run.
    pub stopped_epoch: usize,
    /// Epoch whose validation loss the restored parameters correspond to.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub wall_clock_secs: f64,
}

/// Mean per-document loss over a slice of examples, dropout off.
pub fn eval_loss<T: Scalar>(
    classifier: &Classifier,
    params: &Params<T>,
    examples: &[TrainExample],
) -> Result<f64> {
    assert!(!examples.is_empty(), "eval_loss: no examples");
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut total = 0.0f64;
    for ex in examples {
        let mut tape = Tape::new(params, false);
        let out = classifier.forward(&mut tape, &ex.token_ids, &mut rng)?;
        let loss = classifier
            .decoder
            .loss(&mut tape, out.v, &out.decoded, &ex.targets);
        total += tape.value(loss).as_f64();
    }
    Ok(total / examples.len() as f64)
}

fn one_batch<T: Scalar>(
    classifier: &Classifier,
    params: &mut Params<T>,
    adam: &mut AdamState,
    batch: &[&TrainExample],
    rng: &mut ChaCha12Rng,
    cfg: &TrainConfig,
    batch_index: usize,
) -> Result<f64> {
    let (loss_value, grads) = {
        let mut tape = Tape::new(params, true);
        let mut total: Option<NodeId> = None;
        for ex in batch {
            let out = classifier.forward(&mut tape, &ex.token_ids, rng)?;
            let loss = classifier
                .decoder
                .loss(&mut tape, out.v, &out.decoded, &ex.targets);
            let component = match cfg.loss_kind {
                LossKind::Ce => "ce",
                LossKind::Lm => "lm",
                LossKind::CePlusLm => "ce+lm",
            };
            if !tape.value(loss).as_f64().is_finite() {
                return Err(Error::NonFiniteLoss {
                    component,
                    batch: batch_index,
                });
            }
            total = Some(match total {
                Some(t) => tape.add(t, loss),
                None => loss,
            });
        }
        let total = total.expect("nonempty batch");
        let mean = tape.scale(total, T::from_f64(1.0 / batch.len() as f64));
        let value = tape.value(mean).as_f64();
        (value, tape.backward(mean))
    };
    params.accumulate(&grads);
    if classifier.encoder.config().kind.is_recurrent() && cfg.clip_norm > 0.0 {
        params.clip_grad_norm(cfg.clip_norm);
    }
    adam.step(params);
    Ok(loss_value)
}

fn run_epoch<T: Scalar>(
    classifier: &Classifier,
    params: &mut Params<T>,
    adam: &mut AdamState,
    order: &[usize],
    examples: &[TrainExample],
    rng: &mut ChaCha12Rng,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut weighted = 0.0f64;
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
        let loss = one_batch(classifier, params, adam, &batch, rng, cfg, bi)?;
        weighted += loss * batch.len() as f64;
    }
    Ok(weighted / order.len() as f64)
}

/// Train with a random validation split and early stopping; the parameters
/// left in the store are the best-validation checkpoint.
pub fn train<T: Scalar>(
    classifier: &Classifier,
    params: &mut Params<T>,
    examples: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if examples.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 examples to split validation, got {}",
            examples.len()
        )));
    }
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    let mut indices: Vec<usize> = (0..examples.len()).collect();
    indices.shuffle(&mut rng);
    let val_n = ((examples.len() as f64 * cfg.val_fraction).round() as usize)
        .max(1)
        .min(examples.len() - 1);
    let (val_idx, train_idx) = indices.split_at(val_n);
    let val_set: Vec<TrainExample> = val_idx.iter().map(|&i| examples[i].clone()).collect();
    let mut train_order: Vec<usize> = train_idx.to_vec();

    let mut adam = AdamState::new(params, cfg.adam());
    let mut report = TrainReport {
        epochs: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        wall_clock_secs: 0.0,
    };
    let mut best_snapshot = params.snapshot();
    let mut bad_epochs = 0usize;

    for epoch in 1..=cfg.max_epochs {
        train_order.shuffle(&mut rng);
        let train_loss = run_epoch(
            classifier,
            params,
            &mut adam,
            &train_order,
            examples,
            &mut rng,
            cfg,
        )?;
        let val_loss = eval_loss(classifier, params, &val_set)?;
        report.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        report.stopped_epoch = epoch;
        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = epoch;
            best_snapshot = params.snapshot();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                break;
            }
        }
    }
    params.restore(&best_snapshot);
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Train on everything for a fixed number of epochs (no validation, no
/// early stopping); returns per-epoch training losses.
pub fn train_full<T: Scalar>(
    classifier: &Classifier,
    params: &mut Params<T>,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut adam = AdamState::new(params, cfg.adam());
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        losses.push(run_epoch(
            classifier,
            params,
            &mut adam,
            &order,
            examples,
            &mut rng,
            cfg,
        )?);
    }
    Ok(losses)
}

/// Phase-1 output: an encoder pre-trained to predict its corpus'
/// TFIDF pseudo-labels through a penultimate bottleneck.
pub struct PretrainOut<T: Scalar> {
    pub params: Params<T>,
    pub classifier: Classifier,
    pub label_vocab: Vocabulary,
    pub report: TrainReport,
}

/// Pre-train on pseudo-labels: build a `vocab_cap` label vocabulary over
/// the unlabeled corpus, attach a penultimate layer of `penultimate_dim`
/// and a prediction head over the pseudo-label vocabulary, and train.
pub fn pretrain_pseudo<T: Scalar>(
    encoder_cfg: EncoderConfig,
    input_vocab: &Vocabulary,
    corpus: &mut Corpus,
    vocab_cap: usize,
    penultimate_dim: usize,
    k: usize,
    cfg: &TrainConfig,
) -> Result<PretrainOut<T>> {
    let stats = corpus::corpus_stats(&corpus.docs);
    let label_vocab = corpus::build_vocabulary(&corpus.docs, &stats, vocab_cap);
    corpus::pseudo_label_corpus(corpus, &label_vocab, &stats, k);
    let examples = pseudo_examples(&corpus.docs, input_vocab);
    if examples.len() < 2 {
        return Err(Error::Config(
            "pre-training corpus has fewer than 2 usable documents".into(),
        ));
    }

    let mut enc = encoder_cfg;
    enc.dropout_p = cfg.dropout_p;
    let decoder = DecoderConfig {
        out_dim: label_vocab.size(),
        activation: Activation::Sigmoid,
        label_embed_dim: penultimate_dim,
        alpha: cfg.alpha,
        loss_kind: cfg.loss_kind,
        lm_literal: false,
        tie_label_embeddings: false,
    };
    let config = ClassifierConfig {
        encoder: enc,
        penultimate_dim: Some(penultimate_dim),
        decoder,
    };
    let mut params = Params::new();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let classifier = Classifier::init(&mut params, config, input_vocab.size(), &mut rng)?;
    let report = train(&classifier, &mut params, &examples, cfg)?;
    Ok(PretrainOut {
        params,
        classifier,
        label_vocab,
        report,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneReport {
    /// Mean validation loss per epoch across folds.
    pub cv_val_curve: Vec<f64>,
    /// Epoch count selected by cross-validation.
    pub stopping_epoch: usize,
    /// Training losses of the final full-data run.
    pub final_train_losses: Vec<f64>,
}

/// Phase 2: discard the pseudo-label head, attach a fresh gold-label head
/// on the penultimate representation, select the stopping epoch by k-fold
/// cross-validation, then retrain on all labeled data to that epoch.
pub fn finetune<T: Scalar>(
    pre_params: &Params<T>,
    pre_classifier: &Classifier,
    labeled: &[TrainExample],
    n_gold_labels: usize,
    n_folds: usize,
    cfg: &TrainConfig,
) -> Result<(Params<T>, Classifier, FinetuneReport)> {
    if labeled.len() < n_folds {
        return Err(Error::Config(format!(
            "labeled set of {} is smaller than {n_folds} folds",
            labeled.len()
        )));
    }
    if n_folds < 2 {
        return Err(Error::Config("need at least 2 folds".into()));
    }
    let src_cfg = pre_classifier.config();
    let head_in = src_cfg
        .penultimate_dim
        .unwrap_or(src_cfg.encoder.out_dim());
    let config = ClassifierConfig {
        encoder: src_cfg.encoder.clone(),
        penultimate_dim: src_cfg.penultimate_dim,
        decoder: DecoderConfig {
            out_dim: n_gold_labels,
            activation: src_cfg.decoder.activation,
            label_embed_dim: head_in,
            alpha: cfg.alpha,
            loss_kind: cfg.loss_kind,
            lm_literal: false,
            tie_label_embeddings: false,
        },
    };

    // fresh store with a new head; copy over everything the phases share
    let build = |seed: u64| -> Result<(Params<T>, Classifier)> {
        let mut params = Params::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let classifier = Classifier::init(
            &mut params,
            config.clone(),
            pre_classifier.encoder().vocab_size(),
            &mut rng,
        )?;
        for (_, name, tensor) in pre_params.iter() {
            if name.starts_with("decoder.") {
                continue;
            }
            if let Some(id) = params.id_of(name) {
                params
                    .get_mut(id)
                    .values_mut()
                    .copy_from_slice(tensor.values());
            }
        }
        Ok((params, classifier))
    };

    // k-fold curves: every fold trains for max_epochs, then the epoch with
    // the best mean validation loss wins
    let mut fold_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0xf01d);
    let mut shuffled: Vec<usize> = (0..labeled.len()).collect();
    shuffled.shuffle(&mut fold_rng);
    let mut curve = vec![0.0f64; cfg.max_epochs];
    for fold in 0..n_folds {
        let val_idx: Vec<usize> = shuffled
            .iter()
            .copied()
            .skip(fold)
            .step_by(n_folds)
            .collect();
        let train_ex: Vec<TrainExample> = shuffled
            .iter()
            .enumerate()
            .filter(|(pos, _)| pos % n_folds != fold)
            .map(|(_, &i)| labeled[i].clone())
            .collect();
        let val_ex: Vec<TrainExample> = val_idx.iter().map(|&i| labeled[i].clone()).collect();
        let (mut params, classifier) = build(cfg.seed)?;
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(fold as u64));
        let mut adam = AdamState::new(&params, cfg.adam());
        let mut order: Vec<usize> = (0..train_ex.len()).collect();
        for slot in curve.iter_mut() {
            order.shuffle(&mut rng);
            run_epoch(
                &classifier,
                &mut params,
                &mut adam,
                &order,
                &train_ex,
                &mut rng,
                cfg,
            )?;
            *slot += eval_loss(&classifier, &params, &val_ex)? / n_folds as f64;
        }
    }
    let stopping_epoch = curve
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite losses"))
        .map(|(i, _)| i + 1)
        .expect("max_epochs >= 1");

    let (mut params, classifier) = build(cfg.seed)?;
    let final_train_losses = train_full(&classifier, &mut params, labeled, cfg, stopping_epoch)?;
    let report = FinetuneReport {
        cv_val_curve: curve,
        stopping_epoch,
        final_train_losses,
    };
    Ok((params, classifier, report))
}

/// Phase 3 (and supervised evaluation generally): score held-out documents.
/// Documents without in-vocabulary tokens are skipped.
pub fn evaluate_holdout<T: Scalar>(
    classifier: &Classifier,
    params: &Params<T>,
    docs: &[Document],
    input_vocab: &Vocabulary,
    n_labels: usize,
) -> Result<ScoreSheet> {
    let mut sheet = ScoreSheet::default();
    for d in docs {
        let Some(gold) = d.gold_labels.as_ref() else {
            continue;
        };
        let token_ids = input_vocab.token_ids(&d.tokens);
        if token_ids.is_empty() {
            continue;
        }
        let scores = classifier.score(params, &token_ids)?;
        let gold_row: Vec<bool> = (0..n_labels).map(|i| gold.contains(&i)).collect();
        sheet.push(d.id.clone(), scores, gold_row);
    }
    Ok(sheet)
}

#[cfg(test)]
mod tests;
