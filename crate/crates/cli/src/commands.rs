//! Subcommand implementations. Every command validates its inputs first so
//! `--dry-run` can stop before any output is written, and every error about
//! a missing artifact names the subcommand that produces it.

use crate::model_dir::{self, LabelSpaceMeta, ModelMeta};
use anyhow::{anyhow, bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use semtag::autodiff::Params;
use semtag::corpus::{
    self, build_vocabulary, corpus_stats, load_corpus, save_corpus, Corpus, TokenizerConfig,
    Vocabulary,
};
use semtag::decoder::{Activation, DecoderConfig};
use semtag::encoders::EncoderConfig;
use semtag::eval::{labeled_fraction_curve, roc_auc_micro};
use semtag::retrieval::{
    build_index, expand_query, precision_at_k, search, Expander, InvertedIndex, Qrels, Query,
    RetrievalRun,
};
use semtag::tagger::{encode_all, save_tags, tag_corpus};
use semtag::trainer::{
    self, evaluate_holdout, gold_examples, pseudo_examples, train, Classifier, ClassifierConfig,
    TrainConfig,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// Fail with a pointer to the subcommand that creates the artifact.
fn require_file(path: &Path, what: &str, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!(
            "{what} not found: {} (produce it with `semtag {producer}`)",
            path.display()
        );
    }
    Ok(())
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

// ---- pseudo-label artifact ----

#[derive(Debug, Serialize, Deserialize)]
struct PseudoRecord {
    id: String,
    labels: Vec<usize>,
    terms: Vec<String>,
    #[serde(default)]
    padded: bool,
}

fn load_pseudo_records(path: &Path) -> Result<HashMap<String, Vec<usize>>> {
    require_file(path, "pseudo-label file", "pseudolabel")?;
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut map = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PseudoRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        map.insert(rec.id, rec.labels);
    }
    Ok(map)
}

fn apply_pseudo_labels(corpus: &mut Corpus, map: &HashMap<String, Vec<usize>>) {
    for d in &mut corpus.docs {
        d.pseudo_labels = map.get(&d.id).cloned();
    }
}

/// Remap a corpus' gold labels onto the model's stored label names, so a
/// test corpus that lists categories in a different order (or misses some)
/// still scores correctly.
fn remap_gold_labels(corpus: &mut Corpus, model_names: &[String]) {
    let target: HashMap<&str, usize> = model_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let source = corpus.label_names.clone();
    for d in &mut corpus.docs {
        if let Some(gold) = d.gold_labels.take() {
            let remapped: BTreeSet<usize> = gold
                .into_iter()
                .filter_map(|old| target.get(source[old].as_str()).copied())
                .collect();
            d.gold_labels = Some(remapped);
        }
    }
    corpus.label_names = model_names.to_vec();
}

// ---- commands ----

pub fn ingest(input: &Path, output: &Path, tok: &TokenizerConfig, dry_run: bool) -> Result<()> {
    require_file(input, "raw corpus", "ingest (point --input at your JSON-Lines file)")?;
    let corpus = load_corpus(input, tok)?;
    println!(
        "ingested {} documents ({} gold labels); {} flagged empty",
        corpus.docs.len(),
        corpus.n_labels(),
        corpus.flagged_empty.len()
    );
    for id in &corpus.flagged_empty {
        eprintln!("warning: document {id} tokenized to nothing; excluded");
    }
    if dry_run {
        println!("dry-run: would write {}", output.display());
        return Ok(());
    }
    save_corpus(&corpus, output)?;
    println!("wrote {}", output.display());
    Ok(())
}

pub struct PseudolabelOpts {
    pub corpus: PathBuf,
    pub vocab_cap: usize,
    pub k: usize,
    pub vocab_out: PathBuf,
    pub output: PathBuf,
}

pub fn pseudolabel(opts: &PseudolabelOpts, tok: &TokenizerConfig, dry_run: bool) -> Result<()> {
    require_file(&opts.corpus, "corpus", "ingest")?;
    let mut corpus = load_corpus(&opts.corpus, tok)?;
    let stats = corpus_stats(&corpus.docs);
    let vocab = build_vocabulary(&corpus.docs, &stats, opts.vocab_cap);
    if vocab.size() < opts.vocab_cap {
        eprintln!(
            "warning: corpus has only {} distinct terms (cap {})",
            vocab.size(),
            opts.vocab_cap
        );
    }
    let report = corpus::pseudo_label_corpus(&mut corpus, &vocab, &stats, opts.k);
    println!(
        "pseudo-labeled {} documents (k={}); {} padded, {} unlabelable",
        report.labeled,
        opts.k,
        report.padded.len(),
        report.unlabelable.len()
    );
    for id in &report.unlabelable {
        eprintln!("warning: document {id} has no in-vocabulary terms; excluded from training");
    }
    if dry_run {
        println!(
            "dry-run: would write {} and {}",
            opts.vocab_out.display(),
            opts.output.display()
        );
        return Ok(());
    }
    vocab.save_tsv(&opts.vocab_out)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(&opts.output)?);
    for d in &corpus.docs {
        if let Some(labels) = &d.pseudo_labels {
            let rec = PseudoRecord {
                id: d.id.clone(),
                labels: labels.clone(),
                terms: labels.iter().map(|&i| vocab.term(i).to_string()).collect(),
                padded: report.padded.contains(&d.id),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    println!("wrote {} and {}", opts.vocab_out.display(), opts.output.display());
    Ok(())
}

pub enum TrainTargets {
    Gold,
    Pseudo { labels: PathBuf, vocab: PathBuf },
}

pub struct TrainOpts {
    pub corpus: PathBuf,
    pub targets: TrainTargets,
    pub model_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub activation: Activation,
    pub train: TrainConfig,
    pub input_vocab_cap: usize,
    pub pretrained_embeddings: Option<PathBuf>,
}

pub fn train_cmd(opts: &TrainOpts, tok: &TokenizerConfig, dry_run: bool) -> Result<()> {
    require_file(&opts.corpus, "corpus", "ingest")?;
    let mut corpus = load_corpus(&opts.corpus, tok)?;
    let stats = corpus_stats(&corpus.docs);
    let input_vocab = build_vocabulary(&corpus.docs, &stats, opts.input_vocab_cap);

    let mut enc = opts.encoder.clone();
    enc.dropout_p = opts.train.dropout_p;

    let (examples, label_space, label_vocab, out_dim) = match &opts.targets {
        TrainTargets::Gold => {
            if corpus.n_labels() == 0 {
                bail!("corpus has no gold labels; use --targets <pseudo.jsonl> for unsupervised training");
            }
            let ex = gold_examples(&corpus.docs, &input_vocab);
            let names = corpus.label_names.clone();
            let n = names.len();
            (ex, LabelSpaceMeta::Gold { names }, None, n)
        }
        TrainTargets::Pseudo { labels, vocab } => {
            require_file(vocab, "label vocabulary", "pseudolabel")?;
            let label_vocab = Vocabulary::load_tsv(vocab)?;
            let map = load_pseudo_records(labels)?;
            apply_pseudo_labels(&mut corpus, &map);
            let ex = pseudo_examples(&corpus.docs, &input_vocab);
            let n = label_vocab.size();
            (ex, LabelSpaceMeta::Pseudo, Some(label_vocab), n)
        }
    };
    if examples.len() < 2 {
        bail!("only {} trainable documents", examples.len());
    }
    println!(
        "training {} on {} documents, {} labels, input vocabulary {}",
        enc.kind.name(),
        examples.len(),
        out_dim,
        input_vocab.size()
    );
    if dry_run {
        println!("dry-run: would write model directory {}", opts.model_dir.display());
        return Ok(());
    }

    let decoder = DecoderConfig {
        out_dim,
        activation: opts.activation,
        label_embed_dim: enc.out_dim(),
        alpha: opts.train.alpha,
        loss_kind: opts.train.loss_kind,
        lm_literal: false,
        tie_label_embeddings: false,
    };
    let config = ClassifierConfig {
        encoder: enc,
        penultimate_dim: None,
        decoder,
    };
    let mut params: Params<f32> = Params::new();
    let mut rng = ChaCha12Rng::seed_from_u64(opts.train.seed);
    let classifier = Classifier::init(&mut params, config.clone(), input_vocab.size(), &mut rng)?;
    if let Some(pe) = &opts.pretrained_embeddings {
        require_file(pe, "embedding file", "ingest (any 'term v1 .. vD' text file works)")?;
        let n = semtag::encoders::load_pretrained_embeddings(
            pe,
            &mut params,
            classifier.encoder(),
            &input_vocab,
        )?;
        println!("initialized {n} embedding rows from {}", pe.display());
    }
    let report = train(&classifier, &mut params, &examples, &opts.train)?;
    println!(
        "stopped at epoch {} (best epoch {}, val loss {:.6})",
        report.stopped_epoch, report.best_epoch, report.best_val_loss
    );
    let meta = ModelMeta {
        classifier: config,
        label_space,
        tokenizer: tok.clone(),
    };
    model_dir::save_model(
        &opts.model_dir,
        &meta,
        &params,
        &input_vocab,
        label_vocab.as_ref(),
        Some(&report),
    )?;
    println!("wrote model directory {}", opts.model_dir.display());
    Ok(())
}

pub struct PretrainOpts {
    pub corpus: PathBuf,
    pub model_dir: PathBuf,
    pub vocab_cap: usize,
    pub penultimate_dim: usize,
    pub k: usize,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub input_vocab_cap: usize,
}

pub fn pretrain(opts: &PretrainOpts, tok: &TokenizerConfig, dry_run: bool) -> Result<()> {
    require_file(&opts.corpus, "corpus", "ingest")?;
    let mut corpus = load_corpus(&opts.corpus, tok)?;
    let stats = corpus_stats(&corpus.docs);
    let input_vocab = build_vocabulary(&corpus.docs, &stats, opts.input_vocab_cap);
    println!(
        "pre-training {} on {} documents (pseudo-label cap {}, penultimate {})",
        opts.encoder.kind.name(),
        corpus.docs.len(),
        opts.vocab_cap,
        opts.penultimate_dim
    );
    if dry_run {
        println!("dry-run: would write model directory {}", opts.model_dir.display());
        return Ok(());
    }
    let out: trainer::PretrainOut<f32> = trainer::pretrain_pseudo(
        opts.encoder.clone(),
        &input_vocab,
        &mut corpus,
        opts.vocab_cap,
        opts.penultimate_dim,
        opts.k,
        &opts.train,
    )?;
    println!(
        "stopped at epoch {} (best epoch {}, val loss {:.6}); label vocabulary {}",
        out.report.stopped_epoch,
        out.report.best_epoch,
        out.report.best_val_loss,
        out.label_vocab.size()
    );
    let meta = ModelMeta {
        classifier: out.classifier.config().clone(),
        label_space: LabelSpaceMeta::Pseudo,
        tokenizer: tok.clone(),
    };
    model_dir::save_model(
        &opts.model_dir,
        &meta,
        &out.params,
        &input_vocab,
        Some(&out.label_vocab),
        Some(&out.report),
    )?;
    println!("wrote model directory {}", opts.model_dir.display());
    Ok(())
}

pub struct FinetuneOpts {
    pub model_dir: PathBuf,
    pub corpus: PathBuf,
    pub model_out: PathBuf,
    pub folds: usize,
    pub train: TrainConfig,
}

pub fn finetune_cmd(opts: &FinetuneOpts, dry_run: bool) -> Result<()> {
    require_file(&opts.model_dir.join("model.json"), "model directory", "pretrain")?;
    require_file(&opts.corpus, "labeled corpus", "ingest")?;
    let loaded = model_dir::load_model(&opts.model_dir)?;
    let corpus = load_corpus(&opts.corpus, &loaded.meta.tokenizer)?;
    if corpus.n_labels() == 0 {
        bail!("labeled corpus has no gold labels");
    }
    let labeled = gold_examples(&corpus.docs, &loaded.input_vocab);
    println!(
        "fine-tuning on {} labeled documents across {} folds",
        labeled.len(),
        opts.folds
    );
    if dry_run {
        println!("dry-run: would write model directory {}", opts.model_out.display());
        return Ok(());
    }
    let (params, classifier, report) = trainer::finetune(
        &loaded.params,
        &loaded.classifier,
        &labeled,
        corpus.n_labels(),
        opts.folds,
        &opts.train,
    )?;
    println!("cross-validation chose epoch {}", report.stopping_epoch);
    let meta = ModelMeta {
        classifier: classifier.config().clone(),
        label_space: LabelSpaceMeta::Gold {
            names: corpus.label_names.clone(),
        },
        tokenizer: loaded.meta.tokenizer.clone(),
    };
    model_dir::save_model(&opts.model_out, &meta, &params, &loaded.input_vocab, None, None)?;
    write_json_pretty(&opts.model_out.join("finetune_report.json"), &report)?;
    println!("wrote model directory {}", opts.model_out.display());
    Ok(())
}

pub struct TagOpts {
    pub model_dir: PathBuf,
    pub corpus: PathBuf,
    pub pseudo: PathBuf,
    pub m: usize,
    pub k: usize,
    pub output: PathBuf,
}

pub fn tag(opts: &TagOpts, dry_run: bool) -> Result<()> {
    require_file(&opts.model_dir.join("model.json"), "model directory", "train")?;
    require_file(&opts.corpus, "corpus", "ingest")?;
    let loaded = model_dir::load_model(&opts.model_dir)?;
    let label_vocab = loaded.label_vocab.as_ref().ok_or_else(|| {
        anyhow!("model was trained on gold labels; tagging needs a pseudo-label model (train with --targets <pseudo.jsonl> or pretrain)")
    })?;
    let mut corpus = load_corpus(&opts.corpus, &loaded.meta.tokenizer)?;
    let map = load_pseudo_records(&opts.pseudo)?;
    apply_pseudo_labels(&mut corpus, &map);

    let (enc, skipped) = encode_all(
        loaded.classifier.encoder(),
        &loaded.params,
        &corpus.docs,
        &loaded.input_vocab,
    )?;
    for id in &skipped {
        eprintln!("warning: document {id} has no in-vocabulary tokens; not tagged");
    }
    println!(
        "encoded {} documents (dim {}); tagging with m={}, k={}",
        enc.len(),
        enc.dim(),
        opts.m,
        opts.k
    );
    if dry_run {
        println!("dry-run: would write {}", opts.output.display());
        return Ok(());
    }
    let tags = tag_corpus(&enc, &corpus.docs, label_vocab, opts.m, opts.k)?;
    save_tags(&tags, &opts.output)?;
    let exhausted = tags.iter().filter(|t| t.exhausted).count();
    println!(
        "wrote {} tag assignments to {} ({} with exhausted candidate pools)",
        tags.len(),
        opts.output.display(),
        exhausted
    );
    Ok(())
}

pub struct IndexOpts {
    pub corpus: PathBuf,
    pub output: PathBuf,
    pub k1: f64,
    pub b: f64,
}

pub fn index_cmd(opts: &IndexOpts, tok: &TokenizerConfig, dry_run: bool) -> Result<()> {
    require_file(&opts.corpus, "corpus", "ingest")?;
    let corpus = load_corpus(&opts.corpus, tok)?;
    let index = build_index(&corpus.docs, opts.k1, opts.b)?;
    println!(
        "indexed {} documents (avg length {:.2}, k1={}, b={})",
        index.n_docs(),
        index.avg_len(),
        opts.k1,
        opts.b
    );
    if dry_run {
        println!("dry-run: would write {}", opts.output.display());
        return Ok(());
    }
    index.save_json(&opts.output)?;
    println!("wrote {}", opts.output.display());
    Ok(())
}

pub struct SearchOpts {
    pub index: PathBuf,
    pub queries: PathBuf,
    pub top: usize,
    pub run_tag: String,
    pub output: PathBuf,
}

fn load_queries_checked(path: &Path) -> Result<Vec<Query>> {
    require_file(path, "query file", "ingest (queries are JSON-Lines {id, text})")?;
    Ok(semtag::retrieval::load_queries(path)?)
}

pub fn search_cmd(opts: &SearchOpts, tok: &TokenizerConfig, dry_run: bool) -> Result<()> {
    require_file(&opts.index, "index", "index")?;
    let index = InvertedIndex::load_json(&opts.index)?;
    let queries = load_queries_checked(&opts.queries)?;
    let mut run = RetrievalRun::new(opts.run_tag.clone());
    for q in &queries {
        let terms = unique_weighted_terms(&q.text, tok);
        run.results.insert(q.id.clone(), search(&index, &terms, opts.top));
    }
    println!("ran {} queries against {} documents", queries.len(), index.n_docs());
    if dry_run {
        println!("dry-run: would write {}", opts.output.display());
        return Ok(());
    }
    run.save(&opts.output)?;
    println!("wrote {}", opts.output.display());
    Ok(())
}

fn unique_weighted_terms(text: &str, tok: &TokenizerConfig) -> Vec<(String, f64)> {
    let mut terms: Vec<(String, f64)> = Vec::new();
    for t in corpus::tokenize(text, tok) {
        if !terms.iter().any(|(o, _)| *o == t) {
            terms.push((t, 1.0));
        }
    }
    terms
}

pub struct ExpandSearchOpts {
    pub index: PathBuf,
    pub queries: PathBuf,
    pub model_dir: PathBuf,
    pub corpus: PathBuf,
    pub pseudo: PathBuf,
    pub n_fb: usize,
    pub k: usize,
    pub w_exp: f64,
    pub top: usize,
    pub run_tag: String,
    pub output: PathBuf,
}

pub fn expand_search(opts: &ExpandSearchOpts, dry_run: bool) -> Result<()> {
    require_file(&opts.index, "index", "index")?;
    require_file(&opts.model_dir.join("model.json"), "model directory", "train")?;
    require_file(&opts.corpus, "corpus", "ingest")?;
    let index = InvertedIndex::load_json(&opts.index)?;
    let queries = load_queries_checked(&opts.queries)?;
    let loaded = model_dir::load_model(&opts.model_dir)?;
    let label_vocab = loaded.label_vocab.as_ref().ok_or_else(|| {
        anyhow!("model was trained on gold labels; expansion needs a pseudo-label model")
    })?;
    let tok = loaded.meta.tokenizer.clone();
    let mut corpus = load_corpus(&opts.corpus, &tok)?;
    let pseudo_map = load_pseudo_records(&opts.pseudo)?;
    apply_pseudo_labels(&mut corpus, &pseudo_map);

    let (encodings, skipped) = encode_all(
        loaded.classifier.encoder(),
        &loaded.params,
        &corpus.docs,
        &loaded.input_vocab,
    )?;
    if !skipped.is_empty() {
        eprintln!("warning: {} documents not encodable; they cannot serve as neighbors", skipped.len());
    }
    let pseudo_by_id: HashMap<String, Vec<usize>> = corpus
        .docs
        .iter()
        .filter_map(|d| d.pseudo_labels.clone().map(|p| (d.id.clone(), p)))
        .collect();
    let expander = Expander {
        model: loaded.classifier.encoder(),
        params: &loaded.params,
        input_vocab: &loaded.input_vocab,
        label_vocab,
        encodings: &encodings,
        pseudo_labels: &pseudo_by_id,
        tokenizer: &tok,
    };
    let mut run = RetrievalRun::new(opts.run_tag.clone());
    let mut unencodable = 0usize;
    for q in &queries {
        let expanded = expand_query(&expander, &q.text, opts.n_fb, opts.k, opts.w_exp)?;
        if expanded.unencodable {
            unencodable += 1;
            eprintln!("warning: query {} has no in-vocabulary tokens; searched unexpanded", q.id);
        }
        run.results
            .insert(q.id.clone(), search(&index, &expanded.terms, opts.top));
    }
    println!(
        "expanded and ran {} queries (n_fb={}, k={}, w_exp={}); {} unexpandable",
        queries.len(),
        opts.n_fb,
        opts.k,
        opts.w_exp,
        unencodable
    );
    if dry_run {
        println!("dry-run: would write {}", opts.output.display());
        return Ok(());
    }
    run.save(&opts.output)?;
    println!("wrote {}", opts.output.display());
    Ok(())
}

#[derive(Serialize)]
struct IrMetrics<'a> {
    cutoff: usize,
    mean_precision: f64,
    per_query: &'a std::collections::BTreeMap<String, f64>,
}

pub fn eval_ir(run: &Path, qrels: &Path, cutoff: usize, output: &Path, dry_run: bool) -> Result<()> {
    require_file(run, "run file", "search (or expand-search)")?;
    require_file(qrels, "qrels file", "eval-ir (supply TREC qrels: qid 0 docid grade)")?;
    let run = RetrievalRun::load(run)?;
    let qrels = Qrels::load(qrels)?;
    let report = precision_at_k(&run, &qrels, cutoff)?;
    println!("mean P@{} = {:.4} over {} queries", cutoff, report.mean, report.per_query.len());
    if dry_run {
        println!("dry-run: would write {}", output.display());
        return Ok(());
    }
    write_json_pretty(
        output,
        &IrMetrics {
            cutoff,
            mean_precision: report.mean,
            per_query: &report.per_query,
        },
    )?;
    println!("wrote {}", output.display());
    Ok(())
}

#[derive(Serialize)]
struct MlcMetrics {
    micro_auc: f64,
    n_docs: usize,
    n_labels: usize,
}

pub fn eval_mlc(model_dir_path: &Path, corpus_path: &Path, output: &Path, dry_run: bool) -> Result<()> {
    require_file(&model_dir_path.join("model.json"), "model directory", "train")?;
    require_file(corpus_path, "test corpus", "ingest")?;
    let loaded = model_dir::load_model(model_dir_path)?;
    let LabelSpaceMeta::Gold { names } = &loaded.meta.label_space else {
        bail!("model predicts pseudo-label terms, not gold categories; evaluate a gold-label model (train --targets gold, or finetune)");
    };
    let mut corpus = load_corpus(corpus_path, &loaded.meta.tokenizer)?;
    remap_gold_labels(&mut corpus, names);
    let sheet = evaluate_holdout(
        &loaded.classifier,
        &loaded.params,
        &corpus.docs,
        &loaded.input_vocab,
        names.len(),
    )?;
    if sheet.is_empty() {
        bail!("no evaluable documents (gold labels + in-vocabulary tokens required)");
    }
    let auc = roc_auc_micro(&sheet)?;
    println!("micro ROC AUC = {:.4} over {} documents", auc, sheet.doc_ids.len());
    if dry_run {
        println!("dry-run: would write {}", output.display());
        return Ok(());
    }
    write_json_pretty(
        output,
        &MlcMetrics {
            micro_auc: auc,
            n_docs: sheet.doc_ids.len(),
            n_labels: names.len(),
        },
    )?;
    println!("wrote {}", output.display());
    Ok(())
}

pub struct CurveOpts {
    pub corpus: PathBuf,
    pub test_corpus: PathBuf,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub encoder: EncoderConfig,
    pub activation: Activation,
    pub train: TrainConfig,
    pub input_vocab_cap: usize,
    pub output: PathBuf,
}

pub fn curve(opts: &CurveOpts, tok: &TokenizerConfig, dry_run: bool) -> Result<()> {
    require_file(&opts.corpus, "training corpus", "ingest")?;
    require_file(&opts.test_corpus, "test corpus", "ingest")?;
    let train_corpus = load_corpus(&opts.corpus, tok)?;
    if train_corpus.n_labels() == 0 {
        bail!("training corpus has no gold labels");
    }
    let mut test_corpus = load_corpus(&opts.test_corpus, tok)?;
    remap_gold_labels(&mut test_corpus, &train_corpus.label_names);
    let stats = corpus_stats(&train_corpus.docs);
    let input_vocab = build_vocabulary(&train_corpus.docs, &stats, opts.input_vocab_cap);
    let all_examples = gold_examples(&train_corpus.docs, &input_vocab);
    println!(
        "learning curve over {} fractions x {} seeds ({} training documents)",
        opts.fractions.len(),
        opts.seeds.len(),
        all_examples.len()
    );
    if dry_run {
        println!("dry-run: would write {}", opts.output.display());
        return Ok(());
    }

    let n_labels = train_corpus.n_labels();
    let mut enc = opts.encoder.clone();
    enc.dropout_p = opts.train.dropout_p;
    let table = labeled_fraction_curve(&opts.fractions, &opts.seeds, |fraction, seed| {
        // subsample label indices with the cell seed, preserving corpus
        // order so fraction 1.0 is exactly the full supervised run
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..all_examples.len()).collect();
        idx.shuffle(&mut rng);
        let keep = ((all_examples.len() as f64 * fraction).round() as usize)
            .clamp(2, all_examples.len());
        let mut chosen: Vec<usize> = idx.into_iter().take(keep).collect();
        chosen.sort_unstable();
        let subset: Vec<_> = chosen.iter().map(|&i| all_examples[i].clone()).collect();

        let decoder = DecoderConfig {
            out_dim: n_labels,
            activation: opts.activation,
            label_embed_dim: enc.out_dim(),
            alpha: opts.train.alpha,
            loss_kind: opts.train.loss_kind,
            lm_literal: false,
            tie_label_embeddings: false,
        };
        let config = ClassifierConfig {
            encoder: enc.clone(),
            penultimate_dim: None,
            decoder,
        };
        let mut cell_cfg = opts.train.clone();
        cell_cfg.seed = seed;
        let mut params: Params<f32> = Params::new();
        let mut init_rng = ChaCha12Rng::seed_from_u64(seed);
        let classifier = Classifier::init(&mut params, config, input_vocab.size(), &mut init_rng)?;
        train(&classifier, &mut params, &subset, &cell_cfg)?;
        let sheet = evaluate_holdout(
            &classifier,
            &params,
            &test_corpus.docs,
            &input_vocab,
            n_labels,
        )?;
        roc_auc_micro(&sheet)
    })?;
    std::fs::write(&opts.output, table.to_tsv())?;
    for row in &table.rows {
        println!("fraction {:.2}: mean AUC {:.4}", row.fraction, row.mean_auc);
    }
    println!("wrote {}", opts.output.display());
    Ok(())
}
