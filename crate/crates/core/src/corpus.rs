//! Corpus ingestion: tokenization, TFIDF statistics, vocabulary
//! construction, and pseudo-label assignment.
//!
//! Documents arrive as JSON-Lines records (`id`, optional `title`, `text`,
//! optional `labels`). Tokenization lowercases, splits on anything that is
//! not alphanumeric or a hyphen, keeps hyphenated compounds whole, and by
//! default drops stopwords and terms shorter than two characters.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just",
    "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub remove_stopwords: bool,
    pub min_term_len: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            remove_stopwords: true,
            min_term_len: 2,
        }
    }
}

/// Lowercased alphanumeric terms; hyphenated compounds stay one term.
pub fn tokenize(text: &str, cfg: &TokenizerConfig) -> Vec<String> {
    let stop: HashSet<&str> = if cfg.remove_stopwords {
        STOPWORDS.iter().copied().collect()
    } else {
        HashSet::new()
    };
    let mut out = Vec::new();
    let mut cur = String::new();
    let flush = |cur: &mut String, out: &mut Vec<String>| {
        let t = cur.trim_matches('-');
        if t.len() >= cfg.min_term_len && !stop.contains(t) {
            out.push(t.to_string());
        }
        cur.clear();
    };
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '-' {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            flush(&mut cur, &mut out);
        }
    }
    if !cur.is_empty() {
        flush(&mut cur, &mut out);
    }
    out
}

/// Tokenized text unit with optional gold labels and assigned pseudo-labels.
#[derive(Debug, Clone)]
pub struct Document {
    pub id: String,
    pub title: Option<String>,
    pub text: String,
    pub tokens: Vec<String>,
    pub gold_labels: Option<BTreeSet<usize>>,
    pub pseudo_labels: Option<Vec<usize>>,
}

/// On-disk JSON-Lines record.
#[derive(Debug, Serialize, Deserialize)]
struct DocRecord {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    title: Option<String>,
    text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub docs: Vec<Document>,
    /// Sorted unique gold label names; `gold_labels` index into this list.
    pub label_names: Vec<String>,
    /// Ids of documents whose token sequence came out empty; excluded from
    /// `docs` and from training.
    pub flagged_empty: Vec<String>,
}

impl Corpus {
    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }
}

/// Parse a JSON-Lines corpus file, tokenize, and index gold labels.
pub fn load_corpus(path: &Path, cfg: &TokenizerConfig) -> Result<Corpus> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(corpus_from_records(records, cfg))
}

fn corpus_from_records(records: Vec<DocRecord>, cfg: &TokenizerConfig) -> Corpus {
    let mut label_set: BTreeSet<String> = BTreeSet::new();
    for r in &records {
        if let Some(ls) = &r.labels {
            label_set.extend(ls.iter().cloned());
        }
    }
    let label_names: Vec<String> = label_set.into_iter().collect();
    let label_index: HashMap<&str, usize> = label_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let mut docs = Vec::new();
    let mut flagged_empty = Vec::new();
    for r in records {
        let tokens = tokenize(&r.text, cfg);
        if tokens.is_empty() {
            flagged_empty.push(r.id);
            continue;
        }
        let gold_labels = r.labels.map(|ls| {
            ls.iter()
                .filter_map(|l| label_index.get(l.as_str()).copied())
                .collect()
        });
        docs.push(Document {
            id: r.id,
            title: r.title,
            text: r.text,
            tokens,
            gold_labels,
            pseudo_labels: None,
        });
    }
    Corpus {
        docs,
        label_names,
        flagged_empty,
    }
}

/// Write the canonical record fields back out; tokens and pseudo-labels are
/// derived artifacts and are not stored here.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for d in &corpus.docs {
        let rec = DocRecord {
            id: d.id.clone(),
            title: d.title.clone(),
            text: d.text.clone(),
            labels: d.gold_labels.as_ref().map(|g| {
                g.iter()
                    .map(|&i| corpus.label_names[i].clone())
                    .collect()
            }),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Corpus-level term statistics backing TFIDF and BM25.
#[derive(Debug, Clone)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub avg_doc_len: f64,
    pub df: HashMap<String, u32>,
}

pub fn corpus_stats(docs: &[Document]) -> CorpusStats {
    let n_docs = docs.len();
    let mut df: HashMap<String, u32> = HashMap::new();
    let mut total_len = 0usize;
    for d in docs {
        total_len += d.tokens.len();
        let uniq: HashSet<&String> = d.tokens.iter().collect();
        for t in uniq {
            *df.entry(t.clone()).or_insert(0) += 1;
        }
    }
    CorpusStats {
        n_docs,
        avg_doc_len: if n_docs == 0 {
            0.0
        } else {
            total_len as f64 / n_docs as f64
        },
        df,
    }
}

/// `tf(t, doc) * ln(1 + N / df(t))` for every term of the document. Terms
/// absent from the stats score zero.
pub fn tfidf_scores(doc: &Document, stats: &CorpusStats) -> BTreeMap<String, f64> {
    let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &doc.tokens {
        *tf.entry(t.as_str()).or_insert(0) += 1;
    }
    tf.into_iter()
        .map(|(term, count)| {
            let score = match stats.df.get(term) {
                Some(&df) if df > 0 => {
                    count as f64 * (1.0 + stats.n_docs as f64 / df as f64).ln()
                }
                _ => 0.0,
            };
            (term.to_string(), score)
        })
        .collect()
}

/// Ranked term -> index map with document frequencies.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, usize>,
    df: Vec<u32>,
    idf: Vec<f64>,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.terms.len()
    }

    pub fn get(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn term(&self, idx: usize) -> &str {
        &self.terms[idx]
    }

    pub fn df(&self, idx: usize) -> u32 {
        self.df[idx]
    }

    pub fn idf(&self, idx: usize) -> f64 {
        self.idf[idx]
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    /// Map a token sequence to vocabulary indices, skipping unknown terms.
    pub fn token_ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().filter_map(|t| self.get(t)).collect()
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (i, term) in self.terms.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}\t{}", term, i, self.df[i], self.idf[i])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_tsv(path: &Path) -> Result<Vocabulary> {
        let file = fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut terms = Vec::new();
        let mut df = Vec::new();
        let mut idf = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let fail = |msg: &str| Error::MalformedLine {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: msg.to_string(),
            };
            if parts.len() != 4 {
                return Err(fail("expected 4 tab-separated fields"));
            }
            let idx: usize = parts[1].parse().map_err(|_| fail("bad index"))?;
            if idx != terms.len() {
                return Err(fail("index out of order"));
            }
            terms.push(parts[0].to_string());
            df.push(parts[2].parse().map_err(|_| fail("bad df"))?);
            idf.push(parts[3].parse().map_err(|_| fail("bad idf"))?);
        }
        let index = terms
            .iter()
            .enumerate()
            .map(|(i, t): (usize, &String)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            terms,
            index,
            df,
            idf,
        })
    }
}

/// Rank terms by corpus-level TFIDF salience (max over documents of the
/// per-document score) and keep the top `cap`. Score ties break
/// lexicographically, so the ordering is deterministic. A corpus with fewer
/// distinct terms than `cap` yields a smaller vocabulary; callers compare
/// `size()` against `cap` to warn.
pub fn build_vocabulary(docs: &[Document], stats: &CorpusStats, cap: usize) -> Vocabulary {
    let mut max_tf: HashMap<&str, usize> = HashMap::new();
    for d in docs {
        let mut tf: HashMap<&str, usize> = HashMap::new();
        for t in &d.tokens {
            *tf.entry(t.as_str()).or_insert(0) += 1;
        }
        for (t, c) in tf {
            let e = max_tf.entry(t).or_insert(0);
            if c > *e {
                *e = c;
            }
        }
    }
    let n = stats.n_docs as f64;
    let mut ranked: Vec<(&str, f64)> = max_tf
        .into_iter()
        .map(|(t, tf)| {
            let df = *stats.df.get(t).unwrap_or(&1) as f64;
            (t, tf as f64 * (1.0 + n / df).ln())
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(b.0))
    });
    ranked.truncate(cap);

    let terms: Vec<String> = ranked.iter().map(|(t, _)| t.to_string()).collect();
    let df: Vec<u32> = terms
        .iter()
        .map(|t| *stats.df.get(t).unwrap_or(&1))
        .collect();
    let idf: Vec<f64> = df
        .iter()
        .map(|&d| (1.0 + stats.n_docs as f64 / d as f64).ln())
        .collect();
    let index = terms
        .iter()
        .enumerate()
        .map(|(i, t): (usize, &String)| (t.clone(), i))
        .collect();
    Vocabulary {
        terms,
        index,
        df,
        idf,
    }
}

/// Outcome of pseudo-labeling one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    /// Exactly `k` distinct vocabulary indices.
    pub indices: Vec<usize>,
    /// True when the document had fewer than `k` in-vocabulary terms and the
    /// set was padded with the highest-df vocabulary terms.
    pub padded: bool,
}

/// The `k` in-vocabulary terms of the document with the highest TFIDF
/// scores; ties break toward the lower vocabulary index. Documents with
/// fewer than `k` in-vocabulary terms are padded from the vocabulary by
/// descending document frequency; documents with none are unlabelable.
pub fn assign_pseudo_labels(
    doc: &Document,
    vocab: &Vocabulary,
    stats: &CorpusStats,
    k: usize,
) -> Result<PseudoLabels> {
    let scores = tfidf_scores(doc, stats);
    let mut in_vocab: Vec<(usize, f64)> = scores
        .iter()
        .filter_map(|(term, &s)| vocab.get(term).map(|ix| (ix, s)))
        .collect();
    if in_vocab.is_empty() {
        return Err(Error::Unlabelable { id: doc.id.clone() });
    }
    in_vocab.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    let mut indices: Vec<usize> = in_vocab.iter().take(k).map(|&(ix, _)| ix).collect();
    let mut padded = false;
    if indices.len() < k {
        padded = true;
        let chosen: HashSet<usize> = indices.iter().copied().collect();
        let mut by_df: Vec<usize> = (0..vocab.size()).filter(|ix| !chosen.contains(ix)).collect();
        by_df.sort_by(|&a, &b| vocab.df(b).cmp(&vocab.df(a)).then_with(|| a.cmp(&b)));
        for ix in by_df {
            if indices.len() == k {
                break;
            }
            indices.push(ix);
        }
    }
    Ok(PseudoLabels { indices, padded })
}

/// Pseudo-label every document in place; returns which documents were
/// padded or could not be labeled (the latter keep `pseudo_labels = None`
/// and are excluded from training).
#[derive(Debug, Default)]
pub struct PseudoLabelReport {
    pub labeled: usize,
    pub padded: Vec<String>,
    pub unlabelable: Vec<String>,
}

pub fn pseudo_label_corpus(
    corpus: &mut Corpus,
    vocab: &Vocabulary,
    stats: &CorpusStats,
    k: usize,
) -> PseudoLabelReport {
    let mut report = PseudoLabelReport::default();
    for doc in &mut corpus.docs {
        match assign_pseudo_labels(doc, vocab, stats, k) {
            Ok(pl) => {
                report.labeled += 1;
                if pl.padded {
                    report.padded.push(doc.id.clone());
                }
                doc.pseudo_labels = Some(pl.indices);
            }
            Err(_) => {
                report.unlabelable.push(doc.id.clone());
                doc.pseudo_labels = None;
            }
        }
    }
    report
}
