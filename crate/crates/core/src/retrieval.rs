//! Okapi BM25 retrieval: inverted index, weighted-term search, query
//! expansion through the tag-transfer pipeline, and P@10 evaluation against
//! TREC-format judgments.

use crate::autodiff::{Params, Scalar};
use crate::corpus::{tokenize, Document, TokenizerConfig, Vocabulary};
use crate::encoders::EncoderModel;
use crate::tagger::{transfer_tags, EncodingMatrix, NeighborQuery, QueryTerms};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Inverted index with document lengths and BM25 parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    avg_len: f64,
    pub k1: f64,
    pub b: f64,
}

impl InvertedIndex {
    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn doc_id(&self, i: usize) -> &str {
        &self.doc_ids[i]
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, |p| p.len())
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n_docs() as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 contribution of one term for one document (by index).
    pub fn term_score(&self, term: &str, doc: usize, tf: u32) -> f64 {
        let tf = tf as f64;
        let len_norm = 1.0 - self.b + self.b * self.doc_len[doc] as f64 / self.avg_len;
        self.idf(term) * tf * (self.k1 + 1.0) / (tf + self.k1 * len_norm)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(serde_json::to_string(self)?.as_bytes())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Build the index from tokenized documents.
pub fn build_index(docs: &[Document], k1: f64, b: f64) -> Result<InvertedIndex> {
    if docs.is_empty() {
        return Err(Error::Invalid("cannot index an empty corpus".into()));
    }
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut doc_ids = Vec::with_capacity(docs.len());
    let mut doc_len = Vec::with_capacity(docs.len());
    let mut total = 0usize;
    for (i, d) in docs.iter().enumerate() {
        doc_ids.push(d.id.clone());
        doc_len.push(d.tokens.len() as u32);
        total += d.tokens.len();
        let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
        for t in &d.tokens {
            *tf.entry(t.as_str()).or_insert(0) += 1;
        }
        for (term, count) in tf {
            postings.entry(term.to_string()).or_default().push(Posting {
                doc: i as u32,
                tf: count,
            });
        }
    }
    Ok(InvertedIndex {
        postings,
        doc_ids,
        doc_len,
        avg_len: total as f64 / docs.len() as f64,
        k1,
        b,
    })
}

/// Convenience: plain BM25 score of a query against one document.
pub fn bm25_score(index: &InvertedIndex, query_terms: &[String], doc_id: &str) -> f64 {
    let Some(doc) = index.doc_ids.iter().position(|d| d == doc_id) else {
        return 0.0;
    };
    let mut score = 0.0;
    for term in query_terms {
        if let Some(postings) = index.postings.get(term) {
            if let Ok(p) = postings.binary_search_by_key(&(doc as u32), |p| p.doc) {
                score += index.term_score(term, doc, postings[p].tf);
            }
        }
    }
    score
}

/// Weighted search: `sum_t weight(t) * bm25_term_score(t)` per document,
/// ranked by descending score with ties toward the lower document id.
pub fn search(
    index: &InvertedIndex,
    weighted_terms: &[(String, f64)],
    top_n: usize,
) -> Vec<(String, f64)> {
    let mut scores: HashMap<u32, f64> = HashMap::new();
    for (term, weight) in weighted_terms {
        if *weight == 0.0 {
            continue;
        }
        if let Some(postings) = index.postings.get(term) {
            for p in postings {
                *scores.entry(p.doc).or_insert(0.0) +=
                    weight * index.term_score(term, p.doc as usize, p.tf);
            }
        }
    }
    let mut ranked: Vec<(String, f64)> = scores
        .into_iter()
        .map(|(doc, s)| (index.doc_ids[doc as usize].clone(), s))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then_with(|| a.0.cmp(&b.0))
    });
    ranked.truncate(top_n);
    ranked
}

/// Everything the expander needs from the trained pipeline.
pub struct Expander<'a, T: Scalar> {
    pub model: &'a EncoderModel,
    pub params: &'a Params<T>,
    pub input_vocab: &'a Vocabulary,
    pub label_vocab: &'a Vocabulary,
    pub encodings: &'a EncodingMatrix,
    pub pseudo_labels: &'a HashMap<String, Vec<usize>>,
    pub tokenizer: &'a TokenizerConfig,
}

/// Outcome of expanding one query.
#[derive(Debug, Clone, Serialize)]
pub struct ExpandedQuery {
    pub terms: Vec<(String, f64)>,
    pub expansion_terms: Vec<String>,
    /// Query had no in-vocabulary tokens: returned unexpanded.
    pub unencodable: bool,
}

/// Treat the query text as an unseen document: encode it, take its top
/// `n_fb` cosine neighbors, transfer k tags, and emit the original terms at
/// weight 1.0 plus the expansion terms at `w_exp`. Expansion terms that
/// duplicate an original term fold into the original weight.
pub fn expand_query<T: Scalar>(
    exp: &Expander<'_, T>,
    query_text: &str,
    n_fb: usize,
    k: usize,
    w_exp: f64,
) -> Result<ExpandedQuery> {
    let tokens = tokenize(query_text, exp.tokenizer);
    let mut originals: Vec<(String, f64)> = Vec::new();
    for t in &tokens {
        if !originals.iter().any(|(o, _)| o == t) {
            originals.push((t.clone(), 1.0));
        }
    }
    let token_ids = exp.input_vocab.token_ids(&tokens);
    if token_ids.is_empty() || w_exp == 0.0 {
        let unencodable = token_ids.is_empty();
        return Ok(ExpandedQuery {
            terms: originals,
            expansion_terms: Vec::new(),
            unencodable,
        });
    }
    let qvec = exp.model.encode(exp.params, &token_ids)?;
    let neighbors = nearest_neighbors_for_query(&qvec, exp.encodings, n_fb)?;
    if neighbors.is_empty() {
        return Ok(ExpandedQuery {
            terms: originals,
            expansion_terms: Vec::new(),
            unencodable: false,
        });
    }
    let q = QueryTerms {
        id: "query",
        pseudo_labels: &[],
        tokens: &tokens,
    };
    let assignment = transfer_tags(&q, &neighbors, exp.pseudo_labels, exp.label_vocab, k);
    let mut terms = originals;
    let mut expansion_terms = Vec::new();
    for tag in assignment.tags {
        if terms.iter().any(|(t, _)| *t == tag) {
            continue; // fold into the original weight
        }
        expansion_terms.push(tag.clone());
        terms.push((tag, w_exp));
    }
    Ok(ExpandedQuery {
        terms,
        expansion_terms,
        unencodable: false,
    })
}

fn nearest_neighbors_for_query(
    qvec: &[f64],
    enc: &EncodingMatrix,
    n_fb: usize,
) -> Result<Vec<(String, f64)>> {
    crate::tagger::nearest_neighbors(NeighborQuery::Vector(qvec), enc, n_fb)
}

// ---- TREC formats ----

/// Relevance judgments: (query id, doc id) -> grade.
#[derive(Debug, Clone, Default)]
pub struct Qrels {
    pub grades: BTreeMap<(String, String), u32>,
}

impl Qrels {
    /// Parse TREC qrels lines: `qid 0 docid grade`.
    pub fn load(path: &Path) -> Result<Qrels> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut grades = BTreeMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::MalformedLine {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("expected 4 fields, got {}", parts.len()),
                });
            }
            let grade: u32 = parts[3].parse().map_err(|_| Error::MalformedLine {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("bad grade {:?}", parts[3]),
            })?;
            grades.insert((parts[0].to_string(), parts[2].to_string()), grade);
        }
        Ok(Qrels { grades })
    }

    pub fn is_relevant(&self, qid: &str, docid: &str) -> bool {
        self.grades
            .get(&(qid.to_string(), docid.to_string()))
            .is_some_and(|&g| g >= 1)
    }

    /// Query ids that have at least one judged-relevant document.
    pub fn queries_with_relevant(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&String> = self
            .grades
            .iter()
            .filter(|(_, &g)| g >= 1)
            .map(|((qid, _), _)| qid)
            .collect();
        set.into_iter().cloned().collect()
    }
}

/// Ranked results per query, with a run label.
#[derive(Debug, Clone)]
pub struct RetrievalRun {
    pub label: String,
    /// query id -> ranked (doc id, score)
    pub results: BTreeMap<String, Vec<(String, f64)>>,
}

impl RetrievalRun {
    pub fn new(label: impl Into<String>) -> Self {
        RetrievalRun {
            label: label.into(),
            results: BTreeMap::new(),
        }
    }

    /// Write TREC run format: `qid Q0 docid rank score tag`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for (qid, ranked) in &self.results {
            for (rank, (docid, score)) in ranked.iter().enumerate() {
                writeln!(w, "{} Q0 {} {} {:.6} {}", qid, docid, rank + 1, score, self.label)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RetrievalRun> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut run = RetrievalRun::new("loaded");
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 6 {
                return Err(Error::MalformedLine {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("expected 6 fields, got {}", parts.len()),
                });
            }
            let score: f64 = parts[4].parse().map_err(|_| Error::MalformedLine {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("bad score {:?}", parts[4]),
            })?;
            run.label = parts[5].to_string();
            run.results
                .entry(parts[0].to_string())
                .or_default()
                .push((parts[1 + 1].to_string(), score));
        }
        Ok(run)
    }
}

/// Per-query and mean P@cutoff. Relevant means grade >= 1; the mean covers
/// only queries that have at least one judged-relevant document.
#[derive(Debug, Clone, Serialize)]
pub struct PrecisionReport {
    pub cutoff: usize,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
}

pub fn precision_at_k(run: &RetrievalRun, qrels: &Qrels, cutoff: usize) -> Result<PrecisionReport> {
    if cutoff == 0 {
        return Err(Error::Invalid("cutoff must be >= 1".into()));
    }
    let qids = qrels.queries_with_relevant();
    if qids.is_empty() {
        return Err(Error::Invalid(
            "no query has a judged-relevant document".into(),
        ));
    }
    let mut per_query = BTreeMap::new();
    let mut total = 0.0f64;
    for qid in &qids {
        let hits = run
            .results
            .get(qid)
            .map(|ranked| {
                ranked
                    .iter()
                    .take(cutoff)
                    .filter(|(d, _)| qrels.is_relevant(qid, d))
                    .count()
            })
            .unwrap_or(0);
        let p = hits as f64 / cutoff as f64;
        per_query.insert(qid.clone(), p);
        total += p;
    }
    Ok(PrecisionReport {
        cutoff,
        per_query,
        mean: total / qids.len() as f64,
    })
}

/// JSON-Lines queries: `{"id": ..., "text": ...}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: Query = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push(q);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, TokenizerConfig};

    fn doc(id: &str, text: &str) -> Document {
        Document {
            id: id.to_string(),
            title: None,
            text: text.to_string(),
            tokens: tokenize(text, &TokenizerConfig::default()),
            gold_labels: None,
            pseudo_labels: None,
        }
    }

    #[test]
    fn absent_query_term_contributes_zero() {
        let docs = vec![doc("d1", "alpha beta"), doc("d2", "gamma delta")];
        let index = build_index(&docs, DEFAULT_K1, DEFAULT_B).unwrap();
        let s = bm25_score(&index, &["zeta".to_string()], "d1");
        assert_eq!(s, 0.0);
    }

    #[test]
    fn single_doc_at_average_length_scores_idf() {
        // tf=1, len=avglen: the saturation factor cancels to 1, leaving idf
        let docs = vec![doc("only", "solo")];
        let index = build_index(&docs, DEFAULT_K1, DEFAULT_B).unwrap();
        let s = bm25_score(&index, &["solo".to_string()], "only");
        let idf = (1.0f64 + (1.0 - 1.0 + 0.5) / 1.5).ln();
        assert!((s - idf).abs() < 1e-12);
        assert!((idf - (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn tf_monotonicity() {
        let docs = vec![
            doc("d1", "term filler filler filler"),
            doc("d2", "term term filler filler"),
            doc("d3", "other filler filler filler"),
        ];
        let index = build_index(&docs, DEFAULT_K1, DEFAULT_B).unwrap();
        let q = vec!["term".to_string()];
        let s1 = bm25_score(&index, &q, "d1");
        let s2 = bm25_score(&index, &q, "d2");
        assert!(s2 > s1, "more tf must not lower the score");
    }

    #[test]
    fn search_ranks_by_score_then_doc_id() {
        let docs = vec![
            doc("zz", "apple apple banana"),
            doc("aa", "apple apple banana"),
            doc("mm", "banana cherry date"),
        ];
        let index = build_index(&docs, DEFAULT_K1, DEFAULT_B).unwrap();
        let ranked = search(&index, &[("apple".to_string(), 1.0)], 10);
        assert_eq!(ranked.len(), 2);
        assert_eq!(ranked[0].0, "aa");
        assert_eq!(ranked[1].0, "zz");
        assert_eq!(ranked[0].1, ranked[1].1);
    }

    #[test]
    fn brute_force_oracle_matches_index_top_100() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2024);
        let terms: Vec<String> = (0..30).map(|i| format!("term{i:02}")).collect();
        let docs: Vec<Document> = (0..200)
            .map(|i| {
                let len = rng.random_range(4..30);
                let words: Vec<String> = (0..len)
                    .map(|_| terms[rng.random_range(0..terms.len())].clone())
                    .collect();
                doc(&format!("d{i:03}"), &words.join(" "))
            })
            .collect();
        let index = build_index(&docs, DEFAULT_K1, DEFAULT_B).unwrap();
        let query: Vec<(String, f64)> = vec![
            ("term03".to_string(), 1.0),
            ("term07".to_string(), 1.0),
            ("term11".to_string(), 0.5),
        ];
        let got = search(&index, &query, 100);

        // oracle: score every document directly from its token counts
        let n = docs.len() as f64;
        let avg = docs.iter().map(|d| d.tokens.len()).sum::<usize>() as f64 / n;
        let mut expect: Vec<(String, f64)> = docs
            .iter()
            .map(|d| {
                let mut s = 0.0;
                for (term, w) in &query {
                    let tf = d.tokens.iter().filter(|t| *t == term).count() as f64;
                    if tf == 0.0 {
                        continue;
                    }
                    let df = docs
                        .iter()
                        .filter(|d2| d2.tokens.iter().any(|t| t == term))
                        .count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    let norm = 1.0 - DEFAULT_B + DEFAULT_B * d.tokens.len() as f64 / avg;
                    s += w * idf * tf * (DEFAULT_K1 + 1.0) / (tf + DEFAULT_K1 * norm);
                }
                (d.id.clone(), s)
            })
            .filter(|(_, s)| *s != 0.0)
            .collect();
        expect.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        expect.truncate(100);
        assert_eq!(got.len(), expect.len());
        for ((gd, gs), (ed, es)) in got.iter().zip(&expect) {
            assert_eq!(gd, ed);
            assert!((gs - es).abs() < 1e-9);
        }
    }

    #[test]
    fn precision_fixture_hand_computed() {
        let dir = tempfile::tempdir().unwrap();
        let qrels_path = dir.path().join("qrels.txt");
        std::fs::write(
            &qrels_path,
            "q1 0 d1 1\nq1 0 d2 0\nq1 0 d3 2\nq2 0 d4 1\nq3 0 d9 1\n",
        )
        .unwrap();
        let qrels = Qrels::load(&qrels_path).unwrap();

        let mut run = RetrievalRun::new("test");
        run.results.insert(
            "q1".into(),
            vec![("d1".into(), 3.0), ("d2".into(), 2.0), ("d3".into(), 1.0)],
        );
        run.results.insert("q2".into(), vec![("d4".into(), 1.0)]);
        run.results.insert("q3".into(), vec![("dX".into(), 1.0)]);

        let report = precision_at_k(&run, &qrels, 2).unwrap();
        // q1: d1 relevant, d2 not -> 0.5; q2: d4 -> 0.5; q3: nothing judged
        // relevant retrieved -> 0.0
        assert!((report.per_query["q1"] - 0.5).abs() < 1e-12);
        assert!((report.per_query["q2"] - 0.5).abs() < 1e-12);
        assert!((report.per_query["q3"] - 0.0).abs() < 1e-12);
        assert!((report.mean - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn precision_all_relevant_is_one_and_no_judged_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let qrels_path = dir.path().join("qrels.txt");
        std::fs::write(&qrels_path, "q1 0 d1 1\nq1 0 d2 1\n").unwrap();
        let qrels = Qrels::load(&qrels_path).unwrap();
        let mut run = RetrievalRun::new("t");
        run.results
            .insert("q1".into(), vec![("d1".into(), 2.0), ("d2".into(), 1.0)]);
        let r = precision_at_k(&run, &qrels, 2).unwrap();
        assert_eq!(r.mean, 1.0);

        let mut empty = RetrievalRun::new("t");
        empty.results.insert("q1".into(), vec![("zz".into(), 1.0)]);
        let r = precision_at_k(&empty, &qrels, 2).unwrap();
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn precision_invariant_to_doc_id_relabeling() {
        let dir = tempfile::tempdir().unwrap();
        let q1 = dir.path().join("q1.txt");
        std::fs::write(&q1, "q 0 a 1\nq 0 b 0\nq 0 c 1\n").unwrap();
        let q2 = dir.path().join("q2.txt");
        std::fs::write(&q2, "q 0 xx 1\nq 0 yy 0\nq 0 zz 1\n").unwrap();
        let mut r1 = RetrievalRun::new("t");
        r1.results
            .insert("q".into(), vec![("a".into(), 3.0), ("b".into(), 2.0), ("c".into(), 1.0)]);
        let mut r2 = RetrievalRun::new("t");
        r2.results.insert(
            "q".into(),
            vec![("xx".into(), 3.0), ("yy".into(), 2.0), ("zz".into(), 1.0)],
        );
        let p1 = precision_at_k(&r1, &Qrels::load(&q1).unwrap(), 3).unwrap();
        let p2 = precision_at_k(&r2, &Qrels::load(&q2).unwrap(), 3).unwrap();
        assert_eq!(p1.mean, p2.mean);
    }

    #[test]
    fn run_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.txt");
        let mut run = RetrievalRun::new("mytag");
        run.results
            .insert("q1".into(), vec![("d2".into(), 1.5), ("d1".into(), 0.25)]);
        run.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "q1 Q0 d2 1 1.500000 mytag\nq1 Q0 d1 2 0.250000 mytag\n");
        let loaded = RetrievalRun::load(&path).unwrap();
        assert_eq!(loaded.label, "mytag");
        assert_eq!(loaded.results["q1"].len(), 2);
        assert_eq!(loaded.results["q1"][0].0, "d2");
    }

    #[test]
    fn index_round_trip_preserves_scores() {
        let docs = vec![doc("d1", "alpha beta alpha"), doc("d2", "beta gamma")];
        let index = build_index(&docs, DEFAULT_K1, DEFAULT_B).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        index.save_json(&path).unwrap();
        let loaded = InvertedIndex::load_json(&path).unwrap();
        let q = vec![("alpha".to_string(), 1.0)];
        assert_eq!(search(&index, &q, 10), search(&loaded, &q, 10));
    }
}
