//! Tag-transfer inference: encode every document, rank neighbors by cosine
//! similarity, and move the top-k candidate terms from the neighbors'
//! pseudo-label sets onto the query document.
//!
//! Candidates exclude the query's own pseudo-labels and any term occurring
//! in its token sequence, so transferred tags are genuinely alternate
//! descriptors. Each candidate's score is the sum of the cosines of the
//! neighbors that contributed it; consensus across neighbors wins.

use crate::autodiff::{Params, Scalar};
use crate::corpus::{Document, Vocabulary};
use crate::encoders::EncoderModel;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

/// Document encodings in corpus order with precomputed norms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodingMatrix {
    ids: Vec<String>,
    dim: usize,
    rows: Vec<f64>,
    norms: Vec<f64>,
    #[serde(skip)]
    by_id: HashMap<String, usize>,
}

impl EncodingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if ids.len() * dim != rows.len() {
            return Err(Error::Invalid(format!(
                "{} ids x dim {dim} does not match {} values",
                ids.len(),
                rows.len()
            )));
        }
        let mut norms = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            let row = &rows[i * dim..(i + 1) * dim];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Invalid(format!(
                    "document {id} has a zero or non-finite encoding"
                )));
            }
            norms.push(norm);
        }
        let by_id = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(EncodingMatrix {
            ids,
            dim,
            rows,
            norms,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(serde_json::to_string(self)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let mut m: EncodingMatrix = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        m.by_id = m
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(m)
    }
}

/// Encode the whole corpus with dropout disabled. Documents with no
/// in-vocabulary tokens are skipped and reported in the second return.
pub fn encode_all<T: Scalar>(
    model: &EncoderModel,
    params: &Params<T>,
    docs: &[Document],
    input_vocab: &Vocabulary,
) -> Result<(EncodingMatrix, Vec<String>)> {
    let dim = model.out_dim();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for d in docs {
        let token_ids = input_vocab.token_ids(&d.tokens);
        if token_ids.is_empty() {
            skipped.push(d.id.clone());
            continue;
        }
        let v = model.encode(params, &token_ids)?;
        ids.push(d.id.clone());
        rows.extend_from_slice(&v);
    }
    Ok((EncodingMatrix::new(ids, dim, rows)?, skipped))
}

fn cosine(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// Query target: either a document already in the matrix (excluded from its
/// own neighborhood) or an external vector such as an encoded query text.
pub enum NeighborQuery<'a> {
    DocId(&'a str),
    Vector(&'a [f64]),
}

/// Exact top-m scan by cosine similarity; ties break toward the lower
/// document id.
pub fn nearest_neighbors(
    query: NeighborQuery<'_>,
    enc: &EncodingMatrix,
    m: usize,
) -> Result<Vec<(String, f64)>> {
    if m == 0 {
        return Err(Error::Invalid("neighbor count m must be >= 1".into()));
    }
    let (qvec, qnorm, exclude) = match query {
        NeighborQuery::DocId(id) => {
            let ix = enc
                .index_of(id)
                .ok_or_else(|| Error::Invalid(format!("unknown document id {id:?}")))?;
            (enc.row(ix).to_vec(), enc.norms[ix], Some(ix))
        }
        NeighborQuery::Vector(v) => {
            if v.len() != enc.dim {
                return Err(Error::Invalid(format!(
                    "query vector dim {} vs matrix dim {}",
                    v.len(),
                    enc.dim
                )));
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Invalid("query vector has zero norm".into()));
            }
            (v.to_vec(), n, None)
        }
    };
    let mut scored: Vec<(usize, f64)> = (0..enc.len())
        .filter(|&i| Some(i) != exclude)
        .map(|i| (i, cosine(&qvec, qnorm, enc.row(i), enc.norms[i])))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite cosines")
            .then_with(|| enc.ids[a.0].cmp(&enc.ids[b.0]))
    });
    scored.truncate(m);
    Ok(scored
        .into_iter()
        .map(|(i, c)| (enc.ids[i].clone(), c))
        .collect())
}

/// Provenance for one transferred tag.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TagProvenance {
    pub term: String,
    pub score: f64,
    pub neighbors: Vec<String>,
}

/// The alternate tag set assigned to one document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TagAssignment {
    pub id: String,
    pub tags: Vec<String>,
    pub provenance: Vec<TagProvenance>,
    /// Set when the candidate pool ran out before k tags were found.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub exhausted: bool,
}

/// The query's own term material, used to keep transferred tags alternate.
pub struct QueryTerms<'a> {
    pub id: &'a str,
    pub pseudo_labels: &'a [usize],
    pub tokens: &'a [String],
}

/// Score the union of the neighbors' pseudo-label terms (minus the query's
/// own pseudo-labels and any term in its token sequence) by summed neighbor
/// cosine; keep the top k, ties toward the lower vocabulary index.
pub fn transfer_tags(
    query: &QueryTerms<'_>,
    neighbors: &[(String, f64)],
    pseudo_labels: &HashMap<String, Vec<usize>>,
    vocab: &Vocabulary,
    k: usize,
) -> TagAssignment {
    assert!(!neighbors.is_empty(), "transfer_tags: no neighbors");
    let own: HashSet<usize> = query.pseudo_labels.iter().copied().collect();
    let own_terms: HashSet<&str> = query.tokens.iter().map(|s| s.as_str()).collect();
    let mut scores: BTreeMap<usize, (f64, Vec<String>)> = BTreeMap::new();
    for (nid, cos) in neighbors {
        let Some(labels) = pseudo_labels.get(nid) else {
            continue;
        };
        for &ix in labels {
            if own.contains(&ix) || own_terms.contains(vocab.term(ix)) {
                continue;
            }
            let e = scores.entry(ix).or_insert_with(|| (0.0, Vec::new()));
            e.0 += cos;
            e.1.push(nid.clone());
        }
    }
    let mut ranked: Vec<(usize, f64, Vec<String>)> = scores
        .into_iter()
        .map(|(ix, (s, ns))| (ix, s, ns))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then_with(|| a.0.cmp(&b.0))
    });
    let exhausted = ranked.len() < k;
    ranked.truncate(k);
    TagAssignment {
        id: query.id.to_string(),
        tags: ranked.iter().map(|(ix, _, _)| vocab.term(*ix).to_string()).collect(),
        provenance: ranked
            .into_iter()
            .map(|(ix, score, neighbors)| TagProvenance {
                term: vocab.term(ix).to_string(),
                score,
                neighbors,
            })
            .collect(),
        exhausted,
    }
}

/// Tag every encodable document against its m nearest neighbors.
pub fn tag_corpus(
    enc: &EncodingMatrix,
    docs: &[Document],
    vocab: &Vocabulary,
    m: usize,
    k: usize,
) -> Result<Vec<TagAssignment>> {
    let pseudo: HashMap<String, Vec<usize>> = docs
        .iter()
        .filter_map(|d| d.pseudo_labels.clone().map(|p| (d.id.clone(), p)))
        .collect();
    let mut out = Vec::new();
    for d in docs {
        let Some(own) = d.pseudo_labels.as_ref() else {
            continue;
        };
        if enc.index_of(&d.id).is_none() {
            continue;
        }
        let neighbors = nearest_neighbors(NeighborQuery::DocId(&d.id), enc, m)?;
        if neighbors.is_empty() {
            continue;
        }
        let q = QueryTerms {
            id: &d.id,
            pseudo_labels: own,
            tokens: &d.tokens,
        };
        out.push(transfer_tags(&q, &neighbors, &pseudo, vocab, k));
    }
    Ok(out)
}

/// JSON-Lines dump of tag assignments.
pub fn save_tags(tags: &[TagAssignment], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in tags {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_tags(path: &Path) -> Result<Vec<TagAssignment>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TagAssignment = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, corpus_stats, tokenize, TokenizerConfig};

    fn matrix(rows: &[(&str, &[f64])]) -> EncodingMatrix {
        let dim = rows[0].1.len();
        let ids = rows.iter().map(|(id, _)| id.to_string()).collect();
        let vals = rows.iter().flat_map(|(_, r)| r.iter().copied()).collect();
        EncodingMatrix::new(ids, dim, vals).unwrap()
    }

    #[test]
    fn duplicate_document_ranks_first_with_cosine_one() {
        let enc = matrix(&[
            ("a", &[1.0, 0.0]),
            ("b", &[0.8, 0.6]),
            ("twin", &[2.0, 0.0]), // same direction as a
        ]);
        let nn = nearest_neighbors(NeighborQuery::DocId("a"), &enc, 2).unwrap();
        assert_eq!(nn[0].0, "twin");
        assert!((nn[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_encodings_rank_below_positive_pairs() {
        let enc = matrix(&[
            ("a", &[1.0, 0.0]),
            ("ortho", &[0.0, 1.0]),
            ("close", &[0.9, 0.1]),
        ]);
        let nn = nearest_neighbors(NeighborQuery::DocId("a"), &enc, 2).unwrap();
        assert_eq!(nn[0].0, "close");
        assert_eq!(nn[1].0, "ortho");
        assert!(nn[1].1.abs() < 1e-12);
    }

    #[test]
    fn self_is_excluded_from_neighborhood() {
        let enc = matrix(&[("a", &[1.0, 0.0]), ("b", &[0.5, 0.5])]);
        let nn = nearest_neighbors(NeighborQuery::DocId("a"), &enc, 5).unwrap();
        assert_eq!(nn.len(), 1);
        assert_eq!(nn[0].0, "b");
    }

    #[test]
    fn cosine_ties_break_by_lower_doc_id() {
        let enc = matrix(&[
            ("q", &[1.0, 0.0]),
            ("zz", &[3.0, 0.0]),
            ("aa", &[2.0, 0.0]),
        ]);
        let nn = nearest_neighbors(NeighborQuery::DocId("q"), &enc, 2).unwrap();
        assert_eq!(nn[0].0, "aa");
        assert_eq!(nn[1].0, "zz");
    }

    #[test]
    fn brute_force_oracle_matches_on_seeded_matrix() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        let n = 1000;
        let dim = 8;
        let ids: Vec<String> = (0..n).map(|i| format!("d{i:04}")).collect();
        let rows: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let enc = EncodingMatrix::new(ids.clone(), dim, rows.clone()).unwrap();

        let got = nearest_neighbors(NeighborQuery::DocId("d0007"), &enc, 10).unwrap();

        // oracle: recompute every cosine naively and fully sort
        let q = &rows[7 * dim..8 * dim];
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut all: Vec<(String, f64)> = (0..n)
            .filter(|&i| i != 7)
            .map(|i| {
                let r = &rows[i * dim..(i + 1) * dim];
                let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = q.iter().zip(r).map(|(a, b)| a * b).sum();
                (ids[i].clone(), dot / (qn * rn))
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        all.truncate(10);
        assert_eq!(got, all);
    }

    fn toy_vocab() -> (Vec<Document>, Vocabulary) {
        let texts = [
            ("q", "alpha beta gamma"),
            ("n1", "delta epsilon zeta"),
            ("n2", "epsilon eta theta"),
            ("n3", "iota kappa lambda"),
        ];
        let docs: Vec<Document> = texts
            .iter()
            .map(|(id, t)| Document {
                id: id.to_string(),
                title: None,
                text: t.to_string(),
                tokens: tokenize(t, &TokenizerConfig::default()),
                gold_labels: None,
                pseudo_labels: None,
            })
            .collect();
        let stats = corpus_stats(&docs);
        let vocab = build_vocabulary(&docs, &stats, 100);
        (docs, vocab)
    }

    #[test]
    fn single_neighbor_transfers_its_terms_in_vocab_order() {
        let (docs, vocab) = toy_vocab();
        let q_pseudo = vec![vocab.get("alpha").unwrap()];
        let n1_pseudo = vec![
            vocab.get("delta").unwrap(),
            vocab.get("epsilon").unwrap(),
            vocab.get("zeta").unwrap(),
        ];
        let mut pseudo = HashMap::new();
        pseudo.insert("n1".to_string(), n1_pseudo.clone());
        let q = QueryTerms {
            id: "q",
            pseudo_labels: &q_pseudo,
            tokens: &docs[0].tokens,
        };
        let ta = transfer_tags(&q, &[("n1".into(), 0.9)], &pseudo, &vocab, 3);
        assert_eq!(ta.tags.len(), 3);
        assert!(!ta.exhausted);
        // equal scores: ordering falls back to vocabulary index
        let mut expect: Vec<usize> = n1_pseudo.clone();
        expect.sort_unstable();
        let expect: Vec<String> = expect.iter().map(|&i| vocab.term(i).to_string()).collect();
        assert_eq!(ta.tags, expect);
    }

    #[test]
    fn consensus_term_outranks_single_higher_cosine() {
        // shared candidate scores 0.9 + 0.8 = 1.7, beating a 0.95 unique
        let (docs, vocab) = toy_vocab();
        let shared = vocab.get("epsilon").unwrap();
        let unique = vocab.get("kappa").unwrap();
        let mut pseudo = HashMap::new();
        pseudo.insert("n1".to_string(), vec![shared]);
        pseudo.insert("n2".to_string(), vec![shared]);
        pseudo.insert("n3".to_string(), vec![unique]);
        let q_pseudo = vec![vocab.get("alpha").unwrap()];
        let q = QueryTerms {
            id: "q",
            pseudo_labels: &q_pseudo,
            tokens: &docs[0].tokens,
        };
        let neighbors = vec![
            ("n1".to_string(), 0.9),
            ("n2".to_string(), 0.8),
            ("n3".to_string(), 0.95),
        ];
        let ta = transfer_tags(&q, &neighbors, &pseudo, &vocab, 2);
        assert_eq!(ta.tags[0], "epsilon");
        assert!((ta.provenance[0].score - 1.7).abs() < 1e-12);
        assert_eq!(ta.tags[1], "kappa");
        assert_eq!(ta.provenance[0].neighbors, vec!["n1", "n2"]);
    }

    #[test]
    fn own_pseudo_labels_and_tokens_are_never_transferred() {
        let (docs, vocab) = toy_vocab();
        // neighbor offers the query's own pseudo-label and a token of the
        // query text; both must be filtered
        let own = vocab.get("alpha").unwrap();
        let in_text = vocab.get("beta").unwrap();
        let fresh = vocab.get("zeta").unwrap();
        let mut pseudo = HashMap::new();
        pseudo.insert("n1".to_string(), vec![own, in_text, fresh]);
        let q_pseudo = vec![own];
        let q = QueryTerms {
            id: "q",
            pseudo_labels: &q_pseudo,
            tokens: &docs[0].tokens,
        };
        let ta = transfer_tags(&q, &[("n1".into(), 0.5)], &pseudo, &vocab, 3);
        assert_eq!(ta.tags, vec!["zeta"]);
        assert!(ta.exhausted);
    }

    #[test]
    fn raising_a_neighbor_cosine_never_demotes_its_terms() {
        let (docs, vocab) = toy_vocab();
        let a = vocab.get("epsilon").unwrap();
        let b = vocab.get("kappa").unwrap();
        let mut pseudo = HashMap::new();
        pseudo.insert("n1".to_string(), vec![a]);
        pseudo.insert("n3".to_string(), vec![b]);
        let q_pseudo = vec![vocab.get("alpha").unwrap()];
        let q = QueryTerms {
            id: "q",
            pseudo_labels: &q_pseudo,
            tokens: &docs[0].tokens,
        };
        let rank_of = |cos_n1: f64| {
            let neighbors = vec![("n1".to_string(), cos_n1), ("n3".to_string(), 0.6)];
            let ta = transfer_tags(&q, &neighbors, &pseudo, &vocab, 2);
            ta.tags.iter().position(|t| t == "epsilon").unwrap()
        };
        let before = rank_of(0.3);
        let after = rank_of(0.9);
        assert!(after <= before);
    }

    #[test]
    fn tags_round_trip_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tags.jsonl");
        let tags = vec![TagAssignment {
            id: "d1".into(),
            tags: vec!["x".into(), "y".into()],
            provenance: vec![TagProvenance {
                term: "x".into(),
                score: 1.5,
                neighbors: vec!["n1".into()],
            }],
            exhausted: false,
        }];
        save_tags(&tags, &path).unwrap();
        let loaded = load_tags(&path).unwrap();
        assert_eq!(tags, loaded);
    }

    #[test]
    fn zero_row_is_rejected() {
        let err = EncodingMatrix::new(vec!["a".into()], 2, vec![0.0, 0.0]);
        assert!(err.is_err());
    }
}
