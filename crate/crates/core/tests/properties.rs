//! Property suites over randomized inputs.

use proptest::prelude::*;
use semtag::autodiff::{Params, Tape};
use semtag::corpus::{
    assign_pseudo_labels, build_vocabulary, corpus_stats, tokenize, Document, TokenizerConfig,
};
use semtag::eval::{roc_auc_micro, ScoreSheet};
use semtag::retrieval::{build_index, search};

fn doc(id: &str, words: &[String]) -> Document {
    Document {
        id: id.to_string(),
        title: None,
        text: words.join(" "),
        tokens: words.to_vec(),
        gold_labels: None,
        pseudo_labels: None,
    }
}

fn word_corpus(seeds: &[Vec<u8>]) -> Vec<Document> {
    seeds
        .iter()
        .enumerate()
        .map(|(i, picks)| {
            let words: Vec<String> = picks.iter().map(|w| format!("w{:02}", w % 24)).collect();
            doc(&format!("d{i:03}"), &words)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_always_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let params: Params<f64> = Params::new();
        let mut tape = Tape::new(&params, false);
        let x = tape.input_vec(vals);
        let s = tape.softmax_rows(x);
        let sum: f64 = tape.values(s).iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(tape.values(s).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn pseudo_labels_are_document_terms(seeds in prop::collection::vec(prop::collection::vec(0u8..255, 3..15), 4..30)) {
        let docs = word_corpus(&seeds);
        let stats = corpus_stats(&docs);
        let vocab = build_vocabulary(&docs, &stats, 16);
        for d in &docs {
            if let Ok(pl) = assign_pseudo_labels(d, &vocab, &stats, 3) {
                prop_assert_eq!(pl.indices.len(), 3);
                let distinct: std::collections::HashSet<_> = pl.indices.iter().collect();
                prop_assert_eq!(distinct.len(), 3);
                if !pl.padded {
                    for &ix in &pl.indices {
                        prop_assert!(d.tokens.iter().any(|t| t == vocab.term(ix)));
                    }
                }
            }
        }
    }

    #[test]
    fn vocabulary_build_is_deterministic(seeds in prop::collection::vec(prop::collection::vec(0u8..255, 2..10), 3..15)) {
        let docs = word_corpus(&seeds);
        let stats = corpus_stats(&docs);
        let a = build_vocabulary(&docs, &stats, 12);
        let b = build_vocabulary(&docs, &stats, 12);
        prop_assert_eq!(a.terms(), b.terms());
    }

    #[test]
    fn bm25_search_scores_descend_and_respect_top_n(
        seeds in prop::collection::vec(prop::collection::vec(0u8..255, 2..12), 3..25),
        top_n in 1usize..30,
    ) {
        let docs = word_corpus(&seeds);
        let index = build_index(&docs, 1.2, 0.75).unwrap();
        let ranked = search(&index, &[("w03".to_string(), 1.0), ("w07".to_string(), 0.5)], top_n);
        prop_assert!(ranked.len() <= top_n);
        for w in ranked.windows(2) {
            prop_assert!(w[0].1 >= w[1].1);
            if w[0].1 == w[1].1 {
                prop_assert!(w[0].0 < w[1].0, "ties must order by doc id");
            }
        }
    }

    #[test]
    fn auc_stays_in_unit_interval(
        scores in prop::collection::vec(0.0f64..1.0, 4..60),
        flips in prop::collection::vec(any::<bool>(), 4..60),
    ) {
        let n = scores.len().min(flips.len());
        let gold = &flips[..n];
        if gold.iter().any(|&g| g) && gold.iter().any(|&g| !g) {
            let mut sheet = ScoreSheet::default();
            for (i, (&s, &g)) in scores[..n].iter().zip(gold).enumerate() {
                sheet.push(format!("d{i}"), vec![s], vec![g]);
            }
            let auc = roc_auc_micro(&sheet).unwrap();
            prop_assert!((0.0..=1.0).contains(&auc));
        }
    }

    #[test]
    fn tokenize_is_lowercase_alnum_hyphen(text in "\\PC{0,80}") {
        for tok in tokenize(&text, &TokenizerConfig::default()) {
            prop_assert!(tok.len() >= 2);
            prop_assert!(tok.chars().all(|c| c.is_alphanumeric() || c == '-'));
            prop_assert_eq!(tok.clone(), tok.to_lowercase());
        }
    }
}
