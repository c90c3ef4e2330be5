//! Multi-label classification metrics: micro-averaged ROC AUC and
//! labeled-fraction learning curves.

use crate::{Error, Result};
use serde::Serialize;
use std::fmt::Write as _;

/// Per-document, per-label scores with binary gold labels.
#[derive(Debug, Clone, Default)]
pub struct ScoreSheet {
    pub doc_ids: Vec<String>,
    /// scores[i][j]: score of label j on document i
    pub scores: Vec<Vec<f64>>,
    pub gold: Vec<Vec<bool>>,
}

impl ScoreSheet {
    pub fn push(&mut self, id: String, scores: Vec<f64>, gold: Vec<bool>) {
        assert_eq!(scores.len(), gold.len(), "scores/gold length mismatch");
        self.doc_ids.push(id);
        self.scores.push(scores);
        self.gold.push(gold);
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }
}

/// Micro-averaged ROC AUC: pool every (document, label) pair and compute
/// the Mann-Whitney statistic with midrank tie handling. Errors when the
/// pool has no positives or no negatives.
pub fn roc_auc_micro(sheet: &ScoreSheet) -> Result<f64> {
    let mut pairs: Vec<(f64, bool)> = Vec::new();
    for (row, gold) in sheet.scores.iter().zip(&sheet.gold) {
        for (&s, &g) in row.iter().zip(gold) {
            if !s.is_finite() {
                return Err(Error::Invalid(format!("non-finite score {s}")));
            }
            pairs.push((s, g));
        }
    }
    auc_from_pairs(&mut pairs)
}

/// AUC over one label column, for per-label dumps.
pub fn roc_auc_label(sheet: &ScoreSheet, label: usize) -> Result<f64> {
    let mut pairs: Vec<(f64, bool)> = sheet
        .scores
        .iter()
        .zip(&sheet.gold)
        .map(|(row, gold)| (row[label], gold[label]))
        .collect();
    auc_from_pairs(&mut pairs)
}

fn auc_from_pairs(pairs: &mut [(f64, bool)]) -> Result<f64> {
    let pos = pairs.iter().filter(|(_, g)| *g).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid(format!(
            "AUC undefined: {pos} positives, {neg} negatives"
        )));
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    // midranks over tie groups, 1-based
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j + 1 < pairs.len() && pairs[j + 1].0 == pairs[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for p in &pairs[i..=j] {
            if p.1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    let n = neg as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// One learning-curve cell: a seed and the test AUC it produced.
#[derive(Debug, Clone, Serialize)]
pub struct CurveCell {
    pub seed: u64,
    pub auc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveRow {
    pub fraction: f64,
    pub cells: Vec<CurveCell>,
    pub mean_auc: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct CurveTable {
    pub rows: Vec<CurveRow>,
}

impl CurveTable {
    /// Plot-ready TSV: fraction, per-seed AUCs, mean.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("fraction\tseed\tauc\tmean_auc\n");
        for row in &self.rows {
            for cell in &row.cells {
                let _ = writeln!(
                    out,
                    "{:.4}\t{}\t{:.6}\t{:.6}",
                    row.fraction, cell.seed, cell.auc, row.mean_auc
                );
            }
        }
        out
    }
}

/// Run the supervised protocol at each labeled fraction and seed. `run`
/// subsamples training labels with the given seed, trains, and returns the
/// test AUC. Fractions are sorted ascending in the output.
pub fn labeled_fraction_curve(
    fractions: &[f64],
    seeds: &[u64],
    mut run: impl FnMut(f64, u64) -> Result<f64>,
) -> Result<CurveTable> {
    if fractions.is_empty() || seeds.is_empty() {
        return Err(Error::Config("curve needs fractions and seeds".into()));
    }
    for &f in fractions {
        if !(0.0 < f && f <= 1.0) {
            return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
        }
    }
    let mut sorted = fractions.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite fractions"));
    let mut table = CurveTable::default();
    for &fraction in &sorted {
        let mut cells = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            cells.push(CurveCell {
                seed,
                auc: run(fraction, seed)?,
            });
        }
        let mean_auc = cells.iter().map(|c| c.auc).sum::<f64>() / cells.len() as f64;
        table.rows.push(CurveRow {
            fraction,
            cells,
            mean_auc,
        });
    }
    Ok(table)
}
