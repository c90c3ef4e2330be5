//! Self-contained model directories: architecture config, input vocabulary,
//! label space, and a 32-bit parameter checkpoint.

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use semtag::autodiff::{self, Params};
use semtag::corpus::{TokenizerConfig, Vocabulary};
use semtag::trainer::{Classifier, ClassifierConfig, TrainReport};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LabelSpaceMeta {
    /// Labels are pseudo-label vocabulary terms (label_vocab.tsv).
    Pseudo,
    /// Labels are gold category names, in index order.
    Gold { names: Vec<String> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub classifier: ClassifierConfig,
    pub label_space: LabelSpaceMeta,
    pub tokenizer: TokenizerConfig,
}

pub struct LoadedModel {
    pub params: Params<f32>,
    pub classifier: Classifier,
    pub input_vocab: Vocabulary,
    /// Present for pseudo-label models.
    pub label_vocab: Option<Vocabulary>,
    pub meta: ModelMeta,
}

pub fn save_model(
    dir: &Path,
    meta: &ModelMeta,
    params: &Params<f32>,
    input_vocab: &Vocabulary,
    label_vocab: Option<&Vocabulary>,
    report: Option<&TrainReport>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("model.json"),
        serde_json::to_string_pretty(meta)? + "\n",
    )?;
    input_vocab.save_tsv(&dir.join("input_vocab.tsv"))?;
    match (&meta.label_space, label_vocab) {
        (LabelSpaceMeta::Pseudo, Some(v)) => v.save_tsv(&dir.join("label_vocab.tsv"))?,
        (LabelSpaceMeta::Pseudo, None) => bail!("pseudo label space requires a label vocabulary"),
        (LabelSpaceMeta::Gold { .. }, _) => {}
    }
    autodiff::save(params, &dir.join("manifest.json"), &dir.join("params.bin"))?;
    if let Some(r) = report {
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(r)? + "\n",
        )?;
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<LoadedModel> {
    let meta_path = dir.join("model.json");
    let meta: ModelMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path)
            .with_context(|| format!("cannot read {}", meta_path.display()))?,
    )?;
    let input_vocab = Vocabulary::load_tsv(&dir.join("input_vocab.tsv"))?;
    let label_vocab = match meta.label_space {
        LabelSpaceMeta::Pseudo => Some(Vocabulary::load_tsv(&dir.join("label_vocab.tsv"))?),
        LabelSpaceMeta::Gold { .. } => None,
    };
    let mut params: Params<f32> = Params::new();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let classifier = Classifier::init(
        &mut params,
        meta.classifier.clone(),
        input_vocab.size(),
        &mut rng,
    )?;
    autodiff::load_into(&mut params, &dir.join("manifest.json"), &dir.join("params.bin"))?;
    Ok(LoadedModel {
        params,
        classifier,
        input_vocab,
        label_vocab,
        meta,
    })
}

pub fn n_labels(meta: &ModelMeta, label_vocab: Option<&Vocabulary>) -> usize {
    match &meta.label_space {
        LabelSpaceMeta::Pseudo => label_vocab.map(|v| v.size()).unwrap_or(0),
        LabelSpaceMeta::Gold { names } => names.len(),
    }
}
