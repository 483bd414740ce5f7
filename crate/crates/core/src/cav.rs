//! Concept vectors in the target feature space and the per-class rankings
//! built from them.
//!
//! With features taken at the penultimate layer, logit `k` is
//! `W_k · a + b_k`, so its gradient with respect to the features is the
//! weight row `W_k` for every input. Scoring a concept is then a single dot
//! product between that row and the concept's vector.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Execution};
use crate::num_format::sig9;
use crate::store::{ClassifierHead, ConceptEntry, UNIT_NORM_TOL};
use crate::trainer::AffineMap;

#[derive(Debug, Clone, PartialEq)]
pub struct TextCav {
    pub concept_text: String,
    pub vector: Vec<f32>,
}

fn checked_embedding<'a>(concept: &'a ConceptEntry, h: &AffineMap) -> Result<&'a [f32]> {
    let e = concept.embedding.as_deref().ok_or_else(|| {
        Error::Precondition(format!("concept {:?} has no embedding", concept.text))
    })?;
    if e.len() != h.in_dim() {
        return Err(Error::Shape(format!(
            "concept {:?} embedding is {}-dim, map expects {}",
            concept.text,
            e.len(),
            h.in_dim()
        )));
    }
    let n = linalg::norm(e);
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Validation(format!(
            "concept {:?} embedding has norm {n}, expected unit",
            concept.text
        )));
    }
    Ok(e)
}

/// `h(embedding)`, rescaled to unit length when `normalize` is set.
pub fn make_textcav_with(concept: &ConceptEntry, h: &AffineMap, normalize: bool) -> Result<TextCav> {
    let mapped = h.apply(checked_embedding(concept, h)?)?;
    let n = linalg::norm(&mapped);
    if !(n > 1e-12) {
        return Err(Error::Degenerate(format!(
            "concept {:?} maps to a vector of norm {n:e}",
            concept.text
        )));
    }
    let vector = if normalize {
        linalg::l2_normalize(&mapped)?
    } else {
        mapped
    };
    Ok(TextCav {
        concept_text: concept.text.clone(),
        vector,
    })
}

pub fn make_textcav(concept: &ConceptEntry, h: &AffineMap) -> Result<TextCav> {
    make_textcav_with(concept, h, true)
}

/// Gradient of logit `k` with respect to penultimate features: row `k` of
/// the head weights, independent of the activation.
pub fn head_gradient(head: &ClassifierHead, k: usize) -> Result<Vec<f32>> {
    if k >= head.num_classes() {
        return Err(Error::Index {
            index: k,
            len: head.num_classes(),
        });
    }
    Ok(head.weights.row(k).to_vec())
}

pub fn directional_derivative(grad: &[f32], cav: &TextCav) -> Result<f64> {
    linalg::dot(grad, &cav.vector)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingEntry {
    pub text: String,
    #[serde(serialize_with = "sig9")]
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRanking {
    #[serde(rename = "class")]
    pub class_name: String,
    pub map_id: String,
    pub head_id: String,
    pub entries: Vec<RankingEntry>,
}

impl SensitivityRanking {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.text.as_str())
    }

    /// 1-based position of `text`, if present.
    pub fn position(&self, text: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.text == text).map(|i| i + 1)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable ranking");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct RankOptions {
    pub map_id: String,
    pub head_id: String,
    pub normalize_cavs: bool,
    pub execution: Execution,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self {
            map_id: "map".into(),
            head_id: "head".into(),
            normalize_cavs: true,
            execution: Execution::default(),
        }
    }
}

/// Descending score, ascending text on ties.
pub fn ranking_order(a: &RankingEntry, b: &RankingEntry) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.text.cmp(&b.text))
}

/// Scores every concept for class `k`, in input order.
pub fn score_concepts(
    head: &ClassifierHead,
    k: usize,
    concepts: &[ConceptEntry],
    h: &AffineMap,
    normalize_cavs: bool,
    execution: Execution,
) -> Result<Vec<RankingEntry>> {
    let grad = head_gradient(head, k)?;
    if grad.len() != h.out_dim() {
        return Err(Error::Shape(format!(
            "head expects {}-dim features, map produces {}",
            grad.len(),
            h.out_dim()
        )));
    }
    let score_one = |c: &ConceptEntry| -> Result<RankingEntry> {
        let cav = make_textcav_with(c, h, normalize_cavs)?;
        Ok(RankingEntry {
            text: c.text.clone(),
            score: directional_derivative(&grad, &cav)?,
        })
    };
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            concepts.par_iter().map(score_one).collect()
        }
        _ => concepts.iter().map(score_one).collect(),
    }
}

/// Ranks all concepts by directional derivative for class `k` and keeps the
/// first `top`.
pub fn rank_concepts(
    head: &ClassifierHead,
    k: usize,
    concepts: &[ConceptEntry],
    h: &AffineMap,
    top: usize,
    opts: &RankOptions,
) -> Result<SensitivityRanking> {
    if concepts.is_empty() {
        return Err(Error::Precondition("no concepts to rank".into()));
    }
    if top == 0 {
        return Err(Error::Precondition("top must be at least 1".into()));
    }
    let mut entries = score_concepts(head, k, concepts, h, opts.normalize_cavs, opts.execution)?;
    entries.sort_by(ranking_order);
    entries.truncate(top);
    Ok(SensitivityRanking {
        class_name: head.class_names[k].clone(),
        map_id: opts.map_id.clone(),
        head_id: opts.head_id.clone(),
        entries,
    })
}

/// 1-based rank a concept with `score` would take among `ranked` (sorted by
/// [`ranking_order`]). An entry with the same text is ignored, so an
/// existing concept keeps its own rank.
pub fn would_be_rank(ranked: &[RankingEntry], text: &str, score: f64) -> usize {
    let probe = RankingEntry {
        text: text.to_owned(),
        score,
    };
    1 + ranked
        .iter()
        .filter(|e| e.text != text && ranking_order(e, &probe).is_lt())
        .count()
}

/// Flags per concept text, e.g. `{"relevant": true, "support_device": false}`.
pub type CategoryLabels = BTreeMap<String, BTreeMap<String, bool>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCount {
    pub category: String,
    pub count: usize,
    pub top: usize,
    #[serde(serialize_with = "sig9")]
    pub fraction: f64,
    /// Top-N concepts with no value for this category.
    pub unlabeled: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSide {
    pub head_id: String,
    pub map_id: String,
    pub texts: Vec<String>,
    pub categories: Vec<CategoryCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastReport {
    #[serde(rename = "class")]
    pub class_name: String,
    pub top: usize,
    pub a: ModelSide,
    pub b: ModelSide,
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
}

impl ContrastReport {
    pub fn count(&self, side_b: bool, category: &str) -> Option<&CategoryCount> {
        let side = if side_b { &self.b } else { &self.a };
        side.categories.iter().find(|c| c.category == category)
    }
}

fn side(r: &SensitivityRanking, categories: &BTreeSet<&str>, labels: &CategoryLabels) -> ModelSide {
    let top = r.entries.len();
    let categories = categories
        .iter()
        .map(|&cat| {
            let mut count = 0;
            let mut unlabeled = Vec::new();
            for e in &r.entries {
                match labels.get(&e.text).and_then(|f| f.get(cat)) {
                    Some(true) => count += 1,
                    Some(false) => {}
                    None => unlabeled.push(e.text.clone()),
                }
            }
            CategoryCount {
                category: cat.to_owned(),
                count,
                top,
                fraction: count as f64 / top as f64,
                unlabeled,
            }
        })
        .collect();
    ModelSide {
        head_id: r.head_id.clone(),
        map_id: r.map_id.clone(),
        texts: r.entries.iter().map(|e| e.text.clone()).collect(),
        categories,
    }
}

/// Category counts for two rankings of the same class and depth, plus the
/// concepts that appear in only one of them.
pub fn compare_models(
    a: &SensitivityRanking,
    b: &SensitivityRanking,
    labels: &CategoryLabels,
) -> Result<ContrastReport> {
    if a.entries.len() != b.entries.len() {
        return Err(Error::Precondition(format!(
            "rankings truncated to different depths ({} vs {})",
            a.entries.len(),
            b.entries.len()
        )));
    }
    if a.entries.is_empty() {
        return Err(Error::Precondition("empty rankings".into()));
    }
    let categories: BTreeSet<&str> = labels
        .values()
        .flat_map(|flags| flags.keys().map(String::as_str))
        .collect();
    let in_a: BTreeSet<&str> = a.texts().collect();
    let in_b: BTreeSet<&str> = b.texts().collect();
    Ok(ContrastReport {
        class_name: a.class_name.clone(),
        top: a.entries.len(),
        a: side(a, &categories, labels),
        b: side(b, &categories, labels),
        only_in_a: a.texts().filter(|t| !in_b.contains(t)).map(str::to_owned).collect(),
        only_in_b: b.texts().filter(|t| !in_a.contains(t)).map(str::to_owned).collect(),
    })
}
