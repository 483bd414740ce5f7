//! Synthetic worlds with a known cross-space map, known concept/class
//! alignments and an optional injected dataset bias.
//!
//! A world has `K` classes and a few binary attributes. Each class and each
//! attribute owns an anchor direction in the vision-language space, and the
//! anchors are mutually orthonormal. The concept bank holds every anchor, a
//! few noisy variants of each, and random distractors. Image features are
//! mixtures of the anchors of the labels a sample carries, and target
//! features are their image under a planted near-orthogonal map `A`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cav::{rank_concepts, RankOptions, SensitivityRanking};
use crate::concepts::{category_report, save_annotations, AnnotationRecord, AnnotationSet};
use crate::error::{Error, Result};
use crate::linalg::{self, Execution, Matrix};
use crate::store::{
    save_concepts, save_head, write_json, ClassifierHead, ConceptEntry, ConceptList, FeatureSet,
    SpaceTag, Workspace, WorkspaceLayout,
};
use crate::trainer::{ols_fit, AffineMap};

pub const VL_MODEL_ID: &str = "synthetic-vl";
pub const TARGET_MODEL_ID: &str = "synthetic-target";

/// Anchor weight drawn per positive class label.
const CLASS_SIGNAL: (f32, f32) = (0.3, 0.6);
/// Chance that a positive class label is visible in the image at all.
const CLASS_VISIBILITY: f64 = 0.05;
/// Anchor weight drawn per positive attribute label.
const ATTRIBUTE_SIGNAL: (f32, f32) = (0.8, 1.2);
const JITTER: f32 = 0.3;
const CLASS_PREVALENCE: f64 = 0.3;
/// Attribute `j` co-occurs with class `j`.
const ATTRIBUTE_GIVEN_CLASS: f64 = 0.6;
const ATTRIBUTE_BASE_RATE: f64 = 0.1;
/// Weight of the orthogonal perturbation that turns an anchor into a variant.
const VARIANT_SPREAD: f32 = 0.6;
const MAX_DISTRACTOR_COSINE: f64 = 0.7;
const MAX_DISTRACTOR_ANCHOR_COSINE: f64 = 0.5;
const HEAD_NOISE: f64 = 0.02;
const COLUMN_SCALE: (f32, f32) = (0.8, 1.25);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub seed: u64,
    /// Vision-language dimension `n`.
    pub vl_dim: usize,
    /// Target dimension `m`.
    pub target_dim: usize,
    pub classes: usize,
    pub samples: usize,
    pub noise_sigma: f64,
    pub bank_size: usize,
    pub variants: usize,
    pub attributes: Vec<String>,
}

impl WorldParams {
    pub fn new(seed: u64, vl_dim: usize, target_dim: usize, classes: usize, samples: usize, noise_sigma: f64) -> Self {
        Self {
            seed,
            vl_dim,
            target_dim,
            classes,
            samples,
            noise_sigma,
            bank_size: 64,
            variants: 3,
            attributes: vec!["support_device".into(), "marker".into()],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vl_dim < 4 || self.target_dim < 4 {
            return Err(Error::Precondition(format!(
                "dims must be at least 4, got n={} m={}",
                self.vl_dim, self.target_dim
            )));
        }
        if self.classes < 2 {
            return Err(Error::Precondition("need at least 2 classes".into()));
        }
        if self.samples < 100 {
            return Err(Error::Precondition(format!("need at least 100 samples, got {}", self.samples)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Precondition("noise_sigma must be non-negative".into()));
        }
        let anchors = self.classes + self.attributes.len();
        if self.vl_dim < anchors + 2 {
            return Err(Error::Precondition(format!(
                "{anchors} orthogonal anchors need vl_dim >= {}, got {}",
                anchors + 2,
                self.vl_dim
            )));
        }
        let structured = anchors * (1 + self.variants);
        if self.bank_size < structured {
            return Err(Error::Precondition(format!(
                "bank of {} cannot hold {structured} anchors and variants",
                self.bank_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum ConceptRole {
    Planted(usize),
    ClassVariant(usize),
    Attribute(usize),
    AttributeVariant(usize),
    Distractor,
}

impl ConceptRole {
    pub fn class(self) -> Option<usize> {
        match self {
            Self::Planted(k) | Self::ClassVariant(k) => Some(k),
            _ => None,
        }
    }

    pub fn attribute(self) -> Option<usize> {
        match self {
            Self::Attribute(j) | Self::AttributeVariant(j) => Some(j),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankConcept {
    pub text: String,
    pub embedding: Vec<f32>,
    pub role: ConceptRole,
}

/// Per-sample booleans, `samples × classes` and `samples × attributes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTable {
    pub classes: Vec<Vec<bool>>,
    pub attributes: Vec<Vec<bool>>,
}

impl LabelTable {
    fn select(&self, keep: &[usize]) -> Self {
        Self {
            classes: keep.iter().map(|&i| self.classes[i].clone()).collect(),
            attributes: keep.iter().map(|&i| self.attributes[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub target_class: String,
    pub proxy_attribute: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasInfo {
    pub spec: BiasSpec,
    pub removed: usize,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub params: WorldParams,
    /// `A`, `m × n`.
    pub planted_map: Matrix,
    pub class_names: Vec<String>,
    pub bank: Vec<BankConcept>,
    pub labels: LabelTable,
    /// `I_Ψ`, unit rows.
    pub vl_image: Matrix,
    /// `I_Φ = I_Ψ Aᵀ + noise`.
    pub target_image: Matrix,
    pub clean_head: ClassifierHead,
    pub biased_head: Option<ClassifierHead>,
    pub bias: Option<BiasInfo>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit64(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot64(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Removes the components of `v` along the orthonormal `basis`.
fn project_out(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Vec<f64> {
    for b in basis {
        let c = dot64(&v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
    }
    v
}

/// `count` orthonormal vectors in `dim` dims by Gram-Schmidt on Gaussians.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let v = project_out(gaussian_vec(rng, dim), &basis);
        // twice for stability
        let v = project_out(v, &basis);
        if dot64(&v, &v) > 1e-8 {
            basis.push(unit64(v));
        }
    }
    basis
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    let v: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    linalg::l2_normalize(&v).expect("non-degenerate direction")
}

/// Orthonormal columns (or rows, if `m < n`) with per-column scales.
fn planted_map(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix {
    let mut a = vec![0.0f32; m * n];
    if m >= n {
        for (j, col) in orthonormal(rng, n, m).iter().enumerate() {
            for i in 0..m {
                a[i * n + j] = col[i] as f32;
            }
        }
    } else {
        for (i, row) in orthonormal(rng, m, n).iter().enumerate() {
            for j in 0..n {
                a[i * n + j] = row[j] as f32;
            }
        }
    }
    for j in 0..n {
        let s = rng.random_range(COLUMN_SCALE.0..COLUMN_SCALE.1);
        for i in 0..m {
            a[i * n + j] *= s;
        }
    }
    Matrix::from_vec(m, n, a).expect("finite planted map")
}

fn cosine64(a: &[f64], b: &[f64]) -> f64 {
    dot64(a, b) / (dot64(a, a) * dot64(b, b)).sqrt()
}

fn push(bank: &mut Vec<BankConcept>, raw: &mut Vec<Vec<f64>>, text: String, v: Vec<f64>, role: ConceptRole) {
    bank.push(BankConcept {
        text,
        embedding: to_f32(&v),
        role,
    });
    raw.push(unit64(v));
}

fn build_bank(
    rng: &mut ChaCha8Rng,
    params: &WorldParams,
    class_names: &[String],
) -> Result<(Vec<BankConcept>, Vec<Vec<f64>>)> {
    let n = params.vl_dim;
    let k = params.classes;
    let anchors = orthonormal(rng, k + params.attributes.len(), n);
    let mut bank = Vec::with_capacity(params.bank_size);
    let mut raw: Vec<Vec<f64>> = Vec::with_capacity(params.bank_size);
    for (idx, anchor) in anchors.iter().enumerate() {
        let (name, main_role, variant_role) = if idx < k {
            (format!("{} planted", class_names[idx]), ConceptRole::Planted(idx), ConceptRole::ClassVariant(idx))
        } else {
            let j = idx - k;
            (params.attributes[j].clone(), ConceptRole::Attribute(j), ConceptRole::AttributeVariant(j))
        };
        let stem = if idx < k {
            class_names[idx].clone()
        } else {
            params.attributes[idx - k].clone()
        };
        push(&mut bank, &mut raw, name, anchor.clone(), main_role);
        for v in 0..params.variants {
            let perp = unit64(project_out(gaussian_vec(rng, n), &anchors));
            let variant: Vec<f64> = anchor
                .iter()
                .zip(&perp)
                .map(|(a, p)| a + VARIANT_SPREAD as f64 * p)
                .collect();
            push(&mut bank, &mut raw, format!("{stem} related{}", v + 1), variant, variant_role);
        }
    }
    let mut attempts = 0usize;
    let mut d = 0;
    while bank.len() < params.bank_size {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Precondition(format!(
                "could not place {} separated distractors in {n} dims",
                params.bank_size
            )));
        }
        let v = unit64(gaussian_vec(rng, n));
        let near_anchor = anchors.iter().any(|a| cosine64(&v, a).abs() > MAX_DISTRACTOR_ANCHOR_COSINE);
        let near_any = raw.iter().any(|b| cosine64(&v, b).abs() > MAX_DISTRACTOR_COSINE);
        if near_anchor || near_any {
            continue;
        }
        d += 1;
        push(&mut bank, &mut raw, format!("distractor {d:02}"), v, ConceptRole::Distractor);
    }
    Ok((bank, anchors))
}

/// Builds a world as a pure function of `params`.
pub fn gen_world(params: &WorldParams) -> Result<SyntheticWorld> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (n, m, k) = (params.vl_dim, params.target_dim, params.classes);
    let n_attr = params.attributes.len();
    let class_names: Vec<String> = (0..k).map(|i| format!("class_{i}")).collect();

    let a = planted_map(&mut rng, m, n);
    let (bank, anchors) = build_bank(&mut rng, params, &class_names)?;

    let mut classes = Vec::with_capacity(params.samples);
    let mut attributes = Vec::with_capacity(params.samples);
    let mut vl = Vec::with_capacity(params.samples * n);
    for _ in 0..params.samples {
        let y: Vec<bool> = (0..k).map(|_| rng.random_bool(CLASS_PREVALENCE)).collect();
        let z: Vec<bool> = (0..n_attr)
            .map(|j| {
                let linked = j < k && y[j];
                rng.random_bool(if linked { ATTRIBUTE_GIVEN_CLASS } else { ATTRIBUTE_BASE_RATE })
            })
            .collect();
        let mut v: Vec<f64> = gaussian_vec(&mut rng, n)
            .into_iter()
            .map(|x| x * JITTER as f64 / (n as f64).sqrt())
            .collect();
        let labelled = y
            .iter()
            .map(|&on| (on && rng.random_bool(CLASS_VISIBILITY), CLASS_SIGNAL))
            .collect::<Vec<_>>()
            .into_iter()
            .chain(z.iter().map(|&on| (on, ATTRIBUTE_SIGNAL)));
        for ((on, range), anchor) in labelled.zip(&anchors) {
            if on {
                let w = rng.random_range(range.0..range.1) as f64;
                v.iter_mut().zip(anchor).for_each(|(x, a)| *x += w * a);
            }
        }
        vl.extend(to_f32(&v));
        classes.push(y);
        attributes.push(z);
    }
    let vl_image = Matrix::from_vec(params.samples, n, vl)?;
    let mut target = linalg::matmul_nt(&vl_image, &a)?;
    if params.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, params.noise_sigma).expect("valid sigma");
        let data: Vec<f32> = target
            .as_slice()
            .iter()
            .map(|&x| x + noise.sample(&mut rng) as f32)
            .collect();
        target = Matrix::from_vec(params.samples, m, data)?;
    }

    let clean_head = clean_head(&mut rng, &a, &bank, &class_names)?;
    Ok(SyntheticWorld {
        params: params.clone(),
        planted_map: a,
        class_names,
        bank,
        labels: LabelTable { classes, attributes },
        vl_image,
        target_image: target,
        clean_head,
        biased_head: None,
        bias: None,
    })
}

/// Rows `A·e_k` plus small noise, redrawn until each row's most similar
/// mapped bank concept is its planted one.
fn clean_head(
    rng: &mut ChaCha8Rng,
    a: &Matrix,
    bank: &[BankConcept],
    class_names: &[String],
) -> Result<ClassifierHead> {
    let m = a.rows();
    let mapped: Vec<Vec<f32>> = bank
        .iter()
        .map(|c| linalg::matmul_nt(&Matrix::from_vec(1, c.embedding.len(), c.embedding.clone())?, a).map(Matrix::into_vec))
        .collect::<Result<_>>()?;
    let noise = Normal::new(0.0, HEAD_NOISE / (m as f64).sqrt()).expect("valid sigma");
    let mut weights = Vec::with_capacity(class_names.len() * m);
    for (k, class) in class_names.iter().enumerate() {
        let planted = bank
            .iter()
            .position(|c| c.role == ConceptRole::Planted(k))
            .expect("every class has a planted concept");
        let mut found = None;
        for _ in 0..100 {
            let row: Vec<f32> = mapped[planted].iter().map(|&x| x + noise.sample(rng) as f32).collect();
            let best = mapped
                .iter()
                .map(|v| linalg::cosine_similarity(&row, v))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .enumerate()
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .map(|(i, _)| i);
            if best == Some(planted) {
                found = Some(row);
                break;
            }
        }
        weights.extend(found.ok_or_else(|| {
            Error::Degenerate(format!("no clean head row for {} aligns with its planted concept", class))
        })?);
    }
    ClassifierHead::new(
        Matrix::from_vec(class_names.len(), m, weights)?,
        vec![0.0; class_names.len()],
        class_names.to_vec(),
    )
}

/// Drops every sample positive for the target class but negative for the
/// proxy attribute, then refits a head by least squares on `±1` targets.
pub fn inject_bias(world: &SyntheticWorld, spec: &BiasSpec) -> Result<SyntheticWorld> {
    let t = world.class_index(&spec.target_class)?;
    let p = world.attribute_index(&spec.proxy_attribute)?;
    let keep: Vec<usize> = (0..world.labels.classes.len())
        .filter(|&i| !(world.labels.classes[i][t] && !world.labels.attributes[i][p]))
        .collect();
    if !keep.iter().any(|&i| world.labels.classes[i][t]) {
        return Err(Error::Degenerate(format!(
            "bias filter removes every positive of {:?}",
            spec.target_class
        )));
    }
    let labels = world.labels.select(&keep);
    let target_image = world.target_image.select_rows(&keep);
    let vl_image = world.vl_image.select_rows(&keep);
    let k = world.class_names.len();
    let y: Vec<f32> = labels
        .classes
        .iter()
        .flat_map(|row| row.iter().map(|&on| if on { 1.0 } else { -1.0 }))
        .collect();
    let fit = ols_fit(&target_image, &Matrix::from_vec(keep.len(), k, y)?)?;
    let biased = ClassifierHead::new(fit.weights, fit.bias, world.class_names.clone())?;
    Ok(SyntheticWorld {
        labels,
        target_image,
        vl_image,
        biased_head: Some(biased),
        bias: Some(BiasInfo {
            spec: spec.clone(),
            removed: world.labels.classes.len() - keep.len(),
            remaining: keep.len(),
        }),
        ..world.clone()
    })
}

impl SyntheticWorld {
    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Validation(format!("no class named {name:?}")))
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.params
            .attributes
            .iter()
            .position(|a| a == name)
            .ok_or_else(|| Error::Validation(format!("no attribute named {name:?}")))
    }

    /// Bank position of the concept with `role`.
    pub fn concept_with_role(&self, role: ConceptRole) -> Option<&BankConcept> {
        self.bank.iter().find(|c| c.role == role)
    }

    /// The map `x ↦ A x` with zero bias.
    pub fn exact_map(&self) -> AffineMap {
        AffineMap::new(self.planted_map.clone(), vec![0.0; self.planted_map.rows()]).expect("consistent shapes")
    }

    pub fn concept_entries(&self) -> Vec<ConceptEntry> {
        self.bank
            .iter()
            .map(|c| ConceptEntry::with_embedding(c.text.clone(), c.embedding.clone()))
            .collect()
    }

    pub fn concept_list(&self) -> ConceptList {
        ConceptList::new(self.concept_entries())
            .expect("bank texts are unique")
            .with_provenance(format!("synthetic bank, seed {}", self.params.seed))
    }

    /// Ground-truth labels for every (class, bank concept) pair.
    pub fn annotations(&self) -> AnnotationSet {
        let mut records = Vec::with_capacity(self.class_names.len() * self.bank.len());
        for (k, class) in self.class_names.iter().enumerate() {
            for c in &self.bank {
                records.push(AnnotationRecord {
                    class: class.clone(),
                    text: c.text.clone(),
                    relevant: c.role.class() == Some(k),
                    categories: self
                        .params
                        .attributes
                        .iter()
                        .enumerate()
                        .map(|(j, a)| (a.clone(), c.role.attribute() == Some(j)))
                        .collect(),
                });
            }
        }
        AnnotationSet::new(records).expect("one record per pair")
    }

    pub fn feature_sets(&self) -> Result<(FeatureSet, FeatureSet, FeatureSet)> {
        let source = format!("synthetic-seed{}", self.params.seed);
        let text = Matrix::from_rows(&self.bank.iter().map(|c| c.embedding.as_slice()).collect::<Vec<_>>())?;
        Ok((
            FeatureSet::new(SpaceTag::TargetImage, self.target_image.clone(), TARGET_MODEL_ID, false, &source)?,
            FeatureSet::new(SpaceTag::VlImage, self.vl_image.clone(), VL_MODEL_ID, true, &source)?,
            FeatureSet::new(SpaceTag::VlText, text, VL_MODEL_ID, true, &source)?,
        ))
    }

    pub fn workspace(&self) -> Result<Workspace> {
        let (target, vl, text) = self.feature_sets()?;
        Workspace::new(target, vl, Some(text), Some(self.clean_head.clone()))
    }

    /// Writes the world as a workspace directory: features, heads
    /// (`clean`, and `biased` when present), concepts, annotations and a
    /// `world.json` describing labels and the planted structure.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let layout = WorkspaceLayout::new(dir.as_ref());
        std::fs::create_dir_all(layout.heads_dir()).map_err(|e| Error::io(layout.heads_dir(), e))?;
        layout.save_workspace(&self.workspace()?)?;
        save_head(&self.clean_head, Some(TARGET_MODEL_ID), layout.head("clean"))?;
        if let Some(b) = &self.biased_head {
            save_head(b, Some(TARGET_MODEL_ID), layout.head("biased"))?;
        }
        save_concepts(&self.concept_list(), layout.concepts())?;
        save_annotations(&self.annotations(), layout.annotations())?;
        let summary = WorldSummary {
            params: &self.params,
            class_names: &self.class_names,
            roles: self.bank.iter().map(|c| (c.text.as_str(), c.role)).collect(),
            labels: &self.labels,
            bias: self.bias.as_ref(),
        };
        write_json(&summary, &layout.root.join("world.json"))
    }
}

#[derive(Serialize)]
struct WorldSummary<'a> {
    params: &'a WorldParams,
    class_names: &'a [String],
    roles: Vec<(&'a str, ConceptRole)>,
    labels: &'a LabelTable,
    bias: Option<&'a BiasInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRecovery {
    pub class: String,
    pub planted: String,
    /// 1-based rank of the planted concept under the clean head.
    pub planted_rank: usize,
    pub top: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasRecovery {
    pub target_class: String,
    pub proxy_attribute: String,
    pub proxy_rank_biased: usize,
    pub proxy_rank_clean: usize,
    pub planted_rank_biased: usize,
    pub planted_rank_clean: usize,
    pub category_top: usize,
    pub category_count_clean: usize,
    pub category_count_biased: usize,
}

impl BiasRecovery {
    /// Proxy within the biased head's top 3 and outside the clean head's
    /// top 10.
    pub fn detected(&self) -> bool {
        self.proxy_rank_biased <= 3 && self.proxy_rank_clean > 10
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub seed: u64,
    pub classes: Vec<ClassRecovery>,
    pub hit_rate: f64,
    pub bias: Option<BiasRecovery>,
}

/// Depth of the category comparison in [`BiasRecovery`].
pub const CATEGORY_TOP: usize = 10;

fn full_ranking(world: &SyntheticWorld, head: &ClassifierHead, k: usize, h: &AffineMap, head_id: &str) -> Result<SensitivityRanking> {
    let opts = RankOptions {
        map_id: "evaluation".into(),
        head_id: head_id.into(),
        normalize_cavs: true,
        execution: Execution::Sequential,
    };
    rank_concepts(head, k, &world.concept_entries(), h, world.bank.len(), &opts)
}

/// Whether each class's top-ranked concept under `head` is its planted one.
pub fn planted_hits(world: &SyntheticWorld, head: &ClassifierHead, h: &AffineMap) -> Result<Vec<bool>> {
    (0..world.class_names.len())
        .map(|k| {
            let planted = &world.concept_with_role(ConceptRole::Planted(k)).expect("planted concept").text;
            let r = full_ranking(world, head, k, h, "probe")?;
            Ok(r.entries[0].text == *planted)
        })
        .collect()
}

/// Ranks the whole bank for every class under the clean head and, for a
/// biased world, compares where the proxy concept lands under both heads.
pub fn evaluate_recovery(world: &SyntheticWorld, h: &AffineMap) -> Result<RecoveryReport> {
    let mut classes = Vec::with_capacity(world.class_names.len());
    for (k, class) in world.class_names.iter().enumerate() {
        let planted = &world.concept_with_role(ConceptRole::Planted(k)).expect("planted concept").text;
        let r = full_ranking(world, &world.clean_head, k, h, "clean")?;
        classes.push(ClassRecovery {
            class: class.clone(),
            planted: planted.clone(),
            planted_rank: r.position(planted).expect("full ranking"),
            top: r.entries[0].text.clone(),
        });
    }
    let hits = classes.iter().filter(|c| c.planted_rank == 1).count();
    let bias = match (&world.bias, &world.biased_head) {
        (Some(info), Some(biased)) => {
            let t = world.class_index(&info.spec.target_class)?;
            let p = world.attribute_index(&info.spec.proxy_attribute)?;
            let proxy = &world.concept_with_role(ConceptRole::Attribute(p)).expect("attribute concept").text;
            let planted = &classes[t].planted;
            let clean = full_ranking(world, &world.clean_head, t, h, "clean")?;
            let skewed = full_ranking(world, biased, t, h, "biased")?;
            let ann = world.annotations();
            let top = CATEGORY_TOP.min(world.bank.len());
            Some(BiasRecovery {
                target_class: info.spec.target_class.clone(),
                proxy_attribute: info.spec.proxy_attribute.clone(),
                proxy_rank_biased: skewed.position(proxy).expect("full ranking"),
                proxy_rank_clean: clean.position(proxy).expect("full ranking"),
                planted_rank_biased: skewed.position(planted).expect("full ranking"),
                planted_rank_clean: clean.position(planted).expect("full ranking"),
                category_top: top,
                category_count_clean: category_report(&ann, &clean, &info.spec.proxy_attribute, top)?.0,
                category_count_biased: category_report(&ann, &skewed, &info.spec.proxy_attribute, top)?.0,
            })
        }
        _ => None,
    };
    Ok(RecoveryReport {
        seed: world.params.seed,
        hit_rate: hits as f64 / classes.len() as f64,
        classes,
        bias,
    })
}

/// A head with i.i.d. standard normal weights and zero bias.
pub fn random_head(world: &SyntheticWorld, seed: u64) -> ClassifierHead {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, m) = (world.class_names.len(), world.params.target_dim);
    let w: Vec<f32> = (0..k * m).map(|_| StandardNormal.sample(&mut rng)).collect();
    ClassifierHead::new(
        Matrix::from_vec(k, m, w).expect("finite weights"),
        vec![0.0; k],
        world.class_names.clone(),
    )
    .expect("valid random head")
}

/// Runs `f` once per seed, in seed order, in parallel when available.
pub fn sweep<T, F>(seeds: &[u64], execution: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync,
{
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            seeds.par_iter().map(|&s| f(s)).collect()
        }
        _ => seeds.iter().map(|&s| f(s)).collect(),
    }
}
