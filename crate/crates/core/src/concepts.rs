//! Concept-list hygiene, human annotations and the relevance metrics built
//! on them.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cav::{CategoryLabels, SensitivityRanking};
use crate::error::{Error, Result};
use crate::linalg;
use crate::num_format::sig9;
use crate::store::{write_atomic, ConceptEntry, ConceptList};

const ARTICLES: [&str; 3] = ["a", "an", "the"];
pub const MAX_WORDS: usize = 2;
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.9;
pub const DEFAULT_TOP: usize = 50;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FilterStats {
    pub articles: usize,
    pub too_long: usize,
    pub plurals: usize,
    pub kept: usize,
}

/// Drops bare articles, entries of more than two words, and entries that are
/// another candidate plus "s" or "es" (case-insensitive). Survivors keep
/// their input order.
pub fn filter_concepts(list: &ConceptList) -> (ConceptList, FilterStats) {
    let mut stats = FilterStats::default();
    let candidates: Vec<&ConceptEntry> = list
        .entries()
        .iter()
        .filter(|e| {
            let key = e.normalized_text();
            if ARTICLES.contains(&key.as_str()) {
                stats.articles += 1;
                false
            } else if key.split_whitespace().count() > MAX_WORDS {
                stats.too_long += 1;
                false
            } else {
                true
            }
        })
        .collect();
    let keys: HashSet<String> = candidates.iter().map(|e| e.normalized_text()).collect();
    let is_plural = |key: &str| {
        ["s", "es"].iter().any(|suffix| {
            key.strip_suffix(suffix)
                .is_some_and(|stem| !stem.is_empty() && keys.contains(stem))
        })
    };
    let kept: Vec<ConceptEntry> = candidates
        .into_iter()
        .filter(|e| {
            let plural = is_plural(&e.normalized_text());
            stats.plurals += plural as usize;
            !plural
        })
        .cloned()
        .collect();
    stats.kept = kept.len();
    let out = ConceptList::new(kept).expect("a subset of a valid list is valid");
    (out.with_provenance(list.provenance.clone()), stats)
}

/// Greedy near-synonym removal: entries are visited shortest first (ties
/// lexicographic) and kept only if no kept entry has cosine above
/// `threshold` with them. Survivors keep their input order.
pub fn dedup_concepts(list: &ConceptList, threshold: f64) -> Result<ConceptList> {
    let entries = list.entries();
    let mut embeddings = Vec::with_capacity(entries.len());
    for e in entries {
        embeddings.push(e.embedding.as_deref().ok_or_else(|| {
            Error::Precondition(format!("concept {:?} has no embedding", e.text))
        })?);
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        let (ta, tb) = (&entries[a].text, &entries[b].text);
        ta.chars().count().cmp(&tb.chars().count()).then_with(|| ta.cmp(tb))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let mut keep = true;
        for &j in &kept {
            if linalg::cosine_similarity(embeddings[i], embeddings[j])? > threshold {
                keep = false;
                break;
            }
        }
        if keep {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    let out = ConceptList::new(kept.into_iter().map(|i| entries[i].clone()).collect())?;
    Ok(out.with_provenance(list.provenance.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub class: String,
    pub text: String,
    pub relevant: bool,
    #[serde(default)]
    pub categories: BTreeMap<String, bool>,
}

/// Relevance labels keyed by `(class, text)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    records: Vec<AnnotationRecord>,
    index: HashMap<(String, String), usize>,
}

impl AnnotationSet {
    pub fn new(records: Vec<AnnotationRecord>) -> Result<Self> {
        let mut set = Self::default();
        for r in records {
            set.insert(r)?;
        }
        Ok(set)
    }

    /// Adds a record, rejecting a second label for the same pair.
    pub fn insert(&mut self, record: AnnotationRecord) -> Result<()> {
        let key = (record.class.clone(), record.text.clone());
        if self.index.contains_key(&key) {
            return Err(Error::Validation(format!(
                "duplicate annotation for class {:?}, text {:?}",
                key.0, key.1
            )));
        }
        self.index.insert(key, self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, class: &str, text: &str) -> Option<&AnnotationRecord> {
        self.index
            .get(&(class.to_owned(), text.to_owned()))
            .map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Flags for one class, with relevance under the key `"relevant"`.
    pub fn category_labels(&self, class: &str) -> CategoryLabels {
        self.records
            .iter()
            .filter(|r| r.class == class)
            .map(|r| {
                let mut flags = r.categories.clone();
                flags.insert("relevant".into(), r.relevant);
                (r.text.clone(), flags)
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable annotation") + "\n")
            .collect()
    }
}

pub fn parse_annotations(text: &str) -> Result<AnnotationSet> {
    let mut set = AnnotationSet::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        set.insert(record).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(set)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

pub fn save_annotations(set: &AnnotationSet, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), set.to_jsonl().as_bytes())
}

fn annotated_top<'a>(
    annotations: &'a AnnotationSet,
    ranking: &SensitivityRanking,
    top: usize,
) -> Result<Vec<&'a AnnotationRecord>> {
    if top == 0 {
        return Err(Error::Precondition("top must be at least 1".into()));
    }
    let class = &ranking.class_name;
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for e in ranking.entries.iter().take(top) {
        match annotations.get(class, &e.text) {
            Some(r) => found.push(r),
            None => missing.push(e.text.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteAnnotation {
            class: class.clone(),
            missing,
        });
    }
    if found.is_empty() {
        return Err(Error::Precondition("ranking has no entries".into()));
    }
    Ok(found)
}

/// Fraction of the first `top` ranked concepts labelled relevant to the
/// ranking's class. A ranking shorter than `top` is scored over its length.
pub fn crs_score(annotations: &AnnotationSet, ranking: &SensitivityRanking, top: usize) -> Result<f64> {
    let labelled = annotated_top(annotations, ranking, top)?;
    let relevant = labelled.iter().filter(|r| r.relevant).count();
    Ok(relevant as f64 / labelled.len() as f64)
}

/// `(count, N)` of the first `top` ranked concepts with `category` set. A
/// record without the flag counts as unset.
pub fn category_report(
    annotations: &AnnotationSet,
    ranking: &SensitivityRanking,
    category: &str,
    top: usize,
) -> Result<(usize, usize)> {
    let labelled = annotated_top(annotations, ranking, top)?;
    let count = labelled
        .iter()
        .filter(|r| r.categories.get(category).copied().unwrap_or(false))
        .count();
    Ok((count, labelled.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrsReport {
    pub class: String,
    pub map_id: String,
    pub head_id: String,
    pub top: usize,
    pub relevant: usize,
    #[serde(serialize_with = "sig9")]
    pub crs: f64,
    pub categories: BTreeMap<String, usize>,
}

/// CRS plus a count for every category that appears in the class's labels.
pub fn crs_report(annotations: &AnnotationSet, ranking: &SensitivityRanking, top: usize) -> Result<CrsReport> {
    let labelled = annotated_top(annotations, ranking, top)?;
    let names: BTreeSet<&str> = annotations
        .records()
        .iter()
        .filter(|r| r.class == ranking.class_name)
        .flat_map(|r| r.categories.keys().map(String::as_str))
        .collect();
    let categories = names
        .into_iter()
        .map(|c| {
            let n = labelled
                .iter()
                .filter(|r| r.categories.get(c).copied().unwrap_or(false))
                .count();
            (c.to_owned(), n)
        })
        .collect();
    let relevant = labelled.iter().filter(|r| r.relevant).count();
    Ok(CrsReport {
        class: ranking.class_name.clone(),
        map_id: ranking.map_id.clone(),
        head_id: ranking.head_id.clone(),
        top: labelled.len(),
        relevant,
        crs: relevant as f64 / labelled.len() as f64,
        categories,
    })
}

/// Request templates for an external text generator that proposes concepts
/// for a class. The workbench only formats prompts and parses replies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Surroundings,
    Parts,
    Superclasses,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [Self::Surroundings, Self::Parts, Self::Superclasses];

    pub fn render(self, class: &str) -> String {
        match self {
            Self::Surroundings => {
                format!("List the things most commonly seen around a \"{class}\". Answer with one short item per line.")
            }
            Self::Parts => {
                format!("List the visual elements or parts of a \"{class}\". Answer with one short item per line.")
            }
            Self::Superclasses => {
                format!("List the superclasses of the word \"{class}\". Answer with one short item per line.")
            }
        }
    }
}

/// Extracts one concept per non-empty line, stripping list markers such as
/// `-`, `*`, `1.` or `2)` and trailing punctuation. Repeats are dropped.
pub fn parse_llm_response(reply: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in reply.lines() {
        let mut s = line.trim();
        s = s.trim_start_matches(['-', '*', '•']).trim_start();
        let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
        if digits > 0 {
            let rest = &s[digits..];
            if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
                s = r.trim_start();
            }
        }
        let s = s.trim_end_matches(['.', ',', ';']).trim();
        if !s.is_empty() && seen.insert(s.to_lowercase()) {
            out.push(s.to_owned());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cav::RankingEntry;

    fn list(texts: &[&str]) -> ConceptList {
        ConceptList::new(texts.iter().map(|t| ConceptEntry::new(*t)).collect()).unwrap()
    }

    fn texts(l: &ConceptList) -> Vec<&str> {
        l.texts().collect()
    }

    #[test]
    fn filter_examples() {
        let (out, stats) = filter_concepts(&list(&["a", "cat", "cats", "red fire truck engine"]));
        assert_eq!(texts(&out), ["cat"]);
        assert_eq!(stats, FilterStats { articles: 1, too_long: 1, plurals: 1, kept: 1 });
        assert_eq!(texts(&filter_concepts(&list(&["dog", "Dogs"])).0), ["dog"]);
        assert_eq!(texts(&filter_concepts(&list(&["fire truck"])).0), ["fire truck"]);
        assert_eq!(texts(&filter_concepts(&list(&["box", "boxes", "The", "An"])).0), ["box"]);
        assert_eq!(texts(&filter_concepts(&list(&["cats", "cat"])).0), ["cat"]);
        assert_eq!(texts(&filter_concepts(&list(&["glass"])).0), ["glass"]);
    }

    fn unit(angle: f64) -> Vec<f32> {
        vec![angle.cos() as f32, angle.sin() as f32]
    }

    fn embedded(pairs: &[(&str, f64)]) -> ConceptList {
        ConceptList::new(pairs.iter().map(|&(t, a)| ConceptEntry::with_embedding(t, unit(a))).collect()).unwrap()
    }

    #[test]
    fn dedup_examples() {
        let close = 0.95f64.acos();
        let l = embedded(&[("american bullfrog", 0.0), ("bullfrog", close)]);
        assert_eq!(texts(&dedup_concepts(&l, 0.9).unwrap()), ["bullfrog"]);

        let l = embedded(&[("x", 0.0), ("y", 0.5f64.acos())]);
        assert_eq!(texts(&dedup_concepts(&l, 0.9).unwrap()).len(), 2);

        let bare = list(&["alpha", "beta"]);
        match dedup_concepts(&bare, 0.9) {
            Err(Error::Precondition(msg)) => assert!(msg.contains("alpha")),
            other => panic!("{other:?}"),
        }
    }

    /// All subsets of a 3-entry chain checked against the sequential rule
    /// written out independently: the result is the unique subset S such
    /// that each member, taken in length order, is compatible with every
    /// earlier member of S, and each non-member conflicts with an earlier
    /// member of S.
    #[test]
    fn dedup_chain_matches_exhaustive_oracle() {
        // a~b 0.95, b~c 0.95, a~c 0.3 in 3 dims
        let a = [1.0f64, 0.0, 0.0];
        let b = [0.95, (1.0f64 - 0.95 * 0.95).sqrt(), 0.0];
        let c1 = 0.3;
        let c2 = (0.95 - b[0] * c1) / b[1];
        let c = [c1, c2, (1.0 - c1 * c1 - c2 * c2).sqrt()];
        let f = |v: [f64; 3]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        let l = ConceptList::new(vec![
            ConceptEntry::with_embedding("ccc", f(c)),
            ConceptEntry::with_embedding("a", f(a)),
            ConceptEntry::with_embedding("bb", f(b)),
        ])
        .unwrap();
        let emb: Vec<&[f32]> = l.entries().iter().map(|e| e.embedding.as_deref().unwrap()).collect();
        let by_len = [1usize, 2, 0];
        let mut valid = Vec::new();
        for mask in 0u8..8 {
            let member = |i: usize| mask & (1 << i) != 0;
            let ok = by_len.iter().enumerate().all(|(pos, &i)| {
                let earlier: Vec<usize> = by_len[..pos].iter().copied().filter(|&j| member(j)).collect();
                let conflicts = earlier
                    .iter()
                    .any(|&j| linalg::cosine_similarity(emb[i], emb[j]).unwrap() > 0.9);
                member(i) != conflicts
            });
            if ok {
                valid.push(mask);
            }
        }
        assert_eq!(valid.len(), 1);
        let expect: Vec<&str> = (0..3)
            .filter(|&i| valid[0] & (1 << i) != 0)
            .map(|i| l.entries()[i].text.as_str())
            .collect();
        let got = dedup_concepts(&l, 0.9).unwrap();
        assert_eq!(texts(&got), expect);
        assert_eq!(texts(&got), ["ccc", "a"]);
    }

    fn ranking(class: &str, texts: &[String]) -> SensitivityRanking {
        SensitivityRanking {
            class_name: class.into(),
            map_id: "m".into(),
            head_id: "h".into(),
            entries: texts
                .iter()
                .enumerate()
                .map(|(i, t)| RankingEntry { text: t.clone(), score: -(i as f64) })
                .collect(),
        }
    }

    fn fixture(relevant: usize, flagged: usize) -> (AnnotationSet, SensitivityRanking) {
        let texts: Vec<String> = (0..50).map(|i| format!("sentence {i}")).collect();
        let records = texts
            .iter()
            .enumerate()
            .map(|(i, t)| AnnotationRecord {
                class: "Atelectasis".into(),
                text: t.clone(),
                relevant: i < relevant,
                categories: [("support_device".to_owned(), i >= 50 - flagged)].into(),
            })
            .collect();
        (AnnotationSet::new(records).unwrap(), ranking("Atelectasis", &texts))
    }

    #[test]
    fn crs_examples() {
        let (ann, r) = fixture(2, 0);
        assert_eq!(crs_score(&ann, &r, 50).unwrap(), 0.04);
        let (ann, r) = fixture(50, 0);
        assert_eq!(crs_score(&ann, &r, 50).unwrap(), 1.0);
        assert!(matches!(crs_score(&ann, &r, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn category_examples() {
        let (ann, r) = fixture(0, 13);
        assert_eq!(category_report(&ann, &r, "support_device", 50).unwrap(), (13, 50));
        let (ann, r) = fixture(0, 44);
        assert_eq!(category_report(&ann, &r, "support_device", 50).unwrap(), (44, 50));
        assert_eq!(category_report(&ann, &r, "nowhere", 50).unwrap(), (0, 50));
        let rep = crs_report(&ann, &r, 50).unwrap();
        assert_eq!(rep.categories["support_device"], 44);
    }

    #[test]
    fn missing_annotations_are_listed() {
        let (ann, mut r) = fixture(1, 0);
        r.entries[3].text = "unlabelled one".into();
        match crs_score(&ann, &r, 50) {
            Err(Error::IncompleteAnnotation { class, missing }) => {
                assert_eq!(class, "Atelectasis");
                assert_eq!(missing, ["unlabelled one"]);
            }
            other => panic!("{other:?}"),
        }
        // outside the top-N it does not matter
        assert!(crs_score(&ann, &r, 3).is_ok());
    }

    #[test]
    fn annotation_jsonl_round_trip_and_duplicates() {
        let (ann, _) = fixture(5, 7);
        let back = parse_annotations(&ann.to_jsonl()).unwrap();
        assert_eq!(back, ann);
        let line = r#"{"class":"k","text":"t","relevant":true}"#;
        match parse_annotations(&format!("{line}\n{line}\n")) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        let one = parse_annotations(line).unwrap();
        assert!(one.get("k", "t").unwrap().categories.is_empty());
        assert!(one.category_labels("k")["t"]["relevant"]);
    }

    #[test]
    fn prompts_and_replies() {
        for kind in PromptKind::ALL {
            assert!(kind.render("goldfish").contains("\"goldfish\""));
        }
        assert!(PromptKind::Surroundings.render("x").contains("things most commonly seen around"));
        assert!(PromptKind::Parts.render("x").contains("visual elements or parts"));
        assert!(PromptKind::Superclasses.render("x").contains("superclasses"));
        let reply = "Here you go\n1. Water.\n2) fins\n- Scales\n* water\n\n• bowl";
        assert_eq!(parse_llm_response(reply), ["Here you go", "Water", "fins", "Scales", "bowl"]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn words() -> impl Strategy<Value = Vec<String>> {
            let word = prop::sample::select(vec![
                "a", "an", "the", "cat", "cats", "dog", "dogs", "box", "boxes", "boxe", "red",
                "fire", "truck",
            ]);
            prop::collection::vec(prop::collection::vec(word, 1..4).prop_map(|w| w.join(" ")), 0..12)
                .prop_map(|v| {
                    let mut seen = HashSet::new();
                    v.into_iter().filter(|t| seen.insert(t.clone())).collect()
                })
        }

        fn embedded_list(n: usize, seed: u64) -> ConceptList {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            ConceptList::new(
                (0..n)
                    .map(|i| {
                        // few dims so near-duplicates are common
                        let v: Vec<f32> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                        let len = rng.random_range(1..6);
                        ConceptEntry::with_embedding(
                            format!("{}{i}", "w".repeat(len)),
                            linalg::l2_normalize(&v).unwrap(),
                        )
                    })
                    .collect(),
            )
            .unwrap()
        }

        proptest! {
            #[test]
            fn filter_is_idempotent(v in words()) {
                let l = list(&v.iter().map(String::as_str).collect::<Vec<_>>());
                let once = filter_concepts(&l).0;
                let twice = filter_concepts(&once).0;
                prop_assert_eq!(texts(&once), texts(&twice));
            }

            #[test]
            fn filter_survivors_ignore_input_order(v in words()) {
                let fwd = list(&v.iter().map(String::as_str).collect::<Vec<_>>());
                let rev = list(&v.iter().rev().map(String::as_str).collect::<Vec<_>>());
                let a: BTreeSet<String> = filter_concepts(&fwd).0.texts().map(str::to_owned).collect();
                let b: BTreeSet<String> = filter_concepts(&rev).0.texts().map(str::to_owned).collect();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn dedup_is_idempotent_and_separated(n in 0usize..30, seed in 0u64..500, thr in 0.5f64..0.99) {
                let l = embedded_list(n, seed);
                let once = dedup_concepts(&l, thr).unwrap();
                let twice = dedup_concepts(&once, thr).unwrap();
                prop_assert_eq!(texts(&once), texts(&twice));
                let e = once.entries();
                for i in 0..e.len() {
                    for j in i + 1..e.len() {
                        let c = linalg::cosine_similarity(
                            e[i].embedding.as_deref().unwrap(),
                            e[j].embedding.as_deref().unwrap(),
                        ).unwrap();
                        prop_assert!(c <= thr);
                    }
                }
            }

            #[test]
            fn crs_ignores_record_order(relevant in 0usize..=50, seed in 0u64..1000) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let (ann, r) = fixture(relevant, 0);
                let mut recs = ann.records().to_vec();
                recs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let shuffled = AnnotationSet::new(recs).unwrap();
                prop_assert_eq!(crs_score(&ann, &r, 50).unwrap(), crs_score(&shuffled, &r, 50).unwrap());
            }
        }
    }
}
