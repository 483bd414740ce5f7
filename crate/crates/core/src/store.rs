//! On-disk formats: FMX matrices, JSON metadata sidecars and JSONL concept
//! lists, plus the directory layout of a workspace.
//!
//! FMX is `b"FMX1"`, then little-endian `u32` version (1), rows and cols,
//! then `rows * cols` little-endian `f32` values in row-major order.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};

pub const FMX_MAGIC: &[u8; 4] = b"FMX1";
pub const FMX_VERSION: u32 = 1;
const FMX_HEADER_LEN: usize = 16;
const LOCK_FILE: &str = ".textcav.lock";

/// Tolerance on the unit-norm invariant of stored embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-4;

pub fn encode_fmx(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(FMX_HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(FMX_MAGIC);
    out.extend_from_slice(&FMX_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fmx(bytes: &[u8]) -> Result<Matrix> {
    let format = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < 4 || &bytes[..4] != FMX_MAGIC {
        return Err(format(0, "bad magic, expected \"FMX1\"".into()));
    }
    if bytes.len() < FMX_HEADER_LEN {
        return Err(format(bytes.len(), "truncated header".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != FMX_VERSION {
        return Err(format(4, format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(FMX_HEADER_LEN))
        .ok_or_else(|| format(8, format!("{rows}x{cols} overflows")))?;
    if bytes.len() < expected {
        return Err(format(
            bytes.len(),
            format!(
                "truncated payload: {rows}x{cols} needs {} float bytes, found {}",
                expected - FMX_HEADER_LEN,
                bytes.len() - FMX_HEADER_LEN
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(format(expected, "trailing bytes after payload".into()));
    }
    let data: Vec<f32> = bytes[FMX_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(format(FMX_HEADER_LEN + 4 * i, "non-finite value".into()));
    }
    Matrix::from_vec(rows, cols, data)
}

/// Writes `bytes` to `path` via a temporary file renamed into place, holding
/// an exclusive advisory lock on the directory's `.textcav.lock` meanwhile.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let lock_path = dir.join(LOCK_FILE);
    let lock = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&lock_path)
        .map_err(|e| Error::io(&lock_path, e))?;
    lock.lock().map_err(|e| Error::io(&lock_path, e))?;

    let tmp = sibling(path, &format!(".tmp{}", std::process::id()));
    let result = (|| {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    let _ = lock.unlock();
    result
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn write_fmx(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_fmx(m))
}

pub fn read_fmx(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fmx(&bytes)
}

/// `foo.fmx` -> `foo.meta.json`.
pub fn meta_path_for(data_path: &Path) -> PathBuf {
    let stem = data_path.file_stem().unwrap_or_default().to_os_string();
    let mut name = stem;
    name.push(".meta.json");
    data_path.with_file_name(name)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceTag {
    TargetImage,
    VlImage,
    VlText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub tag: SpaceTag,
    pub model_id: String,
    pub dim: usize,
    pub count: usize,
    pub normalized: bool,
    pub source_dataset: String,
}

/// A matrix of features in one embedding space, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub tag: SpaceTag,
    pub features: Matrix,
    pub model_id: String,
    pub normalized: bool,
    pub source_dataset: String,
}

impl FeatureSet {
    pub fn new(
        tag: SpaceTag,
        features: Matrix,
        model_id: impl Into<String>,
        normalized: bool,
        source_dataset: impl Into<String>,
    ) -> Result<Self> {
        let fs = Self {
            tag,
            features,
            model_id: model_id.into(),
            normalized,
            source_dataset: source_dataset.into(),
        };
        fs.validate()?;
        Ok(fs)
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn count(&self) -> usize {
        self.features.rows()
    }

    pub fn meta(&self) -> FeatureMeta {
        FeatureMeta {
            tag: self.tag,
            model_id: self.model_id.clone(),
            dim: self.dim(),
            count: self.count(),
            normalized: self.normalized,
            source_dataset: self.source_dataset.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim() == 0 || self.count() == 0 {
            return Err(Error::Validation(format!(
                "{:?} feature set is empty ({}x{})",
                self.tag,
                self.count(),
                self.dim()
            )));
        }
        if self.normalized {
            for (i, row) in self.features.iter_rows().enumerate() {
                let n = norm(row);
                if (n - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::Validation(format!(
                        "{:?} marked normalized but row {i} has norm {n}",
                        self.tag
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn load_feature_set(data_path: impl AsRef<Path>, meta_path: impl AsRef<Path>) -> Result<FeatureSet> {
    let (data_path, meta_path) = (data_path.as_ref(), meta_path.as_ref());
    let meta: serde_json::Value = read_json(meta_path)?;
    let meta: FeatureMeta = serde_json::from_value(meta).map_err(|e| Error::Format {
        offset: 0,
        message: format!("{}: {e}", meta_path.display()),
    })?;
    let features = read_fmx(data_path)?;
    if meta.dim != features.cols() || meta.count != features.rows() {
        return Err(Error::Consistency(format!(
            "{} declares {}x{} but {} holds {}x{}",
            meta_path.display(),
            meta.count,
            meta.dim,
            data_path.display(),
            features.rows(),
            features.cols()
        )));
    }
    FeatureSet::new(
        meta.tag,
        features,
        meta.model_id,
        meta.normalized,
        meta.source_dataset,
    )
}

/// Writes `<path>` and its `.meta.json` sidecar.
pub fn save_feature_set(fs: &FeatureSet, data_path: impl AsRef<Path>) -> Result<()> {
    let data_path = data_path.as_ref();
    write_fmx(&fs.features, data_path)?;
    write_json(&fs.meta(), &meta_path_for(data_path))
}

/// The target model's final linear layer: `logits = weights · a + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weights: Matrix,
    pub bias: Vec<f32>,
    pub class_names: Vec<String>,
}

impl ClassifierHead {
    pub fn new(weights: Matrix, bias: Vec<f32>, class_names: Vec<String>) -> Result<Self> {
        let k = weights.rows();
        if class_names.len() != k {
            return Err(Error::Consistency(format!(
                "{} class names for a head with {k} rows",
                class_names.len()
            )));
        }
        if bias.len() != k {
            return Err(Error::Consistency(format!(
                "bias has {} entries for a head with {k} rows",
                bias.len()
            )));
        }
        let mut seen = HashMap::new();
        for (i, name) in class_names.iter().enumerate() {
            if let Some(j) = seen.insert(name.as_str(), i) {
                return Err(Error::Consistency(format!(
                    "class name {name:?} repeated at positions {j} and {i}"
                )));
            }
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Validation("non-finite head bias".into()));
        }
        Ok(Self {
            weights,
            bias,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Logit `k` at activation `a`.
    pub fn logit(&self, k: usize, a: &[f32]) -> Result<f64> {
        if k >= self.num_classes() {
            return Err(Error::Index {
                index: k,
                len: self.num_classes(),
            });
        }
        Ok(crate::linalg::dot(self.weights.row(k), a)? + self.bias[k] as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HeadLoadReport {
    /// The metadata had no `bias`; a zero vector was substituted.
    pub bias_defaulted: bool,
}

pub fn load_head(
    weights_path: impl AsRef<Path>,
    meta_path: impl AsRef<Path>,
) -> Result<(ClassifierHead, HeadLoadReport)> {
    let weights = read_fmx(weights_path)?;
    let meta: HeadMeta = read_json(meta_path.as_ref())?;
    let report = HeadLoadReport {
        bias_defaulted: meta.bias.is_none(),
    };
    let bias = meta.bias.unwrap_or_else(|| vec![0.0; weights.rows()]);
    Ok((ClassifierHead::new(weights, bias, meta.class_names)?, report))
}

pub fn save_head(head: &ClassifierHead, model_id: Option<&str>, weights_path: impl AsRef<Path>) -> Result<()> {
    let weights_path = weights_path.as_ref();
    write_fmx(&head.weights, weights_path)?;
    let meta = HeadMeta {
        model_id: model_id.map(str::to_owned),
        class_names: head.class_names.clone(),
        bias: Some(head.bias.clone()),
    };
    write_json(&meta, &meta_path_for(weights_path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cav: Option<Vec<f32>>,
}

impl ConceptEntry {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into().trim().to_owned(),
            embedding: None,
            cav: None,
        }
    }

    pub fn with_embedding(text: impl Into<String>, embedding: Vec<f32>) -> Self {
        Self {
            embedding: Some(embedding),
            ..Self::new(text)
        }
    }

    /// Key under which concept texts must be unique.
    pub fn normalized_text(&self) -> String {
        self.text.trim().to_lowercase()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConceptList {
    entries: Vec<ConceptEntry>,
    pub provenance: String,
}

impl ConceptList {
    /// Validates text uniqueness, non-empty texts, embedding length
    /// agreement and unit norm.
    pub fn new(entries: Vec<ConceptEntry>) -> Result<Self> {
        let lines: Vec<usize> = (1..=entries.len()).collect();
        Self::validated(entries, &lines)
    }

    fn validated(entries: Vec<ConceptEntry>, lines: &[usize]) -> Result<Self> {
        let mut first_seen: HashMap<String, usize> = HashMap::new();
        let mut dims: Option<usize> = None;
        for (entry, &line) in entries.iter().zip(lines) {
            if entry.text.trim().is_empty() {
                return Err(Error::Parse {
                    line,
                    message: "empty concept text".into(),
                });
            }
            if let Some(&prev) = first_seen.get(&entry.normalized_text()) {
                return Err(Error::Duplicate {
                    text: entry.text.clone(),
                    lines: vec![prev, line],
                });
            }
            first_seen.insert(entry.normalized_text(), line);
            if let Some(e) = &entry.embedding {
                match dims {
                    Some(n) if n != e.len() => {
                        return Err(Error::Consistency(format!(
                            "line {line}: embedding of length {} where {n} expected",
                            e.len()
                        )))
                    }
                    _ => dims = Some(e.len()),
                }
                let n = norm(e);
                if (n - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::Validation(format!(
                        "line {line}: embedding for {:?} has norm {n}, expected unit",
                        entry.text
                    )));
                }
            }
        }
        Ok(Self {
            entries,
            provenance: String::new(),
        })
    }

    pub fn entries(&self) -> &[ConceptEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<ConceptEntry> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.text.as_str())
    }

    /// Length shared by all present embeddings.
    pub fn embedding_dim(&self) -> Option<usize> {
        self.entries.iter().find_map(|e| e.embedding.as_ref().map(Vec::len))
    }

    pub fn with_provenance(mut self, note: impl Into<String>) -> Self {
        self.provenance = note.into();
        self
    }
}

pub fn parse_concepts(text: &str) -> Result<ConceptList> {
    let mut entries = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: ConceptEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        entry.text = entry.text.trim().to_owned();
        entries.push(entry);
        lines.push(i + 1);
    }
    ConceptList::validated(entries, &lines)
}

pub fn load_concepts(path: impl AsRef<Path>) -> Result<ConceptList> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_concepts(&text)?.with_provenance(path.display().to_string()))
}

pub fn concepts_to_jsonl(list: &ConceptList) -> String {
    let mut out = String::new();
    for e in list.entries() {
        out.push_str(&serde_json::to_string(e).expect("serializable concept"));
        out.push('\n');
    }
    out
}

pub fn save_concepts(list: &ConceptList, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), concepts_to_jsonl(list).as_bytes())
}

/// Paired image features, optional text features and a classifier head.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub target_image: FeatureSet,
    pub vl_image: FeatureSet,
    pub vl_text: Option<FeatureSet>,
    pub head: Option<ClassifierHead>,
}

impl Workspace {
    pub fn new(
        target_image: FeatureSet,
        vl_image: FeatureSet,
        vl_text: Option<FeatureSet>,
        head: Option<ClassifierHead>,
    ) -> Result<Self> {
        let ws = Self {
            target_image,
            vl_image,
            vl_text,
            head,
        };
        ws.validate()?;
        Ok(ws)
    }

    pub fn validate(&self) -> Result<()> {
        let expect_tag = |fs: &FeatureSet, tag: SpaceTag| {
            if fs.tag == tag {
                Ok(())
            } else {
                Err(Error::Consistency(format!(
                    "expected {tag:?} features, found {:?}",
                    fs.tag
                )))
            }
        };
        expect_tag(&self.target_image, SpaceTag::TargetImage)?;
        expect_tag(&self.vl_image, SpaceTag::VlImage)?;
        if self.target_image.count() != self.vl_image.count() {
            return Err(Error::Consistency(format!(
                "paired image features disagree on count: {} target vs {} vision-language",
                self.target_image.count(),
                self.vl_image.count()
            )));
        }
        if let Some(text) = &self.vl_text {
            expect_tag(text, SpaceTag::VlText)?;
            if text.dim() != self.vl_image.dim() {
                return Err(Error::Consistency(format!(
                    "vision-language text dim {} != image dim {}",
                    text.dim(),
                    self.vl_image.dim()
                )));
            }
        }
        if let Some(head) = &self.head {
            if head.feature_dim() != self.target_image.dim() {
                return Err(Error::Consistency(format!(
                    "head expects {}-dim features, target features are {}-dim",
                    head.feature_dim(),
                    self.target_image.dim()
                )));
            }
        }
        Ok(())
    }

    /// Target-space dimension `m`.
    pub fn target_dim(&self) -> usize {
        self.target_image.dim()
    }

    /// Vision-language dimension `n`.
    pub fn vl_dim(&self) -> usize {
        self.vl_image.dim()
    }
}

/// File names inside a workspace directory.
///
/// ```text
/// <dir>/target_image.fmx (+ .meta.json)
/// <dir>/vl_image.fmx     (+ .meta.json)
/// <dir>/vl_text.fmx      (+ .meta.json, optional)
/// <dir>/heads/<head_id>.fmx (+ .meta.json)
/// <dir>/maps/<map_id>/{h,g}.{weights,bias}.fmx, report.json
/// <dir>/concepts.jsonl
/// <dir>/annotations.jsonl (optional)
/// ```
#[derive(Debug, Clone)]
pub struct WorkspaceLayout {
    pub root: PathBuf,
}

impl WorkspaceLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn target_image(&self) -> PathBuf {
        self.root.join("target_image.fmx")
    }

    pub fn vl_image(&self) -> PathBuf {
        self.root.join("vl_image.fmx")
    }

    pub fn vl_text(&self) -> PathBuf {
        self.root.join("vl_text.fmx")
    }

    pub fn heads_dir(&self) -> PathBuf {
        self.root.join("heads")
    }

    pub fn head(&self, id: &str) -> PathBuf {
        self.heads_dir().join(format!("{id}.fmx"))
    }

    pub fn maps_dir(&self) -> PathBuf {
        self.root.join("maps")
    }

    pub fn map(&self, id: &str) -> PathBuf {
        self.maps_dir().join(id)
    }

    pub fn concepts(&self) -> PathBuf {
        self.root.join("concepts.jsonl")
    }

    pub fn annotations(&self) -> PathBuf {
        self.root.join("annotations.jsonl")
    }

    pub fn jobs_dir(&self) -> PathBuf {
        self.root.join("jobs")
    }

    pub fn load_workspace(&self) -> Result<Workspace> {
        let fs_at = |p: PathBuf| load_feature_set(&p, meta_path_for(&p));
        let vl_text = if self.vl_text().exists() {
            Some(fs_at(self.vl_text())?)
        } else {
            None
        };
        Workspace::new(fs_at(self.target_image())?, fs_at(self.vl_image())?, vl_text, None)
    }

    pub fn save_workspace(&self, ws: &Workspace) -> Result<()> {
        save_feature_set(&ws.target_image, self.target_image())?;
        save_feature_set(&ws.vl_image, self.vl_image())?;
        if let Some(t) = &ws.vl_text {
            save_feature_set(t, self.vl_text())?;
        }
        Ok(())
    }

    /// Heads under `heads/`, keyed by file stem.
    pub fn load_heads(&self) -> Result<BTreeMap<String, ClassifierHead>> {
        list_ids(&self.heads_dir(), |p| {
            let name = p.file_name()?.to_str()?;
            (name.ends_with(".fmx")).then(|| name.trim_end_matches(".fmx").to_owned())
        })?
        .into_iter()
        .map(|id| {
            let p = self.head(&id);
            let (head, _) = load_head(&p, meta_path_for(&p))?;
            Ok((id, head))
        })
        .collect()
    }

    pub fn map_ids(&self) -> Result<Vec<String>> {
        list_ids(&self.maps_dir(), |p| {
            (p.is_dir() && p.join("h.weights.fmx").exists())
                .then(|| p.file_name()?.to_str().map(str::to_owned))
                .flatten()
        })
    }
}

fn list_ids(dir: &Path, pick: impl Fn(&Path) -> Option<String>) -> Result<Vec<String>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(id) = pick(&entry.path()) {
            ids.push(id);
        }
    }
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn sample(rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|i| i as f32 * 0.37 - 1.5).collect())
            .unwrap()
    }

    #[test]
    fn fmx_layout_is_exact() {
        let m = Matrix::from_rows(&[[1.0f32, -2.5]]).unwrap();
        let bytes = encode_fmx(&m);
        assert_eq!(&bytes[..4], b"FMX1");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn fmx_round_trip_on_disk() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.fmx");
        let m = sample(3, 4);
        write_fmx(&m, &p).unwrap();
        assert_eq!(read_fmx(&p).unwrap(), m);
    }

    #[test]
    fn fmx_errors_carry_offsets() {
        let mut bytes = encode_fmx(&sample(2, 2));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_fmx(&bytes), Err(Error::Format { offset: 0, .. })));

        let mut bytes = encode_fmx(&sample(2, 2));
        bytes.truncate(16 + 12);
        match decode_fmx(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 28);
                assert!(message.contains("truncated"));
            }
            other => panic!("expected truncation error, got {other:?}"),
        }

        let mut bytes = encode_fmx(&sample(2, 2));
        bytes[4] = 2;
        assert!(matches!(decode_fmx(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    fn unit_rows(rows: usize, cols: usize) -> Matrix {
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            data[i * cols + i % cols] = 1.0;
        }
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn feature_set_loading() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("text.fmx");
        let fs = FeatureSet::new(SpaceTag::VlText, unit_rows(10, 512), "clip", true, "demo").unwrap();
        save_feature_set(&fs, &p).unwrap();
        let meta = dir.path().join("text.meta.json");
        assert_eq!(load_feature_set(&p, &meta).unwrap(), fs);

        let mut m = fs.meta();
        m.dim = 256;
        write_json(&m, &meta).unwrap();
        assert!(matches!(load_feature_set(&p, &meta), Err(Error::Consistency(_))));

        let mut bad = unit_rows(10, 512).into_vec();
        bad[0] = 3.0;
        write_fmx(&Matrix::from_vec(10, 512, bad).unwrap(), &p).unwrap();
        write_json(&fs.meta(), &meta).unwrap();
        assert!(matches!(load_feature_set(&p, &meta), Err(Error::Validation(_))));

        fs::write(&meta, r#"{"tag":"audio","model_id":"x","dim":512,"count":10,"normalized":false,"source_dataset":""}"#).unwrap();
        assert!(matches!(load_feature_set(&p, &meta), Err(Error::Format { .. })));
    }

    #[test]
    fn head_loading() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("head.fmx");
        let names: Vec<String> = ["No Finding", "Atelectasis", "Cardiomegaly", "Edema", "Pleural Effusion"]
            .map(String::from)
            .to_vec();
        write_fmx(&Matrix::zeros(5, 2048), &p).unwrap();
        let meta = meta_path_for(&p);
        write_json(&HeadMeta { model_id: None, class_names: names.clone(), bias: None }, &meta).unwrap();
        let (head, report) = load_head(&p, &meta).unwrap();
        assert_eq!((head.num_classes(), head.feature_dim()), (5, 2048));
        assert!(report.bias_defaulted);
        assert_eq!(head.bias, vec![0.0; 5]);

        write_json(&HeadMeta { model_id: None, class_names: names[..3].to_vec(), bias: None }, &meta).unwrap();
        assert!(matches!(load_head(&p, &meta), Err(Error::Consistency(_))));
    }

    #[test]
    fn concept_lists() {
        let list = parse_concepts("{\"text\":\"cat\"}\n{\"text\":\"dog\"}\n").unwrap();
        assert_eq!(list.texts().collect::<Vec<_>>(), ["cat", "dog"]);

        match parse_concepts("{\"text\":\"Cat\"}\n{\"text\":\"cat\"}\n") {
            Err(Error::Duplicate { lines, .. }) => assert_eq!(lines, vec![1, 2]),
            other => panic!("expected duplicate error, got {other:?}"),
        }

        let err = parse_concepts(
            "{\"text\":\"a\",\"embedding\":[1.0,0.0]}\n{\"text\":\"b\",\"embedding\":[0.0,0.0,1.0]}\n",
        );
        assert!(matches!(err, Err(Error::Consistency(_))));

        assert!(matches!(
            parse_concepts("{\"text\":\"ok\"}\nnot json\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn workspace_validation() {
        let ti = FeatureSet::new(SpaceTag::TargetImage, sample(6, 3), "t", false, "").unwrap();
        let vi = FeatureSet::new(SpaceTag::VlImage, sample(6, 4), "v", false, "").unwrap();
        let vt = FeatureSet::new(SpaceTag::VlText, sample(2, 4), "v", false, "").unwrap();
        let head = ClassifierHead::new(Matrix::zeros(2, 3), vec![0.0; 2], vec!["a".into(), "b".into()]).unwrap();
        assert!(Workspace::new(ti.clone(), vi.clone(), Some(vt.clone()), Some(head.clone())).is_ok());

        let short = FeatureSet::new(SpaceTag::VlImage, sample(5, 4), "v", false, "").unwrap();
        assert!(Workspace::new(ti.clone(), short, None, None).is_err());
        let wrong_text = FeatureSet::new(SpaceTag::VlText, sample(2, 5), "v", false, "").unwrap();
        assert!(Workspace::new(ti.clone(), vi.clone(), Some(wrong_text), None).is_err());
        let wide = ClassifierHead::new(Matrix::zeros(2, 4), vec![0.0; 2], vec!["a".into(), "b".into()]).unwrap();
        assert!(Workspace::new(ti.clone(), vi.clone(), None, Some(wide)).is_err());
        assert!(Workspace::new(vi.clone(), ti, None, None).is_err());
    }

    proptest! {
        #[test]
        fn fmx_round_trips_bit_exactly(
            rows in 1usize..6, cols in 1usize..6,
            seed in prop::collection::vec(any::<u32>(), 36)
        ) {
            let data: Vec<f32> = seed[..rows * cols]
                .iter()
                .map(|&b| f32::from_bits(b))
                .map(|v| if v.is_finite() { v } else { 0.5 })
                .collect();
            let m = Matrix::from_vec(rows, cols, data).unwrap();
            let back = decode_fmx(&encode_fmx(&m)).unwrap();
            prop_assert_eq!(
                back.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn concept_jsonl_round_trips(
            texts in prop::collection::btree_set("[a-z]{1,8}( [a-z]{1,6})?", 1..8),
            raw in prop::collection::vec(-1.0f32..1.0, 4)
        ) {
            prop_assume!(norm(&raw) > 1e-3);
            let unit = crate::linalg::l2_normalize(&raw).unwrap();
            let entries: Vec<ConceptEntry> = texts
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if i % 2 == 0 {
                        ConceptEntry::with_embedding(t.clone(), unit.clone())
                    } else {
                        ConceptEntry::new(t.clone())
                    }
                })
                .collect();
            let list = ConceptList::new(entries).unwrap();
            let back = parse_concepts(&concepts_to_jsonl(&list)).unwrap();
            prop_assert_eq!(back.entries(), list.entries());
        }
    }
}
