use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use textcav_core::concepts::{load_annotations, AnnotationSet};
use textcav_core::store::{load_concepts, read_json, write_json, ClassifierHead, ConceptList, Workspace, WorkspaceLayout};
use textcav_core::trainer::{load_checkpoint, load_report, MapPair, TrainReport, TrainingConfig};
use textcav_embed::{EmbedderConfig, HttpEmbedder};

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug)]
pub struct TrainedMap {
    pub maps: MapPair,
    pub report: TrainReport,
}

/// Everything a request reads, published as one immutable value.
#[derive(Debug, Clone)]
pub struct WorkspaceSnapshot {
    pub id: String,
    pub version: u64,
    pub created_at_ms: u64,
    pub workspace: Arc<Workspace>,
    pub heads: Arc<BTreeMap<String, ClassifierHead>>,
    pub maps: BTreeMap<String, Arc<TrainedMap>>,
    pub concepts: Arc<ConceptList>,
    pub annotations: Option<Arc<AnnotationSet>>,
}

impl WorkspaceSnapshot {
    pub fn load(id: &str, layout: &WorkspaceLayout) -> textcav_core::Result<Self> {
        let workspace = layout.load_workspace()?;
        let heads = layout.load_heads()?;
        for (hid, head) in &heads {
            if head.feature_dim() != workspace.target_dim() {
                return Err(textcav_core::Error::Consistency(format!(
                    "head {hid} expects {}-dim features, workspace has {}",
                    head.feature_dim(),
                    workspace.target_dim()
                )));
            }
        }
        let mut maps = BTreeMap::new();
        for mid in layout.map_ids()? {
            let dir = layout.map(&mid);
            let trained = TrainedMap {
                maps: load_checkpoint(&dir)?,
                report: load_report(&dir)?,
            };
            if trained.maps.h.in_dim() != workspace.vl_dim() || trained.maps.h.out_dim() != workspace.target_dim() {
                return Err(textcav_core::Error::Consistency(format!(
                    "map {mid} is {}->{}, workspace is {}->{}",
                    trained.maps.h.in_dim(),
                    trained.maps.h.out_dim(),
                    workspace.vl_dim(),
                    workspace.target_dim()
                )));
            }
            maps.insert(mid, Arc::new(trained));
        }
        let concepts = if layout.concepts().exists() {
            load_concepts(layout.concepts())?
        } else {
            ConceptList::default()
        };
        if let Some(d) = concepts.embedding_dim() {
            if d != workspace.vl_dim() {
                return Err(textcav_core::Error::Consistency(format!(
                    "concept embeddings are {d}-dim, vision-language space is {}-dim",
                    workspace.vl_dim()
                )));
            }
        }
        let annotations = if layout.annotations().exists() {
            Some(Arc::new(load_annotations(layout.annotations())?))
        } else {
            None
        };
        Ok(Self {
            id: id.to_owned(),
            version: 1,
            created_at_ms: now_ms(),
            workspace: Arc::new(workspace),
            heads: Arc::new(heads),
            maps,
            concepts: Arc::new(concepts),
            annotations,
        })
    }

    /// A successor sharing everything but what `edit` changes.
    pub fn next(&self, edit: impl FnOnce(&mut WorkspaceSnapshot)) -> WorkspaceSnapshot {
        let mut s = self.clone();
        s.version += 1;
        s.created_at_ms = now_ms();
        edit(&mut s);
        s
    }

    /// `clean` if present, otherwise the first head by id.
    pub fn default_head(&self) -> Option<&str> {
        if self.heads.contains_key("clean") {
            Some("clean")
        } else {
            self.heads.keys().next().map(String::as_str)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub workspace: String,
    pub map_id: String,
    pub status: JobStatus,
    pub config: TrainingConfig,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ActiveJob {
    pub job_id: String,
    pub map_id: String,
}

pub struct WorkspaceSlot {
    pub layout: WorkspaceLayout,
    current: RwLock<Arc<WorkspaceSnapshot>>,
    pub training: Mutex<Option<ActiveJob>>,
    /// Serializes read-modify-write edits of the published snapshot.
    pub edit: Mutex<()>,
    pub embedder: Arc<HttpEmbedder>,
}

impl WorkspaceSlot {
    pub fn snapshot(&self) -> Arc<WorkspaceSnapshot> {
        self.current.read().expect("snapshot lock").clone()
    }

    pub fn publish(&self, next: WorkspaceSnapshot) {
        *self.current.write().expect("snapshot lock") = Arc::new(next);
    }

    pub fn active_job(&self) -> Option<ActiveJob> {
        self.training.lock().expect("training lock").clone()
    }
}

pub struct AppState {
    pub data_dir: PathBuf,
    pub slots: BTreeMap<String, Arc<WorkspaceSlot>>,
    pub jobs: Mutex<HashMap<String, JobRecord>>,
    /// Workspaces that failed to load, with the reason.
    pub skipped: BTreeMap<String, String>,
}

pub const EMBED_CACHE_FILE: &str = "embeddings.jsonl";

impl AppState {
    /// Loads every subdirectory of `data_dir` as a workspace. Jobs left
    /// unfinished by a previous process are recorded as failed.
    pub fn load(data_dir: impl Into<PathBuf>, embedder_url: Option<&str>) -> std::io::Result<Self> {
        let data_dir = data_dir.into();
        let mut slots = BTreeMap::new();
        let mut skipped = BTreeMap::new();
        let mut jobs = HashMap::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&data_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for root in entries {
            let Some(id) = root.file_name().and_then(|n| n.to_str()).map(str::to_owned) else {
                continue;
            };
            if id.starts_with('.') {
                continue;
            }
            let layout = WorkspaceLayout::new(&root);
            let snapshot = match WorkspaceSnapshot::load(&id, &layout) {
                Ok(s) => s,
                Err(e) => {
                    skipped.insert(id, e.to_string());
                    continue;
                }
            };
            let vl = &snapshot.workspace.vl_image;
            let mut cfg = EmbedderConfig::new(vl.model_id.clone(), vl.dim()).with_cache(root.join(EMBED_CACHE_FILE));
            if let Some(url) = embedder_url {
                cfg = cfg.with_endpoint(url);
            }
            let embedder = match HttpEmbedder::new(cfg) {
                Ok(e) => Arc::new(e),
                Err(e) => {
                    skipped.insert(id, e.to_string());
                    continue;
                }
            };
            for job in recover_jobs(&layout.jobs_dir()) {
                jobs.insert(job.job_id.clone(), job);
            }
            slots.insert(
                id,
                Arc::new(WorkspaceSlot {
                    layout,
                    current: RwLock::new(Arc::new(snapshot)),
                    training: Mutex::new(None),
                    edit: Mutex::new(()),
                    embedder,
                }),
            );
        }
        Ok(Self {
            data_dir,
            slots,
            jobs: Mutex::new(jobs),
            skipped,
        })
    }

    pub fn slot(&self, id: &str) -> Option<&Arc<WorkspaceSlot>> {
        self.slots.get(id)
    }

    pub fn job(&self, id: &str) -> Option<JobRecord> {
        self.jobs.lock().expect("jobs lock").get(id).cloned()
    }

    /// Records a job state in memory and on disk.
    pub fn save_job(&self, slot: &WorkspaceSlot, job: &JobRecord) {
        self.jobs
            .lock()
            .expect("jobs lock")
            .insert(job.job_id.clone(), job.clone());
        let path = slot.layout.jobs_dir().join(format!("{}.json", job.job_id));
        if let Err(e) = write_json(job, &path) {
            eprintln!("warning: could not persist job {}: {e}", job.job_id);
        }
    }
}

fn recover_jobs(dir: &Path) -> Vec<JobRecord> {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for e in entries.filter_map(|e| e.ok()) {
        let path = e.path();
        if path.extension().and_then(|x| x.to_str()) != Some("json") {
            continue;
        }
        let Ok(mut job) = read_json::<JobRecord>(&path) else {
            eprintln!("warning: ignoring unreadable job file {}", path.display());
            continue;
        };
        if !job.status.is_terminal() {
            job.status = JobStatus::Failed;
            job.error = Some("interrupted by server restart".into());
            job.updated_at_ms = now_ms();
            if let Err(err) = write_json(&job, &path) {
                eprintln!("warning: could not update {}: {err}", path.display());
            }
        }
        out.push(job);
    }
    out
}
