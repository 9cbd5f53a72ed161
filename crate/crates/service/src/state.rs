use std::collections::HashMap;
use std::io;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use cuegen_core::attributes::{AttrError, LinearHead, TopicModel};
use cuegen_core::corpus::Script;
use cuegen_core::steering::SteeringParams;
use cuegen_core::textmodel::{Checkpoint, ModelError};
use serde::{Deserialize, Serialize};

use crate::candidates::{AttributeSpec, Candidate};
use crate::store::Store;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub store_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Head with `dialogue`/`cue` classes.
    pub cue_head: Option<PathBuf>,
    pub emotion_head: Option<PathBuf>,
    pub lda: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("store: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint: {0}")]
    Model(#[from] ModelError),
    #[error("attribute model: {0}")]
    Attr(#[from] AttrError),
}

pub struct LoadedCheckpoint {
    /// SHA-256 of the serialized checkpoint, also its blob name.
    pub id: String,
    pub ck: Checkpoint<f32>,
}

/// Read-only artifacts shared by every request.
#[derive(Default)]
pub struct Models {
    pub checkpoint: Option<LoadedCheckpoint>,
    pub cue_head: Option<LinearHead>,
    pub emotion_head: Option<LinearHead>,
    pub lda: Option<TopicModel>,
}

impl Models {
    /// Registers the checkpoint in the store's blob area.
    pub fn new(
        store: &Store,
        ck: Option<Checkpoint<f32>>,
        cue_head: Option<LinearHead>,
        emotion_head: Option<LinearHead>,
        lda: Option<TopicModel>,
    ) -> io::Result<Self> {
        let checkpoint = match ck {
            Some(ck) => Some(LoadedCheckpoint { id: store.put_blob(&ck.to_bytes())?, ck }),
            None => None,
        };
        Ok(Models { checkpoint, cue_head, emotion_head, lda })
    }

    pub fn checkpoint_id(&self) -> Option<String> {
        self.checkpoint.as_ref().map(|c| c.id.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRecord {
    pub id: String,
    /// Incremented by every accepted insertion.
    pub version: u64,
    pub source_hash: String,
    pub created_ms: u64,
    pub script: Script,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub scene: usize,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub input_line: String,
    pub attribute: AttributeSpec,
    pub params: SteeringParams,
    pub candidate: usize,
    pub chosen_text: String,
    pub inserted_at: Cursor,
    pub script_version: u64,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pending {
    pub input_line: String,
    pub attribute: AttributeSpec,
    pub params: SteeringParams,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub script_id: String,
    pub cursor: Cursor,
    /// Append-only.
    pub history: Vec<HistoryEntry>,
    pub checkpoint_id: Option<String>,
    pub pending: Option<Pending>,
    /// Last used settings, reused when a request omits them.
    pub params: Option<SteeringParams>,
    pub attribute: Option<AttributeSpec>,
    pub created_ms: u64,
}

type Table<T> = RwLock<HashMap<String, Arc<Mutex<T>>>>;

/// Mutations of one script or session are serialized by its own mutex;
/// the tables themselves are only locked to look entries up or add them.
pub struct AppState {
    pub store: Store,
    pub models: Arc<Models>,
    pub scripts: Table<ScriptRecord>,
    pub sessions: Table<Session>,
}

impl AppState {
    pub fn open(config: &ServiceConfig) -> Result<Self, LoadError> {
        let store = Store::open(&config.store_dir)?;
        let ck = config.checkpoint.as_ref().map(Checkpoint::<f32>::load).transpose()?;
        let cue_head = config.cue_head.as_ref().map(LinearHead::load).transpose()?;
        let emotion_head = config.emotion_head.as_ref().map(LinearHead::load).transpose()?;
        let lda = config.lda.as_ref().map(TopicModel::load).transpose()?;
        let models = Models::new(&store, ck, cue_head, emotion_head, lda)?;
        Ok(Self::with_models(store, models)?)
    }

    /// Reload persisted scripts and sessions from `store`.
    pub fn with_models(store: Store, models: Models) -> io::Result<Self> {
        let scripts = store
            .load_all::<ScriptRecord>("scripts")?
            .into_iter()
            .map(|r| (r.id.clone(), Arc::new(Mutex::new(r))))
            .collect();
        let sessions = store
            .load_all::<Session>("sessions")?
            .into_iter()
            .map(|s| (s.id.clone(), Arc::new(Mutex::new(s))))
            .collect();
        Ok(AppState { store, models: Arc::new(models), scripts: RwLock::new(scripts), sessions: RwLock::new(sessions) })
    }

    pub fn script(&self, id: &str) -> Option<Arc<Mutex<ScriptRecord>>> {
        self.scripts.read().unwrap().get(id).cloned()
    }

    pub fn session(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.read().unwrap().get(id).cloned()
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

pub fn new_id(prefix: &str) -> String {
    format!("{prefix}-{}", uuid::Uuid::new_v4().simple())
}
