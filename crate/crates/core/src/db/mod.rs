//! Workspace-isolated storage and query execution.
//!
//! Ingested datasets live in one shared catalog database (`corpus.db`). Each
//! workspace is its own database file (`workspace-<id>.db`) with the catalog
//! attached read-only as schema `corpus`; intermediate tables are created in
//! the workspace's `main` schema and are therefore invisible to every other
//! workspace. An authorizer hook on each workspace connection restricts reads
//! to the workspace's attached datasets and records which tables a statement
//! reads, which is how operators learn their provenance inputs.

mod ingest;
mod scan;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use rusqlite::hooks::{AuthAction, AuthContext, Authorization};
use rusqlite::types::ValueRef;
use rusqlite::{params_from_iter, Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::model::{single_statement, ColumnSpec, DeclaredType};
use crate::value::{quote_ident, Relation, Value};

pub use scan::{normalize_keyword, ContentScan, KeywordHits, MAX_KEYWORDS, MAX_KEYWORD_CHARS};

use ingest::{FileFormat, TypeInference};
use scan::ShadowStore;

const CORPUS_FILE: &str = "corpus.db";
const CORPUS_SCHEMA: &str = "corpus";
const INTERNAL_PREFIX: &str = "_quarry";
const PATTERN_BUDGET: Duration = Duration::from_millis(100);

#[derive(Debug, Error)]
pub enum DbError {
    #[error("cannot read {path}: {message}")]
    UnreadableFile { path: String, message: String },
    #[error("dataset {0} is already ingested")]
    DuplicateDatasetId(String),
    #[error("table {0} already exists")]
    DuplicateTableId(String),
    #[error("table {0} not found")]
    TableNotFound(String),
    #[error("table {0} is not visible from this workspace")]
    TableNotVisible(String),
    /// Engine message, verbatim.
    #[error("{0}")]
    SqlError(String),
    #[error("invalid pattern: {0}")]
    InvalidPattern(String),
    #[error("unknown workspace {0}")]
    UnknownWorkspace(String),
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
    #[error("invalid table identifier {0:?}")]
    InvalidIdentifier(String),
    #[error("storage error: {0}")]
    Storage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<rusqlite::Error> for DbError {
    fn from(e: rusqlite::Error) -> Self {
        DbError::Storage(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableSource {
    Ingested,
    ExternalFile,
    Intermediate,
}

/// A table known to the service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRef {
    /// Name the table is queried by.
    pub table_id: String,
    pub source: TableSource,
    pub row_count: u64,
    pub column_names: Vec<String>,
    /// Owning workspace for intermediate and external tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workspace_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<String>,
}

impl TableRef {
    /// Corpus-wide unique identifier: workspace tables are prefixed by their
    /// workspace id.
    pub fn qualified_id(&self) -> String {
        match &self.workspace_id {
            Some(ws) => format!("{ws}.{}", self.table_id),
            None => self.table_id.clone(),
        }
    }
}

/// An isolated per-session database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workspace {
    pub workspace_id: String,
    pub attached_sources: Vec<String>,
    pub intermediate_tables: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub relation: Relation,
    pub truncated: bool,
    pub row_limit_applied: u64,
}

/// A successful [`DbService::persist_as_table`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Persisted {
    pub table: TableRef,
    /// Tables the defining query read, in name order.
    pub inputs: Vec<String>,
    /// The exact statement executed.
    pub statement: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct CatalogTable {
    pub table_id: String,
    pub dataset_id: String,
    pub row_count: u64,
    pub columns: Vec<ColumnSpec>,
    pub generation: u64,
}

impl CatalogTable {
    fn table_ref(&self) -> TableRef {
        TableRef {
            table_id: self.table_id.clone(),
            source: TableSource::Ingested,
            row_count: self.row_count,
            column_names: self.columns.iter().map(|c| c.name.clone()).collect(),
            workspace_id: None,
            dataset_id: Some(self.dataset_id.clone()),
        }
    }
}

#[derive(Debug, Default)]
struct Catalog {
    datasets: BTreeMap<String, Vec<String>>,
    tables: BTreeMap<String, CatalogTable>,
    next_generation: u64,
}

#[derive(Debug, Default)]
struct AuthState {
    enforce: bool,
    visible: HashSet<String>,
    reads: BTreeSet<String>,
    denied: Option<String>,
    forbidden: Option<String>,
}

struct WorkspaceHandle {
    conn: Mutex<Connection>,
    auth: Arc<Mutex<AuthState>>,
    meta: RwLock<Workspace>,
    /// Engine-side types of intermediate columns, where known.
    column_types: RwLock<HashMap<String, Vec<ColumnSpec>>>,
}

/// Storage and execution service shared by all sessions.
pub struct DbService {
    root: PathBuf,
    catalog: RwLock<Catalog>,
    writer: Mutex<Connection>,
    reader: Mutex<Connection>,
    workspaces: Mutex<HashMap<String, Arc<WorkspaceHandle>>>,
    shadows: ShadowStore,
}

impl std::fmt::Debug for DbService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DbService").field("root", &self.root).finish()
    }
}

/// Workspace identifier for a (user, chat) pair.
pub fn workspace_id_for(user_id: &str, chat_id: &str) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect()
    };
    format!("ws_{}_{}", clean(user_id), clean(chat_id))
}

/// Whether `name` may be used as a planner-chosen table identifier.
pub fn valid_table_id(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && name.len() <= 128
        && !name.starts_with(INTERNAL_PREFIX)
        && !name.to_ascii_lowercase().starts_with("sqlite_")
}

impl DbService {
    /// Open (or create) a service rooted at `root`.
    pub fn open(root: impl AsRef<Path>) -> Result<Arc<Self>, DbError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("workspaces"))?;
        let corpus_path = root.join(CORPUS_FILE);
        let writer = Connection::open(&corpus_path)?;
        writer.busy_timeout(Duration::from_secs(30))?;
        writer.execute_batch(
            "CREATE TABLE IF NOT EXISTS _quarry_datasets (dataset_id TEXT PRIMARY KEY, path TEXT NOT NULL);
             CREATE TABLE IF NOT EXISTS _quarry_tables (
                table_id TEXT PRIMARY KEY, dataset_id TEXT NOT NULL, row_count INTEGER NOT NULL,
                columns TEXT NOT NULL, generation INTEGER NOT NULL);",
        )?;
        let catalog = load_catalog(&writer)?;
        let reader = Connection::open_with_flags(
            &corpus_path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )?;
        reader.busy_timeout(Duration::from_secs(30))?;
        reader.execute(&format!("ATTACH DATABASE ?1 AS {CORPUS_SCHEMA}"), [sqlite_uri(&corpus_path)])?;
        Ok(Arc::new(Self {
            shadows: ShadowStore::new(root.join("shadow")),
            root,
            catalog: RwLock::new(catalog),
            writer: Mutex::new(writer),
            reader: Mutex::new(reader),
            workspaces: Mutex::new(HashMap::new()),
        }))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    // ------------------------------------------------------------------
    // catalog

    /// Register every CSV/Parquet file under `path` (a directory or a single
    /// file) as a table of dataset `dataset_id`.
    pub fn ingest_dataset(&self, path: &Path, dataset_id: &str) -> Result<Vec<TableRef>, DbError> {
        if !valid_table_id(dataset_id) && !dataset_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_".contains(c)) {
            return Err(DbError::InvalidIdentifier(dataset_id.to_string()));
        }
        let writer = self.writer.lock().expect("writer lock poisoned");
        if self.catalog.read().expect("catalog poisoned").datasets.contains_key(dataset_id) {
            return Err(DbError::DuplicateDatasetId(dataset_id.to_string()));
        }
        let files = data_files(path)?;

        let mut planned = Vec::new();
        {
            let catalog = self.catalog.read().expect("catalog poisoned");
            let mut seen = HashSet::new();
            for (file, format) in &files {
                let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
                let table_id = ingest::table_id_from_stem(stem);
                if catalog.tables.contains_key(&table_id) || !seen.insert(table_id.clone()) {
                    return Err(DbError::DuplicateTableId(table_id));
                }
                planned.push((file.clone(), *format, table_id));
            }
        }

        let mut generation = self.catalog.read().expect("catalog poisoned").next_generation;
        let tx = writer.unchecked_transaction()?;
        tx.execute(
            "INSERT INTO _quarry_datasets (dataset_id, path) VALUES (?1, ?2)",
            rusqlite::params![dataset_id, path.display().to_string()],
        )?;
        let mut created = Vec::new();
        for (file, format, table_id) in planned {
            generation += 1;
            let started = Instant::now();
            let table = ingest_file(&tx, &file, format, &table_id, dataset_id, generation)?;
            info!(table = %table.table_id, rows = table.row_count, elapsed = ?started.elapsed(), "ingested");
            created.push(table);
        }
        tx.commit()?;

        let mut catalog = self.catalog.write().expect("catalog poisoned");
        catalog.next_generation = generation;
        catalog
            .datasets
            .insert(dataset_id.to_string(), created.iter().map(|t| t.table_id.clone()).collect());
        let refs = created.iter().map(CatalogTable::table_ref).collect();
        for t in created {
            self.shadows.invalidate(&t.table_id)?;
            catalog.tables.insert(t.table_id.clone(), t);
        }
        Ok(refs)
    }

    pub fn datasets(&self) -> Vec<String> {
        self.catalog.read().expect("catalog poisoned").datasets.keys().cloned().collect()
    }

    pub fn dataset_tables(&self, dataset_id: &str) -> Result<Vec<TableRef>, DbError> {
        let catalog = self.catalog.read().expect("catalog poisoned");
        let ids = catalog
            .datasets
            .get(dataset_id)
            .ok_or_else(|| DbError::UnknownDataset(dataset_id.to_string()))?;
        Ok(ids.iter().filter_map(|id| catalog.tables.get(id)).map(CatalogTable::table_ref).collect())
    }

    /// A corpus table by id.
    pub fn corpus_table(&self, table_id: &str) -> Option<TableRef> {
        self.catalog.read().expect("catalog poisoned").tables.get(table_id).map(CatalogTable::table_ref)
    }

    /// Declared column types of a corpus table.
    pub fn corpus_columns(&self, table_id: &str) -> Option<Vec<ColumnSpec>> {
        self.catalog.read().expect("catalog poisoned").tables.get(table_id).map(|t| t.columns.clone())
    }

    /// Corpus tables whose identifier fully matches `pattern`, sorted.
    /// `scope` restricts the search to the given datasets.
    pub fn enumerate_tables(&self, pattern: &str, scope: Option<&[String]>) -> Result<Vec<TableRef>, DbError> {
        let started = Instant::now();
        let re = regex::RegexBuilder::new(&format!("^(?:{pattern})$"))
            .size_limit(1 << 20)
            .dfa_size_limit(1 << 20)
            .build()
            .map_err(|e| DbError::InvalidPattern(e.to_string()))?;
        let catalog = self.catalog.read().expect("catalog poisoned");
        let mut out = Vec::new();
        for t in catalog.tables.values() {
            if started.elapsed() > PATTERN_BUDGET {
                return Err(DbError::InvalidPattern(format!(
                    "pattern exceeded the {} ms evaluation budget",
                    PATTERN_BUDGET.as_millis()
                )));
            }
            if scope.is_some_and(|s| !s.contains(&t.dataset_id)) {
                continue;
            }
            if re.is_match(&t.table_id) {
                out.push(t.table_ref());
            }
        }
        // BTreeMap iteration is already lexicographic
        Ok(out)
    }

    /// Per-table, per-keyword match counts over `tables` (all corpus tables
    /// when `None`). Keywords are literal strings matched case-insensitively.
    pub fn content_scan(&self, keywords: &[String], tables: Option<&[String]>) -> Result<ContentScan, DbError> {
        let mut report = ContentScan::default();
        for raw in keywords {
            let (k, cut) = normalize_keyword(raw);
            report.truncated |= cut;
            if k.is_empty() || report.keywords.contains(&k) {
                continue;
            }
            if report.keywords.len() == MAX_KEYWORDS {
                report.truncated = true;
                break;
            }
            report.keywords.push(k);
        }
        let targets: Vec<CatalogTable> = {
            let catalog = self.catalog.read().expect("catalog poisoned");
            match tables {
                Some(ids) => ids.iter().filter_map(|id| catalog.tables.get(id).cloned()).collect(),
                None => catalog.tables.values().cloned().collect(),
            }
        };
        if report.keywords.is_empty() {
            for t in targets {
                report.tables.insert(t.table_id, Vec::new());
            }
            return Ok(report);
        }
        for t in targets {
            let shadow = {
                let reader = self.reader.lock().expect("reader lock poisoned");
                self.shadows.ensure(&t, &reader)?
            };
            let cells = scan::scan_shadow(&shadow, &report.keywords)?;
            let hits = report
                .keywords
                .iter()
                .zip(cells)
                .map(|(k, tf_cells)| KeywordHits {
                    tf_cells,
                    tf_colnames: t.columns.iter().filter(|c| c.name.to_lowercase().contains(k.as_str())).count() as u64,
                })
                .collect();
            report.tables.insert(t.table_id.clone(), hits);
        }
        Ok(report)
    }

    /// Build scan shadows ahead of time so the first scan pays no build cost.
    pub fn warm_scan_cache(&self, tables: &[String]) -> Result<(), DbError> {
        let targets: Vec<CatalogTable> = {
            let catalog = self.catalog.read().expect("catalog poisoned");
            tables.iter().filter_map(|id| catalog.tables.get(id).cloned()).collect()
        };
        let reader = self.reader.lock().expect("reader lock poisoned");
        for t in targets {
            self.shadows.ensure(&t, &reader)?;
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // workspaces

    fn workspace_path(&self, workspace_id: &str) -> PathBuf {
        self.root.join("workspaces").join(format!("workspace-{workspace_id}.db"))
    }

    /// Open or create a workspace with the given attached datasets.
    pub fn open_workspace(&self, workspace_id: &str, attach: &[String]) -> Result<Workspace, DbError> {
        if !valid_table_id(workspace_id) {
            return Err(DbError::InvalidIdentifier(workspace_id.to_string()));
        }
        {
            let catalog = self.catalog.read().expect("catalog poisoned");
            for d in attach {
                if !catalog.datasets.contains_key(d) {
                    return Err(DbError::UnknownDataset(d.clone()));
                }
            }
        }
        let handle = self.handle_or_open(workspace_id, true)?;
        {
            let mut meta = handle.meta.write().expect("workspace meta poisoned");
            for d in attach {
                if !meta.attached_sources.contains(d) {
                    meta.attached_sources.push(d.clone());
                }
            }
        }
        self.save_meta(&handle)?;
        let meta = handle.meta.read().expect("workspace meta poisoned").clone();
        Ok(meta)
    }

    /// Attach another ingested dataset to a workspace.
    pub fn attach_source(&self, workspace_id: &str, dataset_id: &str) -> Result<Workspace, DbError> {
        self.open_workspace(workspace_id, &[dataset_id.to_string()])
    }

    /// Load an external CSV/Parquet file into a workspace as a table visible
    /// only there.
    pub fn attach_external_file(&self, workspace_id: &str, path: &Path, table_id: &str) -> Result<TableRef, DbError> {
        let handle = self.handle(workspace_id)?;
        self.check_new_table_id(&handle, table_id)?;
        let format = FileFormat::of(path).ok_or_else(|| DbError::UnreadableFile {
            path: path.display().to_string(),
            message: "not a CSV or Parquet file".into(),
        })?;
        let conn = handle.conn.lock().expect("workspace connection poisoned");
        handle.auth.lock().expect("auth poisoned").enforce = false;
        let tx = conn.unchecked_transaction()?;
        let table = ingest_into(&tx, "main", path, format, table_id, workspace_id, 0)?;
        tx.commit()?;
        drop(conn);
        handle.column_types.write().expect("types poisoned").insert(table_id.to_string(), table.columns.clone());
        handle.meta.write().expect("workspace meta poisoned").intermediate_tables.push(table_id.to_string());
        Ok(TableRef {
            table_id: table_id.to_string(),
            source: TableSource::ExternalFile,
            row_count: table.row_count,
            column_names: table.columns.iter().map(|c| c.name.clone()).collect(),
            workspace_id: Some(workspace_id.to_string()),
            dataset_id: None,
        })
    }

    pub fn workspace(&self, workspace_id: &str) -> Result<Workspace, DbError> {
        Ok(self.handle(workspace_id)?.meta.read().expect("workspace meta poisoned").clone())
    }

    /// Workspace ids with a database file under this root.
    pub fn list_workspaces(&self) -> Result<Vec<String>, DbError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("workspaces"))? {
            let name = entry?.file_name().to_string_lossy().to_string();
            if let Some(id) = name.strip_prefix("workspace-").and_then(|n| n.strip_suffix(".db")) {
                out.push(id.to_string());
            }
        }
        out.sort();
        Ok(out)
    }

    /// Delete a workspace and all of its intermediate tables. Corpus data is
    /// untouched.
    pub fn drop_workspace(&self, workspace_id: &str) -> Result<(), DbError> {
        let removed = self.workspaces.lock().expect("workspace map poisoned").remove(workspace_id);
        drop(removed);
        let path = self.workspace_path(workspace_id);
        if !path.exists() {
            return Err(DbError::UnknownWorkspace(workspace_id.to_string()));
        }
        for suffix in ["", "-wal", "-shm", "-journal"] {
            let p = PathBuf::from(format!("{}{suffix}", path.display()));
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        Ok(())
    }

    fn handle(&self, workspace_id: &str) -> Result<Arc<WorkspaceHandle>, DbError> {
        self.handle_or_open(workspace_id, false)
    }

    fn handle_or_open(&self, workspace_id: &str, create: bool) -> Result<Arc<WorkspaceHandle>, DbError> {
        let mut map = self.workspaces.lock().expect("workspace map poisoned");
        if let Some(h) = map.get(workspace_id) {
            return Ok(h.clone());
        }
        let path = self.workspace_path(workspace_id);
        if !create && !path.exists() {
            return Err(DbError::UnknownWorkspace(workspace_id.to_string()));
        }
        let conn = Connection::open(&path)?;
        conn.busy_timeout(Duration::from_secs(30))?;
        conn.execute_batch(
            "PRAGMA journal_mode=WAL; PRAGMA synchronous=NORMAL;
             CREATE TABLE IF NOT EXISTS _quarry_state (key TEXT PRIMARY KEY, value TEXT NOT NULL);",
        )?;
        conn.execute(
            &format!("ATTACH DATABASE ?1 AS {CORPUS_SCHEMA}"),
            [sqlite_uri(&self.root.join(CORPUS_FILE))],
        )?;
        let attached: Vec<String> = conn
            .query_row("SELECT value FROM _quarry_state WHERE key = 'attached_sources'", [], |r| r.get::<_, String>(0))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        let tables: Vec<String> = {
            let mut stmt = conn.prepare(
                "SELECT name FROM main.sqlite_master WHERE type = 'table' AND name NOT LIKE '\\_quarry%' ESCAPE '\\' ORDER BY rowid",
            )?;
            let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
            rows.collect::<Result<_, _>>()?
        };
        let auth = Arc::new(Mutex::new(AuthState::default()));
        install_authorizer(&conn, auth.clone());
        let handle = Arc::new(WorkspaceHandle {
            conn: Mutex::new(conn),
            auth,
            meta: RwLock::new(Workspace {
                workspace_id: workspace_id.to_string(),
                attached_sources: attached,
                intermediate_tables: tables,
            }),
            column_types: RwLock::new(HashMap::new()),
        });
        map.insert(workspace_id.to_string(), handle.clone());
        debug!(workspace = workspace_id, "opened workspace");
        Ok(handle)
    }

    fn save_meta(&self, handle: &WorkspaceHandle) -> Result<(), DbError> {
        let attached = serde_json::to_string(&handle.meta.read().expect("workspace meta poisoned").attached_sources)
            .expect("string list serializes");
        self.save_state(&handle.meta.read().expect("workspace meta poisoned").workspace_id, "attached_sources", &attached)
    }

    /// Store an opaque state blob inside the workspace database.
    pub fn save_state(&self, workspace_id: &str, key: &str, value: &str) -> Result<(), DbError> {
        let handle = self.handle(workspace_id)?;
        let conn = handle.conn.lock().expect("workspace connection poisoned");
        handle.auth.lock().expect("auth poisoned").enforce = false;
        conn.execute(
            "INSERT INTO _quarry_state (key, value) VALUES (?1, ?2)
             ON CONFLICT(key) DO UPDATE SET value = excluded.value",
            rusqlite::params![key, value],
        )?;
        Ok(())
    }

    pub fn load_state(&self, workspace_id: &str, key: &str) -> Result<Option<String>, DbError> {
        let handle = self.handle(workspace_id)?;
        let conn = handle.conn.lock().expect("workspace connection poisoned");
        handle.auth.lock().expect("auth poisoned").enforce = false;
        match conn.query_row("SELECT value FROM _quarry_state WHERE key = ?1", [key], |r| r.get::<_, String>(0)) {
            Ok(v) => Ok(Some(v)),
            Err(rusqlite::Error::QueryReturnedNoRows) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn visible_corpus(&self, meta: &Workspace) -> HashSet<String> {
        let catalog = self.catalog.read().expect("catalog poisoned");
        meta.attached_sources
            .iter()
            .filter_map(|d| catalog.datasets.get(d))
            .flatten()
            .cloned()
            .collect()
    }

    /// Corpus tables visible from a workspace, sorted.
    pub fn visible_corpus_tables(&self, workspace_id: &str) -> Result<Vec<TableRef>, DbError> {
        let handle = self.handle(workspace_id)?;
        let meta = handle.meta.read().expect("workspace meta poisoned").clone();
        let visible = self.visible_corpus(&meta);
        let catalog = self.catalog.read().expect("catalog poisoned");
        Ok(catalog.tables.values().filter(|t| visible.contains(&t.table_id)).map(CatalogTable::table_ref).collect())
    }

    // ------------------------------------------------------------------
    // queries

    /// Run a read-only query in a workspace; truncate to `row_limit` rows
    /// when given.
    pub fn execute_query(&self, workspace_id: &str, sql: &str, row_limit: Option<usize>) -> Result<ProbeResult, DbError> {
        let handle = self.handle(workspace_id)?;
        let (result, denied) = self.with_enforced(&handle, |conn| -> Result<ProbeResult, DbError> {
            let body = single_statement(sql).map_err(DbError::SqlError)?;
            let mut stmt = conn.prepare(body).map_err(sql_error)?;
            if !stmt.readonly() {
                return Err(DbError::SqlError(
                    "only read-only statements may be executed here; use persist_as_table to create tables".into(),
                ));
            }
            read_statement(&mut stmt, row_limit)
        });
        result.map_err(|e| self.classify(workspace_id, e, denied))
    }

    /// Run `query` and store its result as a new table in the workspace.
    pub fn persist_as_table(&self, workspace_id: &str, query: &str, new_table_id: &str) -> Result<Persisted, DbError> {
        let handle = self.handle(workspace_id)?;
        self.check_new_table_id(&handle, new_table_id)?;
        let select = single_statement(query).map_err(DbError::SqlError)?;
        let statement = format!("CREATE TABLE main.{} AS {select}", quote_ident(new_table_id));
        let (result, denied) = self.with_enforced(&handle, |conn| -> Result<(u64, Vec<ColumnSpec>), DbError> {
            {
                let stmt = conn.prepare(select).map_err(sql_error)?;
                if !stmt.readonly() {
                    return Err(DbError::SqlError("the defining query of a table must be read-only".into()));
                }
            }
            conn.execute(&statement, []).map_err(sql_error)?;
            let count: i64 = conn
                .query_row(&format!("SELECT count(*) FROM main.{}", quote_ident(new_table_id)), [], |r| r.get(0))
                .map_err(sql_error)?;
            let schema = persisted_schema(conn, select, new_table_id)?;
            Ok((count as u64, schema))
        });
        let inputs: Vec<String> = {
            let auth = handle.auth.lock().expect("auth poisoned");
            auth.reads.iter().filter(|t| *t != new_table_id).cloned().collect()
        };
        let (row_count, schema) = result.map_err(|e| self.classify(workspace_id, e, denied))?;
        handle.column_types.write().expect("types poisoned").insert(new_table_id.to_string(), schema.clone());
        handle.meta.write().expect("workspace meta poisoned").intermediate_tables.push(new_table_id.to_string());
        Ok(Persisted {
            table: TableRef {
                table_id: new_table_id.to_string(),
                source: TableSource::Intermediate,
                row_count,
                column_names: schema.iter().map(|c| c.name.clone()).collect(),
                workspace_id: Some(workspace_id.to_string()),
                dataset_id: None,
            },
            inputs,
            statement,
        })
    }

    /// Execute a recorded `CREATE TABLE ... AS` statement verbatim, under the
    /// same visibility rules as planner queries. Returns the tables it created.
    pub fn replay_statement(&self, workspace_id: &str, statement: &str) -> Result<Vec<String>, DbError> {
        let handle = self.handle(workspace_id)?;
        let head = statement.trim_start().to_ascii_uppercase();
        if !head.starts_with("CREATE TABLE") {
            return Err(DbError::SqlError("only CREATE TABLE ... AS statements can be replayed".into()));
        }
        let (result, denied) = self.with_enforced(&handle, |conn| -> Result<(), DbError> {
            let body = single_statement(statement).map_err(DbError::SqlError)?;
            conn.execute(body, []).map_err(sql_error)?;
            Ok(())
        });
        result.map_err(|e| self.classify(workspace_id, e, denied))?;
        let conn = handle.conn.lock().expect("workspace connection poisoned");
        let all: Vec<String> = {
            let mut stmt = conn.prepare(
                "SELECT name FROM main.sqlite_master WHERE type = 'table' AND name NOT LIKE '\\_quarry%' ESCAPE '\\' ORDER BY rowid",
            )?;
            let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
            rows.collect::<Result<_, _>>()?
        };
        drop(conn);
        let mut meta = handle.meta.write().expect("workspace meta poisoned");
        let created: Vec<String> = all.iter().filter(|t| !meta.intermediate_tables.contains(t)).cloned().collect();
        meta.intermediate_tables.extend(created.iter().cloned());
        Ok(created)
    }

    /// First `n` rows in storage order.
    pub fn sample_rows(&self, t: &TableRef, n: usize) -> Result<Relation, DbError> {
        let sql = format!("SELECT * FROM {{schema}}.{} ORDER BY rowid LIMIT {n}", quote_ident(&t.table_id));
        match &t.workspace_id {
            None => {
                let columns = self
                    .corpus_columns(&t.table_id)
                    .ok_or_else(|| DbError::TableNotFound(t.table_id.clone()))?;
                let reader = self.reader.lock().expect("reader lock poisoned");
                let mut stmt = reader.prepare(&sql.replace("{schema}", CORPUS_SCHEMA))?;
                let mut rel = read_statement(&mut stmt, None)?.relation;
                rel.schema = columns;
                Ok(rel)
            }
            Some(ws) => {
                let handle = self.handle(ws)?;
                if !handle.meta.read().expect("workspace meta poisoned").intermediate_tables.contains(&t.table_id) {
                    return Err(DbError::TableNotFound(t.qualified_id()));
                }
                let conn = handle.conn.lock().expect("workspace connection poisoned");
                handle.auth.lock().expect("auth poisoned").enforce = false;
                let mut stmt = conn.prepare(&sql.replace("{schema}", "main"))?;
                let mut rel = read_statement(&mut stmt, None)?.relation;
                if let Some(types) = handle.column_types.read().expect("types poisoned").get(&t.table_id) {
                    if types.len() == rel.schema.len() {
                        rel.schema = types.clone();
                    }
                }
                Ok(rel)
            }
        }
    }

    /// Resolve a table name as seen from a workspace: intermediates first,
    /// then visible corpus tables.
    pub fn resolve_table(&self, workspace_id: &str, name: &str) -> Result<TableRef, DbError> {
        let handle = self.handle(workspace_id)?;
        let meta = handle.meta.read().expect("workspace meta poisoned").clone();
        if meta.intermediate_tables.iter().any(|t| t == name) {
            let row_count = {
                let conn = handle.conn.lock().expect("workspace connection poisoned");
                handle.auth.lock().expect("auth poisoned").enforce = false;
                conn.query_row(&format!("SELECT count(*) FROM main.{}", quote_ident(name)), [], |r| r.get::<_, i64>(0))?
                    as u64
            };
            let columns = self.table_columns(workspace_id, name)?;
            return Ok(TableRef {
                table_id: name.to_string(),
                source: TableSource::Intermediate,
                row_count,
                column_names: columns.into_iter().map(|c| c.name).collect(),
                workspace_id: Some(workspace_id.to_string()),
                dataset_id: None,
            });
        }
        if let Some(t) = self.corpus_table(name) {
            if self.visible_corpus(&meta).contains(name) {
                return Ok(t);
            }
            return Err(DbError::TableNotVisible(name.to_string()));
        }
        if self.owned_elsewhere(workspace_id, name) {
            return Err(DbError::TableNotVisible(name.to_string()));
        }
        Err(DbError::TableNotFound(name.to_string()))
    }

    /// Columns (with types) of a table visible from a workspace.
    pub fn table_columns(&self, workspace_id: &str, name: &str) -> Result<Vec<ColumnSpec>, DbError> {
        let handle = self.handle(workspace_id)?;
        let meta = handle.meta.read().expect("workspace meta poisoned").clone();
        if meta.intermediate_tables.iter().any(|t| t == name) {
            if let Some(types) = handle.column_types.read().expect("types poisoned").get(name) {
                return Ok(types.clone());
            }
            let conn = handle.conn.lock().expect("workspace connection poisoned");
            handle.auth.lock().expect("auth poisoned").enforce = false;
            let mut stmt = conn.prepare(&format!("SELECT * FROM main.{} LIMIT 0", quote_ident(name)))?;
            let schema = statement_schema(&mut stmt);
            drop(stmt);
            drop(conn);
            handle.column_types.write().expect("types poisoned").insert(name.to_string(), schema.clone());
            return Ok(schema);
        }
        if self.visible_corpus(&meta).contains(name) {
            return self.corpus_columns(name).ok_or_else(|| DbError::TableNotFound(name.to_string()));
        }
        if self.corpus_table(name).is_some() || self.owned_elsewhere(workspace_id, name) {
            return Err(DbError::TableNotVisible(name.to_string()));
        }
        Err(DbError::TableNotFound(name.to_string()))
    }

    fn check_new_table_id(&self, handle: &WorkspaceHandle, id: &str) -> Result<(), DbError> {
        if !valid_table_id(id) {
            return Err(DbError::InvalidIdentifier(id.to_string()));
        }
        let exists = handle.meta.read().expect("workspace meta poisoned").intermediate_tables.iter().any(|t| t.eq_ignore_ascii_case(id))
            || self.catalog.read().expect("catalog poisoned").tables.keys().any(|t| t.eq_ignore_ascii_case(id));
        if exists {
            return Err(DbError::DuplicateTableId(id.to_string()));
        }
        Ok(())
    }

    fn with_enforced<T>(
        &self,
        handle: &WorkspaceHandle,
        f: impl FnOnce(&Connection) -> Result<T, DbError>,
    ) -> (Result<T, DbError>, Option<String>) {
        let meta = handle.meta.read().expect("workspace meta poisoned").clone();
        let visible = self.visible_corpus(&meta);
        let conn = handle.conn.lock().expect("workspace connection poisoned");
        {
            let mut auth = handle.auth.lock().expect("auth poisoned");
            auth.enforce = true;
            auth.visible = visible;
            auth.reads.clear();
            auth.denied = None;
            auth.forbidden = None;
        }
        let result = f(&conn);
        let mut auth = handle.auth.lock().expect("auth poisoned");
        auth.enforce = false;
        let result = match (result, auth.forbidden.take()) {
            (Err(_), Some(what)) => Err(DbError::SqlError(format!("{what} is not permitted"))),
            (r, _) => r,
        };
        (result, auth.denied.take())
    }

    fn owned_elsewhere(&self, workspace_id: &str, table: &str) -> bool {
        let map = self.workspaces.lock().expect("workspace map poisoned");
        map.iter().any(|(id, h)| {
            id != workspace_id
                && h.meta.read().expect("workspace meta poisoned").intermediate_tables.iter().any(|t| t.eq_ignore_ascii_case(table))
        })
    }

    fn classify(&self, workspace_id: &str, err: DbError, denied: Option<String>) -> DbError {
        if let Some(t) = denied {
            return DbError::TableNotVisible(t);
        }
        let DbError::SqlError(msg) = &err else { return err };
        if let Some(name) = msg.strip_prefix("no such table: ") {
            let name = name.trim();
            let bare = name.rsplit('.').next().unwrap_or(name);
            if let Some((schema, _)) = name.split_once('.') {
                if schema != "main" && schema != CORPUS_SCHEMA {
                    return DbError::TableNotVisible(name.to_string());
                }
            }
            if self.owned_elsewhere(workspace_id, bare) {
                return DbError::TableNotVisible(name.to_string());
            }
        }
        if let Some(schema) = msg.strip_prefix("unknown database ") {
            let schema = schema.trim();
            if self.workspace_path(schema).exists() || self.workspaces.lock().expect("workspace map poisoned").contains_key(schema) {
                return DbError::TableNotVisible(schema.to_string());
            }
        }
        err
    }
}

fn sql_error(e: rusqlite::Error) -> DbError {
    match e {
        rusqlite::Error::SqliteFailure(_, Some(msg)) => DbError::SqlError(msg),
        rusqlite::Error::MultipleStatement => DbError::SqlError("only one statement may be executed at a time".into()),
        other => DbError::SqlError(other.to_string()),
    }
}

fn install_authorizer(conn: &Connection, state: Arc<Mutex<AuthState>>) {
    conn.authorizer(Some(move |ctx: AuthContext<'_>| -> Authorization {
        let mut st = state.lock().expect("auth poisoned");
        if !st.enforce {
            return Authorization::Allow;
        }
        let db = ctx.database_name.unwrap_or("main");
        match ctx.action {
            AuthAction::Read { table_name, .. } => {
                if table_name.starts_with(INTERNAL_PREFIX) {
                    st.denied.get_or_insert_with(|| table_name.to_string());
                    return Authorization::Deny;
                }
                if db == CORPUS_SCHEMA && !st.visible.contains(table_name) {
                    st.denied.get_or_insert_with(|| table_name.to_string());
                    return Authorization::Deny;
                }
                if !table_name.starts_with("sqlite_") && !table_name.starts_with("pragma_") {
                    st.reads.insert(table_name.to_string());
                }
                Authorization::Allow
            }
            AuthAction::Attach { .. } => {
                st.forbidden = Some("ATTACH".into());
                Authorization::Deny
            }
            AuthAction::Detach { .. } => {
                st.forbidden = Some("DETACH".into());
                Authorization::Deny
            }
            AuthAction::Pragma { pragma_name, .. } => {
                st.forbidden = Some(format!("PRAGMA {pragma_name}"));
                Authorization::Deny
            }
            AuthAction::CreateTable { .. } | AuthAction::Insert { .. } if db == CORPUS_SCHEMA => {
                st.forbidden = Some("writing to the corpus".into());
                Authorization::Deny
            }
            _ => Authorization::Allow,
        }
    }));
}

fn sqlite_uri(path: &Path) -> String {
    let abs = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
    let mut encoded = String::new();
    for ch in abs.display().to_string().chars() {
        match ch {
            '%' => encoded.push_str("%25"),
            '?' => encoded.push_str("%3f"),
            '#' => encoded.push_str("%23"),
            ' ' => encoded.push_str("%20"),
            c => encoded.push(c),
        }
    }
    format!("file:{encoded}?mode=ro")
}

fn value_from_ref(v: ValueRef<'_>) -> Value {
    match v {
        ValueRef::Null => Value::Null,
        ValueRef::Integer(i) => Value::Integer(i),
        ValueRef::Real(r) => Value::Real(r),
        ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => Value::Text(String::from_utf8_lossy(b).into_owned()),
    }
}

fn statement_schema(stmt: &mut rusqlite::Statement<'_>) -> Vec<ColumnSpec> {
    stmt.columns()
        .iter()
        .map(|c| {
            let ty = c.decl_type().and_then(DeclaredType::from_sql_decl).unwrap_or(DeclaredType::Text);
            ColumnSpec::new(c.name(), ty, format!("column {}", c.name()))
        })
        .collect()
}

/// Column types of a table created from `select`: declarations carried
/// through from source columns win; otherwise the created column's affinity,
/// and failing that the values themselves.
fn persisted_schema(conn: &Connection, select: &str, table: &str) -> Result<Vec<ColumnSpec>, DbError> {
    let carried: Vec<Option<DeclaredType>> = {
        let stmt = conn.prepare(select).map_err(sql_error)?;
        stmt.columns().iter().map(|c| c.decl_type().and_then(DeclaredType::from_sql_decl)).collect()
    };
    let mut stmt = conn.prepare(&format!("SELECT * FROM main.{} LIMIT 200", quote_ident(table))).map_err(sql_error)?;
    let affinity: Vec<Option<String>> = stmt.columns().iter().map(|c| c.decl_type().map(str::to_string)).collect();
    let mut sampled = read_statement(&mut stmt, None)?.relation.schema;
    for (i, col) in sampled.iter_mut().enumerate() {
        let by_affinity = match affinity[i].as_deref() {
            Some("INT") => Some(DeclaredType::Integer),
            Some("REAL") => Some(DeclaredType::Real),
            Some("TEXT") => Some(DeclaredType::Text),
            _ => None,
        };
        if let Some(ty) = carried.get(i).copied().flatten().or(by_affinity) {
            col.declared_type = ty;
        }
    }
    Ok(sampled)
}

fn read_statement(stmt: &mut rusqlite::Statement<'_>, row_limit: Option<usize>) -> Result<ProbeResult, DbError> {
    let mut schema = statement_schema(stmt);
    // NUM is the affinity of computed numeric columns, not a declaration
    let declared: Vec<bool> = stmt
        .columns()
        .iter()
        .map(|c| c.decl_type().is_some_and(|d| d != "NUM" && DeclaredType::from_sql_decl(d).is_some()))
        .collect();
    let n = schema.len();
    let mut rows = Vec::new();
    let mut truncated = false;
    let mut q = stmt.query([]).map_err(sql_error)?;
    while let Some(row) = q.next().map_err(sql_error)? {
        if row_limit.is_some_and(|l| rows.len() == l) {
            truncated = true;
            break;
        }
        rows.push((0..n).map(|i| row.get_ref(i).map(value_from_ref)).collect::<Result<Vec<_>, _>>()?);
    }
    // expression columns have no declaration: type them from their values
    for (i, col) in schema.iter_mut().enumerate() {
        if declared[i] {
            continue;
        }
        let mut ty = None;
        for row in &rows {
            ty = match (&row[i], ty) {
                (Value::Null, t) => t,
                (Value::Integer(_), None) => Some(DeclaredType::Integer),
                (Value::Integer(_), Some(t)) => Some(t),
                (Value::Real(_), None | Some(DeclaredType::Integer)) => Some(DeclaredType::Real),
                (Value::Real(_), Some(t)) => Some(t),
                (Value::Text(_), _) => Some(DeclaredType::Text),
            };
            if ty == Some(DeclaredType::Text) {
                break;
            }
        }
        col.declared_type = ty.unwrap_or(DeclaredType::Text);
    }
    let row_limit_applied = row_limit.map(|l| l as u64).unwrap_or(rows.len() as u64);
    Ok(ProbeResult {
        relation: Relation::new(schema, rows),
        truncated,
        row_limit_applied,
    })
}

fn data_files(path: &Path) -> Result<Vec<(PathBuf, FileFormat)>, DbError> {
    let unreadable = |e: std::io::Error| DbError::UnreadableFile {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let meta = fs::metadata(path).map_err(unreadable)?;
    if meta.is_file() {
        return match FileFormat::of(path) {
            Some(f) => Ok(vec![(path.to_path_buf(), f)]),
            None => Err(DbError::UnreadableFile {
                path: path.display().to_string(),
                message: "not a CSV or Parquet file".into(),
            }),
        };
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path).map_err(unreadable)? {
        let p = entry.map_err(unreadable)?.path();
        if p.is_file() {
            if let Some(f) = FileFormat::of(&p) {
                files.push((p, f));
            }
        }
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(files)
}

fn load_catalog(conn: &Connection) -> Result<Catalog, DbError> {
    let mut catalog = Catalog::default();
    {
        let mut stmt = conn.prepare("SELECT dataset_id FROM _quarry_datasets")?;
        for d in stmt.query_map([], |r| r.get::<_, String>(0))? {
            catalog.datasets.insert(d?, Vec::new());
        }
    }
    let mut stmt =
        conn.prepare("SELECT table_id, dataset_id, row_count, columns, generation FROM _quarry_tables ORDER BY rowid")?;
    let rows = stmt.query_map([], |r| {
        Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, i64>(2)?, r.get::<_, String>(3)?, r.get::<_, i64>(4)?))
    })?;
    for row in rows {
        let (table_id, dataset_id, row_count, columns, generation) = row?;
        let columns: Vec<ColumnSpec> = serde_json::from_str(&columns).map_err(|e| DbError::Storage(e.to_string()))?;
        catalog.next_generation = catalog.next_generation.max(generation as u64);
        catalog.datasets.entry(dataset_id.clone()).or_default().push(table_id.clone());
        catalog.tables.insert(
            table_id.clone(),
            CatalogTable {
                table_id,
                dataset_id,
                row_count: row_count as u64,
                columns,
                generation: generation as u64,
            },
        );
    }
    Ok(catalog)
}

fn ingest_file(
    conn: &Connection,
    file: &Path,
    format: FileFormat,
    table_id: &str,
    dataset_id: &str,
    generation: u64,
) -> Result<CatalogTable, DbError> {
    let table = ingest_into(conn, "main", file, format, table_id, dataset_id, generation)?;
    conn.execute(
        "INSERT INTO _quarry_tables (table_id, dataset_id, row_count, columns, generation) VALUES (?1, ?2, ?3, ?4, ?5)",
        rusqlite::params![
            table.table_id,
            table.dataset_id,
            table.row_count as i64,
            serde_json::to_string(&table.columns).expect("columns serialize"),
            generation as i64
        ],
    )?;
    Ok(table)
}

fn ingest_into(
    conn: &Connection,
    schema: &str,
    file: &Path,
    format: FileFormat,
    table_id: &str,
    owner: &str,
    generation: u64,
) -> Result<CatalogTable, DbError> {
    let headers = ingest::read_header(file, format)?;
    let arity = headers.len();
    let mut inference = vec![TypeInference::default(); arity];
    ingest::for_each_row(file, format, arity, |cells| {
        for (t, c) in inference.iter_mut().zip(cells) {
            if let Some(v) = c {
                t.observe(v);
            }
        }
        Ok(())
    })?;
    let columns: Vec<ColumnSpec> = headers
        .iter()
        .zip(&inference)
        .map(|(h, t)| ColumnSpec::new(h.clone(), t.resolve(), format!("{h} (from {})", file.file_name().unwrap_or_default().to_string_lossy())))
        .collect();
    let defs: Vec<String> = columns.iter().map(|c| format!("{} {}", quote_ident(&c.name), c.declared_type.sql_name())).collect();
    conn.execute(
        &format!("CREATE TABLE {schema}.{} ({})", quote_ident(table_id), defs.join(", ")),
        [],
    )?;
    let placeholders = vec!["?"; arity].join(", ");
    let mut insert = conn.prepare(&format!("INSERT INTO {schema}.{} VALUES ({placeholders})", quote_ident(table_id)))?;
    let types: Vec<DeclaredType> = columns.iter().map(|c| c.declared_type).collect();
    let mut row_count = 0u64;
    let mut values: Vec<rusqlite::types::Value> = Vec::with_capacity(arity);
    ingest::for_each_row(file, format, arity, |cells| {
        values.clear();
        values.extend(cells.iter().zip(&types).map(|(c, t)| match ingest::coerce(*c, *t) {
            Value::Null => rusqlite::types::Value::Null,
            Value::Integer(i) => rusqlite::types::Value::Integer(i),
            Value::Real(r) => rusqlite::types::Value::Real(r),
            Value::Text(s) => rusqlite::types::Value::Text(s),
        }));
        insert.execute(params_from_iter(values.iter()))?;
        row_count += 1;
        Ok(())
    })?;
    Ok(CatalogTable {
        table_id: table_id.to_string(),
        dataset_id: owner.to_string(),
        row_count,
        columns,
        generation,
    })
}
