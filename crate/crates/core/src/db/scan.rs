//! Corpus-wide keyword scan.
//!
//! Each corpus table gets a lowercase "shadow" file holding the text cast of
//! every non-null cell in storage order, NUL-terminated. Shadows are built on
//! first use, named by the table's ingest generation, and scanned in fixed
//! size chunks so memory stays flat regardless of corpus size.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use memchr::memmem::Finder;
use serde::{Deserialize, Serialize};

use super::{CatalogTable, DbError};
use crate::value::quote_ident;

pub const MAX_KEYWORDS: usize = 32;
pub const MAX_KEYWORD_CHARS: usize = 128;
const CHUNK: usize = 8 << 20;

/// Raw match counts for one (table, keyword) pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordHits {
    /// Cells whose value contains the keyword.
    pub tf_cells: u64,
    /// Column names containing the keyword.
    pub tf_colnames: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContentScan {
    /// Normalized keywords, in the order of the per-table hit vectors.
    pub keywords: Vec<String>,
    /// Set when keywords were dropped or shortened to fit the scan limits.
    pub truncated: bool,
    pub tables: BTreeMap<String, Vec<KeywordHits>>,
}

impl ContentScan {
    pub fn hits(&self, table: &str, keyword: &str) -> Option<KeywordHits> {
        let k = self.keywords.iter().position(|x| x == &normalize_keyword(keyword).0)?;
        self.tables.get(table).map(|h| h[k])
    }
}

/// Lowercase, NUL-free, at most [`MAX_KEYWORD_CHARS`] characters. The flag
/// reports whether the keyword had to be shortened.
pub fn normalize_keyword(raw: &str) -> (String, bool) {
    let lowered = raw.replace('\0', "").to_lowercase();
    let mut chars = lowered.chars();
    let kept: String = chars.by_ref().take(MAX_KEYWORD_CHARS).collect();
    let cut = chars.next().is_some();
    (kept, cut)
}

#[derive(Default)]
pub(crate) struct ShadowStore {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ShadowStore {
    pub(crate) fn new(dir: PathBuf) -> Self {
        Self {
            dir,
            locks: Mutex::new(HashMap::new()),
        }
    }

    fn path_for(&self, table: &CatalogTable) -> PathBuf {
        self.dir
            .join(format!("{}.{}.lc", table.table_id, table.generation))
    }

    /// Shadow file for `table`, building it if absent.
    pub(crate) fn ensure(
        &self,
        table: &CatalogTable,
        corpus: &rusqlite::Connection,
    ) -> Result<PathBuf, DbError> {
        let path = self.path_for(table);
        if path.exists() {
            return Ok(path);
        }
        let lock = {
            let mut locks = self.locks.lock().expect("shadow lock map poisoned");
            locks.entry(table.table_id.clone()).or_default().clone()
        };
        let _guard = lock.lock().expect("shadow build lock poisoned");
        if path.exists() {
            return Ok(path);
        }
        fs::create_dir_all(&self.dir)?;
        self.remove_stale(&table.table_id)?;
        let tmp = path.with_extension("lc.tmp");
        build_shadow(table, corpus, &tmp)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    fn remove_stale(&self, table_id: &str) -> Result<(), DbError> {
        let prefix = format!("{table_id}.");
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(rest) = name.strip_prefix(&prefix) {
                // "<generation>.lc": only digits before the extension
                if rest.split('.').next().is_some_and(|g| g.bytes().all(|b| b.is_ascii_digit())) {
                    fs::remove_file(entry.path())?;
                }
            }
        }
        Ok(())
    }

    pub(crate) fn invalidate(&self, table_id: &str) -> Result<(), DbError> {
        if self.dir.exists() {
            self.remove_stale(table_id)?;
        }
        Ok(())
    }
}

fn build_shadow(
    table: &CatalogTable,
    corpus: &rusqlite::Connection,
    out: &Path,
) -> Result<(), DbError> {
    let mut w = BufWriter::with_capacity(1 << 20, File::create(out)?);
    if !table.columns.is_empty() {
        let casts: Vec<String> = table
            .columns
            .iter()
            .map(|c| format!("CAST({} AS TEXT)", quote_ident(&c.name)))
            .collect();
        let sql = format!(
            "SELECT {} FROM corpus.{} ORDER BY rowid",
            casts.join(", "),
            quote_ident(&table.table_id)
        );
        let mut stmt = corpus.prepare(&sql)?;
        let n = table.columns.len();
        let mut rows = stmt.query([])?;
        let mut lowered = String::new();
        while let Some(row) = rows.next()? {
            for i in 0..n {
                let cell = row.get_ref(i)?;
                let Some(text) = cell.as_str_or_null().map_err(|e| DbError::Storage(e.to_string()))? else {
                    continue;
                };
                lowered.clear();
                for ch in text.chars() {
                    if ch == '\0' {
                        lowered.push(' ');
                    } else {
                        lowered.extend(ch.to_lowercase());
                    }
                }
                w.write_all(lowered.as_bytes())?;
                w.write_all(b"\0")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Count, per keyword, the NUL-terminated cells of a shadow file containing
/// it.
pub(crate) fn scan_shadow(path: &Path, keywords: &[String]) -> Result<Vec<u64>, DbError> {
    let finders: Vec<Finder<'_>> = keywords.iter().map(|k| Finder::new(k.as_bytes())).collect();
    let mut counts = vec![0u64; keywords.len()];
    let mut file = File::open(path)?;
    // small shadows get a buffer their own size rather than a full chunk
    let chunk = CHUNK.min(file.metadata()?.len() as usize + 1);
    let mut buf: Vec<u8> = Vec::with_capacity(chunk + 4096);
    let mut carry = 0usize;
    let mut eof = false;
    while !eof {
        buf.resize(carry + chunk, 0);
        let mut filled = carry;
        while filled < buf.len() {
            let n = file.read(&mut buf[filled..])?;
            if n == 0 {
                eof = true;
                break;
            }
            filled += n;
        }
        buf.truncate(filled);
        let complete = match memchr::memrchr(0, &buf) {
            Some(i) => i + 1,
            None if eof => buf.len(),
            None => {
                // one cell larger than the chunk: keep reading
                carry = buf.len();
                continue;
            }
        };
        let region = &buf[..complete];
        for (finder, count) in finders.iter().zip(counts.iter_mut()) {
            *count += count_cells(region, finder);
        }
        buf.drain(..complete);
        carry = buf.len();
    }
    Ok(counts)
}

fn count_cells(region: &[u8], finder: &Finder<'_>) -> u64 {
    if finder.needle().is_empty() {
        return 0;
    }
    let mut count = 0;
    let mut pos = 0;
    while pos < region.len() {
        let Some(off) = finder.find(&region[pos..]) else { break };
        count += 1;
        let hit = pos + off;
        pos = match memchr::memchr(0, &region[hit..]) {
            Some(end) => hit + end + 1,
            None => region.len(),
        };
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_cells_not_occurrences() {
        let region = b"aaa\0xa\0b\0aa a\0";
        let f = Finder::new(b"a");
        assert_eq!(count_cells(region, &f), 3);
        let f = Finder::new(b"aa");
        assert_eq!(count_cells(region, &f), 2);
        let f = Finder::new(b"zz");
        assert_eq!(count_cells(region, &f), 0);
    }

    #[test]
    fn keyword_normalization() {
        assert_eq!(normalize_keyword("Cook County"), ("cook county".into(), false));
        let long = "x".repeat(200);
        let (k, cut) = normalize_keyword(&long);
        assert_eq!(k.len(), MAX_KEYWORD_CHARS);
        assert!(cut);
    }

    #[test]
    fn chunk_boundaries_do_not_split_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.lc");
        let mut data = Vec::new();
        let mut expected = 0;
        for i in 0..1_500_000u32 {
            let cell = if i % 7 == 0 {
                expected += 1;
                format!("row {i} radioactive")
            } else {
                format!("row {i}")
            };
            data.extend_from_slice(cell.as_bytes());
            data.push(0);
        }
        fs::write(&path, &data).unwrap();
        assert!(data.len() > CHUNK);
        let counts = scan_shadow(&path, &["radioactive".into(), "row 1".into()]).unwrap();
        assert_eq!(counts[0], expected);
        let row1 = (0..1_500_000u32).filter(|i| format!("row {i}").contains("row 1")).count();
        assert_eq!(counts[1], row1 as u64);
    }
}
