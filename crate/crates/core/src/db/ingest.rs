//! Reading CSV and Parquet files as rows of optional strings, and coercing
//! physical column types into the six-type vocabulary.

use std::fs::File;
use std::path::Path;

use parquet::file::reader::{FileReader, SerializedFileReader};
use parquet::record::Field;

use super::DbError;
use crate::model::DeclaredType;
use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum FileFormat {
    Csv,
    Parquet,
}

impl FileFormat {
    pub(crate) fn of(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(FileFormat::Csv),
            "parquet" | "pq" => Some(FileFormat::Parquet),
            _ => None,
        }
    }
}

fn unreadable(path: &Path, e: impl std::fmt::Display) -> DbError {
    DbError::UnreadableFile {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Header names of a data file.
pub(crate) fn read_header(path: &Path, format: FileFormat) -> Result<Vec<String>, DbError> {
    let raw = match format {
        FileFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .flexible(false)
                .from_path(path)
                .map_err(|e| unreadable(path, e))?;
            rdr.headers()
                .map_err(|e| unreadable(path, e))?
                .iter()
                .map(|s| s.to_string())
                .collect()
        }
        FileFormat::Parquet => {
            let reader = parquet_reader(path)?;
            let schema = reader.metadata().file_metadata().schema_descr_ptr();
            schema
                .columns()
                .iter()
                .map(|c| c.name().to_string())
                .collect()
        }
    };
    Ok(normalize_headers(raw))
}

/// Visit every data row as optional strings (`None` = empty/null cell).
pub(crate) fn for_each_row(
    path: &Path,
    format: FileFormat,
    arity: usize,
    mut f: impl FnMut(&[Option<&str>]) -> Result<(), DbError>,
) -> Result<(), DbError> {
    match format {
        FileFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .flexible(false)
                .from_path(path)
                .map_err(|e| unreadable(path, e))?;
            let mut record = csv::StringRecord::new();
            loop {
                match rdr.read_record(&mut record) {
                    Ok(false) => break,
                    Ok(true) => {}
                    Err(e) => return Err(unreadable(path, e)),
                }
                let mut cells: Vec<Option<&str>> = Vec::with_capacity(arity);
                cells.extend(record.iter().map(|s| if s.is_empty() { None } else { Some(s) }));
                cells.resize(arity, None);
                f(&cells)?;
            }
        }
        FileFormat::Parquet => {
            let reader = parquet_reader(path)?;
            let rows = reader.get_row_iter(None).map_err(|e| unreadable(path, e))?;
            let mut owned: Vec<Option<String>> = Vec::with_capacity(arity);
            for row in rows {
                let row = row.map_err(|e| unreadable(path, e))?;
                owned.clear();
                owned.extend(row.get_column_iter().map(|(_, field)| field_text(field)));
                owned.resize(arity, None);
                let view: Vec<Option<&str>> = owned.iter().map(|c| c.as_deref()).collect();
                f(&view)?;
            }
        }
    }
    Ok(())
}

fn parquet_reader(path: &Path) -> Result<SerializedFileReader<File>, DbError> {
    let file = File::open(path).map_err(|e| unreadable(path, e))?;
    SerializedFileReader::new(file).map_err(|e| unreadable(path, e))
}

fn field_text(field: &Field) -> Option<String> {
    match field {
        Field::Null => None,
        Field::Str(s) if s.is_empty() => None,
        Field::Str(s) => Some(s.clone()),
        Field::Bool(b) => Some(b.to_string()),
        Field::Byte(v) => Some(v.to_string()),
        Field::Short(v) => Some(v.to_string()),
        Field::Int(v) => Some(v.to_string()),
        Field::Long(v) => Some(v.to_string()),
        Field::UByte(v) => Some(v.to_string()),
        Field::UShort(v) => Some(v.to_string()),
        Field::UInt(v) => Some(v.to_string()),
        Field::ULong(v) => Some(v.to_string()),
        Field::Float(v) => Some(v.to_string()),
        Field::Double(v) => Some(v.to_string()),
        Field::Bytes(b) => Some(String::from_utf8_lossy(b.data()).into_owned()),
        // dates, timestamps, decimals, nested values: their display form
        other => Some(other.to_string().trim_matches('"').to_string()),
    }
}

/// Trimmed, non-empty, unique column names.
pub(crate) fn normalize_headers(raw: Vec<String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(raw.len());
    for (i, h) in raw.into_iter().enumerate() {
        let base = {
            let t = h.trim().trim_start_matches('\u{feff}').replace('\0', "");
            if t.is_empty() {
                format!("column_{}", i + 1)
            } else {
                t
            }
        };
        let mut name = base.clone();
        let mut n = 2;
        while out.iter().any(|o| o.eq_ignore_ascii_case(&name)) {
            name = format!("{base}_{n}");
            n += 1;
        }
        out.push(name);
    }
    out
}

/// Derive a table identifier from a file stem.
pub(crate) fn table_id_from_stem(stem: &str) -> String {
    let mut id: String = stem
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    if id.is_empty() || id.starts_with(|c: char| c.is_ascii_digit()) {
        id.insert_str(0, "t_");
    }
    id
}

/// Streaming type inference for one column.
#[derive(Debug, Clone)]
pub(crate) struct TypeInference {
    int: bool,
    real: bool,
    boolean: bool,
    date: bool,
    timestamp: bool,
    seen: bool,
}

impl Default for TypeInference {
    fn default() -> Self {
        Self {
            int: true,
            real: true,
            boolean: true,
            date: true,
            timestamp: true,
            seen: false,
        }
    }
}

impl TypeInference {
    pub(crate) fn observe(&mut self, v: &str) {
        self.seen = true;
        if self.int && !is_integer(v) {
            self.int = false;
        }
        if self.real && !is_real(v) {
            self.real = false;
        }
        if self.boolean && !(v.eq_ignore_ascii_case("true") || v.eq_ignore_ascii_case("false")) {
            self.boolean = false;
        }
        if self.date && !is_date(v) {
            self.date = false;
        }
        if self.timestamp && !is_timestamp(v) {
            self.timestamp = false;
        }
    }

    pub(crate) fn resolve(&self) -> DeclaredType {
        if !self.seen {
            DeclaredType::Text
        } else if self.int {
            DeclaredType::Integer
        } else if self.real {
            DeclaredType::Real
        } else if self.boolean {
            DeclaredType::Boolean
        } else if self.date {
            DeclaredType::Date
        } else if self.timestamp {
            DeclaredType::Timestamp
        } else {
            DeclaredType::Text
        }
    }
}

// Leading zeros (zip codes, ids) keep a column textual.
fn is_integer(v: &str) -> bool {
    let digits = v.strip_prefix('-').unwrap_or(v);
    !digits.is_empty()
        && digits.len() <= 18
        && digits.bytes().all(|b| b.is_ascii_digit())
        && !(digits.len() > 1 && digits.starts_with('0'))
}

fn is_real(v: &str) -> bool {
    let digits = v.strip_prefix('-').unwrap_or(v);
    if digits.len() > 1 && digits.starts_with('0') && digits.bytes().all(|b| b.is_ascii_digit()) {
        return false;
    }
    if v.is_empty() || !v.bytes().all(|b| b.is_ascii_digit() || b"+-.eE".contains(&b)) {
        return false;
    }
    if !v.bytes().any(|b| b.is_ascii_digit()) {
        return false;
    }
    v.parse::<f64>().map(f64::is_finite).unwrap_or(false)
}

fn is_date(v: &str) -> bool {
    v.len() == 10
        && v.as_bytes()[4] == b'-'
        && v.as_bytes()[7] == b'-'
        && chrono::NaiveDate::parse_from_str(v, "%Y-%m-%d").is_ok()
}

fn is_timestamp(v: &str) -> bool {
    if v.len() < 19 || !is_date(&v[..10]) {
        return false;
    }
    chrono::DateTime::parse_from_rfc3339(v).is_ok()
        || chrono::NaiveDateTime::parse_from_str(v, "%Y-%m-%dT%H:%M:%S%.f").is_ok()
        || chrono::NaiveDateTime::parse_from_str(v, "%Y-%m-%d %H:%M:%S%.f").is_ok()
}

/// Convert a raw cell to the stored value for the column's type.
pub(crate) fn coerce(raw: Option<&str>, ty: DeclaredType) -> Value {
    let Some(v) = raw else { return Value::Null };
    match ty {
        DeclaredType::Integer => v.parse().map(Value::Integer).unwrap_or(Value::Null),
        DeclaredType::Real => v.parse().map(Value::Real).unwrap_or(Value::Null),
        DeclaredType::Boolean => Value::Integer(v.eq_ignore_ascii_case("true") as i64),
        DeclaredType::Text | DeclaredType::Date | DeclaredType::Timestamp => {
            Value::Text(v.to_string())
        }
    }
}
