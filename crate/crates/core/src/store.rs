//! Append-only generation log, one JSON record per line.
//!
//! A record is committed once its trailing newline is on disk. A file that
//! ends without one has a torn tail; readers skip it and report its length,
//! and the writer cuts it off before appending.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub timestamp: u64,
    pub seq: u64,
    pub index: u64,
    pub group: u64,
    pub nonce: u64,
    /// `None` for generations; the attack label for derived tensors.
    #[serde(default)]
    pub attack: Option<String>,
    pub fingerprint: String,
    /// Opaque hash of the caller's prompt label.
    #[serde(default)]
    pub label_hash: Option<String>,
    #[serde(default)]
    pub path: Option<String>,
}

impl GenerationRecord {
    pub fn order_key(&self) -> (u64, u64) {
        (self.timestamp, self.seq)
    }
}

pub fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LogContents {
    pub records: Vec<GenerationRecord>,
    /// Bytes after the last complete line.
    pub truncated_tail: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogQuery {
    Index(u64),
    Time(RangeInclusive<u64>),
}

impl LogQuery {
    pub fn matches(&self, r: &GenerationRecord) -> bool {
        match self {
            LogQuery::Index(i) => r.index == *i,
            LogQuery::Time(range) => range.contains(&r.timestamp),
        }
    }
}

/// Reads every committed record. A missing file is an empty log.
pub fn read_log(path: &Path) -> Result<LogContents> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(LogContents::default()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut reader = BufReader::new(file);
    let mut out = LogContents::default();
    let mut line = Vec::new();
    let mut lineno = 0usize;
    loop {
        line.clear();
        let n = reader.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        if line.last() != Some(&b'\n') {
            out.truncated_tail = n;
            break;
        }
        let text = std::str::from_utf8(&line[..n - 1]).map_err(|e| Error::Format {
            what: "generation log",
            detail: format!("line {lineno}: {e}"),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "generation log",
            detail: format!("line {lineno}: {e}"),
        })?;
        out.records.push(rec);
    }
    Ok(out)
}

pub fn query_log(path: &Path, q: &LogQuery) -> Result<Vec<GenerationRecord>> {
    let mut hits: Vec<_> = read_log(path)?.records.into_iter().filter(|r| q.matches(r)).collect();
    hits.sort_by_key(GenerationRecord::order_key);
    Ok(hits)
}

/// The single writer of a log file.
#[derive(Debug)]
pub struct LogWriter {
    path: PathBuf,
    file: File,
    next_seq: u64,
    last_timestamp: u64,
    /// Torn bytes removed when the log was opened.
    pub repaired_tail: usize,
}

impl LogWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let contents = read_log(path)?;
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if contents.truncated_tail > 0 {
            let len = file.seek(SeekFrom::End(0)).map_err(|e| Error::io(path, e))?;
            file.set_len(len - contents.truncated_tail as u64).map_err(|e| Error::io(path, e))?;
        }
        let last = contents.records.iter().map(GenerationRecord::order_key).max();
        Ok(Self {
            path: path.to_path_buf(),
            file,
            next_seq: last.map_or(0, |(_, s)| s + 1),
            last_timestamp: last.map_or(0, |(t, _)| t),
            repaired_tail: contents.truncated_tail,
        })
    }

    /// Assigns `seq`, clamps `timestamp` so the log stays ordered, and
    /// writes the record with one `write_all` followed by a sync.
    pub fn append(&mut self, mut rec: GenerationRecord) -> Result<GenerationRecord> {
        rec.seq = self.next_seq;
        rec.timestamp = rec.timestamp.max(self.last_timestamp);
        let mut line = serde_json::to_vec(&rec)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        self.file.sync_data().map_err(|e| Error::io(&self.path, e))?;
        self.next_seq += 1;
        self.last_timestamp = rec.timestamp;
        Ok(rec)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// True when the file's bytes are exactly a sequence of complete lines.
pub fn is_clean(path: &Path) -> Result<bool> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    Ok(bytes.is_empty() || bytes.last() == Some(&b'\n'))
}
