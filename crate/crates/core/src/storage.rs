//! File persistence primitives: append-only JSON-lines logs, atomic
//! snapshot replacement, and fail points for crash testing.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt entry in {path} at line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("encoding error: {0}")]
    Encode(String),
    #[error("simulated crash at fail point")]
    Interrupted,
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Durability {
    /// fsync after every append and snapshot.
    #[default]
    Fsync,
    /// Flush to the OS only. For tests and throwaway runs.
    Flush,
}

/// Counts durable writes and, when armed, fails the N-th one before it
/// touches disk. Everything the process holds in memory after that point
/// must be discarded, exactly as after a crash.
#[derive(Debug, Default)]
pub struct FailPoint {
    remaining: AtomicI64,
    writes: AtomicI64,
}

impl FailPoint {
    pub fn disarmed() -> Self {
        FailPoint {
            remaining: AtomicI64::new(-1),
            writes: AtomicI64::new(0),
        }
    }

    /// Fail the write after `n` successful ones.
    pub fn after(n: u64) -> Self {
        FailPoint {
            remaining: AtomicI64::new(n as i64),
            writes: AtomicI64::new(0),
        }
    }

    pub fn hit(&self) -> Result<(), StoreError> {
        let left = self.remaining.load(Ordering::SeqCst);
        if left == 0 {
            return Err(StoreError::Interrupted);
        }
        if left > 0 {
            self.remaining.fetch_sub(1, Ordering::SeqCst);
        }
        self.writes.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    /// Durable writes performed so far.
    pub fn writes(&self) -> u64 {
        self.writes.load(Ordering::SeqCst) as u64
    }
}

fn sync_dir(dir: &Path) -> Result<(), StoreError> {
    // Directory fsync is unsupported on some platforms; ignore those errors.
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

/// Replaces `path` with `bytes` via write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8], durability: Durability) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| StoreError::io(&tmp, e))?;
        if durability == Durability::Fsync {
            f.sync_all().map_err(|e| StoreError::io(&tmp, e))?;
        }
    }
    fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))?;
    if durability == Durability::Fsync {
        if let Some(parent) = path.parent() {
            sync_dir(parent)?;
        }
    }
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, StoreError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| StoreError::Corrupt {
                path: path.to_path_buf(),
                line: e.line(),
                reason: e.to_string(),
            }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(StoreError::io(path, e)),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T, durability: Durability) -> Result<(), StoreError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| StoreError::Encode(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes, durability)
}

/// Reads newline-terminated lines, dropping a trailing partial line left by
/// an interrupted append and truncating the file back to the last complete
/// line.
pub(crate) fn read_complete_lines(path: &Path) -> Result<Vec<String>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(StoreError::io(path, e)),
    };
    let mut reader = BufReader::new(file);
    let mut lines = Vec::new();
    let mut good_len = 0u64;
    let mut buf = String::new();
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(|e| StoreError::io(path, e))?;
        if n == 0 {
            break;
        }
        if !buf.ends_with('\n') {
            break;
        }
        good_len += n as u64;
        lines.push(buf.trim_end_matches(['\n', '\r']).to_string());
    }
    let actual = fs::metadata(path).map_err(|e| StoreError::io(path, e))?.len();
    if actual != good_len {
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| StoreError::io(path, e))?;
        f.set_len(good_len).map_err(|e| StoreError::io(path, e))?;
    }
    Ok(lines)
}

/// Append-only log of JSON values, one per line.
#[derive(Debug)]
pub struct AppendLog<T> {
    path: PathBuf,
    file: File,
    durability: Durability,
    _marker: PhantomData<fn(T) -> T>,
}

impl<T: Serialize + DeserializeOwned> AppendLog<T> {
    /// Opens (creating if needed) and returns the existing entries.
    pub fn open(path: impl Into<PathBuf>, durability: Durability) -> Result<(Self, Vec<T>), StoreError> {
        let path = path.into();
        let lines = read_complete_lines(&path)?;
        let mut entries = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let value = serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
                path: path.clone(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            entries.push(value);
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(&path)
            .map_err(|e| StoreError::io(&path, e))?;
        file.seek(SeekFrom::End(0)).map_err(|e| StoreError::io(&path, e))?;
        Ok((
            AppendLog {
                path,
                file,
                durability,
                _marker: PhantomData,
            },
            entries,
        ))
    }

    pub fn append(&mut self, value: &T) -> Result<(), StoreError> {
        self.append_all(std::slice::from_ref(value))
    }

    /// Appends entries and syncs once.
    pub fn append_all(&mut self, values: &[T]) -> Result<(), StoreError> {
        if values.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for v in values {
            serde_json::to_writer(&mut buf, v).map_err(|e| StoreError::Encode(e.to_string()))?;
            buf.push(b'\n');
        }
        self.file.write_all(&buf).map_err(|e| StoreError::io(&self.path, e))?;
        match self.durability {
            Durability::Fsync => self.file.sync_data(),
            Durability::Flush => self.file.flush(),
        }
        .map_err(|e| StoreError::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
