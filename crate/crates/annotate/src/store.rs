use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One line of the ratings log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredRating {
    pub evaluator_id: String,
    pub question_id: String,
    pub score: u8,
    pub task_id: String,
    /// RFC 3339, UTC.
    pub timestamp: String,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: line {line}: {message}", .path.display())]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Append-only JSON Lines file of ratings.
#[derive(Debug)]
pub struct RatingStore {
    path: PathBuf,
    file: File,
}

impl RatingStore {
    /// Opens (or creates) the log and returns the ratings already in it.
    ///
    /// A final line without a newline is an append that never completed and
    /// therefore was never acknowledged; it is cut off.
    pub fn open(path: &Path) -> Result<(Self, Vec<StoredRating>), StoreError> {
        let io_err = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        let text = match std::fs::read(path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(e)),
        };
        let complete = text.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);

        let mut ratings = Vec::new();
        for (i, line) in text[..complete].split(|&b| b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let rating = serde_json::from_slice(line).map_err(|e| StoreError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            ratings.push(rating);
        }

        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        if complete < text.len() {
            tracing::warn!(path = %path.display(), bytes = text.len() - complete, "dropping torn final line");
            file.set_len(complete as u64).map_err(io_err)?;
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            ratings,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one line and waits for it to reach the disk.
    pub fn append(&mut self, rating: &StoredRating) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(rating).expect("rating serializes");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.sync_data())
            .map_err(|source| StoreError::Io {
                path: self.path.clone(),
                source,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rating(task: &str) -> StoredRating {
        StoredRating {
            evaluator_id: "e".into(),
            question_id: "q".into(),
            score: 1,
            task_id: task.into(),
            timestamp: "2026-01-01T00:00:00.000Z".into(),
        }
    }

    #[test]
    fn appended_ratings_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratings.jsonl");
        let (mut store, existing) = RatingStore::open(&path).unwrap();
        assert!(existing.is_empty());
        store.append(&rating("t1")).unwrap();
        store.append(&rating("t2")).unwrap();
        drop(store);
        let (_, loaded) = RatingStore::open(&path).unwrap();
        assert_eq!(loaded, [rating("t1"), rating("t2")]);
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratings.jsonl");
        let mut text = serde_json::to_string(&rating("t1")).unwrap();
        text.push_str("\n{\"evaluator_id\":\"e\",\"quest");
        std::fs::write(&path, text).unwrap();
        let (mut store, loaded) = RatingStore::open(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        store.append(&rating("t2")).unwrap();
        let (_, loaded) = RatingStore::open(&path).unwrap();
        assert_eq!(loaded, [rating("t1"), rating("t2")]);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratings.jsonl");
        std::fs::write(&path, "garbage\n").unwrap();
        assert!(matches!(
            RatingStore::open(&path),
            Err(StoreError::Corrupt { line: 1, .. })
        ));
    }
}
