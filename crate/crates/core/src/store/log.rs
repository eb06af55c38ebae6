//! Append-only JSON-lines log with crash-tolerant replay.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::StoreError;

pub struct JsonLog {
    path: PathBuf,
    file: File,
}

impl JsonLog {
    /// Opens (creating if needed) and replays every complete line.
    ///
    /// A trailing line without its newline is the remains of an interrupted
    /// append: it is dropped and the file truncated back to the last complete
    /// record so later appends start on a clean boundary.
    pub fn open<T: DeserializeOwned>(
        path: &Path,
        restricted: bool,
    ) -> Result<(Self, Vec<T>), StoreError> {
        let mut options = OpenOptions::new();
        options.read(true).append(true).create(true);
        #[cfg(unix)]
        if restricted {
            use std::os::unix::fs::OpenOptionsExt;
            options.mode(0o600);
        }
        #[cfg(not(unix))]
        let _ = restricted;
        let file = options.open(path)?;
        #[cfg(unix)]
        if restricted {
            use std::os::unix::fs::PermissionsExt;
            file.set_permissions(std::fs::Permissions::from_mode(0o600))?;
        }
        let mut reader = BufReader::new(&file);
        let mut records = Vec::new();
        let mut good_len = 0u64;
        let mut line = String::new();
        let mut line_no = 0usize;
        loop {
            line.clear();
            let n = read_line_lossless(&mut reader, &mut line)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            if !line.ends_with('\n') {
                log::warn!("{}: dropping incomplete trailing record", path.display());
                break;
            }
            let record = serde_json::from_str(line.trim_end()).map_err(|e| StoreError::CorruptLog {
                file: path.display().to_string(),
                line: line_no,
                reason: e.to_string(),
            })?;
            records.push(record);
            good_len += n as u64;
        }
        drop(reader);
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
        }
        let mut file = file;
        file.seek(SeekFrom::End(0))?;
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            records,
        ))
    }

    /// Writes one record and flushes it to the OS before returning.
    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(record).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        Ok(())
    }

    pub fn sync(&self) -> Result<(), StoreError> {
        self.file.sync_data()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Like `read_line`, but a torn multi-byte sequence at EOF is not an error.
fn read_line_lossless(reader: &mut impl BufRead, out: &mut String) -> io::Result<usize> {
    let mut buf = Vec::new();
    let n = reader.read_until(b'\n', &mut buf)?;
    out.push_str(&String::from_utf8_lossy(&buf));
    Ok(n)
}
