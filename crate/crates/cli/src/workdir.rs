//! Work-dir lock and staged outputs.
//!
//! Outputs are written to `<name>.partial` siblings and renamed into place only
//! when the whole command succeeds; a failed command leaves no partial files.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::CliError;

pub const LOCK_FILE: &str = ".ccdf.lock";

/// Exclusive claim on a work dir, released on drop.
#[derive(Debug)]
pub struct Lock {
    path: PathBuf,
}

impl Lock {
    pub fn acquire(work_dir: &Path) -> Result<Lock, CliError> {
        fs::create_dir_all(work_dir).map_err(|e| CliError::write(work_dir, e))?;
        let path = work_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(CliError::write(&path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Outputs of one command, committed together.
#[derive(Debug, Default)]
pub struct Staged {
    files: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

fn partial(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

impl Staged {
    /// Reserves `path` and returns the temporary path to write instead.
    pub fn reserve(&mut self, path: &Path) -> Result<PathBuf, CliError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::write(dir, e))?;
        }
        let tmp = partial(path);
        self.files.push((tmp.clone(), path.to_path_buf()));
        Ok(tmp)
    }

    /// Writes one output through a buffered writer.
    pub fn write<F>(&mut self, path: &Path, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    {
        let tmp = self.reserve(path)?;
        let file = File::create(&tmp).map_err(|e| CliError::write(&tmp, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| CliError::write(path, e))
    }

    pub fn write_str(&mut self, path: &Path, text: &str) -> Result<(), CliError> {
        self.write(path, |w| w.write_all(text.as_bytes()))
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>, CliError> {
        for (tmp, dest) in &self.files {
            fs::rename(tmp, dest).map_err(|e| CliError::write(dest, e))?;
        }
        self.committed = true;
        Ok(self.files.iter().map(|f| f.1.clone()).collect())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.committed {
            for (tmp, _) in &self.files {
                let _ = fs::remove_file(tmp);
            }
        }
    }
}
