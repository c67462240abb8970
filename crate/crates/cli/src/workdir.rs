use std::fs::{self, File, TryLockError};
use std::path::Path;

use anyhow::{Context, Result};

use crate::exit::UsageError;

pub const LOCK_FILE: &str = ".prodg.lock";

/// Exclusive hold on a workdir; released on drop or process exit.
#[derive(Debug)]
pub struct WorkdirLock {
    _file: File,
}

pub fn lock(workdir: &Path) -> Result<WorkdirLock> {
    fs::create_dir_all(workdir).with_context(|| format!("cannot create workdir {}", workdir.display()))?;
    let path = workdir.join(LOCK_FILE);
    let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    match file.try_lock() {
        Ok(()) => Ok(WorkdirLock { _file: file }),
        Err(TryLockError::WouldBlock) => {
            Err(UsageError(format!("workdir {} is in use by another prodg process", workdir.display())).into())
        }
        Err(TryLockError::Error(e)) => Err(e).with_context(|| format!("cannot lock {}", path.display())),
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_is_refused_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let first = lock(dir.path()).unwrap();
        let err = lock(dir.path()).unwrap_err();
        assert!(err.is::<UsageError>(), "{err}");
        drop(first);
        lock(dir.path()).unwrap();
    }
}
