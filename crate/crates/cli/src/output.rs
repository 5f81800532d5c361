use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use dcacrn::{Error, Result};

const LOCK_FILE: &str = ".dcacrn.lock";
const STAGING_DIR: &str = "staging.partial";

/// Exclusive handle on an output directory. Files are written into
/// `staging.partial/` and moved into place only by [`OutDir::commit`], so a
/// failed command leaves its partial outputs visibly marked.
#[derive(Debug)]
pub struct OutDir {
    root: PathBuf,
    staging: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        let lock = root.join(LOCK_FILE);
        let mut file = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Usage(format!(
                    "{} is in use by another process (remove {} if it is stale)",
                    root.display(),
                    lock.display()
                ))
            } else {
                Error::Io(e)
            }
        })?;
        writeln!(file, "{}", std::process::id())?;
        let staging = root.join(STAGING_DIR);
        let out = OutDir {
            root: root.to_path_buf(),
            staging,
            lock,
        };
        if out.staging.exists() {
            fs::remove_dir_all(&out.staging)?;
        }
        fs::create_dir_all(&out.staging)?;
        Ok(out)
    }

    /// Staging directory; anything placed here is published on commit.
    pub fn staging(&self) -> &Path {
        &self.staging
    }

    /// Staged path for a plain file name.
    pub fn path(&self, name: &str) -> Result<PathBuf> {
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(Error::Usage(format!("output name {name:?} must be a plain file name")));
        }
        Ok(self.staging.join(name))
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.path(name)?, contents)?;
        Ok(())
    }

    /// Moves every staged file into the output directory.
    pub fn commit(self) -> Result<Vec<PathBuf>> {
        let mut names: Vec<_> = fs::read_dir(&self.staging)?
            .map(|e| e.map(|e| e.file_name()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        let mut published = Vec::with_capacity(names.len());
        for name in names {
            let target = self.root.join(&name);
            if target.is_dir() {
                fs::remove_dir_all(&target)?;
            }
            fs::rename(self.staging.join(&name), &target)?;
            published.push(target);
        }
        fs::remove_dir(&self.staging)?;
        Ok(published)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}
