use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

/// Flat key/value document storage underneath the parameter store. Keys are
/// `/`-separated paths; documents are immutable once written except for
/// counters and manifests, which are overwritten whole.
pub trait DocumentBackend: Send + Sync + std::fmt::Debug {
    fn put(&self, key: &str, bytes: Vec<u8>) -> io::Result<()>;
    fn get(&self, key: &str) -> io::Result<Option<Arc<Vec<u8>>>>;
    fn delete(&self, key: &str) -> io::Result<()>;
    /// All keys, sorted.
    fn keys(&self) -> io::Result<Vec<String>>;
}

#[derive(Debug, Default)]
pub struct MemoryBackend {
    docs: RwLock<BTreeMap<String, Arc<Vec<u8>>>>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

impl DocumentBackend for MemoryBackend {
    fn put(&self, key: &str, bytes: Vec<u8>) -> io::Result<()> {
        self.docs
            .write()
            .expect("backend poisoned")
            .insert(key.to_string(), Arc::new(bytes));
        Ok(())
    }

    fn get(&self, key: &str) -> io::Result<Option<Arc<Vec<u8>>>> {
        Ok(self.docs.read().expect("backend poisoned").get(key).cloned())
    }

    fn delete(&self, key: &str) -> io::Result<()> {
        self.docs.write().expect("backend poisoned").remove(key);
        Ok(())
    }

    fn keys(&self) -> io::Result<Vec<String>> {
        Ok(self.docs.read().expect("backend poisoned").keys().cloned().collect())
    }
}

/// One file per document under a root directory.
#[derive(Debug)]
pub struct DirBackend {
    root: PathBuf,
}

impl DirBackend {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &str) -> io::Result<PathBuf> {
        if key.split('/').any(|c| c.is_empty() || c == "." || c == "..") {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("invalid document key `{key}`"),
            ));
        }
        Ok(self.root.join(key))
    }
}

impl DocumentBackend for DirBackend {
    fn put(&self, key: &str, bytes: Vec<u8>) -> io::Result<()> {
        let path = self.path(key)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        // write-then-rename keeps readers from seeing half-written files
        let tmp = path.with_extension("tmp~");
        fs::write(&tmp, bytes)?;
        fs::rename(tmp, path)
    }

    fn get(&self, key: &str) -> io::Result<Option<Arc<Vec<u8>>>> {
        match fs::read(self.path(key)?) {
            Ok(b) => Ok(Some(Arc::new(b))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn delete(&self, key: &str) -> io::Result<()> {
        match fs::remove_file(self.path(key)?) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    fn keys(&self) -> io::Result<Vec<String>> {
        fn walk(dir: &Path, prefix: &str, out: &mut Vec<String>) -> io::Result<()> {
            for entry in fs::read_dir(dir)? {
                let entry = entry?;
                let name = entry.file_name().to_string_lossy().into_owned();
                let key = if prefix.is_empty() {
                    name.clone()
                } else {
                    format!("{prefix}/{name}")
                };
                if entry.file_type()?.is_dir() {
                    walk(&entry.path(), &key, out)?;
                } else if !name.ends_with(".tmp~") {
                    out.push(key);
                }
            }
            Ok(())
        }
        let mut out = Vec::new();
        walk(&self.root, "", &mut out)?;
        out.sort();
        Ok(out)
    }
}
