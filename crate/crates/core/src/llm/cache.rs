use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use super::TransportReply;

/// Content-addressed reply store: `<dir>/<key[..2]>/<key>.json`.
///
/// Writes go through a temporary file and a rename, so concurrent readers
/// never observe partial entries. Eviction is manual.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: &Path) -> Result<Self, String> {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("00");
        self.dir.join(shard).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<TransportReply>, String> {
        let path = self.path_for(key);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| format!("corrupt cache entry {}: {e}", path.display())),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(format!("{}: {e}", path.display())),
        }
    }

    pub fn put(&self, key: &str, reply: &TransportReply) -> Result<(), String> {
        let path = self.path_for(key);
        let parent = path.parent().expect("sharded path has a parent");
        fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
        let tmp = parent.join(format!(".{key}.{}.tmp", std::process::id()));
        let bytes = serde_json::to_vec_pretty(reply).expect("reply serializes");
        fs::write(&tmp, bytes)
            .and_then(|_| fs::rename(&tmp, &path))
            .map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_then_get() {
        let dir = tempfile::TempDir::new().unwrap();
        let c = ResponseCache::new(dir.path()).unwrap();
        assert_eq!(c.get("abcdef").unwrap(), None);
        let r = TransportReply { text: "SELECT 1".into(), prompt_tokens: 3, completion_tokens: 2 };
        c.put("abcdef", &r).unwrap();
        assert_eq!(c.get("abcdef").unwrap(), Some(r));
        assert!(dir.path().join("ab/abcdef.json").exists());
    }
}
