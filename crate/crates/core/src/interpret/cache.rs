use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::Interpretation;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedCaption {
    pub meme_id: String,
    pub key: String,
    pub caption: String,
    pub truncated: bool,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Content-addressed store, one JSON file per (meme_id, hash), scoped to a
/// single backend. Writes go through a temp file and a rename so concurrent
/// writers never expose a partial entry.
#[derive(Debug, Clone)]
pub struct InterpretationCache {
    root: PathBuf,
}

impl InterpretationCache {
    pub fn open(dir: &Path, backend_name: &str) -> io::Result<Self> {
        let root = dir.join(sanitize(backend_name));
        fs::create_dir_all(root.join("captions"))?;
        fs::create_dir_all(root.join("interpretations"))?;
        Ok(Self { root })
    }

    fn entry_path(&self, kind: &str, meme_id: &str, hash: &str) -> PathBuf {
        self.root
            .join(kind)
            .join(format!("{}-{}.json", hex::encode(meme_id.as_bytes()), sanitize(hash)))
    }

    pub fn get(&self, meme_id: &str, prompt_hash: &str) -> Option<Interpretation> {
        let found: Interpretation =
            read_entry(&self.entry_path("interpretations", meme_id, prompt_hash))?;
        (found.meme_id == meme_id && found.prompt_hash == prompt_hash).then_some(found)
    }

    pub fn put(&self, interpretation: &Interpretation) -> io::Result<()> {
        let path = self.entry_path(
            "interpretations",
            &interpretation.meme_id,
            &interpretation.prompt_hash,
        );
        write_atomic(&path, interpretation)
    }

    pub fn get_caption(&self, meme_id: &str, key: &str) -> Option<CachedCaption> {
        let found: CachedCaption = read_entry(&self.entry_path("captions", meme_id, key))?;
        (found.meme_id == meme_id && found.key == key).then_some(found)
    }

    pub fn put_caption(&self, caption: &CachedCaption) -> io::Result<()> {
        write_atomic(&self.entry_path("captions", &caption.meme_id, &caption.key), caption)
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn read_entry<T: DeserializeOwned>(path: &Path) -> Option<T> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return None,
        Err(e) => {
            log::warn!("ignoring unreadable cache entry {}: {e}", path.display());
            return None;
        }
    };
    match serde_json::from_slice(&bytes) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("ignoring corrupt cache entry {}: {e}", path.display());
            None
        }
    }
}

fn write_atomic<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let dir = path.parent().expect("cache entries live in a directory");
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let mut file = fs::File::create(&tmp)?;
    serde_json::to_writer(&mut file, value)?;
    file.write_all(b"\n")?;
    file.sync_all()?;
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpret::InterpretationQuality;
    use chrono::{TimeZone, Utc};

    fn sample() -> Interpretation {
        Interpretation {
            meme_id: "m/1".into(),
            caption: "CAPTION:abc".into(),
            text: "An interpretation.".into(),
            backend_name: "mock".into(),
            prompt_hash: "deadbeef".into(),
            quality: InterpretationQuality::Complete,
            created_at: Utc.with_ymd_and_hms(2024, 1, 2, 3, 4, 5).unwrap(),
        }
    }

    #[test]
    fn put_then_get_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cache = InterpretationCache::open(dir.path(), "mock").unwrap();
        assert!(cache.get("m/1", "deadbeef").is_none());
        cache.put(&sample()).unwrap();
        assert_eq!(cache.get("m/1", "deadbeef"), Some(sample()));
        assert!(cache.get("m/1", "other").is_none());
    }

    #[test]
    fn corrupt_entry_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let cache = InterpretationCache::open(dir.path(), "mock").unwrap();
        cache.put(&sample()).unwrap();
        let path = cache.entry_path("interpretations", "m/1", "deadbeef");
        fs::write(&path, b"{ not json").unwrap();
        assert!(cache.get("m/1", "deadbeef").is_none());
        cache.put(&sample()).unwrap();
        assert!(cache.get("m/1", "deadbeef").is_some());
    }

    #[test]
    fn backends_do_not_share_entries() {
        let dir = tempfile::tempdir().unwrap();
        let a = InterpretationCache::open(dir.path(), "a").unwrap();
        let b = InterpretationCache::open(dir.path(), "b").unwrap();
        a.put(&sample()).unwrap();
        assert!(b.get("m/1", "deadbeef").is_none());
    }
}
