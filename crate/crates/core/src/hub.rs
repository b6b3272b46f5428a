// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint download and cache for a Hugging Face-style model hub.
//!
//! Cache layout is `<cache_root>/<repo>/<revision>/<file>`. A revision
//! directory is complete once `.headprobe-files.json` exists; later calls
//! revalidate size and digest from that record without touching the
//! network. Downloads stream into `<file>.part` under an exclusive lock in
//! `<cache_root>/.locks/` and are renamed into place only after the digest
//! matches.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha1::Sha1;
use sha2::{Digest as _, Sha256};

use crate::error::{ProbeError, Result};

pub const DEFAULT_ENDPOINT: &str = "https://huggingface.co";
pub const ENV_ENDPOINT: &str = "HEADPROBE_HUB_URL";
pub const ENV_TOKEN: &str = "HEADPROBE_HUB_TOKEN";
pub const ENV_CACHE: &str = "HEADPROBE_CACHE";
const RECORD: &str = ".headprobe-files.json";
const QUARANTINE: &str = ".quarantine";
/// Lock files are never removed; unlinking a held lock would let a third
/// fetcher lock a fresh inode.
const LOCKS: &str = ".locks";

/// The 20 steps sampled for every model size.
pub const PAPER20: [u64; 20] = [
    0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1000, 2000, 5000, 10000, 25000, 50000, 75000, 100000, 143000,
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    Named(String),
    Steps(Vec<u64>),
}

/// Checkpoint steps for a named schedule or a custom list.
///
/// `all14m` is 0, then powers of two through 512, then every 1000 through
/// 143000.
pub fn checkpoint_schedule(schedule: &Schedule) -> Result<Vec<u64>> {
    match schedule {
        Schedule::Named(name) => match name.to_ascii_lowercase().as_str() {
            "paper20" => Ok(PAPER20.to_vec()),
            "all14m" => {
                let mut v = vec![0];
                v.extend((0..=9).map(|k| 1u64 << k));
                v.extend((1..=143).map(|k| k * 1000));
                Ok(v)
            }
            other => Err(ProbeError::Argument(format!(
                "unknown schedule `{other}` (expected paper20, all14m or a list of steps)"
            ))),
        },
        Schedule::Steps(steps) if steps.is_empty() => Err(ProbeError::Argument("custom schedule is empty".into())),
        Schedule::Steps(steps) => Ok(steps.clone()),
    }
}

pub fn revision_name(step: u64) -> String {
    format!("step{step}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "algo", content = "hex")]
pub enum ContentDigest {
    Sha256(String),
    /// Git blob id: sha1 of `"blob <len>\0" + content`.
    GitSha1(String),
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub size: u64,
    pub digest: ContentDigest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub repo_id: String,
    pub revision: String,
    pub local_dir: PathBuf,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone)]
pub struct HubConfig {
    pub endpoint: String,
    pub token: Option<String>,
    pub cache_root: PathBuf,
    pub attempts: u32,
    pub backoff: Duration,
    pub backoff_cap: Duration,
    pub timeout: Duration,
}

impl HubConfig {
    pub fn new(cache_root: impl Into<PathBuf>) -> Self {
        Self {
            endpoint: DEFAULT_ENDPOINT.into(),
            token: None,
            cache_root: cache_root.into(),
            attempts: 3,
            backoff: Duration::from_secs(1),
            backoff_cap: Duration::from_secs(30),
            timeout: Duration::from_secs(300),
        }
    }

    /// Endpoint, token and cache root from the environment, falling back to
    /// the public hub and `./cache`.
    pub fn from_env() -> Self {
        let mut cfg = Self::new(std::env::var_os(ENV_CACHE).map_or_else(|| PathBuf::from("cache"), PathBuf::from));
        if let Ok(e) = std::env::var(ENV_ENDPOINT) {
            cfg.endpoint = e;
        }
        cfg.token = std::env::var(ENV_TOKEN).ok().filter(|t| !t.is_empty());
        cfg
    }
}

/// Files a checkpoint needs.
pub fn is_checkpoint_file(name: &str) -> bool {
    name == "config.json" || name == "tokenizer.json" || (name.ends_with(".safetensors") && !name.contains('/'))
}

pub struct HubClient {
    cfg: HubConfig,
    http: reqwest::blocking::Client,
    transferred: AtomicU64,
}

#[derive(Deserialize)]
struct RevisionInfo {
    #[serde(default)]
    siblings: Vec<Sibling>,
}

#[derive(Deserialize)]
struct Sibling {
    rfilename: String,
    #[serde(default)]
    size: Option<u64>,
    #[serde(default, rename = "blobId")]
    blob_id: Option<String>,
    #[serde(default)]
    lfs: Option<LfsInfo>,
}

#[derive(Deserialize)]
struct LfsInfo {
    sha256: String,
    size: u64,
}

#[derive(Deserialize)]
struct Refs {
    #[serde(default)]
    branches: Vec<RefName>,
}

#[derive(Deserialize)]
struct RefName {
    name: String,
}

enum Attempt<T> {
    Done(T),
    Retry(ProbeError),
    Fail(ProbeError),
}

impl HubClient {
    pub fn new(cfg: HubConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .user_agent(concat!("headprobe/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| ProbeError::Network(e.to_string()))?;
        Ok(Self {
            cfg,
            http,
            transferred: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &HubConfig {
        &self.cfg
    }

    /// Body bytes received by this client so far.
    pub fn bytes_transferred(&self) -> u64 {
        self.transferred.load(Ordering::Relaxed)
    }

    pub fn revision_dir(&self, repo_id: &str, revision: &str) -> PathBuf {
        self.cfg.cache_root.join(repo_id).join(revision)
    }

    fn get(&self, url: &str, range_from: Option<u64>) -> reqwest::Result<reqwest::blocking::Response> {
        let mut req = self.http.get(url);
        if let Some(t) = &self.cfg.token {
            req = req.bearer_auth(t);
        }
        if let Some(n) = range_from {
            req = req.header(reqwest::header::RANGE, format!("bytes={n}-"));
        }
        req.send()
    }

    fn with_retries<T>(&self, what: &str, mut f: impl FnMut() -> Attempt<T>) -> Result<T> {
        let mut delay = self.cfg.backoff;
        let mut last = None;
        for attempt in 1..=self.cfg.attempts.max(1) {
            match f() {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => {
                    log::warn!("{what}: attempt {attempt} failed: {e}");
                    last = Some(e);
                    if attempt < self.cfg.attempts {
                        std::thread::sleep(delay);
                        delay = (delay * 2).min(self.cfg.backoff_cap);
                    }
                }
            }
        }
        Err(last.unwrap_or_else(|| ProbeError::Network(format!("{what}: no attempts made"))))
    }

    fn classify(e: reqwest::Error) -> ProbeError {
        ProbeError::Network(e.to_string())
    }

    /// Branch names of a repository.
    pub fn list_revisions(&self, repo_id: &str) -> Result<Vec<String>> {
        let url = format!("{}/api/models/{repo_id}/refs", self.cfg.endpoint);
        self.with_retries(&url, || match self.get(&url, None) {
            Err(e) => Attempt::Retry(Self::classify(e)),
            Ok(r) if r.status().is_server_error() => {
                Attempt::Retry(ProbeError::Network(format!("{url}: {}", r.status())))
            }
            Ok(r) if !r.status().is_success() => Attempt::Fail(ProbeError::Network(format!("{url}: {}", r.status()))),
            Ok(r) => match serde_json::from_reader::<_, Refs>(r) {
                Ok(refs) => Attempt::Done(refs.branches.into_iter().map(|b| b.name).collect()),
                Err(e) => Attempt::Fail(ProbeError::Network(format!("{url}: {e}"))),
            },
        })
    }

    fn nearby(&self, repo_id: &str, revision: &str) -> Vec<String> {
        let Ok(mut revs) = self.list_revisions(repo_id) else {
            return Vec::new();
        };
        let step = |r: &str| r.strip_prefix("step").and_then(|s| s.parse::<i64>().ok());
        match step(revision) {
            Some(want) => {
                revs.retain(|r| step(r).is_some());
                revs.sort_by_key(|r| ((step(r).unwrap() - want).abs(), step(r).unwrap()));
            }
            None => revs.sort(),
        }
        revs.truncate(5);
        revs
    }

    /// Steps for `schedule` in `repo_id`. For `all14m` the repo's own
    /// `step<N>` branches are used when the hub answers; the synthesized
    /// list is the offline fallback.
    pub fn resolve_schedule(&self, repo_id: &str, schedule: &Schedule) -> Result<Vec<u64>> {
        let fallback = checkpoint_schedule(schedule)?;
        if !matches!(schedule, Schedule::Named(n) if n.eq_ignore_ascii_case("all14m")) {
            return Ok(fallback);
        }
        match self.list_revisions(repo_id) {
            Ok(revs) => {
                let mut steps: Vec<u64> = revs
                    .iter()
                    .filter_map(|r| r.strip_prefix("step").and_then(|s| s.parse().ok()))
                    .collect();
                steps.sort_unstable();
                steps.dedup();
                if steps.is_empty() {
                    return Ok(fallback);
                }
                if steps.len() != fallback.len() {
                    log::warn!(
                        "{repo_id}: hub lists {} step revisions, expected {}",
                        steps.len(),
                        fallback.len()
                    );
                }
                Ok(steps)
            }
            Err(e) => {
                log::warn!("{repo_id}: cannot list revisions ({e}); using the synthesized schedule");
                Ok(fallback)
            }
        }
    }

    /// Checkpoint files at a revision, with sizes and digests.
    pub fn list_files(&self, repo_id: &str, revision: &str) -> Result<Vec<FileEntry>> {
        let url = format!(
            "{}/api/models/{repo_id}/revision/{revision}?blobs=true",
            self.cfg.endpoint
        );
        let info: RevisionInfo = self
            .with_retries(&url, || match self.get(&url, None) {
                Err(e) => Attempt::Retry(Self::classify(e)),
                Ok(r) if r.status() == reqwest::StatusCode::NOT_FOUND => Attempt::Fail(ProbeError::NotFound {
                    what: format!("{repo_id}@{revision}"),
                    nearby: Vec::new(),
                }),
                Ok(r) if r.status().is_server_error() => {
                    Attempt::Retry(ProbeError::Network(format!("{url}: {}", r.status())))
                }
                Ok(r) if !r.status().is_success() => {
                    Attempt::Fail(ProbeError::Network(format!("{url}: {}", r.status())))
                }
                Ok(r) => match serde_json::from_reader(r) {
                    Ok(v) => Attempt::Done(v),
                    Err(e) => Attempt::Fail(ProbeError::Network(format!("{url}: {e}"))),
                },
            })
            .map_err(|e| match e {
                ProbeError::NotFound { what, .. } => ProbeError::NotFound {
                    what,
                    nearby: self.nearby(repo_id, revision),
                },
                other => other,
            })?;
        let mut files: Vec<FileEntry> = info
            .siblings
            .into_iter()
            .filter(|s| is_checkpoint_file(&s.rfilename))
            .map(|s| {
                let (size, digest) = match (s.lfs, s.blob_id) {
                    (Some(lfs), _) => (lfs.size, ContentDigest::Sha256(lfs.sha256)),
                    (None, Some(blob)) => (s.size.unwrap_or(0), ContentDigest::GitSha1(blob)),
                    (None, None) => (s.size.unwrap_or(0), ContentDigest::Unknown),
                };
                FileEntry {
                    name: s.rfilename,
                    size,
                    digest,
                }
            })
            .collect();
        files.sort_by(|a, b| a.name.cmp(&b.name));
        let has = |pred: &dyn Fn(&str) -> bool| files.iter().any(|f| pred(&f.name));
        if !has(&|n| n == "config.json") || !has(&|n| n.ends_with(".safetensors")) {
            return Err(ProbeError::NotFound {
                what: format!("{repo_id}@{revision}: config.json and *.safetensors"),
                nearby: files.iter().map(|f| f.name.clone()).collect(),
            });
        }
        Ok(files)
    }

    /// Download (or revalidate) every checkpoint file of a revision.
    pub fn fetch_checkpoint(&self, repo_id: &str, revision: &str) -> Result<CheckpointRef> {
        let dir = self.revision_dir(repo_id, revision);
        if let Some(cached) = self.cached(repo_id, revision, &dir)? {
            return Ok(cached);
        }
        let files = self.list_files(repo_id, revision)?;
        std::fs::create_dir_all(&dir).map_err(|e| ProbeError::io(&dir, e))?;
        for f in &files {
            self.fetch_file(repo_id, revision, f, &dir)?;
        }
        let reference = CheckpointRef {
            repo_id: repo_id.into(),
            revision: revision.into(),
            local_dir: dir.clone(),
            files,
        };
        let record = dir.join(RECORD);
        static SEQ: AtomicU64 = AtomicU64::new(0);
        let tmp = dir.join(format!(
            "{RECORD}.{}-{}.part",
            std::process::id(),
            SEQ.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&reference)?).map_err(|e| ProbeError::io(&tmp, e))?;
        std::fs::rename(&tmp, &record).map_err(|e| ProbeError::io(&record, e))?;
        Ok(reference)
    }

    /// The recorded checkpoint if every file still matches; stale files are
    /// quarantined and the record dropped.
    fn cached(&self, repo_id: &str, revision: &str, dir: &Path) -> Result<Option<CheckpointRef>> {
        let record = dir.join(RECORD);
        let Ok(text) = std::fs::read(&record) else {
            return Ok(None);
        };
        let Ok(reference) = serde_json::from_slice::<CheckpointRef>(&text) else {
            let _ = std::fs::remove_file(&record);
            return Ok(None);
        };
        let mut ok = true;
        for f in &reference.files {
            let path = dir.join(&f.name);
            if !verify(&path, f)? {
                ok = false;
                if path.exists() {
                    self.quarantine(repo_id, revision, &path)?;
                }
            }
        }
        if !ok {
            let _ = std::fs::remove_file(&record);
            return Ok(None);
        }
        Ok(Some(CheckpointRef {
            local_dir: dir.to_path_buf(),
            ..reference
        }))
    }

    fn quarantine(&self, repo_id: &str, revision: &str, path: &Path) -> Result<PathBuf> {
        let qdir = self.cfg.cache_root.join(QUARANTINE).join(repo_id).join(revision);
        std::fs::create_dir_all(&qdir).map_err(|e| ProbeError::io(&qdir, e))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos());
        let dest = qdir.join(format!("{name}.{stamp}"));
        std::fs::rename(path, &dest).map_err(|e| ProbeError::io(path, e))?;
        log::warn!("quarantined {} -> {}", path.display(), dest.display());
        Ok(dest)
    }

    fn fetch_file(&self, repo_id: &str, revision: &str, entry: &FileEntry, dir: &Path) -> Result<()> {
        let dest = dir.join(&entry.name);
        let lock_dir = self.cfg.cache_root.join(LOCKS).join(repo_id).join(revision);
        std::fs::create_dir_all(&lock_dir).map_err(|e| ProbeError::io(&lock_dir, e))?;
        let lock_path = lock_dir.join(format!("{}.lock", entry.name));
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| ProbeError::io(&lock_path, e))?;
        lock.lock().map_err(|e| ProbeError::io(&lock_path, e))?;
        let result = (|| {
            if verify(&dest, entry)? {
                return Ok(());
            }
            let part = dir.join(format!("{}.part", entry.name));
            let url = format!("{}/{repo_id}/resolve/{revision}/{}", self.cfg.endpoint, entry.name);
            self.with_retries(&url, || match self.download(&url, &part, entry) {
                Ok(()) => Attempt::Done(()),
                Err(e @ ProbeError::Network(_)) => Attempt::Retry(e),
                Err(e) => Attempt::Fail(e),
            })?;
            let actual = digest_file(&part, &entry.digest)?;
            let size = std::fs::metadata(&part).map_err(|e| ProbeError::io(&part, e))?.len();
            if !digest_matches(&entry.digest, actual.as_deref()) || (entry.size > 0 && size != entry.size) {
                let moved = self.quarantine(repo_id, revision, &part)?;
                return Err(ProbeError::Integrity {
                    path: moved,
                    expected: format!("{:?} ({} bytes)", entry.digest, entry.size),
                    actual: format!("{} ({size} bytes)", actual.unwrap_or_default()),
                });
            }
            std::fs::rename(&part, &dest).map_err(|e| ProbeError::io(&dest, e))
        })();
        let _ = lock.unlock();
        result
    }

    /// Stream `url` into `part`, resuming from its current length.
    fn download(&self, url: &str, part: &Path, entry: &FileEntry) -> Result<()> {
        let have = std::fs::metadata(part).map(|m| m.len()).unwrap_or(0);
        let resume = (have > 0 && (entry.size == 0 || have < entry.size)).then_some(have);
        if have > 0 && resume.is_none() {
            std::fs::remove_file(part).map_err(|e| ProbeError::io(part, e))?;
        }
        let mut resp = self.get(url, resume).map_err(Self::classify)?;
        let status = resp.status();
        if status == reqwest::StatusCode::NOT_FOUND {
            return Err(ProbeError::NotFound {
                what: url.to_string(),
                nearby: Vec::new(),
            });
        }
        if !status.is_success() {
            let msg = format!("{url}: HTTP {status}");
            return Err(if status.is_server_error() {
                ProbeError::Network(msg)
            } else {
                ProbeError::Argument(msg)
            });
        }
        let append = status == reqwest::StatusCode::PARTIAL_CONTENT;
        let mut out = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(part)
            .map_err(|e| ProbeError::io(part, e))?;
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = resp
                .read(&mut buf)
                .map_err(|e| ProbeError::Network(format!("{url}: {e}")))?;
            if n == 0 {
                break;
            }
            out.write_all(&buf[..n]).map_err(|e| ProbeError::io(part, e))?;
            self.transferred.fetch_add(n as u64, Ordering::Relaxed);
        }
        out.sync_all().map_err(|e| ProbeError::io(part, e))?;
        let len = std::fs::metadata(part).map_err(|e| ProbeError::io(part, e))?.len();
        if entry.size > 0 && len < entry.size {
            return Err(ProbeError::Network(format!(
                "{url}: stream ended at {len} of {} bytes",
                entry.size
            )));
        }
        Ok(())
    }
}

fn digest_matches(expected: &ContentDigest, actual: Option<&str>) -> bool {
    match (expected, actual) {
        (ContentDigest::Unknown, _) => true,
        (ContentDigest::Sha256(e) | ContentDigest::GitSha1(e), Some(a)) => e.eq_ignore_ascii_case(a),
        _ => false,
    }
}

/// Hex digest of a file under the algorithm of `kind`.
pub fn digest_file(path: &Path, kind: &ContentDigest) -> Result<Option<String>> {
    let mut file = File::open(path).map_err(|e| ProbeError::io(path, e))?;
    let len = file.metadata().map_err(|e| ProbeError::io(path, e))?.len();
    let mut buf = vec![0u8; 1 << 16];
    let mut feed = |update: &mut dyn FnMut(&[u8])| -> Result<()> {
        loop {
            let n = file.read(&mut buf).map_err(|e| ProbeError::io(path, e))?;
            if n == 0 {
                return Ok(());
            }
            update(&buf[..n]);
        }
    };
    Ok(match kind {
        ContentDigest::Sha256(_) => {
            let mut h = Sha256::new();
            feed(&mut |b| h.update(b))?;
            Some(hex::encode(h.finalize()))
        }
        ContentDigest::GitSha1(_) => {
            let mut h = Sha1::new();
            h.update(format!("blob {len}\0").as_bytes());
            feed(&mut |b| h.update(b))?;
            Some(hex::encode(h.finalize()))
        }
        ContentDigest::Unknown => None,
    })
}

fn verify(path: &Path, entry: &FileEntry) -> Result<bool> {
    let Ok(meta) = std::fs::metadata(path) else {
        return Ok(false);
    };
    if entry.size > 0 && meta.len() != entry.size {
        return Ok(false);
    }
    let actual = digest_file(path, &entry.digest)?;
    Ok(digest_matches(&entry.digest, actual.as_deref()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_blob_digest_of_known_content() {
        // `printf 'hello\n' | git hash-object --stdin`
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f");
        std::fs::write(&p, b"hello\n").unwrap();
        let d = digest_file(&p, &ContentDigest::GitSha1(String::new()))
            .unwrap()
            .unwrap();
        assert_eq!(d, "ce013625030ba8dba906f756967f9e9ca394464a");
    }
}
