// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use headprobe::hub::{checkpoint_schedule, HubClient, HubConfig, Schedule};
use headprobe::ProbeError;
use sha2::{Digest, Sha256};

#[derive(Default)]
struct State {
    /// (revision, file) -> content
    files: BTreeMap<(String, String), Vec<u8>>,
    /// Overrides the advertised sha256 of a file.
    bad_digest: BTreeMap<String, String>,
    /// Files whose next response is cut short after this many bytes.
    truncate_once: BTreeMap<String, usize>,
    body_bytes: usize,
    ranges: Vec<String>,
    auth: Vec<String>,
}

struct Server {
    url: String,
    state: Arc<Mutex<State>>,
}

fn sha256(b: &[u8]) -> String {
    hex::encode(Sha256::digest(b))
}

fn git_sha1(b: &[u8]) -> String {
    use sha1::Sha1;
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", b.len()).as_bytes());
    h.update(b);
    hex::encode(h.finalize())
}

fn respond(stream: &mut TcpStream, status: &str, headers: &[(&str, String)], body: &[u8], send: usize) {
    let mut head = format!(
        "HTTP/1.1 {status}\r\nConnection: close\r\nContent-Length: {}\r\n",
        body.len()
    );
    for (k, v) in headers {
        head.push_str(&format!("{k}: {v}\r\n"));
    }
    head.push_str("\r\n");
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(&body[..send.min(body.len())]);
    let _ = stream.flush();
}

fn handle(mut stream: TcpStream, state: &Mutex<State>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).is_err() {
        return;
    }
    let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut range = None;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).unwrap_or(0) == 0 || h == "\r\n" {
            break;
        }
        let lower = h.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("range: bytes=") {
            range = v.trim().trim_end_matches('-').parse::<usize>().ok();
        }
        if let Some(v) = lower.strip_prefix("authorization: ") {
            state.lock().unwrap().auth.push(v.trim().to_string());
        }
    }
    let mut st = state.lock().unwrap();
    let path = path.split('?').next().unwrap().to_string();
    if path == "/api/models/org/tiny/refs" {
        let mut revs: Vec<&String> = st.files.keys().map(|(r, _)| r).collect();
        revs.dedup();
        let body = serde_json::json!({
            "branches": revs.iter().map(|r| serde_json::json!({"name": r})).collect::<Vec<_>>()
        })
        .to_string();
        drop(st);
        return respond(&mut stream, "200 OK", &[], body.as_bytes(), usize::MAX);
    }
    if let Some(rev) = path.strip_prefix("/api/models/org/tiny/revision/") {
        let siblings: Vec<serde_json::Value> = st
            .files
            .iter()
            .filter(|((r, _), _)| r == rev)
            .map(|((_, name), data)| {
                if name.ends_with(".safetensors") {
                    let digest = st.bad_digest.get(name).cloned().unwrap_or_else(|| sha256(data));
                    serde_json::json!({"rfilename": name, "size": data.len(), "blobId": "x",
                        "lfs": {"sha256": digest, "size": data.len()}})
                } else {
                    serde_json::json!({"rfilename": name, "size": data.len(), "blobId": git_sha1(data)})
                }
            })
            .collect();
        drop(st);
        if siblings.is_empty() {
            return respond(&mut stream, "404 Not Found", &[], b"{}", usize::MAX);
        }
        let body = serde_json::json!({ "siblings": siblings }).to_string();
        return respond(&mut stream, "200 OK", &[], body.as_bytes(), usize::MAX);
    }
    if let Some(rest) = path.strip_prefix("/org/tiny/resolve/") {
        let (rev, name) = rest.split_once('/').unwrap();
        let Some(data) = st.files.get(&(rev.to_string(), name.to_string())).cloned() else {
            drop(st);
            return respond(&mut stream, "404 Not Found", &[], b"", usize::MAX);
        };
        let cut = st.truncate_once.remove(name);
        let (status, body, headers) = match range {
            Some(from) if from < data.len() => {
                st.ranges.push(format!("{name}:{from}"));
                let h = vec![(
                    "Content-Range",
                    format!("bytes {from}-{}/{}", data.len() - 1, data.len()),
                )];
                ("206 Partial Content", data[from..].to_vec(), h)
            }
            _ => ("200 OK", data, Vec::new()),
        };
        let send = cut.unwrap_or(usize::MAX).min(body.len());
        st.body_bytes += send;
        drop(st);
        return respond(&mut stream, status, &headers, &body, send);
    }
    drop(st);
    respond(&mut stream, "404 Not Found", &[], b"", usize::MAX);
}

fn serve(state: State) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let state = Arc::new(Mutex::new(state));
    let shared = Arc::clone(&state);
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let s = Arc::clone(&shared);
            std::thread::spawn(move || handle(stream, &s));
        }
    });
    Server { url, state }
}

fn weights(n: usize, salt: u8) -> Vec<u8> {
    (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(salt)).collect()
}

fn repo_state() -> State {
    let mut st = State::default();
    for (rev, salt) in [("step0", 1u8), ("step1000", 2), ("step2000", 3), ("step143000", 4)] {
        st.files
            .insert((rev.into(), "config.json".into()), br#"{"hidden_size": 8}"#.to_vec());
        st.files.insert((rev.into(), "tokenizer.json".into()), b"{}".to_vec());
        st.files
            .insert((rev.into(), "model.safetensors".into()), weights(200_000, salt));
        st.files.insert((rev.into(), "pytorch_model.bin".into()), vec![0; 10]);
    }
    st
}

fn client(url: &str, cache: &std::path::Path) -> HubClient {
    let mut cfg = HubConfig::new(cache);
    cfg.endpoint = url.into();
    cfg.backoff = Duration::from_millis(1);
    cfg.timeout = Duration::from_secs(10);
    HubClient::new(cfg).unwrap()
}

#[test]
fn fetch_is_idempotent_on_warm_cache() {
    let server = serve(repo_state());
    let cache = tempfile::tempdir().unwrap();
    let hub = client(&server.url, cache.path());
    let first = hub.fetch_checkpoint("org/tiny", "step1000").unwrap();
    let names: Vec<&str> = first.files.iter().map(|f| f.name.as_str()).collect();
    assert_eq!(names, ["config.json", "model.safetensors", "tokenizer.json"]);
    let after_first = hub.bytes_transferred();
    assert!(after_first >= 200_000);
    assert_eq!(
        std::fs::read(first.local_dir.join("model.safetensors")).unwrap(),
        weights(200_000, 2)
    );
    assert_eq!(first.local_dir, cache.path().join("org/tiny/step1000"));

    let second = hub.fetch_checkpoint("org/tiny", "step1000").unwrap();
    assert_eq!(hub.bytes_transferred(), after_first);
    assert_eq!(first, second);
    let leftovers: Vec<_> = std::fs::read_dir(&first.local_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".part") || n.ends_with(".lock"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn digest_mismatch_is_quarantined() {
    let mut st = repo_state();
    st.bad_digest.insert("model.safetensors".into(), "0".repeat(64));
    let server = serve(st);
    let cache = tempfile::tempdir().unwrap();
    let hub = client(&server.url, cache.path());
    let err = hub.fetch_checkpoint("org/tiny", "step0").unwrap_err();
    assert!(matches!(err, ProbeError::Integrity { .. }), "{err}");
    let dir = cache.path().join("org/tiny/step0");
    assert!(!dir.join("model.safetensors").exists());
    assert!(!dir.join("model.safetensors.part").exists());
    assert!(!dir.join(".headprobe-files.json").exists());
    let q: Vec<_> = std::fs::read_dir(cache.path().join(".quarantine/org/tiny/step0"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(q.len(), 1);
    assert!(q[0].starts_with("model.safetensors."));
}

#[test]
fn tampered_cache_file_is_replaced() {
    let server = serve(repo_state());
    let cache = tempfile::tempdir().unwrap();
    let hub = client(&server.url, cache.path());
    let r = hub.fetch_checkpoint("org/tiny", "step2000").unwrap();
    let path = r.local_dir.join("model.safetensors");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[17] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    let before = hub.bytes_transferred();
    hub.fetch_checkpoint("org/tiny", "step2000").unwrap();
    assert!(hub.bytes_transferred() > before);
    assert_eq!(std::fs::read(&path).unwrap(), weights(200_000, 3));
    assert!(cache.path().join(".quarantine/org/tiny/step2000").is_dir());
}

#[test]
fn unknown_revision_lists_nearby() {
    let server = serve(repo_state());
    let cache = tempfile::tempdir().unwrap();
    let hub = client(&server.url, cache.path());
    match hub.fetch_checkpoint("org/tiny", "step1500").unwrap_err() {
        ProbeError::NotFound { what, nearby } => {
            assert!(what.contains("step1500"));
            assert_eq!(nearby[..2], ["step1000".to_string(), "step2000".to_string()]);
        }
        other => panic!("{other}"),
    }
    assert!(!cache.path().join("org/tiny/step1500").exists());
}

#[test]
fn offline_cold_cache_leaves_nothing_behind() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let cache = tempfile::tempdir().unwrap();
    let hub = client(&format!("http://127.0.0.1:{port}"), cache.path());
    let err = hub.fetch_checkpoint("org/tiny", "step0").unwrap_err();
    assert!(matches!(err, ProbeError::Network(_)), "{err}");
    assert_eq!(std::fs::read_dir(cache.path()).unwrap().count(), 0);
}

#[test]
fn offline_warm_cache_still_serves() {
    let server = serve(repo_state());
    let cache = tempfile::tempdir().unwrap();
    client(&server.url, cache.path())
        .fetch_checkpoint("org/tiny", "step0")
        .unwrap();
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let offline = client(&format!("http://127.0.0.1:{port}"), cache.path());
    let r = offline.fetch_checkpoint("org/tiny", "step0").unwrap();
    assert_eq!(offline.bytes_transferred(), 0);
    assert_eq!(r.revision, "step0");
}

#[test]
fn interrupted_download_resumes_with_range() {
    let mut st = repo_state();
    st.truncate_once.insert("model.safetensors".into(), 70_000);
    let server = serve(st);
    let cache = tempfile::tempdir().unwrap();
    let hub = client(&server.url, cache.path());
    let r = hub.fetch_checkpoint("org/tiny", "step143000").unwrap();
    assert_eq!(
        std::fs::read(r.local_dir.join("model.safetensors")).unwrap(),
        weights(200_000, 4)
    );
    let st = server.state.lock().unwrap();
    assert_eq!(st.ranges, ["model.safetensors:70000"]);
    // resumed, not restarted
    assert!(st.body_bytes < 2 * 200_000);
}

#[test]
fn token_is_sent_as_bearer() {
    let server = serve(repo_state());
    let cache = tempfile::tempdir().unwrap();
    let mut cfg = HubConfig::new(cache.path());
    cfg.endpoint = server.url.clone();
    cfg.token = Some("secret".into());
    HubClient::new(cfg)
        .unwrap()
        .fetch_checkpoint("org/tiny", "step0")
        .unwrap();
    let st = server.state.lock().unwrap();
    assert!(!st.auth.is_empty());
    assert!(st.auth.iter().all(|a| a == "bearer secret"));
}

#[test]
fn schedules() {
    let all = checkpoint_schedule(&Schedule::Named("all14m".into())).unwrap();
    assert_eq!(all.len(), 154);
    assert_eq!(all[..12], [0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1000]);
    assert_eq!(*all.last().unwrap(), 143_000);
    assert!(all.windows(2).all(|w| w[0] < w[1]));
    let p = checkpoint_schedule(&Schedule::Named("paper20".into())).unwrap();
    assert_eq!(p.len(), 20);
    assert!(p.iter().all(|s| all.contains(s)));
    assert_eq!(checkpoint_schedule(&Schedule::Steps(vec![5, 7])).unwrap(), [5, 7]);
    assert!(checkpoint_schedule(&Schedule::Steps(vec![])).is_err());
    assert!(checkpoint_schedule(&Schedule::Named("weekly".into())).is_err());
}

#[test]
fn all14m_prefers_listed_revisions() {
    let server = serve(repo_state());
    let cache = tempfile::tempdir().unwrap();
    let hub = client(&server.url, cache.path());
    let all = Schedule::Named("all14m".into());
    assert_eq!(hub.resolve_schedule("org/tiny", &all).unwrap(), [0, 1000, 2000, 143000]);
    let paper = Schedule::Named("paper20".into());
    assert_eq!(hub.resolve_schedule("org/tiny", &paper).unwrap().len(), 20);
}

#[test]
fn concurrent_fetchers_produce_one_copy() {
    let server = serve(repo_state());
    let cache = tempfile::tempdir().unwrap();
    let refs: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4)
            .map(|_| {
                s.spawn(|| {
                    client(&server.url, cache.path())
                        .fetch_checkpoint("org/tiny", "step0")
                        .unwrap()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(refs.windows(2).all(|w| w[0] == w[1]));
    let dir = cache.path().join("org/tiny/step0");
    let mut names: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            ".headprobe-files.json",
            "config.json",
            "model.safetensors",
            "tokenizer.json"
        ]
    );
    assert_eq!(
        std::fs::read(dir.join("model.safetensors")).unwrap(),
        weights(200_000, 1)
    );
}
