//! Configuration, run orchestration and figure-data emission for the
//! `qscatter` command.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub mod config;
pub mod figures;
pub mod pipeline;

pub const WORKERS_ENV: &str = "QSCATTER_WORKERS";
pub const MANIFEST: &str = "manifest.sha256";
/// Sidecar with wall-clock timestamps; never hashed.
pub const LOG: &str = "run.log";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: qscatter::Error,
    },
    #[error("stage `{stage}` failed: {message}")]
    StageMessage { stage: &'static str, message: String },
    #[error(transparent)]
    Core(#[from] qscatter::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}

/// Tags core errors with the pipeline stage they came from.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T> StageExt<T> for qscatter::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}

/// Sub-seed for one named use of the run seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(tag.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Output directory that hashes every artifact it writes.
#[derive(Debug)]
pub struct ArtifactDir {
    root: PathBuf,
    hashes: BTreeMap<String, String>,
    log: Vec<String>,
}

impl ArtifactDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|source| CliError::Io { path: root.to_path_buf(), source })?;
        Ok(Self { root: root.to_path_buf(), hashes: BTreeMap::new(), log: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| CliError::Io { path: parent.to_path_buf(), source })?;
        }
        fs::write(&path, bytes).map_err(|source| CliError::Io { path, source })?;
        self.hashes.insert(name.to_string(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        self.write(name, text.as_bytes())
    }

    pub fn write_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("artifact values serialize");
        text.push('\n');
        self.write_text(name, &text)
    }

    /// Serializes with a core writer.
    pub fn write_with<F>(&mut self, name: &str, stage: &'static str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> qscatter::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf).stage(stage)?;
        self.write(name, &buf)
    }

    pub fn log(&mut self, line: impl Into<String>) {
        let t = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        self.log.push(format!("{t:.3} {}", line.into()));
    }

    /// Writes the manifest and the log; returns the state hash, the digest of
    /// the manifest itself.
    pub fn finish(mut self) -> Result<String, CliError> {
        let manifest = self.hashes.iter().fold(String::new(), |mut s, (name, h)| {
            let _ = writeln!(s, "{h}  {name}");
            s
        });
        let state = hex(&Sha256::digest(manifest.as_bytes()));
        let path = self.root.join(MANIFEST);
        fs::write(&path, &manifest).map_err(|source| CliError::Io { path, source })?;
        self.log(format!("state {state}"));
        let path = self.root.join(LOG);
        let mut text = self.log.join("\n");
        text.push('\n');
        fs::write(&path, text).map_err(|source| CliError::Io { path, source })?;
        Ok(state)
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// Runs `f` on a pool with `workers` threads (all cores when `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(CliError::Config("worker count must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }

    #[test]
    fn manifest_lists_every_artifact() {
        let tmp = tempfile::tempdir().unwrap();
        let mut dir = ArtifactDir::create(tmp.path()).unwrap();
        dir.write_text("b.txt", "b").unwrap();
        dir.write_text("sub/a.txt", "a").unwrap();
        let state = dir.finish().unwrap();
        let manifest = fs::read_to_string(tmp.path().join(MANIFEST)).unwrap();
        let names: Vec<&str> = manifest.lines().map(|l| l.split("  ").nth(1).unwrap()).collect();
        assert_eq!(names, ["b.txt", "sub/a.txt"]);
        assert_eq!(state, hex(&Sha256::digest(manifest.as_bytes())));
        assert!(tmp.path().join(LOG).is_file());
    }
}
