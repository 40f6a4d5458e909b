use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};

use crate::exit::CliError;

/// Output directory of one command. Files written through it are removed
/// again unless [`RunDir::commit`] is reached.
pub struct RunDir {
    path: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
    committed: bool,
    started: Instant,
    manifest: Map<String, Value>,
}

impl RunDir {
    pub fn create(path: &Path, command: &str) -> Result<Self, CliError> {
        let created_dir = !path.exists();
        fs::create_dir_all(path)
            .map_err(|e| CliError::runtime(format!("cannot create run directory {}: {e}", path.display())))?;
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut manifest = Map::new();
        manifest.insert("command".into(), json!(command));
        manifest.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        manifest.insert("started_unix".into(), json!(started_unix));
        Ok(RunDir {
            path: path.to_path_buf(),
            created_dir,
            files: Vec::new(),
            committed: false,
            started: Instant::now(),
            manifest,
        })
    }

    /// Registers `name` as an output and returns its full path.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let p = self.path.join(name);
        self.files.push(p.clone());
        p
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let p = self.output(name);
        fs::write(&p, contents)?;
        Ok(p)
    }

    pub fn record(&mut self, key: &str, value: Value) {
        self.manifest.insert(key.to_string(), value);
    }

    /// Writes `manifest.json` and keeps every output.
    pub fn commit(mut self) -> Result<PathBuf, CliError> {
        let outputs: Vec<Value> = self
            .files
            .iter()
            .filter_map(|p| p.file_name())
            .map(|n| json!(n.to_string_lossy()))
            .collect();
        self.manifest.insert("outputs".into(), Value::Array(outputs));
        self.manifest
            .insert("elapsed_secs".into(), json!(self.started.elapsed().as_secs_f64()));
        let text = serde_json::to_string_pretty(&Value::Object(std::mem::take(&mut self.manifest)))
            .expect("manifest serializes");
        self.write("manifest.json", text)?;
        self.committed = true;
        Ok(self.path.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.path);
        }
    }
}
