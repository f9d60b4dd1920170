//! Run directory layout and the checksum manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use doge_core::checksum::{sha256_bytes, sha256_file};
use doge_core::config::RunConfig;
use doge_core::Error;
use serde::{Deserialize, Serialize};

pub const OUTPUT_ROOT_ENV: &str = "DOGE_OUTPUT_ROOT";
pub const SUBDIRS: [&str; 6] = ["data", "checkpoints", "scores", "selections", "reports", "figures"];

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError { code: 2, message: msg.into() }
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        CliError { code: 3, message: msg.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::Config(_) => 2,
            Error::Lookup(_) | Error::Io(_) => 3,
            Error::NonFinite(_) => 4,
            _ => 1,
        };
        CliError { code, message: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub tool_version: String,
    pub run: String,
    pub config: String,
    pub config_sha256: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub struct RunDir {
    pub root: PathBuf,
    pub config: RunConfig,
    config_text: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError { code: 1, message: format!("{}: {e}", path.display()) }
}

impl RunDir {
    /// Output root precedence: explicit flag, then the environment, then the
    /// config file, then `runs`.
    pub fn open(config: RunConfig, flag_root: Option<PathBuf>) -> CliResult<Self> {
        let base = flag_root
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .or_else(|| config.output_root.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));
        let root = base.join(&config.name);
        for sub in SUBDIRS {
            std::fs::create_dir_all(root.join(sub)).map_err(|e| io(&root.join(sub), e))?;
        }
        let config_text = config.to_toml()?;
        Ok(RunDir { root, config, config_text, inputs: BTreeMap::new(), outputs: BTreeMap::new() })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn manifest(&self) -> CliResult<Manifest> {
        let p = self.manifest_path();
        if !p.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&p).map_err(|e| io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::missing(format!("{}: unreadable manifest: {e}", p.display())))
    }

    /// Declares an input: it must exist, and if an earlier stage recorded it
    /// its checksum must still match.
    pub fn require(&mut self, rel: &str, producer: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if !p.is_file() {
            return Err(CliError::missing(format!("missing artifact {}; run `doge {producer}` first", p.display())));
        }
        let sha = sha256_file(&p)?;
        let manifest = self.manifest()?;
        for (stage, rec) in &manifest.stages {
            if let Some(recorded) = rec.outputs.get(rel) {
                if *recorded != sha {
                    return Err(CliError::missing(format!(
                        "checksum mismatch for {}: stage {stage} recorded {recorded}, found {sha}",
                        p.display()
                    )));
                }
            }
        }
        self.inputs.insert(rel.to_string(), sha);
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let p = self.path(rel);
        std::fs::write(&p, bytes).map_err(|e| io(&p, e))?;
        self.outputs.insert(rel.to_string(), sha256_bytes(bytes));
        Ok(p)
    }

    /// Records a file some library routine already wrote.
    pub fn record(&mut self, rel: &str) -> CliResult<()> {
        let sha = sha256_file(&self.path(rel))?;
        self.outputs.insert(rel.to_string(), sha);
        Ok(())
    }

    /// Echoes the resolved config and adds this stage to the manifest.
    pub fn commit(&mut self, stage: &str) -> CliResult<()> {
        let config_sha = sha256_bytes(self.config_text.as_bytes());
        let text = self.config_text.clone();
        self.write("config.toml", text.as_bytes())?;
        self.outputs.remove("config.toml");
        let mut m = self.manifest()?;
        m.tool = env!("CARGO_PKG_NAME").into();
        m.tool_version = env!("CARGO_PKG_VERSION").into();
        m.run = self.config.name.clone();
        m.config = "config.toml".into();
        m.config_sha256 = config_sha.clone();
        m.stages.insert(
            stage.to_string(),
            StageRecord {
                config_sha256: config_sha,
                seed: self.config.seed,
                inputs: std::mem::take(&mut self.inputs),
                outputs: std::mem::take(&mut self.outputs),
            },
        );
        let json = serde_json::to_string_pretty(&m).map_err(|e| CliError { code: 1, message: e.to_string() })?;
        let p = self.manifest_path();
        std::fs::write(&p, json + "\n").map_err(|e| io(&p, e))?;
        Ok(())
    }
}
