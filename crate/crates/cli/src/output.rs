use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use crate::CliResult;

/// Machine-readable result of one subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub command: String,
    pub config: Value,
    pub metrics: Value,
    pub artifacts: Vec<String>,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
    pub version: String,
    pub git_describe: String,
}

/// Writes to a sibling temporary file, then renames over the target.
pub fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// CSV text from a header and rows of displayable cells.
pub fn csv_text<S: AsRef<str>>(header: &[S], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn cells<T: Display>(values: impl IntoIterator<Item = T>) -> Vec<String> {
    values.into_iter().map(|v| v.to_string()).collect()
}

/// Tracks the files a run reads and writes and produces its manifest.
pub struct Run {
    command: String,
    argv: Vec<String>,
    out_dir: PathBuf,
    started: Instant,
    started_unix_secs: u64,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Run {
    pub fn new(command: &str, argv: &[String], out_dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(out_dir)?;
        Ok(Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
            started_unix_secs: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    /// Records a file written by the library itself.
    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&mut self, path: &Path, contents: &str) -> CliResult<()> {
        write_atomic(path, contents.as_bytes())?;
        self.output(path);
        Ok(())
    }

    /// Writes `<command>_metrics.json` and `<command>_manifest.json`.
    pub fn finish(mut self, config: Value, metrics: Value) -> CliResult<Metrics> {
        let metrics_path = self.path(&format!("{}_metrics.json", self.command));
        let manifest_path = self.path(&format!("{}_manifest.json", self.command));
        let mut artifacts = self.outputs.clone();
        artifacts.push(metrics_path.display().to_string());
        let report = Metrics { command: self.command.clone(), config: config.clone(), metrics, artifacts };
        self.write(&metrics_path, &serde_json::to_string_pretty(&report)?)?;
        let mut outputs = self.outputs.clone();
        outputs.push(manifest_path.display().to_string());
        let manifest = RunManifest {
            command: self.command.clone(),
            argv: self.argv.clone(),
            config,
            seeds: self.seeds.clone(),
            inputs: self.inputs.clone(),
            outputs,
            started_unix_secs: self.started_unix_secs,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            git_describe: env!("RELFEAT_GIT_DESCRIBE").to_string(),
        };
        write_atomic(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(report)
    }
}
