use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Serialize)]
struct Provenance<'a> {
    file: &'a str,
    command: &'a str,
    config_sha256: &'a str,
    seed: u64,
    tool: &'static str,
    tool_version: &'static str,
}

/// Output directory that stamps every CSV with a `<name>.meta.json` sidecar.
pub struct OutputDir {
    dir: PathBuf,
    command: &'static str,
    config_hash: String,
    seed: u64,
}

impl OutputDir {
    pub fn create(dir: PathBuf, command: &'static str, config_hash: String, seed: u64) -> CliResult<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self {
            dir,
            command,
            config_hash,
            seed,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_with<F>(&self, name: &str, body: F) -> CliResult<PathBuf>
    where
        F: FnOnce(&mut BufWriter<File>) -> CliResult<()>,
    {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w)?;
        w.flush().map_err(|e| CliError::io(&path, e))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    pub fn csv<F>(&self, name: &str, body: F) -> CliResult<PathBuf>
    where
        F: FnOnce(&mut BufWriter<File>) -> CliResult<()>,
    {
        let path = self.write_with(name, body)?;
        let meta = Provenance {
            file: name,
            command: self.command,
            config_sha256: &self.config_hash,
            seed: self.seed,
            tool: "clicktomo",
            tool_version: TOOL_VERSION,
        };
        self.json(&format!("{name}.meta.json"), &meta)?;
        Ok(path)
    }

    pub fn json<S: Serialize>(&self, name: &str, value: &S) -> CliResult<PathBuf> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(clicktomo::Error::from)?;
            writeln!(w).map_err(|e| CliError::io(Path::new(name), e))
        })
    }

    pub fn text(&self, name: &str, text: &str) -> CliResult<PathBuf> {
        self.write_with(name, |w| w.write_all(text.as_bytes()).map_err(|e| CliError::io(Path::new(name), e)))
    }
}

pub fn open(path: &Path) -> CliResult<File> {
    File::open(path).map_err(|e| CliError::io(path, e))
}

/// Wraps a core parse failure with the file it came from.
pub fn with_path<T>(path: &Path, r: clicktomo::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        clicktomo::Error::Parse { .. } => CliError::Core(e),
        other => CliError::Core(clicktomo::Error::Parse {
            path: path.to_path_buf(),
            message: other.to_string(),
        }),
    })
}
