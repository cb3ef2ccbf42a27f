//! Run manifests: the command, its full configuration and digests of its inputs.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use bevtraj::{Error, Result};

use crate::config::PipelineConfig;

pub const MANIFEST_FILE: &str = "manifest.txt";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn feed_file(hasher: &mut Sha256, path: &Path) -> Result<()> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Ok(());
        }
        hasher.update(&buf[..n]);
    }
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            files_under(&path, out)?;
        } else if path.file_name().and_then(|n| n.to_str()) != Some(MANIFEST_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

/// SHA-256 of a file, or of a directory's files (relative path and contents,
/// in sorted path order, manifests excluded).
pub fn digest_path(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        files_under(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0u8]);
            feed_file(&mut hasher, &f)?;
        }
    } else {
        feed_file(&mut hasher, path)?;
    }
    Ok(hex(&hasher.finalize()))
}

pub struct Manifest {
    command: String,
    config: String,
    inputs: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, config: &PipelineConfig) -> Self {
        Manifest {
            command: command.to_string(),
            config: config.to_text(),
            inputs: Vec::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        let digest = digest_path(path)?;
        self.inputs.push((name.to_string(), digest));
        Ok(())
    }

    /// Lines are valid config text: feeding a manifest back through
    /// `--config` reproduces the run.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "version = {}", env!("CARGO_PKG_VERSION"));
        s.push_str(&self.config);
        for (name, digest) in &self.inputs {
            let _ = writeln!(s, "input.{name} = sha256:{digest}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
