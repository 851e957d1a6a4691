//! CSV writers and the registry of files that goes into the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// 17 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Coordinate column names `prefix0, prefix1, ...`.
pub fn axes(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|a| format!("{prefix}{a}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// A run directory. Every file written through it is hashed into the manifest.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn register(&mut self, rel: &str) {
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
    }

    pub fn csv<I>(&mut self, rel: &str, header: &[String], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush()?;
        self.register(rel);
        Ok(())
    }

    pub fn text(&mut self, rel: &str, contents: &str) -> Result<(), CliError> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, contents)?;
        self.register(rel);
        Ok(())
    }

    /// Registers a file written by someone else below the root.
    pub fn adopt(&mut self, rel: &str) {
        self.register(rel);
    }

    /// Hashes of every registered file, sorted by path.
    pub fn entries(&self) -> Result<Vec<FileEntry>, CliError> {
        let mut files = self.files.clone();
        files.sort();
        files
            .into_iter()
            .map(|rel| {
                let bytes = fs::read(self.root.join(&rel))?;
                Ok(FileEntry {
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                    path: rel,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(-2.5), "-2.5000000000000000e0");
        let x = std::f64::consts::PI;
        assert_eq!(num(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn registry_hashes_files() {
        let tmp = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(tmp.path()).unwrap();
        out.csv("b.csv", &["a".into()], vec![vec!["1".into()]]).unwrap();
        out.text("a.txt", "abc").unwrap();
        out.text("a.txt", "abc").unwrap();
        let e = out.entries().unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].path, "a.txt");
        assert_eq!(e[0].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(std::fs::read_to_string(tmp.path().join("b.csv")).unwrap(), "a\n1\n");
    }
}
