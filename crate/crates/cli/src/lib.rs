//! Batch front end for the `leadtwin` battery toolkit.
//!
//! Every command computes its outputs in memory and only then writes them,
//! so a failing run leaves nothing behind.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod args;
pub mod commands;
mod error;
pub mod units;

use std::path::{Path, PathBuf};

pub use args::{Cli, Command};
pub use error::CliError;

use error::io_err;

/// Named output files of one command, in write order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn add(&mut self, name: &str, contents: impl Into<Vec<u8>>) {
        self.files.retain(|(n, _)| n != name);
        self.files.push((name.to_string(), contents.into()));
    }

    pub fn extend(&mut self, other: Artifacts) {
        for (n, c) in other.files {
            self.add(&n, c);
        }
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    /// Writes every file under `dir`. On failure the files already written
    /// by this call are removed again.
    pub fn commit(&self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut written = Vec::new();
        for (name, contents) in &self.files {
            let path = dir.join(name);
            if let Err(e) = std::fs::write(&path, contents) {
                for p in written.iter().chain(std::iter::once(&path)) {
                    let _ = std::fs::remove_file(p);
                }
                return Err(io_err(path)(e));
            }
            written.push(path);
        }
        Ok(written)
    }
}

/// Runs one parsed command and writes its artifacts.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let (artifacts, out) = match &cli.command {
        Command::SimHppc(a) => (commands::sim_hppc(a)?.artifacts, &a.out.out),
        Command::FitParams(a) => (commands::fit_params(a)?.artifacts, &a.out.out),
        Command::RunEkf(a) => (commands::run_ekf(a)?.artifacts, &a.out.out),
        Command::RunCc(a) => (commands::run_cc(a)?.artifacts, &a.out.out),
        Command::Pipeline(a) => (commands::pipeline(a)?.artifacts, &a.out.out),
    };
    artifacts.commit(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_cleans_up_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Artifacts::default();
        a.add("one.txt", "1");
        // A directory in the way of the second file makes its write fail.
        std::fs::create_dir(dir.path().join("two.txt")).unwrap();
        a.add("two.txt", "2");
        let err = a.commit(dir.path()).unwrap_err();
        assert_eq!(err.code(), "E_IO");
        assert!(!dir.path().join("one.txt").exists());
    }

    #[test]
    fn add_replaces_same_name() {
        let mut a = Artifacts::default();
        a.add("x", "1");
        a.add("x", "2");
        assert_eq!(a.get("x"), Some(&b"2"[..]));
        assert_eq!(a.names().count(), 1);
    }
}
