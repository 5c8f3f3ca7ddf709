//! On-disk corpora: `<out>/<kind>/<index>.mtr` plus `<out>/<kind>/manifest.json`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::isa::Program;
use crate::trace::{parse_program, ParseError};
use crate::workload::{generate_workload, SizeWeight, WorkloadError, WorkloadKind, WorkloadSpec};

pub const MANIFEST: &str = "manifest.json";
pub const EXTENSION: &str = "mtr";

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    kind: WorkloadKind,
    seed: u64,
    count: usize,
    size_distribution: &'a [SizeWeight],
    preamble: usize,
    gap_allocations: usize,
    reuse_cycles: usize,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: ParseError },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn file_name(index: usize) -> String {
    format!("{index:06}.{EXTENSION}")
}

/// Generates the workload and writes it under `out/<kind>/`. Returns the
/// corpus directory.
pub fn write_corpus(spec: &WorkloadSpec, out: &Path) -> Result<PathBuf, CorpusError> {
    let programs = generate_workload(spec)?;
    let dir = out.join(spec.kind.name());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (i, p) in programs.iter().enumerate() {
        let path = dir.join(file_name(i));
        fs::write(&path, p.render()).map_err(io_err(&path))?;
    }
    let manifest = Manifest {
        kind: spec.kind,
        seed: spec.seed,
        count: spec.count,
        size_distribution: &spec.size_distribution,
        preamble: spec.preamble,
        gap_allocations: spec.gap_allocations,
        reuse_cycles: spec.reuse_cycles,
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(dir)
}

/// Reads every `.mtr` file in `dir`, in file-name order.
pub fn read_corpus(dir: &Path) -> Result<Vec<(PathBuf, Program)>, CorpusError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == EXTENSION))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let program = parse_program(&text).map_err(|source| CorpusError::Parse {
                path: path.clone(),
                source,
            })?;
            Ok((path, program))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::parse_size_distribution;

    #[test]
    fn write_then_read() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = WorkloadSpec::new(WorkloadKind::Benign, parse_size_distribution("24:1,40:1").unwrap(), 5, 3);
        let dir = write_corpus(&spec, tmp.path()).unwrap();
        assert_eq!(dir, tmp.path().join("benign"));
        let back = read_corpus(&dir).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back[0].1, generate_workload(&spec).unwrap()[0]);
        let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(manifest["kind"], "benign");
        assert_eq!(manifest["count"], 5);
        assert_eq!(manifest["size_distribution"][1]["size"], 40);
    }
}
