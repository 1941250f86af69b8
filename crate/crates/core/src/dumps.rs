//! On-disk stage dumps: `<out>/<model>/<stage_id>.npy` plus a `dumps.json`
//! index next to them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;
use crate::tensor::RepresentationSet;

pub const INDEX_FILE: &str = "dumps.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpIndex {
    pub model: String,
    pub n: usize,
    /// Stage id to NPY path, relative to the index file's directory.
    pub stages: BTreeMap<usize, PathBuf>,
}

/// Writes every stage of `set` and returns the path of the index file.
pub fn write_dumps(set: &RepresentationSet, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = out_dir.as_ref().join(&set.model);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut stages = BTreeMap::new();
    for (id, rep) in set.iter() {
        let rel = PathBuf::from(format!("{id}.npy"));
        npy::write_tensor(rep, dir.join(&rel))?;
        stages.insert(id, rel);
    }
    let index = DumpIndex {
        model: set.model.clone(),
        n: set.n(),
        stages,
    };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a dump set from its `dumps.json` or from the directory holding it.
pub fn read_dumps(path: impl AsRef<Path>) -> Result<RepresentationSet> {
    let path = path.as_ref();
    let index_path = if path.is_dir() {
        path.join(INDEX_FILE)
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: DumpIndex = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: index_path.clone(),
        source: e,
    })?;
    let base = index_path.parent().unwrap_or(Path::new("."));
    let mut set = RepresentationSet::new(index.model, index.n).map_err(|e| Error::in_file(&index_path, e))?;
    for (id, rel) in index.stages {
        let file = base.join(&rel);
        let rep = npy::read_tensor(&file)?;
        set.insert(id, rep).map_err(|e| Error::in_file(&file, e))?;
    }
    Ok(set)
}
