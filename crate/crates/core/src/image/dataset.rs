use std::path::Path;

use rayon::prelude::*;

use super::plane::ImagePlane;
use super::pnm::read_pnm;
use crate::error::{Error, Result};

/// Images keyed by identifier (file stem), sorted lexicographically.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    entries: Vec<(String, ImagePlane)>,
}

impl Dataset {
    /// Builds a dataset, sorting by identifier and rejecting duplicates.
    pub fn new(mut entries: Vec<(String, ImagePlane)>) -> Result<Self> {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Config(format!("duplicate image identifier {:?}", w[0].0)));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, ImagePlane)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ImagePlane)> {
        self.entries.iter().map(|(id, img)| (id.as_str(), img))
    }
}

/// Loads every P5/P6 file in `dir` (non-recursive) whose file name matches
/// `pattern`. RGB files are converted to luma.
pub fn load_dataset(dir: &Path, pattern: &str) -> Result<Dataset> {
    let matcher = glob::Pattern::new(pattern).map_err(|e| Error::Config(format!("bad pattern {pattern:?}: {e}")))?;
    let io_err = |path: &Path, source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let matched = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| matcher.matches(n));
        if matched && path.is_file() {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(Error::EmptyDataset(format!("{}/{pattern}", dir.display())));
    }
    paths.sort();

    let entries = paths
        .par_iter()
        .map(|path| {
            let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
            let img = read_pnm(&bytes).and_then(|p| p.into_luma()).map_err(|e| match e {
                Error::Parse { offset, message } => Error::Parse {
                    offset,
                    message: format!("{}: {message}", path.display()),
                },
                other => other,
            })?;
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((id, img))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(entries)
}
