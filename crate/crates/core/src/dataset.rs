//! On-disk dataset layout.
//!
//! A dataset directory holds `images/<id>.pgm`, `annotations.json` and,
//! once generated, `labels/conf/<id>.ldcg` and `labels/size/<id>.ldcg`.
//! Synthetic datasets put one such directory per split under a root that
//! also carries `splits.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{read_grid, write_grid, Grid, Tensor3};
use crate::labelgen::Annotation;
use crate::pnm;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationsFile {
    pub images: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Byte offset of a 1-based line/column position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Reads and parses a JSON file, reporting parse errors with path and byte offset.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        offset: byte_offset(&text, e.line(), e.column()),
        source: e,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub annotations: Vec<Annotation>,
}

impl Dataset {
    pub fn annotations_path(root: &Path) -> PathBuf {
        root.join("annotations.json")
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.pgm"))
    }

    pub fn conf_label_path(&self, id: &str) -> PathBuf {
        self.root.join("labels").join("conf").join(format!("{id}.ldcg"))
    }

    pub fn size_label_path(&self, id: &str) -> PathBuf {
        self.root.join("labels").join("size").join(format!("{id}.ldcg"))
    }

    /// Loads and validates `annotations.json`; checks every image file exists.
    pub fn open(root: &Path) -> Result<Dataset> {
        let file: AnnotationsFile = read_json(&Self::annotations_path(root))?;
        let ds = Dataset {
            root: root.to_path_buf(),
            annotations: file.images,
        };
        for a in &ds.annotations {
            a.validate()?;
            let p = ds.image_path(&a.image_id);
            if !p.is_file() {
                return Err(Error::io(
                    &p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "image listed in annotations is missing"),
                ));
            }
        }
        Ok(ds)
    }

    pub fn read_image(&self, id: &str) -> Result<Tensor3> {
        pnm::read_image(&self.image_path(id))
    }

    /// Confidence and size label grids, checked against the annotation dims.
    pub fn read_labels(&self, ann: &Annotation) -> Result<(Grid, Grid)> {
        let conf = read_grid(&self.conf_label_path(&ann.image_id))?;
        let size = read_grid(&self.size_label_path(&ann.image_id))?;
        for g in [&conf, &size] {
            if g.dims() != (ann.height, ann.width) {
                return Err(Error::shape(format!(
                    "{}: label grid {}x{} vs image {}x{}",
                    ann.image_id,
                    g.height(),
                    g.width(),
                    ann.height,
                    ann.width
                )));
            }
        }
        Ok((conf, size))
    }

    pub fn write_labels(&self, id: &str, conf: &Grid, size: &Grid) -> Result<()> {
        for (path, g) in [(self.conf_label_path(id), conf), (self.size_label_path(id), size)] {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_grid(&path, g)?;
        }
        Ok(())
    }

    /// Creates a dataset directory from in-memory images and annotations.
    pub fn create(root: &Path, items: &[(Grid, Annotation)]) -> Result<Dataset> {
        let ds = Dataset {
            root: root.to_path_buf(),
            annotations: items.iter().map(|(_, a)| a.clone()).collect(),
        };
        fs::create_dir_all(root.join("images")).map_err(|e| Error::io(root, e))?;
        for (img, a) in items {
            pnm::write_pgm(&ds.image_path(&a.image_id), img)?;
        }
        write_json(
            &Self::annotations_path(root),
            &AnnotationsFile {
                images: ds.annotations.clone(),
            },
        )?;
        Ok(ds)
    }
}
