//! Dataset manifest: a TOML document listing per-image tensor files.
//!
//! ```toml
//! patch_size = 14
//! feature_dim = 384
//! global_dim = 768      # optional
//! num_classes = 21      # optional
//!
//! [[records]]
//! id = "000001"
//! height = 448
//! width = 448
//! features = "feat/000001.dipt"
//! global = "glob/000001.dipt"     # optional
//! segments = "seg/000001.dipt"    # optional
//! labels = "lab/000001.dipt"      # optional
//! ```
//!
//! Relative paths resolve against the directory holding the manifest.

use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved label / segment id marking pixels that carry no class.
pub const IGNORE: u16 = u16::MAX;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    patch_size: usize,
    feature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    global_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    records: Vec<RawRecord>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    height: usize,
    width: usize,
    features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    global: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    global_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segments: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub features: PathBuf,
    pub global: Option<PathBuf>,
    pub segments: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory the manifest was loaded from (or will be written to).
    pub root: PathBuf,
    pub patch_size: usize,
    pub feature_dim: usize,
    pub global_dim: Option<usize>,
    pub num_classes: Option<usize>,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    /// Patch grid (rows, cols) of a record.
    pub fn grid(&self, record: &ImageRecord) -> (usize, usize) {
        (
            record.height.div_ceil(self.patch_size),
            record.width.div_ceil(self.patch_size),
        )
    }

    pub fn num_patches(&self, record: &ImageRecord) -> usize {
        let (r, c) = self.grid(record);
        r * c
    }

    pub fn total_patches(&self) -> usize {
        self.records.iter().map(|r| self.num_patches(r)).sum()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    /// Serializes the manifest, making paths under `root` relative to it.
    pub fn to_toml(&self) -> String {
        let rel = |p: &Path| relative_to(p, &self.root);
        let raw = RawManifest {
            patch_size: self.patch_size,
            feature_dim: self.feature_dim,
            global_dim: self.global_dim,
            num_classes: self.num_classes,
            records: self
                .records
                .iter()
                .map(|r| RawRecord {
                    id: r.id.clone(),
                    height: r.height,
                    width: r.width,
                    features: rel(&r.features),
                    feature_dim: None,
                    global: r.global.as_deref().map(rel),
                    global_dim: None,
                    segments: r.segments.as_deref().map(rel),
                    labels: r.labels.as_deref().map(rel),
                })
                .collect(),
        };
        toml::to_string(&raw).expect("manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

fn relative_to(path: &Path, root: &Path) -> PathBuf {
    path.strip_prefix(root)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| path.to_path_buf())
}

/// Lexically normalizes `.` and `..` components.
fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for comp in path.components() {
        match comp {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

fn absolute_dir(path: &Path) -> Result<PathBuf> {
    let dir = path.parent().unwrap_or(Path::new(""));
    if dir.is_absolute() {
        Ok(normalize(dir))
    } else {
        let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
        Ok(normalize(&cwd.join(dir)))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, &absolute_dir(path)?)
}

/// Parses manifest text, resolving relative paths against `root`.
pub fn parse_manifest(text: &str, root: &Path) -> Result<DatasetManifest> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Parse {
        field: "<document>".into(),
        reason: e.message().to_string(),
    })?;
    let raw: RawManifest = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        field: e.path().to_string(),
        reason: e.inner().message().to_string(),
    })?;

    let p = raw.patch_size;
    if p == 0 {
        return Err(Error::Parse {
            field: "patch_size".into(),
            reason: "must be at least 1".into(),
        });
    }
    if raw.feature_dim == 0 {
        return Err(Error::Parse {
            field: "feature_dim".into(),
            reason: "must be at least 1".into(),
        });
    }
    if raw.global_dim == Some(0) {
        return Err(Error::Parse {
            field: "global_dim".into(),
            reason: "must be at least 1".into(),
        });
    }
    if raw.num_classes == Some(0) {
        return Err(Error::Parse {
            field: "num_classes".into(),
            reason: "must be at least 1".into(),
        });
    }

    let mut records = Vec::with_capacity(raw.records.len());
    for (i, r) in raw.records.into_iter().enumerate() {
        if let Some(d) = r.feature_dim.filter(|&d| d != raw.feature_dim) {
            return Err(Error::Parse {
                field: format!("records[{i}].feature_dim"),
                reason: format!("{d} differs from shared feature_dim {}", raw.feature_dim),
            });
        }
        if let Some(g) = r.global_dim {
            if raw.global_dim != Some(g) {
                return Err(Error::Parse {
                    field: format!("records[{i}].global_dim"),
                    reason: format!("{g} differs from shared global_dim {:?}", raw.global_dim),
                });
            }
        }
        if r.height == 0 || r.width == 0 {
            return Err(Error::Geometry(format!(
                "record `{}`: empty image {}x{}",
                r.id, r.height, r.width
            )));
        }
        if r.height % p != 0 || r.width % p != 0 {
            return Err(Error::Geometry(format!(
                "record `{}`: {}x{} not divisible by patch size {p}",
                r.id, r.height, r.width
            )));
        }
        let resolve = |q: PathBuf| normalize(&root.join(q));
        records.push(ImageRecord {
            id: r.id,
            height: r.height,
            width: r.width,
            features: resolve(r.features),
            global: r.global.map(resolve),
            segments: r.segments.map(resolve),
            labels: r.labels.map(resolve),
        });
    }

    Ok(DatasetManifest {
        root: root.to_path_buf(),
        patch_size: p,
        feature_dim: raw.feature_dim,
        global_dim: raw.global_dim,
        num_classes: raw.num_classes,
        records,
    })
}
