//! Dataset manifests and degradation-record sidecars.
//!
//! Paths inside a manifest are resolved against the manifest's directory
//! unless absolute.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tmage_core::data::{normalize_masks, resize_soft_mask, resize_to, LabeledSource};
use tmage_core::degrade::{DegradationRecord, RECORD_SCHEMA_VERSION};
use tmage_core::magenet::RSP_SCALES;
use tmage_core::FundusImage;

use crate::error::{AppError, ManifestError, Result};
use crate::io::{read_image, read_json, read_mask, write_json};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    LabeledHigh,
    UnlabeledLow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub role: Role,
    /// One full-resolution mask or one mask per RSP scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_paths: Option<Vec<PathBuf>>,
    /// Stored degraded counterpart of a labeled image; used instead of
    /// on-the-fly synthesis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub dataset: String,
    pub records: Vec<ManifestRecord>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(dataset: &str, records: Vec<ManifestRecord>) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            dataset: dataset.to_string(),
            records,
            base_dir: PathBuf::new(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.role == role)
    }

    fn validate(&self, path: &Path) -> Result<(), ManifestError> {
        let schema = |detail: String| ManifestError::Schema {
            path: path.to_path_buf(),
            detail,
        };
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(schema(format!(
                "unsupported schema_version {} (expected {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.records.is_empty() {
            return Err(ManifestError::Empty(path.to_path_buf()));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.id.is_empty() {
                return Err(schema("record with an empty id".into()));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(ManifestError::DuplicateId {
                    path: path.to_path_buf(),
                    id: r.id.clone(),
                });
            }
            if r.role == Role::UnlabeledLow
                && (r.mask_paths.is_some() || r.degraded_path.is_some() || r.record_path.is_some())
            {
                return Err(schema(format!("unlabeled record {:?} may only carry image_path", r.id)));
            }
            if let Some(m) = &r.mask_paths {
                if m.len() != 1 && m.len() != RSP_SCALES {
                    return Err(schema(format!(
                        "record {:?} lists {} masks, expected 1 or {RSP_SCALES}",
                        r.id,
                        m.len()
                    )));
                }
            }
            let paths = std::iter::once(&r.image_path)
                .chain(r.mask_paths.iter().flatten())
                .chain(&r.degraded_path)
                .chain(&r.record_path);
            for p in paths {
                let target = self.resolve(p);
                if !target.is_file() {
                    return Err(ManifestError::DanglingPath {
                        path: path.to_path_buf(),
                        id: r.id.clone(),
                        target,
                    });
                }
            }
        }
        Ok(())
    }

    /// Canonical serialized form.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Parses and validates a manifest; record order is preserved.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    if !path.is_file() {
        return Err(ManifestError::Missing(path.to_path_buf()).into());
    }
    let text = fs::read(path).map_err(|e| AppError::io(path, e))?;
    let mut m: Manifest = serde_json::from_slice(&text).map_err(|e| ManifestError::Schema {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate(path)?;
    Ok(m)
}

fn fit_image(img: FundusImage, side: Option<usize>) -> Result<FundusImage> {
    match side {
        Some(s) if (img.height(), img.width()) != (s, s) => Ok(tmage_core::data::resize(&img, s)?),
        _ => Ok(img),
    }
}

/// Loads every labeled record, resizing to `side` when given. Masks are
/// resized with the image and expanded into their pyramid.
pub fn load_labeled(m: &Manifest, side: Option<usize>) -> Result<Vec<LabeledSource>> {
    m.with_role(Role::LabeledHigh)
        .map(|r| {
            let high = fit_image(read_image(&m.resolve(&r.image_path))?, side)?;
            let (h, w) = (high.height(), high.width());
            let masks = match &r.mask_paths {
                None => None,
                Some(paths) => {
                    let raw = paths
                        .iter()
                        .enumerate()
                        .map(|(v, p)| Ok(resize_soft_mask(&read_mask(&m.resolve(p))?, h >> v, w >> v)))
                        .collect::<Result<Vec<_>>>()?;
                    Some(normalize_masks(&raw, h, w)?)
                }
            };
            let low = match &r.degraded_path {
                None => None,
                Some(p) => {
                    let low = read_image(&m.resolve(p))?;
                    Some(if low.same_shape(&high) { low } else { resize_to(&low, h, w)? })
                }
            };
            Ok(LabeledSource {
                id: r.id.clone(),
                high,
                masks,
                low,
            })
        })
        .collect()
}

/// Loads every unlabeled image, resizing to `side` when given.
pub fn load_unlabeled(m: &Manifest, side: Option<usize>) -> Result<Vec<FundusImage>> {
    m.with_role(Role::UnlabeledLow)
        .map(|r| fit_image(read_image(&m.resolve(&r.image_path))?, side))
        .collect()
}

/// Reads a degradation-record sidecar, checking its schema version.
pub fn load_record(path: &Path) -> Result<DegradationRecord> {
    let r: DegradationRecord = read_json(path)?;
    if r.schema_version != RECORD_SCHEMA_VERSION {
        return Err(AppError::Failed(format!(
            "{}: unsupported record schema_version {} (expected {RECORD_SCHEMA_VERSION})",
            path.display(),
            r.schema_version
        )));
    }
    Ok(r)
}

pub fn save_record(path: &Path, record: &DegradationRecord) -> Result<()> {
    write_json(path, record)
}
