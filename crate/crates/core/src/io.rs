//! Token files, dataset manifests and evaluation reports.
//!
//! # Token file layout
//!
//! All integers little-endian. The header is 20 bytes:
//!
//! | offset | type    | field                      |
//! |--------|---------|----------------------------|
//! | 0      | [u8; 4] | magic `FTUR`               |
//! | 4      | u16     | version, must be 1         |
//! | 6      | u16     | flags, must be 0           |
//! | 8      | u32     | number of images           |
//! | 12     | u32     | token dimension `D`        |
//! | 16     | u16     | grid height                |
//! | 18     | u16     | grid width                 |
//!
//! The token count per image is `L = grid_h * grid_w`. The payload follows
//! immediately: `num_images * L * D` IEEE-754 `f32` values, image-major,
//! then token, then dimension.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalReport, TokenDataset};
use crate::token_model::{GridShape, TokenGrid};

pub const MAGIC: [u8; 4] = *b"FTUR";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenFileHeader {
    pub num_images: u32,
    pub dim: u32,
    pub grid_h: u16,
    pub grid_w: u16,
}

impl TokenFileHeader {
    pub fn tokens_per_image(&self) -> u64 {
        u64::from(self.grid_h) * u64::from(self.grid_w)
    }

    pub fn payload_len(&self) -> u64 {
        u64::from(self.num_images) * self.tokens_per_image() * u64::from(self.dim) * 4
    }

    pub fn shape(&self) -> GridShape {
        GridShape {
            len: self.tokens_per_image() as usize,
            dim: self.dim as usize,
            grid_h: self.grid_h as usize,
            grid_w: self.grid_w as usize,
        }
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..6].copy_from_slice(&VERSION.to_le_bytes());
        out[6..8].copy_from_slice(&0u16.to_le_bytes());
        out[8..12].copy_from_slice(&self.num_images.to_le_bytes());
        out[12..16].copy_from_slice(&self.dim.to_le_bytes());
        out[16..18].copy_from_slice(&self.grid_h.to_le_bytes());
        out[18..20].copy_from_slice(&self.grid_w.to_le_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                found: magic,
                offset: 0,
            });
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != VERSION {
            return Err(Error::BadVersion {
                found: version,
                offset: 4,
            });
        }
        let nonzero = |field, offset, value: u64| {
            if value == 0 {
                Err(Error::BadHeader {
                    field,
                    offset,
                    reason: "must be nonzero".into(),
                })
            } else {
                Ok(())
            }
        };
        let flags = u16_at(6);
        if flags != 0 {
            return Err(Error::BadHeader {
                field: "flags",
                offset: 6,
                reason: format!("must be 0, got {flags:#06x}"),
            });
        }
        let header = Self {
            num_images: u32_at(8),
            dim: u32_at(12),
            grid_h: u16_at(16),
            grid_w: u16_at(18),
        };
        nonzero("num_images", 8, header.num_images.into())?;
        nonzero("dim", 12, header.dim.into())?;
        nonzero("grid_h", 16, header.grid_h.into())?;
        nonzero("grid_w", 18, header.grid_w.into())?;
        Ok(header)
    }
}

/// Serializes grids into the token file format.
pub fn encode_tokens(grids: &[TokenGrid]) -> Result<Vec<u8>> {
    let first = grids
        .first()
        .ok_or_else(|| Error::ShapeMismatch("cannot write an empty token file".into()))?;
    let shape = first.shape();
    if let Some(g) = grids.iter().find(|g| g.shape() != shape) {
        return Err(Error::ShapeMismatch(format!(
            "grid `{}` has shape {:?}, file uses {:?}",
            g.image_id(),
            g.shape(),
            shape
        )));
    }
    let narrow = |v: usize, what: &str| -> Result<u16> {
        u16::try_from(v).map_err(|_| Error::ShapeMismatch(format!("{what} {v} exceeds u16")))
    };
    let header = TokenFileHeader {
        num_images: u32::try_from(grids.len())
            .map_err(|_| Error::ShapeMismatch("too many images".into()))?,
        dim: u32::try_from(shape.dim)
            .map_err(|_| Error::ShapeMismatch("dim exceeds u32".into()))?,
        grid_h: narrow(shape.grid_h, "grid height")?,
        grid_w: narrow(shape.grid_w, "grid width")?,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + header.payload_len() as usize);
    out.extend_from_slice(&header.to_bytes());
    for g in grids {
        for x in g.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a token file. Grids get ids `"{source}#{index}"`.
pub fn decode_tokens(bytes: &[u8], source: &str) -> Result<Vec<TokenGrid>> {
    let header = TokenFileHeader::parse(bytes)?;
    let payload = &bytes[HEADER_LEN..];
    let expected = header.payload_len();
    if (payload.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            actual: payload.len() as u64,
        });
    }
    if (payload.len() as u64) > expected {
        return Err(Error::BadHeader {
            field: "payload",
            offset: HEADER_LEN + expected as usize,
            reason: format!("{} trailing bytes", payload.len() as u64 - expected),
        });
    }
    let shape = header.shape();
    let per_image = shape.len * shape.dim * 4;
    payload
        .chunks_exact(per_image)
        .enumerate()
        .map(|(i, chunk)| {
            let tokens = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            TokenGrid::new(
                tokens,
                shape.dim,
                shape.grid_h,
                shape.grid_w,
                format!("{source}#{i}"),
            )
        })
        .collect()
}

pub fn write_tokens(grids: &[TokenGrid], path: &Path) -> Result<()> {
    let bytes = encode_tokens(grids)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_tokens(path: &Path) -> Result<Vec<TokenGrid>> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_tokens(&bytes, &path.display().to_string())
}

/// One manifest entry: image `index` of a token file, or every image of the
/// file when `index` is absent. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRef {
    pub file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub tokens: usize,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub classes: BTreeMap<String, Vec<TokenRef>>,
}

impl DatasetManifest {
    pub fn shape(&self) -> GridShape {
        GridShape {
            len: self.tokens,
            dim: self.dim,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    if manifest.grid_h * manifest.grid_w != manifest.tokens
        || manifest.tokens == 0
        || manifest.dim == 0
    {
        return Err(Error::Manifest(format!(
            "declared grid {}x{} does not match {} tokens of dim {}",
            manifest.grid_h, manifest.grid_w, manifest.tokens, manifest.dim
        )));
    }
    Ok(manifest)
}

/// Loads every grid referenced by a manifest, validating dimensions.
pub fn load_dataset(manifest_path: &Path) -> Result<TokenDataset> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let shape = manifest.shape();
    let mut files: HashMap<PathBuf, Vec<Arc<TokenGrid>>> = HashMap::new();
    let mut seen: HashSet<(PathBuf, u32)> = HashSet::new();
    let mut classes = BTreeMap::new();

    for (class, refs) in &manifest.classes {
        let mut grids = Vec::with_capacity(refs.len());
        for r in refs {
            let path = base.join(&r.file);
            if !files.contains_key(&path) {
                let bytes = std::fs::read(&path).map_err(|e| {
                    Error::Manifest(format!(
                        "class `{class}`: cannot read {}: {e}",
                        path.display()
                    ))
                })?;
                let header = TokenFileHeader::parse(&bytes)?;
                if header.shape() != shape {
                    return Err(Error::DimensionMismatch {
                        class: class.clone(),
                        file: path,
                        reason: format!(
                            "file holds {:?}, manifest declares {:?}",
                            header.shape(),
                            shape
                        ),
                    });
                }
                let source = r.file.display().to_string();
                let loaded = decode_tokens(&bytes, &source)?
                    .into_iter()
                    .map(Arc::new)
                    .collect();
                files.insert(path.clone(), loaded);
            }
            let available = &files[&path];
            let indices: Vec<u32> = match r.index {
                Some(i) => vec![i],
                None => (0..available.len() as u32).collect(),
            };
            for i in indices {
                let grid = available.get(i as usize).ok_or_else(|| {
                    Error::Manifest(format!(
                        "class `{class}`: {} has {} images, index {i} does not resolve",
                        path.display(),
                        available.len()
                    ))
                })?;
                if !seen.insert((path.clone(), i)) {
                    return Err(Error::Manifest(format!(
                        "{}#{i} is referenced more than once (class `{class}`)",
                        path.display()
                    )));
                }
                grids.push(Arc::clone(grid));
            }
        }
        classes.insert(class.clone(), grids);
    }
    TokenDataset::new(classes)
}

/// Writes one token file per class plus `manifest.json` into `dir`, and
/// returns the manifest path.
pub fn write_dataset(dataset: &TokenDataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let shape = dataset.shape();
    let mut classes = BTreeMap::new();
    for (i, (name, grids)) in dataset.classes().iter().enumerate() {
        let file = PathBuf::from(format!("class_{i:04}.ftur"));
        let owned: Vec<TokenGrid> = grids.iter().map(|g| (**g).clone()).collect();
        write_tokens(&owned, &dir.join(&file))?;
        classes.insert(name.clone(), vec![TokenRef { file, index: None }]);
    }
    let manifest = DatasetManifest {
        tokens: shape.len,
        dim: shape.dim,
        grid_h: shape.grid_h,
        grid_w: shape.grid_w,
        classes,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_json(path, report)
}

/// Per-episode accuracies as `episode,accuracy` CSV.
pub fn write_accuracy_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = String::from("episode,accuracy\n");
    for (i, acc) in report.per_episode.iter().enumerate() {
        text.push_str(&format!("{i},{acc}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
