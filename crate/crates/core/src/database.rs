//! Reference database: preprocessing of posed references, assembly and
//! on-disk layout.
//!
//! A database directory holds `manifest.json`, the Gaussian object as
//! `object.ply` and the entry embeddings as little-endian f32 rows in
//! `embeddings.f32`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detect::{crop_mask, mask_stats, DetectionBox, MaskStats};
use crate::error::{Error, Result};
use crate::gaussian::GaussianObject;
use crate::geometry::{CameraIntrinsics, RotationMatrix, SE3Pose};
use crate::image::BinaryMask;
use crate::ply::{load_gaussian_ply, save_gaussian_ply};

pub const EMBED_DIM: usize = 64;
pub const DEFAULT_CROP_SIZE: u32 = 224;
pub const FORMAT_VERSION: &str = "gspose-db/1";
const MANIFEST: &str = "manifest.json";
const OBJECT_FILE: &str = "object.ply";
const EMBEDDINGS_FILE: &str = "embeddings.f32";
const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEntry {
    pub embedding: Vec<f64>,
    pub rotation: RotationMatrix,
    /// Mask statistics at crop resolution.
    pub mask_stats: MaskStats,
    pub tz_ref: f64,
    pub crop_size: u32,
}

impl ReferenceEntry {
    pub fn validate(&self) -> Result<()> {
        if self.embedding.len() != EMBED_DIM {
            return Err(Error::EmbeddingShape(format!(
                "entry has {} values, expected {EMBED_DIM}",
                self.embedding.len()
            )));
        }
        let n = norm(&self.embedding);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(format!("entry embedding norm {n} is not 1")));
        }
        if !(self.tz_ref > 0.0) {
            return Err(Error::invalid("tz_ref must be positive"));
        }
        if !(self.mask_stats.area >= 1.0) {
            return Err(Error::EmptyMask);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDatabase {
    pub name: String,
    pub crop_size: u32,
    pub entries: Vec<ReferenceEntry>,
    pub object_embedding: Vec<f64>,
    pub object: GaussianObject,
    pub diameter: f64,
}

impl ReferenceDatabase {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::invalid("database has no entries"));
        }
        for e in &self.entries {
            e.validate()?;
            if e.crop_size != self.crop_size {
                return Err(Error::invalid("entry crop size differs from the database"));
            }
        }
        if (norm(&self.object_embedding) - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid("object embedding is not unit norm"));
        }
        if !(self.diameter > 0.0) {
            return Err(Error::invalid("object diameter must be positive"));
        }
        self.object.validate()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Reference crop box and the normalized reference distance.
///
/// The box is centered on the projection of the object origin with side
/// `d_obj * fx / t_z`; `tz_ref = d_obj * fx / S` is the depth at which the
/// object fills an `S` crop.
pub fn preprocess_reference(
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    d_obj: f64,
    crop_size: u32,
) -> Result<(DetectionBox, f64)> {
    let t = pose.translation;
    if !(t.z > 0.0) {
        return Err(Error::BehindCamera);
    }
    let c = k.project(&t)?;
    let bx = DetectionBox::new([c.x, c.y], d_obj * k.fx / t.z)?;
    Ok((bx, d_obj * k.fx / crop_size as f64))
}

/// One posed reference view with its mask and embedding row.
#[derive(Debug, Clone)]
pub struct ReferenceInput {
    pub pose: SE3Pose,
    pub mask: BinaryMask,
    pub embedding: Vec<f64>,
}

pub fn build_database(
    name: &str,
    refs: &[ReferenceInput],
    object: GaussianObject,
    k: &CameraIntrinsics,
    crop_size: u32,
) -> Result<ReferenceDatabase> {
    if refs.is_empty() {
        return Err(Error::invalid("no reference views"));
    }
    if crop_size == 0 {
        return Err(Error::invalid("crop size must be positive"));
    }
    let diameter = object.diameter;
    let mut entries = Vec::with_capacity(refs.len());
    for (i, r) in refs.iter().enumerate() {
        if r.embedding.len() != EMBED_DIM {
            return Err(Error::EmbeddingShape(format!(
                "reference {i} has {} values, expected {EMBED_DIM}",
                r.embedding.len()
            )));
        }
        if r.mask.width != k.width as usize || r.mask.height != k.height as usize {
            return Err(Error::shape(format!("reference {i} mask does not match the camera")));
        }
        let (bx, tz_ref) = preprocess_reference(&r.pose, k, diameter, crop_size)?;
        let cropped = crop_mask(&r.mask, &bx, crop_size as usize)?;
        let stats = mask_stats(&cropped).map_err(|_| Error::invalid(format!("reference {i} mask is empty")))?;
        entries.push(ReferenceEntry {
            embedding: normalize(&r.embedding)?,
            rotation: r.pose.rotation,
            mask_stats: stats,
            tz_ref,
            crop_size,
        });
    }
    let object_embedding = pool_embeddings(&entries)?;
    let db = ReferenceDatabase {
        name: name.to_string(),
        crop_size,
        entries,
        object_embedding,
        object,
        diameter,
    };
    db.validate()?;
    Ok(db)
}

/// Normalized mean of the entry embeddings.
pub fn pool_embeddings(entries: &[ReferenceEntry]) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; EMBED_DIM];
    for e in entries {
        for (m, v) in mean.iter_mut().zip(&e.embedding) {
            *m += v;
        }
    }
    normalize(&mean)
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryRecord {
    rotation: [f64; 9],
    tz_ref: f64,
    mask_area: f64,
    mask_bbox_center: [f64; 2],
    mask_bbox_scale: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    name: String,
    crop_size: u32,
    diameter: f64,
    object: String,
    embeddings: String,
    embeddings_sha256: String,
    embedding_dim: usize,
    object_embedding: Vec<f64>,
    entries: Vec<EntryRecord>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_f32_rows(rows: &[Vec<f64>]) -> Vec<u8> {
    rows.iter()
        .flat_map(|r| r.iter().flat_map(|&v| (v as f32).to_le_bytes()))
        .collect()
}

/// Splits little-endian f32 bytes into rows of `dim`.
pub fn decode_f32_rows(bytes: &[u8], dim: usize) -> Result<Vec<Vec<f64>>> {
    if dim == 0 || bytes.len() % (4 * dim) != 0 {
        return Err(Error::EmbeddingShape(format!(
            "{} bytes is not a whole number of {dim}-float rows",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4 * dim)
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect()
        })
        .collect())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_f32_rows(&bytes, EMBED_DIM)
}

pub fn write_embeddings(rows: &[Vec<f64>], path: &Path) -> Result<()> {
    fs::write(path, encode_f32_rows(rows)).map_err(|e| Error::io(path, e))
}

pub fn save_database(db: &ReferenceDatabase, dir: &Path) -> Result<()> {
    db.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows: Vec<Vec<f64>> = db.entries.iter().map(|e| e.embedding.clone()).collect();
    let bytes = encode_f32_rows(&rows);
    let emb_path = dir.join(EMBEDDINGS_FILE);
    fs::write(&emb_path, &bytes).map_err(|e| Error::io(&emb_path, e))?;
    save_gaussian_ply(&db.object, &dir.join(OBJECT_FILE))?;
    let manifest = Manifest {
        version: FORMAT_VERSION.to_string(),
        name: db.name.clone(),
        crop_size: db.crop_size,
        diameter: db.diameter,
        object: OBJECT_FILE.to_string(),
        embeddings: EMBEDDINGS_FILE.to_string(),
        embeddings_sha256: hex(&Sha256::digest(&bytes)),
        embedding_dim: EMBED_DIM,
        object_embedding: db.object_embedding.clone(),
        entries: db
            .entries
            .iter()
            .map(|e| {
                let m = e.rotation.matrix();
                EntryRecord {
                    rotation: std::array::from_fn(|i| m[(i / 3, i % 3)]),
                    tz_ref: e.tz_ref,
                    mask_area: e.mask_stats.area,
                    mask_bbox_center: e.mask_stats.bbox_center,
                    mask_bbox_scale: e.mask_stats.bbox_square_scale,
                }
            })
            .collect(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_database(dir: &Path) -> Result<ReferenceDatabase> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    let version = raw.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version.to_string()));
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    if m.embedding_dim != EMBED_DIM {
        return Err(Error::EmbeddingShape(format!(
            "manifest dimension {}, expected {EMBED_DIM}",
            m.embedding_dim
        )));
    }
    let emb_path = dir.join(&m.embeddings);
    let bytes = fs::read(&emb_path).map_err(|e| Error::io(&emb_path, e))?;
    if bytes.len() != m.entries.len() * EMBED_DIM * 4 {
        return Err(Error::EmbeddingShape(format!(
            "{} bytes for {} entries of {EMBED_DIM} floats",
            bytes.len(),
            m.entries.len()
        )));
    }
    if hex(&Sha256::digest(&bytes)) != m.embeddings_sha256 {
        return Err(Error::Checksum(emb_path.display().to_string()));
    }
    let rows = decode_f32_rows(&bytes, EMBED_DIM)?;
    let object = load_gaussian_ply(&dir.join(&m.object))?;
    let mut entries = Vec::with_capacity(rows.len());
    for (rec, row) in m.entries.iter().zip(rows) {
        let rotation = RotationMatrix::with_tolerance(Matrix3::from_row_slice(&rec.rotation), 1e-6)?;
        entries.push(ReferenceEntry {
            embedding: row,
            rotation,
            mask_stats: MaskStats {
                area: rec.mask_area,
                bbox_center: rec.mask_bbox_center,
                bbox_square_scale: rec.mask_bbox_scale,
            },
            tz_ref: rec.tz_ref,
            crop_size: m.crop_size,
        });
    }
    let db = ReferenceDatabase {
        name: m.name,
        crop_size: m.crop_size,
        entries,
        object_embedding: m.object_embedding,
        object,
        diameter: m.diameter,
    };
    db.validate()?;
    Ok(db)
}

/// One reference view in a build manifest; paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefRecord {
    pub pose: SE3Pose,
    pub mask: PathBuf,
}

/// Input description for assembling a database from files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefsManifest {
    #[serde(default = "default_name")]
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    #[serde(default = "default_crop")]
    pub crop_size: u32,
    /// N x 64 little-endian f32, one row per reference.
    pub embeddings: PathBuf,
    pub references: Vec<RefRecord>,
}

fn default_name() -> String {
    "object".to_string()
}

fn default_crop() -> u32 {
    DEFAULT_CROP_SIZE
}

impl RefsManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads masks and embeddings and builds the database around `object`.
    pub fn build(&self, base: &Path, object: GaussianObject) -> Result<ReferenceDatabase> {
        let rows = read_embeddings(&base.join(&self.embeddings))?;
        if rows.len() != self.references.len() {
            return Err(Error::EmbeddingShape(format!(
                "{} embedding rows for {} references",
                rows.len(),
                self.references.len()
            )));
        }
        let mut refs = Vec::with_capacity(rows.len());
        for (r, embedding) in self.references.iter().zip(rows) {
            refs.push(ReferenceInput {
                pose: r.pose,
                mask: BinaryMask::load_png(&base.join(&r.mask))?,
                embedding,
            });
        }
        build_database(&self.name, &refs, object, &self.intrinsics, self.crop_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn preprocess_examples() {
        let k = CameraIntrinsics::new(560.0, 560.0, 320.0, 240.0, 640, 480).unwrap();
        let pose = SE3Pose::new(RotationMatrix::identity(), Vector3::new(0.0, 0.0, 0.5));
        let (bx, tz_ref) = preprocess_reference(&pose, &k, 0.2, 224).unwrap();
        assert!((bx.scale - 224.0).abs() < 1e-12);
        assert_eq!(bx.center, [320.0, 240.0]);
        assert!((tz_ref - 0.5).abs() < 1e-15);
        let far = SE3Pose::new(RotationMatrix::identity(), Vector3::new(0.0, 0.0, 1.0));
        let (bx2, _) = preprocess_reference(&far, &k, 0.2, 224).unwrap();
        assert!((bx2.scale - 112.0).abs() < 1e-12);
        let behind = SE3Pose::new(RotationMatrix::identity(), Vector3::new(0.0, 0.0, -1.0));
        assert!(preprocess_reference(&behind, &k, 0.2, 224).is_err());
    }

    #[test]
    fn f32_rows_round_trip_and_shape_errors() {
        let rows = vec![vec![0.5; EMBED_DIM], vec![-0.25; EMBED_DIM]];
        let bytes = encode_f32_rows(&rows);
        assert_eq!(decode_f32_rows(&bytes, EMBED_DIM).unwrap(), rows);
        let err = decode_f32_rows(&bytes[..bytes.len() - 4], EMBED_DIM).unwrap_err();
        assert!(err.to_string().starts_with("embedding shape mismatch"));
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(normalize(&[0.0; 4]).is_err());
        let n = normalize(&[3.0, 4.0]).unwrap();
        assert_eq!(n, vec![0.6, 0.8]);
    }
}
