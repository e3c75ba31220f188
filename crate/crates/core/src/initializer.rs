//! Initial pose from retrieval and mask statistics.

use nalgebra::{Vector2, Vector3};

use crate::database::{normalize, ReferenceDatabase, ReferenceEntry};
use crate::detect::{crop_mask, mask_stats, DetectionBox, MaskStats};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RotationMatrix, SE3Pose};
use crate::image::BinaryMask;

/// Nearest reference by cosine similarity: `(index, rotation, scores)`.
/// Ties go to the lowest index.
pub fn retrieve_rotation(v_que: &[f64], db: &ReferenceDatabase) -> Result<(usize, RotationMatrix, Vec<f64>)> {
    if db.entries.is_empty() {
        return Err(Error::invalid("database has no entries"));
    }
    let dim = db.entries[0].embedding.len();
    if v_que.len() != dim {
        return Err(Error::EmbeddingShape(format!("query has {}, database {dim}", v_que.len())));
    }
    let q = normalize(v_que)?;
    let scores: Vec<f64> = db
        .entries
        .iter()
        .map(|e| e.embedding.iter().zip(&q).map(|(a, b)| a * b).sum())
        .collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((best, db.entries[best].rotation, scores))
}

/// Translation from the query's crop-resolution mask statistics relative to
/// a reference's, given the query box in full-image pixels.
pub fn recover_translation(
    que: &MaskStats,
    reference: &ReferenceEntry,
    que_box: &DetectionBox,
    k: &CameraIntrinsics,
) -> Result<Vector3<f64>> {
    if !(reference.mask_stats.area > 0.0) {
        return Err(Error::invalid("reference mask area is zero"));
    }
    if !(que.area >= 1.0) {
        return Err(Error::EmptyMask);
    }
    let s = reference.crop_size as f64;
    let delta_s = (que.area / reference.mask_stats.area).sqrt();
    let offset = Vector2::new(
        que.bbox_center[0] - reference.mask_stats.bbox_center[0],
        que.bbox_center[1] - reference.mask_stats.bbox_center[1],
    ) / s;
    let tz = reference.tz_ref * s / delta_s / que_box.scale;
    let p = que_box.scale * offset + que_box.center_vec();
    Ok(k.unproject(&p, tz))
}

/// Query box from the mask, crop-resolution statistics, retrieval and
/// translation recovery.
pub fn estimate_initial_pose(
    query_mask: &BinaryMask,
    v_que: &[f64],
    db: &ReferenceDatabase,
    k: &CameraIntrinsics,
) -> Result<(SE3Pose, DetectionBox, usize)> {
    let que_box = DetectionBox::from_mask(query_mask)?;
    let cropped = crop_mask(query_mask, &que_box, db.crop_size as usize)?;
    let stats = mask_stats(&cropped)?;
    let (j, rotation, _) = retrieve_rotation(v_que, db)?;
    let t = recover_translation(&stats, &db.entries[j], &que_box, k)?;
    Ok((SE3Pose::new(rotation, t), que_box, j))
}
