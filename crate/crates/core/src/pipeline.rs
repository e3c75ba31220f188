//! End-to-end estimation: initial pose, crop, refinement.

use crate::database::ReferenceDatabase;
use crate::detect::{crop_image, DetectionBox};
use crate::error::{Error, Result};
use crate::gaussian::GaussianObject;
use crate::geometry::{crop_intrinsics, CameraIntrinsics, SE3Pose};
use crate::image::{BinaryMask, RgbImage};
use crate::initializer::estimate_initial_pose;
use crate::refine::{refine, RefinementConfig, RefinementTrace};

/// Refines `p_init` against the segmented query inside the square `bx`,
/// resampled to `crop_size`.
pub fn refine_in_crop(
    object: &GaussianObject,
    image: &RgbImage,
    mask: &BinaryMask,
    p_init: &SE3Pose,
    k: &CameraIntrinsics,
    bx: &DetectionBox,
    crop_size: u32,
    cfg: &RefinementConfig,
) -> Result<(SE3Pose, RefinementTrace)> {
    if image.width != k.width as usize || image.height != k.height as usize {
        return Err(Error::shape(format!(
            "image is {}x{}, camera is {}x{}",
            image.width, image.height, k.width, k.height
        )));
    }
    let query = crop_image(image, bx, crop_size as usize, Some(mask))?;
    let k_crop = crop_intrinsics(k, &bx.center_vec(), bx.scale, crop_size)?;
    refine(object, p_init, &query, &k_crop, cfg)
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub initial: SE3Pose,
    pub refined: SE3Pose,
    pub detection: DetectionBox,
    pub reference_index: usize,
    pub trace: RefinementTrace,
}

pub fn estimate_pose(
    db: &ReferenceDatabase,
    image: &RgbImage,
    mask: &BinaryMask,
    v_que: &[f64],
    k: &CameraIntrinsics,
    cfg: &RefinementConfig,
) -> Result<Estimate> {
    let (initial, detection, reference_index) = estimate_initial_pose(mask, v_que, db, k)?;
    let (refined, trace) = refine_in_crop(&db.object, image, mask, &initial, k, &detection, db.crop_size, cfg)?;
    Ok(Estimate {
        initial,
        refined,
        detection,
        reference_index,
        trace,
    })
}
