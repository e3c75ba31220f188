//! Deterministic synthetic scenes: a random Gaussian object, a reference
//! database rendered at farthest-point-sampled rotations, and a query view.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::database::{
    build_database, write_embeddings, RefRecord, ReferenceDatabase, ReferenceInput, RefsManifest, EMBED_DIM,
};
use crate::error::{Error, Result};
use crate::gaussian::{synth_object, GaussianObject};
use crate::geometry::{fps_select, rotation_from_uniforms, CameraIntrinsics, RotationMatrix, SE3Pose};
use crate::image::{BinaryMask, RgbImage};
use crate::io::write_json;
use crate::ply::save_gaussian_ply;
use crate::render::{render, RenderOptions};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_refs: usize,
    /// Size of the random rotation pool FPS draws the references from.
    pub pool_size: usize,
    pub n_gaussians: usize,
    pub extent: f64,
    pub sh_degree: usize,
    pub depth_range: (f64, f64),
    /// Largest lateral offset of the query, as a fraction of its depth.
    pub lateral_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_refs: 64,
            pool_size: 1024,
            n_gaussians: 1500,
            extent: 0.1,
            sh_degree: 0,
            depth_range: (0.5, 0.8),
            lateral_fraction: 0.1,
        }
    }
}

/// Camera used when none is given: 640 x 480, f = 600 px.
pub fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).expect("valid default camera")
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub object: GaussianObject,
    pub gt_pose: SE3Pose,
    pub intrinsics: CameraIntrinsics,
    pub query: RgbImage,
    pub mask: BinaryMask,
    pub query_embedding: Vec<f64>,
    pub database: ReferenceDatabase,
    /// Reference views as rendered, for export.
    pub references: Vec<ReferenceInput>,
    /// Camera the references were rendered with.
    pub reference_intrinsics: CameraIntrinsics,
}

/// Injective embedding of a rotation: its flattened matrix, zero-padded to
/// the embedding width and normalized.
pub fn rotation_embedding(r: &RotationMatrix) -> Vec<f64> {
    let m = r.matrix();
    let mut v = vec![0.0; EMBED_DIM];
    for i in 0..9 {
        v[i] = m[(i / 3, i % 3)] / 3f64.sqrt();
    }
    v
}

pub fn random_rotation(rng: &mut impl Rng) -> RotationMatrix {
    rotation_from_uniforms(rng.random(), rng.random(), rng.random())
}

/// `n_pool` uniform rotations thinned to `n` by farthest-point sampling.
pub fn fps_rotations(rng: &mut impl Rng, n_pool: usize, n: usize) -> Result<Vec<RotationMatrix>> {
    let pool: Vec<RotationMatrix> = (0..n_pool).map(|_| random_rotation(rng)).collect();
    Ok(fps_select(&pool, n)?.into_iter().map(|i| pool[i]).collect())
}

pub fn synth_scene(seed: u64, k: &CameraIntrinsics, crop_size: u32) -> Result<SynthScene> {
    synth_scene_with(seed, k, crop_size, &SynthConfig::default())
}

pub fn synth_scene_with(seed: u64, k: &CameraIntrinsics, crop_size: u32, cfg: &SynthConfig) -> Result<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let object = synth_object(rng.random(), cfg.n_gaussians, cfg.extent, cfg.sh_degree)?;
    let opts = RenderOptions::default();

    // references fill an S x S view at tz_ref, so the preprocessing crop is
    // the identity
    let s = crop_size as f64;
    let k_ref = CameraIntrinsics::new(k.fx, k.fx, s / 2.0, s / 2.0, crop_size, crop_size)?;
    let tz_ref = object.diameter * k.fx / s;
    let rotations = fps_rotations(&mut rng, cfg.pool_size, cfg.n_refs)?;
    let mut references = Vec::with_capacity(rotations.len());
    for r in &rotations {
        let pose = SE3Pose::new(*r, Vector3::new(0.0, 0.0, tz_ref));
        let (img, _) = render(&object, &pose, &k_ref, &opts)?;
        references.push(ReferenceInput {
            pose,
            mask: img.alpha.threshold(0.5),
            embedding: rotation_embedding(r),
        });
    }
    let database = build_database("synthetic", &references, object.clone(), &k_ref, crop_size)?;

    let rotation = random_rotation(&mut rng);
    let z = rng.random_range(cfg.depth_range.0..=cfg.depth_range.1);
    let lateral = cfg.lateral_fraction * z;
    let gt_pose = SE3Pose::new(
        rotation,
        Vector3::new(rng.random_range(-lateral..=lateral), rng.random_range(-lateral..=lateral), z),
    );
    let (img, _) = render(&object, &gt_pose, k, &opts)?;
    let mask = img.alpha.threshold(0.5);
    if mask.area() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(SynthScene {
        object,
        gt_pose,
        intrinsics: *k,
        query: img.rgb,
        mask,
        query_embedding: rotation_embedding(&rotation),
        database,
        references,
        reference_intrinsics: k_ref,
    })
}

/// Paths written by [`SynthScene::save`].
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub object: PathBuf,
    pub query: PathBuf,
    pub mask: PathBuf,
    pub embedding: PathBuf,
    pub intrinsics: PathBuf,
    pub gt_pose: PathBuf,
    pub database: PathBuf,
    pub refs_manifest: PathBuf,
}

impl SynthScene {
    /// Writes the scene, the built database and a reference manifest that
    /// `build-db` can consume.
    pub fn save(&self, dir: &Path) -> Result<SynthFiles> {
        let refs_dir = dir.join("refs");
        fs::create_dir_all(&refs_dir).map_err(|e| Error::io(&refs_dir, e))?;
        let files = SynthFiles {
            object: dir.join("object.ply"),
            query: dir.join("query.png"),
            mask: dir.join("mask.png"),
            embedding: dir.join("embedding.f32"),
            intrinsics: dir.join("intrinsics.json"),
            gt_pose: dir.join("gt_pose.json"),
            database: dir.join("db"),
            refs_manifest: refs_dir.join("refs.json"),
        };
        save_gaussian_ply(&self.object, &files.object)?;
        self.query.save_png(&files.query)?;
        self.mask.save_png(&files.mask)?;
        write_embeddings(std::slice::from_ref(&self.query_embedding), &files.embedding)?;
        write_json(&self.intrinsics, &files.intrinsics)?;
        write_json(&self.gt_pose, &files.gt_pose)?;
        crate::database::save_database(&self.database, &files.database)?;

        let mut records = Vec::with_capacity(self.references.len());
        for (i, r) in self.references.iter().enumerate() {
            let name = format!("mask_{i:03}.png");
            r.mask.save_png(&refs_dir.join(&name))?;
            records.push(RefRecord {
                pose: r.pose,
                mask: name.into(),
            });
        }
        let rows: Vec<Vec<f64>> = self.references.iter().map(|r| r.embedding.clone()).collect();
        write_embeddings(&rows, &refs_dir.join("embeddings.f32"))?;
        RefsManifest {
            name: self.database.name.clone(),
            intrinsics: self.reference_intrinsics,
            crop_size: self.database.crop_size,
            embeddings: "embeddings.f32".into(),
            references: records,
        }
        .save(&files.refs_manifest)?;
        Ok(files)
    }
}
