//! Python bindings. Images cross the boundary as flat row-major lists
//! (`height * width * 3` floats in [0, 1] for RGB, `height * width` bools
//! for masks), poses as `Pose` objects.

use std::path::PathBuf;

use gs::database::{load_database, save_database, ReferenceDatabase};
use gs::geometry::{geodesic_distance, quat_to_rotation, CameraIntrinsics, RotationMatrix, SE3Pose};
use gs::gaussian::{synth_object, GaussianObject};
use gs::image::{BinaryMask, RgbImage};
use gs::initializer::estimate_initial_pose;
use gs::losses::gs_loss;
use gs::metrics::{add_error, adds_error, proj2d_error, rotation_error_deg};
use gs::pipeline::{estimate_pose, refine_in_crop};
use gs::detect::DetectionBox;
use gs::ply::{load_gaussian_ply, load_ply_points, save_gaussian_ply};
use gs::refine::{RefinementConfig, RefinementTrace, StopRule};
use gs::render::{render as render_core, RenderOptions};
use gs::synth::{default_camera, synth_scene};
use nalgebra::{Matrix3, Vector3};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: gs::Error) -> PyErr {
    match e {
        gs::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for gs::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "Pose", module = "gspose", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Pose(SE3Pose);

#[pymethods]
impl Pose {
    /// Object-to-camera pose from a 3x3 rotation and a translation in meters.
    #[new]
    #[pyo3(signature = (R, t))]
    #[allow(non_snake_case)]
    fn new(R: [[f64; 3]; 3], t: [f64; 3]) -> PyResult<Self> {
        let m = Matrix3::from_fn(|i, j| R[i][j]);
        Ok(Pose(SE3Pose::new(RotationMatrix::new(m).py()?, Vector3::from(t))))
    }

    #[staticmethod]
    fn identity() -> Self {
        Pose(SE3Pose::identity())
    }

    /// From a `(w, x, y, z)` quaternion, normalized first.
    #[staticmethod]
    fn from_quaternion(q: [f64; 4], t: [f64; 3]) -> PyResult<Self> {
        Ok(Pose(SE3Pose::new(quat_to_rotation(q).py()?, Vector3::from(t))))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text)
            .map(Pose)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("pose serializes")
    }

    #[getter(R)]
    fn rotation(&self) -> [[f64; 3]; 3] {
        let m = self.0.rotation.matrix();
        std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
    }

    #[getter]
    fn t(&self) -> [f64; 3] {
        self.0.translation.into()
    }

    fn quaternion(&self) -> [f64; 4] {
        self.0.rotation.to_quaternion()
    }

    fn compose(&self, other: &Pose) -> Pose {
        Pose(self.0.compose(&other.0))
    }

    fn inverse(&self) -> Pose {
        Pose(self.0.inverse())
    }

    fn transform_point(&self, x: [f64; 3]) -> [f64; 3] {
        self.0.transform_point(&Vector3::from(x)).into()
    }

    fn __repr__(&self) -> String {
        format!("Pose(R={:?}, t={:?})", self.rotation(), self.t())
    }
}

#[pyclass(name = "Intrinsics", module = "gspose", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Intrinsics(CameraIntrinsics);

#[pymethods]
impl Intrinsics {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> PyResult<Self> {
        Ok(Intrinsics(CameraIntrinsics::new(fx, fy, cx, cy, width, height).py()?))
    }

    /// 640 x 480 camera with f = 600 px.
    #[staticmethod]
    fn default() -> Self {
        Intrinsics(default_camera())
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let k: CameraIntrinsics = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        k.validate().py()?;
        Ok(Intrinsics(k))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("intrinsics serialize")
    }

    #[getter]
    fn fx(&self) -> f64 {
        self.0.fx
    }

    #[getter]
    fn fy(&self) -> f64 {
        self.0.fy
    }

    #[getter]
    fn cx(&self) -> f64 {
        self.0.cx
    }

    #[getter]
    fn cy(&self) -> f64 {
        self.0.cy
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height
    }

    /// Pixel coordinates of a camera-frame point.
    fn project(&self, p: [f64; 3]) -> PyResult<[f64; 2]> {
        Ok(self.0.project(&Vector3::from(p)).py()?.into())
    }

    fn __repr__(&self) -> String {
        let k = &self.0;
        format!(
            "Intrinsics(fx={}, fy={}, cx={}, cy={}, width={}, height={})",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        )
    }
}

#[pyclass(name = "GaussianObject", module = "gspose", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGaussianObject(GaussianObject);

#[pymethods]
impl PyGaussianObject {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyGaussianObject(load_gaussian_ply(&path).py()?))
    }

    /// Random object of `count` Gaussians inside a cube of half-width `extent`.
    #[staticmethod]
    #[pyo3(signature = (seed, count=1000, extent=0.1, sh_degree=0))]
    fn synth(seed: u64, count: usize, extent: f64, sh_degree: usize) -> PyResult<Self> {
        Ok(PyGaussianObject(synth_object(seed, count, extent, sh_degree).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_gaussian_ply(&self.0, &path).py()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn sh_degree(&self) -> usize {
        self.0.sh_degree
    }

    #[getter]
    fn diameter(&self) -> f64 {
        self.0.diameter
    }

    #[getter]
    fn means(&self) -> Vec<[f64; 3]> {
        self.0.means.iter().map(|m| (*m).into()).collect()
    }

    #[getter]
    fn opacities(&self) -> Vec<f64> {
        self.0.opacities.clone()
    }

    fn __repr__(&self) -> String {
        format!("GaussianObject(n={}, sh_degree={})", self.0.len(), self.0.sh_degree)
    }
}

#[pyclass(name = "Database", module = "gspose", frozen, skip_from_py_object)]
struct Database(ReferenceDatabase);

#[pymethods]
impl Database {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Database(load_database(&path).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_database(&self.0, &path).py()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    #[getter]
    fn crop_size(&self) -> u32 {
        self.0.crop_size
    }

    #[getter]
    fn diameter(&self) -> f64 {
        self.0.diameter
    }

    #[getter]
    fn object(&self) -> PyGaussianObject {
        PyGaussianObject(self.0.object.clone())
    }

    /// Rotation of every reference view.
    fn reference_rotations(&self) -> Vec<[[f64; 3]; 3]> {
        self.0
            .entries
            .iter()
            .map(|e| {
                let m = e.rotation.matrix();
                std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("Database(name={:?}, entries={})", self.0.name, self.0.len())
    }
}

/// A synthetic scene: object, query view and its reference database.
#[pyclass(name = "SynthScene", module = "gspose", frozen, skip_from_py_object)]
struct PySynthScene(gs::synth::SynthScene);

#[pymethods]
impl PySynthScene {
    #[getter]
    fn object(&self) -> PyGaussianObject {
        PyGaussianObject(self.0.object.clone())
    }

    #[getter]
    fn gt_pose(&self) -> Pose {
        Pose(self.0.gt_pose)
    }

    #[getter]
    fn intrinsics(&self) -> Intrinsics {
        Intrinsics(self.0.intrinsics)
    }

    #[getter]
    fn image(&self) -> Vec<f64> {
        self.0.query.data.clone()
    }

    #[getter]
    fn mask(&self) -> Vec<bool> {
        self.0.mask.data.clone()
    }

    #[getter]
    fn embedding(&self) -> Vec<f64> {
        self.0.query_embedding.clone()
    }

    #[getter]
    fn database(&self) -> Database {
        Database(self.0.database.clone())
    }

    /// Writes the scene files and returns their paths.
    fn save<'py>(&self, py: Python<'py>, dir: PathBuf) -> PyResult<Bound<'py, PyDict>> {
        let f = self.0.save(&dir).py()?;
        let d = PyDict::new(py);
        d.set_item("object", f.object)?;
        d.set_item("query", f.query)?;
        d.set_item("mask", f.mask)?;
        d.set_item("embedding", f.embedding)?;
        d.set_item("intrinsics", f.intrinsics)?;
        d.set_item("gt_pose", f.gt_pose)?;
        d.set_item("db", f.database)?;
        d.set_item("refs", f.refs_manifest)?;
        Ok(d)
    }
}

fn rgb(k: &CameraIntrinsics, data: Vec<f64>) -> PyResult<RgbImage> {
    RgbImage::from_vec(k.width as usize, k.height as usize, data).py()
}

fn mask(k: &CameraIntrinsics, data: Vec<bool>) -> PyResult<BinaryMask> {
    let (w, h) = (k.width as usize, k.height as usize);
    if data.len() != w * h {
        return Err(PyValueError::new_err(format!("{} mask values for a {w}x{h} camera", data.len())));
    }
    Ok(BinaryMask { width: w, height: h, data })
}

fn config(max_steps: usize, lr: f64, eta: f64, stop_on_absolute: bool) -> RefinementConfig {
    RefinementConfig {
        max_steps,
        lr0: lr,
        eta,
        stop_rule: if stop_on_absolute {
            StopRule::AbsoluteLoss
        } else {
            StopRule::LossChange
        },
        ..Default::default()
    }
}

fn losses(trace: &RefinementTrace) -> Vec<f64> {
    trace.rows.iter().map(|r| r.loss).collect()
}

/// Renders `object` at `pose`; returns `(rgb, alpha)` as flat lists.
#[pyfunction]
fn render(object: &PyGaussianObject, pose: &Pose, intrinsics: &Intrinsics) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let (img, _) = render_core(&object.0, &pose.0, &intrinsics.0, &RenderOptions::default()).py()?;
    Ok((img.rgb.data, img.alpha.data))
}

/// Retrieval plus translation from the mask; returns `(pose, reference index)`.
#[pyfunction]
fn init_pose(db: &Database, mask_data: Vec<bool>, embedding: Vec<f64>, intrinsics: &Intrinsics) -> PyResult<(Pose, usize)> {
    let m = mask(&intrinsics.0, mask_data)?;
    let (pose, _, index) = estimate_initial_pose(&m, &embedding, &db.0, &intrinsics.0).py()?;
    Ok((Pose(pose), index))
}

/// Refines `init` against the masked query; returns `(pose, per-step losses)`.
#[pyfunction]
#[pyo3(signature = (db, image, mask_data, init, intrinsics, max_steps=400, lr=5e-3, eta=1e-4, stop_on_absolute=false))]
#[allow(clippy::too_many_arguments)]
fn refine(
    py: Python<'_>,
    db: &Database,
    image: Vec<f64>,
    mask_data: Vec<bool>,
    init: &Pose,
    intrinsics: &Intrinsics,
    max_steps: usize,
    lr: f64,
    eta: f64,
    stop_on_absolute: bool,
) -> PyResult<(Pose, Vec<f64>)> {
    let k = &intrinsics.0;
    let img = rgb(k, image)?;
    let m = mask(k, mask_data)?;
    let cfg = config(max_steps, lr, eta, stop_on_absolute);
    let db = &db.0;
    let (pose, trace) = py
        .detach(|| {
            let bx = DetectionBox::from_mask(&m)?;
            refine_in_crop(&db.object, &img, &m, &init.0, k, &bx, db.crop_size, &cfg)
        })
        .py()?;
    Ok((Pose(pose), losses(&trace)))
}

/// Full pipeline: initial pose then refinement.
#[pyfunction]
#[pyo3(signature = (db, image, mask_data, embedding, intrinsics, max_steps=400, lr=5e-3, eta=1e-4, stop_on_absolute=false))]
#[allow(clippy::too_many_arguments)]
fn estimate<'py>(
    py: Python<'py>,
    db: &Database,
    image: Vec<f64>,
    mask_data: Vec<bool>,
    embedding: Vec<f64>,
    intrinsics: &Intrinsics,
    max_steps: usize,
    lr: f64,
    eta: f64,
    stop_on_absolute: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let k = &intrinsics.0;
    let img = rgb(k, image)?;
    let m = mask(k, mask_data)?;
    let cfg = config(max_steps, lr, eta, stop_on_absolute);
    let db = &db.0;
    let est = py.detach(|| estimate_pose(db, &img, &m, &embedding, k, &cfg)).py()?;
    let d = PyDict::new(py);
    d.set_item("initial", Pose(est.initial))?;
    d.set_item("pose", Pose(est.refined))?;
    d.set_item("reference", est.reference_index)?;
    d.set_item("losses", losses(&est.trace))?;
    d.set_item("early_stopped", est.trace.early_stopped)?;
    Ok(d)
}

/// SSIM + MS-SSIM dissimilarity between two images of the camera's size.
#[pyfunction]
fn loss(rendered: Vec<f64>, target: Vec<f64>, intrinsics: &Intrinsics) -> PyResult<f64> {
    let k = &intrinsics.0;
    Ok(gs_loss(&rgb(k, rendered)?, &rgb(k, target)?).py()?.value)
}

#[pyfunction]
#[pyo3(signature = (seed, crop_size=224))]
fn synth(py: Python<'_>, seed: u64, crop_size: u32) -> PyResult<PySynthScene> {
    let scene = py.detach(|| synth_scene(seed, &default_camera(), crop_size)).py()?;
    Ok(PySynthScene(scene))
}

/// Analytic versus finite-difference pose gradient on a random scene.
#[pyfunction]
fn gradcheck<'py>(py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = gs::gradcheck::gradcheck(seed).py()?;
    let d = PyDict::new(py);
    d.set_item("seed", r.seed)?;
    d.set_item("loss", r.loss)?;
    d.set_item("analytic", r.analytic.to_vec())?;
    d.set_item("numeric", r.numeric.to_vec())?;
    d.set_item("max_rel_error", r.max_rel_error)?;
    Ok(d)
}

fn points(pts: Vec<[f64; 3]>) -> Vec<Vector3<f64>> {
    pts.into_iter().map(Vector3::from).collect()
}

#[pyfunction]
fn load_points(path: PathBuf) -> PyResult<Vec<[f64; 3]>> {
    Ok(load_ply_points(&path).py()?.into_iter().map(Into::into).collect())
}

/// Mean distance between corresponding transformed points.
#[pyfunction]
#[pyo3(name = "add_error")]
fn py_add_error(pred: &Pose, gt: &Pose, pts: Vec<[f64; 3]>) -> PyResult<f64> {
    add_error(&pred.0, &gt.0, &points(pts)).py()
}

/// Mean closest-point distance, for symmetric objects.
#[pyfunction]
#[pyo3(name = "adds_error")]
fn py_adds_error(pred: &Pose, gt: &Pose, pts: Vec<[f64; 3]>) -> PyResult<f64> {
    adds_error(&pred.0, &gt.0, &points(pts)).py()
}

/// Mean reprojection distance in pixels.
#[pyfunction]
fn proj_error(pred: &Pose, gt: &Pose, pts: Vec<[f64; 3]>, intrinsics: &Intrinsics) -> PyResult<f64> {
    proj2d_error(&pred.0, &gt.0, &points(pts), &intrinsics.0).py()
}

/// Geodesic angle between the rotations of two poses, in radians.
#[pyfunction]
fn geodesic(a: &Pose, b: &Pose) -> f64 {
    geodesic_distance(&a.0.rotation, &b.0.rotation)
}

/// Rotation error in degrees.
#[pyfunction]
fn rotation_error(pred: &Pose, gt: &Pose) -> f64 {
    rotation_error_deg(&pred.0, &gt.0)
}

#[pymodule]
fn gspose(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Pose>()?;
    m.add_class::<Intrinsics>()?;
    m.add_class::<PyGaussianObject>()?;
    m.add_class::<Database>()?;
    m.add_class::<PySynthScene>()?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(init_pose, m)?)?;
    m.add_function(wrap_pyfunction!(refine, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(load_points, m)?)?;
    m.add_function(wrap_pyfunction!(py_add_error, m)?)?;
    m.add_function(wrap_pyfunction!(py_adds_error, m)?)?;
    m.add_function(wrap_pyfunction!(proj_error, m)?)?;
    m.add_function(wrap_pyfunction!(geodesic, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_error, m)?)?;
    Ok(())
}
