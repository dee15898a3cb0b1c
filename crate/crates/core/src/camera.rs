//! Projective cameras, two-view epipolar geometry, multi-view triangulation,
//! pose refinement and the pot occluder.
//!
//! All world quantities are millimetres; pixel coordinates put integer values
//! at pixel centres, so a pixel `(x, y)` is in frame iff
//! `0 ≤ x ≤ width − 1` and `0 ≤ y ≤ height − 1`.

use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, Point2, Point3, Rotation3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{self, LmConfig, Residuals};

/// Condition number of the equilibrated DLT system above which triangulation
/// is rejected.
pub const MAX_TRIANGULATION_CONDITION: f64 = 1e10;

/// Minimum number of correspondences per camera for pose refinement.
pub const MIN_CORRESPONDENCES: usize = 6;

/// A calibrated pinhole view described by its 3×4 projection matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    id: usize,
    projection: Matrix3x4<f64>,
    width: u32,
    height: u32,
    centre: Point3<f64>,
    // sign of det of the left 3x3 block; w * orientation > 0 in front of the camera
    orientation: f64,
}

impl Camera {
    pub fn new(id: usize, projection: Matrix3x4<f64>, width: u32, height: u32) -> Result<Self> {
        let m: Matrix3<f64> = projection.fixed_view::<3, 3>(0, 0).into_owned();
        let det = m.determinant();
        let scale = m.norm();
        if !det.is_finite() || det.abs() <= 1e-12 * scale.powi(3) {
            return Err(Error::SingularCamera(id));
        }
        let inv = m.try_inverse().ok_or(Error::SingularCamera(id))?;
        let p4: Vector3<f64> = projection.column(3).into_owned();
        let centre = Point3::from(-(inv * p4));
        Ok(Self {
            id,
            projection,
            width,
            height,
            centre,
            orientation: det.signum(),
        })
    }

    /// `K [R | t]` with `R` mapping world to camera coordinates.
    pub fn from_pose(
        id: usize,
        intrinsics: &Matrix3<f64>,
        rotation: &Rotation3<f64>,
        translation: &Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation.matrix());
        rt.set_column(3, translation);
        Self::new(id, intrinsics * rt, width, height)
    }

    /// Camera at `eye` looking at `target`, image x to the right and y down.
    pub fn look_at(
        id: usize,
        intrinsics: &Matrix3<f64>,
        eye: &Point3<f64>,
        target: &Point3<f64>,
        up: &Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidScene("look_at: up parallel to viewing direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = Rotation3::from_matrix_unchecked(r);
        let t = -(rotation * eye.coords);
        Self::from_pose(id, intrinsics, &rotation, &t, width, height)
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn projection(&self) -> &Matrix3x4<f64> {
        &self.projection
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Right null space of the projection matrix.
    pub fn centre(&self) -> Point3<f64> {
        self.centre
    }

    pub fn left_block(&self) -> Matrix3<f64> {
        self.projection.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn homogeneous(&self, x: &Point3<f64>) -> Vector3<f64> {
        self.projection * x.to_homogeneous()
    }

    pub fn project(&self, x: &Point3<f64>) -> Result<Point2<f64>> {
        let h = self.homogeneous(x);
        let row3 = self.projection.row(2);
        let scale = row3.norm() * x.coords.norm().max(1.0);
        if h.z.abs() <= 1e-12 * scale {
            return Err(Error::DegenerateProjection(self.id));
        }
        Ok(Point2::new(h.x / h.z, h.y / h.z))
    }

    /// True when `x` lies strictly in front of the camera.
    pub fn is_in_front(&self, x: &Point3<f64>) -> bool {
        self.homogeneous(x).z * self.orientation > 0.0
    }

    pub fn contains(&self, p: &Point2<f64>) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= f64::from(self.width) - 1.0
            && p.y <= f64::from(self.height) - 1.0
    }

    /// Same camera with the projection matrix multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.id, self.projection * s, self.width, self.height)
    }
}

/// A conical frustum standing on `axis_base` and extending `height` along
/// `axis_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotModel {
    pub axis_base: Point3<f64>,
    pub axis_dir: Vector3<f64>,
    pub r_bottom: f64,
    pub r_top: f64,
    pub height: f64,
}

impl PotModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_bottom > 0.0 && self.r_top > 0.0 && self.height > 0.0) {
            return Err(Error::InvalidScene("pot radii and height must be positive".into()));
        }
        if (self.axis_dir.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidScene("pot axis must be a unit vector".into()));
        }
        Ok(())
    }

    /// Axial height and squared radial distance of `p` in the pot frame.
    fn local(&self, p: &Point3<f64>) -> (f64, Vector3<f64>) {
        let d = p - self.axis_base;
        let h = d.dot(&self.axis_dir);
        (h, d - self.axis_dir * h)
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        let (h, radial) = self.local(p);
        if !(0.0..=self.height).contains(&h) {
            return false;
        }
        let r = self.r_bottom + (self.r_top - self.r_bottom) * h / self.height;
        radial.norm_squared() < r * r
    }

    /// Whether the closed segment `a → b` passes through the solid frustum.
    pub fn intersects_segment(&self, a: &Point3<f64>, b: &Point3<f64>) -> bool {
        let (ha, ra) = self.local(a);
        let (hb, rb) = self.local(b);
        let dh = hb - ha;

        // parameter interval where 0 <= h(s) <= height
        let (mut s0, mut s1) = (0.0_f64, 1.0_f64);
        if dh.abs() < 1e-15 {
            if !(0.0..=self.height).contains(&ha) {
                return false;
            }
        } else {
            let t0 = -ha / dh;
            let t1 = (self.height - ha) / dh;
            let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
            s0 = s0.max(lo);
            s1 = s1.min(hi);
            if s0 > s1 {
                return false;
            }
        }

        // q(s) = |radial(s)|² − r(h(s))², quadratic in s
        let slope = (self.r_top - self.r_bottom) / self.height;
        let c0 = self.r_bottom + slope * ha;
        let c1 = slope * dh;
        let dr = rb - ra;
        let qa = dr.norm_squared() - c1 * c1;
        let qb = 2.0 * ra.dot(&dr) - 2.0 * c0 * c1;
        let qc = ra.norm_squared() - c0 * c0;
        let q = |s: f64| (qa * s + qb) * s + qc;

        let mut min = q(s0).min(q(s1));
        if qa > 0.0 {
            let vertex = -qb / (2.0 * qa);
            if vertex > s0 && vertex < s1 {
                min = min.min(q(vertex));
            }
        }
        min < 0.0
    }
}

/// Everything the pipeline knows about the capture geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cameras: Vec<Camera>,
    pub pot_centre: Point3<f64>,
    pub up: Vector3<f64>,
    pub pot: PotModel,
}

impl Scene {
    pub fn new(
        cameras: Vec<Camera>,
        pot_centre: Point3<f64>,
        up: Vector3<f64>,
        pot: PotModel,
    ) -> Result<Self> {
        let scene = Self {
            cameras,
            pot_centre,
            up,
            pot,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.len() < 2 {
            return Err(Error::InvalidScene(format!(
                "need at least two cameras, got {}",
                self.cameras.len()
            )));
        }
        if (self.up.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidScene("up must be a unit vector".into()));
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            if cam.id() != i {
                return Err(Error::InvalidScene(format!(
                    "camera at position {i} has id {}",
                    cam.id()
                )));
            }
        }
        self.pot.validate()
    }

    pub fn camera(&self, view: usize) -> Result<&Camera> {
        self.cameras.get(view).ok_or(Error::UnknownView(view))
    }

    /// The `o_v` visibility delta inverted: true when `point` cannot be seen.
    pub fn is_occluded(&self, camera: &Camera, point: &Point3<f64>) -> bool {
        is_occluded(self, camera, point)
    }

    pub fn visible_pixel(&self, camera: &Camera, point: &Point3<f64>) -> Option<Point2<f64>> {
        if is_occluded(self, camera, point) {
            None
        } else {
            camera.project(point).ok()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CalibrationFile = serde_json::from_str(text)?;
        file.into_scene()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CalibrationFile::from_scene(self))?)
    }
}

/// True iff the segment from the camera centre to `point` passes through the
/// pot, the point projects outside the image, or it is behind the camera.
pub fn is_occluded(scene: &Scene, camera: &Camera, point: &Point3<f64>) -> bool {
    if !camera.is_in_front(point) {
        return true;
    }
    match camera.project(point) {
        Ok(p) if camera.contains(&p) => {}
        _ => return true,
    }
    scene.pot.intersects_segment(&camera.centre(), point)
}

// ---------------------------------------------------------------------------
// Calibration JSON

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    pub id: usize,
    #[serde(rename = "P")]
    pub p: [[f64; 4]; 3],
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotJson {
    pub base: [f64; 3],
    pub dir: [f64; 3],
    pub r_bottom: f64,
    pub r_top: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    pub cameras: Vec<CameraJson>,
    pub pot_centre: [f64; 3],
    pub up: [f64; 3],
    pub pot: PotJson,
}

impl CameraJson {
    pub fn from_camera(cam: &Camera) -> Self {
        let m = cam.projection();
        let mut p = [[0.0; 4]; 3];
        for (r, row) in p.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        Self {
            id: cam.id(),
            p,
            width: cam.width(),
            height: cam.height(),
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        let m = Matrix3x4::from_fn(|r, c| self.p[r][c]);
        Camera::new(self.id, m, self.width, self.height)
    }
}

impl CalibrationFile {
    pub fn from_scene(scene: &Scene) -> Self {
        let v3 = |v: &Vector3<f64>| [v.x, v.y, v.z];
        Self {
            cameras: scene.cameras.iter().map(CameraJson::from_camera).collect(),
            pot_centre: v3(&scene.pot_centre.coords),
            up: v3(&scene.up),
            pot: PotJson {
                base: v3(&scene.pot.axis_base.coords),
                dir: v3(&scene.pot.axis_dir),
                r_bottom: scene.pot.r_bottom,
                r_top: scene.pot.r_top,
                height: scene.pot.height,
            },
        }
    }

    pub fn into_scene(self) -> Result<Scene> {
        let mut cameras = self
            .cameras
            .iter()
            .map(CameraJson::to_camera)
            .collect::<Result<Vec<_>>>()?;
        cameras.sort_by_key(|c| c.id());
        Scene::new(
            cameras,
            Point3::from(self.pot_centre),
            Vector3::from(self.up),
            PotModel {
                axis_base: Point3::from(self.pot.base),
                axis_dir: Vector3::from(self.pot.dir),
                r_bottom: self.pot.r_bottom,
                r_top: self.pot.r_top,
                height: self.pot.height,
            },
        )
    }
}

// ---------------------------------------------------------------------------
// Epipolar geometry

/// Fundamental matrix `F` with `x_bᵀ F x_a = 0`, i.e. `F x_a` is the epipolar
/// line in view b.
pub fn fundamental_matrix(camera_a: &Camera, camera_b: &Camera) -> Result<Matrix3<f64>> {
    let ca = camera_a.centre();
    let cb = camera_b.centre();
    let scale = ca.coords.norm().max(cb.coords.norm()).max(1.0);
    if (ca - cb).norm() <= 1e-9 * scale {
        return Err(Error::CoincidentCentres(camera_a.id(), camera_b.id()));
    }
    let epipole = camera_b.homogeneous(&ca);
    let inv_a = camera_a
        .left_block()
        .try_inverse()
        .ok_or(Error::SingularCamera(camera_a.id()))?;
    Ok(epipole.cross_matrix() * camera_b.left_block() * inv_a)
}

/// Epipolar line `(a, b, c)` in view b with `a² + b² = 1`.
pub fn epipolar_line(
    camera_a: &Camera,
    camera_b: &Camera,
    pixel_a: &Point2<f64>,
) -> Result<Vector3<f64>> {
    let f = fundamental_matrix(camera_a, camera_b)?;
    line_through(&f, pixel_a)
}

pub fn line_through(f: &Matrix3<f64>, pixel_a: &Point2<f64>) -> Result<Vector3<f64>> {
    let l = f * pixel_a.to_homogeneous();
    let n = l.x.hypot(l.y);
    if n <= 1e-300 || !n.is_finite() {
        return Err(Error::InvalidScene("pixel coincides with the epipole".into()));
    }
    Ok(l / n)
}

/// Distance from a pixel to a normalized line.
pub fn line_distance(line: &Vector3<f64>, p: &Point2<f64>) -> f64 {
    (line.x * p.x + line.y * p.y + line.z).abs()
}

// ---------------------------------------------------------------------------
// Triangulation

#[derive(Debug, Clone, PartialEq)]
pub struct Triangulation {
    pub point: Point3<f64>,
    /// Root-mean-square reprojection distance over the observations, pixels.
    pub rms: f64,
}

struct Reprojection<'a> {
    rows: Vec<(&'a Camera, Point2<f64>)>,
}

impl Residuals for Reprojection<'_> {
    fn residual_count(&self) -> usize {
        2 * self.rows.len()
    }

    fn residuals(&self, x: &[f64], out: &mut [f64]) {
        let p = Point3::new(x[0], x[1], x[2]);
        for (i, (cam, obs)) in self.rows.iter().enumerate() {
            let h = cam.homogeneous(&p);
            out[2 * i] = h.x / h.z - obs.x;
            out[2 * i + 1] = h.y / h.z - obs.y;
        }
    }

    fn jacobian(&self, x: &[f64], _r: &[f64], jac: &mut DMatrix<f64>) {
        let p = Point3::new(x[0], x[1], x[2]);
        for (i, (cam, _)) in self.rows.iter().enumerate() {
            let m = cam.projection();
            let h = cam.homogeneous(&p);
            let w2 = h.z * h.z;
            for c in 0..3 {
                jac[(2 * i, c)] = (m[(0, c)] * h.z - h.x * m[(2, c)]) / w2;
                jac[(2 * i + 1, c)] = (m[(1, c)] * h.z - h.y * m[(2, c)]) / w2;
            }
        }
    }
}

/// Least-squares point from pixel observations: linear DLT, then
/// Levenberg–Marquardt on the summed squared reprojection distance.
pub fn triangulate(observations: &[(usize, Point2<f64>)], cameras: &[Camera]) -> Result<Triangulation> {
    let mut views: Vec<usize> = observations.iter().map(|(v, _)| *v).collect();
    views.sort_unstable();
    views.dedup();
    if views.len() < 2 {
        return Err(Error::TooFewViews(views.len()));
    }
    let mut rows = Vec::with_capacity(observations.len());
    for (v, p) in observations {
        let cam = cameras.get(*v).ok_or(Error::UnknownView(*v))?;
        rows.push((cam, *p));
    }

    // Work in a frame centred on the participating cameras and scaled by the
    // rig size, so the conditioning test does not depend on world units.
    let centres: Vec<Point3<f64>> = views.iter().map(|v| cameras[*v].centre()).collect();
    let origin = centres.iter().fold(Vector3::zeros(), |acc, c| acc + c.coords) / centres.len() as f64;
    let spread = centres.iter().map(|c| (c.coords - origin).norm()).sum::<f64>() / centres.len() as f64;
    let spread = if spread > 0.0 { spread } else { 1.0 };
    let mut frame = Matrix4::identity() * spread;
    frame[(3, 3)] = 1.0;
    frame.fixed_view_mut::<3, 1>(0, 3).copy_from(&origin);

    let n = rows.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 4);
    for (i, (cam, p)) in rows.iter().enumerate() {
        let m = cam.projection() * frame;
        for c in 0..4 {
            a[(2 * i, c)] = p.x * m[(2, c)] - m[(0, c)];
            a[(2 * i + 1, c)] = p.y * m[(2, c)] - m[(1, c)];
        }
    }
    for mut row in a.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |k: usize| svd.singular_values[order[k]];
    let condition = if sv(2) > 0.0 { sv(0) / sv(2) } else { f64::INFINITY };
    if !(condition <= MAX_TRIANGULATION_CONDITION) {
        return Err(Error::IllConditioned(condition));
    }
    let null = v_t.row(order[3]);
    let local = Vector4::new(null[0], null[1], null[2], null[3]);
    // Nearly parallel rays meet close to infinity in the normalised frame.
    if !(local.w.abs() * MAX_TRIANGULATION_CONDITION > local.norm()) {
        return Err(Error::IllConditioned(local.norm() / local.w.abs()));
    }
    let h = frame * local;
    let init = [h.x / h.w, h.y / h.w, h.z / h.w];

    let problem = Reprojection { rows };
    let cfg = LmConfig {
        max_iterations: 50,
        relative_tolerance: 1e-15,
        gradient_tolerance: 1e-14,
        ..LmConfig::default()
    };
    let out = lm::minimize(&problem, &init, &cfg);
    Ok(Triangulation {
        point: Point3::new(out.params[0], out.params[1], out.params[2]),
        rms: (out.cost / n as f64).sqrt(),
    })
}

// ---------------------------------------------------------------------------
// Calibration refinement

/// A known world point observed at a pixel in one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub world: [f64; 3],
    pub pixel: [f64; 2],
    pub view: usize,
}

/// Quadratic prior on the six pose parameters of one camera:
/// `[ωx, ωy, ωz, tx, ty, tz]`, where `ω` is a rotation vector applied on top of
/// the initial rotation and `t` the camera translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosePrior {
    pub value: [f64; 6],
    pub weight: [f64; 6],
}

/// `P = S [R | t]` with `det R = +1`; `S` carries intrinsics and the projective scale.
#[derive(Debug, Clone)]
struct PoseDecomposition {
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

fn rq3(m: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let flip = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
    let qr = (flip * m).transpose().qr();
    let mut upper = flip * qr.r().transpose() * flip;
    let mut orth = flip * qr.q().transpose();
    for i in 0..3 {
        if upper[(i, i)] < 0.0 {
            for r in 0..3 {
                upper[(r, i)] = -upper[(r, i)];
            }
            for c in 0..3 {
                orth[(i, c)] = -orth[(i, c)];
            }
        }
    }
    (upper, orth)
}

impl PoseDecomposition {
    fn of(camera: &Camera) -> Result<Self> {
        let (mut upper, mut rot) = rq3(&camera.left_block());
        if rot.determinant() < 0.0 {
            upper = -upper;
            rot = -rot;
        }
        let inv = upper.try_inverse().ok_or(Error::SingularCamera(camera.id()))?;
        let translation = inv * camera.projection().column(3);
        Ok(Self {
            intrinsics: upper,
            rotation: rot,
            translation,
        })
    }

    fn projection(&self, omega: &Vector3<f64>, t: &Vector3<f64>) -> Matrix3x4<f64> {
        let r = Rotation3::new(*omega).matrix() * self.rotation;
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        rt.set_column(3, t);
        self.intrinsics * rt
    }
}

struct PoseProblem<'a> {
    pose: &'a PoseDecomposition,
    observations: Vec<(Point3<f64>, Point2<f64>)>,
    prior: Option<PosePrior>,
}

impl PoseProblem<'_> {
    fn split(x: &[f64]) -> (Vector3<f64>, Vector3<f64>) {
        (Vector3::new(x[0], x[1], x[2]), Vector3::new(x[3], x[4], x[5]))
    }
}

impl Residuals for PoseProblem<'_> {
    fn residual_count(&self) -> usize {
        2 * self.observations.len() + if self.prior.is_some() { 6 } else { 0 }
    }

    fn residuals(&self, x: &[f64], out: &mut [f64]) {
        let (omega, t) = Self::split(x);
        let p = self.pose.projection(&omega, &t);
        for (i, (world, pixel)) in self.observations.iter().enumerate() {
            let h = p * world.to_homogeneous();
            out[2 * i] = h.x / h.z - pixel.x;
            out[2 * i + 1] = h.y / h.z - pixel.y;
        }
        if let Some(prior) = &self.prior {
            let base = 2 * self.observations.len();
            for k in 0..6 {
                out[base + k] = prior.weight[k].max(0.0).sqrt() * (x[k] - prior.value[k]);
            }
        }
    }

    fn jacobian(&self, x: &[f64], _r: &[f64], jac: &mut DMatrix<f64>) {
        // central differences: the rotation parameters enter through the exponential map
        let m = self.residual_count();
        let mut plus = vec![0.0; m];
        let mut minus = vec![0.0; m];
        let mut xs = x.to_vec();
        for j in 0..x.len() {
            let h = if j < 3 { 1e-7 } else { 1e-6 * x[j].abs().max(1.0) };
            xs[j] = x[j] + h;
            self.residuals(&xs, &mut plus);
            xs[j] = x[j] - h;
            self.residuals(&xs, &mut minus);
            xs[j] = x[j];
            for i in 0..m {
                jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct CameraRefinement {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub cost_history: Vec<f64>,
    pub initial_gradient_norm: f64,
    pub final_gradient_norm: f64,
}

#[derive(Debug, Clone)]
pub struct CalibrationRefinement {
    pub cameras: Vec<Camera>,
    pub per_camera: Vec<CameraRefinement>,
}

impl CalibrationRefinement {
    pub fn initial_cost(&self) -> f64 {
        self.per_camera.iter().map(|c| c.initial_cost).sum()
    }

    pub fn final_cost(&self) -> f64 {
        self.per_camera.iter().map(|c| c.final_cost).sum()
    }
}

/// Refines each camera's 6-DoF pose (intrinsics held fixed) to minimize the
/// summed squared reprojection distance plus the weighted prior terms.
///
/// `priors` is indexed by camera position; missing entries mean no prior.
pub fn refine_calibration(
    cameras: &[Camera],
    correspondences: &[Correspondence],
    priors: &[Option<PosePrior>],
) -> Result<CalibrationRefinement> {
    for corr in correspondences {
        if corr.view >= cameras.len() {
            return Err(Error::UnknownView(corr.view));
        }
    }
    for (i, _) in cameras.iter().enumerate() {
        let count = correspondences.iter().filter(|c| c.view == i).count();
        if count < MIN_CORRESPONDENCES {
            return Err(Error::Underdetermined {
                camera: i,
                count,
                needed: MIN_CORRESPONDENCES,
            });
        }
    }

    let cfg = LmConfig {
        max_iterations: 200,
        relative_tolerance: 0.0,
        gradient_tolerance: 0.0,
        ..LmConfig::default()
    };

    let mut out_cameras = Vec::with_capacity(cameras.len());
    let mut per_camera = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let pose = PoseDecomposition::of(cam)?;
        let observations = correspondences
            .iter()
            .filter(|c| c.view == i)
            .map(|c| (Point3::from(c.world), Point2::from(c.pixel)))
            .collect();
        let problem = PoseProblem {
            pose: &pose,
            observations,
            prior: priors.get(i).copied().flatten(),
        };
        let t = pose.translation;
        let x0 = [0.0, 0.0, 0.0, t.x, t.y, t.z];
        let out = lm::minimize(&problem, &x0, &cfg);
        let refined = if out.accepted_steps == 0 {
            cam.clone()
        } else {
            let (omega, t) = PoseProblem::split(&out.params);
            Camera::new(cam.id(), pose.projection(&omega, &t), cam.width(), cam.height())?
        };
        out_cameras.push(refined);
        per_camera.push(CameraRefinement {
            initial_cost: out.initial_cost,
            final_cost: out.cost,
            cost_history: out.cost_history,
            initial_gradient_norm: out.initial_gradient_norm,
            final_gradient_norm: out.gradient_norm,
        });
    }
    Ok(CalibrationRefinement {
        cameras: out_cameras,
        per_camera,
    })
}
