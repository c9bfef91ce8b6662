//! Deterministic pinhole-camera world: ground-truth poses, projections,
//! fundamental matrices, rendered frames and labeled correspondences.
//!
//! This is the oracle every geometric claim in the crate is tested against.
//! All randomness flows through explicitly passed seeds; there is no shared
//! global generator.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Point2, Point3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{Correspondence, FundamentalMatrix, GeometryError, HomoPoint2};

/// Cameras sit at a fixed height above the ground plane.
pub const CAMERA_HEIGHT_M: f64 = 1.0;

/// Points closer than this along the optical axis are treated as invisible.
pub const MIN_DEPTH_M: f64 = 0.05;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("scene point {index} lies outside the declared bounds")]
    PointOutOfBounds { index: usize },
    #[error("scene point {index} has intensity {value} outside [0, 1]")]
    BadIntensity { index: usize, value: f64 },
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("poses are identical (baseline {0:e} m); fundamental matrix undefined")]
    ZeroBaseline(f64),
    #[error("only {0} co-visible points; need at least 8")]
    TooFewCovisible(usize),
    #[error("scene file {path}:{line}: {message}")]
    SceneParse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Axis-aligned bounding box for scene points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBounds {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl SceneBounds {
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePoint {
    pub position: Point3<f64>,
    pub intensity: f64,
}

/// Static point cloud with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    points: Vec<ScenePoint>,
    bounds: SceneBounds,
}

impl Scene {
    pub fn new(points: Vec<ScenePoint>, bounds: SceneBounds) -> Result<Self, WorldError> {
        for (index, p) in points.iter().enumerate() {
            if !bounds.contains(&p.position) {
                return Err(WorldError::PointOutOfBounds { index });
            }
            if !(0.0..=1.0).contains(&p.intensity) || !p.intensity.is_finite() {
                return Err(WorldError::BadIntensity {
                    index,
                    value: p.intensity,
                });
            }
        }
        Ok(Self { points, bounds })
    }

    /// Uniform random scene. 200+ points are recommended when the scene
    /// feeds the correspondence sampler.
    pub fn random(seed: u64, n: usize, bounds: SceneBounds) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| ScenePoint {
                position: Point3::new(
                    rng.random_range(bounds.min.x..=bounds.max.x),
                    rng.random_range(bounds.min.y..=bounds.max.y),
                    rng.random_range(bounds.min.z..=bounds.max.z),
                ),
                intensity: rng.random_range(0.2..=1.0),
            })
            .collect();
        Self { points, bounds }
    }

    /// Default experiment bounds: a corridor ahead of a camera that starts
    /// at the origin heading +x.
    pub fn default_bounds() -> SceneBounds {
        SceneBounds {
            min: Point3::new(-2.0, -8.0, 0.0),
            max: Point3::new(16.0, 8.0, 3.0),
        }
    }

    pub fn points(&self) -> &[ScenePoint] {
        &self.points
    }

    pub fn bounds(&self) -> SceneBounds {
        self.bounds
    }

    /// Parse the plain-text scene format: one `X Y Z intensity` record per
    /// line, `#` comments. An optional `# bounds x0 y0 z0 x1 y1 z1`
    /// directive declares the bounds; otherwise the tight bounding box of
    /// the points is used.
    pub fn parse(text: &str, path: &str) -> Result<Self, WorldError> {
        let mut declared: Option<SceneBounds> = None;
        let mut points = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(vals) = rest.strip_prefix("bounds") {
                    let nums: Result<Vec<f64>, _> =
                        vals.split_whitespace().map(str::parse::<f64>).collect();
                    match nums {
                        Ok(v) if v.len() == 6 => {
                            declared = Some(SceneBounds {
                                min: Point3::new(v[0], v[1], v[2]),
                                max: Point3::new(v[3], v[4], v[5]),
                            });
                        }
                        _ => {
                            return Err(WorldError::SceneParse {
                                path: path.to_string(),
                                line: line_no,
                                message: "bounds directive needs 6 numbers".into(),
                            });
                        }
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(WorldError::SceneParse {
                    path: path.to_string(),
                    line: line_no,
                    message: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let mut vals = [0.0f64; 4];
            for (k, field) in fields.iter().enumerate() {
                vals[k] = field.parse().map_err(|_| WorldError::SceneParse {
                    path: path.to_string(),
                    line: line_no,
                    message: format!("bad number {field:?}"),
                })?;
            }
            points.push(ScenePoint {
                position: Point3::new(vals[0], vals[1], vals[2]),
                intensity: vals[3],
            });
        }
        let bounds = declared.unwrap_or_else(|| tight_bounds(&points));
        Self::new(points, bounds)
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let b = self.bounds;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# bounds {} {} {} {} {} {}",
            b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z
        );
        for p in &self.points {
            let _ = writeln!(
                out,
                "{} {} {} {}",
                p.position.x, p.position.y, p.position.z, p.intensity
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), WorldError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn tight_bounds(points: &[ScenePoint]) -> SceneBounds {
    let mut min = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut max = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        min.x = min.x.min(p.position.x);
        min.y = min.y.min(p.position.y);
        min.z = min.z.min(p.position.z);
        max.x = max.x.max(p.position.x);
        max.y = max.y.max(p.position.y);
        max.z = max.z.max(p.position.z);
    }
    if points.is_empty() {
        min = Point3::origin();
        max = Point3::origin();
    }
    SceneBounds { min, max }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, WorldError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(WorldError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(WorldError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// 224x224 image with a ~70 degree horizontal field of view.
    pub fn default_224() -> Self {
        Self {
            fx: 160.0,
            fy: 160.0,
            cx: 112.0,
            cy: 112.0,
            width: 224,
            height: 224,
        }
    }

    pub fn k_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn k_inverse(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        r
    }
}

/// Planar agent pose, lifted to a 3D rigid transform at [`CAMERA_HEIGHT_M`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn origin() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            yaw: 0.0,
        }
    }

    pub fn camera_center(&self) -> Point3<f64> {
        Point3::new(self.x, self.y, CAMERA_HEIGHT_M)
    }

    /// World-to-camera rotation. Camera convention: z forward (along the
    /// heading), x right, y down.
    pub fn rotation_world_to_camera(&self) -> Matrix3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0)
    }

    pub fn position(&self) -> Point2<f64> {
        Point2::new(self.x, self.y)
    }
}

/// Planar action: translation in the robot frame (x forward, y left) plus a
/// yaw increment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

impl Action {
    pub fn new(dx: f64, dy: f64, dyaw: f64) -> Result<Self, WorldError> {
        if !(dx.is_finite() && dy.is_finite() && dyaw.is_finite()) {
            return Err(WorldError::InvalidAction("non-finite component".into()));
        }
        if dyaw.abs() > std::f64::consts::PI {
            return Err(WorldError::InvalidAction(format!(
                "|dyaw| = {} exceeds pi",
                dyaw.abs()
            )));
        }
        Ok(Self { dx, dy, dyaw })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dyaw]
    }
}

/// Translate in the robot's current heading frame, then increment yaw.
pub fn apply_action(p: Pose, a: Action) -> Pose {
    let (s, c) = p.yaw.sin_cos();
    Pose::new(
        p.x + a.dx * c - a.dy * s,
        p.y + a.dx * s + a.dy * c,
        p.yaw + a.dyaw,
    )
}

pub fn apply_action_sequence(p: Pose, actions: &[Action]) -> Pose {
    actions.iter().fold(p, |acc, a| apply_action(acc, *a))
}

/// The action that undoes `a` when applied from the post-action pose.
pub fn invert_action(a: Action) -> Action {
    let (s, c) = a.dyaw.sin_cos();
    // Reverse displacement expressed in the post-action heading frame.
    Action {
        dx: -(c * a.dx + s * a.dy),
        dy: -(-s * a.dx + c * a.dy),
        dyaw: -a.dyaw,
    }
}

/// Inverse action sequence: order reversed, each step inverted in its local
/// frame. Applying `seq` then the result returns the start pose.
pub fn invert_action_sequence(seq: &[Action]) -> Vec<Action> {
    seq.iter().rev().map(|a| invert_action(*a)).collect()
}

/// Pinhole projection of a world point. `visible` is false when the depth is
/// at most [`MIN_DEPTH_M`] or the pixel falls outside the image.
pub fn project(intr: &CameraIntrinsics, pose: &Pose, point: &Point3<f64>) -> (HomoPoint2, bool) {
    let cam = pose.rotation_world_to_camera() * (point - pose.camera_center());
    let depth = cam.z;
    if depth.abs() < 1e-12 {
        return (HomoPoint2::from_pixel(0.0, 0.0), false);
    }
    let u = intr.fx * cam.x / depth + intr.cx;
    let v = intr.fy * cam.y / depth + intr.cy;
    let visible = depth > MIN_DEPTH_M
        && u >= 0.0
        && u < intr.width as f64
        && v >= 0.0
        && v < intr.height as f64;
    (HomoPoint2::from_pixel(u, v), visible)
}

/// Ground-truth fundamental matrix F(A→B) from the relative pose:
/// K⁻ᵀ [t]× R K⁻¹, rank-2 and Frobenius-normalized.
pub fn oracle_fundamental(
    intr: &CameraIntrinsics,
    pose_a: &Pose,
    pose_b: &Pose,
) -> Result<FundamentalMatrix, WorldError> {
    let ca = pose_a.camera_center();
    let cb = pose_b.camera_center();
    let baseline = (ca - cb).norm();
    if baseline <= 1e-6 {
        return Err(WorldError::ZeroBaseline(baseline));
    }
    let ra = pose_a.rotation_world_to_camera();
    let rb = pose_b.rotation_world_to_camera();
    // X_b = R X_a + t for the A→B camera transform.
    let r = rb * ra.transpose();
    let t = rb * (ca - cb);
    let t_cross = Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
    let e = t_cross * r;
    let f = intr.k_inverse().transpose() * e * intr.k_inverse();
    // The construction is rank-2 by design; skipping the enforcement round
    // trip keeps the epipolar constraint tight to ~1e-11 px.
    Ok(FundamentalMatrix::from_rank2(f)?)
}

/// Grayscale image with intensities in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; (width * height) as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: f64) {
        self.data[(y * self.width + x) as usize] = v;
    }

    /// Mean squared pixel difference.
    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "image size mismatch");
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }
}

/// One observation: an image, the pose it was taken from, and its step index
/// on the rollout timeline (history frames have steps <= 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub pose: Pose,
    pub step: i64,
}

const BACKGROUND: f64 = 0.1;
const SPLAT_RADIUS: f64 = 2.0;

/// Depth-buffered splat of every visible scene point as a radius-2 px disk
/// of its intensity over a 0.1 background. Deterministic.
pub fn render(scene: &Scene, intr: &CameraIntrinsics, pose: &Pose) -> Frame {
    let mut image = Image::filled(intr.width, intr.height, BACKGROUND);
    let mut zbuf = vec![f64::INFINITY; image.data.len()];
    for p in scene.points() {
        let (pix, visible) = project(intr, pose, &p.position);
        if !visible {
            continue;
        }
        let cam = pose.rotation_world_to_camera() * (p.position - pose.camera_center());
        let depth = cam.z;
        let x0 = ((pix.x - SPLAT_RADIUS).floor().max(0.0)) as u32;
        let x1 = ((pix.x + SPLAT_RADIUS).ceil()).min(intr.width as f64 - 1.0) as u32;
        let y0 = ((pix.y - SPLAT_RADIUS).floor().max(0.0)) as u32;
        let y1 = ((pix.y + SPLAT_RADIUS).ceil()).min(intr.height as f64 - 1.0) as u32;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dx = px as f64 - pix.x;
                let dy = py as f64 - pix.y;
                if dx * dx + dy * dy > SPLAT_RADIUS * SPLAT_RADIUS {
                    continue;
                }
                let idx = (py * intr.width + px) as usize;
                if depth < zbuf[idx] {
                    zbuf[idx] = depth;
                    image.data[idx] = p.intensity;
                }
            }
        }
    }
    Frame {
        image,
        pose: *pose,
        step: 0,
    }
}

/// Correspondences sampled between two views, with generation labels kept
/// for tests.
#[derive(Debug, Clone)]
pub struct SampledCorrespondences {
    pub correspondences: Vec<Correspondence>,
    /// True where the view-B point was replaced by a random outlier.
    pub outlier_mask: Vec<bool>,
}

impl SampledCorrespondences {
    pub fn true_inlier_indices(&self) -> Vec<usize> {
        self.outlier_mask
            .iter()
            .enumerate()
            .filter(|(_, &o)| !o)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Sample noisy labeled correspondences between two views.
///
/// Co-visible scene points are projected into both views and perturbed by
/// Gaussian pixel noise of std `noise_px` independently per view and
/// coordinate. A `round(outlier_rate * n)` subset has its view-B point
/// replaced by a uniform random pixel; replacement draws that would land
/// within twice the usual 3 px Sampson band of the true epipolar geometry
/// are rejected so labeled outliers are geometrically meaningful. Inlier
/// confidences are uniform in [0.85, 1], outlier confidences in [0.8, 1].
/// Bit-deterministic for a fixed seed.
pub fn sample_correspondences(
    scene: &Scene,
    intr: &CameraIntrinsics,
    pose_a: &Pose,
    pose_b: &Pose,
    noise_px: f64,
    outlier_rate: f64,
    seed: u64,
) -> Result<SampledCorrespondences, WorldError> {
    assert!(
        (0.0..1.0).contains(&outlier_rate),
        "outlier_rate must be in [0, 1)"
    );
    let oracle = oracle_fundamental(intr, pose_a, pose_b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_px.max(0.0)).expect("finite std");

    let mut pairs: Vec<(Point2<f64>, Point2<f64>)> = Vec::new();
    for p in scene.points() {
        let (pa, va) = project(intr, pose_a, &p.position);
        let (pb, vb) = project(intr, pose_b, &p.position);
        if va && vb {
            pairs.push((Point2::new(pa.x, pa.y), Point2::new(pb.x, pb.y)));
        }
    }
    if pairs.len() < 8 {
        return Err(WorldError::TooFewCovisible(pairs.len()));
    }

    let n = pairs.len();
    let noisy: Vec<(Point2<f64>, Point2<f64>)> = pairs
        .iter()
        .map(|(a, b)| {
            let na = Point2::new(a.x + noise_px_draw(&normal, &mut rng), a.y + noise_px_draw(&normal, &mut rng));
            let nb = Point2::new(b.x + noise_px_draw(&normal, &mut rng), b.y + noise_px_draw(&normal, &mut rng));
            (na, nb)
        })
        .collect();

    // Replacement band: labeled outliers stay far enough from the true
    // epipolar geometry that no model consistent with the inliers can
    // capture them (8x the usual 3 px RANSAC threshold).
    let reject_se = (8.0 * 3.0f64).powi(2);

    // A source point close to the epipole has F·x̃ ≈ 0 and every view-B
    // point is consistent with it, so no replacement could be a meaningful
    // outlier. Only sources whose epipolar band excludes some image corner
    // by a wide margin are eligible for replacement.
    let corners = [
        Point2::new(0.0, 0.0),
        Point2::new(intr.width as f64 - 1.0, 0.0),
        Point2::new(0.0, intr.height as f64 - 1.0),
        Point2::new(intr.width as f64 - 1.0, intr.height as f64 - 1.0),
    ];
    let eligible: Vec<usize> = (0..n)
        .filter(|&i| {
            let xa = HomoPoint2::from_pixel(noisy[i].0.x, noisy[i].0.y);
            corners.iter().any(|c| {
                crate::geometry::sampson_error(
                    &oracle,
                    &xa,
                    &HomoPoint2::from_point(c),
                )
                .map(|se| se > 1.5 * reject_se)
                .unwrap_or(false)
            })
        })
        .collect();

    let outlier_count = ((outlier_rate * n as f64).round() as usize).min(n);
    assert!(
        eligible.len() >= outlier_count,
        "only {} of {} sources can host a meaningful outlier",
        eligible.len(),
        n
    );
    let chosen = rand::seq::index::sample(&mut rng, eligible.len(), outlier_count);
    let mut outlier_mask = vec![false; n];
    for idx in chosen.iter() {
        outlier_mask[eligible[idx]] = true;
    }
    let mut correspondences = Vec::with_capacity(n);
    for i in 0..n {
        let (a, mut b) = noisy[i];
        if outlier_mask[i] {
            let xa = HomoPoint2::from_pixel(a.x, a.y);
            let mut attempts = 0;
            loop {
                let cand = Point2::new(
                    rng.random_range(0.0..intr.width as f64),
                    rng.random_range(0.0..intr.height as f64),
                );
                let se = crate::geometry::sampson_error(
                    &oracle,
                    &xa,
                    &HomoPoint2::from_pixel(cand.x, cand.y),
                )
                .unwrap_or(f64::INFINITY);
                if se > reject_se {
                    b = cand;
                    break;
                }
                attempts += 1;
                assert!(attempts < 10_000, "outlier rejection sampling stalled");
            }
        }
        correspondences.push(Correspondence {
            a,
            b,
            confidence: 0.0,
            valid: true,
        });
    }
    for i in 0..n {
        correspondences[i].confidence = if outlier_mask[i] {
            rng.random_range(0.8..=1.0)
        } else {
            rng.random_range(0.85..=1.0)
        };
    }

    Ok(SampledCorrespondences {
        correspondences,
        outlier_mask,
    })
}

fn noise_px_draw(normal: &Normal<f64>, rng: &mut ChaCha8Rng) -> f64 {
    if normal.std_dev() == 0.0 {
        0.0
    } else {
        normal.sample(rng)
    }
}
