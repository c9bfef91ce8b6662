//! Homogeneous two-view geometry: epipolar lines, bidirectional line
//! intersections, fundamental-matrix estimation and the point-level error
//! formulas.
//!
//! All operations are pure functions over immutable inputs and are safe to
//! call concurrently.

use nalgebra::{DMatrix, Matrix3, Point2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Smallest |w| for which a homogeneous point can be scaled to w = 1.
const MIN_FINITE_W: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("homogeneous point has all components zero")]
    ZeroPoint,
    #[error("point at infinity cannot be normalized to w = 1 (|w| = {0:e})")]
    PointAtInfinity(f64),
    #[error("line has all coefficients zero")]
    ZeroLine,
    #[error("line direction is degenerate (a^2 + b^2 = {0:e})")]
    DegenerateLine(f64),
    #[error("epipolar line is degenerate: point coincides with the epipole")]
    EpipoleCoincident,
    #[error("lines are parallel or identical; no unique intersection")]
    NoUniqueIntersection,
    #[error("Sampson denominator {0:e} vanishes (both points map to epipoles)")]
    SampsonDegenerate(f64),
    #[error("need at least 8 valid correspondences, got {0}")]
    NotEnoughCorrespondences(usize),
    #[error("degenerate correspondence configuration (insufficient constraints)")]
    DegenerateConfiguration,
    #[error("matrix is rank-deficient; cannot form a rank-2 fundamental matrix")]
    RankDeficient,
    #[error("svd failed")]
    SvdFailed,
}

/// Homogeneous 2D image point (pixels when w = 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomoPoint2 {
    pub x: f64,
    pub y: f64,
    pub w: f64,
}

impl HomoPoint2 {
    pub fn new(x: f64, y: f64, w: f64) -> Result<Self, GeometryError> {
        let p = Self { x, y, w };
        p.check()?;
        Ok(p)
    }

    /// Finite pixel point with w = 1.
    pub fn from_pixel(x: f64, y: f64) -> Self {
        Self { x, y, w: 1.0 }
    }

    pub fn from_point(p: &Point2<f64>) -> Self {
        Self::from_pixel(p.x, p.y)
    }

    fn check(&self) -> Result<(), GeometryError> {
        if self.x == 0.0 && self.y == 0.0 && self.w == 0.0 {
            return Err(GeometryError::ZeroPoint);
        }
        Ok(())
    }

    /// Scale so that w = 1. Errors for points at (or numerically near) infinity.
    pub fn normalize(&self) -> Result<Self, GeometryError> {
        self.check()?;
        if self.w.abs() <= MIN_FINITE_W {
            return Err(GeometryError::PointAtInfinity(self.w.abs()));
        }
        Ok(Self {
            x: self.x / self.w,
            y: self.y / self.w,
            w: 1.0,
        })
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.w)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self {
            x: v.x,
            y: v.y,
            w: v.z,
        }
    }
}

/// Line {p : a·p_x + b·p_y + c·w = 0} in homogeneous image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl EpipolarLine {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self, GeometryError> {
        if a == 0.0 && b == 0.0 && c == 0.0 {
            return Err(GeometryError::ZeroLine);
        }
        Ok(Self { a, b, c })
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.a, self.b, self.c)
    }

    fn max_abs(&self) -> f64 {
        self.a.abs().max(self.b.abs()).max(self.c.abs())
    }
}

/// Rank-2, Frobenius-normalized 3x3 map from points in one view to epipolar
/// lines in another.
///
/// The sign is left free; every consumer in this crate uses sign-invariant
/// quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix {
    m: Matrix3<f64>,
}

impl FundamentalMatrix {
    /// Enforce the rank-2 constraint (smallest singular value zeroed) and
    /// canonicalize scale to unit Frobenius norm.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let svd = m.svd(true, true);
        let u = svd.u.ok_or(GeometryError::SvdFailed)?;
        let v_t = svd.v_t.ok_or(GeometryError::SvdFailed)?;
        let s = svd.singular_values;
        if !(s[0] > 0.0) || s[1] <= 1e-12 * s[0] {
            return Err(GeometryError::RankDeficient);
        }
        let diag = Matrix3::from_diagonal(&Vector3::new(s[0], s[1], 0.0));
        let rank2 = u * diag * v_t;
        let norm = rank2.norm();
        if !(norm > 0.0) {
            return Err(GeometryError::RankDeficient);
        }
        Ok(Self { m: rank2 / norm })
    }

    /// Canonicalize a matrix that is already rank-2 by construction (e.g.
    /// assembled from a relative pose). Validates the spectrum but skips the
    /// lossy truncate-and-reconstruct round trip, which costs about six
    /// digits of epipolar precision.
    pub fn from_rank2(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let s = m.singular_values();
        if !(s[0] > 0.0) || s[1] <= 1e-12 * s[0] {
            return Err(GeometryError::RankDeficient);
        }
        if s[2] > 1e-9 * s[0] {
            // Not actually rank-2; fall back to enforcement.
            return Self::from_matrix(m);
        }
        Ok(Self { m: m / m.norm() })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// F(B, A) from F(A, B); transposition swaps the two views.
    pub fn transposed(&self) -> Self {
        Self {
            m: self.m.transpose(),
        }
    }
}

/// A putative match between pixel points in views A and B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub a: Point2<f64>,
    pub b: Point2<f64>,
    /// Matcher confidence in [0, 1].
    pub confidence: f64,
    /// Region-validity flag set by the correspondence source.
    pub valid: bool,
}

/// Outcome of robust fundamental-matrix estimation. `f` is absent when no
/// 8-point sample produced a model with at least 8 inliers.
#[derive(Debug, Clone)]
pub struct RansacResult {
    pub f: Option<FundamentalMatrix>,
    /// Indices into the input slice; each has Sampson error within threshold
    /// under `f`.
    pub inliers: Vec<usize>,
    pub n: usize,
}

impl RansacResult {
    pub fn absent() -> Self {
        Self {
            f: None,
            inliers: Vec::new(),
            n: 0,
        }
    }
}

/// l = F·p̃, returned as raw (unnormalized) line coefficients.
pub fn project_epipolar_line(
    f: &FundamentalMatrix,
    p: &HomoPoint2,
) -> Result<EpipolarLine, GeometryError> {
    p.check()?;
    let l = f.m * p.to_vector();
    if l.x.abs() < 1e-15 && l.y.abs() < 1e-15 && l.z.abs() < 1e-15 {
        return Err(GeometryError::EpipoleCoincident);
    }
    Ok(EpipolarLine {
        a: l.x,
        b: l.y,
        c: l.z,
    })
}

/// Intersection of two lines as their cross product.
pub fn intersect_lines(
    l1: &EpipolarLine,
    l2: &EpipolarLine,
) -> Result<HomoPoint2, GeometryError> {
    let z = l1.to_vector().cross(&l2.to_vector());
    let scale = l1.max_abs() * l2.max_abs();
    let max = z.x.abs().max(z.y.abs()).max(z.z.abs());
    if max < 1e-12 * scale {
        return Err(GeometryError::NoUniqueIntersection);
    }
    Ok(HomoPoint2::from_vector(&z))
}

/// Perpendicular pixel distance from `p` (normalized to w = 1) to `l`.
/// Invariant to rescaling of the line coefficients.
pub fn point_line_distance(l: &EpipolarLine, p: &HomoPoint2) -> Result<f64, GeometryError> {
    let n2 = l.a * l.a + l.b * l.b;
    if n2 <= 1e-18 {
        return Err(GeometryError::DegenerateLine(n2));
    }
    let p = p.normalize()?;
    Ok((l.a * p.x + l.b * p.y + l.c).abs() / n2.sqrt())
}

/// First-order (Sampson) approximation to the geometric reprojection error:
/// (x'ᵀFx)² / ((Fx)₁² + (Fx)₂² + (Fᵀx')₁² + (Fᵀx')₂²), in squared pixels.
pub fn sampson_error(
    f: &FundamentalMatrix,
    x: &HomoPoint2,
    xp: &HomoPoint2,
) -> Result<f64, GeometryError> {
    let x = x.normalize()?.to_vector();
    let xp = xp.normalize()?.to_vector();
    let fx = f.m * x;
    let ftxp = f.m.transpose() * xp;
    let denom = fx.x * fx.x + fx.y * fx.y + ftxp.x * ftxp.x + ftxp.y * ftxp.y;
    if denom <= 1e-18 {
        return Err(GeometryError::SampsonDegenerate(denom));
    }
    let residual = xp.dot(&(f.m * x));
    Ok(residual * residual / denom)
}

/// Hartley normalization: translate the centroid to the origin and scale the
/// mean distance to sqrt(2).
fn normalizing_transform(points: &[Point2<f64>]) -> Result<Matrix3<f64>, GeometryError> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist <= 1e-12 {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// Normalized eight-point estimate of the fundamental matrix with x_b'ᵀ F x_a = 0.
///
/// Only correspondences with `valid = true` participate; at least 8 are
/// required. Collinear or otherwise under-constraining configurations are
/// rejected via the spectral gap of the design matrix.
pub fn estimate_fundamental_8pt(
    corrs: &[Correspondence],
) -> Result<FundamentalMatrix, GeometryError> {
    let used: Vec<&Correspondence> = corrs.iter().filter(|c| c.valid).collect();
    if used.len() < 8 {
        return Err(GeometryError::NotEnoughCorrespondences(used.len()));
    }
    let pa: Vec<Point2<f64>> = used.iter().map(|c| c.a).collect();
    let pb: Vec<Point2<f64>> = used.iter().map(|c| c.b).collect();
    let ta = normalizing_transform(&pa)?;
    let tb = normalizing_transform(&pb)?;

    let n = used.len();
    let mut design = DMatrix::<f64>::zeros(n, 9);
    for i in 0..n {
        let a = ta * Vector3::new(pa[i].x, pa[i].y, 1.0);
        let b = tb * Vector3::new(pb[i].x, pb[i].y, 1.0);
        let (x, y) = (a.x / a.z, a.y / a.z);
        let (xp, yp) = (b.x / b.z, b.y / b.z);
        design[(i, 0)] = xp * x;
        design[(i, 1)] = xp * y;
        design[(i, 2)] = xp;
        design[(i, 3)] = yp * x;
        design[(i, 4)] = yp * y;
        design[(i, 5)] = yp;
        design[(i, 6)] = x;
        design[(i, 7)] = y;
        design[(i, 8)] = 1.0;
    }

    // Null vector of the design matrix via the spectrum of AᵀA.
    let ata = design.transpose() * &design;
    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .partial_cmp(&eig.eigenvalues[j])
            .expect("finite eigenvalues")
    });
    let lambda_max = eig.eigenvalues[order[8]].max(1e-300);
    // A second near-zero eigenvalue means the solution is not unique
    // (e.g. all points collinear).
    if eig.eigenvalues[order[1]] < 1e-10 * lambda_max {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let fv = eig.eigenvectors.column(order[0]);
    let fn_norm = Matrix3::new(
        fv[0], fv[1], fv[2], fv[3], fv[4], fv[5], fv[6], fv[7], fv[8],
    );
    // Undo normalization: x_b'ᵀ F x_a = (Tb x_b)ᵀ Fn (Ta x_a).
    FundamentalMatrix::from_matrix(tb.transpose() * fn_norm * ta)
}

/// Consensus set and its total Sampson error under `f`.
fn score_inliers(
    corrs: &[Correspondence],
    candidates: &[usize],
    f: &FundamentalMatrix,
    se_threshold: f64,
) -> (Vec<usize>, f64) {
    let mut inliers = Vec::new();
    let mut total = 0.0;
    for &i in candidates {
        let c = &corrs[i];
        let x = HomoPoint2::from_point(&c.a);
        let xp = HomoPoint2::from_point(&c.b);
        if let Ok(se) = sampson_error(f, &x, &xp) {
            if se <= se_threshold {
                inliers.push(i);
                total += se;
            }
        }
    }
    (inliers, total)
}

/// RANSAC over the normalized eight-point solver.
///
/// Scoring uses the Sampson error with threshold `threshold_px²` (Sampson is
/// a squared first-order pixel distance). The iteration count is fixed with
/// no adaptive early exit, so the result is a pure function of the inputs
/// and seed. `f` is absent when no sampled model reaches 8 inliers.
pub fn ransac_fundamental(
    corrs: &[Correspondence],
    threshold_px: f64,
    max_iters: usize,
    seed: u64,
) -> RansacResult {
    assert!(threshold_px > 0.0, "threshold must be positive");
    let pool: Vec<usize> = (0..corrs.len()).filter(|&i| corrs[i].valid).collect();
    if pool.len() < 8 {
        return RansacResult::absent();
    }
    let se_threshold = threshold_px * threshold_px;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Ties in consensus size are broken by total Sampson error: a sampled
    // outlier is interpolated exactly by its own model, so equal-sized but
    // contaminated consensus sets carry visibly larger residual mass.
    let mut best: Option<(Vec<usize>, f64, FundamentalMatrix)> = None;
    for _ in 0..max_iters {
        let picks = rand::seq::index::sample(&mut rng, pool.len(), 8);
        let sample: Vec<Correspondence> = picks.iter().map(|k| corrs[pool[k]]).collect();
        let Ok(f) = estimate_fundamental_8pt(&sample) else {
            continue;
        };
        let (inliers, total_se) = score_inliers(corrs, &pool, &f, se_threshold);
        let replace = match &best {
            Some((cur, cur_se, _)) => {
                inliers.len() > cur.len() || (inliers.len() == cur.len() && total_se < *cur_se)
            }
            None => true,
        };
        if replace {
            best = Some((inliers, total_se, f));
        }
    }

    let Some((inliers, _, f)) = best else {
        return RansacResult::absent();
    };
    if inliers.len() < 8 {
        return RansacResult::absent();
    }

    // Refit on the consensus set, then recompute the inliers so they are
    // exact under the returned model.
    let consensus: Vec<Correspondence> = inliers.iter().map(|&i| corrs[i]).collect();
    let final_f = estimate_fundamental_8pt(&consensus).unwrap_or(f);
    let (final_inliers, _) = score_inliers(corrs, &pool, &final_f, se_threshold);
    let n = final_inliers.len();
    RansacResult {
        f: Some(final_f),
        inliers: final_inliers,
        n,
    }
}
