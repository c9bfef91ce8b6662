//! Bidirectional epipolar attention masks: token-grid discretization, line
//! intersection and rasterization, reliability gating, temporal smoothing
//! and the binary mask file format.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Point2;
use thiserror::Error;

use crate::geometry::{
    intersect_lines, project_epipolar_line, FundamentalMatrix, GeometryError, HomoPoint2,
    RansacResult,
};

/// Intersections whose homogeneous w falls below this fraction of the line
/// coefficient scale are treated as numerically unstable and discarded.
const INTERSECTION_STABILITY: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("image {w}x{h} is not divisible by grid side {side}")]
    GridMismatch { w: u32, h: u32, side: u32 },
    #[error("pixel ({x}, {y}) outside the {w}x{h} image")]
    PixelOutOfImage { x: f64, y: f64, w: u32, h: u32 },
    #[error("triplet is missing an estimated fundamental matrix for pair {0}")]
    MissingFundamental(&'static str),
    #[error("source point lists differ in length ({past} past vs {fut} future)")]
    SourceLengthMismatch { past: usize, fut: usize },
    #[error("reliability saturation count {n_sat} must exceed minimum {n_min}")]
    BadReliabilityRange { n_min: usize, n_sat: usize },
    #[error("mask dimension mismatch: expected {expected} tokens, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("smoothing factor alpha = {0} outside [0, 1)")]
    BadAlpha(f64),
    #[error("mask file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Spatial discretization of the image into a square grid of L = side²
/// transformer tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub image_w: u32,
    pub image_h: u32,
    pub side: u32,
}

impl TokenGrid {
    pub fn new(image_w: u32, image_h: u32, side: u32) -> Result<Self, MaskError> {
        if side == 0 || image_w % side != 0 || image_h % side != 0 {
            return Err(MaskError::GridMismatch {
                w: image_w,
                h: image_h,
                side,
            });
        }
        Ok(Self {
            image_w,
            image_h,
            side,
        })
    }

    /// 224x224 image on a 14x14 grid: 196 tokens.
    pub fn default_224() -> Self {
        Self {
            image_w: 224,
            image_h: 224,
            side: 14,
        }
    }

    /// Coarse grid for fast tests (16 tokens on a 224x224 image).
    pub fn coarse_224() -> Self {
        Self {
            image_w: 224,
            image_h: 224,
            side: 4,
        }
    }

    pub fn token_count(&self) -> usize {
        (self.side * self.side) as usize
    }
}

/// Token index of a pixel: row-major over grid cells.
pub fn pixel_to_token(p: &Point2<f64>, grid: &TokenGrid) -> Result<usize, MaskError> {
    if !(p.x >= 0.0 && p.x < grid.image_w as f64 && p.y >= 0.0 && p.y < grid.image_h as f64) {
        return Err(MaskError::PixelOutOfImage {
            x: p.x,
            y: p.y,
            w: grid.image_w,
            h: grid.image_h,
        });
    }
    let cell_w = (grid.image_w / grid.side) as f64;
    let cell_h = (grid.image_h / grid.side) as f64;
    let col = (p.x / cell_w).floor() as usize;
    let row = (p.y / cell_h).floor() as usize;
    Ok(row * grid.side as usize + col)
}

/// L x L boolean attention mask. Rows are source tokens, columns are goal
/// tokens; a row without any geometric constraint stays all-true.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    l: usize,
    allow: Vec<bool>,
    row_constrained: Vec<bool>,
}

impl AttentionMask {
    pub fn all_true(l: usize) -> Self {
        Self {
            l,
            allow: vec![true; l * l],
            row_constrained: vec![false; l],
        }
    }

    pub fn token_count(&self) -> usize {
        self.l
    }

    #[inline]
    pub fn allows(&self, source: usize, goal: usize) -> bool {
        self.allow[source * self.l + goal]
    }

    pub fn is_row_constrained(&self, source: usize) -> bool {
        self.row_constrained[source]
    }

    pub fn is_all_true(&self) -> bool {
        self.row_constrained.iter().all(|&c| !c)
    }

    /// Add a geometric constraint. The first constraint on a row clears the
    /// all-true fallback for that row.
    pub fn constrain(&mut self, source: usize, goal: usize) {
        if !self.row_constrained[source] {
            self.row_constrained[source] = true;
            for g in 0..self.l {
                self.allow[source * self.l + g] = false;
            }
        }
        self.allow[source * self.l + goal] = true;
    }

    pub fn constrained_rows(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.l).filter(|&r| self.row_constrained[r])
    }

    pub fn allowed_in_row(&self, source: usize) -> Vec<usize> {
        (0..self.l).filter(|&g| self.allows(source, g)).collect()
    }

    /// Every row must keep at least one allowed entry and unconstrained rows
    /// must be all-true.
    pub fn validate(&self) -> Result<(), MaskError> {
        for r in 0..self.l {
            let row = &self.allow[r * self.l..(r + 1) * self.l];
            if self.row_constrained[r] {
                if !row.iter().any(|&v| v) {
                    return Err(MaskError::Format(format!("row {r} has no allowed entry")));
                }
            } else if !row.iter().all(|&v| v) {
                return Err(MaskError::Format(format!(
                    "unconstrained row {r} is not all-true"
                )));
            }
        }
        Ok(())
    }
}

/// Robust pairwise geometry of one (past, goal, future) triplet with the
/// reliability score of each pair.
#[derive(Debug, Clone)]
pub struct TripletGeometry {
    pub f_pg: RansacResult,
    pub f_fg: RansacResult,
    pub f_pf: RansacResult,
    pub r_pg: f64,
    pub r_fg: f64,
    pub r_pf: f64,
}

impl TripletGeometry {
    /// Derive reliabilities from the inlier counts, keeping the invariant
    /// that an absent fundamental matrix scores zero.
    pub fn from_results(
        f_pg: RansacResult,
        f_fg: RansacResult,
        f_pf: RansacResult,
        n_min: usize,
        n_sat: usize,
    ) -> Result<Self, MaskError> {
        let r_pg = reliability_score(&f_pg, n_min, n_sat)?;
        let r_fg = reliability_score(&f_fg, n_min, n_sat)?;
        let r_pf = reliability_score(&f_pf, n_min, n_sat)?;
        Ok(Self {
            f_pg,
            f_fg,
            f_pf,
            r_pg,
            r_fg,
            r_pf,
        })
    }
}

/// Fraction of the inlier range covered: 0 at `n_min` or below (or when no
/// model exists), 1 at `n_sat` or above, linear in between.
pub fn reliability_score(
    res: &RansacResult,
    n_min: usize,
    n_sat: usize,
) -> Result<f64, MaskError> {
    if n_sat <= n_min {
        return Err(MaskError::BadReliabilityRange { n_min, n_sat });
    }
    if res.f.is_none() {
        return Ok(0.0);
    }
    let raw = (res.n as f64 - n_min as f64) / (n_sat as f64 - n_min as f64);
    Ok(raw.clamp(0.0, 1.0))
}

/// The triplet uses geometric masks only when the weakest pair is reliable
/// enough; otherwise downstream must fall back to all-true masks.
pub fn gate_triplet(geo: &TripletGeometry, tau_rel: f64) -> bool {
    geo.r_pg.min(geo.r_pf).min(geo.r_fg) >= tau_rel
}

/// Build the bidirectional masks for one goal frame.
///
/// `past_pts[j]` and `fut_pts[j]` are the two endpoints of the j-th
/// past-future match. Each is projected to an epipolar line in the goal
/// frame via the respective fundamental matrix; the intersection of the two
/// lines is the predicted goal location of the shared scene point.
/// Intersections that are numerically unstable or fall outside the image are
/// discarded. Source tokens with at least one surviving correspondence allow
/// exactly the goal tokens of their intersections; all other rows stay fully
/// unmasked.
pub fn build_triplet_masks(
    past_pts: &[Point2<f64>],
    fut_pts: &[Point2<f64>],
    geo: &TripletGeometry,
    grid: &TokenGrid,
) -> Result<(AttentionMask, AttentionMask), MaskError> {
    if past_pts.len() != fut_pts.len() {
        return Err(MaskError::SourceLengthMismatch {
            past: past_pts.len(),
            fut: fut_pts.len(),
        });
    }
    let f_pg = geo
        .f_pg
        .f
        .as_ref()
        .ok_or(MaskError::MissingFundamental("past-goal"))?;
    let f_fg = geo
        .f_fg
        .f
        .as_ref()
        .ok_or(MaskError::MissingFundamental("future-goal"))?;

    let l = grid.token_count();
    let mut m_past = AttentionMask::all_true(l);
    let mut m_fut = AttentionMask::all_true(l);

    for (pp, pf) in past_pts.iter().zip(fut_pts.iter()) {
        let Some(goal) = goal_intersection(f_pg, f_fg, pp, pf) else {
            continue;
        };
        if !(goal.x >= 0.0
            && goal.x < grid.image_w as f64
            && goal.y >= 0.0
            && goal.y < grid.image_h as f64)
        {
            continue;
        }
        // Match endpoints can drift outside the image under noise; such
        // correspondences cannot be rasterized and are dropped.
        let (Ok(src_past), Ok(src_fut)) = (pixel_to_token(pp, grid), pixel_to_token(pf, grid))
        else {
            continue;
        };
        let goal_token = pixel_to_token(&Point2::new(goal.x, goal.y), grid)?;
        m_past.constrain(src_past, goal_token);
        m_fut.constrain(src_fut, goal_token);
    }
    Ok((m_past, m_fut))
}

/// Intersection of the two goal-frame epipolar lines, or None when either
/// line or the crossing is degenerate/unstable.
fn goal_intersection(
    f_pg: &FundamentalMatrix,
    f_fg: &FundamentalMatrix,
    past: &Point2<f64>,
    fut: &Point2<f64>,
) -> Option<HomoPoint2> {
    let l_p = project_epipolar_line(f_pg, &HomoPoint2::from_point(past)).ok()?;
    let l_f = project_epipolar_line(f_fg, &HomoPoint2::from_point(fut)).ok()?;
    let z = intersect_lines(&l_p, &l_f).ok()?;
    let scale = l_p.a.abs().max(l_p.b.abs()).max(l_p.c.abs())
        * l_f.a.abs().max(l_f.b.abs()).max(l_f.c.abs());
    if z.w.abs() < INTERSECTION_STABILITY * scale {
        return None;
    }
    z.normalize().ok()
}

/// Per-frame mask pairs for one chunk. `gated == false` means the whole
/// chunk fell back to full attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSequence {
    pub masks: Vec<(AttentionMask, AttentionMask)>,
    pub gated: bool,
}

impl MaskSequence {
    pub fn all_true(l: usize, len: usize) -> Self {
        Self {
            masks: (0..len)
                .map(|_| (AttentionMask::all_true(l), AttentionMask::all_true(l)))
                .collect(),
            gated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Exponential moving average over a sequence of binary masks, binarized at
/// `tau_temp`.
///
/// The running average is initialized with the first mask, so the first
/// output equals the first input. Smoothing only applies to constrained
/// rows: an unconstrained row is a semantic "no constraint", passes through
/// untouched and contributes nothing to the average. A constrained row whose
/// smoothed entries all fall below the threshold reverts to the
/// unconstrained fallback.
pub fn smooth_mask_sequence(
    seq: &[AttentionMask],
    alpha: f64,
    tau_temp: f64,
) -> Result<Vec<AttentionMask>, MaskError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(MaskError::BadAlpha(alpha));
    }
    let Some(first) = seq.first() else {
        return Ok(Vec::new());
    };
    let l = first.l;
    for m in seq {
        if m.l != l {
            return Err(MaskError::DimensionMismatch {
                expected: l,
                got: m.l,
            });
        }
    }

    // EMA state per row; None until the row is first seen constrained.
    let mut state: Vec<Option<Vec<f64>>> = vec![None; l];
    let mut out = Vec::with_capacity(seq.len());
    for mask in seq {
        let mut smoothed = AttentionMask::all_true(l);
        for r in 0..l {
            if !mask.row_constrained[r] {
                continue;
            }
            let row: Vec<f64> = (0..l)
                .map(|g| if mask.allows(r, g) { 1.0 } else { 0.0 })
                .collect();
            let ema = match &mut state[r] {
                Some(prev) => {
                    for (p, v) in prev.iter_mut().zip(&row) {
                        *p = alpha * *p + (1.0 - alpha) * v;
                    }
                    prev.clone()
                }
                None => {
                    state[r] = Some(row.clone());
                    row
                }
            };
            for (g, &v) in ema.iter().enumerate() {
                if v >= tau_temp {
                    smoothed.constrain(r, g);
                }
            }
            // If every entry decayed below the threshold the row keeps its
            // all-true fallback (no usable constraint is left).
        }
        out.push(smoothed);
    }
    Ok(out)
}

const MASK_MAGIC: &[u8; 4] = b"DRNM";
const MASK_VERSION: u32 = 1;

/// Serialize a mask sequence.
///
/// Layout (little-endian): magic `DRNM`, u32 version, u32 L, u32 K, then per
/// frame and per mask (past first) a row_constrained bitmap of ceil(L/8)
/// bytes (bit r%8 of byte r/8), followed, for each constrained row in
/// ascending order, by u16 count and count u16 column indices sorted
/// ascending. All-true masks encode as an all-zero bitmap with no row
/// payloads.
pub fn write_mask_bytes(seq: &MaskSequence) -> Result<Vec<u8>, MaskError> {
    let l = seq.masks.first().map(|(p, _)| p.l).unwrap_or(0);
    let mut out = Vec::new();
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&MASK_VERSION.to_le_bytes());
    out.extend_from_slice(&(l as u32).to_le_bytes());
    out.extend_from_slice(&(seq.masks.len() as u32).to_le_bytes());
    for (past, fut) in &seq.masks {
        for mask in [past, fut] {
            if mask.l != l {
                return Err(MaskError::DimensionMismatch {
                    expected: l,
                    got: mask.l,
                });
            }
            mask.validate()?;
            let mut bitmap = vec![0u8; l.div_ceil(8)];
            for r in mask.constrained_rows() {
                bitmap[r / 8] |= 1 << (r % 8);
            }
            out.extend_from_slice(&bitmap);
            for r in mask.constrained_rows() {
                let cols = mask.allowed_in_row(r);
                if cols.len() > u16::MAX as usize {
                    return Err(MaskError::Format("row payload exceeds u16".into()));
                }
                out.extend_from_slice(&(cols.len() as u16).to_le_bytes());
                for c in cols {
                    out.extend_from_slice(&(c as u16).to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn read_mask_bytes(bytes: &[u8]) -> Result<MaskSequence, MaskError> {
    let mut cur = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| MaskError::Format("truncated magic".into()))?;
    if &magic != MASK_MAGIC {
        return Err(MaskError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut cur)?;
    if version != MASK_VERSION {
        return Err(MaskError::Format(format!("unsupported version {version}")));
    }
    let l = read_u32(&mut cur)? as usize;
    let k = read_u32(&mut cur)? as usize;
    let mut masks = Vec::with_capacity(k);
    for _ in 0..k {
        let past = read_one_mask(&mut cur, l)?;
        let fut = read_one_mask(&mut cur, l)?;
        masks.push((past, fut));
    }
    let mut trailing = Vec::new();
    cur.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(MaskError::Format(format!(
            "{} trailing bytes after payload",
            trailing.len()
        )));
    }
    let gated = masks
        .iter()
        .any(|(p, f)| !p.is_all_true() || !f.is_all_true());
    Ok(MaskSequence { masks, gated })
}

fn read_one_mask(cur: &mut std::io::Cursor<&[u8]>, l: usize) -> Result<AttentionMask, MaskError> {
    let mut bitmap = vec![0u8; l.div_ceil(8)];
    cur.read_exact(&mut bitmap)
        .map_err(|_| MaskError::Format("truncated bitmap".into()))?;
    let mut mask = AttentionMask::all_true(l);
    for r in 0..l {
        if bitmap[r / 8] & (1 << (r % 8)) == 0 {
            continue;
        }
        let count = read_u16(cur)? as usize;
        if count == 0 {
            return Err(MaskError::Format(format!("constrained row {r} is empty")));
        }
        let mut prev: Option<usize> = None;
        for _ in 0..count {
            let col = read_u16(cur)? as usize;
            if col >= l {
                return Err(MaskError::Format(format!(
                    "column {col} out of range for L = {l}"
                )));
            }
            if let Some(p) = prev {
                if col <= p {
                    return Err(MaskError::Format("columns not strictly ascending".into()));
                }
            }
            prev = Some(col);
            mask.constrain(r, col);
        }
    }
    Ok(mask)
}

fn read_u32(cur: &mut std::io::Cursor<&[u8]>) -> Result<u32, MaskError> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)
        .map_err(|_| MaskError::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(cur: &mut std::io::Cursor<&[u8]>) -> Result<u16, MaskError> {
    let mut b = [0u8; 2];
    cur.read_exact(&mut b)
        .map_err(|_| MaskError::Format("truncated row payload".into()))?;
    Ok(u16::from_le_bytes(b))
}

pub fn write_mask_file(path: &Path, seq: &MaskSequence) -> Result<(), MaskError> {
    let bytes = write_mask_bytes(seq)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_mask_file(path: &Path) -> Result<MaskSequence, MaskError> {
    let bytes = std::fs::read(path)?;
    read_mask_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pixel_to_token_corners_and_center() {
        let grid = TokenGrid::default_224();
        assert_eq!(pixel_to_token(&Point2::new(0.0, 0.0), &grid).unwrap(), 0);
        assert_eq!(
            pixel_to_token(&Point2::new(223.0, 223.0), &grid).unwrap(),
            195
        );
        assert_eq!(
            pixel_to_token(&Point2::new(112.0, 112.0), &grid).unwrap(),
            105
        );
    }

    #[test]
    fn out_of_image_pixel_rejected() {
        let grid = TokenGrid::default_224();
        assert!(pixel_to_token(&Point2::new(224.0, 5.0), &grid).is_err());
        assert!(pixel_to_token(&Point2::new(-0.1, 5.0), &grid).is_err());
    }

    #[test]
    fn grid_requires_divisibility() {
        assert!(TokenGrid::new(224, 224, 13).is_err());
        assert!(TokenGrid::new(224, 224, 14).is_ok());
    }

    fn some_f() -> FundamentalMatrix {
        FundamentalMatrix::from_matrix(nalgebra::Matrix3::new(
            0.0, -1.0, 2.0, 1.0, 0.0, -3.0, -2.0, 3.0, 0.0,
        ))
        .unwrap()
    }

    #[test]
    fn reliability_boundaries() {
        let with_n = |n: usize| RansacResult {
            f: Some(some_f()),
            inliers: Vec::new(),
            n,
        };
        assert_eq!(reliability_score(&with_n(16), 16, 64).unwrap(), 0.0);
        assert_eq!(reliability_score(&with_n(64), 16, 64).unwrap(), 1.0);
        assert_eq!(reliability_score(&with_n(40), 16, 64).unwrap(), 0.5);
        assert_eq!(reliability_score(&with_n(10), 16, 64).unwrap(), 0.0);
        assert_eq!(reliability_score(&with_n(100), 16, 64).unwrap(), 1.0);
        assert_eq!(
            reliability_score(&RansacResult::absent(), 16, 64).unwrap(),
            0.0
        );
        assert!(reliability_score(&with_n(40), 64, 16).is_err());
    }

    #[test]
    fn reliability_monotone() {
        let mut prev = 0.0;
        for n in 0..80 {
            let res = RansacResult {
                f: Some(some_f()),
                inliers: Vec::new(),
                n,
            };
            let r = reliability_score(&res, 16, 64).unwrap();
            assert!(r >= prev);
            assert!((0.0..=1.0).contains(&r));
            prev = r;
        }
    }

    #[test]
    fn gate_uses_minimum_rule() {
        let geo = TripletGeometry {
            f_pg: RansacResult::absent(),
            f_fg: RansacResult::absent(),
            f_pf: RansacResult::absent(),
            r_pg: 1.0,
            r_fg: 1.0,
            r_pf: 0.05,
        };
        assert!(!gate_triplet(&geo, 0.1));
        let ok = TripletGeometry {
            r_pg: 0.5,
            r_fg: 0.5,
            r_pf: 0.5,
            ..geo
        };
        assert!(gate_triplet(&ok, 0.1));
    }

    #[test]
    fn absent_model_gates_out() {
        let geo = TripletGeometry::from_results(
            RansacResult::absent(),
            RansacResult::absent(),
            RansacResult::absent(),
            16,
            64,
        )
        .unwrap();
        assert_eq!(geo.r_pg, 0.0);
        assert!(!gate_triplet(&geo, 0.1));
    }

    #[test]
    fn masks_require_present_fundamentals() {
        let geo = TripletGeometry::from_results(
            RansacResult::absent(),
            RansacResult::absent(),
            RansacResult::absent(),
            16,
            64,
        )
        .unwrap();
        let grid = TokenGrid::coarse_224();
        let pts = vec![Point2::new(10.0, 10.0)];
        assert!(matches!(
            build_triplet_masks(&pts, &pts, &geo, &grid),
            Err(MaskError::MissingFundamental(_))
        ));
    }

    #[test]
    fn ema_fixed_point_on_constant_sequence() {
        let l = 16;
        let mut m = AttentionMask::all_true(l);
        m.constrain(3, 7);
        m.constrain(3, 9);
        m.constrain(5, 1);
        let seq = vec![m.clone(), m.clone(), m.clone()];
        let out = smooth_mask_sequence(&seq, 0.6, 0.5).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn ema_entry_traces_match_constants() {
        let l = 4;
        let mut on = AttentionMask::all_true(l);
        on.constrain(0, 2);
        // Row 0 constrained to a different column: the (0, 2) entry sees 0.
        let mut off = AttentionMask::all_true(l);
        off.constrain(0, 1);

        // 1 then 0: 0.6*1 + 0.4*0 = 0.6 >= 0.5 keeps the entry; the fresh
        // column enters at 0.4 < 0.5 and is dropped.
        let out = smooth_mask_sequence(&[on.clone(), off.clone()], 0.6, 0.5).unwrap();
        assert!(out[1].allows(0, 2));
        assert!(!out[1].allows(0, 1));

        // 1, 0, 0: third step 0.6*0.6 = 0.36 < 0.5 flips the entry off.
        let out =
            smooth_mask_sequence(&[on.clone(), off.clone(), off.clone()], 0.6, 0.5).unwrap();
        assert!(!out[2].allows(0, 2));
    }

    #[test]
    fn ema_preserves_unconstrained_rows() {
        let l = 9;
        let mut m1 = AttentionMask::all_true(l);
        m1.constrain(2, 4);
        let m2 = AttentionMask::all_true(l);
        let out = smooth_mask_sequence(&[m1, m2.clone()], 0.6, 0.5).unwrap();
        assert!(out[1].is_all_true());
        assert_eq!(out[1], m2);
    }

    #[test]
    fn ema_row_that_decays_fully_reverts_to_fallback() {
        let l = 4;
        // Row 0 constrained to disjoint columns on three consecutive frames:
        // by the third frame every entry is below threshold (0.36, 0.24, 0.4).
        let mut a = AttentionMask::all_true(l);
        a.constrain(0, 0);
        let mut b = AttentionMask::all_true(l);
        b.constrain(0, 1);
        let mut c = AttentionMask::all_true(l);
        c.constrain(0, 2);
        let out = smooth_mask_sequence(&[a, b, c], 0.6, 0.5).unwrap();
        assert!(!out[2].is_row_constrained(0));
        out[2].validate().unwrap();
    }

    #[test]
    fn empty_sequence_smooths_to_empty() {
        assert!(smooth_mask_sequence(&[], 0.6, 0.5).unwrap().is_empty());
    }

    fn random_sequence(l: usize, k: usize, seed: u64) -> MaskSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masks = Vec::new();
        for _ in 0..k {
            let mut past = AttentionMask::all_true(l);
            let mut fut = AttentionMask::all_true(l);
            for _ in 0..rng.random_range(1..20) {
                past.constrain(rng.random_range(0..l), rng.random_range(0..l));
                fut.constrain(rng.random_range(0..l), rng.random_range(0..l));
            }
            masks.push((past, fut));
        }
        MaskSequence { masks, gated: true }
    }

    #[test]
    fn mask_file_round_trip_is_bit_exact() {
        let seq = random_sequence(196, 3, 5);
        let bytes = write_mask_bytes(&seq).unwrap();
        let parsed = read_mask_bytes(&bytes).unwrap();
        assert_eq!(parsed, seq);
        let rewritten = write_mask_bytes(&parsed).unwrap();
        assert_eq!(rewritten, bytes);
    }

    #[test]
    fn all_true_sequence_encodes_compactly() {
        let seq = MaskSequence::all_true(196, 2);
        let bytes = write_mask_bytes(&seq).unwrap();
        // Header + 4 bitmaps of ceil(196/8) bytes, no row payloads.
        assert_eq!(bytes.len(), 16 + 4 * 25);
        let parsed = read_mask_bytes(&bytes).unwrap();
        assert!(!parsed.gated);
        assert_eq!(parsed, seq);
    }

    #[test]
    fn header_payload_mismatch_rejected() {
        let seq = random_sequence(16, 2, 9);
        let mut bytes = write_mask_bytes(&seq).unwrap();
        // Lie about L in the header.
        bytes[8..12].copy_from_slice(&32u32.to_le_bytes());
        assert!(read_mask_bytes(&bytes).is_err());
        // Truncate the payload.
        let good = write_mask_bytes(&seq).unwrap();
        assert!(read_mask_bytes(&good[..good.len() - 3]).is_err());
        // Trailing garbage.
        let mut long = write_mask_bytes(&seq).unwrap();
        long.push(0);
        assert!(read_mask_bytes(&long).is_err());
    }
}
