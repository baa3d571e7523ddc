//! Inverted movement calculation for chains of rigid columns.
//!
//! A column of rest length `L` standing vertically on its bottom node is
//! described after deformation by two angles: `r_y`, the rotation about the
//! global y-axis, and `t_x`, the rotation about the global x-axis. The column
//! direction is
//!
//! ```text
//! (sin r_y, cos r_y · sin t_x, cos r_y · cos t_x)
//! ```
//!
//! so the measured horizontal offset of the top node relative to the bottom
//! node fixes both angles, and the vertical position of the top node follows
//! from the rigid-length constraint. [`solve_column`] performs that inversion,
//! [`forward_column`] is its forward counterpart, and [`center_pose`] turns a
//! solution into the translation a renderer applies at the column center.

use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;
use core::fmt;
use core::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

/// Relative excess over `|1|` accepted by [`safe_asin`] before a ratio is
/// treated as physically impossible.
pub const ASIN_TOLERANCE: f64 = 1e-6;

/// `|cos r_y|` below this value leaves `t_x` undefined.
pub const SINGULARITY_COS: f64 = 1e-9;

/// Tolerance used when checking a stated column length against its rest
/// endpoints.
pub const LENGTH_TOLERANCE: f64 = 1e-9;

/// A point (or offset) in the global coordinate system, in meters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        (*self - *other).norm()
    }
}

impl From<[f64; 3]> for Point3 {
    fn from([x, y, z]: [f64; 3]) -> Self {
        Point3 { x, y, z }
    }
}

impl From<Point3> for [f64; 3] {
    fn from(p: Point3) -> Self {
        [p.x, p.y, p.z]
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, rhs: Point3) -> Point3 {
        Point3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, rhs: Point3) -> Point3 {
        Point3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl fmt::Display for Point3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, thiserror::Error)]
pub enum KinematicsError {
    /// An arcsine argument left `[-1, 1]` by more than the noise tolerance:
    /// the node is farther from its base than the rigid length allows.
    #[error("arcsine argument {value} outside [-1, 1] beyond tolerance {tolerance}")]
    Domain { value: f64, tolerance: f64 },
    /// The column lies (numerically) horizontal in the x-z plane.
    #[error("column is horizontal (cos r_y = {cos_r_y:e}); rotation about x is undefined")]
    Singularity { cos_r_y: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("column length must be positive and finite, got {0}")]
    NonPositiveLength(f64),
    #[error("column length {length} does not match endpoint distance {distance}")]
    LengthMismatch { length: f64, distance: f64 },
    #[error("column endpoints must be finite")]
    NonFinite,
}

/// Arcsine that absorbs measurement noise just past `±1`.
///
/// Values with `|value| <= 1 + tolerance` are clamped into `[-1, 1]`; anything
/// beyond is a [`KinematicsError::Domain`].
pub fn safe_asin(value: f64, tolerance: f64) -> Result<f64, KinematicsError> {
    debug_assert!(tolerance >= 0.0);
    if !value.is_finite() || libm::fabs(value) > 1.0 + tolerance {
        return Err(KinematicsError::Domain { value, tolerance });
    }
    Ok(libm::asin(value.clamp(-1.0, 1.0)))
}

/// Rest geometry of one rigid column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawColumnGeometry")]
pub struct ColumnGeometry {
    length: f64,
    rest_bottom: Point3,
    rest_top: Point3,
}

#[derive(Deserialize)]
struct RawColumnGeometry {
    length: f64,
    rest_bottom: Point3,
    rest_top: Point3,
}

impl TryFrom<RawColumnGeometry> for ColumnGeometry {
    type Error = GeometryError;

    fn try_from(raw: RawColumnGeometry) -> Result<Self, Self::Error> {
        ColumnGeometry::with_length(raw.length, raw.rest_bottom, raw.rest_top)
    }
}

impl ColumnGeometry {
    /// Builds a column whose length is the distance between its rest
    /// endpoints.
    pub fn new(rest_bottom: Point3, rest_top: Point3) -> Result<Self, GeometryError> {
        if !rest_bottom.is_finite() || !rest_top.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        let length = rest_top.distance(&rest_bottom);
        if length.is_nan() || length <= 0.0 {
            return Err(GeometryError::NonPositiveLength(length));
        }
        Ok(ColumnGeometry { length, rest_bottom, rest_top })
    }

    /// Builds a column from an explicit length, which must agree with the
    /// endpoint distance within [`LENGTH_TOLERANCE`].
    pub fn with_length(
        length: f64,
        rest_bottom: Point3,
        rest_top: Point3,
    ) -> Result<Self, GeometryError> {
        if length.is_nan() || length <= 0.0 || !length.is_finite() {
            return Err(GeometryError::NonPositiveLength(length));
        }
        if !rest_bottom.is_finite() || !rest_top.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        let distance = rest_top.distance(&rest_bottom);
        if libm::fabs(distance - length) > LENGTH_TOLERANCE {
            return Err(GeometryError::LengthMismatch { length, distance });
        }
        Ok(ColumnGeometry { length, rest_bottom, rest_top })
    }

    /// A vertical column of the given length standing on `rest_bottom`.
    pub fn vertical(rest_bottom: Point3, length: f64) -> Result<Self, GeometryError> {
        Self::new(rest_bottom, rest_bottom + Point3::new(0.0, 0.0, length))
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn rest_bottom(&self) -> Point3 {
        self.rest_bottom
    }

    pub fn rest_top(&self) -> Point3 {
        self.rest_top
    }

    /// Same column with every coordinate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, GeometryError> {
        Self::new(self.rest_bottom * factor, self.rest_top * factor)
    }
}

/// Result of inverting one column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSolution {
    /// Rotation about the y-axis, radians.
    pub r_y: f64,
    /// Rotation about the x-axis, radians.
    pub t_x: f64,
    pub length: f64,
    pub bottom_primed: Point3,
    pub top_primed: Point3,
    /// Vertical drop of the top caused by the two rotations, `>= 0`.
    pub dz_shortening: f64,
    /// `top'.x - bottom'.x`
    pub delta_x: f64,
    /// `top'.y - bottom'.y`
    pub delta_y: f64,
}

impl ColumnSolution {
    /// `delta_x² + delta_y² + height² - L²`, zero up to rounding for every
    /// unclamped solution.
    pub fn closure_residual(&self) -> f64 {
        let h = self.top_primed.z - self.bottom_primed.z;
        self.delta_x * self.delta_x + self.delta_y * self.delta_y + h * h
            - self.length * self.length
    }
}

/// Inverts one column from its deformed bottom position and the measured
/// horizontal position of its top.
///
/// The top's x and y are taken verbatim from the measurement; its z is
/// recomputed from the rigid-length constraint.
pub fn solve_column(
    bottom_primed: Point3,
    top_measured_xy: (f64, f64),
    geometry: &ColumnGeometry,
) -> Result<ColumnSolution, KinematicsError> {
    let length = geometry.length;
    let delta_x = top_measured_xy.0 - bottom_primed.x;
    let delta_y = top_measured_xy.1 - bottom_primed.y;

    let r_y = safe_asin(delta_x / length, ASIN_TOLERANCE)?;
    let cos_r_y = libm::cos(r_y);
    if libm::fabs(cos_r_y) < SINGULARITY_COS {
        return Err(KinematicsError::Singularity { cos_r_y });
    }
    let t_x = safe_asin(delta_y / (length * cos_r_y), ASIN_TOLERANCE)?;
    let cos_t_x = libm::cos(t_x);

    let height = length * cos_r_y * cos_t_x;
    let top_primed = Point3::new(top_measured_xy.0, top_measured_xy.1, bottom_primed.z + height);
    // Computed from the stored height so that L - (top'.z - bottom'.z) agrees
    // with it as closely as the floating point sum allows.
    let dz_shortening = length - (top_primed.z - bottom_primed.z);

    Ok(ColumnSolution {
        r_y,
        t_x,
        length,
        bottom_primed,
        top_primed,
        dz_shortening,
        delta_x,
        delta_y,
    })
}

/// Top position of a column rotated by `r_y` then `t_x` about its bottom.
pub fn forward_column(bottom_primed: Point3, geometry: &ColumnGeometry, r_y: f64, t_x: f64) -> Point3 {
    debug_assert!(libm::fabs(r_y) < FRAC_PI_2 && libm::fabs(t_x) < FRAC_PI_2);
    let l = geometry.length;
    let (sin_r, cos_r) = (libm::sin(r_y), libm::cos(r_y));
    let (sin_t, cos_t) = (libm::sin(t_x), libm::cos(t_x));
    bottom_primed + Point3::new(l * sin_r, l * cos_r * sin_t, l * cos_r * cos_t)
}

/// A column failure inside a chain.
#[derive(Clone, Copy, Debug, PartialEq, thiserror::Error)]
#[error("column {column_index}: {source}")]
pub struct ChainError {
    /// Zero-based position of the failing column in the chain.
    pub column_index: usize,
    pub source: KinematicsError,
}

/// Solves a chain of columns from the base upward.
///
/// `measured_xy` holds the measured absolute (x, y) of each column top, in
/// chain order. Column `k` is solved on the computed top of column `k - 1`,
/// so adjacent solutions share their joint exactly.
pub fn solve_chain(
    chain: &[ColumnGeometry],
    measured_xy: &[(f64, f64)],
    base_primed: Point3,
) -> Result<Vec<ColumnSolution>, ChainError> {
    assert_eq!(
        chain.len(),
        measured_xy.len(),
        "one measured position is required per column top"
    );
    let mut out = Vec::with_capacity(chain.len());
    let mut bottom = base_primed;
    for (column_index, (geometry, &xy)) in chain.iter().zip(measured_xy).enumerate() {
        let solution = solve_column(bottom, xy, geometry)
            .map_err(|source| ChainError { column_index, source })?;
        bottom = solution.top_primed;
        out.push(solution);
    }
    Ok(out)
}

/// Render transform of a column: its two angles plus the translation of its
/// center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnPose {
    pub r_y: f64,
    pub t_x: f64,
    pub center_translation: Point3,
}

/// Center translation for a column rotated about its center rather than its
/// bottom.
///
/// `bottom_shift` is the bottom node's deformed position minus its rest
/// position. The z component is signed: the center drops by
/// `(L/2)·((1 - cos t_x) + (1 - cos r_y)·cos t_x)`, emitted as a negative
/// offset.
pub fn center_pose(solution: &ColumnSolution, bottom_shift: Point3) -> ColumnPose {
    let half = solution.length / 2.0;
    let (r_y, t_x) = (solution.r_y, solution.t_x);
    let cos_t = libm::cos(t_x);
    let drop = half * ((1.0 - cos_t) + (1.0 - libm::cos(r_y)) * cos_t);
    ColumnPose {
        r_y,
        t_x,
        center_translation: Point3::new(
            half * libm::sin(r_y) + bottom_shift.x,
            half * libm::sin(t_x) + bottom_shift.y,
            bottom_shift.z - drop,
        ),
    }
}
