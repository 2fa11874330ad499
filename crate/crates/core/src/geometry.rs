//! Camera calibration, ground-grid discretization and cylinder projection.
//!
//! A camera is a single 3×4 projection matrix mapping homogeneous world
//! coordinates (meters, z up, ground at z = 0) to homogeneous pixels. A person
//! standing on a ground cell is approximated by a vertical cylinder whose
//! projected bounding box is the crop fed to the per-view embedding.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Point2, Point3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Patch, RgbImage};

/// Points sampled on each of the base and top circles of a cylinder.
pub const CYLINDER_SAMPLES: usize = 8;
/// Clipped crops smaller than this (px²) carry no usable appearance.
pub const MIN_VISIBLE_AREA_PX: f64 = 4.0;
/// Homogeneous depth at or below this is treated as behind the camera.
pub const DEPTH_EPSILON: f64 = 1e-6;

pub const DEFAULT_PERSON_RADIUS_M: f64 = 0.3;
pub const DEFAULT_PERSON_HEIGHT_M: f64 = 1.75;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point lies behind camera {camera_id} (homogeneous depth {depth:.3e})")]
    PointBehindCamera { camera_id: u32, depth: f64 },
    #[error("cell index {index} is out of range for a grid of {cells} cells")]
    IndexOutOfRange { index: usize, cells: usize },
    #[error("invalid calibration for camera {camera_id}: {reason}")]
    InvalidCalibration { camera_id: u32, reason: String },
    #[error("invalid ground grid: {0}")]
    InvalidGrid(String),
    #[error("invalid cylinder: {0}")]
    InvalidCylinder(String),
    #[error("crop output size must be positive, got {out_h}x{out_w}")]
    InvalidOutputSize { out_h: usize, out_w: usize },
    #[error("trimming {trim_px} px from each side of a {out_w}-px wide crop leaves nothing")]
    EmptyAfterTrim { trim_px: u32, out_w: usize },
}

/// A calibrated camera: projection matrix plus image size in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CalibrationRecord", into = "CalibrationRecord")]
pub struct CameraCalibration {
    camera_id: u32,
    projection: Matrix3x4<f64>,
    width: u32,
    height: u32,
}

/// On-disk layout of one camera entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CalibrationRecord {
    camera_id: u32,
    #[serde(rename = "P")]
    p: [[f64; 4]; 3],
    width: u32,
    height: u32,
}

impl TryFrom<CalibrationRecord> for CameraCalibration {
    type Error = GeometryError;

    fn try_from(r: CalibrationRecord) -> Result<Self, Self::Error> {
        let p = Matrix3x4::from_fn(|i, j| r.p[i][j]);
        CameraCalibration::new(r.camera_id, p, r.width, r.height)
    }
}

impl From<CameraCalibration> for CalibrationRecord {
    fn from(c: CameraCalibration) -> Self {
        let mut p = [[0.0; 4]; 3];
        for (i, row) in p.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = c.projection[(i, j)];
            }
        }
        Self {
            camera_id: c.camera_id,
            p,
            width: c.width,
            height: c.height,
        }
    }
}

impl CameraCalibration {
    pub fn new(
        camera_id: u32,
        projection: Matrix3x4<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let invalid = |reason: &str| GeometryError::InvalidCalibration {
            camera_id,
            reason: reason.to_string(),
        };
        if width == 0 || height == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        if projection.iter().any(|v| !v.is_finite()) {
            return Err(invalid("projection matrix has non-finite entries"));
        }
        let m = projection.fixed_view::<3, 3>(0, 0).into_owned();
        // Scale-aware rank test: |det| against the product of row norms.
        let scale: f64 = m.row_iter().map(|r| r.norm()).product();
        if scale == 0.0 || m.determinant().abs() <= 1e-12 * scale {
            return Err(invalid("left 3x3 block of P is singular"));
        }
        Ok(Self {
            camera_id,
            projection,
            width,
            height,
        })
    }

    pub fn camera_id(&self) -> u32 {
        self.camera_id
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

    /// Homogeneous projection `P·[x y z 1]ᵀ`.
    pub fn project_homogeneous(&self, point: &Point3<f64>) -> Vector3<f64> {
        self.projection * Vector4::new(point.x, point.y, point.z, 1.0)
    }

    /// Pixel coordinates of a world point; may fall outside the image.
    pub fn world_to_image(&self, point: &Point3<f64>) -> Result<Point2<f64>, GeometryError> {
        let h = self.project_homogeneous(point);
        if h.z <= DEPTH_EPSILON {
            return Err(GeometryError::PointBehindCamera {
                camera_id: self.camera_id,
                depth: h.z,
            });
        }
        Ok(Point2::new(h.x / h.z, h.y / h.z))
    }

    fn left_block(&self) -> Matrix3<f64> {
        self.projection.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Optical center in world coordinates, `-M⁻¹ p₄`.
    pub fn center(&self) -> Point3<f64> {
        let inv = self
            .left_block()
            .try_inverse()
            .expect("validated at construction");
        Point3::from(-(inv * self.projection.column(3)))
    }

    /// Unnormalized world-space direction of the ray through pixel `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let inv = self
            .left_block()
            .try_inverse()
            .expect("validated at construction");
        inv * Vector3::new(u, v, 1.0)
    }

    /// Inverse of the left 3×3 block, for callers casting many rays.
    pub fn inverse_left_block(&self) -> Matrix3<f64> {
        self.left_block()
            .try_inverse()
            .expect("validated at construction")
    }
}

pub fn load_calibrations(path: &Path) -> crate::Result<Vec<CameraCalibration>> {
    let text = fs::read_to_string(path)?;
    let mut cams: Vec<CameraCalibration> = serde_json::from_str(&text)?;
    cams.sort_by_key(|c| c.camera_id);
    Ok(cams)
}

pub fn save_calibrations(path: &Path, cams: &[CameraCalibration]) -> crate::Result<()> {
    fs::write(path, serde_json::to_string_pretty(cams)?)?;
    Ok(())
}

/// Regular grid of square cells covering the common ground area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRecord", into = "GridRecord")]
pub struct GroundGrid {
    origin: [f64; 2],
    cell_size: f64,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GridRecord {
    origin: [f64; 2],
    cell_size: f64,
    rows: usize,
    cols: usize,
}

impl TryFrom<GridRecord> for GroundGrid {
    type Error = GeometryError;

    fn try_from(r: GridRecord) -> Result<Self, Self::Error> {
        GroundGrid::new(r.origin, r.cell_size, r.rows, r.cols)
    }
}

impl From<GroundGrid> for GridRecord {
    fn from(g: GroundGrid) -> Self {
        Self {
            origin: g.origin,
            cell_size: g.cell_size,
            rows: g.rows,
            cols: g.cols,
        }
    }
}

impl GroundGrid {
    pub fn new(
        origin: [f64; 2],
        cell_size: f64,
        rows: usize,
        cols: usize,
    ) -> Result<Self, GeometryError> {
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(GeometryError::InvalidGrid(format!(
                "cell_size must be positive, got {cell_size}"
            )));
        }
        if rows == 0 || cols == 0 {
            return Err(GeometryError::InvalidGrid(format!(
                "grid must have at least one row and column, got {rows}x{cols}"
            )));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidGrid("origin must be finite".into()));
        }
        Ok(Self {
            origin,
            cell_size,
            rows,
            cols,
        })
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of cells G.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn row_col(&self, p: usize) -> Result<(usize, usize), GeometryError> {
        if p >= self.len() {
            return Err(GeometryError::IndexOutOfRange {
                index: p,
                cells: self.len(),
            });
        }
        Ok((p / self.cols, p % self.cols))
    }

    pub fn index(&self, row: usize, col: usize) -> Option<usize> {
        (row < self.rows && col < self.cols).then_some(row * self.cols + col)
    }

    pub fn cell_center(&self, p: usize) -> Result<Point3<f64>, GeometryError> {
        let (row, col) = self.row_col(p)?;
        Ok(Point3::new(
            self.origin[0] + (col as f64 + 0.5) * self.cell_size,
            self.origin[1] + (row as f64 + 0.5) * self.cell_size,
            0.0,
        ))
    }

    /// Cell containing the ground point `(x, y)`, if any.
    pub fn locate(&self, x: f64, y: f64) -> Option<usize> {
        let col = ((x - self.origin[0]) / self.cell_size).floor();
        let row = ((y - self.origin[1]) / self.cell_size).floor();
        if col < 0.0 || row < 0.0 {
            return None;
        }
        self.index(row as usize, col as usize)
    }

    /// Center of the whole grid on the ground plane.
    pub fn center(&self) -> Point3<f64> {
        Point3::new(
            self.origin[0] + 0.5 * self.cols as f64 * self.cell_size,
            self.origin[1] + 0.5 * self.rows as f64 * self.cell_size,
            0.0,
        )
    }

    pub fn corners(&self) -> [Point3<f64>; 4] {
        let (x0, y0) = (self.origin[0], self.origin[1]);
        let x1 = x0 + self.cols as f64 * self.cell_size;
        let y1 = y0 + self.rows as f64 * self.cell_size;
        [
            Point3::new(x0, y0, 0.0),
            Point3::new(x1, y0, 0.0),
            Point3::new(x1, y1, 0.0),
            Point3::new(x0, y1, 0.0),
        ]
    }

    /// Euclidean ground distance between two cell centers (meters).
    pub fn distance(&self, a: usize, b: usize) -> Result<f64, GeometryError> {
        let (pa, pb) = (self.cell_center(a)?, self.cell_center(b)?);
        Ok((pa - pb).norm())
    }

    /// Chebyshev distance between cells in grid units.
    pub fn chebyshev(&self, a: usize, b: usize) -> Result<usize, GeometryError> {
        let (ra, ca) = self.row_col(a)?;
        let (rb, cb) = self.row_col(b)?;
        Ok(ra.abs_diff(rb).max(ca.abs_diff(cb)))
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Vertical cylinder standing on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub base_center: Point3<f64>,
    pub radius: f64,
    pub height: f64,
}

impl Cylinder {
    pub fn new(base_center: Point3<f64>, radius: f64, height: f64) -> Result<Self, GeometryError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(GeometryError::InvalidCylinder(format!(
                "radius must be positive, got {radius}"
            )));
        }
        if !(height > 0.0 && height.is_finite()) {
            return Err(GeometryError::InvalidCylinder(format!(
                "height must be positive, got {height}"
            )));
        }
        Ok(Self {
            base_center: Point3::new(base_center.x, base_center.y, 0.0),
            radius,
            height,
        })
    }

    /// Default person proxy at a ground point.
    pub fn person_at(base: Point3<f64>) -> Self {
        Self {
            base_center: Point3::new(base.x, base.y, 0.0),
            radius: DEFAULT_PERSON_RADIUS_M,
            height: DEFAULT_PERSON_HEIGHT_M,
        }
    }

    /// Same shape moved to another ground point.
    pub fn moved_to(&self, base: Point3<f64>) -> Self {
        Self {
            base_center: Point3::new(base.x, base.y, 0.0),
            ..*self
        }
    }

    /// Base-circle samples followed by top-circle samples.
    pub fn sample_points(&self) -> [Point3<f64>; 2 * CYLINDER_SAMPLES] {
        let mut pts = [Point3::origin(); 2 * CYLINDER_SAMPLES];
        for k in 0..CYLINDER_SAMPLES {
            let a = std::f64::consts::TAU * k as f64 / CYLINDER_SAMPLES as f64;
            let (s, c) = a.sin_cos();
            let x = self.base_center.x + self.radius * c;
            let y = self.base_center.y + self.radius * s;
            pts[k] = Point3::new(x, y, 0.0);
            pts[k + CYLINDER_SAMPLES] = Point3::new(x, y, self.height);
        }
        pts
    }
}

/// Axis-aligned crop rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub visible: bool,
}

impl CropRect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            x0,
            y0,
            x1,
            y1,
            visible: true,
        }
    }

    pub fn invisible() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 0.0,
            y1: 0.0,
            visible: false,
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x0: self.x0 + dx,
            x1: self.x1 + dx,
            y0: self.y0 + dy,
            y1: self.y1 + dy,
            visible: self.visible,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    /// Intersection with `[0, w]×[0, h]`; keeps `visible` untouched.
    pub fn clipped(&self, width: f64, height: f64) -> Self {
        Self {
            x0: self.x0.clamp(0.0, width),
            x1: self.x1.clamp(0.0, width),
            y0: self.y0.clamp(0.0, height),
            y1: self.y1.clamp(0.0, height),
            visible: self.visible,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// Unclipped bounding box of the sampled cylinder, or `None` when any sample
/// lies behind the camera.
pub fn cylinder_bbox(calib: &CameraCalibration, cyl: &Cylinder) -> Option<CropRect> {
    let mut rect = CropRect::new(
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for p in cyl.sample_points() {
        let px = calib.world_to_image(&p).ok()?;
        rect.x0 = rect.x0.min(px.x);
        rect.y0 = rect.y0.min(px.y);
        rect.x1 = rect.x1.max(px.x);
        rect.y1 = rect.y1.max(px.y);
    }
    Some(rect)
}

/// Crop rectangle of a cylinder in one view, clipped to the image.
///
/// Invisible when any sampled point is behind the camera or the clipped box
/// covers less than [`MIN_VISIBLE_AREA_PX`].
pub fn project_cylinder(calib: &CameraCalibration, cyl: &Cylinder) -> CropRect {
    let Some(bbox) = cylinder_bbox(calib, cyl) else {
        return CropRect::invisible();
    };
    let clipped = bbox.clipped(f64::from(calib.width), f64::from(calib.height));
    if clipped.width() <= 0.0 || clipped.height() <= 0.0 || clipped.area() < MIN_VISIBLE_AREA_PX {
        return CropRect::invisible();
    }
    clipped
}

/// Crop rectangles for a person-sized cylinder at every cell of the grid.
pub fn project_grid(calib: &CameraCalibration, grid: &GroundGrid, template: &Cylinder) -> Vec<CropRect> {
    (0..grid.len())
        .map(|p| {
            let c = grid.cell_center(p).expect("index within grid");
            project_cylinder(calib, &template.moved_to(c))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    /// Expand the shorter side to a square about the rectangle center.
    Square,
    /// Resample the rectangle as-is.
    #[default]
    Warp,
}

/// How crops are resampled into fixed-size patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub out_h: usize,
    pub out_w: usize,
    pub mode: CropMode,
    /// Pixels removed from each side, expressed at the output width.
    pub trim_px: u32,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            out_h: 32,
            out_w: 32,
            mode: CropMode::Warp,
            trim_px: 0,
        }
    }
}

impl CropSpec {
    /// Full-scale GoogLeNet-style input with the 50-pixel side trim.
    pub fn full_scale() -> Self {
        Self {
            out_h: 224,
            out_w: 224,
            mode: CropMode::Warp,
            trim_px: 50,
        }
    }
}

/// Source rectangle actually sampled for `rect` under `spec`.
pub fn source_rect(rect: &CropRect, spec: &CropSpec) -> Result<CropRect, GeometryError> {
    if spec.out_h == 0 || spec.out_w == 0 {
        return Err(GeometryError::InvalidOutputSize {
            out_h: spec.out_h,
            out_w: spec.out_w,
        });
    }
    if 2 * spec.trim_px as usize >= spec.out_w {
        return Err(GeometryError::EmptyAfterTrim {
            trim_px: spec.trim_px,
            out_w: spec.out_w,
        });
    }
    let mut r = *rect;
    if spec.trim_px > 0 {
        let shrink = f64::from(spec.trim_px) * rect.width() / spec.out_w as f64;
        r.x0 += shrink;
        r.x1 -= shrink;
    }
    if spec.mode == CropMode::Square {
        let (cx, cy) = r.center();
        let half = 0.5 * r.width().max(r.height());
        r = CropRect {
            x0: cx - half,
            x1: cx + half,
            y0: cy - half,
            y1: cy + half,
            visible: r.visible,
        };
    }
    Ok(r)
}

/// Bilinear sample at continuous pixel coordinates; pixel `k` has its center
/// at `k + 0.5`. Taps outside the image contribute zero.
#[inline]
fn bilinear(image: &RgbImage, x: f64, y: f64, out: &mut [f32; 3]) {
    let xs = x - 0.5;
    let ys = y - 0.5;
    let xf = xs.floor();
    let yf = ys.floor();
    let (ax, ay) = (xs - xf, ys - yf);
    let (xi, yi) = (xf as i64, yf as i64);
    let (w, h) = (i64::from(image.width), i64::from(image.height));
    let mut acc = [0.0f64; 3];
    for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
        let yy = yi + dy;
        if wy == 0.0 || yy < 0 || yy >= h {
            continue;
        }
        for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
            let xx = xi + dx;
            if wx == 0.0 || xx < 0 || xx >= w {
                continue;
            }
            let i = ((yy * w + xx) * 3) as usize;
            let wt = wx * wy;
            for c in 0..3 {
                acc[c] += wt * f64::from(image.data[i + c]);
            }
        }
    }
    for c in 0..3 {
        out[c] = (acc[c] / 255.0) as f32;
    }
}

/// Resample the crop of `rect` into a `spec.out_h × spec.out_w × 3` patch.
///
/// Invisible rectangles give an all-zero patch.
pub fn crop_region(image: &RgbImage, rect: &CropRect, spec: &CropSpec) -> Result<Patch, GeometryError> {
    let src = source_rect(rect, spec)?;
    let mut patch = Patch::zeros(spec.out_h, spec.out_w);
    if !rect.visible {
        return Ok(patch);
    }
    let sx = src.width() / spec.out_w as f64;
    let sy = src.height() / spec.out_h as f64;
    let mut px = [0.0f32; 3];
    for i in 0..spec.out_h {
        let y = src.y0 + (i as f64 + 0.5) * sy;
        for j in 0..spec.out_w {
            let x = src.x0 + (j as f64 + 0.5) * sx;
            bilinear(image, x, y, &mut px);
            let o = (i * spec.out_w + j) * 3;
            patch.data[o..o + 3].copy_from_slice(&px);
        }
    }
    Ok(patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn canonical(width: u32, height: u32) -> CameraCalibration {
        CameraCalibration::new(0, Matrix3x4::identity(), width, height).unwrap()
    }

    #[test]
    fn canonical_camera_projects_optical_axis_to_origin() {
        let cam = canonical(10, 10);
        let p = cam.world_to_image(&Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((p.x, p.y), (0.0, 0.0));
        let p = cam.world_to_image(&Point3::new(2.0, 3.0, 2.0)).unwrap();
        assert_eq!((p.x, p.y), (1.0, 1.5));
    }

    #[test]
    fn behind_camera_is_an_error() {
        let cam = canonical(10, 10);
        let err = cam.world_to_image(&Point3::new(0.0, 0.0, -1.0)).unwrap_err();
        assert!(matches!(err, GeometryError::PointBehindCamera { .. }));
        assert!(cam.world_to_image(&Point3::new(1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn rejects_singular_or_empty_calibrations() {
        let mut p = Matrix3x4::identity();
        p[(2, 2)] = 0.0;
        assert!(CameraCalibration::new(0, p, 10, 10).is_err());
        assert!(CameraCalibration::new(0, Matrix3x4::identity(), 0, 10).is_err());
        let mut p = Matrix3x4::identity();
        p[(0, 3)] = f64::NAN;
        assert!(CameraCalibration::new(0, p, 10, 10).is_err());
    }

    #[test]
    fn center_of_canonical_camera_is_origin() {
        let cam = canonical(10, 10);
        assert!((cam.center() - Point3::origin()).norm() < 1e-12);
    }

    #[test]
    fn grid_centers() {
        let g = GroundGrid::new([0.0, 0.0], 1.0, 10, 10).unwrap();
        assert_eq!(g.cell_center(0).unwrap(), Point3::new(0.5, 0.5, 0.0));
        assert_eq!(g.cell_center(99).unwrap(), Point3::new(9.5, 9.5, 0.0));
        assert!(matches!(
            g.cell_center(100),
            Err(GeometryError::IndexOutOfRange { index: 100, cells: 100 })
        ));
    }

    #[test]
    fn dataset_scale_grids() {
        assert_eq!(GroundGrid::new([0.0, 0.0], 0.25, 45, 55).unwrap().len(), 2475);
        assert_eq!(GroundGrid::new([0.0, 0.0], 0.25, 140, 140).unwrap().len(), 19600);
        assert!(GroundGrid::new([0.0, 0.0], 0.0, 1, 1).is_err());
        assert!(GroundGrid::new([0.0, 0.0], 1.0, 0, 1).is_err());
    }

    #[test]
    fn degenerate_radius_is_invisible() {
        let cam = canonical(100, 100);
        let cyl = Cylinder {
            base_center: Point3::new(0.0, 0.0, 0.0),
            radius: 0.0,
            height: 1.75,
        };
        // Base on the camera plane: behind/at depth 0, also invisible.
        assert!(!project_cylinder(&cam, &cyl).visible);
        // A camera looking down the world z axis sees the axis as a point.
        let mut p = Matrix3x4::identity();
        p[(2, 3)] = 5.0;
        let cam = CameraCalibration::new(0, p, 100, 100).unwrap();
        let rect = project_cylinder(&cam, &cyl);
        assert!(!rect.visible);
    }

    #[test]
    fn cylinder_behind_camera_is_invisible() {
        let cam = canonical(100, 100);
        let cyl = Cylinder::new(Point3::new(0.0, 0.0, 0.0), 0.3, 1.0).unwrap();
        let moved = Cylinder {
            base_center: Point3::new(0.0, 0.0, -10.0),
            ..cyl
        };
        assert!(!project_cylinder(&cam, &moved).visible);
    }

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(x, y, [(x * 7 % 256) as u8, (y * 11 % 256) as u8, ((x + y) * 3 % 256) as u8]);
            }
        }
        img
    }

    #[test]
    fn invisible_rect_gives_zero_patch() {
        let img = gradient_image(8, 8);
        let spec = CropSpec {
            out_h: 5,
            out_w: 3,
            ..CropSpec::default()
        };
        let p = crop_region(&img, &CropRect::invisible(), &spec).unwrap();
        assert_eq!((p.height, p.width, p.data.len()), (5, 3, 45));
        assert!(p.is_zero());
    }

    #[test]
    fn full_image_warp_is_identity() {
        let img = gradient_image(12, 9);
        let spec = CropSpec {
            out_h: 9,
            out_w: 12,
            mode: CropMode::Warp,
            trim_px: 0,
        };
        let p = crop_region(&img, &CropRect::new(0.0, 0.0, 12.0, 9.0), &spec).unwrap();
        for y in 0..9 {
            for x in 0..12 {
                let px = img.pixel(x, y);
                for c in 0..3 {
                    let want = f32::from(px[c]) / 255.0;
                    assert!((p.get(y as usize, x as usize, c) - want).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn trim_that_eats_the_width_is_rejected() {
        let img = gradient_image(8, 8);
        let spec = CropSpec {
            out_h: 4,
            out_w: 4,
            mode: CropMode::Warp,
            trim_px: 2,
        };
        let err = crop_region(&img, &CropRect::new(0.0, 0.0, 8.0, 8.0), &spec).unwrap_err();
        assert!(matches!(err, GeometryError::EmptyAfterTrim { .. }));
    }

    #[test]
    fn trim_scales_with_crop_width() {
        let spec = CropSpec::full_scale();
        let r = source_rect(&CropRect::new(0.0, 0.0, 448.0, 448.0), &spec).unwrap();
        assert!((r.x0 - 100.0).abs() < 1e-12 && (r.x1 - 348.0).abs() < 1e-12);
    }

    #[test]
    fn square_mode_expands_short_side() {
        let spec = CropSpec {
            mode: CropMode::Square,
            ..CropSpec::default()
        };
        let r = source_rect(&CropRect::new(10.0, 0.0, 20.0, 40.0), &spec).unwrap();
        assert_eq!(r.as_array(), [-5.0, 0.0, 35.0, 40.0]);
    }

    #[test]
    fn integer_shift_shifts_samples() {
        let img = gradient_image(40, 40);
        let spec = CropSpec {
            out_h: 6,
            out_w: 6,
            ..CropSpec::default()
        };
        let base = CropRect::new(5.0, 5.0, 17.0, 17.0);
        let a = crop_region(&img, &base, &spec).unwrap();
        let b = crop_region(&img, &base.translated(2.0, 0.0), &spec).unwrap();
        // Two source pixels equal one output column at a 2:1 ratio.
        for y in 0..6 {
            for x in 0..5 {
                for c in 0..3 {
                    assert!((a.get(y, x + 1, c) - b.get(y, x, c)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn json_round_trip_uses_documented_layout() {
        let cam = canonical(640, 480);
        let text = serde_json::to_string(&vec![cam.clone()]).unwrap();
        assert!(text.contains("\"P\":[[1.0,0.0,0.0,0.0]"));
        let back: Vec<CameraCalibration> = serde_json::from_str(&text).unwrap();
        assert_eq!(back[0], cam);
        let grid: GroundGrid =
            serde_json::from_str(r#"{"origin":[1.0,2.0],"cell_size":0.5,"rows":3,"cols":4}"#).unwrap();
        assert_eq!(grid.len(), 12);
        assert!(serde_json::from_str::<GroundGrid>(
            r#"{"origin":[1.0,2.0],"cell_size":-0.5,"rows":3,"cols":4}"#
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn index_center_bijection(rows in 1usize..30, cols in 1usize..30,
                                  ox in -10.0f64..10.0, oy in -10.0f64..10.0,
                                  size in 0.05f64..3.0, pick in 0usize..900) {
            let g = GroundGrid::new([ox, oy], size, rows, cols).unwrap();
            let p = pick % g.len();
            let c = g.cell_center(p).unwrap();
            prop_assert_eq!(c.z, 0.0);
            prop_assert_eq!(g.locate(c.x, c.y), Some(p));
        }
    }
}
