//! Deterministic synthetic multi-camera scenes: cameras on a circle around
//! the ground grid, persons as shaded cylinders walking between cells, exact
//! occupancy ground truth.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Point3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    cylinder_bbox, project_cylinder, save_calibrations, CameraCalibration, CropRect,
    Cylinder, GroundGrid, DEFAULT_PERSON_HEIGHT_M, DEFAULT_PERSON_RADIUS_M,
};
use crate::image::RgbImage;
pub use crate::multiview::{build_dataset, Dataset, DatasetOptions, MONO_POSITIVE_IOU};
use crate::multiview::{write_annotations, Annotation};
use crate::nms::iou;
use crate::{Error, Result};

/// Fraction of the image half-width reached by the farthest grid corner.
const GRID_HALF_SPAN: f64 = 0.46;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    pub person_id: u32,
    /// Occupied cell per frame; `None` while the person is off the grid.
    pub trajectory: Vec<Option<usize>>,
    pub color: [u8; 3],
    pub radius: f64,
    pub height: f64,
}

impl PersonSpec {
    pub fn cylinder_at(&self, grid: &GroundGrid, cell: usize) -> Cylinder {
        let c = grid.cell_center(cell).expect("trajectory cells are validated");
        Cylinder {
            base_center: c,
            radius: self.radius,
            height: self.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub texture_seed: u64,
    /// Standard deviation of per-pixel Gaussian noise, in 0–255 units.
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub grid: GroundGrid,
    pub cameras: Vec<CameraCalibration>,
    pub persons: Vec<PersonSpec>,
    pub n_frames: usize,
    pub background: Background,
    pub seed: u64,
}

/// Knobs for [`ScenarioSpec::generate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioParams {
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    pub n_cameras: usize,
    pub camera_height_m: f64,
    pub camera_radius_m: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub n_frames: usize,
    pub min_persons: usize,
    pub max_persons: usize,
    /// Minimum Chebyshev cell distance between any two persons.
    pub min_separation: usize,
    /// Per-frame probability that a person takes a step.
    pub move_prob: f64,
    /// Probability that a person leaves on reaching a waypoint; a new
    /// person with a fresh appearance takes the slot.
    pub turnover: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            rows: 12,
            cols: 12,
            cell_size: 0.5,
            n_cameras: 3,
            camera_height_m: 5.0,
            camera_radius_m: 7.0,
            image_width: 160,
            image_height: 160,
            n_frames: 250,
            min_persons: 2,
            max_persons: 4,
            min_separation: 3,
            move_prob: 0.7,
            turnover: 0.5,
            noise_sigma: 3.0,
            seed: 0,
        }
    }
}

impl ScenarioParams {
    /// Crowded variant: more persons, adjacent cells allowed, lower
    /// cameras, so persons frequently hide each other.
    pub fn occlusion_heavy(seed: u64) -> Self {
        Self {
            min_persons: 4,
            max_persons: 6,
            min_separation: 1,
            camera_height_m: 2.5,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Format(format!("invalid scenario: {m}")));
        if self.rows == 0 || self.cols == 0 || !(self.cell_size > 0.0) {
            return bad("grid must have positive size");
        }
        if self.n_cameras == 0 {
            return bad("at least one camera is required");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size must be positive");
        }
        if self.min_persons > self.max_persons {
            return bad("min_persons exceeds max_persons");
        }
        if !(0.0..=1.0).contains(&self.move_prob)
            || !(0.0..=1.0).contains(&self.turnover)
            || !(self.noise_sigma >= 0.0)
        {
            return bad("move_prob and turnover must lie in [0, 1], noise_sigma must be non-negative");
        }
        if !(self.camera_height_m > DEFAULT_PERSON_HEIGHT_M) || !(self.camera_radius_m > 0.0) {
            return bad("cameras must be above person height at a positive radius");
        }
        Ok(())
    }
}

/// Look-at pinhole cameras on a circle around the grid center, yaw
/// `k·360°/n`. The focal length is the largest one that keeps every grid
/// corner within 46% of the image half-extent from the principal point.
pub fn make_cameras(
    n: usize,
    grid: &GroundGrid,
    height_m: f64,
    radius_m: f64,
    width: u32,
    height: u32,
) -> Result<Vec<CameraCalibration>> {
    let target = grid.center();
    let mut cams = Vec::with_capacity(n);
    for k in 0..n {
        let yaw = std::f64::consts::TAU * k as f64 / n as f64;
        let pos = Point3::new(
            target.x + radius_m * yaw.cos(),
            target.y + radius_m * yaw.sin(),
            height_m,
        );
        let forward = (target - pos).normalize();
        let right = forward.cross(&Vector3::z()).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * pos.coords);
        let mut focal = f64::INFINITY;
        for c in grid.corners() {
            let q = r * c.coords + t;
            if q.z <= 0.0 {
                return Err(Error::Format("grid corner behind a generated camera".into()));
            }
            let (xn, yn) = ((q.x / q.z).abs(), (q.y / q.z).abs());
            if xn > 0.0 {
                focal = focal.min(GRID_HALF_SPAN * f64::from(width) / xn);
            }
            if yn > 0.0 {
                focal = focal.min(GRID_HALF_SPAN * f64::from(height) / yn);
            }
        }
        let (cx, cy) = (0.5 * f64::from(width), 0.5 * f64::from(height));
        let kmat = Matrix3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0);
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        rt.set_column(3, &t);
        cams.push(CameraCalibration::new(k as u32, kmat * rt, width, height)?);
    }
    Ok(cams)
}

fn random_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    let h: f64 = rng.gen_range(0.0..6.0);
    let s: f64 = rng.gen_range(0.55..0.95);
    let v: f64 = rng.gen_range(0.55..0.95);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

fn separated(grid: &GroundGrid, cell: usize, others: &[usize], min_sep: usize) -> bool {
    others
        .iter()
        .all(|&o| grid.chebyshev(cell, o).map_or(false, |d| d >= min_sep.max(1)))
}

fn random_free_cell(rng: &mut ChaCha8Rng, grid: &GroundGrid, others: &[usize], min_sep: usize) -> Option<usize> {
    (0..200)
        .map(|_| rng.gen_range(0..grid.len()))
        .find(|&c| separated(grid, c, others, min_sep))
}

impl ScenarioSpec {
    /// Random-waypoint walks: each active person heads for a random target
    /// cell one step at a time and never comes closer than `min_separation`
    /// to another person. The number of persons drifts within
    /// `[min_persons, max_persons]`; persons leave at waypoints with
    /// probability `turnover` and are replaced by new ones.
    pub fn generate(p: &ScenarioParams) -> Result<Self> {
        p.validate()?;
        let grid = GroundGrid::new([0.0, 0.0], p.cell_size, p.rows, p.cols)?;
        let cameras = make_cameras(
            p.n_cameras,
            &grid,
            p.camera_height_m,
            p.camera_radius_m,
            p.image_width,
            p.image_height,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut persons: Vec<PersonSpec> = Vec::new();
        // Per slot: index into `persons` of the current occupant.
        let mut slots: Vec<Option<usize>> = vec![None; p.max_persons];
        let mut cells: Vec<Option<usize>> = vec![None; p.max_persons];
        let mut targets: Vec<usize> = vec![0; p.max_persons];
        let mut active = if p.max_persons == 0 {
            0
        } else {
            rng.gen_range(p.min_persons..=p.max_persons)
        };
        for t in 0..p.n_frames {
            if p.max_persons > p.min_persons && rng.gen_bool(0.03) {
                active = if rng.gen_bool(0.5) {
                    (active + 1).min(p.max_persons)
                } else {
                    active.saturating_sub(1).max(p.min_persons)
                };
            }
            for i in active..p.max_persons {
                cells[i] = None;
                slots[i] = None;
            }
            for i in 0..active {
                let others: Vec<usize> = cells
                    .iter()
                    .enumerate()
                    .filter(|&(j, c)| j != i && c.is_some())
                    .map(|(_, c)| c.unwrap())
                    .collect();
                let Some(cur) = cells[i] else {
                    cells[i] = random_free_cell(&mut rng, &grid, &others, p.min_separation);
                    targets[i] = rng.gen_range(0..grid.len());
                    if cells[i].is_some() {
                        slots[i] = Some(persons.len());
                        persons.push(PersonSpec {
                            person_id: persons.len() as u32,
                            trajectory: vec![None; t],
                            color: random_color(&mut rng),
                            radius: DEFAULT_PERSON_RADIUS_M,
                            height: DEFAULT_PERSON_HEIGHT_M,
                        });
                    }
                    continue;
                };
                if cur == targets[i] {
                    if rng.gen_bool(p.turnover) {
                        cells[i] = None;
                        slots[i] = None;
                        continue;
                    }
                    targets[i] = rng.gen_range(0..grid.len());
                }
                if !rng.gen_bool(p.move_prob) {
                    continue;
                }
                let (r, c) = grid.row_col(cur)?;
                let (tr, tc) = grid.row_col(targets[i])?;
                let step = |a: usize, b: usize| (b as i64 - a as i64).signum();
                let mut options = vec![(step(r, tr), step(c, tc))];
                let mut others_dirs: Vec<(i64, i64)> = (-1..=1)
                    .flat_map(|dr| (-1..=1).map(move |dc| (dr, dc)))
                    .filter(|&d| d != (0, 0))
                    .collect();
                others_dirs.shuffle(&mut rng);
                options.extend(others_dirs);
                for (dr, dc) in options {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || (dr, dc) == (0, 0) {
                        continue;
                    }
                    let Some(n) = grid.index(nr as usize, nc as usize) else {
                        continue;
                    };
                    if separated(&grid, n, &others, p.min_separation) {
                        cells[i] = Some(n);
                        break;
                    }
                }
            }
            for person in &mut persons {
                person.trajectory.push(None);
            }
            for (slot, cell) in slots.iter().zip(&cells) {
                if let Some(k) = slot {
                    persons[*k].trajectory[t] = *cell;
                }
            }
        }
        Ok(Self {
            grid,
            cameras,
            persons,
            n_frames: p.n_frames,
            background: Background {
                texture_seed: p.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED,
                noise_sigma: p.noise_sigma,
            },
            seed: p.seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for person in &self.persons {
            if person.trajectory.len() != self.n_frames {
                return Err(Error::Format(format!(
                    "person {} has {} trajectory entries for {} frames",
                    person.person_id,
                    person.trajectory.len(),
                    self.n_frames
                )));
            }
            if let Some(c) = person.trajectory.iter().flatten().find(|&&c| c >= self.grid.len()) {
                return Err(Error::Format(format!("person {} leaves the grid at cell {c}", person.person_id)));
            }
            Cylinder::new(Point3::origin(), person.radius, person.height)?;
        }
        Ok(())
    }

    /// `(person_id, cell)` of every person present at frame `t`.
    pub fn occupants(&self, t: usize) -> Vec<(u32, usize)> {
        self.persons
            .iter()
            .filter_map(|p| p.trajectory.get(t).copied().flatten().map(|c| (p.person_id, c)))
            .collect()
    }

    /// Sorted occupied cells at frame `t`.
    pub fn ground_truth(&self, t: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = self.occupants(t).into_iter().map(|(_, c)| c).collect();
        set.into_iter().collect()
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        (0..self.n_frames)
            .flat_map(|t| {
                self.occupants(t).into_iter().map(move |(person, cell)| Annotation {
                    frame: t as u64,
                    cell,
                    person,
                })
            })
            .collect()
    }

    /// Image-space rectangle of every present person in camera `cam`.
    pub fn person_rects(&self, t: usize, cam: usize) -> Vec<(u32, CropRect)> {
        let calib = &self.cameras[cam];
        self.persons
            .iter()
            .filter_map(|p| {
                let cell = p.trajectory.get(t).copied().flatten()?;
                Some((p.person_id, project_cylinder(calib, &p.cylinder_at(&self.grid, cell))))
            })
            .collect()
    }

    fn view_seed(&self, t: usize, cam: usize) -> u64 {
        let mut h = self.seed ^ 0xA076_1D64_78BD_642F;
        for v in [t as u64, cam as u64] {
            h = (h ^ v).wrapping_mul(0xE703_7ED1_A0B4_28DB);
            h ^= h >> 29;
        }
        h
    }
}

fn shade(color: [u8; 3], factor: f64) -> [f64; 3] {
    color.map(|c| f64::from(c) * factor)
}

struct RayScene<'a> {
    spec: &'a ScenarioSpec,
    origin: Point3<f64>,
    phases: [f64; 4],
}

impl RayScene<'_> {
    fn background(&self, d: &Vector3<f64>, v: f64, height: f64) -> [f64; 3] {
        let o = self.origin;
        if d.z < 0.0 {
            let s = -o.z / d.z;
            let (x, y) = (o.x + s * d.x, o.y + s * d.y);
            if s * d.norm() < 60.0 {
                let g = &self.spec.grid;
                let [ox, oy] = g.origin();
                let (w, h) = (g.cols() as f64 * g.cell_size(), g.rows() as f64 * g.cell_size());
                let tint = 8.0 * ((x * 1.3 + self.phases[0]).sin() + (y * 0.9 + self.phases[1]).sin())
                    + 5.0 * ((x * 3.1 - y * 2.3 + self.phases[2]).sin());
                let inside = x >= ox && x <= ox + w && y >= oy && y <= oy + h;
                let tile = if inside { g.cell_size() } else { 1.5 };
                let checker = ((x / tile).floor() + (y / tile).floor()) as i64 & 1;
                let base = match (inside, checker) {
                    (true, 0) => [112.0, 118.0, 104.0],
                    (true, _) => [128.0, 131.0, 116.0],
                    (false, 0) => [96.0, 90.0, 84.0],
                    (false, _) => [104.0, 98.0, 90.0],
                };
                let grain = 4.0 * ((x * 17.0 + self.phases[3]).sin() * (y * 13.0).cos());
                return base.map(|b| b + tint + grain);
            }
        }
        let k = v / height;
        [175.0 - 25.0 * k, 184.0 - 20.0 * k, 196.0 - 10.0 * k]
    }
}

/// Nearest positive ray parameter at which `o + s·d` hits the cylinder,
/// with the surface normal there.
fn hit_cylinder(o: &Point3<f64>, d: &Vector3<f64>, cyl: &Cylinder) -> Option<(f64, Vector3<f64>, f64)> {
    let b = cyl.base_center;
    let (px, py) = (o.x - b.x, o.y - b.y);
    let a = d.x * d.x + d.y * d.y;
    let mut best: Option<(f64, Vector3<f64>, f64)> = None;
    if a > 0.0 {
        let bq = 2.0 * (px * d.x + py * d.y);
        let cq = px * px + py * py - cyl.radius * cyl.radius;
        let disc = bq * bq - 4.0 * a * cq;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for s in [(-bq - sq) / (2.0 * a), (-bq + sq) / (2.0 * a)] {
                let z = o.z + s * d.z;
                if s > 0.0 && (0.0..=cyl.height).contains(&z) {
                    let n = Vector3::new(px + s * d.x, py + s * d.y, 0.0) / cyl.radius;
                    best = Some((s, n, z));
                    break;
                }
            }
        }
    }
    if d.z != 0.0 {
        let s = (cyl.height - o.z) / d.z;
        let (x, y) = (px + s * d.x, py + s * d.y);
        if s > 0.0 && x * x + y * y <= cyl.radius * cyl.radius && best.map_or(true, |h| s < h.0) {
            best = Some((s, Vector3::z(), cyl.height));
        }
    }
    best
}

/// Renders camera `cam` at frame `t`. The second buffer holds, per pixel,
/// the id of the person drawn there.
pub fn render_view_with_ids(spec: &ScenarioSpec, t: usize, cam: usize) -> (RgbImage, Vec<Option<u32>>) {
    let calib = &spec.cameras[cam];
    let (w, h) = (calib.width(), calib.height());
    let inv = calib.inverse_left_block();
    let origin = calib.center();
    let mut prng = ChaCha8Rng::seed_from_u64(spec.background.texture_seed);
    let phases = [(); 4].map(|_| prng.gen_range(0.0..std::f64::consts::TAU));
    let scene = RayScene { spec, origin, phases };
    let mut color = vec![[0.0f64; 3]; (w * h) as usize];
    let mut ids = vec![None; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let d = inv * Vector3::new(f64::from(x) + 0.5, f64::from(y) + 0.5, 1.0);
            color[(y * w + x) as usize] = scene.background(&d, f64::from(y), f64::from(h));
        }
    }
    // Painter's order: farthest person first.
    let mut people: Vec<(f64, u32, [u8; 3], Cylinder)> = spec
        .persons
        .iter()
        .filter_map(|p| {
            let cell = p.trajectory.get(t).copied().flatten()?;
            let cyl = p.cylinder_at(&spec.grid, cell);
            let dist = (cyl.base_center - origin).xy().norm();
            Some((dist, p.person_id, p.color, cyl))
        })
        .collect();
    people.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let light = Vector3::new(0.4, -0.3, 0.85).normalize();
    for (_, id, shirt, cyl) in &people {
        let Some(bbox) = cylinder_bbox(calib, cyl) else {
            continue;
        };
        let x0 = (bbox.x0.floor() as i64 - 1).max(0) as u32;
        let y0 = (bbox.y0.floor() as i64 - 1).max(0) as u32;
        let x1 = ((bbox.x1.ceil() as i64 + 1).min(i64::from(w))).max(0) as u32;
        let y1 = ((bbox.y1.ceil() as i64 + 1).min(i64::from(h))).max(0) as u32;
        let pants = shirt.map(|c| (f64::from(c) * 0.3 + 30.0) as u8);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = inv * Vector3::new(f64::from(x) + 0.5, f64::from(y) + 0.5, 1.0);
                let Some((_, n, z)) = hit_cylinder(&origin, &d, cyl) else {
                    continue;
                };
                let lit = 0.55 + 0.45 * n.dot(&light).max(0.0);
                let rel = z / cyl.height;
                let c = if rel > 0.86 {
                    shade([205, 165, 135], lit)
                } else if rel > 0.5 {
                    shade(*shirt, lit)
                } else {
                    shade(pants, lit)
                };
                let i = (y * w + x) as usize;
                color[i] = c;
                ids[i] = Some(*id);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.view_seed(t, cam));
    let sigma = spec.background.noise_sigma;
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for px in &color {
        for &c in px {
            let n = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push((c + n).round().clamp(0.0, 255.0) as u8);
        }
    }
    (RgbImage::from_raw(w, h, data).expect("buffer sized from image"), ids)
}

pub fn render_view(spec: &ScenarioSpec, t: usize, cam: usize) -> RgbImage {
    render_view_with_ids(spec, t, cam).0
}

/// All camera images of frame `t` and the occupied cells.
pub fn render_frame(spec: &ScenarioSpec, t: usize) -> (Vec<RgbImage>, Vec<usize>) {
    let images = (0..spec.cameras.len())
        .into_par_iter()
        .map(|c| render_view(spec, t, c))
        .collect();
    (images, spec.ground_truth(t))
}

/// Rendered images of every frame, indexed `[frame][camera]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStore {
    pub frames: Vec<Vec<RgbImage>>,
}

impl FrameStore {
    pub fn render(spec: &ScenarioSpec) -> Self {
        let frames = (0..spec.n_frames)
            .into_par_iter()
            .map(|t| (0..spec.cameras.len()).map(|c| render_view(spec, t, c)).collect())
            .collect();
        Self { frames }
    }

    /// Reads `cam{c}/frame{t:05}.png` for every frame and camera.
    pub fn load(dir: &Path, n_frames: usize, n_cameras: usize) -> Result<Self> {
        let frames = (0..n_frames)
            .map(|t| {
                (0..n_cameras)
                    .map(|c| RgbImage::load_png(&image_path(dir, c, t)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { frames })
    }

    /// Images of one frame, one per camera.
    pub fn load_frame(dir: &Path, t: usize, n_cameras: usize) -> Result<Vec<RgbImage>> {
        (0..n_cameras)
            .map(|c| RgbImage::load_png(&image_path(dir, c, t)))
            .collect()
    }

    /// Number of consecutive frames `0, 1, …` present for camera 0.
    pub fn count_frames(dir: &Path) -> usize {
        (0..).take_while(|&t| image_path(dir, 0, t).is_file()).count()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn image_path(dir: &Path, cam: usize, t: usize) -> std::path::PathBuf {
    dir.join(format!("cam{cam}")).join(format!("frame{t:05}.png"))
}

/// Training samples of a generated scenario; see [`build_dataset`].
pub fn generate_dataset(spec: &ScenarioSpec, store: &FrameStore, opts: &DatasetOptions) -> Result<Dataset> {
    build_dataset(&spec.grid, &spec.cameras, &spec.annotations(), store, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub frames: usize,
    pub cameras: usize,
    pub images: usize,
    pub annotations: usize,
    pub grid_cells: usize,
}

/// Writes images, `calibrations.json`, `grid.json`, `annotations.jsonl` and
/// `scenario.json` under `out_dir`.
pub fn write_dataset(spec: &ScenarioSpec, out_dir: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    for c in 0..spec.cameras.len() {
        fs::create_dir_all(out_dir.join(format!("cam{c}")))?;
    }
    (0..spec.n_frames)
        .into_par_iter()
        .try_for_each(|t| -> Result<()> {
            for c in 0..spec.cameras.len() {
                render_view(spec, t, c).save_png(&image_path(out_dir, c, t))?;
            }
            Ok(())
        })?;
    save_calibrations(&out_dir.join("calibrations.json"), &spec.cameras)?;
    spec.grid.save(&out_dir.join("grid.json"))?;
    let ann = spec.annotations();
    write_annotations(&out_dir.join("annotations.jsonl"), &ann)?;
    fs::write(out_dir.join("scenario.json"), serde_json::to_string(spec)?)?;
    Ok(SynthSummary {
        frames: spec.n_frames,
        cameras: spec.cameras.len(),
        images: spec.n_frames * spec.cameras.len(),
        annotations: ann.len(),
        grid_cells: spec.grid.len(),
    })
}

/// Accepts either a full scenario or generator parameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ScenarioFile {
    Spec(Box<ScenarioSpec>),
    Params(ScenarioParams),
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<ScenarioSpec> {
        let text = fs::read_to_string(path)?;
        match serde_json::from_str::<ScenarioFile>(&text)? {
            ScenarioFile::Spec(s) => {
                s.validate()?;
                Ok(*s)
            }
            ScenarioFile::Params(p) => ScenarioSpec::generate(&p),
        }
    }
}

/// Share of frame/camera pairs in which two person silhouettes overlap
/// (one person hides part of another).
pub fn occlusion_rate(spec: &ScenarioSpec, frames: usize) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for t in 0..frames.min(spec.n_frames) {
        for c in 0..spec.cameras.len() {
            let rects = spec.person_rects(t, c);
            total += 1;
            if rects
                .iter()
                .enumerate()
                .any(|(i, a)| rects[i + 1..].iter().any(|b| a.1.visible && b.1.visible && iou(&a.1, &b.1) > 0.0))
            {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
