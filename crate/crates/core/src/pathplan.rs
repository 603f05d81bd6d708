//! Survey path planning: principal axes of each region, the covering
//! rectangle in the axis-aligned frame, grid discretization and
//! boustrophedon ordering of the grid centers.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridmap::{BinaryGrid, GridGeometry};
use crate::segmentation::{Region, SegmentedMap};

pub const DEFAULT_CELL_SIZE_M: f64 = 0.8;

/// Orthonormal region frame. `a1` is the principal axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrincipalAxes {
    pub a1: (f64, f64),
    pub a2: (f64, f64),
    /// Covariance eigenvalues in px², larger first.
    pub eigvals: (f64, f64),
}

impl PrincipalAxes {
    pub const IDENTITY: PrincipalAxes = PrincipalAxes {
        a1: (1.0, 0.0),
        a2: (0.0, 1.0),
        eigvals: (0.0, 0.0),
    };

    /// Frame with the sweep and step axes exchanged.
    pub fn swapped(&self) -> PrincipalAxes {
        PrincipalAxes {
            a1: self.a2,
            a2: (-self.a1.0, -self.a1.1),
            eigvals: (self.eigvals.1, self.eigvals.0),
        }
    }

    #[inline]
    pub fn to_frame(&self, p: (f64, f64)) -> (f64, f64) {
        (
            self.a1.0 * p.0 + self.a1.1 * p.1,
            self.a2.0 * p.0 + self.a2.1 * p.1,
        )
    }

    #[inline]
    pub fn from_frame(&self, uv: (f64, f64)) -> (f64, f64) {
        (
            uv.0 * self.a1.0 + uv.1 * self.a2.0,
            uv.0 * self.a1.1 + uv.1 * self.a2.1,
        )
    }
}

/// Eigen-decomposition of the 2×2 population covariance of the region's
/// pixel coordinates. Sign convention: `a1.x > 0`, or `a1 = (0, 1)`;
/// `a2` is `a1` rotated by +90°. Equal eigenvalues give `a1 = (1, 0)`.
pub fn principal_axes(region: &Region) -> Result<PrincipalAxes> {
    let n = region.pixels.len();
    if n < 2 {
        return Err(Error::DegenerateRegion(region.id));
    }
    let nf = n as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for &(x, y) in &region.pixels {
        mx += x as f64;
        my += y as f64;
    }
    mx /= nf;
    my /= nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &region.pixels {
        let (dx, dy) = (x as f64 - mx, y as f64 - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    Ok(axes_from_covariance(sxx / nf, sxy / nf, syy / nf))
}

pub(crate) fn axes_from_covariance(sxx: f64, sxy: f64, syy: f64) -> PrincipalAxes {
    let half_tr = 0.5 * (sxx + syy);
    let half_diff = 0.5 * (sxx - syy);
    let disc = (half_diff * half_diff + sxy * sxy).sqrt();
    let l1 = half_tr + disc;
    let l2 = (half_tr - disc).max(0.0);
    let scale = sxx.abs() + syy.abs() + sxy.abs();
    if disc <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return PrincipalAxes {
            eigvals: (l1, l2),
            ..PrincipalAxes::IDENTITY
        };
    }
    // (l1 - syy, sxy) and (sxy, l1 - sxx) are both eigenvectors; take the
    // better conditioned one.
    let (ex, ey) = if sxx >= syy {
        (l1 - syy, sxy)
    } else {
        (sxy, l1 - sxx)
    };
    let norm = (ex * ex + ey * ey).sqrt();
    let (mut ax, mut ay) = (ex / norm, ey / norm);
    if ax < 0.0 || (ax == 0.0 && ay < 0.0) {
        ax = -ax;
        ay = -ay;
    }
    if ax == 0.0 {
        ax = 0.0; // normalize -0.0
    }
    PrincipalAxes {
        a1: (ax, ay),
        a2: (-ay, ax),
        eigvals: (l1, l2),
    }
}

/// Covering rectangle of a region in its principal frame, in pixel units.
/// Extents include half a pixel on each side of the extreme pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectInFPrime {
    pub axes: PrincipalAxes,
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl RectInFPrime {
    pub fn width_px(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height_px(&self) -> f64 {
        self.v_max - self.v_min
    }
}

pub fn bounding_rectangle(region: &Region, axes: &PrincipalAxes) -> RectInFPrime {
    let mut r = RectInFPrime {
        axes: *axes,
        u_min: f64::INFINITY,
        u_max: f64::NEG_INFINITY,
        v_min: f64::INFINITY,
        v_max: f64::NEG_INFINITY,
    };
    for &(x, y) in &region.pixels {
        let (u, v) = axes.to_frame((x as f64, y as f64));
        r.u_min = r.u_min.min(u);
        r.u_max = r.u_max.max(u);
        r.v_min = r.v_min.min(v);
        r.v_max = r.v_max.max(v);
    }
    r.u_min -= 0.5;
    r.u_max += 0.5;
    r.v_min -= 0.5;
    r.v_max += 0.5;
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    /// Direction of travel along the sweep row, radians.
    pub heading: f64,
    /// Row index in the region grid; legs never span rows.
    pub row: usize,
    pub col: usize,
}

impl Waypoint {
    pub fn pos(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

/// Bitmap of a region's pixels over its bounding box.
struct RegionMask {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    bits: Vec<bool>,
}

impl RegionMask {
    fn new(region: &Region) -> Self {
        let x0 = region.pixels.iter().map(|p| p.0).min().unwrap_or(0);
        let y0 = region.pixels.iter().map(|p| p.1).min().unwrap_or(0);
        let x1 = region.pixels.iter().map(|p| p.0).max().unwrap_or(0);
        let y1 = region.pixels.iter().map(|p| p.1).max().unwrap_or(0);
        let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
        let mut bits = vec![false; w * h];
        for &(x, y) in &region.pixels {
            bits[(y - y0) * w + (x - x0)] = true;
        }
        Self { x0, y0, w, h, bits }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        let (x, y) = (px.round(), py.round());
        if x < self.x0 as f64 || y < self.y0 as f64 {
            return false;
        }
        let (x, y) = (x as usize - self.x0, y as usize - self.y0);
        x < self.w && y < self.h && self.bits[y * self.w + x]
    }
}

/// Tile the rectangle with `cell_size` cells centered on the rectangle,
/// keep the centers whose pixel belongs to the region, and order rows
/// alternately along `+a1` and `-a1`.
pub fn grid_waypoints(
    rect: &RectInFPrime,
    region: &Region,
    geometry: &GridGeometry,
    cell_size: f64,
) -> Vec<Waypoint> {
    assert!(cell_size > 0.0, "cell_size must be positive");
    let mask = RegionMask::new(region);
    let cell_px = cell_size / geometry.resolution;
    let count = |extent: f64| ((extent / cell_px - 1e-9).ceil() as usize).max(1);
    let (nu, nv) = (count(rect.width_px()), count(rect.height_px()));
    let u0 = rect.u_min + 0.5 * (rect.width_px() - nu as f64 * cell_px);
    let v0 = rect.v_min + 0.5 * (rect.height_px() - nv as f64 * cell_px);
    let axes = &rect.axes;
    let fwd = axes.a1.1.atan2(axes.a1.0);
    let back = (-axes.a1.1).atan2(-axes.a1.0);

    let mut out = Vec::new();
    for row in 0..nv {
        let v = v0 + (row as f64 + 0.5) * cell_px;
        let forward = row % 2 == 0;
        for k in 0..nu {
            let col = if forward { k } else { nu - 1 - k };
            let u = u0 + (col as f64 + 0.5) * cell_px;
            let (px, py) = axes.from_frame((u, v));
            if !mask.contains(px, py) {
                continue;
            }
            let (x, y) = geometry.pixel_to_world(px, py);
            out.push(Waypoint {
                x,
                y,
                heading: if forward { fwd } else { back },
                row,
                col,
            });
        }
    }
    out
}

/// Number of heading reversals along a waypoint sequence.
pub fn count_turns(waypoints: &[Waypoint]) -> usize {
    waypoints.windows(2).filter(|w| w[0].row != w[1].row).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPlan {
    pub region_id: usize,
    pub axes: PrincipalAxes,
    pub waypoints: Vec<Waypoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyPlan {
    pub cell_size: f64,
    /// Sub-plans in visiting order.
    pub regions: Vec<RegionPlan>,
}

impl SurveyPlan {
    pub fn waypoint_count(&self) -> usize {
        self.regions.iter().map(|r| r.waypoints.len()).sum()
    }

    /// `(region_id, waypoint)` in visiting order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Waypoint)> {
        self.regions
            .iter()
            .flat_map(|r| r.waypoints.iter().map(move |w| (r.region_id, w)))
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (seq, (region_id, w)) in self.iter().enumerate() {
            let rec = PlanRecord {
                region_id,
                seq,
                x_m: w.x,
                y_m: w.y,
                heading_rad: w.heading,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io("<plan>", e))?;
        }
        Ok(())
    }

    /// Read a plan written by [`SurveyPlan::write_jsonl`]. Row and column
    /// indices are reconstructed from heading changes; axes are not stored.
    pub fn read_jsonl<R: BufRead>(input: R, cell_size: f64) -> Result<Self> {
        let mut regions: Vec<RegionPlan> = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|e| Error::io("<plan>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PlanRecord = serde_json::from_str(&line)?;
            let start_new = regions.last().is_none_or(|r| r.region_id != rec.region_id);
            if start_new {
                regions.push(RegionPlan {
                    region_id: rec.region_id,
                    axes: PrincipalAxes::IDENTITY,
                    waypoints: Vec::new(),
                });
            }
            let plan = regions.last_mut().unwrap();
            let row = match plan.waypoints.last() {
                None => 0,
                Some(prev) if (prev.heading - rec.heading_rad).abs() > 1e-9 => prev.row + 1,
                Some(prev) => prev.row,
            };
            let col = plan.waypoints.iter().filter(|w| w.row == row).count();
            plan.waypoints.push(Waypoint {
                x: rec.x_m,
                y: rec.y_m,
                heading: rec.heading_rad,
                row,
                col,
            });
        }
        if regions.is_empty() {
            return Err(Error::EmptyPlan);
        }
        Ok(SurveyPlan { cell_size, regions })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlanRecord {
    region_id: usize,
    seq: usize,
    x_m: f64,
    y_m: f64,
    heading_rad: f64,
}

/// One boustrophedon sub-plan per region, regions visited greedily by the
/// nearest entry waypoint starting from the map origin.
pub fn plan_survey(seg: &SegmentedMap, inflated: &BinaryGrid, cell_size: f64) -> Result<SurveyPlan> {
    if seg.regions.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let mut subplans = Vec::new();
    for region in &seg.regions {
        let axes = principal_axes(region).unwrap_or(PrincipalAxes::IDENTITY);
        let rect = bounding_rectangle(region, &axes);
        let waypoints: Vec<Waypoint> = grid_waypoints(&rect, region, &seg.geometry, cell_size)
            .into_iter()
            .filter(|w| inflated.is_free_world(w.x, w.y))
            .collect();
        if waypoints.is_empty() {
            continue;
        }
        subplans.push(RegionPlan {
            region_id: region.id,
            axes,
            waypoints,
        });
    }
    if subplans.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let start = seg.geometry.pixel_to_world(0.0, 0.0);
    Ok(SurveyPlan {
        cell_size,
        regions: order_regions(subplans, start),
    })
}

/// Greedy nearest-entry ordering; ties go to the lower region id.
pub fn order_regions(mut pending: Vec<RegionPlan>, start: (f64, f64)) -> Vec<RegionPlan> {
    pending.sort_by_key(|p| p.region_id);
    let mut ordered = Vec::with_capacity(pending.len());
    let mut here = start;
    while !pending.is_empty() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in pending.iter().enumerate() {
            let e = p.waypoints[0].pos();
            let d = (e.0 - here.0).powi(2) + (e.1 - here.1).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        let next = pending.remove(best);
        here = next.waypoints.last().unwrap().pos();
        ordered.push(next);
    }
    ordered
}

/// Inflated map with the survey path drawn over it, for inspection.
pub fn plan_overlay(inflated: &BinaryGrid, plan: &SurveyPlan) -> Vec<u8> {
    let geo = inflated.geometry;
    let mut img = inflated.to_occupancy().cells;
    let draw_line = |a: (f64, f64), b: (f64, f64), gray: u8, img: &mut Vec<u8>| {
        let (ax, ay) = geo.world_to_pixel_f(a.0, a.1);
        let (bx, by) = geo.world_to_pixel_f(b.0, b.1);
        let steps = ((bx - ax).abs().max((by - ay).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let (x, y) = ((ax + t * (bx - ax)).round(), (ay + t * (by - ay)).round());
            if x >= 0.0 && y >= 0.0 && (x as usize) < geo.width && (y as usize) < geo.height {
                let idx = geo.index(x as usize, y as usize);
                if img[idx] > gray {
                    img[idx] = gray;
                }
            }
        }
    };
    let points: Vec<(f64, f64)> = plan.iter().map(|(_, w)| w.pos()).collect();
    for pair in points.windows(2) {
        draw_line(pair[0], pair[1], 180, &mut img);
    }
    for &p in &points {
        draw_line(p, p, 64, &mut img);
    }
    img
}
