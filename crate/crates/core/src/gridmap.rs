//! Raster floor maps: gray-scale occupancy grids, obstacle thresholding,
//! robot-radius inflation and exact Euclidean distance transforms.
//!
//! Pixel `(x, y)` is column `x`, row `y`, stored row-major. The world
//! position of a pixel center is `origin + resolution * (x, y)`; rows grow
//! along +y, there is no vertical flip.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RESOLUTION_M: f64 = 0.05;
pub const DEFAULT_OBSTACLE_THRESHOLD: u8 = 100;

/// Sidecar metadata stored next to a PGM as `<name>.meta.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapMeta {
    pub resolution_m: f64,
    pub origin_x_m: f64,
    pub origin_y_m: f64,
}

impl Default for MapMeta {
    fn default() -> Self {
        Self {
            resolution_m: DEFAULT_RESOLUTION_M,
            origin_x_m: 0.0,
            origin_y_m: 0.0,
        }
    }
}

impl MapMeta {
    pub fn sidecar_path(map_path: &Path) -> PathBuf {
        let stem = map_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        map_path.with_file_name(format!("{stem}.meta.json"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta: MapMeta = serde_json::from_str(&text)?;
        if !(meta.resolution_m > 0.0) {
            return Err(Error::Parse(format!(
                "{}: resolution_m must be positive",
                path.display()
            )));
        }
        Ok(meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Raster geometry shared by every grid type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: (f64, f64),
}

impl GridGeometry {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.width, idx / self.width)
    }

    /// World position (meters) of a pixel center.
    pub fn pixel_to_world(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.origin.0 + self.resolution * x,
            self.origin.1 + self.resolution * y,
        )
    }

    /// Continuous pixel coordinates of a world position.
    pub fn world_to_pixel_f(&self, wx: f64, wy: f64) -> (f64, f64) {
        (
            (wx - self.origin.0) / self.resolution,
            (wy - self.origin.1) / self.resolution,
        )
    }

    /// Pixel containing a world position, if inside the raster.
    pub fn world_to_pixel(&self, wx: f64, wy: f64) -> Option<(usize, usize)> {
        let (px, py) = self.world_to_pixel_f(wx, wy);
        let (px, py) = (px.round(), py.round());
        if px < 0.0 || py < 0.0 || px >= self.width as f64 || py >= self.height as f64 {
            return None;
        }
        Some((px as usize, py as usize))
    }

    pub fn meta(&self) -> MapMeta {
        MapMeta {
            resolution_m: self.resolution,
            origin_x_m: self.origin.0,
            origin_y_m: self.origin.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub geometry: GridGeometry,
    /// Gray values, row-major.
    pub cells: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(width: usize, height: usize, meta: MapMeta, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "cell count {} does not match {width}x{height}",
                cells.len()
            )));
        }
        if !(meta.resolution_m > 0.0) {
            return Err(Error::InvalidParameter("resolution must be positive".into()));
        }
        Ok(Self {
            geometry: GridGeometry {
                width,
                height,
                resolution: meta.resolution_m,
                origin: (meta.origin_x_m, meta.origin_y_m),
            },
            cells,
        })
    }

    pub fn width(&self) -> usize {
        self.geometry.width
    }

    pub fn height(&self) -> usize {
        self.geometry.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Free,
    Obstacle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryGrid {
    pub geometry: GridGeometry,
    pub cells: Vec<Cell>,
}

impl BinaryGrid {
    pub fn is_free(&self, x: usize, y: usize) -> bool {
        self.cells[self.geometry.index(x, y)] == Cell::Free
    }

    /// True when the world position falls on a Free pixel.
    pub fn is_free_world(&self, wx: f64, wy: f64) -> bool {
        self.geometry
            .world_to_pixel(wx, wy)
            .is_some_and(|(x, y)| self.is_free(x, y))
    }

    pub fn count(&self, cell: Cell) -> usize {
        self.cells.iter().filter(|&&c| c == cell).count()
    }

    /// Free pixels render white, obstacles black.
    pub fn to_occupancy(&self) -> OccupancyGrid {
        OccupancyGrid {
            geometry: self.geometry,
            cells: self
                .cells
                .iter()
                .map(|c| match c {
                    Cell::Free => 255,
                    Cell::Obstacle => 0,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceImage {
    pub geometry: GridGeometry,
    /// Distance to the nearest obstacle pixel, meters.
    pub cells: Vec<f64>,
    /// Same distance as an exact squared pixel count.
    pub sq_px: Vec<u64>,
}

impl DistanceImage {
    /// Linear scaling to gray for inspection; brighter is farther from walls.
    pub fn to_occupancy(&self) -> OccupancyGrid {
        let max = self.cells.iter().cloned().fold(0.0_f64, f64::max);
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        OccupancyGrid {
            geometry: self.geometry,
            cells: self
                .cells
                .iter()
                .map(|d| (d * scale).round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// PGM I/O
// ---------------------------------------------------------------------------

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse("unexpected end of PGM data".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad PGM number {:?}", String::from_utf8_lossy(tok))))
    }
}

/// Parse a P2 or P5 PGM with maxval 255.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut rd = HeaderReader { bytes, pos: 0 };
    let magic = rd.token()?;
    let binary = match magic {
        b"P5" => true,
        b"P2" => false,
        other => {
            return Err(Error::Parse(format!(
                "bad PGM magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let width = rd.number()?;
    let height = rd.number()?;
    let maxval = rd.number()?;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval}, expected 255")));
    }
    let n = width * height;
    let cells = if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = rd.pos + 1;
        let end = start + n;
        if end > bytes.len() {
            return Err(Error::Parse(format!(
                "P5 raster truncated: need {n} bytes, have {}",
                bytes.len().saturating_sub(start)
            )));
        }
        bytes[start..end].to_vec()
    } else {
        let mut cells = Vec::with_capacity(n);
        for _ in 0..n {
            let v = rd.number()?;
            if v > 255 {
                return Err(Error::Parse(format!("gray value {v} exceeds maxval")));
            }
            cells.push(v as u8);
        }
        cells
    };
    Ok((width, height, cells))
}

pub fn encode_pgm(width: usize, height: usize, cells: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(cells);
    out
}

/// Load a PGM map. Resolution and origin come from the `<name>.meta.json`
/// sidecar when present, defaults otherwise.
pub fn load_grid(path: &Path) -> Result<OccupancyGrid> {
    let sidecar = MapMeta::sidecar_path(path);
    let meta = if sidecar.exists() {
        MapMeta::load(&sidecar)?
    } else {
        MapMeta::default()
    };
    load_grid_with_meta(path, meta)
}

pub fn load_grid_with_meta(path: &Path, meta: MapMeta) -> Result<OccupancyGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, cells) = parse_pgm(&bytes)?;
    OccupancyGrid::new(w, h, meta, cells)
}

/// Write the grid as binary PGM plus its metadata sidecar.
pub fn save_grid(grid: &OccupancyGrid, path: &Path) -> Result<()> {
    let bytes = encode_pgm(grid.width(), grid.height(), &grid.cells);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    grid.geometry.meta().save(&MapMeta::sidecar_path(path))
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// A pixel is an obstacle iff its gray value is below `threshold`
/// (clamped to 255).
pub fn threshold_obstacles(grid: &OccupancyGrid, threshold: u16) -> BinaryGrid {
    let t = threshold.min(255) as u8;
    BinaryGrid {
        geometry: grid.geometry,
        cells: grid
            .cells
            .iter()
            .map(|&g| if g < t { Cell::Obstacle } else { Cell::Free })
            .collect(),
    }
}

/// Grow obstacles by `robot_radius` meters: a pixel becomes an obstacle iff
/// some source obstacle lies within that Euclidean distance.
pub fn inflate_obstacles(grid: &BinaryGrid, robot_radius: f64) -> BinaryGrid {
    assert!(robot_radius >= 0.0, "robot_radius must be non-negative");
    if robot_radius == 0.0 {
        return grid.clone();
    }
    let sq = match squared_edt(grid) {
        Some(sq) => sq,
        None => return grid.clone(),
    };
    let r_px = robot_radius / grid.geometry.resolution;
    let limit = r_px * r_px + 1e-9;
    BinaryGrid {
        geometry: grid.geometry,
        cells: sq
            .iter()
            .map(|&d| {
                if (d as f64) <= limit {
                    Cell::Obstacle
                } else {
                    Cell::Free
                }
            })
            .collect(),
    }
}

/// Exact Euclidean distance transform (meters to the nearest obstacle).
pub fn distance_transform(grid: &BinaryGrid) -> Result<DistanceImage> {
    let sq = squared_edt(grid).ok_or(Error::AllFree)?;
    let res = grid.geometry.resolution;
    Ok(DistanceImage {
        geometry: grid.geometry,
        cells: sq.iter().map(|&d| (d as f64).sqrt() * res).collect(),
        sq_px: sq,
    })
}

const EDT_INF: f64 = 1e20;

/// Squared pixel distances via the two-pass lower-envelope algorithm of
/// Felzenszwalb and Huttenlocher. `None` when there is no obstacle.
fn squared_edt(grid: &BinaryGrid) -> Option<Vec<u64>> {
    let GridGeometry { width, height, .. } = grid.geometry;
    if !grid.cells.contains(&Cell::Obstacle) {
        return None;
    }
    let mut buf: Vec<f64> = grid
        .cells
        .iter()
        .map(|c| if *c == Cell::Obstacle { 0.0 } else { EDT_INF })
        .collect();

    let n = width.max(height);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];

    for x in 0..width {
        for y in 0..height {
            f[y] = buf[y * width + x];
        }
        edt_1d(&f[..height], &mut d[..height], &mut v, &mut z);
        for y in 0..height {
            buf[y * width + x] = d[y];
        }
    }
    for y in 0..height {
        let row = &mut buf[y * width..(y + 1) * width];
        f[..width].copy_from_slice(row);
        edt_1d(&f[..width], &mut d[..width], &mut v, &mut z);
        row.copy_from_slice(&d[..width]);
    }
    Some(buf.into_iter().map(|x| x.round() as u64).collect())
}

#[inline]
fn parabola_cut(f: &[f64], q: usize, p: usize) -> f64 {
    let (qf, pf) = (q as f64, p as f64);
    ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
}

fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = parabola_cut(f, q, v[k]);
        // z[0] is -inf, so this never pops the last parabola
        while s <= z[k] {
            k -= 1;
            s = parabola_cut(f, q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        d[q] = (dq * dq + f[v[k]]).min(EDT_INF);
    }
}
