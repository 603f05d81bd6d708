//! Decomposition of the free space into regular regions.
//!
//! The pipeline follows the MAORIS recipe: a free-space image where each
//! pixel holds the radius of the largest wall-touching disk covering it,
//! connected grouping of equal values, absorption of ripple regions into
//! the neighbor they mostly border, and merging of adjacent regions whose
//! values are close.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::gridmap::{DistanceImage, GridGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentParams {
    /// Free-space values are floored to multiples of this, meters.
    pub quantization: f64,
    /// Shared-boundary fraction above which a region is absorbed.
    pub overlap_threshold: f64,
    /// Adjacent regions whose values differ by at most this merge, meters.
    pub value_tolerance: f64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            quantization: 0.3,
            overlap_threshold: 0.4,
            value_tolerance: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreeSpaceImage {
    pub geometry: GridGeometry,
    /// Region-size value in meters, 0 on obstacles.
    pub cells: Vec<f64>,
    pub free: Vec<bool>,
    /// Unquantized value, meters.
    pub raw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: usize,
    /// `(x, y)` pixel coordinates in raster order.
    pub pixels: Vec<(usize, usize)>,
    pub value: f64,
    pub area_px: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedMap {
    pub geometry: GridGeometry,
    pub regions: Vec<Region>,
    /// Region id per pixel, `None` on obstacles.
    pub labels: Vec<Option<usize>>,
}

impl SegmentedMap {
    pub fn label_at(&self, x: usize, y: usize) -> Option<usize> {
        self.labels[self.geometry.index(x, y)]
    }

    /// Region containing a world position.
    pub fn region_at_world(&self, wx: f64, wy: f64) -> Option<usize> {
        let (x, y) = self.geometry.world_to_pixel(wx, wy)?;
        self.label_at(x, y)
    }

    /// Build a map directly from a label raster; region values default to 0.
    pub fn from_labels(geometry: GridGeometry, labels: Vec<Option<usize>>) -> Self {
        let values = BTreeMap::new();
        build_from_labels(geometry, &labels, &values)
    }

    /// Gray-coded label raster: 0 on obstacles, `id % 255 + 1` elsewhere.
    pub fn label_gray(&self) -> Vec<u8> {
        self.labels
            .iter()
            .map(|l| match l {
                None => 0,
                Some(id) => (id % 255 + 1) as u8,
            })
            .collect()
    }
}

/// Stamp a disk of radius `r(p)` around every free pixel and keep the
/// per-pixel maximum, then floor to multiples of `quantization`.
pub fn free_space_image(dist: &DistanceImage, quantization: f64) -> FreeSpaceImage {
    assert!(quantization > 0.0, "quantization must be positive");
    let geo = dist.geometry;
    let (w, h) = (geo.width as i64, geo.height as i64);
    let sq = &dist.sq_px;
    let free: Vec<bool> = sq.iter().map(|&d| d > 0).collect();
    let mut best = vec![0u64; sq.len()];

    const NEIGHBORS: [(i64, i64); 8] = [
        (-1, -1),
        (0, -1),
        (1, -1),
        (-1, 0),
        (1, 0),
        (-1, 1),
        (0, 1),
        (1, 1),
    ];

    for y in 0..h {
        for x in 0..w {
            let idx = (y * w + x) as usize;
            let r_sq = sq[idx];
            if r_sq == 0 {
                continue;
            }
            // A disk contained in a neighbor's disk adds nothing.
            let r = (r_sq as f64).sqrt();
            let dominated = NEIGHBORS.iter().any(|&(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    return false;
                }
                let step = if dx != 0 && dy != 0 {
                    std::f64::consts::SQRT_2
                } else {
                    1.0
                };
                r + step <= (sq[(ny * w + nx) as usize] as f64).sqrt()
            });
            if dominated {
                continue;
            }
            let reach = isqrt(r_sq) as i64;
            for oy in -reach..=reach {
                let qy = y + oy;
                if qy < 0 || qy >= h {
                    continue;
                }
                let span = isqrt(r_sq - (oy * oy) as u64) as i64;
                let x0 = (x - span).max(0);
                let x1 = (x + span).min(w - 1);
                let row = (qy * w) as usize;
                for qx in x0..=x1 {
                    let q = row + qx as usize;
                    if free[q] && best[q] < r_sq {
                        best[q] = r_sq;
                    }
                }
            }
        }
    }

    let raw: Vec<f64> = best
        .iter()
        .map(|&b| (b as f64).sqrt() * geo.resolution)
        .collect();
    let cells = raw
        .iter()
        .map(|&v| (v / quantization + 1e-9).floor() * quantization)
        .collect();
    FreeSpaceImage {
        geometry: geo,
        cells,
        free,
        raw,
    }
}

fn isqrt(n: u64) -> u64 {
    let mut r = (n as f64).sqrt() as u64;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// 4-connected components of equal free-space value.
pub fn group_regions(fsi: &FreeSpaceImage) -> SegmentedMap {
    let geo = fsi.geometry;
    let mut labels: Vec<Option<usize>> = vec![None; geo.len()];
    let mut values = BTreeMap::new();
    let mut next = 0usize;
    let mut queue = VecDeque::new();
    for start in 0..geo.len() {
        if !fsi.free[start] || labels[start].is_some() {
            continue;
        }
        let value = fsi.cells[start];
        labels[start] = Some(next);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for q in neighbors4(geo, p) {
                if fsi.free[q] && labels[q].is_none() && fsi.cells[q] == value {
                    labels[q] = Some(next);
                    queue.push_back(q);
                }
            }
        }
        values.insert(next, value);
        next += 1;
    }
    build_from_labels(geo, &labels, &values)
}

fn neighbors4(geo: GridGeometry, p: usize) -> impl Iterator<Item = usize> {
    let (x, y) = geo.coords(p);
    let w = geo.width;
    let h = geo.height;
    let mut out = [usize::MAX; 4];
    if x > 0 {
        out[0] = p - 1;
    }
    if x + 1 < w {
        out[1] = p + 1;
    }
    if y > 0 {
        out[2] = p - w;
    }
    if y + 1 < h {
        out[3] = p + w;
    }
    out.into_iter().filter(|&q| q != usize::MAX)
}

/// Renumber regions by their first pixel in raster order.
fn build_from_labels(
    geometry: GridGeometry,
    labels: &[Option<usize>],
    values: &BTreeMap<usize, f64>,
) -> SegmentedMap {
    let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
    let mut regions: Vec<Region> = Vec::new();
    let mut out = vec![None; labels.len()];
    for (idx, l) in labels.iter().enumerate() {
        let Some(old) = *l else { continue };
        let id = *remap.entry(old).or_insert_with(|| {
            regions.push(Region {
                id: regions.len(),
                pixels: Vec::new(),
                value: values.get(&old).copied().unwrap_or(0.0),
                area_px: 0,
            });
            regions.len() - 1
        });
        regions[id].pixels.push(geometry.coords(idx));
        regions[id].area_px += 1;
        out[idx] = Some(id);
    }
    SegmentedMap {
        geometry,
        regions,
        labels: out,
    }
}

/// Boundary bookkeeping used by both merge passes.
struct RegionGraph {
    area: BTreeMap<usize, usize>,
    perimeter: BTreeMap<usize, usize>,
    value: BTreeMap<usize, f64>,
    /// Shared edge counts, stored for both orientations.
    shared: BTreeMap<usize, BTreeMap<usize, usize>>,
    /// Forwarding links from absorbed regions to their absorber.
    owner: Vec<usize>,
}

impl RegionGraph {
    fn new(seg: &SegmentedMap) -> Self {
        let geo = seg.geometry;
        let n = seg.regions.len();
        let mut perimeter = BTreeMap::new();
        let mut shared: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
        for r in &seg.regions {
            perimeter.insert(r.id, 0usize);
            shared.insert(r.id, BTreeMap::new());
        }
        for (p, l) in seg.labels.iter().enumerate() {
            let Some(a) = *l else { continue };
            // edges leaving the raster count toward the perimeter
            let inside = neighbors4(geo, p).count();
            let outside = 4 - inside;
            *perimeter.get_mut(&a).unwrap() += outside;
            for q in neighbors4(geo, p) {
                match seg.labels[q] {
                    Some(b) if b == a => {}
                    Some(b) => {
                        *perimeter.get_mut(&a).unwrap() += 1;
                        *shared.get_mut(&a).unwrap().entry(b).or_insert(0) += 1;
                    }
                    None => *perimeter.get_mut(&a).unwrap() += 1,
                }
            }
        }
        Self {
            area: seg.regions.iter().map(|r| (r.id, r.area_px)).collect(),
            perimeter,
            value: seg.regions.iter().map(|r| (r.id, r.value)).collect(),
            shared,
            owner: (0..n).collect(),
        }
    }

    /// Fold region `from` into `into`; `into` keeps its id.
    fn absorb(&mut self, from: usize, into: usize) {
        let s_ab = self.shared[&from].get(&into).copied().unwrap_or(0);
        let area = self.area.remove(&from).unwrap();
        let per = self.perimeter.remove(&from).unwrap();
        *self.area.get_mut(&into).unwrap() += area;
        *self.perimeter.get_mut(&into).unwrap() += per;
        *self.perimeter.get_mut(&into).unwrap() -= 2 * s_ab;
        self.value.remove(&from);

        let from_edges = self.shared.remove(&from).unwrap();
        for (c, s) in from_edges {
            let c_map = self.shared.get_mut(&c).unwrap();
            c_map.remove(&from);
            if c == into {
                continue;
            }
            *c_map.entry(into).or_insert(0) += s;
            *self.shared.get_mut(&into).unwrap().entry(c).or_insert(0) += s;
        }
        self.owner[from] = into;
    }

    fn resolve(&self, mut id: usize) -> usize {
        while self.owner[id] != id {
            id = self.owner[id];
        }
        id
    }

    fn into_map(self, seg: &SegmentedMap) -> SegmentedMap {
        let labels: Vec<Option<usize>> = seg.labels.iter().map(|l| l.map(|a| self.resolve(a))).collect();
        build_from_labels(seg.geometry, &labels, &self.value)
    }
}

/// Absorb every region whose boundary shared with one neighbor exceeds
/// `overlap_threshold` of its own perimeter. Only the smaller region of a
/// pair (by area, then id) is absorbed, into the neighbor with the longest
/// shared boundary (ties to the lower id).
pub fn remove_ripples(seg: &SegmentedMap, overlap_threshold: f64) -> SegmentedMap {
    assert!(
        overlap_threshold > 0.0 && overlap_threshold < 1.0,
        "overlap_threshold must lie in (0, 1)"
    );
    let mut g = RegionGraph::new(seg);
    loop {
        // one pass visits regions smallest first; stats stay exact because
        // every absorption updates the graph in place
        let mut order: Vec<usize> = g.area.keys().copied().collect();
        order.sort_by_key(|&id| (g.area[&id], id));
        let mut merged = false;
        for a in order {
            if !g.area.contains_key(&a) {
                continue;
            }
            let key_a = (g.area[&a], a);
            let per_a = g.perimeter[&a] as f64;
            let mut best: Option<(usize, usize)> = None;
            for (&b, &s) in &g.shared[&a] {
                if (g.area[&b], b) < key_a {
                    continue;
                }
                if (s as f64) <= overlap_threshold * per_a {
                    continue;
                }
                match best {
                    Some((_, bs)) if bs >= s => {}
                    _ => best = Some((b, s)),
                }
            }
            if let Some((b, _)) = best {
                g.absorb(a, b);
                merged = true;
            }
        }
        if !merged {
            break;
        }
    }
    g.into_map(seg)
}

/// Merge adjacent regions whose values differ by at most `value_tolerance`.
/// Each round merges the connected components of the "close neighbors"
/// graph into one region with the area-weighted mean value; rounds repeat
/// until no adjacent pair is within tolerance.
pub fn merge_similar(seg: &SegmentedMap, value_tolerance: f64) -> SegmentedMap {
    assert!(value_tolerance >= 0.0, "value_tolerance must be non-negative");
    let mut g = RegionGraph::new(seg);
    loop {
        let ids: Vec<usize> = g.area.keys().copied().collect();
        let mut parent: BTreeMap<usize, usize> = ids.iter().map(|&i| (i, i)).collect();
        fn find(parent: &mut BTreeMap<usize, usize>, mut x: usize) -> usize {
            while parent[&x] != x {
                let p = parent[&parent[&x]];
                parent.insert(x, p);
                x = p;
            }
            x
        }
        let mut any = false;
        for &a in &ids {
            for &b in g.shared[&a].keys() {
                if b <= a {
                    continue;
                }
                if (g.value[&a] - g.value[&b]).abs() <= value_tolerance + 1e-9 {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    if ra != rb {
                        // lower id survives
                        let (keep, drop) = if ra < rb { (ra, rb) } else { (rb, ra) };
                        parent.insert(drop, keep);
                        any = true;
                    }
                }
            }
        }
        if !any {
            break;
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &a in &ids {
            let r = find(&mut parent, a);
            groups.entry(r).or_default().push(a);
        }
        for (root, members) in groups {
            if members.len() < 2 {
                continue;
            }
            let (mut wsum, mut asum) = (0.0, 0usize);
            for m in &members {
                wsum += g.value[m] * g.area[m] as f64;
                asum += g.area[m];
            }
            let mean = wsum / asum as f64;
            // absorb along adjacency so shared-edge bookkeeping stays valid
            let mut pending: BTreeSet<usize> = members.iter().copied().filter(|&m| m != root).collect();
            while !pending.is_empty() {
                let next = pending
                    .iter()
                    .copied()
                    .find(|m| g.shared[m].contains_key(&root))
                    .expect("merge group is connected");
                pending.remove(&next);
                g.absorb(next, root);
            }
            g.value.insert(root, mean);
        }
    }
    g.into_map(seg)
}

/// Full segmentation: free-space image, grouping, ripple removal, merging.
pub fn segment(dist: &DistanceImage, params: &SegmentParams) -> SegmentedMap {
    let fsi = free_space_image(dist, params.quantization);
    let grouped = group_regions(&fsi);
    let rippled = remove_ripples(&grouped, params.overlap_threshold);
    merge_similar(&rippled, params.value_tolerance)
}
