use std::collections::BTreeSet;
use std::f64::consts::PI;

use fpsurvey::fixtures;
use fpsurvey::gridmap::*;
use fpsurvey::pathplan::*;
use fpsurvey::segmentation::*;
use proptest::prelude::*;

const RES: f64 = 0.05;

fn geometry(w: usize, h: usize) -> GridGeometry {
    GridGeometry {
        width: w,
        height: h,
        resolution: RES,
        origin: (0.0, 0.0),
    }
}

fn region(pixels: Vec<(usize, usize)>) -> Region {
    Region {
        id: 0,
        area_px: pixels.len(),
        pixels,
        value: 1.0,
    }
}

fn block(x0: usize, y0: usize, w: usize, h: usize) -> Region {
    let mut px = Vec::new();
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            px.push((x, y));
        }
    }
    region(px)
}

/// Pixels whose centers fall inside a `len` × `wid` rectangle rotated by
/// `theta` about a point a quarter pixel off (c, c), so no center sits
/// exactly on an edge.
fn rotated_rect(len: f64, wid: f64, theta: f64, c: f64) -> Region {
    let (s, co) = theta.sin_cos();
    let mut px = Vec::new();
    for y in 0..(2.0 * c) as usize {
        for x in 0..(2.0 * c) as usize {
            let (dx, dy) = (x as f64 - c - 0.25, y as f64 - c - 0.25);
            let u = co * dx + s * dy;
            let v = -s * dx + co * dy;
            if u.abs() <= len / 2.0 && v.abs() <= wid / 2.0 {
                px.push((x, y));
            }
        }
    }
    region(px)
}

fn check_axes(a: &PrincipalAxes) {
    let n1 = a.a1.0.hypot(a.a1.1);
    let n2 = a.a2.0.hypot(a.a2.1);
    assert!((n1 - 1.0).abs() < 1e-9 && (n2 - 1.0).abs() < 1e-9);
    assert!((a.a1.0 * a.a2.0 + a.a1.1 * a.a2.1).abs() < 1e-9);
    assert!(a.eigvals.0 >= a.eigvals.1 && a.eigvals.1 >= 0.0);
    assert!(a.a1.0 > 0.0 || (a.a1.0 == 0.0 && a.a1.1 > 0.0));
}

#[test]
fn block_axes_and_rectangle() {
    let r = block(3, 7, 10, 2);
    let a = principal_axes(&r).unwrap();
    check_axes(&a);
    assert_eq!(a.a1, (1.0, 0.0));
    assert!((a.eigvals.0 - 99.0 / 12.0).abs() < 1e-12);
    assert!((a.eigvals.1 - 3.0 / 12.0).abs() < 1e-12);
    assert!((a.eigvals.0 / a.eigvals.1 - 33.0).abs() < 1e-9);
    let rect = bounding_rectangle(&r, &a);
    assert!((rect.width_px() - 10.0).abs() <= 1.0);
    assert!((rect.height_px() - 2.0).abs() <= 1.0);
    assert!(rect.width_px() * rect.height_px() >= r.area_px as f64 - 1e-9);
}

#[test]
fn square_uses_x_axis() {
    let a = principal_axes(&block(0, 0, 6, 6)).unwrap();
    assert!((a.eigvals.0 - a.eigvals.1).abs() < 1e-12);
    assert_eq!(a.a1, (1.0, 0.0));
    assert_eq!(a.a2, (0.0, 1.0));
}

#[test]
fn degenerate_regions() {
    assert!(matches!(principal_axes(&block(2, 2, 1, 1)), Err(fpsurvey::Error::DegenerateRegion(0))));
    let row = block(0, 4, 12, 1);
    let a = principal_axes(&row).unwrap();
    let rect = bounding_rectangle(&row, &a);
    assert!((rect.height_px() - 1.0).abs() < 1e-9);
    assert!((rect.width_px() - 12.0).abs() < 1e-9);
}

#[test]
fn rotation_equivariance() {
    for deg in [0.0f64, 30.0, 45.0, 90.0] {
        let theta = deg.to_radians();
        let r = rotated_rect(60.0, 12.0, theta, 50.0);
        let a = principal_axes(&r).unwrap();
        check_axes(&a);
        // a1 ∥ (cos θ, sin θ) up to sign
        let dot = (a.a1.0 * theta.cos() + a.a1.1 * theta.sin()).abs();
        assert!(dot > 1.0 - 1e-4, "{deg}°: a1 = {:?}", a.a1);
        let ang = a.a1.1.atan2(a.a1.0).rem_euclid(PI);
        assert!((ang - theta).abs() < 1e-2 || (ang - theta).abs() > PI - 1e-2);
        let rect = bounding_rectangle(&r, &a);
        assert!((rect.width_px() - 60.0).abs() <= 1.0, "{deg}°: {}", rect.width_px());
        assert!((rect.height_px() - 12.0).abs() <= 1.0, "{deg}°: {}", rect.height_px());
    }
}

#[test]
fn four_by_two_point_four_gives_fifteen() {
    let geo = geometry(100, 100);
    let r = block(10, 10, 80, 48);
    let a = principal_axes(&r).unwrap();
    let wps = grid_waypoints(&bounding_rectangle(&r, &a), &r, &geo, 0.8);
    assert_eq!(wps.len(), 15);
    for w in wps.windows(2) {
        if w[0].row == w[1].row {
            let d = (w[0].x - w[1].x).hypot(w[0].y - w[1].y);
            assert!((d - 0.8).abs() < 1e-6);
            assert_eq!(w[0].heading, w[1].heading);
        }
    }
    let rows: Vec<Vec<f64>> = (0..3)
        .map(|row| wps.iter().filter(|w| w.row == row).map(|w| w.x).collect())
        .collect();
    assert!(rows.iter().all(|r| r.len() == 5));
    assert!(rows[0].windows(2).all(|p| p[1] > p[0]));
    assert!(rows[1].windows(2).all(|p| p[1] < p[0]));
    assert!(rows[2].windows(2).all(|p| p[1] > p[0]));
    assert_eq!(count_turns(&wps), 2);
}

#[test]
fn small_region_gives_center_waypoint() {
    let geo = geometry(40, 40);
    let r = block(10, 10, 5, 3);
    let a = principal_axes(&r).unwrap();
    let wps = grid_waypoints(&bounding_rectangle(&r, &a), &r, &geo, 0.8);
    assert_eq!(wps.len(), 1);
    assert!((wps[0].x - 12.0 * RES).abs() < 1e-9);
    assert!((wps[0].y - 11.0 * RES).abs() < 1e-9);
}

/// Independent tiling: cells of `cell_size` centered on the F′ rectangle
/// spanned by the pixel squares, kept when the containing pixel is in
/// `pixels`.
fn oracle_cells(r: &Region, a: &PrincipalAxes, cell_px: f64, keep: impl Fn(usize, usize) -> bool) -> usize {
    let set: BTreeSet<(usize, usize)> = r.pixels.iter().copied().collect();
    let proj = |x: f64, y: f64| (a.a1.0 * x + a.a1.1 * y, a.a2.0 * x + a.a2.1 * y);
    let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &r.pixels {
        let (u, v) = proj(x as f64, y as f64);
        u0 = u0.min(u - 0.5);
        u1 = u1.max(u + 0.5);
        v0 = v0.min(v - 0.5);
        v1 = v1.max(v + 0.5);
    }
    let nu = (((u1 - u0) / cell_px - 1e-9).ceil() as usize).max(1);
    let nv = (((v1 - v0) / cell_px - 1e-9).ceil() as usize).max(1);
    let su = u0 + (u1 - u0 - nu as f64 * cell_px) / 2.0;
    let sv = v0 + (v1 - v0 - nv as f64 * cell_px) / 2.0;
    let mut n = 0;
    for i in 0..nu {
        for j in 0..nv {
            let (u, v) = (su + (i as f64 + 0.5) * cell_px, sv + (j as f64 + 0.5) * cell_px);
            let (x, y) = (u * a.a1.0 + v * a.a2.0, u * a.a1.1 + v * a.a2.1);
            let (x, y) = (x.round(), y.round());
            if x >= 0.0 && y >= 0.0 && set.contains(&(x as usize, y as usize)) && keep(x as usize, y as usize) {
                n += 1;
            }
        }
    }
    n
}

#[test]
fn l_shape_keeps_only_inside_cells() {
    let geo = geometry(120, 120);
    let mut px = block(0, 0, 100, 24).pixels;
    px.extend(block(0, 24, 24, 60).pixels);
    px.sort_by_key(|&(x, y)| (y, x));
    let r = region(px);
    let a = principal_axes(&r).unwrap();
    let wps = grid_waypoints(&bounding_rectangle(&r, &a), &r, &geo, 0.8);
    let set: BTreeSet<(usize, usize)> = r.pixels.iter().copied().collect();
    for w in &wps {
        let p = geo.world_to_pixel(w.x, w.y).unwrap();
        assert!(set.contains(&p));
    }
    assert_eq!(wps.len(), oracle_cells(&r, &a, 16.0, |_, _| true));
    assert!(wps.len() >= 10);
}

fn fixture_plan(name: &str) -> (SegmentedMap, BinaryGrid, SurveyPlan) {
    let g = fixtures::by_name(name).unwrap();
    let inflated = inflate_obstacles(&threshold_obstacles(&g, 100), 0.2);
    let seg = segment(&distance_transform(&inflated).unwrap(), &SegmentParams::default());
    let plan = plan_survey(&seg, &inflated, 0.8).unwrap();
    (seg, inflated, plan)
}

#[test]
fn fixture_plans_match_membership_oracle() {
    for (name, expected) in [("room", 100), ("plus", 92), ("floor3-like", 777)] {
        let (seg, inflated, plan) = fixture_plan(name);
        let mut oracle = 0;
        for r in &seg.regions {
            let a = principal_axes(r).unwrap_or(PrincipalAxes::IDENTITY);
            let cell_px = 0.8 / seg.geometry.resolution;
            oracle += oracle_cells(r, &a, cell_px, |x, y| inflated.is_free(x, y));
        }
        assert_eq!(plan.waypoint_count(), oracle, "{name}");
        assert_eq!(plan.waypoint_count(), expected, "{name}");
        for (_, w) in plan.iter() {
            assert!(inflated.is_free_world(w.x, w.y));
        }
        assert_eq!(fixture_plan(name).2, plan);
        let ids: BTreeSet<usize> = plan.regions.iter().map(|r| r.region_id).collect();
        assert_eq!(ids.len(), plan.regions.len());
    }
}

#[test]
fn plan_round_trips_through_jsonl() {
    let (_, _, plan) = fixture_plan("plus");
    let mut buf = Vec::new();
    plan.write_jsonl(&mut buf).unwrap();
    let back = SurveyPlan::read_jsonl(&buf[..], plan.cell_size).unwrap();
    assert_eq!(back.waypoint_count(), plan.waypoint_count());
    for ((ra, a), (rb, b)) in plan.iter().zip(back.iter()) {
        assert_eq!(ra, rb);
        assert_eq!((a.x, a.y, a.heading), (b.x, b.y, b.heading));
    }
}

#[test]
fn empty_segmentation_is_an_error() {
    let geo = geometry(4, 4);
    let seg = SegmentedMap::from_labels(geo, vec![None; 16]);
    let meta = MapMeta {
        resolution_m: RES,
        origin_x_m: 0.0,
        origin_y_m: 0.0,
    };
    let inflated = threshold_obstacles(&OccupancyGrid::new(4, 4, meta, vec![0; 16]).unwrap(), 128);
    assert!(matches!(plan_survey(&seg, &inflated, 0.8), Err(fpsurvey::Error::EmptyPlan)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn sweeping_along_a1_turns_least(w in 16usize..120, h in 16usize..120) {
        let geo = geometry(130, 130);
        let r = block(2, 2, w, h);
        let a = principal_axes(&r).unwrap();
        let along = count_turns(&grid_waypoints(&bounding_rectangle(&r, &a), &r, &geo, 0.8));
        let s = a.swapped();
        let across = count_turns(&grid_waypoints(&bounding_rectangle(&r, &s), &r, &geo, 0.8));
        prop_assert!(along <= across);
        let cells = |n: usize| ((n as f64 / 16.0 - 1e-9).ceil() as usize).max(1);
        if cells(w) != cells(h) {
            prop_assert!(along < across);
        }
    }

    #[test]
    fn axes_are_orthonormal(w in 2usize..40, h in 1usize..40, deg in 0.0f64..180.0) {
        let r = rotated_rect(w as f64, h as f64, deg.to_radians(), 30.0);
        prop_assume!(r.pixels.len() >= 2);
        check_axes(&principal_axes(&r).unwrap());
    }
}
