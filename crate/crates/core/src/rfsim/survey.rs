//! Robot motion and the two survey modes. The robot drives straight legs
//! with a trapezoidal speed profile (rest to rest), turns in place between
//! legs, and in sojourn mode dwells at every waypoint.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::db::{Flag, FingerprintDatabase, FingerprintSample};
use super::{RfWorld, RSSI_MIN};
use crate::gridmap::BinaryGrid;
use crate::pathplan::SurveyPlan;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurveyMode {
    NoSojourn {
        scan_interval_s: f64,
    },
    Sojourn {
        dwell_s: f64,
        scans_per_stop: usize,
        scan_interval_s: f64,
    },
}

impl SurveyMode {
    pub const NO_SOJOURN: SurveyMode = SurveyMode::NoSojourn { scan_interval_s: 3.0 };
    pub const SOJOURN: SurveyMode = SurveyMode::Sojourn {
        dwell_s: 10.0,
        scans_per_stop: 3,
        scan_interval_s: 3.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SurveyMode::NoSojourn { scan_interval_s } => scan_interval_s > 0.0,
            SurveyMode::Sojourn {
                dwell_s,
                scans_per_stop,
                scan_interval_s,
            } => dwell_s >= 0.0 && scans_per_stop >= 1 && scan_interval_s > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bad survey mode {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionParams {
    pub v_max: f64,
    pub accel: f64,
    /// In-place rotation rate between legs, rad/s.
    pub turn_rate_rad_s: f64,
    /// Without sojourn, slow down along sweep rows so that consecutive
    /// scans are one grid cell apart.
    pub match_scan_spacing: bool,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            v_max: 0.5,
            accel: 0.3,
            turn_rate_rad_s: 0.5,
            match_scan_spacing: true,
        }
    }
}

impl MotionParams {
    pub fn validate(&self) -> Result<()> {
        if self.v_max > 0.0 && self.accel > 0.0 && self.turn_rate_rad_s > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bad motion parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerModel {
    pub p_drive_w: f64,
    pub p_idle_w: f64,
    /// Energy of one stop-and-go (deceleration plus re-acceleration), Wh.
    pub e_accel_wh: f64,
    pub p_laser_w: f64,
    pub p_laptop_w: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        Self {
            p_drive_w: 35.0,
            p_idle_w: 10.0,
            e_accel_wh: 0.05,
            p_laser_w: 8.0,
            p_laptop_w: 35.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimeEnergyReport {
    pub duration_s: f64,
    pub robot_wh: f64,
    pub laser_wh: f64,
    pub laptop_wh: f64,
    pub n_decel_events: usize,
    pub distance_m: f64,
}

impl TimeEnergyReport {
    pub fn total_wh(&self) -> f64 {
        self.robot_wh + self.laser_wh + self.laptop_wh
    }

    pub fn add(&self, other: &TimeEnergyReport) -> TimeEnergyReport {
        TimeEnergyReport {
            duration_s: self.duration_s + other.duration_s,
            robot_wh: self.robot_wh + other.robot_wh,
            laser_wh: self.laser_wh + other.laser_wh,
            laptop_wh: self.laptop_wh + other.laptop_wh,
            n_decel_events: self.n_decel_events + other.n_decel_events,
            distance_m: self.distance_m + other.distance_m,
        }
    }
}

/// A place the route passes through. Consecutive stops with the same
/// `(group, row)` form one straight leg when the robot does not sojourn;
/// moves between different groups follow the navigation grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stop {
    pub pos: (f64, f64),
    pub region_id: usize,
    pub group: usize,
    pub row: usize,
}

fn plan_stops(plan: &SurveyPlan) -> Vec<Stop> {
    plan.regions
        .iter()
        .enumerate()
        .flat_map(|(g, r)| {
            r.waypoints.iter().map(move |w| Stop {
                pos: w.pos(),
                region_id: r.region_id,
                group: g,
                row: w.row,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Move { t0: f64, path: Polyline, profile: Trapezoid },
    Rotate { t0: f64, dur: f64, pos: (f64, f64) },
    Dwell { t0: f64, dur: f64, pos: (f64, f64), stop: usize },
}

impl Segment {
    fn t0(&self) -> f64 {
        match self {
            Segment::Move { t0, .. } | Segment::Rotate { t0, .. } | Segment::Dwell { t0, .. } => *t0,
        }
    }
}

/// Rest-to-rest speed profile over a distance.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Trapezoid {
    len: f64,
    v_peak: f64,
    accel: f64,
    t_ramp: f64,
    duration: f64,
}

impl Trapezoid {
    fn new(len: f64, v_max: f64, accel: f64) -> Self {
        let v_peak = v_max.min((accel * len).sqrt());
        let t_ramp = v_peak / accel;
        let cruise = if v_peak > 0.0 { (len - v_peak * t_ramp) / v_peak } else { 0.0 };
        Self {
            len,
            v_peak,
            accel,
            t_ramp,
            duration: 2.0 * t_ramp + cruise.max(0.0),
        }
    }

    /// Distance covered after `tau` seconds.
    fn distance_at(&self, tau: f64) -> f64 {
        let tau = tau.clamp(0.0, self.duration);
        if tau <= self.t_ramp {
            0.5 * self.accel * tau * tau
        } else if tau <= self.duration - self.t_ramp {
            0.5 * self.v_peak * self.t_ramp + self.v_peak * (tau - self.t_ramp)
        } else {
            let r = self.duration - tau;
            self.len - 0.5 * self.accel * r * r
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Polyline {
    pts: Vec<(f64, f64)>,
    cum: Vec<f64>,
}

impl Polyline {
    fn new(mut pts: Vec<(f64, f64)>) -> Self {
        pts.dedup();
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let d = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            cum.push(cum.last().unwrap() + d);
        }
        Self { pts, cum }
    }

    fn len(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn at(&self, s: f64) -> (f64, f64) {
        let k = self.cum.partition_point(|&c| c <= s).clamp(1, self.pts.len().max(2) - 1);
        if self.pts.len() == 1 {
            return self.pts[0];
        }
        let (a, b) = (self.pts[k - 1], self.pts[k]);
        let seg = self.cum[k] - self.cum[k - 1];
        let f = if seg > 0.0 { ((s - self.cum[k - 1]) / seg).clamp(0.0, 1.0) } else { 0.0 };
        (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1))
    }

    fn start_heading(&self) -> f64 {
        let (a, b) = (self.pts[0], self.pts[1]);
        (b.1 - a.1).atan2(b.0 - a.0)
    }

    fn end_heading(&self) -> f64 {
        let n = self.pts.len();
        let (a, b) = (self.pts[n - 2], self.pts[n - 1]);
        (b.1 - a.1).atan2(b.0 - a.0)
    }
}

fn angle_between(a: f64, b: f64) -> f64 {
    let d = (b - a).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// The robot's schedule for one route.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    segments: Vec<Segment>,
    stops: Vec<Stop>,
    pub duration_s: f64,
    pub distance_m: f64,
    pub travel_s: f64,
    pub dwell_s: f64,
    pub n_decel_events: usize,
}

impl Timeline {
    /// Schedule a route through `stops`. With `dwell_s` the robot halts at
    /// every stop for that long; otherwise it only stops at leg ends. Moves
    /// inside a group cruise at `sweep_speed`, transits at `v_max`.
    pub fn build(
        stops: &[Stop],
        start: Option<(f64, f64)>,
        dwell_s: Option<f64>,
        motion: &MotionParams,
        nav: Option<&BinaryGrid>,
        sweep_speed: f64,
    ) -> Self {
        let sweep_speed = sweep_speed.min(motion.v_max);
        let mut b = Builder {
            motion,
            segments: Vec::new(),
            t: 0.0,
            heading: None,
            distance: 0.0,
            travel: 0.0,
            dwell: 0.0,
            n_decel: 0,
        };
        let mut here = start.or_else(|| stops.first().map(|s| s.pos));
        let mut prev: Option<Stop> = None;
        let mut i = 0;
        while i < stops.len() {
            let s = stops[i];
            if let Some(p) = here {
                let same_group = prev.is_some_and(|q| q.group == s.group);
                let (path, v) = match nav {
                    Some(grid) if !same_group => (nav_path(grid, p, s.pos), motion.v_max),
                    _ if same_group => (vec![p, s.pos], sweep_speed),
                    _ => (vec![p, s.pos], motion.v_max),
                };
                b.drive(Polyline::new(path), v);
            }
            if let Some(d) = dwell_s {
                b.dwell(s.pos, d, i);
                here = Some(s.pos);
                prev = Some(s);
                i += 1;
                continue;
            }
            // straight run along the row
            let mut j = i;
            while j + 1 < stops.len() && stops[j + 1].group == s.group && stops[j + 1].row == s.row {
                j += 1;
            }
            b.drive(Polyline::new(stops[i..=j].iter().map(|q| q.pos).collect()), sweep_speed);
            here = Some(stops[j].pos);
            prev = Some(stops[j]);
            i = j + 1;
        }
        Self {
            segments: b.segments,
            stops: stops.to_vec(),
            duration_s: b.t,
            distance_m: b.distance,
            travel_s: b.travel,
            dwell_s: b.dwell,
            n_decel_events: b.n_decel,
        }
    }

    pub fn position(&self, t: f64) -> (f64, f64) {
        let k = self.segments.partition_point(|s| s.t0() <= t);
        if k == 0 {
            return self.stops.first().map_or((0.0, 0.0), |s| s.pos);
        }
        match &self.segments[k - 1] {
            Segment::Move { t0, path, profile } => path.at(profile.distance_at(t - t0)),
            Segment::Rotate { pos, .. } | Segment::Dwell { pos, .. } => *pos,
        }
    }

    /// `(stop index, start time)` of every dwell.
    pub fn dwells(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Dwell { stop, t0, .. } => Some((*stop, *t0)),
            _ => None,
        })
    }

    pub fn report(&self, power: &PowerModel) -> TimeEnergyReport {
        TimeEnergyReport {
            duration_s: self.duration_s,
            robot_wh: (power.p_drive_w * self.travel_s + power.p_idle_w * self.dwell_s) / 3600.0
                + power.e_accel_wh * self.n_decel_events as f64,
            laser_wh: power.p_laser_w * self.duration_s / 3600.0,
            laptop_wh: power.p_laptop_w * self.duration_s / 3600.0,
            n_decel_events: self.n_decel_events,
            distance_m: self.distance_m,
        }
    }
}

struct Builder<'a> {
    motion: &'a MotionParams,
    segments: Vec<Segment>,
    t: f64,
    heading: Option<f64>,
    distance: f64,
    travel: f64,
    dwell: f64,
    n_decel: usize,
}

impl Builder<'_> {
    fn drive(&mut self, path: Polyline, v: f64) {
        if path.pts.len() < 2 || path.len() <= 1e-9 {
            return;
        }
        let h0 = path.start_heading();
        if let Some(h) = self.heading {
            let turn = angle_between(h, h0);
            if turn > 1e-9 {
                let dur = turn / self.motion.turn_rate_rad_s;
                self.segments.push(Segment::Rotate {
                    t0: self.t,
                    dur,
                    pos: path.pts[0],
                });
                self.t += dur;
                self.travel += dur;
            }
        }
        let profile = Trapezoid::new(path.len(), v, self.motion.accel);
        self.heading = Some(path.end_heading());
        self.distance += path.len();
        self.travel += profile.duration;
        self.n_decel += 1;
        self.segments.push(Segment::Move {
            t0: self.t,
            path,
            profile,
        });
        self.t += profile.duration;
    }

    fn dwell(&mut self, pos: (f64, f64), dur: f64, stop: usize) {
        self.segments.push(Segment::Dwell {
            t0: self.t,
            dur,
            pos,
            stop,
        });
        self.t += dur;
        self.dwell += dur;
    }
}

/// Scan times and positions every `interval` seconds from t = 0.
pub fn scan_positions(timeline: &Timeline, interval: f64) -> Vec<(f64, (f64, f64))> {
    let n = (timeline.duration_s / interval + 1e-9).floor() as usize;
    (0..=n)
        .map(|k| {
            let t = k as f64 * interval;
            (t, timeline.position(t))
        })
        .collect()
}

/// Runs surveys of one world with fixed motion and power models.
pub struct Surveyor<'a> {
    pub world: &'a RfWorld,
    pub motion: MotionParams,
    pub power: PowerModel,
    /// Free-space grid for routing between regions; straight lines without.
    pub nav: Option<&'a BinaryGrid>,
}

impl Surveyor<'_> {
    pub fn survey(
        &self,
        plan: &SurveyPlan,
        mode: SurveyMode,
        epoch: u32,
        rng: &mut ChaCha8Rng,
    ) -> Result<(FingerprintDatabase, TimeEnergyReport, Timeline)> {
        mode.validate()?;
        self.motion.validate()?;
        let stops = plan_stops(plan);
        if stops.is_empty() {
            return Err(Error::EmptyPlan);
        }
        let mut db = FingerprintDatabase::new(epoch);
        let timeline = match mode {
            SurveyMode::NoSojourn { scan_interval_s } => {
                let sweep = if self.motion.match_scan_spacing {
                    plan.cell_size / scan_interval_s
                } else {
                    self.motion.v_max
                };
                let tl = Timeline::build(&stops, None, None, &self.motion, self.nav, sweep);
                let scans = scan_positions(&tl, scan_interval_s);
                let mut owner: Vec<Option<usize>> = vec![None; scans.len()];
                for (w, s) in stops.iter().enumerate() {
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for (k, (_, p)) in scans.iter().enumerate() {
                        let d = (p.0 - s.pos.0).powi(2) + (p.1 - s.pos.1).powi(2);
                        if d < best_d {
                            best_d = d;
                            best = k;
                        }
                    }
                    owner[best].get_or_insert(w);
                }
                for (k, &(t, pos)) in scans.iter().enumerate() {
                    let Some(w) = owner[k] else { continue };
                    let region_id = stops[w].region_id;
                    for r in super::simulate_scan(self.world, pos, t, epoch, rng) {
                        db.samples.push(FingerprintSample {
                            epoch,
                            region_id,
                            x: pos.0,
                            y: pos.1,
                            ap_id: r.ap_id,
                            band: r.band,
                            rssi: r.rssi.unwrap_or(RSSI_MIN),
                            flag: if r.rssi.is_some() { Flag::Measured } else { Flag::Lost },
                            t,
                        });
                    }
                }
                tl
            }
            SurveyMode::Sojourn {
                dwell_s,
                scans_per_stop,
                scan_interval_s,
            } => {
                let tl = Timeline::build(&stops, None, Some(dwell_s), &self.motion, self.nav, self.motion.v_max);
                for (w, t0) in tl.dwells() {
                    let s = stops[w];
                    db.samples.extend(self.stop_and_scan(
                        s.pos,
                        s.region_id,
                        t0,
                        scans_per_stop,
                        scan_interval_s,
                        epoch,
                        Flag::Measured,
                        rng,
                    ));
                }
                tl
            }
        };
        let report = timeline.report(&self.power);
        Ok((db, report, timeline))
    }

    /// Averaged readings from `n` scans taken while standing at `pos`.
    #[allow(clippy::too_many_arguments)]
    fn stop_and_scan(
        &self,
        pos: (f64, f64),
        region_id: usize,
        t0: f64,
        n: usize,
        interval: f64,
        epoch: u32,
        flag: Flag,
        rng: &mut ChaCha8Rng,
    ) -> Vec<FingerprintSample> {
        let levels = self.world.static_levels(pos, epoch);
        let mut sum = vec![0.0; 2 * levels.len()];
        let mut cnt = vec![0usize; 2 * levels.len()];
        let mut keys = Vec::new();
        for j in 0..n {
            let scan = self.world.scan_with_levels(&levels, t0 + j as f64 * interval, epoch, rng);
            if j == 0 {
                keys = scan.iter().map(|r| (r.ap_id, r.band)).collect();
            }
            for (k, r) in scan.iter().enumerate() {
                if let Some(v) = r.rssi {
                    sum[k] += v;
                    cnt[k] += 1;
                }
            }
        }
        keys.into_iter()
            .enumerate()
            .map(|(k, (ap_id, band))| {
                let s = FingerprintSample {
                    epoch,
                    region_id,
                    x: pos.0,
                    y: pos.1,
                    ap_id,
                    band,
                    rssi: if cnt[k] > 0 { sum[k] / cnt[k] as f64 } else { RSSI_MIN },
                    flag,
                    t: t0,
                };
                if cnt[k] > 0 {
                    s
                } else {
                    s.lost()
                }
            })
            .collect()
    }

    /// Visit `targets` (region, position) from `start`, dwelling and
    /// scanning at each. Samples are flagged `Resurveyed` (or `Lost`).
    pub fn sojourn_at(
        &self,
        targets: &[(usize, (f64, f64))],
        start: (f64, f64),
        mode: SurveyMode,
        epoch: u32,
        t_offset: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<FingerprintSample>, TimeEnergyReport)> {
        let SurveyMode::Sojourn {
            dwell_s,
            scans_per_stop,
            scan_interval_s,
        } = mode
        else {
            return Err(Error::InvalidParameter("resurvey needs a sojourn mode".into()));
        };
        mode.validate()?;
        let stops: Vec<Stop> = targets
            .iter()
            .enumerate()
            .map(|(i, &(region_id, pos))| Stop {
                pos,
                region_id,
                group: i,
                row: 0,
            })
            .collect();
        let tl = Timeline::build(&stops, Some(start), Some(dwell_s), &self.motion, self.nav, self.motion.v_max);
        let mut out = Vec::new();
        for (w, t0) in tl.dwells() {
            let s = stops[w];
            out.extend(self.stop_and_scan(
                s.pos,
                s.region_id,
                t_offset + t0,
                scans_per_stop,
                scan_interval_s,
                epoch,
                Flag::Resurveyed,
                rng,
            ));
        }
        Ok((out, tl.report(&self.power)))
    }
}

/// Survey with default power constants and straight-line transitions.
pub fn simulate_survey(
    world: &RfWorld,
    plan: &SurveyPlan,
    mode: SurveyMode,
    motion: &MotionParams,
    rng: &mut ChaCha8Rng,
) -> Result<(FingerprintDatabase, TimeEnergyReport)> {
    let s = Surveyor {
        world,
        motion: *motion,
        power: PowerModel::default(),
        nav: None,
    };
    s.survey(plan, mode, 0, rng).map(|(db, rep, _)| (db, rep))
}

/// See [`Surveyor::sojourn_at`].
pub fn sojourn_at(
    surveyor: &Surveyor<'_>,
    targets: &[(usize, (f64, f64))],
    start: (f64, f64),
    mode: SurveyMode,
    epoch: u32,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<FingerprintSample>, TimeEnergyReport)> {
    surveyor.sojourn_at(targets, start, mode, epoch, 0.0, rng)
}

/// Shortest 8-connected path over free pixels, shortened by skipping
/// vertices that have a clear line of sight. Falls back to the straight
/// segment when either end is blocked or unreachable.
fn nav_path(grid: &BinaryGrid, a: (f64, f64), b: (f64, f64)) -> Vec<(f64, f64)> {
    let g = &grid.geometry;
    let (Some(pa), Some(pb)) = (g.world_to_pixel(a.0, a.1), g.world_to_pixel(b.0, b.1)) else {
        return vec![a, b];
    };
    if !grid.is_free(pa.0, pa.1) || !grid.is_free(pb.0, pb.1) {
        return vec![a, b];
    }
    if line_of_sight(grid, a, b) {
        return vec![a, b];
    }
    let (w, h) = (g.width as i64, g.height as i64);
    let src = g.index(pa.0, pa.1);
    let dst = g.index(pb.0, pb.1);
    let mut dist = vec![u64::MAX; g.len()];
    let mut prev = vec![usize::MAX; g.len()];
    let mut heap = BinaryHeap::new();
    dist[src] = 0;
    heap.push(Reverse((0u64, src)));
    while let Some(Reverse((d, u))) = heap.pop() {
        if u == dst {
            break;
        }
        if d > dist[u] {
            continue;
        }
        let (ux, uy) = g.coords(u);
        for (dx, dy, c) in [
            (1, 0, 1000),
            (-1, 0, 1000),
            (0, 1, 1000),
            (0, -1, 1000),
            (1, 1, 1414),
            (1, -1, 1414),
            (-1, 1, 1414),
            (-1, -1, 1414),
        ] {
            let (nx, ny) = (ux as i64 + dx, uy as i64 + dy);
            if nx < 0 || ny < 0 || nx >= w || ny >= h {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            // no corner cutting
            if !grid.is_free(nx, ny) || !grid.is_free(nx, uy) || !grid.is_free(ux, ny) {
                continue;
            }
            let v = g.index(nx, ny);
            let nd = d + c;
            if nd < dist[v] {
                dist[v] = nd;
                prev[v] = u;
                heap.push(Reverse((nd, v)));
            }
        }
    }
    if dist[dst] == u64::MAX {
        return vec![a, b];
    }
    let mut px = vec![dst];
    while *px.last().unwrap() != src {
        px.push(prev[*px.last().unwrap()]);
    }
    px.reverse();
    let mut pts: Vec<(f64, f64)> = px
        .iter()
        .map(|&i| {
            let (x, y) = g.coords(i);
            g.pixel_to_world(x as f64, y as f64)
        })
        .collect();
    pts[0] = a;
    *pts.last_mut().unwrap() = b;
    let mut out = vec![a];
    let mut i = 0;
    while i + 1 < pts.len() {
        let mut j = i + 1;
        while j + 1 < pts.len() && line_of_sight(grid, pts[i], pts[j + 1]) {
            j += 1;
        }
        out.push(pts[j]);
        i = j;
    }
    out
}

fn line_of_sight(grid: &BinaryGrid, a: (f64, f64), b: (f64, f64)) -> bool {
    let res = grid.geometry.resolution;
    let n = ((a.0 - b.0).hypot(a.1 - b.1) / (0.5 * res)).ceil().max(1.0) as usize;
    (0..=n).all(|k| {
        let f = k as f64 / n as f64;
        grid.is_free_world(a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathplan::{PrincipalAxes, RegionPlan, Waypoint};
    use crate::rfsim::AccessPoint;
    use rand::SeedableRng;

    fn straight_plan(n: usize, spacing: f64) -> SurveyPlan {
        SurveyPlan {
            cell_size: spacing,
            regions: vec![RegionPlan {
                region_id: 0,
                axes: PrincipalAxes::IDENTITY,
                waypoints: (0..n)
                    .map(|i| Waypoint {
                        x: i as f64 * spacing,
                        y: 0.0,
                        heading: 0.0,
                        row: 0,
                        col: i,
                    })
                    .collect(),
            }],
        }
    }

    fn world() -> RfWorld {
        RfWorld::new(vec![AccessPoint::new(0, 50.0, 3.0), AccessPoint::new(1, 5.0, -4.0)], 1)
    }

    #[test]
    fn trapezoid_kinematics() {
        let p = Trapezoid::new(100.0, 0.5, 0.3);
        // 200 s at cruise plus one extra ramp time
        assert!((p.duration - (200.0 + 0.5 / 0.3)).abs() < 1e-9);
        assert!((p.distance_at(p.duration) - 100.0).abs() < 1e-9);
        assert!((p.distance_at(p.duration / 2.0) - 50.0).abs() < 1e-9);
        let tri = Trapezoid::new(0.8, 0.5, 0.3);
        assert!((tri.duration - 2.0 * (0.8f64 / 0.3).sqrt()).abs() < 1e-12);
        assert!((tri.distance_at(tri.duration / 2.0) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn straight_no_sojourn_duration() {
        let w = world();
        let plan = straight_plan(126, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let motion = MotionParams {
            match_scan_spacing: false,
            ..Default::default()
        };
        let (_, rep) = simulate_survey(&w, &plan, SurveyMode::NO_SOJOURN, &motion, &mut rng).unwrap();
        assert!((rep.distance_m - 100.0).abs() < 1e-9);
        assert!(rep.duration_s >= 200.0 && rep.duration_s <= 200.0 + 2.0 * 0.5 / 0.3 + 1e-9);
        assert_eq!(rep.n_decel_events, 1);
    }

    #[test]
    fn straight_sojourn_duration() {
        let w = world();
        let plan = straight_plan(126, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (db, rep) = simulate_survey(&w, &plan, SurveyMode::SOJOURN, &MotionParams::default(), &mut rng).unwrap();
        assert!(rep.duration_s >= 200.0 + 125.0 * 10.0);
        assert_eq!(rep.n_decel_events, 125);
        assert_eq!(db.locations().len(), 126);
        assert_eq!(db.samples.len(), 126 * 4);
    }

    #[test]
    fn no_sojourn_scans_map_to_distinct_locations() {
        let w = world();
        let plan = straight_plan(126, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fast = MotionParams {
            match_scan_spacing: false,
            ..Default::default()
        };
        let (db, _) = simulate_survey(&w, &plan, SurveyMode::NO_SOJOURN, &fast, &mut rng).unwrap();
        let locs = db.locations();
        // one scan per 1.5 m of path
        assert!((60..=70).contains(&locs.len()), "{}", locs.len());
        assert!(locs.iter().all(|l| l.samples.len() == 4));

        let (db, rep) = simulate_survey(&w, &plan, SurveyMode::NO_SOJOURN, &MotionParams::default(), &mut rng).unwrap();
        // matched speed: about one scan per grid cell
        assert!((115..=126).contains(&db.locations().len()), "{}", db.locations().len());
        assert!(rep.duration_s >= 100.0 / (0.8 / 3.0));
    }

    #[test]
    fn empty_plan_is_an_error() {
        let w = world();
        let plan = SurveyPlan {
            cell_size: 0.8,
            regions: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = simulate_survey(&w, &plan, SurveyMode::NO_SOJOURN, &MotionParams::default(), &mut rng);
        assert!(matches!(r, Err(Error::EmptyPlan)));
    }

    #[test]
    fn turning_costs_time() {
        let mut plan = straight_plan(4, 1.0);
        for (i, wp) in plan.regions[0].waypoints.iter_mut().enumerate() {
            if i >= 2 {
                wp.row = 1;
                wp.x = 1.0;
                wp.y = (i - 1) as f64;
            }
        }
        let motion = MotionParams::default();
        let stops = plan_stops(&plan);
        let tl = Timeline::build(&stops, None, None, &motion, None, motion.v_max);
        // legs: row 0, the hop to row 1, row 1; one quarter turn before the hop
        assert_eq!(tl.n_decel_events, 3);
        let one = Trapezoid::new(1.0, 0.5, 0.3).duration;
        let turn = std::f64::consts::FRAC_PI_2 / motion.turn_rate_rad_s;
        assert!((tl.duration_s - (3.0 * one + turn)).abs() < 1e-9, "{}", tl.duration_s);
    }
}
