//! Fingerprint maps (GP mean and variance per reference location) and
//! online localization: Bayes, KNN and a particle filter on top of either.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anomaly::{self, gp_predict, GpHyper, GpModel, GpParams};
use crate::gridmap::{BinaryGrid, Cell};
use crate::pathplan::SurveyPlan;
use crate::rfsim::{clamp_rssi, simulate_scan, Band, FingerprintDatabase, Reading, RfWorld, RSSI_MIN};
use crate::{Error, Result};

/// A reference location of the map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub region_id: usize,
}

impl GridPoint {
    pub fn pos(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

/// Every waypoint of the plan, in plan order.
pub fn grid_points(plan: &SurveyPlan) -> Vec<GridPoint> {
    plan.iter()
        .map(|(region_id, w)| GridPoint {
            x: w.x,
            y: w.y,
            region_id,
        })
        .collect()
}

/// Features are (AP, band) pairs: feature `a * 2 + band.index()` belongs to
/// `aps[a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintMap {
    pub points: Vec<GridPoint>,
    pub aps: Vec<u32>,
    /// Row-major `[point][feature]`.
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// (AP, band, region) combinations without samples, filled with the
    /// −100 dBm floor and prior variance.
    pub imputed: Vec<(u32, Band, usize)>,
}

impl FingerprintMap {
    pub fn n_features(&self) -> usize {
        2 * self.aps.len()
    }

    pub fn feature(&self, ap_id: u32, band: Band) -> Option<usize> {
        self.aps.binary_search(&ap_id).ok().map(|a| 2 * a + band.index())
    }

    pub fn means_at(&self, point: usize) -> &[f64] {
        let f = self.n_features();
        &self.mean[point * f..(point + 1) * f]
    }

    pub fn vars_at(&self, point: usize) -> &[f64] {
        let f = self.n_features();
        &self.var[point * f..(point + 1) * f]
    }

    pub fn nearest_point(&self, pos: (f64, f64)) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, p) in self.points.iter().enumerate() {
            let d = (p.x - pos.0).powi(2) + (p.y - pos.1).powi(2);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            grid_x: f64,
            grid_y: f64,
            region_id: usize,
            ap: u32,
            band: Band,
            mean_dbm: f64,
            var_db2: f64,
        }
        let mut w = csv::Writer::from_writer(out);
        let nf = self.n_features();
        for (i, p) in self.points.iter().enumerate() {
            for (a, &ap) in self.aps.iter().enumerate() {
                for band in Band::BOTH {
                    let f = i * nf + 2 * a + band.index();
                    w.serialize(Row {
                        grid_x: p.x,
                        grid_y: p.y,
                        region_id: p.region_id,
                        ap,
                        band,
                        mean_dbm: self.mean[f],
                        var_db2: self.var[f],
                    })?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Reads a map written by [`FingerprintMap::write_csv`]. Imputation
    /// flags are not stored.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            grid_x: f64,
            grid_y: f64,
            region_id: usize,
            ap: u32,
            band: Band,
            mean_dbm: f64,
            var_db2: f64,
        }
        let mut rows = Vec::new();
        for rec in csv::Reader::from_reader(input).deserialize() {
            let r: Row = rec?;
            if !(r.var_db2 > 0.0) {
                return Err(Error::Parse(format!("non-positive variance {}", r.var_db2)));
            }
            rows.push(r);
        }
        let mut aps: Vec<u32> = rows.iter().map(|r| r.ap).collect();
        aps.sort_unstable();
        aps.dedup();
        let mut points: Vec<GridPoint> = Vec::new();
        let mut index: BTreeMap<(u64, u64, usize), usize> = BTreeMap::new();
        for r in &rows {
            index.entry((r.grid_x.to_bits(), r.grid_y.to_bits(), r.region_id)).or_insert_with(|| {
                points.push(GridPoint {
                    x: r.grid_x,
                    y: r.grid_y,
                    region_id: r.region_id,
                });
                points.len() - 1
            });
        }
        let nf = 2 * aps.len();
        let mut mean = vec![f64::NAN; points.len() * nf];
        let mut var = vec![f64::NAN; points.len() * nf];
        for r in &rows {
            let i = index[&(r.grid_x.to_bits(), r.grid_y.to_bits(), r.region_id)];
            let a = aps.binary_search(&r.ap).expect("collected above");
            mean[i * nf + 2 * a + r.band.index()] = r.mean_dbm;
            var[i * nf + 2 * a + r.band.index()] = r.var_db2;
        }
        if mean.iter().any(|v| v.is_nan()) {
            return Err(Error::Parse("map does not cover every (point, ap, band)".into()));
        }
        Ok(Self {
            points,
            aps,
            mean,
            var,
            imputed: Vec::new(),
        })
    }
}

/// Per-(AP, band, region) GP maps. Hyperparameters found in `reuse` (from
/// detection) are used as is; the others are fitted here.
pub fn build_map(
    db: &FingerprintDatabase,
    points: &[GridPoint],
    gp: &GpParams,
    reuse: &BTreeMap<(u32, Band, usize), GpHyper>,
) -> Result<FingerprintMap> {
    let aps = db.ap_ids();
    let nf = 2 * aps.len();
    let mut mean = vec![RSSI_MIN; points.len() * nf];
    let prior = GpHyper::DEFAULT.sigma_f.powi(2) + GpHyper::DEFAULT.noise_sigma.powi(2);
    let mut var = vec![prior; points.len() * nf];
    let mut by_region: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        by_region.entry(p.region_id).or_default().push(i);
    }
    let jobs: BTreeMap<_, _> = anomaly::jobs(db).into_iter().collect();
    let mut imputed = Vec::new();
    for (&region, idx) in &by_region {
        let targets: Vec<(f64, f64)> = idx.iter().map(|&i| points[i].pos()).collect();
        for (a, &ap) in aps.iter().enumerate() {
            for band in Band::BOTH {
                let Some(rows) = jobs.get(&(ap, band, region)) else {
                    imputed.push((ap, band, region));
                    continue;
                };
                let x: Vec<(f64, f64)> = rows.iter().map(|&r| db.samples[r].pos()).collect();
                let y: Vec<f64> = rows.iter().map(|&r| db.samples[r].rssi).collect();
                let hyper = match reuse.get(&(ap, band, region)) {
                    Some(h) => *h,
                    None => anomaly::fit_hyperparameters(&x, &y, gp),
                };
                let model = GpModel::fit_centered(&x, &y, hyper)?;
                let (mu, v) = gp_predict(&model, &targets);
                for (k, &i) in idx.iter().enumerate() {
                    let f = i * nf + 2 * a + band.index();
                    mean[f] = clamp_rssi(mu[k]);
                    var[f] = v[k];
                }
            }
        }
    }
    if !imputed.is_empty() {
        log::info!("{} (ap, band, region) maps imputed at -100 dBm", imputed.len());
    }
    Ok(FingerprintMap {
        points: points.to_vec(),
        aps,
        mean,
        var,
        imputed,
    })
}

/// RSSI readings taken at an unknown location.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Observation {
    pub readings: Vec<(u32, Band, f64)>,
}

impl Observation {
    /// Lost readings are dropped.
    pub fn from_scan(scan: &[Reading]) -> Self {
        Self {
            readings: scan.iter().filter_map(|r| r.rssi.map(|v| (r.ap_id, r.band, v))).collect(),
        }
    }

    /// Dense feature vector for `map`; absent features read −100 dBm.
    pub fn vector(&self, map: &FingerprintMap) -> Vec<f64> {
        let mut v = vec![RSSI_MIN; map.n_features()];
        for &(ap, band, rssi) in &self.readings {
            if let Some(f) = map.feature(ap, band) {
                v[f] = rssi;
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocParams {
    pub knn_k: usize,
    pub knn_weighted: bool,
    /// Added to the map variance in the Bayes likelihood, dB².
    pub obs_noise_var: f64,
}

impl Default for LocParams {
    fn default() -> Self {
        Self {
            knn_k: 2,
            knn_weighted: false,
            obs_noise_var: 0.0,
        }
    }
}

/// Σ_i log N(o_i; μ_ji, var_ji + obs_noise_var) for every grid point j.
pub fn log_likelihoods(map: &FingerprintMap, o: &[f64], obs_noise_var: f64) -> Vec<f64> {
    let nf = map.n_features();
    (0..map.points.len())
        .map(|j| {
            let (m, v) = (&map.mean[j * nf..(j + 1) * nf], &map.var[j * nf..(j + 1) * nf]);
            let mut ll = 0.0;
            for f in 0..nf {
                let s2 = v[f] + obs_noise_var;
                ll -= 0.5 * ((2.0 * std::f64::consts::PI * s2).ln() + (o[f] - m[f]).powi(2) / s2);
            }
            ll
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Index of the most likely grid point (lowest index on ties).
pub fn bayes_index(map: &FingerprintMap, obs: &Observation, params: &LocParams) -> usize {
    argmax(&log_likelihoods(map, &obs.vector(map), params.obs_noise_var))
}

pub fn bayes_localize(map: &FingerprintMap, obs: &Observation, params: &LocParams) -> (f64, f64) {
    map.points[bayes_index(map, obs, params)].pos()
}

/// Grid points ordered by RSSI-space distance to `o`, ties by index.
fn rssi_ranking(map: &FingerprintMap, o: &[f64]) -> Vec<(f64, usize)> {
    let nf = map.n_features();
    let mut d: Vec<(f64, usize)> = (0..map.points.len())
        .map(|j| {
            let m = &map.mean[j * nf..(j + 1) * nf];
            (m.iter().zip(o).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), j)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d
}

/// Centroid of the `k` grid points nearest in RSSI space; inverse-distance
/// weighted when `weighted`.
pub fn knn_localize(map: &FingerprintMap, obs: &Observation, k: usize, weighted: bool) -> (f64, f64) {
    let ranked = rssi_ranking(map, &obs.vector(map));
    let k = k.clamp(1, ranked.len().max(1));
    let mut acc = (0.0, 0.0, 0.0);
    for &(d, j) in &ranked[..k] {
        let w = if weighted { 1.0 / d.max(1e-9) } else { 1.0 };
        acc.0 += w * map.points[j].x;
        acc.1 += w * map.points[j].y;
        acc.2 += w;
    }
    (acc.0 / acc.2, acc.1 / acc.2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PfMethod {
    /// Weight by the Bayes likelihood of the particle's nearest grid point.
    Bayes,
    /// Weight by a Gaussian around the KNN estimate.
    KnnSnap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfParams {
    pub n_particles: usize,
    pub motion_std_m: f64,
    pub method: PfMethod,
    /// Spread of the KNN-snap likelihood, m.
    pub snap_std_m: f64,
    /// Attempts to draw a move that stays in free space before staying put.
    pub max_move_tries: usize,
}

impl Default for PfParams {
    fn default() -> Self {
        Self {
            n_particles: 500,
            motion_std_m: 0.3,
            method: PfMethod::Bayes,
            snap_std_m: 1.0,
            max_move_tries: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub pos: (f64, f64),
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub particles: Vec<Particle>,
}

impl ParticleState {
    /// Uniform over the free pixels of `free`, equal weights.
    pub fn uniform(free: &BinaryGrid, n: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let cells: Vec<usize> = (0..free.cells.len()).filter(|&i| free.cells[i] == Cell::Free).collect();
        if cells.is_empty() {
            return Err(Error::InvalidParameter("no free space for particles".into()));
        }
        let g = &free.geometry;
        let particles = (0..n)
            .map(|_| {
                let (x, y) = g.coords(cells[rng.gen_range(0..cells.len())]);
                let jx: f64 = rng.gen_range(-0.49..0.49);
                let jy: f64 = rng.gen_range(-0.49..0.49);
                Particle {
                    pos: g.pixel_to_world(x as f64 + jx, y as f64 + jy),
                    weight: 1.0 / n as f64,
                }
            })
            .collect();
        Ok(Self { particles })
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.particles.iter().map(|p| p.weight * p.weight).sum::<f64>()
    }

    pub fn estimate(&self) -> (f64, f64) {
        self.particles
            .iter()
            .fold((0.0, 0.0), |a, p| (a.0 + p.weight * p.pos.0, a.1 + p.weight * p.pos.1))
    }

    /// Weighted positional variance (trace of the covariance), m².
    pub fn spread(&self) -> f64 {
        let m = self.estimate();
        self.particles
            .iter()
            .map(|p| p.weight * ((p.pos.0 - m.0).powi(2) + (p.pos.1 - m.1).powi(2)))
            .sum()
    }

    fn normalize(&mut self) -> bool {
        let total: f64 = self.particles.iter().map(|p| p.weight).sum();
        if !(total > 0.0) || !total.is_finite() {
            return false;
        }
        for p in &mut self.particles {
            p.weight /= total;
        }
        true
    }

    fn systematic_resample(&mut self, rng: &mut ChaCha8Rng) {
        let n = self.particles.len();
        let u0: f64 = rng.gen::<f64>() / n as f64;
        let mut out = Vec::with_capacity(n);
        let mut cum = self.particles[0].weight;
        let mut i = 0;
        for k in 0..n {
            let u = u0 + k as f64 / n as f64;
            while u > cum && i + 1 < n {
                i += 1;
                cum += self.particles[i].weight;
            }
            out.push(Particle {
                pos: self.particles[i].pos,
                weight: 1.0 / n as f64,
            });
        }
        self.particles = out;
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PfTrack {
    pub estimates: Vec<(f64, f64)>,
    pub spread: Vec<f64>,
    pub reinitializations: usize,
    pub resamples: usize,
}

/// What happened during one filter step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepEvents {
    pub reinitialized: bool,
    pub resampled: bool,
}

/// One predict/update/resample cycle of the SIR filter.
pub fn pf_step(
    state: &mut ParticleState,
    map: &FingerprintMap,
    obs: &Observation,
    free: &BinaryGrid,
    pf: &PfParams,
    loc: &LocParams,
    rng: &mut ChaCha8Rng,
) -> Result<StepEvents> {
    let n = state.particles.len();
    let mut events = StepEvents::default();
    if pf.motion_std_m > 0.0 {
        for p in &mut state.particles {
            for _ in 0..pf.max_move_tries {
                let dx: f64 = Distribution::<f64>::sample(&StandardNormal, rng);
                let dy: f64 = Distribution::<f64>::sample(&StandardNormal, rng);
                let q = (p.pos.0 + pf.motion_std_m * dx, p.pos.1 + pf.motion_std_m * dy);
                if free.is_free_world(q.0, q.1) {
                    p.pos = q;
                    break;
                }
            }
        }
    }
    match pf.method {
        PfMethod::Bayes => {
            let ll = log_likelihoods(map, &obs.vector(map), loc.obs_noise_var);
            let top = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for p in &mut state.particles {
                p.weight *= (ll[map.nearest_point(p.pos)] - top).exp();
            }
        }
        PfMethod::KnnSnap => {
            let z = knn_localize(map, obs, loc.knn_k, loc.knn_weighted);
            let s2 = pf.snap_std_m * pf.snap_std_m;
            for p in &mut state.particles {
                let d2 = (p.pos.0 - z.0).powi(2) + (p.pos.1 - z.1).powi(2);
                p.weight *= (-0.5 * d2 / s2).exp();
            }
        }
    }
    if !state.normalize() {
        log::warn!("all particle weights vanished; reinitializing");
        *state = ParticleState::uniform(free, n, rng)?;
        events.reinitialized = true;
    }
    if state.effective_sample_size() < 0.5 * n as f64 {
        state.systematic_resample(rng);
        events.resampled = true;
    }
    Ok(events)
}

/// SIR particle filter over a sequence of observations.
pub fn pf_track(
    map: &FingerprintMap,
    observations: &[Observation],
    free: &BinaryGrid,
    pf: &PfParams,
    loc: &LocParams,
    rng: &mut ChaCha8Rng,
) -> Result<PfTrack> {
    if pf.n_particles < 1 {
        return Err(Error::InvalidParameter("particle filter needs at least one particle".into()));
    }
    let mut state = ParticleState::uniform(free, pf.n_particles, rng)?;
    let mut track = PfTrack::default();
    for obs in observations {
        let ev = pf_step(&mut state, map, obs, free, pf, loc, rng)?;
        track.reinitializations += ev.reinitialized as usize;
        track.resamples += ev.resampled as usize;
        track.estimates.push(state.estimate());
        track.spread.push(state.spread());
    }
    Ok(track)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocMethod {
    Bayes,
    Knn,
    PfBayes,
    PfKnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub method: LocMethod,
    pub n: usize,
    pub mean_m: f64,
    pub max_m: f64,
    pub median_m: f64,
    /// (error_m, fraction) at 1% steps; the last fraction is 1.0.
    pub cdf: Vec<(f64, f64)>,
    #[serde(skip)]
    pub errors: Vec<f64>,
}

impl ErrorStats {
    pub fn from_errors(method: LocMethod, errors: Vec<f64>) -> Self {
        let n = errors.len();
        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        let q = |frac: f64| -> f64 {
            if n == 0 {
                return 0.0;
            }
            let k = ((frac * n as f64).ceil() as usize).clamp(1, n);
            sorted[k - 1]
        };
        let cdf = (1..=100).map(|k| (q(k as f64 / 100.0), k as f64 / 100.0)).collect();
        Self {
            method,
            n,
            mean_m: if n == 0 { 0.0 } else { errors.iter().sum::<f64>() / n as f64 },
            max_m: sorted.last().copied().unwrap_or(0.0),
            median_m: q(0.5),
            cdf,
            errors,
        }
    }

    pub fn write_cdf_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["error_m", "fraction"])?;
        for (e, f) in &self.cdf {
            w.write_record([e.to_string(), f.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Scan at each trajectory point (one scan every `scan_interval_s`, using
/// `rng`), localize, and collect the errors.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    map: &FingerprintMap,
    world: &RfWorld,
    trajectory: &[(f64, f64)],
    method: LocMethod,
    epoch: u32,
    scan_interval_s: f64,
    free: &BinaryGrid,
    loc: &LocParams,
    pf: &PfParams,
    rng: &mut ChaCha8Rng,
) -> Result<ErrorStats> {
    let obs: Vec<Observation> = trajectory
        .iter()
        .enumerate()
        .map(|(k, &p)| Observation::from_scan(&simulate_scan(world, p, k as f64 * scan_interval_s, epoch, rng)))
        .collect();
    let estimates: Vec<(f64, f64)> = match method {
        LocMethod::Bayes => obs.iter().map(|o| bayes_localize(map, o, loc)).collect(),
        LocMethod::Knn => obs.iter().map(|o| knn_localize(map, o, loc.knn_k, loc.knn_weighted)).collect(),
        LocMethod::PfBayes | LocMethod::PfKnn => {
            let pf = PfParams {
                method: if method == LocMethod::PfBayes { PfMethod::Bayes } else { PfMethod::KnnSnap },
                ..*pf
            };
            pf_track(map, &obs, free, &pf, loc, rng)?.estimates
        }
    };
    let errors = trajectory
        .iter()
        .zip(&estimates)
        .map(|(a, b)| (a.0 - b.0).hypot(a.1 - b.1))
        .collect();
    Ok(ErrorStats::from_errors(method, errors))
}

/// Independent uniform test points over free space.
pub fn random_test_points(free: &BinaryGrid, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>> {
    Ok(ParticleState::uniform(free, n, rng)?.particles.into_iter().map(|p| p.pos).collect())
}

/// A random walk through free space with roughly `step_m` per step.
pub fn random_walk(free: &BinaryGrid, n: usize, step_m: f64, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>> {
    let mut p = random_test_points(free, 1, rng)?[0];
    let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(p);
        for attempt in 0..64 {
            let h = heading + if attempt == 0 { rng.gen_range(-0.3..0.3) } else { rng.gen_range(-3.14..3.14) };
            let q = (p.0 + step_m * h.cos(), p.1 + step_m * h.sin());
            if free.is_free_world(q.0, q.1) {
                p = q;
                heading = h;
                break;
            }
        }
    }
    Ok(out)
}
