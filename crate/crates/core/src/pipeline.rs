//! End-to-end runs: configuration, floor preparation, the survey and
//! post-processing stages, evaluation, artifacts and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anomaly::{self, DetectReport, DetectSummary, GpParams, ShiftParams};
use crate::fpmap::{self, ErrorStats, FingerprintMap, GridPoint, LocMethod, LocParams, PfParams};
use crate::gridmap::{self, BinaryGrid, OccupancyGrid};
use crate::pathplan::{self, SurveyPlan};
use crate::recovery::{self, SvrParams};
use crate::rfsim::{
    Band, FingerprintDatabase, FingerprintSample, Flag, MotionParams, PowerModel, RfWorld, SurveyMode, Surveyor, TimeEnergyReport,
    WorldParams,
};
use crate::rng::{self, Stream};
use crate::segmentation::{self, SegmentParams, SegmentedMap};
use crate::{fixtures, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    /// Built-in floor (`room`, `plus`, `floor3-like`); ignored when `path` is set.
    pub fixture: String,
    /// PGM file with an optional `<name>.meta.json` sidecar.
    pub path: Option<PathBuf>,
    /// Gray values below this are obstacles.
    pub obstacle_threshold: u16,
    pub robot_radius_m: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            fixture: "floor3-like".into(),
            path: None,
            obstacle_threshold: gridmap::DEFAULT_OBSTACLE_THRESHOLD as u16,
            robot_radius_m: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub cell_size_m: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { cell_size_m: 0.8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurveyConfig {
    pub mode: SurveyMode,
    /// Mode used to re-measure abnormal samples and for the baseline.
    pub sojourn: SurveyMode,
}

impl Default for SurveyConfig {
    fn default() -> Self {
        Self {
            mode: SurveyMode::NO_SOJOURN,
            sojourn: SurveyMode::SOJOURN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    pub enabled: bool,
    pub svr: SvrParams,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            svr: SvrParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalyConfig {
    pub enabled: bool,
    pub gp: GpParams,
    pub shift: ShiftParams,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            gp: GpParams::default(),
            shift: ShiftParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of test locations (or trajectory steps for particle filters).
    pub test_points: usize,
    pub methods: Vec<LocMethod>,
    pub scan_interval_s: f64,
    /// Step length of the particle-filter test trajectory, m.
    pub walk_step_m: f64,
    pub loc: LocParams,
    pub pf: PfParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_points: 200,
            methods: vec![LocMethod::Bayes, LocMethod::Knn],
            scan_interval_s: 3.0,
            walk_step_m: 0.5,
            loc: LocParams::default(),
            pf: PfParams::default(),
        }
    }
}

/// Synthetic corruption of the surveyed database, for experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    /// Fraction of dual-measured (location, AP) pairs that lose one band.
    pub single_band_loss: f64,
    /// Fraction of measured samples offset by ±`gross_error_db`.
    pub gross_error_fraction: f64,
    pub gross_error_db: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            single_band_loss: 0.0,
            gross_error_fraction: 0.0,
            gross_error_db: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub epoch: u32,
    /// Database of an earlier epoch; enables shift repair.
    pub previous_db: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub map: MapConfig,
    pub segmentation: SegmentParams,
    pub plan: PlanConfig,
    pub world: WorldParams,
    pub motion: MotionParams,
    pub power: PowerModel,
    pub survey: SurveyConfig,
    pub recovery: RecoveryConfig,
    pub anomaly: AnomalyConfig,
    pub eval: EvalConfig,
    pub injection: InjectionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            epoch: 0,
            previous_db: None,
            output_dir: PathBuf::from("out"),
            map: MapConfig::default(),
            segmentation: SegmentParams::default(),
            plan: PlanConfig::default(),
            world: WorldParams::default(),
            motion: MotionParams::default(),
            power: PowerModel::default(),
            survey: SurveyConfig::default(),
            recovery: RecoveryConfig::default(),
            anomaly: AnomalyConfig::default(),
            eval: EvalConfig::default(),
            injection: InjectionConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.plan.cell_size_m > 0.0) {
            return bad("plan.cell_size_m must be positive");
        }
        if !(self.map.robot_radius_m >= 0.0) {
            return bad("map.robot_radius_m must be non-negative");
        }
        if self.map.path.is_none() && fixtures::by_name(&self.map.fixture).is_none() {
            return Err(Error::Config(format!("unknown fixture {:?}", self.map.fixture)));
        }
        if !matches!(self.survey.sojourn, SurveyMode::Sojourn { .. }) {
            return bad("survey.sojourn must be a sojourn mode");
        }
        for (name, v) in [
            ("injection.single_band_loss", self.injection.single_band_loss),
            ("injection.gross_error_fraction", self.injection.gross_error_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        if self.eval.loc.knn_k == 0 {
            return bad("eval.loc.knn_k must be at least 1");
        }
        if self.eval.methods.iter().any(|m| matches!(m, LocMethod::PfBayes | LocMethod::PfKnn))
            && self.eval.pf.n_particles < 100
        {
            return bad("eval.pf.n_particles must be at least 100");
        }
        self.motion.validate()?;
        self.survey.mode.validate()?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Pipeline stages; each has its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Load,
    Segment,
    Plan,
    World,
    Survey,
    Recover,
    Detect,
    Repair,
    BuildMap,
    Eval,
    Write,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        2 + self as i32
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Segment => "segment",
            Stage::Plan => "plan",
            Stage::World => "world",
            Stage::Survey => "survey",
            Stage::Recover => "recover",
            Stage::Detect => "detect",
            Stage::Repair => "repair",
            Stage::BuildMap => "build-map",
            Stage::Eval => "eval",
            Stage::Write => "write",
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{} stage failed: {source}", stage.name())]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
    pub partial: Box<RunManifest>,
}

trait StageResult<T> {
    fn stage(self, stage: Stage, manifest: &RunManifest) -> std::result::Result<T, StageError>;
}

impl<T> StageResult<T> for Result<T> {
    fn stage(self, stage: Stage, manifest: &RunManifest) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError {
            stage,
            source,
            partial: Box::new(manifest.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub epoch: u32,
    pub stages: Vec<StageTiming>,
    pub artifacts: Vec<Artifact>,
    pub completed: bool,
}

impl RunManifest {
    fn new(cfg: &PipelineConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            epoch: cfg.epoch,
            ..Default::default()
        }
    }

    fn time<T>(&mut self, stage: Stage, start: Instant, value: T) -> T {
        self.stages.push(StageTiming {
            stage,
            seconds: start.elapsed().as_secs_f64(),
        });
        value
    }
}

/// The floor-dependent, world-independent part of a run.
#[derive(Debug, Clone)]
pub struct Floor {
    pub grid: OccupancyGrid,
    pub inflated: BinaryGrid,
    pub segmented: SegmentedMap,
    pub plan: SurveyPlan,
    pub points: Vec<GridPoint>,
}

impl Floor {
    pub fn load_grid(cfg: &MapConfig) -> Result<OccupancyGrid> {
        match &cfg.path {
            Some(p) => gridmap::load_grid(p),
            None => fixtures::by_name(&cfg.fixture).ok_or_else(|| Error::Config(format!("unknown fixture {:?}", cfg.fixture))),
        }
    }

    pub fn prepare(cfg: &PipelineConfig) -> std::result::Result<Self, StageError> {
        let m = RunManifest::new(cfg);
        let grid = Self::load_grid(&cfg.map).stage(Stage::Load, &m)?;
        let (inflated, segmented) = segment_grid(&grid, cfg).stage(Stage::Segment, &m)?;
        let plan = pathplan::plan_survey(&segmented, &inflated, cfg.plan.cell_size_m).stage(Stage::Plan, &m)?;
        let points = fpmap::grid_points(&plan);
        Ok(Self {
            grid,
            inflated,
            segmented,
            plan,
            points,
        })
    }
}

/// Threshold, inflate, distance transform and segment.
pub fn segment_grid(grid: &OccupancyGrid, cfg: &PipelineConfig) -> Result<(BinaryGrid, SegmentedMap)> {
    let binary = gridmap::threshold_obstacles(grid, cfg.map.obstacle_threshold);
    let inflated = gridmap::inflate_obstacles(&binary, cfg.map.robot_radius_m);
    let dist = gridmap::distance_transform(&inflated)?;
    let seg = segmentation::segment(&dist, &cfg.segmentation);
    Ok((inflated, seg))
}

/// The RF world of `cfg.seed`; identical for every epoch and mode.
pub fn generate_world(cfg: &PipelineConfig, floor: &Floor) -> Result<RfWorld> {
    RfWorld::generate(&cfg.world, &floor.inflated, &mut rng::stream(cfg.seed, Stream::World))
}

/// Mark one band lost for a `fraction` of the (location, AP) pairs where
/// both bands were measured. Returns the affected rows.
pub fn inject_single_band_loss(db: &mut FingerprintDatabase, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut rows = Vec::new();
    if fraction <= 0.0 {
        return rows;
    }
    let aps = db.ap_ids();
    for loc in db.locations() {
        for &ap in &aps {
            let pair = Band::BOTH.map(|b| db.find_at(&loc, ap, b));
            let [Some(a), Some(b)] = pair else { continue };
            if db.samples[a].flag != Flag::Measured || db.samples[b].flag != Flag::Measured {
                continue;
            }
            if rng.gen::<f64>() < fraction {
                let row = if rng.gen::<bool>() { a } else { b };
                db.samples[row] = db.samples[row].lost();
                rows.push(row);
            }
        }
    }
    rows
}

/// Offset a `fraction` of the measured samples by ±`magnitude` dB.
pub fn inject_gross_errors(db: &mut FingerprintDatabase, fraction: f64, magnitude: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut rows = Vec::new();
    if fraction <= 0.0 {
        return rows;
    }
    for (i, s) in db.samples.iter_mut().enumerate() {
        if s.flag != Flag::Measured {
            continue;
        }
        if rng.gen::<f64>() < fraction {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            s.rssi = crate::rfsim::clamp_rssi(s.rssi + sign * magnitude);
            rows.push(i);
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub epoch: u32,
    pub mode: SurveyMode,
    pub waypoints: usize,
    pub locations: usize,
    pub samples: usize,
    pub survey: TimeEnergyReport,
    pub resurvey: TimeEnergyReport,
    pub injected_losses: usize,
    pub injected_gross_errors: usize,
    pub lost_before_recovery: usize,
    pub recovered_dual: usize,
    pub lost_after_recovery: usize,
    pub detect_jobs: usize,
    pub nonconverged_jobs: usize,
    pub outliers: usize,
    pub shifted: usize,
    pub resurveyed_samples: usize,
    pub resurvey_locations: usize,
    pub imputed_maps: usize,
    pub errors: Vec<ErrorStats>,
}

impl RunReport {
    /// Survey plus resurvey.
    pub fn total(&self) -> TimeEnergyReport {
        self.survey.add(&self.resurvey)
    }

    pub fn error(&self, method: LocMethod) -> Option<&ErrorStats> {
        self.errors.iter().find(|e| e.method == method)
    }
}

/// Everything a run produces, in memory.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub world: RfWorld,
    /// Database as surveyed (after any injection).
    pub raw_db: FingerprintDatabase,
    pub db: FingerprintDatabase,
    pub detect: Vec<DetectSummary>,
    pub map: FingerprintMap,
    pub report: RunReport,
    pub manifest: RunManifest,
}

/// Run every stage on a prepared floor. Nothing is written to disk.
pub fn run_on_floor(
    cfg: &PipelineConfig,
    floor: &Floor,
    previous: Option<&FingerprintDatabase>,
) -> std::result::Result<PipelineRun, StageError> {
    let mut m = RunManifest::new(cfg);
    cfg.validate().stage(Stage::Config, &m)?;

    let t = Instant::now();
    let world = generate_world(cfg, floor).stage(Stage::World, &m)?;
    m.time(Stage::World, t, ());

    let t = Instant::now();
    let surveyor = Surveyor {
        world: &world,
        motion: cfg.motion,
        power: cfg.power,
        nav: Some(&floor.inflated),
    };
    let mut survey_rng = rng::stream_with(cfg.seed, Stream::Survey, cfg.epoch as u64);
    let (mut db, survey_report, timeline) = surveyor
        .survey(&floor.plan, cfg.survey.mode, cfg.epoch, &mut survey_rng)
        .stage(Stage::Survey, &m)?;
    let mut inj_rng = rng::stream_with(cfg.seed, Stream::Injection, cfg.epoch as u64);
    let injected_losses = inject_single_band_loss(&mut db, cfg.injection.single_band_loss, &mut inj_rng).len();
    let injected_gross = inject_gross_errors(
        &mut db,
        cfg.injection.gross_error_fraction,
        cfg.injection.gross_error_db,
        &mut inj_rng,
    )
    .len();
    let raw_db = db.clone();
    m.time(Stage::Survey, t, ());

    let lost_before = db.count_flag(Flag::Lost);
    if cfg.recovery.enabled {
        let t = Instant::now();
        let regs = recovery::fit_regressors(&db, &cfg.recovery.svr);
        db = recovery::recover_lost(&db, &regs);
        m.time(Stage::Recover, t, ());
    }
    let recovered_dual = db.count_flag(Flag::RecoveredDual);
    let lost_after = db.count_flag(Flag::Lost);

    let mut detect_reports: Vec<DetectReport> = Vec::new();
    let mut summaries = Vec::new();
    let mut resurvey = TimeEnergyReport::default();
    let (mut shifted, mut resurveyed, mut resurvey_locations) = (0, 0, 0);
    if cfg.anomaly.enabled {
        let t = Instant::now();
        detect_reports = anomaly::detect_all(&db, &cfg.anomaly.gp).stage(Stage::Detect, &m)?;
        summaries = detect_reports.iter().map(|r| r.summary(&db)).collect();
        m.time(Stage::Detect, t, ());

        let t = Instant::now();
        let outcome = anomaly::repair_abnormal(&db, &summaries, previous, &cfg.anomaly.shift);
        shifted = outcome.shifted_rows.len();
        db = outcome.db;
        if !outcome.resurvey.is_empty() {
            let mut rs_rng = rng::stream_with(cfg.seed, Stream::Resurvey, cfg.epoch as u64);
            let start = timeline.position(timeline.duration_s);
            let (count, rep) = resurvey_pending(
                &surveyor,
                &mut db,
                &outcome.resurvey,
                &outcome.pending_rows,
                start,
                cfg.survey.sojourn,
                timeline.duration_s,
                &mut rs_rng,
            )
            .stage(Stage::Repair, &m)?;
            resurveyed = count;
            resurvey = rep;
            resurvey_locations = outcome.resurvey.len();
        }
        m.time(Stage::Repair, t, ());
    }

    let t = Instant::now();
    let reuse: BTreeMap<_, _> = detect_reports
        .iter()
        .filter_map(|r| r.hyper().map(|h| ((r.ap, r.band, r.region), h)))
        .collect();
    let map = fpmap::build_map(&db, &floor.points, &cfg.anomaly.gp, &reuse).stage(Stage::BuildMap, &m)?;
    m.time(Stage::BuildMap, t, ());

    let t = Instant::now();
    let errors = evaluate_map(cfg, floor, &world, &map).stage(Stage::Eval, &m)?;
    m.time(Stage::Eval, t, ());

    let report = RunReport {
        seed: cfg.seed,
        epoch: cfg.epoch,
        mode: cfg.survey.mode,
        waypoints: floor.plan.waypoint_count(),
        locations: raw_db.locations().len(),
        samples: raw_db.samples.len(),
        survey: survey_report,
        resurvey,
        injected_losses,
        injected_gross_errors: injected_gross,
        lost_before_recovery: lost_before,
        recovered_dual,
        lost_after_recovery: lost_after,
        detect_jobs: detect_reports.iter().filter(|r| r.report.is_some()).count(),
        nonconverged_jobs: summaries
            .iter()
            .filter(|s| s.status == Some(anomaly::LnrStatus::NonConverged))
            .count(),
        outliers: summaries.iter().map(|s| s.outliers.len()).sum(),
        shifted,
        resurveyed_samples: resurveyed,
        resurvey_locations,
        imputed_maps: map.imputed.len(),
        errors,
    };
    m.completed = true;
    Ok(PipelineRun {
        world,
        raw_db,
        db,
        detect: summaries,
        map,
        report,
        manifest: m,
    })
}

/// Re-measure `locations` with sojourn (nearest-neighbour order from
/// `start`, clock starting at `t_offset`) and overwrite `pending` rows with
/// the fresh values. Returns the number of rows replaced and the cost.
#[allow(clippy::too_many_arguments)]
pub fn resurvey_pending(
    surveyor: &Surveyor<'_>,
    db: &mut FingerprintDatabase,
    locations: &[(usize, (f64, f64))],
    pending: &[usize],
    start: (f64, f64),
    mode: SurveyMode,
    t_offset: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, TimeEnergyReport)> {
    let targets = nearest_neighbour_order(locations, start);
    let (samples, report) = surveyor.sojourn_at(&targets, start, mode, db.epoch, t_offset, rng)?;
    let fresh: BTreeMap<(u64, u64, u32, Band), FingerprintSample> = samples
        .iter()
        .map(|s| ((s.x.to_bits(), s.y.to_bits(), s.ap_id, s.band), *s))
        .collect();
    let mut count = 0;
    for &row in pending {
        let s = db.samples[row];
        if let Some(new) = fresh.get(&(s.x.to_bits(), s.y.to_bits(), s.ap_id, s.band)) {
            db.samples[row] = FingerprintSample {
                region_id: s.region_id,
                ..*new
            };
            count += 1;
        }
    }
    Ok((count, report))
}

/// Greedy nearest-neighbour visiting order from `start` (ties to the
/// earlier target).
pub fn nearest_neighbour_order(targets: &[(usize, (f64, f64))], start: (f64, f64)) -> Vec<(usize, (f64, f64))> {
    let mut left = targets.to_vec();
    let mut out = Vec::with_capacity(left.len());
    let mut at = start;
    while !left.is_empty() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, t) in left.iter().enumerate() {
            let d = (t.1 .0 - at.0).powi(2) + (t.1 .1 - at.1).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        let t = left.remove(best);
        at = t.1;
        out.push(t);
    }
    out
}

/// Localization errors of `map` for every configured method. Test points
/// and observations depend only on the seed and epoch, so runs that differ
/// only in how the map was built are evaluated on identical data.
pub fn evaluate_map(cfg: &PipelineConfig, floor: &Floor, world: &RfWorld, map: &FingerprintMap) -> Result<Vec<ErrorStats>> {
    let e = &cfg.eval;
    let points = fpmap::random_test_points(&floor.inflated, e.test_points, &mut rng::stream_with(cfg.seed, Stream::Eval, 0))?;
    let walk = fpmap::random_walk(
        &floor.inflated,
        e.test_points,
        e.walk_step_m,
        &mut rng::stream_with(cfg.seed, Stream::Eval, 1),
    )?;
    e.methods
        .iter()
        .map(|&method| {
            let traj = match method {
                LocMethod::Bayes | LocMethod::Knn => &points,
                LocMethod::PfBayes | LocMethod::PfKnn => &walk,
            };
            let mut obs_rng = rng::stream_with(cfg.seed, Stream::Eval, 2 + cfg.epoch as u64);
            fpmap::evaluate(
                map,
                world,
                traj,
                method,
                cfg.epoch,
                e.scan_interval_s,
                &floor.inflated,
                &e.loc,
                &e.pf,
                &mut obs_rng,
            )
        })
        .collect()
}

fn write_artifact(dir: &Path, name: &str, bytes: &[u8], manifest: &mut RunManifest) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    manifest.artifacts.push(Artifact {
        name: name.into(),
        path,
        sha256: sha256_hex(bytes),
    });
    Ok(())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn method_label(m: LocMethod) -> &'static str {
    match m {
        LocMethod::Bayes => "bayes",
        LocMethod::Knn => "knn",
        LocMethod::PfBayes => "pf_bayes",
        LocMethod::PfKnn => "pf_knn",
    }
}

/// Write a run's artifacts and `manifest.json` into `dir`.
pub fn write_run(cfg: &PipelineConfig, floor: &Floor, run: &PipelineRun, dir: &Path) -> Result<RunManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = run.manifest.clone();
    m.artifacts.clear();
    write_artifact(dir, "config.toml", cfg.to_toml().as_bytes(), &mut m)?;
    write_artifact(dir, "world.json", &serde_json::to_vec_pretty(&run.world)?, &mut m)?;
    write_artifact(dir, "plan.jsonl", &csv_bytes(|b| floor.plan.write_jsonl(b))?, &mut m)?;
    write_artifact(dir, "db_raw.csv", &csv_bytes(|b| run.raw_db.write_csv(b))?, &mut m)?;
    write_artifact(dir, "db.csv", &csv_bytes(|b| run.db.write_csv(b))?, &mut m)?;
    write_artifact(dir, "detect.json", &serde_json::to_vec_pretty(&run.detect)?, &mut m)?;
    write_artifact(dir, "map.csv", &csv_bytes(|b| run.map.write_csv(b))?, &mut m)?;
    write_artifact(dir, "report.json", &serde_json::to_vec_pretty(&run.report)?, &mut m)?;
    for e in &run.report.errors {
        let name = format!("cdf_{}.csv", method_label(e.method));
        write_artifact(dir, &name, &csv_bytes(|b| e.write_cdf_csv(b))?, &mut m)?;
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(&path, e))?;
    Ok(m)
}

/// Full run from configuration to artifacts in `cfg.output_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<RunManifest, StageError> {
    let m = RunManifest::new(cfg);
    cfg.validate().stage(Stage::Config, &m)?;
    let previous = match &cfg.previous_db {
        Some(p) => Some(FingerprintDatabase::load(p).stage(Stage::Load, &m)?),
        None => None,
    };
    let floor = Floor::prepare(cfg)?;
    let run = run_on_floor(cfg, &floor, previous.as_ref())?;
    let manifest = run.manifest.clone();
    write_run(cfg, &floor, &run, &cfg.output_dir).stage(Stage::Write, &manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub method: LocMethod,
    pub auf_mean_m: f64,
    pub baseline_mean_m: f64,
    pub auf_max_m: f64,
    pub baseline_max_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    /// Survey duration without / with sojourn.
    pub time_ratio: f64,
    pub energy_ratio: f64,
    /// Same, with the resurvey of abnormal samples added to the AuF side.
    pub time_ratio_with_resurvey: f64,
    pub energy_ratio_with_resurvey: f64,
    pub methods: Vec<MethodComparison>,
    pub auf: RunReport,
    pub baseline: RunReport,
}

/// Configuration of the traditional survey: stop at every waypoint, no
/// recovery or repair, no injected corruption.
pub fn baseline_config(cfg: &PipelineConfig) -> PipelineConfig {
    let mut b = cfg.clone();
    b.survey.mode = cfg.survey.sojourn;
    b.recovery.enabled = false;
    b.anomaly.enabled = false;
    b.injection = InjectionConfig {
        single_band_loss: 0.0,
        gross_error_fraction: 0.0,
        ..cfg.injection
    };
    b
}

/// Survey without sojourn (with recovery and repair as configured) versus
/// the sojourn baseline on the same seed and world.
pub fn compare_modes(cfg: &PipelineConfig, floor: &Floor) -> std::result::Result<ComparisonReport, StageError> {
    let mut auf_cfg = cfg.clone();
    if !matches!(auf_cfg.survey.mode, SurveyMode::NoSojourn { .. }) {
        auf_cfg.survey.mode = SurveyMode::NO_SOJOURN;
    }
    let auf = run_on_floor(&auf_cfg, floor, None)?.report;
    let baseline = run_on_floor(&baseline_config(cfg), floor, None)?.report;
    let methods = auf
        .errors
        .iter()
        .filter_map(|a| {
            baseline.error(a.method).map(|b| MethodComparison {
                method: a.method,
                auf_mean_m: a.mean_m,
                baseline_mean_m: b.mean_m,
                auf_max_m: a.max_m,
                baseline_max_m: b.max_m,
            })
        })
        .collect();
    let total = auf.total();
    Ok(ComparisonReport {
        seed: cfg.seed,
        time_ratio: auf.survey.duration_s / baseline.survey.duration_s,
        energy_ratio: auf.survey.total_wh() / baseline.survey.total_wh(),
        time_ratio_with_resurvey: total.duration_s / baseline.survey.duration_s,
        energy_ratio_with_resurvey: total.total_wh() / baseline.survey.total_wh(),
        methods,
        auf,
        baseline,
    })
}
